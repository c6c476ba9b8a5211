//! Hardware profiles and the cost primitives built on them.
//!
//! A [`HardwareProfile`] describes one GPU-CPU pair: compute rates, the
//! size-dependent link bandwidth curve, memory capacities, and a calibration
//! table for moving tensors across the link with a dtype cast on either side.
//! Every function here is a pure function of the profile.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const GH200_TOML: &str = include_str!("../../../profiles/gh200.toml");
const DGX_A100_TOML: &str = include_str!("../../../profiles/dgx-a100.toml");
const DGX_2_TOML: &str = include_str!("../../../profiles/dgx-2.toml");

/// Names of the profiles compiled into the crate.
pub const BUILTIN_PROFILES: [&str; 3] = ["gh200", "dgx-a100", "dgx-2"];

fn default_achievable() -> f64 {
    0.6
}

fn default_cpu_adam_fraction() -> f64 {
    0.05
}

fn default_unpinned_penalty() -> f64 {
    1.0
}

/// Where the dtype cast happens when a tensor crosses the link.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CastStrategy {
    /// Cast on the GPU and move the full-precision tensor.
    CastOnGpuMoveFull,
    /// Move the half-precision tensor and cast on the CPU.
    CastOnCpuMoveHalf,
}

impl CastStrategy {
    pub const ALL: [CastStrategy; 2] = [
        CastStrategy::CastOnGpuMoveFull,
        CastStrategy::CastOnCpuMoveHalf,
    ];
}

/// One calibration row: moving a tensor of `tensor_bytes` (full-precision size)
/// with `strategy` took `seconds`, cast included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CastCostRow {
    pub tensor_bytes: f64,
    pub strategy: CastStrategy,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    /// Theoretical dense half-precision peak, flop/s.
    pub gpu_peak_flops: f64,
    /// Fraction of the theoretical peak that training kernels reach.
    #[serde(default = "default_achievable")]
    pub gpu_achievable_fraction: f64,
    pub cpu_peak_flops: f64,
    /// Fraction of the CPU peak an optimized Adam kernel sustains.
    #[serde(default = "default_cpu_adam_fraction")]
    pub cpu_adam_fraction: f64,
    /// Aggregate (bidirectional) link peak, bytes/s.
    pub link_peak_bw: f64,
    /// `(transfer_bytes, bytes/s)` knots, strictly increasing in size.
    pub link_bw_curve: Vec<(f64, f64)>,
    pub cpu_mem_bw: f64,
    pub gpu_mem_bytes: f64,
    pub cpu_mem_bytes: f64,
    /// Slowdown of a half-precision transfer staged through an unpinned CPU
    /// buffer, applied to the transfer part of [`CastStrategy::CastOnCpuMoveHalf`].
    #[serde(default = "default_unpinned_penalty")]
    pub unpinned_penalty: f64,
    /// Fixed cost of one CPU optimizer call (thread fan-out and join), seconds.
    #[serde(default)]
    pub cpu_step_overhead_s: f64,
    #[serde(default)]
    pub cast_cost_table: Vec<CastCostRow>,
}

impl HardwareProfile {
    /// Parses a profile from TOML text and checks its invariants.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let profile: HardwareProfile =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid profile: {e}")))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let profile: HardwareProfile = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        profile.validate()?;
        Ok(profile)
    }

    /// One of [`BUILTIN_PROFILES`].
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "gh200" => GH200_TOML,
            "dgx-a100" => DGX_A100_TOML,
            "dgx-2" => DGX_2_TOML,
            _ => return None,
        };
        Some(Self::from_toml_str(text).expect("shipped profile is valid"))
    }

    pub fn gh200() -> Self {
        Self::builtin("gh200").unwrap()
    }

    /// GPU flop/s actually reached by training kernels.
    pub fn gpu_achievable_flops(&self) -> f64 {
        self.gpu_peak_flops * self.gpu_achievable_fraction
    }

    /// CPU flop/s sustained by the optimizer kernel.
    pub fn cpu_adam_flops(&self) -> f64 {
        self.cpu_peak_flops * self.cpu_adam_fraction
    }

    /// Unidirectional peak, half the aggregate.
    pub fn unidirectional_bw(&self) -> f64 {
        self.link_peak_bw / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gpu_peak_flops", self.gpu_peak_flops),
            ("cpu_peak_flops", self.cpu_peak_flops),
            ("link_peak_bw", self.link_peak_bw),
            ("cpu_mem_bw", self.cpu_mem_bw),
            ("gpu_mem_bytes", self.gpu_mem_bytes),
            ("cpu_mem_bytes", self.cpu_mem_bytes),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(format!(
                    "{}: {field} must be positive",
                    self.name
                )));
            }
        }
        for (field, value) in [
            ("gpu_achievable_fraction", self.gpu_achievable_fraction),
            ("cpu_adam_fraction", self.cpu_adam_fraction),
        ] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(Error::config(format!(
                    "{}: {field} must lie in (0, 1]",
                    self.name
                )));
            }
        }
        if !(self.cpu_step_overhead_s >= 0.0 && self.cpu_step_overhead_s.is_finite()) {
            return Err(Error::config(format!(
                "{}: cpu_step_overhead_s must be nonnegative",
                self.name
            )));
        }
        if !(self.unpinned_penalty >= 1.0 && self.unpinned_penalty.is_finite()) {
            return Err(Error::config(format!(
                "{}: unpinned_penalty must be >= 1",
                self.name
            )));
        }
        if self.link_bw_curve.is_empty() {
            return Err(Error::config(format!(
                "{}: link_bw_curve is empty",
                self.name
            )));
        }
        for (i, &(bytes, bw)) in self.link_bw_curve.iter().enumerate() {
            if !(bytes > 0.0 && bw > 0.0) {
                return Err(Error::config(format!(
                    "{}: link_bw_curve knot {i} must be positive",
                    self.name
                )));
            }
            if bw > self.link_peak_bw {
                return Err(Error::config(format!(
                    "{}: link_bw_curve knot {i} exceeds link_peak_bw",
                    self.name
                )));
            }
            if i > 0 {
                let (prev_bytes, prev_bw) = self.link_bw_curve[i - 1];
                if bytes <= prev_bytes || bw < prev_bw {
                    return Err(Error::config(format!(
                        "{}: link_bw_curve must be strictly increasing in size and nondecreasing in bandwidth",
                        self.name
                    )));
                }
            }
        }
        for row in &self.cast_cost_table {
            if !(row.tensor_bytes > 0.0 && row.seconds > 0.0) {
                return Err(Error::config(format!(
                    "{}: cast_cost_table rows must be positive",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Linear interpolation in `log2(x)` over sorted knots, clamped at both ends.
fn interp_log2(knots: &[(f64, f64)], x: f64) -> f64 {
    let first = knots[0];
    let last = knots[knots.len() - 1];
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let lx = x.log2();
    for pair in knots.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        if x == x0 {
            return y0;
        }
        if x < x1 {
            let t = (lx - x0.log2()) / (x1.log2() - x0.log2());
            return y0 + t * (y1 - y0);
        }
    }
    last.1
}

/// Link bandwidth for a single transfer of `bytes`.
pub fn bandwidth_at(profile: &HardwareProfile, bytes: f64) -> Result<f64> {
    if !(bytes > 0.0) {
        return Err(Error::domain(format!(
            "transfer size must be positive, got {bytes}"
        )));
    }
    Ok(interp_log2(&profile.link_bw_curve, bytes))
}

/// Fraction of a streamed-weights forward pass spent computing rather than
/// waiting on the link.
///
/// `comp = 2·bsz·seq·params / achievable_flops`, `comm = 2·params / bw`,
/// result `comp / (comp + comm)`. Without an override `bw` is the
/// unidirectional link peak.
pub fn efficiency(
    params: f64,
    bsz: f64,
    seq: f64,
    profile: &HardwareProfile,
    bw_override: Option<f64>,
) -> Result<f64> {
    if !(params > 0.0 && bsz > 0.0 && seq > 0.0) {
        return Err(Error::domain("params, bsz and seq must be positive"));
    }
    let bw = bw_override.unwrap_or_else(|| profile.unidirectional_bw());
    if !(bw > 0.0) {
        return Err(Error::domain("bandwidth must be positive"));
    }
    let comp = 2.0 * bsz * seq * params / profile.gpu_achievable_flops();
    let comm = 2.0 * params / bw;
    Ok(comp / (comp + comm))
}

/// Seconds to move a tensor whose full-precision size is `bytes` using `strategy`.
///
/// The table is interpolated log-log between rows and scaled proportionally
/// outside them. [`CastStrategy::CastOnCpuMoveHalf`] additionally pays
/// `(unpinned_penalty - 1)` times the pinned transfer time of the half-size
/// tensor.
pub fn cast_move_cost(
    bytes: f64,
    strategy: CastStrategy,
    profile: &HardwareProfile,
) -> Result<f64> {
    if !(bytes > 0.0) {
        return Err(Error::domain(format!(
            "tensor size must be positive, got {bytes}"
        )));
    }
    let mut rows: Vec<(f64, f64)> = profile
        .cast_cost_table
        .iter()
        .filter(|r| r.strategy == strategy)
        .map(|r| (r.tensor_bytes, r.seconds))
        .collect();
    if rows.is_empty() {
        return Err(Error::config(format!(
            "{}: cast_cost_table has no rows for {strategy:?}",
            profile.name
        )));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    rows.dedup_by(|a, b| a.0 == b.0);

    let base = interp_cost(&rows, bytes);
    let penalty = match strategy {
        CastStrategy::CastOnGpuMoveFull => 0.0,
        CastStrategy::CastOnCpuMoveHalf => {
            let half = bytes / 2.0;
            (profile.unpinned_penalty - 1.0) * half / bandwidth_at(profile, half)?
        }
    };
    Ok(base + penalty)
}

fn interp_cost(rows: &[(f64, f64)], bytes: f64) -> f64 {
    let (x0, y0) = rows[0];
    let (xn, yn) = rows[rows.len() - 1];
    if bytes <= x0 {
        return y0 * bytes / x0;
    }
    if bytes >= xn {
        return yn * bytes / xn;
    }
    for pair in rows.windows(2) {
        let (a, ya) = pair[0];
        let (b, yb) = pair[1];
        if bytes == a {
            return ya;
        }
        if bytes < b {
            let t = (bytes.ln() - a.ln()) / (b.ln() - a.ln());
            return (ya.ln() + t * (yb.ln() - ya.ln())).exp();
        }
    }
    yn
}

/// Cheaper of the two strategies for `bytes`; ties go to [`CastStrategy::CastOnGpuMoveFull`].
pub fn choose_cast_strategy(bytes: f64, profile: &HardwareProfile) -> Result<CastStrategy> {
    let gpu = cast_move_cost(bytes, CastStrategy::CastOnGpuMoveFull, profile)?;
    let cpu = cast_move_cost(bytes, CastStrategy::CastOnCpuMoveHalf, profile)?;
    Ok(if cpu < gpu {
        CastStrategy::CastOnCpuMoveHalf
    } else {
        CastStrategy::CastOnGpuMoveFull
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{GIB, MIB};
    use proptest::prelude::*;

    fn flat_cast_profile(gpu_secs: f64, cpu_secs: f64) -> HardwareProfile {
        let mut p = HardwareProfile::gh200();
        p.unpinned_penalty = 1.0;
        p.cast_cost_table = vec![
            CastCostRow {
                tensor_bytes: MIB as f64,
                strategy: CastStrategy::CastOnGpuMoveFull,
                seconds: gpu_secs,
            },
            CastCostRow {
                tensor_bytes: GIB as f64,
                strategy: CastStrategy::CastOnGpuMoveFull,
                seconds: gpu_secs * 1024.0,
            },
            CastCostRow {
                tensor_bytes: MIB as f64,
                strategy: CastStrategy::CastOnCpuMoveHalf,
                seconds: cpu_secs,
            },
            CastCostRow {
                tensor_bytes: GIB as f64,
                strategy: CastStrategy::CastOnCpuMoveHalf,
                seconds: cpu_secs * 1024.0,
            },
        ];
        p
    }

    #[test]
    fn shipped_profiles_load() {
        for name in BUILTIN_PROFILES {
            let p = HardwareProfile::builtin(name).unwrap();
            assert_eq!(p.name, name);
            assert_eq!(p.gpu_achievable_fraction, 0.6);
        }
        assert!(HardwareProfile::builtin("tpu").is_none());
    }

    #[test]
    fn gh200_saturates_at_64_mib() {
        let p = HardwareProfile::gh200();
        assert_eq!(bandwidth_at(&p, (64 * MIB) as f64).unwrap(), 450e9);
        assert_eq!(bandwidth_at(&p, GIB as f64).unwrap(), 450e9);
    }

    #[test]
    fn bandwidth_at_knot_is_exact() {
        let p = HardwareProfile::gh200();
        for &(bytes, bw) in &p.link_bw_curve {
            assert_eq!(bandwidth_at(&p, bytes).unwrap(), bw);
        }
    }

    #[test]
    fn bandwidth_at_one_mib_matches_hand_interpolation() {
        // 1 MiB is a knot of the shipped curve; 2 MiB sits halfway (in log2)
        // between the 1 MiB (110 GB/s) and 4 MiB (200 GB/s) knots.
        let p = HardwareProfile::gh200();
        assert_eq!(bandwidth_at(&p, MIB as f64).unwrap(), 110e9);
        let two = bandwidth_at(&p, (2 * MIB) as f64).unwrap();
        assert!((two - 155e9).abs() < 1.0, "{two}");
        // below the first knot the curve clamps
        assert_eq!(bandwidth_at(&p, 1024.0).unwrap(), 50e9);
    }

    #[test]
    fn bandwidth_rejects_nonpositive_sizes() {
        let p = HardwareProfile::gh200();
        assert!(matches!(bandwidth_at(&p, 0.0), Err(Error::Domain(_))));
        assert!(matches!(bandwidth_at(&p, -5.0), Err(Error::Domain(_))));
    }

    #[test]
    fn efficiency_limits_and_reference_point() {
        let p = HardwareProfile::gh200();
        let e_inf = efficiency(7e9, 4.0, 1024.0, &p, Some(1e30)).unwrap();
        assert!(e_inf > 1.0 - 1e-12);
        // comp = 2*4*1024*7e9 / (990e12*0.6) = 0.096539..., comm = 14e9/450e9 = 0.031111...
        let comp = 2.0 * 4.0 * 1024.0 * 7e9 / 594e12;
        let comm = 14e9 / 450e9;
        let expected = comp / (comp + comm);
        let e = efficiency(7e9, 4.0, 1024.0, &p, Some(450e9)).unwrap();
        assert!((e - expected).abs() < 1e-12);
        assert!(e > 0.60, "{e}");
        // default bandwidth is the unidirectional half of the aggregate
        assert_eq!(efficiency(7e9, 4.0, 1024.0, &p, None).unwrap(), e);
    }

    #[test]
    fn efficiency_rejects_zero_counts() {
        let p = HardwareProfile::gh200();
        assert!(efficiency(0.0, 1.0, 1.0, &p, None).is_err());
        assert!(efficiency(1.0, 0.0, 1.0, &p, None).is_err());
    }

    #[test]
    fn gpu_cast_beats_cpu_cast_in_the_large_tensor_band() {
        let p = HardwareProfile::gh200();
        for mib in [256u64, 512, 1024, 2048] {
            let b = (mib * MIB) as f64;
            let g = cast_move_cost(b, CastStrategy::CastOnGpuMoveFull, &p).unwrap();
            let c = cast_move_cost(b, CastStrategy::CastOnCpuMoveHalf, &p).unwrap();
            assert!(g < c, "{mib} MiB: {g} vs {c}");
        }
        let b = GIB as f64;
        let ratio = cast_move_cost(b, CastStrategy::CastOnCpuMoveHalf, &p).unwrap()
            / cast_move_cost(b, CastStrategy::CastOnGpuMoveFull, &p).unwrap();
        assert!((1.8..=2.2).contains(&ratio), "{ratio}");
        assert_eq!(
            choose_cast_strategy(b, &p).unwrap(),
            CastStrategy::CastOnGpuMoveFull
        );
    }

    #[test]
    fn cast_cost_at_minimal_knot_is_the_table_value() {
        let p = HardwareProfile::gh200();
        let row = p
            .cast_cost_table
            .iter()
            .filter(|r| r.strategy == CastStrategy::CastOnGpuMoveFull)
            .min_by(|a, b| a.tensor_bytes.total_cmp(&b.tensor_bytes))
            .unwrap();
        assert_eq!(
            cast_move_cost(row.tensor_bytes, row.strategy, &p).unwrap(),
            row.seconds
        );
        // with no unpinned penalty the half-precision rows are exact as well
        let q = flat_cast_profile(1e-5, 3e-5);
        assert_eq!(
            cast_move_cost(MIB as f64, CastStrategy::CastOnCpuMoveHalf, &q).unwrap(),
            3e-5
        );
    }

    #[test]
    fn missing_strategy_is_a_configuration_error() {
        let mut p = HardwareProfile::gh200();
        p.cast_cost_table
            .retain(|r| r.strategy == CastStrategy::CastOnGpuMoveFull);
        assert!(matches!(
            cast_move_cost(1e6, CastStrategy::CastOnCpuMoveHalf, &p),
            Err(Error::Config(_))
        ));
        assert!(choose_cast_strategy(1e6, &p).is_err());
    }

    #[test]
    fn tie_breaks_to_gpu_cast_and_cheaper_cpu_cast_wins() {
        let tie = flat_cast_profile(2e-5, 2e-5);
        assert_eq!(
            choose_cast_strategy(5e8, &tie).unwrap(),
            CastStrategy::CastOnGpuMoveFull
        );
        let cheap_cpu = flat_cast_profile(2e-5, 1e-5);
        for bytes in [1e3, 1e6, 5e8, 1e10] {
            assert_eq!(
                choose_cast_strategy(bytes, &cheap_cpu).unwrap(),
                CastStrategy::CastOnCpuMoveHalf
            );
        }
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        let mut p = HardwareProfile::gh200();
        p.link_bw_curve.push((1e12, 1e13));
        assert!(p.validate().is_err());
        let mut p = HardwareProfile::gh200();
        p.link_bw_curve.swap(0, 1);
        assert!(p.validate().is_err());
        let mut p = HardwareProfile::gh200();
        p.cpu_mem_bytes = 0.0;
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn bandwidth_is_monotone(a in 1.0f64..4e9, b in 1.0f64..4e9) {
            let p = HardwareProfile::gh200();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bandwidth_at(&p, lo).unwrap() <= bandwidth_at(&p, hi).unwrap());
            prop_assert!(bandwidth_at(&p, hi).unwrap() <= p.link_peak_bw);
        }

        #[test]
        fn efficiency_monotonicity(params in 1e6f64..1e12, bsz in 1.0f64..64.0, seq in 64.0f64..1e6, bw in 1e9f64..1e12) {
            let p = HardwareProfile::gh200();
            let base = efficiency(params, bsz, seq, &p, Some(bw)).unwrap();
            prop_assert!(efficiency(params, bsz * 2.0, seq, &p, Some(bw)).unwrap() > base);
            prop_assert!(efficiency(params, bsz, seq * 2.0, &p, Some(bw)).unwrap() > base);
            prop_assert!(efficiency(params, bsz, seq, &p, Some(bw * 2.0)).unwrap() > base);
            let mut faster = p.clone();
            faster.gpu_peak_flops *= 2.0;
            prop_assert!(efficiency(params, bsz, seq, &faster, Some(bw)).unwrap() < base);
            // params cancels in the ratio
            let other = efficiency(params * 3.0, bsz, seq, &p, Some(bw)).unwrap();
            prop_assert!((other - base).abs() <= 1e-12 * base.max(1e-300));
        }

        #[test]
        fn cast_choice_is_scale_invariant(bytes in 1e5f64..4e9, k in 0.01f64..100.0) {
            // Scaling every cost uniformly: both table columns by k and the
            // transfer part behind the unpinned penalty via bandwidth / k.
            let p = HardwareProfile::gh200();
            let mut q = p.clone();
            for row in &mut q.cast_cost_table {
                row.seconds *= k;
            }
            for knot in &mut q.link_bw_curve {
                knot.1 /= k;
            }
            q.link_peak_bw /= k;
            prop_assert_eq!(choose_cast_strategy(bytes, &p).unwrap(), choose_cast_strategy(bytes, &q).unwrap());
        }
    }
}
