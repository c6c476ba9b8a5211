//! Bucketization of the flattened parameter space and the choice of how many
//! buckets keep their optimizer state on the GPU.
//!
//! Buckets are measured in half-precision bytes, so a bucket of `bk` bytes
//! holds `bk / 2` parameters. Gradients are produced in reverse declaration
//! order; bucket `K - 1` is the first to finish backward and bucket `0` the
//! last. Keeping the last `n` buckets of backward order (ids `0..n`) on the
//! GPU lets their update run while the CPU finishes the offloaded tail.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::hwmodel::{cast_move_cost, choose_cast_strategy, CastStrategy, HardwareProfile};
use crate::memplan::{placement, usable_gpu_bytes, ModelConfig, WeightPolicy, Workload};
use crate::par::Exec;
use crate::simsched::{self, Schedule, ScheduleKind, SimOptions};
use crate::{Error, Result, MIB};

/// Bucket sizes must be a whole number of 4-byte units.
pub const ALIGNMENT_BYTES: u64 = 4;
pub const BYTES_PER_PARAM: u64 = 2;
pub const DEFAULT_BUCKET_BYTES: u64 = 64 * MIB;
pub const DEFAULT_BK_CANDIDATES: [u64; 5] = [16 * MIB, 32 * MIB, 64 * MIB, 128 * MIB, 256 * MIB];

/// Flops per parameter of one Adam update (moments, bias correction, sqrt,
/// divide, weight decay).
pub const ADAM_FLOPS_PER_PARAM: f64 = 12.0;

/// Above this many `n` values per bucket size the search scans a coarse grid
/// first and then refines around the best point.
const EXHAUSTIVE_N_LIMIT: usize = 96;
const COARSE_N_POINTS: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Residency {
    GpuResident,
    CpuOffloaded,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub id: usize,
    pub byte_range: Range<u64>,
    pub param_range: Range<u64>,
}

impl Bucket {
    pub fn bytes(&self) -> u64 {
        self.byte_range.end - self.byte_range.start
    }

    pub fn params(&self) -> u64 {
        self.param_range.end - self.param_range.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub bucket_bytes: u64,
    pub total_bytes: u64,
    pub gpu_resident_count: usize,
    /// Set when no `n` satisfied the overlap inequality and every bucket was
    /// made GPU-resident.
    #[serde(default)]
    pub fallback: bool,
    pub buckets: Vec<Bucket>,
}

/// fp16 byte sizes of a transformer's parameters in declaration order: the
/// embedding, then one flattened block per layer.
pub fn model_param_sizes(config: &ModelConfig) -> Vec<u64> {
    let h = config.hidden;
    let mut sizes = Vec::with_capacity(config.layers as usize + 1);
    sizes.push(config.vocab * h * BYTES_PER_PARAM);
    for _ in 0..config.layers {
        sizes.push((12 * h * h + 13 * h) * BYTES_PER_PARAM);
    }
    sizes
}

/// Slices the flattened space of `param_sizes` into buckets of `bk` bytes.
///
/// Filling is greedy in declaration order, so a parameter may straddle two
/// buckets and only the final bucket can be short.
pub fn build_buckets(param_sizes: &[u64], bk: u64) -> Result<PartitionPlan> {
    if bk < ALIGNMENT_BYTES || bk % ALIGNMENT_BYTES != 0 {
        return Err(Error::domain(format!(
            "bucket size {bk} must be a positive multiple of {ALIGNMENT_BYTES} bytes"
        )));
    }
    if param_sizes.is_empty() {
        return Err(Error::domain("no parameters to bucket"));
    }
    let total: u64 = param_sizes.iter().sum();
    if total == 0 {
        return Err(Error::domain("parameters have zero total size"));
    }
    let count = total.div_ceil(bk) as usize;
    let buckets = (0..count)
        .map(|id| {
            let start = id as u64 * bk;
            let end = (start + bk).min(total);
            Bucket {
                id,
                byte_range: start..end,
                param_range: start / BYTES_PER_PARAM..end.div_ceil(BYTES_PER_PARAM),
            }
        })
        .collect();
    Ok(PartitionPlan {
        bucket_bytes: bk,
        total_bytes: total,
        gpu_resident_count: 0,
        fallback: false,
        buckets,
    })
}

impl PartitionPlan {
    /// Plan over `elements` half-precision parameters with `bucket_elems` per bucket.
    pub fn for_elements(elements: usize, bucket_elems: usize) -> Result<Self> {
        let bk = bucket_elems as u64 * BYTES_PER_PARAM;
        if bucket_elems == 0 {
            return Err(Error::domain("bucket must hold at least one element"));
        }
        let plan = if bk % ALIGNMENT_BYTES == 0 {
            build_buckets(&[elements as u64 * BYTES_PER_PARAM], bk)?
        } else {
            // odd element counts per bucket are not 4-byte aligned; split by element
            let count = elements.div_ceil(bucket_elems);
            let buckets = (0..count)
                .map(|id| {
                    let start = (id * bucket_elems) as u64;
                    let end = ((id + 1) * bucket_elems).min(elements) as u64;
                    Bucket {
                        id,
                        byte_range: start * BYTES_PER_PARAM..end * BYTES_PER_PARAM,
                        param_range: start..end,
                    }
                })
                .collect();
            PartitionPlan {
                bucket_bytes: bk,
                total_bytes: elements as u64 * BYTES_PER_PARAM,
                gpu_resident_count: 0,
                fallback: false,
                buckets,
            }
        };
        Ok(plan)
    }

    pub fn for_model(config: &ModelConfig, bk: u64) -> Result<Self> {
        build_buckets(&model_param_sizes(config), bk)
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn with_gpu_resident(mut self, n: usize) -> Result<Self> {
        if n > self.buckets.len() {
            return Err(Error::domain(format!(
                "{n} GPU-resident buckets requested but the plan has {}",
                self.buckets.len()
            )));
        }
        self.gpu_resident_count = n;
        self.fallback = false;
        Ok(self)
    }

    pub fn residency(&self, id: usize) -> Residency {
        if id < self.gpu_resident_count {
            Residency::GpuResident
        } else {
            Residency::CpuOffloaded
        }
    }

    /// Bucket ids in the order their gradients materialize.
    pub fn backward_order(&self) -> impl Iterator<Item = usize> {
        (0..self.buckets.len()).rev()
    }

    pub fn total_params(&self) -> u64 {
        self.buckets.last().map_or(0, |b| b.param_range.end)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: PartitionPlan =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid plan: {e}")))?;
        plan.check()?;
        Ok(plan)
    }

    /// Verifies the layout invariants: contiguous cover, uniform sizes, valid `n`.
    pub fn check(&self) -> Result<()> {
        let mut cursor = 0;
        for (i, b) in self.buckets.iter().enumerate() {
            if b.id != i || b.byte_range.start != cursor || b.byte_range.end <= b.byte_range.start {
                return Err(Error::config(format!(
                    "bucket {i} breaks the contiguous layout"
                )));
            }
            if i + 1 < self.buckets.len() && b.bytes() != self.bucket_bytes {
                return Err(Error::config(format!(
                    "bucket {i} is not {} bytes",
                    self.bucket_bytes
                )));
            }
            cursor = b.byte_range.end;
        }
        if cursor != self.total_bytes {
            return Err(Error::config("buckets do not cover the parameter space"));
        }
        if self.gpu_resident_count > self.buckets.len() {
            return Err(Error::config("more GPU-resident buckets than buckets"));
        }
        Ok(())
    }
}

/// Per-bucket durations that decide whether the offloaded tail can hide
/// behind GPU work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketCosts {
    pub move_grad: f64,
    pub step_cpu: f64,
    pub move_param: f64,
    pub bwd_per_bucket: f64,
    pub step_gpu_per_bucket: f64,
    pub fwd_per_bucket: f64,
}

impl BucketCosts {
    /// Left side of the overlap inequality: one offloaded bucket's round trip.
    pub fn offload_chain(&self) -> f64 {
        self.move_grad + self.step_cpu + self.move_param
    }

    /// GPU work one resident bucket contributes after the last offloaded gradient.
    pub fn resident_cover(&self) -> f64 {
        self.bwd_per_bucket + self.step_gpu_per_bucket
    }
}

/// Simulator-facing knobs that change cost derivation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostKnobs {
    /// Multiplier on CPU optimizer time (1 for the tuned kernel).
    pub cpu_adam_slowdown: f64,
    /// Forces a cast strategy; `None` picks the cheaper one per transfer.
    pub cast: Option<CastStrategy>,
}

impl Default for CostKnobs {
    fn default() -> Self {
        CostKnobs {
            cpu_adam_slowdown: 1.0,
            cast: None,
        }
    }
}

/// Costs for a bucket of `bucket_bytes` whose optimizer shard is
/// `bucket_bytes / shards` bytes, on `tokens` tokens per step.
///
/// Compute estimates use `p = bucket_bytes / 2` parameters: forward
/// `2·tokens·p`, backward `4·tokens·p`, GPU Adam `12·p_shard` flops at the
/// achievable GPU rate. CPU Adam runs at the optimizer rate plus a per-call
/// overhead. Each transfer moves the fp32-sized shard through
/// [`cast_move_cost`].
pub fn derive_costs(
    bucket_bytes: f64,
    shards: f64,
    tokens: f64,
    profile: &HardwareProfile,
    knobs: &CostKnobs,
) -> Result<BucketCosts> {
    if !(bucket_bytes > 0.0 && shards >= 1.0 && tokens > 0.0) {
        return Err(Error::domain(
            "bucket bytes, shard count and tokens must be positive",
        ));
    }
    let p = bucket_bytes / BYTES_PER_PARAM as f64;
    let p_shard = p / shards;
    let fp32_shard = 4.0 * p_shard;
    let gpu = profile.gpu_achievable_flops();
    let strategy = match knobs.cast {
        Some(s) => s,
        None => choose_cast_strategy(fp32_shard, profile)?,
    };
    let transfer = cast_move_cost(fp32_shard, strategy, profile)?;
    Ok(BucketCosts {
        move_grad: transfer,
        step_cpu: p_shard * ADAM_FLOPS_PER_PARAM / profile.cpu_adam_flops()
            * knobs.cpu_adam_slowdown
            + profile.cpu_step_overhead_s,
        move_param: transfer,
        bwd_per_bucket: 4.0 * tokens * p / gpu,
        step_gpu_per_bucket: ADAM_FLOPS_PER_PARAM * p_shard / gpu,
        fwd_per_bucket: 2.0 * tokens * p / gpu,
    })
}

/// Smallest `n` whose resident buckets cover one offloaded round trip:
/// `move_grad + step_cpu + move_param <= n·(bwd_per_bucket + step_gpu_per_bucket)`.
///
/// Returns `(n, fallback)`; when no `n <= bucket_count` works the answer is
/// `bucket_count` with `fallback` set.
pub fn min_gpu_buckets(costs: &BucketCosts, bucket_count: usize) -> (usize, bool) {
    let lhs = costs.offload_chain();
    let rhs = costs.resident_cover();
    (0..=bucket_count)
        .find(|&n| lhs <= n as f64 * rhs)
        .map_or((bucket_count, true), |n| (n, false))
}

/// One point evaluated by the grid search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bucket_bytes: u64,
    pub gpu_buckets: usize,
    pub iteration_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearch {
    pub bk_candidates: Vec<u64>,
    pub schedule: Schedule,
    pub policy: WeightPolicy,
    pub knobs: CostKnobs,
    pub exec: Exec,
}

impl Default for GridSearch {
    fn default() -> Self {
        GridSearch {
            bk_candidates: DEFAULT_BK_CANDIDATES.to_vec(),
            schedule: Schedule::SuperStv,
            policy: WeightPolicy::Stationary,
            knobs: CostKnobs::default(),
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearchOutcome {
    pub plan: PartitionPlan,
    pub iteration_time: f64,
    pub evaluated: Vec<Candidate>,
}

/// Range of resident-bucket counts worth simulating for one bucket size.
fn n_bounds(
    plan: &PartitionPlan,
    model: &ModelConfig,
    workload: Workload,
    profile: &HardwareProfile,
    search: &GridSearch,
) -> Result<(usize, usize, bool)> {
    let count = plan.bucket_count();
    let costs = derive_costs(
        plan.bucket_bytes as f64,
        1.0,
        workload.tokens(),
        profile,
        &search.knobs,
    )?;
    let (n_min, fallback) = min_gpu_buckets(&costs, count);
    let fp = placement(
        model,
        workload.bsz as f64,
        workload.seq as f64,
        search.policy,
    );
    let free = usable_gpu_bytes(profile) - fp.gpu_resident_bytes;
    // fp32 master, momentum and variance for bk/2 parameters
    let per_bucket = 6.0 * plan.bucket_bytes as f64;
    let cap = if free > 0.0 {
        ((free / per_bucket).floor() as usize).min(count)
    } else {
        0
    };
    Ok((n_min, cap.max(n_min), fallback))
}

fn coarse_grid(lo: usize, hi: usize) -> Vec<usize> {
    if hi - lo + 1 <= EXHAUSTIVE_N_LIMIT {
        return (lo..=hi).collect();
    }
    let span = (hi - lo) as f64;
    let mut pts: Vec<usize> = (0..COARSE_N_POINTS)
        .map(|i| lo + (span * i as f64 / (COARSE_N_POINTS - 1) as f64).round() as usize)
        .collect();
    pts.dedup();
    pts
}

/// Iteration times closer than this (relative) count as equal in the search.
pub const TIE_TOLERANCE: f64 = 1e-6;

/// Total order used inside one bucket size: time, then smaller `n`.
fn better(a: &Candidate, b: &Candidate) -> bool {
    a.iteration_time
        .total_cmp(&b.iteration_time)
        .then(a.gpu_buckets.cmp(&b.gpu_buckets))
        .is_lt()
}

/// The fastest candidate, where everything within [`TIE_TOLERANCE`] of the
/// fastest time ties and ties go to the larger bucket, then the smaller `n`.
pub fn pick_winner(candidates: &[Candidate]) -> Option<Candidate> {
    let best = candidates
        .iter()
        .map(|c| c.iteration_time)
        .min_by(f64::total_cmp)?;
    let limit = best * (1.0 + TIE_TOLERANCE);
    candidates
        .iter()
        .filter(|c| c.iteration_time <= limit)
        .min_by(|a, b| {
            b.bucket_bytes
                .cmp(&a.bucket_bytes)
                .then(a.gpu_buckets.cmp(&b.gpu_buckets))
                .then(a.iteration_time.total_cmp(&b.iteration_time))
        })
        .copied()
}

/// Searches bucket sizes and resident-bucket counts for the shortest
/// simulated iteration (speculative schedule by default).
///
/// For every bucket size, `n` ranges from [`min_gpu_buckets`] up to what
/// fits in the remaining GPU memory. Large ranges are scanned coarsely and
/// then exhaustively around the best coarse point.
pub fn grid_search(
    model: &ModelConfig,
    workload: Workload,
    profile: &HardwareProfile,
    search: &GridSearch,
) -> Result<GridSearchOutcome> {
    if search.bk_candidates.is_empty() {
        return Err(Error::domain("no bucket size candidates"));
    }
    let mut bases = Vec::new();
    for &bk in &search.bk_candidates {
        let plan = PartitionPlan::for_model(model, bk)?;
        let bounds = n_bounds(&plan, model, workload, profile, search)?;
        bases.push((plan, bounds));
    }
    let opts = SimOptions {
        knobs: search.knobs,
        ..SimOptions::default()
    };
    let evaluate = |points: Vec<(usize, usize)>| -> Result<Vec<Candidate>> {
        let results = search.exec.map(&points, |&(i, n)| {
            let plan = bases[i].0.clone().with_gpu_resident(n)?;
            let bucket_bytes = plan.bucket_bytes;
            let kind = ScheduleKind::new(search.schedule, search.policy, plan);
            let trace = simsched::simulate_with(&kind, model, workload, profile, &opts)?;
            Ok(Candidate {
                bucket_bytes,
                gpu_buckets: n,
                iteration_time: trace.mean_iteration_time(),
            })
        });
        results.into_iter().collect()
    };

    let coarse: Vec<(usize, usize)> = bases
        .iter()
        .enumerate()
        .flat_map(|(i, (_, (lo, hi, _)))| coarse_grid(*lo, *hi).into_iter().map(move |n| (i, n)))
        .collect();
    let mut evaluated = evaluate(coarse)?;

    // refine each bucket size between the neighbours of its best coarse point
    let mut refine = Vec::new();
    for (i, (plan, (lo, hi, _))) in bases.iter().enumerate() {
        let grid = coarse_grid(*lo, *hi);
        if grid.len() == hi - lo + 1 {
            continue;
        }
        let mine: Vec<&Candidate> = evaluated
            .iter()
            .filter(|c| c.bucket_bytes == plan.bucket_bytes)
            .collect();
        let best = mine
            .iter()
            .copied()
            .fold(None::<&Candidate>, |acc, c| match acc {
                Some(a) if !better(c, a) => Some(a),
                _ => Some(c),
            });
        let Some(best) = best else { continue };
        let pos = grid
            .iter()
            .position(|&n| n == best.gpu_buckets)
            .unwrap_or(0);
        let from = grid[pos.saturating_sub(1)];
        let to = grid[(pos + 1).min(grid.len() - 1)];
        refine.extend((from..=to).filter(|n| !grid.contains(n)).map(|n| (i, n)));
    }
    evaluated.extend(evaluate(refine)?);

    let winner = pick_winner(&evaluated).expect("at least one candidate");
    let (base, (_, _, fallback)) = bases
        .iter()
        .find(|(p, _)| p.bucket_bytes == winner.bucket_bytes)
        .expect("winner comes from a candidate");
    let mut plan = base.clone().with_gpu_resident(winner.gpu_buckets)?;
    plan.fallback = *fallback && winner.gpu_buckets == plan.bucket_count();
    Ok(GridSearchOutcome {
        plan,
        iteration_time: winner.iteration_time,
        evaluated,
    })
}

/// [`grid_search`] with default settings over the given bucket sizes.
pub fn grid_search_plan(
    model: &ModelConfig,
    workload: Workload,
    profile: &HardwareProfile,
    bk_candidates: &[u64],
) -> Result<PartitionPlan> {
    let search = GridSearch {
        bk_candidates: bk_candidates.to_vec(),
        ..GridSearch::default()
    };
    Ok(grid_search(model, workload, profile, &search)?.plan)
}
