//! Reproducible gradient corruption for protocol tests.
//!
//! File format:
//!
//! ```toml
//! [[fault]]
//! iteration = 3
//! kind = "nan"        # "nan", "inf" or "scale"
//! element = 17        # optional, nan/inf only
//!
//! [[fault]]
//! iteration = 8
//! kind = "scale"
//! factor = 1000.0
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultKind {
    Nan,
    Inf,
    Scale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    pub iteration: u64,
    pub kind: FaultKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPlan {
    #[serde(default, rename = "fault")]
    pub faults: Vec<Fault>,
}

impl FaultPlan {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: FaultPlan =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid fault spec: {e}")))?;
        plan.check()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let plan: FaultPlan = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        plan.check()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fault plan serializes")
    }

    pub fn check(&self) -> Result<()> {
        for f in &self.faults {
            match f.kind {
                FaultKind::Scale => match f.factor {
                    Some(k) if k.is_finite() && k > 0.0 => {}
                    _ => {
                        return Err(Error::config(format!(
                            "fault at iteration {}: scale needs a positive finite factor",
                            f.iteration
                        )))
                    }
                },
                FaultKind::Nan | FaultKind::Inf => {
                    if f.factor.is_some() {
                        return Err(Error::config(format!(
                            "fault at iteration {}: factor only applies to scale faults",
                            f.iteration
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Corrupts `grads` with every fault registered for `iteration`.
    /// Returns whether anything was applied.
    pub fn apply(&self, iteration: u64, grads: &mut [f32]) -> bool {
        let mut hit = false;
        for f in self.faults.iter().filter(|f| f.iteration == iteration) {
            hit = true;
            if grads.is_empty() {
                continue;
            }
            let at = f.element.unwrap_or(grads.len() / 2) % grads.len();
            match f.kind {
                FaultKind::Nan => grads[at] = f32::NAN,
                FaultKind::Inf => grads[at] = f32::INFINITY,
                FaultKind::Scale => {
                    let k = f.factor.unwrap_or(1.0);
                    grads.iter_mut().for_each(|g| *g *= k);
                }
            }
        }
        hit
    }

    pub fn iterations(&self, kind: FaultKind) -> BTreeSet<u64> {
        self.faults
            .iter()
            .filter(|f| f.kind == kind)
            .map(|f| f.iteration)
            .collect()
    }
}

/// Generated fault streams used by the verification matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultPattern {
    Clean,
    /// Gradient bursts that trip clipping.
    Clip,
    /// NaN and Inf gradients.
    NonFinite,
    /// Both of the above at disjoint iterations.
    Mixed,
}

/// Events of each kind in a generated stream (capped by the step count).
pub const PATTERN_EVENTS: usize = 6;
/// Gradient multiplier used by generated clip bursts.
pub const CLIP_BURST_FACTOR: f32 = 1.0e4;

impl FaultPattern {
    pub const DEFAULT_MATRIX: [FaultPattern; 3] =
        [FaultPattern::Clean, FaultPattern::Clip, FaultPattern::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            FaultPattern::Clean => "clean",
            FaultPattern::Clip => "clip",
            FaultPattern::NonFinite => "nonfinite",
            FaultPattern::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            FaultPattern::Clean,
            FaultPattern::Clip,
            FaultPattern::NonFinite,
            FaultPattern::Mixed,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }

    /// Distinct fault iterations drawn from `1..steps` with the given seed.
    pub fn plan(self, steps: u64, seed: u64) -> FaultPlan {
        let (clips, bad) = match self {
            FaultPattern::Clean => (0, 0),
            FaultPattern::Clip => (PATTERN_EVENTS, 0),
            FaultPattern::NonFinite => (0, PATTERN_EVENTS),
            FaultPattern::Mixed => (PATTERN_EVENTS, PATTERN_EVENTS),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa17_0000);
        let wanted = ((clips + bad) as u64).min(steps.saturating_sub(1)) as usize;
        let mut picked = BTreeSet::new();
        while picked.len() < wanted {
            picked.insert(rng.random_range(1..steps));
        }
        let mut order: Vec<u64> = picked.into_iter().collect();
        // interleave kinds along the stream instead of clustering them
        let mut faults = Vec::with_capacity(order.len());
        for (i, iteration) in order.drain(..).enumerate() {
            let clip_turn = match self {
                FaultPattern::Clip => true,
                FaultPattern::NonFinite => false,
                _ => i % 2 == 0,
            };
            let fault = if clip_turn {
                Fault {
                    iteration,
                    kind: FaultKind::Scale,
                    factor: Some(CLIP_BURST_FACTOR),
                    element: None,
                }
            } else {
                Fault {
                    iteration,
                    kind: if i % 4 < 2 {
                        FaultKind::Nan
                    } else {
                        FaultKind::Inf
                    },
                    factor: None,
                    element: Some(rng.random_range(0..usize::MAX)),
                }
            };
            faults.push(fault);
        }
        FaultPlan { faults }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_format() {
        let text = r#"
            [[fault]]
            iteration = 3
            kind = "nan"
            element = 17

            [[fault]]
            iteration = 8
            kind = "scale"
            factor = 1000.0
        "#;
        let plan = FaultPlan::from_toml_str(text).unwrap();
        assert_eq!(plan.faults.len(), 2);
        assert_eq!(plan.faults[1].factor, Some(1000.0));
        assert_eq!(FaultPlan::from_toml_str(&plan.to_toml()).unwrap(), plan);
        assert!(FaultPlan::from_toml_str("").unwrap().faults.is_empty());
    }

    #[test]
    fn rejects_bad_faults() {
        assert!(FaultPlan::from_toml_str("[[fault]]\niteration = 1\nkind = \"scale\"\n").is_err());
        assert!(FaultPlan::from_toml_str(
            "[[fault]]\niteration = 1\nkind = \"nan\"\nfactor = 2.0\n"
        )
        .is_err());
        assert!(FaultPlan::from_toml_str("[[fault]]\niteration = 1\nkind = \"melt\"\n").is_err());
    }

    #[test]
    fn applies_only_at_its_iteration() {
        let plan =
            FaultPlan::from_toml_str("[[fault]]\niteration = 2\nkind = \"inf\"\nelement = 5\n")
                .unwrap();
        let mut g = vec![1.0f32; 4];
        assert!(!plan.apply(1, &mut g));
        assert!(g.iter().all(|x| x.is_finite()));
        assert!(plan.apply(2, &mut g));
        assert_eq!(g[1], f32::INFINITY);
    }

    #[test]
    fn generated_patterns_have_enough_events() {
        let mixed = FaultPattern::Mixed.plan(200, 3);
        assert_eq!(mixed.iterations(FaultKind::Scale).len(), PATTERN_EVENTS);
        let bad = mixed.iterations(FaultKind::Nan).len() + mixed.iterations(FaultKind::Inf).len();
        assert_eq!(bad, PATTERN_EVENTS);
        assert!(mixed
            .faults
            .iter()
            .all(|f| f.iteration >= 1 && f.iteration < 200));
        assert_eq!(mixed, FaultPattern::Mixed.plan(200, 3));
        assert!(FaultPattern::Clean.plan(200, 3).faults.is_empty());
        assert_eq!(FaultPattern::Clip.plan(3, 0).faults.len(), 2);
        assert_eq!(
            FaultPattern::parse("nonfinite"),
            Some(FaultPattern::NonFinite)
        );
    }
}
