//! Optimization breakdown: switch the individual techniques on one at a time.

use serde::{Deserialize, Serialize};

use super::{simulate_with, throughput_estimate, Schedule, ScheduleKind, SimOptions};
use crate::hwmodel::{CastStrategy, HardwareProfile};
use crate::memplan::{placement, ModelConfig, WeightPolicy, Workload};
use crate::par::Exec;
use crate::partition::{grid_search, CostKnobs, GridSearch, PartitionPlan, DEFAULT_BUCKET_BYTES};
use crate::{Error, Result};

/// How much slower an untuned CPU Adam kernel is than the tuned one.
pub const UNTUNED_ADAM_SLOWDOWN: f64 = 1.36;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Toggle {
    /// Tuned CPU Adam kernel; off multiplies CPU step time by [`UNTUNED_ADAM_SLOWDOWN`].
    GraceAdamSpeed,
    /// Cheaper cast placement; off forces casting on the CPU after a half-precision move.
    CastOpt,
    /// Speculative schedule; off synchronizes before and after the CPU step.
    Stv,
    /// GPU-resident tail buckets chosen by grid search; off offloads every bucket.
    BucketRepart,
}

impl Toggle {
    pub fn name(self) -> &'static str {
        match self {
            Toggle::GraceAdamSpeed => "grace_adam",
            Toggle::CastOpt => "cast_opt",
            Toggle::Stv => "stv",
            Toggle::BucketRepart => "bucket_repart",
        }
    }
}

/// Order in which the ladder enables techniques.
pub const ENABLE_ORDER: [Toggle; 4] = [
    Toggle::GraceAdamSpeed,
    Toggle::CastOpt,
    Toggle::Stv,
    Toggle::BucketRepart,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub enabled: Vec<Toggle>,
    pub schedule: Schedule,
    pub bucket_bytes: u64,
    pub gpu_buckets: usize,
    pub iteration_time: f64,
    pub flops_per_s: f64,
}

fn policy_for(
    model: &ModelConfig,
    workload: Workload,
    profile: &HardwareProfile,
) -> Result<WeightPolicy> {
    for policy in [WeightPolicy::Stationary, WeightPolicy::Flow] {
        if placement(model, workload.bsz as f64, workload.seq as f64, policy).fits(profile) {
            return Ok(policy);
        }
    }
    Err(Error::Infeasible(format!(
        "{} does not fit under either weight policy",
        model.label()
    )))
}

/// Schedule and cost knobs for a set of enabled techniques.
pub fn configure_ablation(
    model: &ModelConfig,
    workload: Workload,
    profile: &HardwareProfile,
    enabled: &[Toggle],
    exec: Exec,
) -> Result<(ScheduleKind, SimOptions)> {
    let on = |t: Toggle| enabled.contains(&t);
    let knobs = CostKnobs {
        cpu_adam_slowdown: if on(Toggle::GraceAdamSpeed) {
            1.0
        } else {
            UNTUNED_ADAM_SLOWDOWN
        },
        cast: if on(Toggle::CastOpt) {
            None
        } else {
            Some(CastStrategy::CastOnCpuMoveHalf)
        },
    };
    let schedule = if on(Toggle::Stv) {
        Schedule::SuperStv
    } else {
        Schedule::BaselineSte
    };
    let policy = policy_for(model, workload, profile)?;
    let plan = if on(Toggle::BucketRepart) {
        let search = GridSearch {
            schedule,
            policy,
            knobs,
            exec,
            ..GridSearch::default()
        };
        grid_search(model, workload, profile, &search)?.plan
    } else {
        PartitionPlan::for_model(model, DEFAULT_BUCKET_BYTES)?
    };
    let opts = SimOptions {
        knobs,
        ..SimOptions::default()
    };
    Ok((ScheduleKind::new(schedule, policy, plan), opts))
}

/// Throughput with nothing enabled, then with each requested toggle added
/// cumulatively in [`ENABLE_ORDER`].
pub fn ablation_run(
    model: &ModelConfig,
    workload: Workload,
    profile: &HardwareProfile,
    toggles: &[Toggle],
) -> Result<Vec<AblationRow>> {
    let ladder: Vec<Toggle> = ENABLE_ORDER
        .iter()
        .copied()
        .filter(|t| toggles.contains(t))
        .collect();
    (0..=ladder.len())
        .map(|i| {
            let enabled = ladder[..i].to_vec();
            let (kind, opts) =
                configure_ablation(model, workload, profile, &enabled, Exec::default())?;
            let trace = simulate_with(&kind, model, workload, profile, &opts)?;
            let tp = throughput_estimate(&trace, model, workload);
            Ok(AblationRow {
                enabled,
                schedule: kind.schedule,
                bucket_bytes: kind.plan.bucket_bytes,
                gpu_buckets: kind.plan.gpu_resident_count,
                iteration_time: tp.iteration_time,
                flops_per_s: tp.flops_per_s,
            })
        })
        .collect()
}
