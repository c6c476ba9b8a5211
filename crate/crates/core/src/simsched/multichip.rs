//! Multi-chip extensions: ZeRO-3 style sharding and Ulysses sequence parallelism.

use serde::{Deserialize, Serialize};

use super::{bucket_times, run_graph, Layout, ScheduleKind, ScheduleTrace, SimOptions, TraceMeta};
use crate::hwmodel::HardwareProfile;
use crate::memplan::{sharded_placement, ModelConfig, Parallelism, WeightPolicy, Workload};
use crate::{Error, Result};

/// 200 Gb/s per chip.
pub const DEFAULT_INTERCONNECT_BW: f64 = 25e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiChipConfig {
    pub chips: u32,
    pub parallelism: Parallelism,
    /// Per-chip interconnect bandwidth, bytes/s.
    pub interconnect_bw: f64,
    pub profile: HardwareProfile,
}

impl MultiChipConfig {
    pub fn new(chips: u32, parallelism: Parallelism, profile: HardwareProfile) -> Self {
        MultiChipConfig {
            chips,
            parallelism,
            interconnect_bw: DEFAULT_INTERCONNECT_BW,
            profile,
        }
    }
}

/// Stationary when the sequence shard fits with resident weights, flow when
/// only streaming fits, otherwise infeasible.
pub fn ulysses_policy(
    model: &ModelConfig,
    workload: Workload,
    chips: u32,
    profile: &HardwareProfile,
) -> Result<WeightPolicy> {
    for policy in [WeightPolicy::Stationary, WeightPolicy::Flow] {
        let fp = sharded_placement(
            model,
            workload.bsz as f64,
            workload.seq as f64,
            chips,
            Parallelism::UlyssesSp,
            policy,
        );
        if fp.fits(profile) {
            return Ok(policy);
        }
    }
    Err(Error::Infeasible(format!(
        "{} at seq {} does not fit on {chips} chips under either weight policy",
        model.label(),
        workload.seq
    )))
}

pub fn simulate_multichip(
    cfg: &MultiChipConfig,
    kind: &ScheduleKind,
    model: &ModelConfig,
    workload: Workload,
) -> Result<ScheduleTrace> {
    simulate_multichip_with(cfg, kind, model, workload, &SimOptions::default())
}

/// Simulates one chip of a K-chip run; every chip runs the same timeline.
///
/// ZeRO-3 gathers each bucket's fp16 weights before its forward (`2Ψ` bytes
/// per iteration) and reduce-scatters its gradients after backward (`2Ψ`
/// bytes); each chip then offloads and steps only its `1/K` shard.
///
/// Ulysses splits the sequence `K` ways, exchanges attention inputs and
/// outputs with an all-to-all after every bucket of forward and backward,
/// reduce-scatters gradients, and picks its weight policy with
/// [`ulysses_policy`] (the policy in `kind` is ignored).
pub fn simulate_multichip_with(
    cfg: &MultiChipConfig,
    kind: &ScheduleKind,
    model: &ModelConfig,
    workload: Workload,
    opts: &SimOptions,
) -> Result<ScheduleTrace> {
    if cfg.chips == 0 {
        return Err(Error::domain("chip count must be at least 1"));
    }
    if cfg.chips == 1 {
        return super::simulate_with(kind, model, workload, &cfg.profile, opts);
    }
    if opts.iterations == 0 || workload.bsz == 0 || workload.seq == 0 {
        return Err(Error::domain("iterations, bsz and seq must be positive"));
    }
    if !(cfg.interconnect_bw > 0.0) {
        return Err(Error::domain("interconnect bandwidth must be positive"));
    }
    kind.plan.check()?;
    let k = cfg.chips as f64;
    let profile = &cfg.profile;
    let (layout, policy) = match cfg.parallelism {
        Parallelism::Zero3 => {
            let fp = sharded_placement(
                model,
                workload.bsz as f64,
                workload.seq as f64,
                cfg.chips,
                Parallelism::Zero3,
                kind.policy,
            );
            if !fp.fits(profile) {
                return Err(Error::Infeasible(format!(
                    "{} sharded {}-way under {:?} needs {:.3e} B GPU / {:.3e} B CPU per chip",
                    model.label(),
                    cfg.chips,
                    kind.policy,
                    fp.gpu_resident_bytes,
                    fp.cpu_resident_bytes
                )));
            }
            let layout = Layout {
                shards: k,
                tokens: workload.tokens(),
                interconnect_bw: cfg.interconnect_bw,
                all_gather: true,
                reduce_scatter: true,
                all_to_all_bytes_per_param: None,
            };
            (layout, kind.policy)
        }
        Parallelism::UlyssesSp => {
            let policy = ulysses_policy(model, workload, cfg.chips, profile)?;
            let local_tokens = workload.tokens() / k;
            // four fp16 exchanges of bsz * seq/K * h per layer, (K-1)/K of it remote
            let per_layer = 4.0 * 2.0 * local_tokens * model.hidden as f64 * (k - 1.0) / k;
            let layout = Layout {
                shards: k,
                tokens: local_tokens,
                interconnect_bw: cfg.interconnect_bw,
                all_gather: false,
                reduce_scatter: true,
                all_to_all_bytes_per_param: Some(per_layer / model.params_per_layer()),
            };
            (layout, policy)
        }
    };
    let kind = ScheduleKind {
        policy,
        ..kind.clone()
    };
    let times = bucket_times(&kind.plan, model, profile, &opts.knobs, &layout)?;
    let tokens = match cfg.parallelism {
        Parallelism::Zero3 => workload.tokens() * k,
        Parallelism::UlyssesSp => workload.tokens(),
    };
    let meta = TraceMeta {
        schedule: kind.schedule,
        policy,
        chips: cfg.chips,
        parallelism: Some(cfg.parallelism),
        bucket_bytes: kind.plan.bucket_bytes,
        gpu_buckets: kind.plan.gpu_resident_count,
        model_flops: 6.0 * model.params() * tokens,
        peak_flops: profile.gpu_peak_flops,
    };
    Ok(run_graph(&kind, &times, &layout, opts, meta))
}
