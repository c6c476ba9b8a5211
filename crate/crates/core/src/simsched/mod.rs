//! Discrete-event simulation of offloaded training iterations.
//!
//! A schedule is turned into a task graph (one task per forward/backward
//! bucket, transfer, optimizer step, validation) and placed by a list
//! scheduler with one server per resource. Timestamps are continuous `f64`
//! seconds. The first iteration is a warm-up and is left out of all averaged
//! metrics.
//!
//! Two schedules are modeled:
//!
//! * [`Schedule::BaselineSte`]: the CPU waits for every offloaded gradient
//!   before stepping, and the next forward waits for every updated parameter.
//! * [`Schedule::SuperStv`]: each offloaded bucket is stepped as soon as its
//!   gradient lands, validation (global norm, non-finite check) runs on the CPU
//!   afterwards, and the next forward only waits for the buckets it touches.
//!   The next backward waits for the verdict.

mod ablation;
mod engine;
mod multichip;

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::hwmodel::{bandwidth_at, HardwareProfile};
use crate::memplan::{placement, ModelConfig, Parallelism, WeightPolicy, Workload};
use crate::partition::{derive_costs, BucketCosts, CostKnobs, PartitionPlan};
use crate::{Error, Result};

pub use ablation::{
    ablation_run, configure_ablation, AblationRow, Toggle, ENABLE_ORDER, UNTUNED_ADAM_SLOWDOWN,
};
pub use multichip::{
    simulate_multichip, simulate_multichip_with, ulysses_policy, MultiChipConfig,
    DEFAULT_INTERCONNECT_BW,
};

use engine::Graph;

/// Iterations simulated by default: one warm-up plus three measured.
pub const DEFAULT_ITERATIONS: u32 = 4;

/// Flops per parameter for the validation pass (square and accumulate).
pub const VALIDATE_FLOPS_PER_PARAM: f64 = 2.0;

/// Rollback cost reference: seconds to restore a shard of this many parameters.
pub const ROLLBACK_REFERENCE_SECONDS: f64 = 2.0;
pub const ROLLBACK_REFERENCE_PARAMS: f64 = 175e9 / 16.0;

/// Version tag written at the top of trace and summary CSV files.
pub const CSV_SCHEMA: &str = "offload-trace/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resource {
    GpuCompute,
    CpuCompute,
    LinkD2H,
    LinkH2D,
    Interconnect,
}

impl Resource {
    pub const ALL: [Resource; 5] = [
        Resource::GpuCompute,
        Resource::CpuCompute,
        Resource::LinkD2H,
        Resource::LinkH2D,
        Resource::Interconnect,
    ];

    pub(crate) fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Resource::GpuCompute => "gpu",
            Resource::CpuCompute => "cpu",
            Resource::LinkD2H => "d2h",
            Resource::LinkH2D => "h2d",
            Resource::Interconnect => "interconnect",
        }
    }
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Fwd,
    Bwd,
    MoveGrad,
    StepCpu,
    StepGpu,
    MoveParam,
    Validate,
    Rollback,
    FetchWeights,
    AllGather,
    ReduceScatter,
    AllToAll,
    /// Zero-length join point; never appears in a trace.
    Barrier,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Fwd => "fwd",
            Label::Bwd => "bwd",
            Label::MoveGrad => "move_grad",
            Label::StepCpu => "step_cpu",
            Label::StepGpu => "step_gpu",
            Label::MoveParam => "move_param",
            Label::Validate => "validate",
            Label::Rollback => "rollback",
            Label::FetchWeights => "fetch_weights",
            Label::AllGather => "all_gather",
            Label::ReduceScatter => "reduce_scatter",
            Label::AllToAll => "all_to_all",
            Label::Barrier => "barrier",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub resource: Resource,
    pub label: Label,
    pub bucket: Option<u32>,
    pub iteration: u32,
    pub start: f64,
    pub end: f64,
}

impl Event {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Schedule {
    BaselineSte,
    SuperStv,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::BaselineSte => "ste",
            Schedule::SuperStv => "stv",
        }
    }
}

/// A schedule together with the weight policy and bucket plan it runs with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleKind {
    pub schedule: Schedule,
    pub policy: WeightPolicy,
    pub plan: PartitionPlan,
}

impl ScheduleKind {
    pub fn new(schedule: Schedule, policy: WeightPolicy, plan: PartitionPlan) -> Self {
        ScheduleKind {
            schedule,
            policy,
            plan,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub iterations: u32,
    pub knobs: CostKnobs,
    /// Iterations whose validation fails and pays a rollback.
    pub rollback_iterations: Vec<u32>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            iterations: DEFAULT_ITERATIONS,
            knobs: CostKnobs::default(),
            rollback_iterations: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub schedule: Schedule,
    pub policy: WeightPolicy,
    pub chips: u32,
    pub parallelism: Option<Parallelism>,
    pub bucket_bytes: u64,
    pub gpu_buckets: usize,
    /// Model flops per iteration across all chips.
    pub model_flops: f64,
    /// Theoretical peak per chip.
    pub peak_flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub events: Vec<Event>,
    /// `(before, after)` event indices: `after` may not start before `before` ends.
    pub edges: Vec<(usize, usize)>,
    /// Start of each iteration's first forward, plus the start the next
    /// iteration's first forward would have.
    pub iteration_boundaries: Vec<f64>,
    pub meta: TraceMeta,
}

/// Per-bucket timing inputs shared by the graph builder and the closed forms.
pub(crate) struct BucketTimes {
    pub costs: Vec<BucketCosts>,
    pub fetch: Vec<f64>,
    pub all_gather: Vec<f64>,
    pub reduce_scatter: Vec<f64>,
    pub all_to_all: Vec<f64>,
    pub validate: f64,
    pub rollback: f64,
}

/// How the work of one chip relates to the whole model.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub shards: f64,
    pub tokens: f64,
    pub interconnect_bw: f64,
    pub all_gather: bool,
    pub reduce_scatter: bool,
    /// Bytes exchanged per parameter of a bucket in each all-to-all.
    pub all_to_all_bytes_per_param: Option<f64>,
}

impl Layout {
    pub fn single(workload: Workload) -> Self {
        Layout {
            shards: 1.0,
            tokens: workload.tokens(),
            interconnect_bw: f64::INFINITY,
            all_gather: false,
            reduce_scatter: false,
            all_to_all_bytes_per_param: None,
        }
    }
}

pub(crate) fn bucket_times(
    plan: &PartitionPlan,
    model: &ModelConfig,
    profile: &HardwareProfile,
    knobs: &CostKnobs,
    layout: &Layout,
) -> Result<BucketTimes> {
    let mut cache: HashMap<u64, (BucketCosts, f64)> = HashMap::new();
    let k = plan.bucket_count();
    let mut t = BucketTimes {
        costs: Vec::with_capacity(k),
        fetch: Vec::with_capacity(k),
        all_gather: Vec::with_capacity(k),
        reduce_scatter: Vec::with_capacity(k),
        all_to_all: Vec::with_capacity(k),
        validate: 0.0,
        rollback: 0.0,
    };
    for b in &plan.buckets {
        let bytes = b.bytes();
        let (costs, fetch) = match cache.get(&bytes) {
            Some(&hit) => hit,
            None => {
                let c = derive_costs(bytes as f64, layout.shards, layout.tokens, profile, knobs)?;
                let f = bytes as f64 / bandwidth_at(profile, bytes as f64)?;
                cache.insert(bytes, (c, f));
                (c, f)
            }
        };
        t.costs.push(costs);
        t.fetch.push(fetch);
        let wire = bytes as f64 / layout.interconnect_bw;
        t.all_gather
            .push(if layout.all_gather { wire } else { 0.0 });
        t.reduce_scatter
            .push(if layout.reduce_scatter { wire } else { 0.0 });
        t.all_to_all.push(
            layout
                .all_to_all_bytes_per_param
                .map_or(0.0, |per| per * b.params() as f64 / layout.interconnect_bw),
        );
    }
    let local_params = model.params() / layout.shards;
    t.validate = VALIDATE_FLOPS_PER_PARAM * local_params / profile.cpu_peak_flops;
    t.rollback = ROLLBACK_REFERENCE_SECONDS * local_params / ROLLBACK_REFERENCE_PARAMS;
    Ok(t)
}

/// Handles from one iteration that the next one depends on.
struct Carry {
    last_gpu: usize,
    step_gpu: Vec<Option<usize>>,
    move_param: Vec<Option<usize>>,
    step_cpu: Vec<Option<usize>>,
    /// STE: join of all parameter returns (stationary) or CPU steps (flow).
    barrier: Option<usize>,
    /// STV: verdict the next backward waits for.
    gate: Option<usize>,
}

/// Builds the task graph. Returns the graph and the first-forward task of
/// every iteration, the last entry being a hidden opener of one extra iteration.
fn build_graph(
    kind: &ScheduleKind,
    times: &BucketTimes,
    layout: &Layout,
    opts: &SimOptions,
) -> (Graph, Vec<usize>) {
    use Label::*;
    use Resource::*;

    let plan = &kind.plan;
    let k = plan.bucket_count();
    let n = plan.gpu_resident_count;
    let stv = kind.schedule == Schedule::SuperStv;
    let flow = kind.policy == WeightPolicy::Flow;
    let ulysses = layout.all_to_all_bytes_per_param.is_some();
    let mut g = Graph::default();
    let mut openers = Vec::new();
    let mut carry: Option<Carry> = None;

    for i in 0..=opts.iterations {
        let opening_only = i == opts.iterations;
        let first_hidden = g.tasks.len();

        // forward, bucket 0 upwards
        let mut fwd: Vec<usize> = Vec::with_capacity(k);
        let mut a2a_fwd: Vec<usize> = Vec::new();
        for b in 0..k {
            let mut pre: Vec<usize> = Vec::new();
            if let Some(c) = &carry {
                if b < n {
                    pre.extend(c.step_gpu[b]);
                }
                if !stv {
                    pre.extend(c.barrier);
                }
            }
            if flow && b >= n {
                let mut deps: Vec<usize> = if b >= 2 { vec![fwd[b - 2]] } else { Vec::new() };
                if let Some(c) = &carry {
                    if stv {
                        deps.extend(c.step_cpu[b]);
                    }
                    deps.extend(c.barrier);
                }
                pre = vec![g.add(LinkH2D, FetchWeights, Some(b), i, times.fetch[b], deps)];
            } else if stv && b >= n {
                if let Some(c) = &carry {
                    pre.extend(c.move_param[b]);
                }
            }
            if layout.all_gather {
                if b >= 2 {
                    pre.push(fwd[b - 2]);
                }
                pre = vec![g.add(
                    Interconnect,
                    AllGather,
                    Some(b),
                    i,
                    times.all_gather[b],
                    pre,
                )];
            }
            let mut deps = pre;
            if b > 0 {
                deps.push(fwd[b - 1]);
                if ulysses {
                    deps.push(a2a_fwd[b - 1]);
                }
            } else if let Some(c) = &carry {
                deps.push(c.last_gpu);
            }
            fwd.push(g.add(
                GpuCompute,
                Fwd,
                Some(b),
                i,
                times.costs[b].fwd_per_bucket,
                deps,
            ));
            if ulysses {
                a2a_fwd.push(g.add(
                    Interconnect,
                    AllToAll,
                    Some(b),
                    i,
                    times.all_to_all[b],
                    vec![fwd[b]],
                ));
            }
            if opening_only {
                break;
            }
        }
        openers.push(fwd[0]);
        if opening_only {
            for t in first_hidden..g.tasks.len() {
                g.hide(t);
            }
            break;
        }

        // backward, bucket K-1 downwards
        let mut bwd: Vec<Option<usize>> = vec![None; k];
        let mut grad_ready: Vec<usize> = vec![0; k];
        let mut move_grad: Vec<Option<usize>> = vec![None; k];
        let mut prev_a2a: Option<usize> = None;
        for b in (0..k).rev() {
            let mut deps = if b + 1 == k {
                let mut d = vec![fwd[k - 1]];
                d.extend(a2a_fwd.last().copied());
                if let Some(c) = &carry {
                    d.extend(c.gate);
                }
                d
            } else {
                let mut d = vec![bwd[b + 1].unwrap()];
                d.extend(prev_a2a);
                d
            };
            if flow && b >= n && b + 2 < k {
                let window = bwd[b + 2].unwrap();
                deps.push(g.add(
                    LinkH2D,
                    FetchWeights,
                    Some(b),
                    i,
                    times.fetch[b],
                    vec![window],
                ));
            }
            let t = g.add(
                GpuCompute,
                Bwd,
                Some(b),
                i,
                times.costs[b].bwd_per_bucket,
                deps,
            );
            bwd[b] = Some(t);
            if ulysses {
                prev_a2a = Some(g.add(
                    Interconnect,
                    AllToAll,
                    Some(b),
                    i,
                    times.all_to_all[b],
                    vec![t],
                ));
            }
            grad_ready[b] = if layout.reduce_scatter {
                g.add(
                    Interconnect,
                    ReduceScatter,
                    Some(b),
                    i,
                    times.reduce_scatter[b],
                    vec![t],
                )
            } else {
                t
            };
            if b >= n {
                move_grad[b] = Some(g.add(
                    LinkD2H,
                    MoveGrad,
                    Some(b),
                    i,
                    times.costs[b].move_grad,
                    vec![grad_ready[b]],
                ));
            }
        }
        let bwd_last = bwd[0].unwrap();
        let gpu_tail = prev_a2a.unwrap_or(bwd_last);

        // offloaded optimizer steps
        let mut step_cpu: Vec<Option<usize>> = vec![None; k];
        let mut move_param: Vec<Option<usize>> = vec![None; k];
        if n < k {
            let grads_in = if stv {
                None
            } else {
                let all: Vec<usize> = move_grad.iter().flatten().copied().collect();
                let join = g.add(LinkD2H, Barrier, None, i, 0.0, all);
                g.hide(join);
                Some(join)
            };
            for b in (n..k).rev() {
                let deps = match grads_in {
                    Some(join) => vec![join],
                    None => vec![move_grad[b].unwrap()],
                };
                let s = g.add(
                    CpuCompute,
                    StepCpu,
                    Some(b),
                    i,
                    times.costs[b].step_cpu,
                    deps,
                );
                step_cpu[b] = Some(s);
                if !flow {
                    move_param[b] = Some(g.add(
                        LinkH2D,
                        MoveParam,
                        Some(b),
                        i,
                        times.costs[b].move_param,
                        vec![s],
                    ));
                }
            }
        }

        // resident optimizer steps after the whole backward pass
        let mut step_gpu: Vec<Option<usize>> = vec![None; k];
        for b in (0..n).rev() {
            let mut deps = vec![gpu_tail];
            if layout.reduce_scatter {
                deps.push(grad_ready[b]);
            }
            step_gpu[b] = Some(g.add(
                GpuCompute,
                StepGpu,
                Some(b),
                i,
                times.costs[b].step_gpu_per_bucket,
                deps,
            ));
        }

        let mut barrier = None;
        let mut gate = None;
        if stv {
            let mut deps = vec![gpu_tail];
            if layout.reduce_scatter {
                deps.push(grad_ready[0]);
            }
            deps.extend(step_cpu.iter().flatten().copied());
            let v = g.add(CpuCompute, Validate, None, i, times.validate, deps);
            gate = Some(v);
            if opts.rollback_iterations.contains(&i) {
                gate = Some(g.add(CpuCompute, Rollback, None, i, times.rollback, vec![v]));
            }
        } else if n < k {
            let returns: Vec<usize> = if flow {
                step_cpu.iter().flatten().copied().collect()
            } else {
                move_param.iter().flatten().copied().collect()
            };
            let r = if flow { CpuCompute } else { LinkH2D };
            let join = g.add(r, Barrier, None, i, 0.0, returns);
            g.hide(join);
            barrier = Some(join);
        }

        carry = Some(Carry {
            last_gpu: gpu_tail,
            step_gpu,
            move_param,
            step_cpu,
            barrier,
            gate,
        });
    }
    (g, openers)
}

pub(crate) fn run_graph(
    kind: &ScheduleKind,
    times: &BucketTimes,
    layout: &Layout,
    opts: &SimOptions,
    meta: TraceMeta,
) -> ScheduleTrace {
    let (graph, openers) = build_graph(kind, times, layout, opts);
    let placed = engine::run(&graph);

    let mut event_of = vec![usize::MAX; graph.tasks.len()];
    let mut events = Vec::new();
    for (i, t) in graph.tasks.iter().enumerate() {
        if !t.hidden {
            event_of[i] = events.len();
            events.push(Event {
                resource: t.resource,
                label: t.label,
                bucket: t.bucket,
                iteration: t.iteration,
                start: placed[i].0,
                end: placed[i].1,
            });
        }
    }
    // dependencies through hidden joins are resolved to the visible tasks behind them
    let mut visible_deps: Vec<Option<Vec<usize>>> = vec![None; graph.tasks.len()];
    fn resolve(
        i: usize,
        graph: &Graph,
        memo: &mut Vec<Option<Vec<usize>>>,
        event_of: &[usize],
    ) -> Vec<usize> {
        if let Some(v) = &memo[i] {
            return v.clone();
        }
        let mut out = Vec::new();
        for &d in &graph.tasks[i].deps {
            if event_of[d] != usize::MAX {
                out.push(event_of[d]);
            } else {
                out.extend(resolve(d, graph, memo, event_of));
            }
        }
        out.sort_unstable();
        out.dedup();
        memo[i] = Some(out.clone());
        out
    }
    let mut edges = Vec::new();
    for (i, t) in graph.tasks.iter().enumerate() {
        if t.hidden {
            continue;
        }
        for d in resolve(i, &graph, &mut visible_deps, &event_of) {
            edges.push((d, event_of[i]));
        }
    }
    let iteration_boundaries = openers.iter().map(|&t| placed[t].0).collect();
    ScheduleTrace {
        events,
        edges,
        iteration_boundaries,
        meta,
    }
}

/// Errors unless the placement fits the profile's usable memory.
fn check_feasible(
    model: &ModelConfig,
    workload: Workload,
    policy: WeightPolicy,
    profile: &HardwareProfile,
) -> Result<()> {
    let fp = placement(model, workload.bsz as f64, workload.seq as f64, policy);
    if fp.fits(profile) {
        Ok(())
    } else {
        Err(Error::Infeasible(format!(
            "{} at bsz {} seq {} under {:?}: needs {:.3e} B GPU / {:.3e} B CPU",
            model.label(),
            workload.bsz,
            workload.seq,
            policy,
            fp.gpu_resident_bytes,
            fp.cpu_resident_bytes
        )))
    }
}

pub fn simulate(
    kind: &ScheduleKind,
    model: &ModelConfig,
    workload: Workload,
    profile: &HardwareProfile,
) -> Result<ScheduleTrace> {
    simulate_with(kind, model, workload, profile, &SimOptions::default())
}

pub fn simulate_with(
    kind: &ScheduleKind,
    model: &ModelConfig,
    workload: Workload,
    profile: &HardwareProfile,
    opts: &SimOptions,
) -> Result<ScheduleTrace> {
    if opts.iterations == 0 {
        return Err(Error::domain("at least one iteration is required"));
    }
    if workload.bsz == 0 || workload.seq == 0 {
        return Err(Error::domain("bsz and seq must be positive"));
    }
    kind.plan.check()?;
    check_feasible(model, workload, kind.policy, profile)?;
    let layout = Layout::single(workload);
    let times = bucket_times(&kind.plan, model, profile, &opts.knobs, &layout)?;
    let meta = TraceMeta {
        schedule: kind.schedule,
        policy: kind.policy,
        chips: 1,
        parallelism: None,
        bucket_bytes: kind.plan.bucket_bytes,
        gpu_buckets: kind.plan.gpu_resident_count,
        model_flops: 6.0 * model.params() * workload.tokens(),
        peak_flops: profile.gpu_peak_flops,
    };
    Ok(run_graph(kind, &times, &layout, opts, meta))
}

impl ScheduleTrace {
    /// Iteration indices that count toward averages (all but the warm-up).
    pub fn measured_iterations(&self) -> std::ops::Range<usize> {
        let iters = self.iteration_boundaries.len().saturating_sub(1);
        if iters >= 2 {
            1..iters
        } else {
            0..iters
        }
    }

    pub fn iteration_span(&self, i: usize) -> f64 {
        self.iteration_boundaries[i + 1] - self.iteration_boundaries[i]
    }

    pub fn mean_iteration_time(&self) -> f64 {
        let r = self.measured_iterations();
        let count = r.len() as f64;
        r.map(|i| self.iteration_span(i)).sum::<f64>() / count
    }

    pub fn busy_time(&self, resource: Resource, from: f64, to: f64) -> f64 {
        self.events
            .iter()
            .filter(|e| e.resource == resource)
            .map(|e| (e.end.min(to) - e.start.max(from)).max(0.0))
            .sum()
    }

    /// Deterministic text form: one event per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# {CSV_SCHEMA}").unwrap();
        writeln!(out, "resource,label,bucket,iteration,start_s,end_s").unwrap();
        for e in &self.events {
            let bucket = e.bucket.map_or(String::new(), |b| b.to_string());
            writeln!(
                out,
                "{},{},{},{},{:?},{:?}",
                e.resource, e.label, bucket, e.iteration, e.start, e.end
            )
            .unwrap();
        }
        out
    }
}

/// `1 - busy / span` averaged over the measured iterations.
pub fn idle_fraction(trace: &ScheduleTrace, resource: Resource) -> f64 {
    let r = trace.measured_iterations();
    let count = r.len() as f64;
    r.map(|i| {
        let (from, to) = (
            trace.iteration_boundaries[i],
            trace.iteration_boundaries[i + 1],
        );
        let span = to - from;
        if span <= 0.0 {
            0.0
        } else {
            1.0 - trace.busy_time(resource, from, to) / span
        }
    })
    .sum::<f64>()
        / count
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub iteration_time: f64,
    pub flops_per_s: f64,
    /// Model flops per second over the theoretical peak of all chips.
    pub mfu: f64,
}

/// Model flops are `6·Ψ·tokens` per iteration (recomputation excluded).
pub fn throughput_estimate(
    trace: &ScheduleTrace,
    model: &ModelConfig,
    workload: Workload,
) -> Throughput {
    let chips = trace.meta.chips.max(1) as f64;
    let tokens = match trace.meta.parallelism {
        Some(Parallelism::Zero3) => workload.tokens() * chips,
        _ => workload.tokens(),
    };
    let flops = 6.0 * model.params() * tokens;
    let t = trace.mean_iteration_time();
    let flops_per_s = flops / t;
    Throughput {
        iteration_time: t,
        flops_per_s,
        mfu: flops_per_s / (trace.meta.peak_flops * chips),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schedule: Schedule,
    pub policy: WeightPolicy,
    pub bucket_bytes: u64,
    pub gpu_buckets: usize,
    pub iteration_time: f64,
    pub gpu_idle: f64,
    pub cpu_idle: f64,
    pub flops_per_s: f64,
    pub mfu: f64,
}

pub fn summarize(trace: &ScheduleTrace, model: &ModelConfig, workload: Workload) -> Summary {
    let tp = throughput_estimate(trace, model, workload);
    Summary {
        schedule: trace.meta.schedule,
        policy: trace.meta.policy,
        bucket_bytes: trace.meta.bucket_bytes,
        gpu_buckets: trace.meta.gpu_buckets,
        iteration_time: tp.iteration_time,
        gpu_idle: idle_fraction(trace, Resource::GpuCompute),
        cpu_idle: idle_fraction(trace, Resource::CpuCompute),
        flops_per_s: tp.flops_per_s,
        mfu: tp.mfu,
    }
}

/// Checks per-resource exclusivity, ordering, and every dependency edge.
pub fn check_trace(trace: &ScheduleTrace) -> std::result::Result<(), String> {
    for r in Resource::ALL {
        let mut spans: Vec<(f64, f64, usize)> = trace
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.resource == r)
            .map(|(i, e)| (e.start, e.end, i))
            .collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(format!("{r}: events {} and {} overlap", w[0].2, w[1].2));
            }
        }
        if let Some(&(s, e, i)) = spans.iter().find(|(s, e, _)| !(e >= s) || *s < 0.0) {
            return Err(format!("{r}: event {i} has bad interval [{s}, {e}]"));
        }
    }
    for &(before, after) in &trace.edges {
        let (b, a) = (&trace.events[before], &trace.events[after]);
        if a.start < b.end {
            return Err(format!(
                "{} {:?} (iteration {}) starts at {} before {} {:?} ends at {}",
                a.label, a.bucket, a.iteration, a.start, b.label, b.bucket, b.end
            ));
        }
    }
    for w in trace.iteration_boundaries.windows(2) {
        if w[1] < w[0] {
            return Err("iteration boundaries go backwards".into());
        }
    }
    Ok(())
}

/// Per-bucket costs for a single-chip run, for the closed forms and tests.
pub fn single_chip_costs(
    plan: &PartitionPlan,
    model: &ModelConfig,
    workload: Workload,
    profile: &HardwareProfile,
    knobs: &CostKnobs,
) -> Result<Vec<BucketCosts>> {
    Ok(bucket_times(plan, model, profile, knobs, &Layout::single(workload))?.costs)
}

/// Steady-state iteration time of a single-chip stationary schedule, valid
/// when [`closed_form_applies`] holds.
///
/// With `F`/`B` the total forward/backward time, `n` resident buckets,
/// `R = Σ_{b<n} bwd_b`, `S = Σ_{b<n} step_gpu_b`, `O = Σ_{b<n} fwd_b`:
///
/// * synchronize-then-execute: `F + max(B + S, B − R + mg_n + Σ step_cpu + mp_n)`
/// * speculate-then-validate: `F + B + S + max(0, mg_n + sc_n + mp_n − R − S − O)`
///
/// where bucket `n` is the last offloaded bucket to finish backward.
pub fn closed_form_iteration_time(
    schedule: Schedule,
    costs: &[BucketCosts],
    gpu_resident: usize,
) -> f64 {
    let n = gpu_resident;
    let k = costs.len();
    let f: f64 = costs.iter().map(|c| c.fwd_per_bucket).sum();
    let b: f64 = costs.iter().map(|c| c.bwd_per_bucket).sum();
    let r: f64 = costs[..n].iter().map(|c| c.bwd_per_bucket).sum();
    let s: f64 = costs[..n].iter().map(|c| c.step_gpu_per_bucket).sum();
    if n == k {
        return f + b + s;
    }
    let last = &costs[n];
    match schedule {
        Schedule::BaselineSte => {
            let cpu: f64 = costs[n..].iter().map(|c| c.step_cpu).sum();
            f + (b + s).max(b - r + last.move_grad + cpu + last.move_param)
        }
        Schedule::SuperStv => {
            let o: f64 = costs[..n].iter().map(|c| c.fwd_per_bucket).sum();
            f + b + s + (last.offload_chain() - r - s - o).max(0.0)
        }
    }
}

/// Whether links and the CPU keep pace bucket by bucket, so no queue forms
/// anywhere except the final round trip the closed forms account for.
pub fn closed_form_applies(
    schedule: Schedule,
    costs: &[BucketCosts],
    gpu_resident: usize,
    validate: f64,
) -> bool {
    let n = gpu_resident;
    let k = costs.len();
    if n == k {
        return true;
    }
    for b in n + 1..k {
        let (hi, lo) = (&costs[b], &costs[b - 1]);
        // gradient of b is off the link before b-1's lands
        if hi.move_grad > lo.bwd_per_bucket {
            return false;
        }
        match schedule {
            Schedule::BaselineSte => {
                if hi.move_param > lo.step_cpu {
                    return false;
                }
            }
            Schedule::SuperStv => {
                if hi.move_grad + hi.step_cpu > lo.bwd_per_bucket + lo.move_grad
                    || hi.move_param > lo.step_cpu
                {
                    return false;
                }
            }
        }
    }
    if schedule == Schedule::SuperStv {
        // the verdict must be in before the next backward and before the
        // CPU is needed for the next iteration's first offloaded bucket
        let t = closed_form_iteration_time(schedule, costs, n);
        let f: f64 = costs.iter().map(|c| c.fwd_per_bucket).sum();
        let b: f64 = costs.iter().map(|c| c.bwd_per_bucket).sum();
        let r: f64 = costs[..n].iter().map(|c| c.bwd_per_bucket).sum();
        let last = &costs[n];
        let verdict = f + b - r + last.move_grad + last.step_cpu + validate;
        if verdict > t + f {
            return false;
        }
    }
    true
}

/// Validation pass duration on a single chip.
pub fn validate_seconds(model: &ModelConfig, profile: &HardwareProfile) -> f64 {
    VALIDATE_FLOPS_PER_PARAM * model.params() / profile.cpu_peak_flops
}

/// Summary CSV with a schema header; one row per summary.
pub fn summaries_to_csv(model: &ModelConfig, workload: Workload, rows: &[Summary]) -> String {
    let mut out = String::new();
    writeln!(out, "# {CSV_SCHEMA}").unwrap();
    writeln!(
        out,
        "model,params,bsz,seq,schedule,policy,bucket_bytes,gpu_buckets,iteration_s,gpu_idle,cpu_idle,flops_per_s,mfu"
    )
    .unwrap();
    for s in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:?},{},{},{:?},{:?},{:?},{:?},{:?}",
            model.label(),
            model.param_count(),
            workload.bsz,
            workload.seq,
            s.schedule.name(),
            s.policy,
            s.bucket_bytes,
            s.gpu_buckets,
            s.iteration_time,
            s.gpu_idle,
            s.cpu_idle,
            s.flops_per_s,
            s.mfu
        )
        .unwrap();
    }
    out
}
