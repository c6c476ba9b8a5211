//! The subcommands. Each returns its results and the table printed to stdout,
//! and writes its artifacts under the experiment's output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use offload_core::memplan::{
    max_trainable_params, placement, presets, sharded_placement, ModelConfig, Parallelism,
    PolicyMode, WeightPolicy, Workload,
};
use offload_core::numcore::{run_verify, Mutation, Scheduler, VerifyConfig, VerifyReport};
use offload_core::partition::{grid_search, GridSearch, PartitionPlan, DEFAULT_BUCKET_BYTES};
use offload_core::simsched::{
    ablation_run, simulate as simulate_single, simulate_multichip, summaries_to_csv, summarize,
    AblationRow, MultiChipConfig, Schedule, ScheduleKind, ScheduleTrace, Summary,
};
use offload_core::{Error, MIB};

use crate::args::{ExperimentSpec, GpuBuckets};
use crate::table::Table;
use crate::CliError;

pub const COMPARE_SCHEMA: &str = "offload-compare/1";
pub const ABLATION_SCHEMA: &str = "offload-ablation/1";
pub const SCAN_SCHEMA: &str = "offload-scan/1";
pub const MAX_MODEL_SCHEMA: &str = "offload-max-model/1";

fn write_file(path: &Path, contents: &str) -> Result<PathBuf, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Output {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(path.to_path_buf())
}

pub fn policy_name(p: WeightPolicy) -> &'static str {
    match p {
        WeightPolicy::Stationary => "stationary",
        WeightPolicy::Flow => "flow",
    }
}

pub fn parallelism_name(p: Parallelism) -> &'static str {
    match p {
        Parallelism::Zero3 => "zero3",
        Parallelism::UlyssesSp => "ulysses",
    }
}

pub fn mode_name(m: PolicyMode) -> &'static str {
    match m {
        PolicyMode::GpuOnly => "gpu_only",
        PolicyMode::OptimOffload => "optim_offload",
        PolicyMode::Adaptive => "adaptive",
    }
}

/// Per-chip feasibility of one weight policy for the experiment's chip layout.
pub fn policy_fits(
    spec: &ExperimentSpec,
    model: &ModelConfig,
    w: Workload,
    policy: WeightPolicy,
) -> bool {
    let (bsz, seq) = (w.bsz as f64, w.seq as f64);
    let fp = if spec.chips == 1 {
        placement(model, bsz, seq, policy)
    } else {
        sharded_placement(model, bsz, seq, spec.chips, spec.parallelism, policy)
    };
    fp.fits(&spec.profile)
}

/// Stationary when it fits, else flow when it fits.
pub fn feasible_policy(
    spec: &ExperimentSpec,
    model: &ModelConfig,
    w: Workload,
) -> Option<WeightPolicy> {
    [WeightPolicy::Stationary, WeightPolicy::Flow]
        .into_iter()
        .find(|&p| policy_fits(spec, model, w, p))
}

fn bucket_bytes(spec: &ExperimentSpec) -> u64 {
    spec.bucket_mb.map_or(DEFAULT_BUCKET_BYTES, |mb| mb * MIB)
}

/// Bucket plan for one schedule. A fixed `--gpu-buckets` applies to both
/// schedules; `auto` offloads every bucket for the baseline and grid-searches
/// the speculative schedule on a single chip.
pub fn plan_for(
    spec: &ExperimentSpec,
    model: &ModelConfig,
    w: Workload,
    schedule: Schedule,
    policy: WeightPolicy,
) -> Result<PartitionPlan, CliError> {
    let base = PartitionPlan::for_model(model, bucket_bytes(spec))?;
    match (spec.gpu_buckets, schedule) {
        (GpuBuckets::Fixed(n), _) => {
            if n > base.bucket_count() {
                return Err(CliError::Config(format!(
                    "gpu-buckets: {n} exceeds the {} buckets of {}",
                    base.bucket_count(),
                    model.label()
                )));
            }
            Ok(base.with_gpu_resident(n)?)
        }
        (GpuBuckets::Auto, Schedule::SuperStv) if spec.chips == 1 => {
            let mut search = GridSearch {
                schedule,
                policy,
                ..GridSearch::default()
            };
            if let Some(mb) = spec.bucket_mb {
                search.bk_candidates = vec![mb * MIB];
            }
            Ok(grid_search(model, w, &spec.profile, &search)?.plan)
        }
        (GpuBuckets::Auto, _) => Ok(base),
    }
}

/// One simulated schedule.
#[derive(Clone, Debug)]
pub struct SimRun {
    pub schedule: Schedule,
    pub plan: PartitionPlan,
    pub trace: ScheduleTrace,
    pub summary: Summary,
}

/// Simulates `schedule` for `model` under the experiment's profile and chip layout.
/// `Ok(None)` means no weight policy fits.
pub fn run_schedule(
    spec: &ExperimentSpec,
    model: &ModelConfig,
    w: Workload,
    schedule: Schedule,
) -> Result<Option<SimRun>, CliError> {
    let Some(policy) = feasible_policy(spec, model, w) else {
        return Ok(None);
    };
    let plan = plan_for(spec, model, w, schedule, policy)?;
    let kind = ScheduleKind::new(schedule, policy, plan.clone());
    let traced = if spec.chips == 1 {
        simulate_single(&kind, model, w, &spec.profile)
    } else {
        let cfg = MultiChipConfig::new(spec.chips, spec.parallelism, spec.profile.clone());
        simulate_multichip(&cfg, &kind, model, w)
    };
    let trace = match traced {
        Ok(t) => t,
        Err(Error::Infeasible(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let summary = summarize(&trace, model, w);
    Ok(Some(SimRun {
        schedule,
        plan,
        trace,
        summary,
    }))
}

fn infeasible(spec: &ExperimentSpec, model: &ModelConfig, w: Workload) -> CliError {
    CliError::Config(format!(
        "model: {} with bsz {} seq {} does not fit on {} chip(s) of profile {} under either weight policy",
        model.label(),
        w.bsz,
        w.seq,
        spec.chips,
        spec.profile_source
    ))
}

fn summary_cells(model: &str, s: &Summary) -> Vec<String> {
    vec![
        model.to_string(),
        s.schedule.name().to_string(),
        policy_name(s.policy).to_string(),
        (s.bucket_bytes / MIB).to_string(),
        s.gpu_buckets.to_string(),
        format!("{:.4}", s.iteration_time),
        format!("{:.3}", s.gpu_idle),
        format!("{:.3}", s.cpu_idle),
        format!("{:.1}", s.flops_per_s / 1e12),
        format!("{:.3}", s.mfu),
    ]
}

const SUMMARY_HEADER: [&str; 10] = [
    "model",
    "schedule",
    "policy",
    "bucket_mib",
    "gpu_buckets",
    "iter_s",
    "gpu_idle",
    "cpu_idle",
    "tflops",
    "mfu",
];

#[derive(Clone, Debug)]
pub struct SimulateResult {
    pub runs: Vec<SimRun>,
    /// Speculative over baseline throughput, when both ran.
    pub speedup: Option<f64>,
    pub files: Vec<PathBuf>,
    pub table: String,
}

impl SimulateResult {
    pub fn run(&self, schedule: Schedule) -> Option<&SimRun> {
        self.runs.iter().find(|r| r.schedule == schedule)
    }
}

fn speedup(ste: Option<&Summary>, stv: Option<&Summary>) -> Option<f64> {
    Some(stv?.flops_per_s / ste?.flops_per_s)
}

pub fn simulate(spec: &ExperimentSpec) -> Result<SimulateResult, CliError> {
    let model = &spec.model;
    let w = spec.workload;
    let label = model.label();
    let mut runs = Vec::new();
    let mut files = Vec::new();
    for &schedule in &spec.schedules {
        let run =
            run_schedule(spec, model, w, schedule)?.ok_or_else(|| infeasible(spec, model, w))?;
        let stem = format!("{label}_{}", schedule.name());
        files.push(write_file(
            &spec.out.join(format!("trace_{stem}.csv")),
            &run.trace.to_csv(),
        )?);
        files.push(write_file(
            &spec.out.join(format!("plan_{stem}.toml")),
            &run.plan.to_toml(),
        )?);
        runs.push(run);
    }
    let summaries: Vec<Summary> = runs.iter().map(|r| r.summary.clone()).collect();
    files.push(write_file(
        &spec.out.join(format!("summary_{label}.csv")),
        &summaries_to_csv(model, w, &summaries),
    )?);

    let find = |s: Schedule| summaries.iter().find(|x| x.schedule == s);
    let speedup = speedup(find(Schedule::BaselineSte), find(Schedule::SuperStv));
    let mut t = Table::new(&SUMMARY_HEADER);
    for s in &summaries {
        t.row(summary_cells(&label, s));
    }
    let mut table = format!(
        "{label} ({} params) bsz {} seq {} on {} x {}\n",
        model.param_count(),
        w.bsz,
        w.seq,
        spec.chips,
        spec.profile_source
    );
    table.push_str(&t.render());
    if let Some(x) = speedup {
        writeln!(table, "stv/ste throughput: {x:.3}x").unwrap();
    }
    Ok(SimulateResult {
        runs,
        speedup,
        files,
        table,
    })
}

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub model: String,
    pub params: u64,
    pub ste: Option<Summary>,
    pub stv: Option<Summary>,
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CompareResult {
    pub rows: Vec<CompareRow>,
    pub file: PathBuf,
    pub table: String,
}

fn opt_f64(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:?}"))
}

pub fn compare(spec: &ExperimentSpec) -> Result<CompareResult, CliError> {
    let w = spec.workload;
    let mut rows = Vec::new();
    for model in &spec.models {
        let get = |s| -> Result<Option<Summary>, CliError> {
            Ok(run_schedule(spec, model, w, s)?.map(|r| r.summary))
        };
        let ste = get(Schedule::BaselineSte)?;
        let stv = get(Schedule::SuperStv)?;
        rows.push(CompareRow {
            model: model.label(),
            params: model.param_count(),
            speedup: speedup(ste.as_ref(), stv.as_ref()),
            ste,
            stv,
        });
    }

    let mut csv = format!("# {COMPARE_SCHEMA}\n");
    csv.push_str("model,params,bsz,seq,chips,policy,ste_iteration_s,ste_flops_per_s,ste_gpu_idle,stv_iteration_s,stv_flops_per_s,stv_gpu_idle,stv_bucket_bytes,stv_gpu_buckets,speedup\n");
    let mut t = Table::new(&[
        "model",
        "params_b",
        "policy",
        "ste_tflops",
        "stv_tflops",
        "ste_idle",
        "stv_idle",
        "speedup",
    ]);
    for r in &rows {
        let policy = r
            .stv
            .as_ref()
            .or(r.ste.as_ref())
            .map_or("infeasible", |s| policy_name(s.policy));
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.params,
            w.bsz,
            w.seq,
            spec.chips,
            policy,
            opt_f64(r.ste.as_ref().map(|s| s.iteration_time)),
            opt_f64(r.ste.as_ref().map(|s| s.flops_per_s)),
            opt_f64(r.ste.as_ref().map(|s| s.gpu_idle)),
            opt_f64(r.stv.as_ref().map(|s| s.iteration_time)),
            opt_f64(r.stv.as_ref().map(|s| s.flops_per_s)),
            opt_f64(r.stv.as_ref().map(|s| s.gpu_idle)),
            r.stv
                .as_ref()
                .map_or(String::new(), |s| s.bucket_bytes.to_string()),
            r.stv
                .as_ref()
                .map_or(String::new(), |s| s.gpu_buckets.to_string()),
            opt_f64(r.speedup),
        )
        .unwrap();
        let fmt = |x: Option<f64>, scale: f64, prec: usize| {
            x.map_or("-".to_string(), |v| format!("{:.prec$}", v / scale))
        };
        t.row(vec![
            r.model.clone(),
            format!("{:.2}", r.params as f64 / 1e9),
            policy.to_string(),
            fmt(r.ste.as_ref().map(|s| s.flops_per_s), 1e12, 1),
            fmt(r.stv.as_ref().map(|s| s.flops_per_s), 1e12, 1),
            fmt(r.ste.as_ref().map(|s| s.gpu_idle), 1.0, 3),
            fmt(r.stv.as_ref().map(|s| s.gpu_idle), 1.0, 3),
            r.speedup.map_or("-".to_string(), |x| format!("{x:.3}x")),
        ]);
    }
    let file = write_file(&spec.out.join("compare.csv"), &csv)?;
    Ok(CompareResult {
        rows,
        file,
        table: t.render(),
    })
}

#[derive(Clone, Debug)]
pub struct AblateResult {
    pub rows: Vec<AblationRow>,
    /// Throughput gain of each row over the previous one (first entry 0).
    pub increments: Vec<f64>,
    /// Last row over first row.
    pub ratio: f64,
    pub file: PathBuf,
    pub table: String,
}

pub fn ablate(spec: &ExperimentSpec) -> Result<AblateResult, CliError> {
    let model = &spec.model;
    let w = spec.workload;
    let rows = ablation_run(model, w, &spec.profile, &spec.toggles)?;
    let increments: Vec<f64> = (0..rows.len())
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                rows[i].flops_per_s - rows[i - 1].flops_per_s
            }
        })
        .collect();
    let base = rows[0].flops_per_s;
    let ratio = rows.last().map_or(1.0, |r| r.flops_per_s / base);

    let mut csv = format!("# {ABLATION_SCHEMA}\n");
    csv.push_str("model,bsz,seq,step,added,enabled,schedule,bucket_bytes,gpu_buckets,iteration_s,flops_per_s,increment,ratio_to_base\n");
    let mut t = Table::new(&[
        "step",
        "added",
        "schedule",
        "bucket_mib",
        "gpu_buckets",
        "iter_s",
        "tflops",
        "gain_tflops",
        "x_base",
    ]);
    for (i, r) in rows.iter().enumerate() {
        let added = if i == 0 {
            "none"
        } else {
            r.enabled[i - 1].name()
        };
        let enabled: Vec<&str> = r.enabled.iter().map(|t| t.name()).collect();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{:?},{:?},{:?},{:?}",
            model.label(),
            w.bsz,
            w.seq,
            i,
            added,
            enabled.join("+"),
            r.schedule.name(),
            r.bucket_bytes,
            r.gpu_buckets,
            r.iteration_time,
            r.flops_per_s,
            increments[i],
            r.flops_per_s / base
        )
        .unwrap();
        t.row(vec![
            i.to_string(),
            added.to_string(),
            r.schedule.name().to_string(),
            (r.bucket_bytes / MIB).to_string(),
            r.gpu_buckets.to_string(),
            format!("{:.4}", r.iteration_time),
            format!("{:.1}", r.flops_per_s / 1e12),
            format!("{:.1}", increments[i] / 1e12),
            format!("{:.3}", r.flops_per_s / base),
        ]);
    }
    let file = write_file(
        &spec.out.join(format!("ablation_{}.csv", model.label())),
        &csv,
    )?;
    let mut table = format!(
        "{} bsz {} seq {} on {}\n",
        model.label(),
        w.bsz,
        w.seq,
        spec.profile_source
    );
    table.push_str(&t.render());
    writeln!(table, "all-on / all-off: {ratio:.3}x").unwrap();
    Ok(AblateResult {
        rows,
        increments,
        ratio,
        file,
        table,
    })
}

#[derive(Clone, Debug)]
pub struct ScanRow {
    pub seq: u64,
    pub stationary: bool,
    pub flow: bool,
    /// Policy the simulation ran with; `None` when nothing fits.
    pub policy: Option<WeightPolicy>,
    /// MFU per requested schedule, in spec order.
    pub mfu: Vec<(Schedule, Option<f64>)>,
}

#[derive(Clone, Debug)]
pub struct ScanResult {
    pub rows: Vec<ScanRow>,
    /// Longest feasible sequence in the list under each policy.
    pub stationary_frontier: Option<u64>,
    pub flow_frontier: Option<u64>,
    pub frontier_ratio: Option<f64>,
    pub file: PathBuf,
    pub table: String,
}

pub fn scan_seq(spec: &ExperimentSpec) -> Result<ScanResult, CliError> {
    let model = &spec.model;
    let mut rows = Vec::new();
    for &seq in &spec.seqs {
        let w = Workload::new(spec.workload.bsz, seq);
        let stationary = policy_fits(spec, model, w, WeightPolicy::Stationary);
        let flow = policy_fits(spec, model, w, WeightPolicy::Flow);
        let mut policy = None;
        let mut mfu = Vec::new();
        for &schedule in &spec.schedules {
            let run = if stationary || flow {
                run_schedule(spec, model, w, schedule)?
            } else {
                None
            };
            if let Some(r) = &run {
                policy = Some(r.summary.policy);
            }
            mfu.push((schedule, run.map(|r| r.summary.mfu)));
        }
        rows.push(ScanRow {
            seq,
            stationary,
            flow,
            policy,
            mfu,
        });
    }
    let frontier = |f: fn(&ScanRow) -> bool| rows.iter().filter(|r| f(r)).map(|r| r.seq).max();
    let stationary_frontier = frontier(|r| r.stationary);
    let flow_frontier = frontier(|r| r.flow);
    let frontier_ratio = match (stationary_frontier, flow_frontier) {
        (Some(s), Some(f)) => Some(f as f64 / s as f64),
        _ => None,
    };

    let mut csv = format!("# {SCAN_SCHEMA}\n");
    let mfu_cols: Vec<String> = spec
        .schedules
        .iter()
        .map(|s| format!("{}_mfu", s.name()))
        .collect();
    writeln!(
        csv,
        "model,bsz,chips,parallelism,seq,stationary_feasible,flow_feasible,policy,{},frontier",
        mfu_cols.join(",")
    )
    .unwrap();
    let mut header = vec!["seq", "stationary", "flow", "policy"];
    header.extend(mfu_cols.iter().map(String::as_str));
    header.push("frontier");
    let mut t = Table::new(&header);
    for r in &rows {
        let mut marks = Vec::new();
        if Some(r.seq) == stationary_frontier {
            marks.push("stationary");
        }
        if Some(r.seq) == flow_frontier {
            marks.push("flow");
        }
        let policy = r.policy.map_or("infeasible", policy_name);
        let mfus: Vec<String> = r.mfu.iter().map(|(_, m)| opt_f64(*m)).collect();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            model.label(),
            spec.workload.bsz,
            spec.chips,
            parallelism_name(spec.parallelism),
            r.seq,
            r.stationary,
            r.flow,
            policy,
            mfus.join(","),
            marks.join("+")
        )
        .unwrap();
        let mut cells = vec![
            r.seq.to_string(),
            yes_no(r.stationary),
            yes_no(r.flow),
            policy.to_string(),
        ];
        cells.extend(
            r.mfu
                .iter()
                .map(|(_, m)| m.map_or("-".to_string(), |v| format!("{v:.3}"))),
        );
        cells.push(marks.join("+"));
        t.row(cells);
    }
    let file = write_file(
        &spec.out.join(format!(
            "scan_{}_k{}_{}.csv",
            model.label(),
            spec.chips,
            parallelism_name(spec.parallelism)
        )),
        &csv,
    )?;
    let mut table = format!(
        "{} bsz {} on {} x {} ({})\n",
        model.label(),
        spec.workload.bsz,
        spec.chips,
        spec.profile_source,
        parallelism_name(spec.parallelism)
    );
    table.push_str(&t.render());
    match frontier_ratio {
        Some(x) => writeln!(table, "flow/stationary frontier: {x:.1}x").unwrap(),
        None => writeln!(table, "flow/stationary frontier: undefined").unwrap(),
    }
    Ok(ScanResult {
        rows,
        stationary_frontier,
        flow_frontier,
        frontier_ratio,
        file,
        table,
    })
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

#[derive(Clone, Debug)]
pub struct MaxModelRow {
    pub mode: PolicyMode,
    pub max_params: u64,
    /// Largest shipped preset at or below the limit.
    pub largest_preset: Option<String>,
}

#[derive(Clone, Debug)]
pub struct MaxModelResult {
    pub rows: Vec<MaxModelRow>,
    pub file: PathBuf,
    pub table: String,
}

impl MaxModelResult {
    pub fn params(&self, mode: PolicyMode) -> u64 {
        self.rows
            .iter()
            .find(|r| r.mode == mode)
            .map_or(0, |r| r.max_params)
    }
}

pub fn max_model(spec: &ExperimentSpec) -> Result<MaxModelResult, CliError> {
    let all = presets();
    let rows: Vec<MaxModelRow> = PolicyMode::ALL
        .into_iter()
        .map(|mode| {
            let max_params = max_trainable_params(&spec.profile, mode);
            let largest_preset = all
                .iter()
                .filter(|p| p.config().param_count() <= max_params)
                .max_by_key(|p| p.config().param_count())
                .map(|p| p.name.clone());
            MaxModelRow {
                mode,
                max_params,
                largest_preset,
            }
        })
        .collect();
    let mut csv = format!("# {MAX_MODEL_SCHEMA}\nprofile,mode,max_params,largest_preset\n");
    let mut t = Table::new(&["mode", "max_params_b", "largest_preset"]);
    for r in &rows {
        let preset = r.largest_preset.clone().unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{}",
            spec.profile_source,
            mode_name(r.mode),
            r.max_params,
            preset
        )
        .unwrap();
        t.row(vec![
            mode_name(r.mode).to_string(),
            format!("{:.1}", r.max_params as f64 / 1e9),
            if preset.is_empty() {
                "-".to_string()
            } else {
                preset
            },
        ]);
    }
    let file = write_file(&spec.out.join("max_model.csv"), &csv)?;
    let mut table = format!("largest trainable model on {}\n", spec.profile_source);
    table.push_str(&t.render());
    Ok(MaxModelResult { rows, file, table })
}

#[derive(Clone, Debug)]
pub struct VerifyResult {
    pub report: VerifyReport,
    pub file: PathBuf,
    pub table: String,
}

pub fn verify(spec: &ExperimentSpec) -> Result<VerifyResult, CliError> {
    let cfg = VerifyConfig {
        seeds: (spec.seed..spec.seed + spec.seeds).collect(),
        patterns: spec.patterns.clone(),
        schedulers: vec![Scheduler::Serialized, Scheduler::TwoTask],
        steps: spec.steps,
        mutation: spec.mutate.then_some(Mutation::StaleSecondMoment),
        ..VerifyConfig::default()
    };
    let report = run_verify(&cfg)?;
    let mut table = report.to_text();
    let file = write_file(&spec.out.join("verify.txt"), &table)?;
    table.push_str(if report.passed() { "PASS\n" } else { "FAIL\n" });
    Ok(VerifyResult {
        report,
        file,
        table,
    })
}
