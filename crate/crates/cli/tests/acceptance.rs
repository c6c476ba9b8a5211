//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use offload_cli::args::{CommonArgs, ExperimentSpec};
use offload_cli::commands;
use offload_core::hwmodel::{HardwareProfile, BUILTIN_PROFILES};
use offload_core::memplan::{
    activation_bytes, fits_mode, max_batch_size, model_state_bytes, presets, ModelConfig,
    PolicyMode, WeightPolicy, Workload,
};
use offload_core::numcore::{
    adam_step_bucket, adam_step_scalar, run_training, run_verify, tiny_model_grads, AdamHyper,
    DataStream, FaultKind, FaultPattern, Mode, Scheduler, TinyModel, TrainState, TrainingConfig,
    VerifyConfig, DEFAULT_TILE_ELEMS,
};
use offload_core::par::Exec;
use offload_core::partition::{
    min_gpu_buckets, BucketCosts, CostKnobs, PartitionPlan, DEFAULT_BK_CANDIDATES,
};
use offload_core::simsched::{
    closed_form_applies, simulate, single_chip_costs, validate_seconds, Schedule, ScheduleKind,
    ENABLE_ORDER,
};

type Check = Result<String, String>;

fn spec(command: &str, args: CommonArgs) -> ExperimentSpec {
    let out = std::env::temp_dir().join(format!(
        "offload-acceptance-{}-{command}",
        std::process::id()
    ));
    ExperimentSpec::resolve(
        command,
        &CommonArgs {
            out: Some(out),
            ..args
        },
        None,
    )
    .expect("valid spec")
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn stv_equivalence() -> Check {
    let cfg = VerifyConfig::default();
    let params = cfg.base.model.param_count();
    let start = Instant::now();
    let report = run_verify(&cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = report
        .failures()
        .map(|r| {
            format!(
                "seed {} {} {} at {:?}",
                r.seed,
                r.pattern.name(),
                r.scheduler.name(),
                r.first_mismatch
            )
        })
        .collect();
    ensure(
        failed.is_empty()
            && report.runs.len() == 60
            && params <= 100_000
            && cfg.steps == 200
            && secs < 120.0,
        format!(
            "{} runs, {} params, {:.1} s, failures {:?}",
            report.runs.len(),
            params,
            secs,
            failed
        ),
    )
}

fn rollback_coverage() -> Check {
    let cfg = TrainingConfig::default();
    let faults = FaultPattern::Mixed.plan(cfg.steps, 7);
    let oracle = run_training(Mode::SyncOracle, &cfg, Scheduler::Serialized, &faults)
        .map_err(|e| e.to_string())?;
    let mut details = Vec::new();
    let mut ok = true;
    for scheduler in [Scheduler::Serialized, Scheduler::TwoTask] {
        let stv = run_training(Mode::Stv, &cfg, scheduler, &faults).map_err(|e| e.to_string())?;
        let counts = (stv.count("proceed"), stv.count("clip"), stv.count("skip"));
        let oracle_log: Vec<u64> = oracle.verdict_log().iter().map(|(i, _)| *i).collect();
        let mut engineered: Vec<u64> = faults
            .iterations(FaultKind::Scale)
            .into_iter()
            .chain(faults.iterations(FaultKind::Nan))
            .chain(faults.iterations(FaultKind::Inf))
            .collect();
        engineered.sort_unstable();
        ok &= counts.0 >= 5 && counts.1 >= 5 && counts.2 >= 5;
        ok &= stv.rollback_log() == oracle_log && stv.rollback_log() == engineered;
        ok &= oracle.first_divergence(&stv).is_none();
        details.push(format!(
            "{}: proceed {} clip {} skip {}, log {:?}",
            scheduler.name(),
            counts.0,
            counts.1,
            counts.2,
            stv.rollback_log()
        ));
    }
    ensure(ok, details.join("; "))
}

fn brute_force_min(c: &BucketCosts, count: usize) -> (usize, bool) {
    let need = c.move_grad + c.step_cpu + c.move_param;
    let per = c.bwd_per_bucket + c.step_gpu_per_bucket;
    let mut best = None;
    for n in (0..=count).rev() {
        if need <= n as f64 * per {
            best = Some(n);
        }
    }
    match best {
        Some(n) => (n, false),
        None => (count, true),
    }
}

fn bucket_minimality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut fallbacks = 0;
    for _ in 0..1000 {
        let c = BucketCosts {
            move_grad: rng.random_range(0.0..0.05),
            step_cpu: rng.random_range(0.0..0.05),
            move_param: rng.random_range(0.0..0.05),
            bwd_per_bucket: rng.random_range(0.0..0.01),
            step_gpu_per_bucket: rng.random_range(0.0..0.001),
            fwd_per_bucket: rng.random_range(0.0..0.005),
        };
        let count = rng.random_range(1..=64usize);
        let expected = brute_force_min(&c, count);
        fallbacks += expected.1 as usize;
        if min_gpu_buckets(&c, count) != expected {
            mismatches += 1;
        }
    }
    ensure(
        mismatches == 0,
        format!("1000 cases, {mismatches} mismatches, {fallbacks} fallbacks"),
    )
}

/// Iteration time from the two closed forms, written out independently.
fn closed_form(schedule: Schedule, c: &[BucketCosts], n: usize) -> f64 {
    let sum =
        |r: std::ops::Range<usize>, f: fn(&BucketCosts) -> f64| c[r].iter().map(f).sum::<f64>();
    let k = c.len();
    let fwd = sum(0..k, |x| x.fwd_per_bucket);
    let bwd = sum(0..k, |x| x.bwd_per_bucket);
    let resident_bwd = sum(0..n, |x| x.bwd_per_bucket);
    let resident_step = sum(0..n, |x| x.step_gpu_per_bucket);
    if n == k {
        return fwd + bwd + resident_step;
    }
    let tail = c[n];
    match schedule {
        Schedule::BaselineSte => {
            let cpu = sum(n..k, |x| x.step_cpu);
            let gpu_path = bwd + resident_step;
            let offload_path = bwd - resident_bwd + tail.move_grad + cpu + tail.move_param;
            fwd + gpu_path.max(offload_path)
        }
        Schedule::SuperStv => {
            let resident_fwd = sum(0..n, |x| x.fwd_per_bucket);
            let exposed = tail.move_grad + tail.step_cpu + tail.move_param
                - resident_bwd
                - resident_step
                - resident_fwd;
            fwd + bwd + resident_step + exposed.max(0.0)
        }
    }
}

fn random_profile(rng: &mut ChaCha8Rng) -> HardwareProfile {
    let mut p =
        HardwareProfile::builtin(BUILTIN_PROFILES[rng.random_range(0..BUILTIN_PROFILES.len())])
            .unwrap();
    let gpu = rng.random_range(0.5..2.0);
    let cpu = rng.random_range(0.5..2.0);
    let link = rng.random_range(0.5..2.0);
    p.gpu_peak_flops *= gpu;
    p.cpu_peak_flops *= cpu;
    p.link_peak_bw *= link;
    for knot in &mut p.link_bw_curve {
        knot.1 *= link;
    }
    p
}

fn closed_forms() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut checked, mut attempts, mut worst) = (0, 0, 0.0f64);
    let mut failures = Vec::new();
    while checked < 50 && attempts < 20_000 {
        attempts += 1;
        let profile = random_profile(&mut rng);
        if profile.validate().is_err() {
            continue;
        }
        let model = ModelConfig::new(rng.random_range(2..40), 256 * rng.random_range(2..24));
        let w = Workload::new(rng.random_range(1..16), 512 * rng.random_range(1..5));
        let bk = DEFAULT_BK_CANDIDATES[rng.random_range(0..DEFAULT_BK_CANDIDATES.len())];
        let schedule = if rng.random_bool(0.5) {
            Schedule::SuperStv
        } else {
            Schedule::BaselineSte
        };
        let base = PartitionPlan::for_model(&model, bk).unwrap();
        let n = rng.random_range(0..=base.bucket_count());
        let costs = single_chip_costs(&base, &model, w, &profile, &CostKnobs::default()).unwrap();
        if !closed_form_applies(schedule, &costs, n, validate_seconds(&model, &profile)) {
            continue;
        }
        let kind = ScheduleKind::new(
            schedule,
            WeightPolicy::Stationary,
            base.with_gpu_resident(n).unwrap(),
        );
        let Ok(trace) = simulate(&kind, &model, w, &profile) else {
            continue;
        };
        let err = rel_err(
            trace.mean_iteration_time(),
            closed_form(schedule, &costs, n),
        );
        worst = worst.max(err);
        if err > 1e-9 {
            failures.push(format!(
                "{} {}x{} n {n}",
                schedule.name(),
                model.layers,
                model.hidden
            ));
        }
        checked += 1;
    }
    ensure(
        checked == 50 && failures.is_empty(),
        format!(
            "{checked} plans ({attempts} drawn), worst rel err {worst:.2e}, failures {failures:?}"
        ),
    )
}

/// Largest preset whose states fit with the optimizer offloaded, at the
/// largest batch its stationary placement allows.
fn idle_setting() -> (ModelConfig, Workload) {
    let profile = HardwareProfile::gh200();
    let model = presets()
        .into_iter()
        .map(|p| p.config())
        .filter(|m| fits_mode(m.params(), &profile, PolicyMode::OptimOffload))
        .max_by_key(|m| m.param_count())
        .unwrap();
    let bsz = max_batch_size(&model, 1024.0, &profile);
    (model, Workload::new(bsz, 1024))
}

fn idle_fractions() -> Check {
    let (model, w) = idle_setting();
    let s = spec(
        "simulate",
        CommonArgs {
            model: Some(model.label()),
            bsz: Some(w.bsz),
            seq: Some(w.seq),
            ..CommonArgs::default()
        },
    );
    let r = commands::simulate(&s).map_err(|e| e.to_string())?;
    let ste = r.run(Schedule::BaselineSte).unwrap().summary.gpu_idle;
    let stv = r.run(Schedule::SuperStv).unwrap().summary.gpu_idle;
    ensure(
        (0.30..=0.60).contains(&ste) && stv < 0.05,
        format!(
            "{} bsz {}: ste idle {ste:.3}, stv idle {stv:.3}",
            model.label(),
            w.bsz
        ),
    )
}

fn throughput_ordering() -> Check {
    let mut details = Vec::new();
    let mut ok = true;
    for name in ["5b", "13b"] {
        let s = spec(
            "simulate",
            CommonArgs {
                model: Some(name.into()),
                bsz: Some(8),
                ..CommonArgs::default()
            },
        );
        let r = commands::simulate(&s).map_err(|e| e.to_string())?;
        let x = r.speedup.unwrap();
        ok &= x >= 1.5;
        details.push(format!("{name} {x:.3}x"));
    }
    ensure(ok, details.join(", "))
}

fn ablation_ladder() -> Check {
    let r = commands::ablate(&spec("ablate", CommonArgs::default())).map_err(|e| e.to_string())?;
    let order: Vec<_> = r.rows.last().unwrap().enabled.clone();
    let monotone = r
        .rows
        .windows(2)
        .all(|p| p[1].flops_per_s >= p[0].flops_per_s);
    let stv_step = 1 + ENABLE_ORDER.iter().position(|t| t.name() == "stv").unwrap();
    let largest = (1..r.increments.len())
        .max_by(|&a, &b| r.increments[a].total_cmp(&r.increments[b]))
        .unwrap();
    let tflops: Vec<String> = r
        .rows
        .iter()
        .map(|x| format!("{:.1}", x.flops_per_s / 1e12))
        .collect();
    ensure(
        order == ENABLE_ORDER && monotone && r.ratio >= 1.8 && largest == stv_step,
        format!(
            "TFLOP/s {} ratio {:.3}, largest gain at step {largest}",
            tflops.join(" -> "),
            r.ratio
        ),
    )
}

fn frontiers() -> Check {
    let r = commands::max_model(&spec("max-model", CommonArgs::default()))
        .map_err(|e| e.to_string())?;
    let within = |mode, target: f64, tol: f64| {
        let got = r.params(mode) as f64;
        ((got - target).abs() <= tol * target, got)
    };
    let (a, ga) = within(PolicyMode::GpuOnly, 3.5e9, 0.30);
    let (b, gb) = within(PolicyMode::OptimOffload, 15e9, 0.20);
    let (c, gc) = within(PolicyMode::Adaptive, 25e9, 0.20);
    ensure(
        a && b && c,
        format!(
            "gpu_only {:.1}B, optim_offload {:.1}B, adaptive {:.1}B",
            ga / 1e9,
            gb / 1e9,
            gc / 1e9
        ),
    )
}

fn memory_anchors() -> Check {
    let states = model_state_bytes(7e9);
    let model = ModelConfig::preset("7b").unwrap();
    let act = activation_bytes(&model, 1.0, 1e6, false);
    ensure(
        states == 112e9 && (1e12..=4e12).contains(&act),
        format!("16 bytes x 7e9 = {states:e}, 7b activations at 1M tokens {act:.3e}"),
    )
}

fn sequence_frontier() -> Check {
    let s = spec(
        "scan-seq",
        CommonArgs {
            model: Some("13b".into()),
            chips: Some(8),
            parallelism: Some("ulysses".into()),
            ..CommonArgs::default()
        },
    );
    let r = commands::scan_seq(&s).map_err(|e| e.to_string())?;
    let million = r.rows.iter().find(|row| row.seq == 1_048_576);
    let flow_ok = million.is_some_and(|row| row.flow && row.policy == Some(WeightPolicy::Flow));
    let ratio = r.frontier_ratio.unwrap_or(0.0);
    ensure(
        flow_ok && ratio >= 4.0,
        format!(
            "stationary frontier {:?}, flow frontier {:?}, ratio {ratio:.1}",
            r.stationary_frontier, r.flow_frontier
        ),
    )
}

fn adam_kernel() -> Check {
    let hyper = AdamHyper {
        weight_decay: 0.01,
        ..AdamHyper::default()
    };
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s0 = TrainState::new((0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect());
    s0.m.iter_mut()
        .for_each(|x| *x = rng.random_range(-0.1f32..0.1));
    s0.v.iter_mut()
        .for_each(|x| *x = rng.random_range(0.0f32..0.01));
    s0.t = 41;
    let g: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let mut oracle = s0.clone();
    {
        let TrainState { master, m, v, .. } = &mut oracle;
        adam_step_scalar(master, m, v, &g, &hyper, s0.t + 1);
    }
    let mut equal = true;
    for tile in [1, 13, 1024, DEFAULT_TILE_ELEMS, 65_536, n] {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let mut s = s0.clone();
            adam_step_bucket(&mut s, &g, 0..n, &hyper, tile, exec).map_err(|e| e.to_string())?;
            equal &= s.bitwise_eq(&oracle);
        }
    }

    let big = 10_000_000;
    let g: Vec<f32> = (0..big)
        .map(|i| ((i % 2001) as f32 - 1000.0) * 1e-3)
        .collect();
    let mut a = TrainState::new(vec![0.5; big]);
    let mut b = a.clone();
    let (mut scalar, mut tiled) = (f64::INFINITY, f64::INFINITY);
    for step in 1..=9 {
        let t = Instant::now();
        {
            let TrainState { master, m, v, .. } = &mut a;
            adam_step_scalar(master, m, v, &g, &hyper, step);
        }
        scalar = scalar.min(t.elapsed().as_secs_f64());
        let t = Instant::now();
        adam_step_bucket(
            &mut b,
            &g,
            0..big,
            &hyper,
            DEFAULT_TILE_ELEMS,
            Exec::default(),
        )
        .map_err(|e| e.to_string())?;
        b.t += 1;
        tiled = tiled.min(t.elapsed().as_secs_f64());
    }
    let ratio = tiled / scalar;
    // 5% allowance for timer noise
    ensure(
        equal && a.master == b.master && ratio <= 1.05,
        format!("bitwise equal across 6 tile sizes x 2 executors: {equal}; 1e7 tiled/scalar {ratio:.3} ({tiled:.3} s / {scalar:.3} s)"),
    )
}

fn gradient_check() -> Check {
    let model = TinyModel::default();
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let params: Vec<f64> = model.init_params(seed).iter().map(|&x| x as f64).collect();
        let batch = DataStream::new(&model, 16, seed + 1000).next_batch();
        let (grads, _) = tiny_model_grads(&model, &params, &batch).map_err(|e| e.to_string())?;
        let loss = |p: &[f64]| tiny_model_grads(&model, p, &batch).unwrap().1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
        for _ in 0..20 {
            let i = rng.random_range(0..params.len());
            let h = 1e-5 * params[i].abs().max(1.0);
            let mut up = params.clone();
            let mut down = params.clone();
            up[i] += h;
            down[i] -= h;
            let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
            let scale = numeric.abs().max(grads[i].abs());
            // both vanish: nothing to compare beyond round-off
            let err = if scale < 1e-10 {
                0.0
            } else {
                (numeric - grads[i]).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    ensure(
        worst <= 1e-4,
        format!("5 seeds x 20 coordinates, worst rel err {worst:.2e}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 12] = [
        ("stv equivalence matrix", stv_equivalence),
        ("rollback verdict coverage", rollback_coverage),
        ("min gpu buckets vs brute force", bucket_minimality),
        ("schedule closed forms", closed_forms),
        ("gpu idle fractions", idle_fractions),
        ("throughput ordering", throughput_ordering),
        ("ablation ladder", ablation_ladder),
        ("model-scale frontiers", frontiers),
        ("memory anchors", memory_anchors),
        ("sequence-scan frontier", sequence_frontier),
        ("adam kernel", adam_kernel),
        ("gradient check", gradient_check),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
