//! Seed × fault-pattern × scheduler matrix comparing the speculative
//! protocol against the synchronous oracle.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::faults::FaultPattern;
use super::protocol::Mutation;
use super::training::{run_training, Mode, Scheduler, TrainingConfig, TrainingRun};
use crate::par::Exec;
use crate::Result;

/// Bucket sizes cycled through by seed, including one that does not divide
/// the model and one larger than it.
pub const BUCKET_ELEMS_BY_SEED: [usize; 5] = [97, 256, 512, 1000, 8192];

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub seeds: Vec<u64>,
    pub patterns: Vec<FaultPattern>,
    pub schedulers: Vec<Scheduler>,
    pub steps: u64,
    /// Model, hyperparameters and kernel options shared by every run; the
    /// seed, step count and bucket size are set per run.
    pub base: TrainingConfig,
    pub mutation: Option<Mutation>,
    /// How independent runs are spread across threads.
    pub exec: Exec,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let mut base = TrainingConfig::default();
        base.step.exec = Exec::Sequential;
        VerifyConfig {
            seeds: (0..10).collect(),
            patterns: FaultPattern::DEFAULT_MATRIX.to_vec(),
            schedulers: vec![Scheduler::Serialized, Scheduler::TwoTask],
            steps: 200,
            base,
            mutation: None,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub pattern: FaultPattern,
    pub scheduler: Scheduler,
    pub bucket_elems: usize,
    pub steps: u64,
    pub passed: bool,
    /// First iteration where the speculative run left the oracle.
    pub first_mismatch: Option<u64>,
    pub rollbacks: usize,
    pub clips: usize,
    pub skips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub runs: Vec<RunOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunOutcome> {
        self.runs.iter().filter(|r| !r.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:>5} {:>10} {:>11} {:>7} {:>6} {:>9} {:>5} {:>5}  result",
            "seed", "pattern", "scheduler", "bucket", "steps", "rollbacks", "clips", "skips"
        )
        .unwrap();
        for r in &self.runs {
            let result = match (r.passed, r.first_mismatch) {
                (true, _) => "ok".to_string(),
                (false, Some(i)) => format!("MISMATCH at iteration {i}"),
                (false, None) => "MISMATCH in rollback log".to_string(),
            };
            writeln!(
                out,
                "{:>5} {:>10} {:>11} {:>7} {:>6} {:>9} {:>5} {:>5}  {}",
                r.seed,
                r.pattern.name(),
                r.scheduler.name(),
                r.bucket_elems,
                r.steps,
                r.rollbacks,
                r.clips,
                r.skips,
                result
            )
            .unwrap();
        }
        let failed = self.failures().count();
        writeln!(out, "{} runs, {} failed", self.runs.len(), failed).unwrap();
        out
    }
}

fn compare(oracle: &TrainingRun, stv: &TrainingRun) -> (bool, Option<u64>) {
    let diverged = oracle.first_divergence(stv);
    let oracle_log: Vec<u64> = oracle.verdict_log().iter().map(|(i, _)| *i).collect();
    let logs_match = stv.rollback_log() == oracle_log;
    (diverged.is_none() && logs_match, diverged)
}

/// Runs the whole matrix. A zero step count passes vacuously.
pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let cells: Vec<(u64, FaultPattern)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.patterns.iter().map(move |&p| (s, p)))
        .collect();
    let per_cell = cfg
        .exec
        .map(&cells, |&(seed, pattern)| -> Result<Vec<RunOutcome>> {
            let bucket_elems =
                BUCKET_ELEMS_BY_SEED[(seed % BUCKET_ELEMS_BY_SEED.len() as u64) as usize];
            let outcome = |scheduler, passed, first_mismatch, rollbacks, clips, skips| RunOutcome {
                seed,
                pattern,
                scheduler,
                bucket_elems,
                steps: cfg.steps,
                passed,
                first_mismatch,
                rollbacks,
                clips,
                skips,
            };
            if cfg.steps == 0 {
                return Ok(cfg
                    .schedulers
                    .iter()
                    .map(|&s| outcome(s, true, None, 0, 0, 0))
                    .collect());
            }
            let mut train = cfg.base.clone();
            train.seed = seed;
            train.steps = cfg.steps;
            train.bucket_elems = bucket_elems;
            train.step.mutation = None;
            let faults = pattern.plan(cfg.steps, seed);
            let oracle = run_training(Mode::SyncOracle, &train, Scheduler::Serialized, &faults)?;
            train.step.mutation = cfg.mutation;
            cfg.schedulers
                .iter()
                .map(|&scheduler| {
                    let stv = run_training(Mode::Stv, &train, scheduler, &faults)?;
                    let (passed, first) = compare(&oracle, &stv);
                    Ok(outcome(
                        scheduler,
                        passed,
                        first,
                        stv.rollback_log().len(),
                        stv.count("clip"),
                        stv.count("skip"),
                    ))
                })
                .collect()
        });
    let mut runs = Vec::new();
    for cell in per_cell {
        runs.extend(cell?);
    }
    Ok(VerifyReport { runs })
}
