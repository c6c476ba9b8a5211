//! Training loops driving the tiny model under either protocol.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::faults::FaultPlan;
use super::mlp::{tiny_model_grads, DataStream, TinyModel};
use super::protocol::{
    bucket_ranges, stv_iteration, stv_iteration_with, sync_iteration, IterationReport, StepOptions,
};
use super::validate::validate;
use super::{AdamHyper, TrainState, Verdict};
use crate::partition::PartitionPlan;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    SyncOracle,
    Stv,
}

/// How the speculative protocol's validation is executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheduler {
    /// Validation runs inline once every bucket is stepped.
    Serialized,
    /// Validation runs on its own thread while the trainer steps buckets and
    /// prepares the next batch; the verdict comes back over a channel.
    TwoTask,
}

impl Scheduler {
    pub fn name(self) -> &'static str {
        match self {
            Scheduler::Serialized => "serialized",
            Scheduler::TwoTask => "two-task",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub model: TinyModel,
    pub seed: u64,
    pub steps: u64,
    pub batch_rows: usize,
    pub hyper: AdamHyper,
    pub bucket_elems: usize,
    pub step: StepOptions,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            model: TinyModel::default(),
            seed: 0,
            steps: 200,
            batch_rows: 32,
            hyper: AdamHyper {
                lr: 1e-2,
                clip_norm: Some(5.0),
                ..AdamHyper::default()
            },
            bucket_elems: 512,
            step: StepOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub verdict: Verdict,
    pub rollbacks: u32,
    pub t: u64,
    pub loss_scale: f32,
    /// Loss at the working weights the gradients were taken at.
    pub loss: f64,
    /// [`TrainState::digest`] after the iteration.
    pub digest: u64,
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub records: Vec<IterationRecord>,
    pub state: TrainState,
}

impl TrainingRun {
    /// Iterations where the speculative protocol restored its snapshots.
    pub fn rollback_log(&self) -> Vec<u64> {
        self.records
            .iter()
            .filter(|r| r.rollbacks > 0)
            .map(|r| r.iteration)
            .collect()
    }

    /// Iterations whose verdict was not `Proceed`, with the verdict.
    pub fn verdict_log(&self) -> Vec<(u64, Verdict)> {
        self.records
            .iter()
            .filter(|r| r.verdict.needs_rollback())
            .map(|r| (r.iteration, r.verdict))
            .collect()
    }

    pub fn count(&self, name: &str) -> usize {
        self.records
            .iter()
            .filter(|r| r.verdict.name() == name)
            .count()
    }

    /// First iteration whose verdict, counters or state digest differ, or
    /// the run length if only the final states differ.
    pub fn first_divergence(&self, other: &TrainingRun) -> Option<u64> {
        for (a, b) in self.records.iter().zip(&other.records) {
            if a.verdict != b.verdict
                || a.t != b.t
                || a.loss_scale.to_bits() != b.loss_scale.to_bits()
                || a.digest != b.digest
            {
                return Some(a.iteration);
            }
        }
        if self.records.len() != other.records.len() || !self.state.bitwise_eq(&other.state) {
            return Some(self.records.len().min(other.records.len()) as u64);
        }
        None
    }
}

/// Loss-scaled `f32` gradients at the state's working weights, with faults.
fn gradients(
    model: &TinyModel,
    state: &TrainState,
    batch: &super::Batch,
    faults: &FaultPlan,
    iteration: u64,
) -> Result<(Vec<f32>, f64)> {
    let (g, loss) = tiny_model_grads(model, &state.working_f64(), batch)?;
    let scale = state.loss_scale as f64;
    let mut g: Vec<f32> = g.iter().map(|&x| (x * scale) as f32).collect();
    faults.apply(iteration, &mut g);
    Ok((g, loss))
}

struct Job {
    grads: Arc<[f32]>,
    loss_scale: f32,
}

fn validator(
    jobs: Receiver<Job>,
    verdicts: SyncSender<Verdict>,
    ranges: Vec<std::ops::Range<usize>>,
    hyper: AdamHyper,
) {
    for job in jobs {
        let buckets: Vec<&[f32]> = ranges.iter().map(|r| &job.grads[r.clone()]).collect();
        if verdicts
            .send(validate(&buckets, &hyper, job.loss_scale))
            .is_err()
        {
            break;
        }
    }
}

/// Trains `cfg.model` for `cfg.steps` iterations. Both modes draw the same
/// batches and inject the same faults, so their records must match exactly.
/// The scheduler only affects the speculative mode.
pub fn run_training(
    mode: Mode,
    cfg: &TrainingConfig,
    scheduler: Scheduler,
    faults: &FaultPlan,
) -> Result<TrainingRun> {
    if cfg.steps == 0 {
        return Err(Error::domain("training needs at least one step"));
    }
    cfg.hyper.validate()?;
    let mut state = TrainState::new(cfg.model.init_params(cfg.seed));
    let plan = PartitionPlan::for_elements(state.len(), cfg.bucket_elems)?;
    let ranges = bucket_ranges(&plan, state.len())?;
    let mut stream = DataStream::new(&cfg.model, cfg.batch_rows, cfg.seed);
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let mut record = |state: &TrainState, i: u64, rep: IterationReport, loss: f64| {
        records.push(IterationRecord {
            iteration: i,
            verdict: rep.verdict,
            rollbacks: rep.rollbacks,
            t: rep.t,
            loss_scale: rep.loss_scale,
            loss,
            digest: state.digest(),
        });
    };

    match (mode, scheduler) {
        (Mode::SyncOracle, _) | (Mode::Stv, Scheduler::Serialized) => {
            for i in 0..cfg.steps {
                let batch = stream.next_batch();
                let (g, loss) = gradients(&cfg.model, &state, &batch, faults, i)?;
                let rep = match mode {
                    Mode::SyncOracle => {
                        sync_iteration(&mut state, &g, &plan, &cfg.hyper, &cfg.step)?
                    }
                    Mode::Stv => stv_iteration(&mut state, &g, &plan, &cfg.hyper, &cfg.step)?,
                };
                record(&state, i, rep, loss);
            }
        }
        (Mode::Stv, Scheduler::TwoTask) => {
            let (job_tx, job_rx) = sync_channel::<Job>(1);
            let (verdict_tx, verdict_rx) = sync_channel::<Verdict>(1);
            let hyper = cfg.hyper;
            std::thread::scope(|scope| -> Result<()> {
                scope.spawn(move || validator(job_rx, verdict_tx, ranges, hyper));
                let mut batch = stream.next_batch();
                for i in 0..cfg.steps {
                    let (g, loss) = gradients(&cfg.model, &state, &batch, faults, i)?;
                    let g: Arc<[f32]> = g.into();
                    job_tx
                        .send(Job {
                            grads: Arc::clone(&g),
                            loss_scale: state.loss_scale,
                        })
                        .map_err(|_| Error::domain("validator stopped"))?;
                    let mut next = None;
                    let rep =
                        stv_iteration_with(&mut state, &g, &plan, &cfg.hyper, &cfg.step, || {
                            next = Some(stream.next_batch());
                            verdict_rx.recv().expect("validator answers every job")
                        })?;
                    batch = next.expect("verdict closure ran");
                    record(&state, i, rep, loss);
                }
                drop(job_tx);
                Ok(())
            })?;
        }
    }
    Ok(TrainingRun { records, state })
}
