//! Exact mixed-precision training core for small models.
//!
//! Master weights and Adam moments are `f32`, the working copy the model
//! reads is IEEE binary16. Two optimizer protocols share one kernel:
//!
//! * the synchronous oracle validates the gradients (non-finite check, global
//!   norm, clipping) and only then steps;
//! * the speculative protocol steps every bucket as soon as its gradient is
//!   available, snapshotting the bucket first, and repairs the state from the
//!   snapshots once the verdict arrives.
//!
//! The two must agree bit for bit on every iteration; [`verify`] checks this
//! over a seed and fault matrix.

pub mod adam;
pub mod checkpoint;
pub mod faults;
pub mod mlp;
pub mod protocol;
pub mod training;
pub mod validate;
pub mod verify;

use std::ops::Range;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use adam::{adam_scalar_reference, adam_step_bucket, adam_step_scalar, DEFAULT_TILE_ELEMS};
pub use faults::{Fault, FaultKind, FaultPattern, FaultPlan};
pub use mlp::{tiny_model_grads, Batch, DataStream, TinyModel};
pub use protocol::{stv_iteration, sync_iteration, IterationReport, Mutation, StepOptions};
pub use training::{run_training, Mode, Scheduler, TrainingConfig, TrainingRun};
pub use validate::{global_grad_norm, validate};
pub use verify::{run_verify, RunOutcome, VerifyConfig, VerifyReport};

/// Loss scale a fresh state starts from.
pub const INITIAL_LOSS_SCALE: f32 = 1024.0;
/// Consecutive applied iterations after which the loss scale doubles.
pub const LOSS_SCALE_GROWTH_INTERVAL: u32 = 2000;
pub const MIN_LOSS_SCALE: f32 = 1.0;
pub const MAX_LOSS_SCALE: f32 = 16_777_216.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay.
    pub weight_decay: f32,
    pub clip_norm: Option<f64>,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.eps.is_finite()
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && self.clip_norm.is_none_or(|c| c > 0.0 && c.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "invalid Adam hyperparameters {self:?}"
            )))
        }
    }
}

/// Outcome of validating one iteration's gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Proceed,
    /// Gradients are multiplied by the coefficient (`clip_norm / norm < 1`).
    Clip(f64),
    SkipNonFinite,
}

impl Verdict {
    /// Whether the speculative protocol must restore its snapshots.
    pub fn needs_rollback(self) -> bool {
        !matches!(self, Verdict::Proceed)
    }

    pub fn name(self) -> &'static str {
        match self {
            Verdict::Proceed => "proceed",
            Verdict::Clip(_) => "clip",
            Verdict::SkipNonFinite => "skip",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub master: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub working: Vec<f16>,
    /// Applied optimizer steps.
    pub t: u64,
    pub loss_scale: f32,
    /// Applied iterations since the last loss-scale change.
    pub clean_steps: u32,
}

impl TrainState {
    pub fn new(master: Vec<f32>) -> Self {
        let n = master.len();
        let working = master.iter().map(|&x| f16::from_f32(x)).collect();
        TrainState {
            master,
            m: vec![0.0; n],
            v: vec![0.0; n],
            working,
            t: 0,
            loss_scale: INITIAL_LOSS_SCALE,
            clean_steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.master.len()
    }

    pub fn is_empty(&self) -> bool {
        self.master.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.master.len();
        if self.m.len() != n || self.v.len() != n || self.working.len() != n {
            return Err(Error::domain("state vectors differ in length"));
        }
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return Err(Error::domain("loss scale must be positive and finite"));
        }
        Ok(())
    }

    /// Recomputes the half-precision working copy from the master weights.
    pub fn refresh_working(&mut self) {
        for (w, &x) in self.working.iter_mut().zip(&self.master) {
            *w = f16::from_f32(x);
        }
    }

    /// True when every working weight is its master weight rounded to half.
    pub fn mirror_holds(&self) -> bool {
        self.working
            .iter()
            .zip(&self.master)
            .all(|(w, &x)| w.to_bits() == f16::from_f32(x).to_bits())
    }

    pub fn working_f64(&self) -> Vec<f64> {
        self.working.iter().map(|w| w.to_f64()).collect()
    }

    pub fn snapshot(&self, bucket_id: u32, range: Range<usize>) -> BucketSnapshot {
        BucketSnapshot {
            bucket_id,
            master: self.master[range.clone()].to_vec(),
            m: self.m[range.clone()].to_vec(),
            v: self.v[range.clone()].to_vec(),
            t: self.t,
            range,
        }
    }

    pub fn restore(&mut self, snap: &BucketSnapshot) {
        let r = snap.range.clone();
        self.master[r.clone()].copy_from_slice(&snap.master);
        self.m[r.clone()].copy_from_slice(&snap.m);
        self.v[r].copy_from_slice(&snap.v);
        self.t = snap.t;
    }

    /// Loss-scale bookkeeping after a verdict: halve on a skipped iteration,
    /// double after [`LOSS_SCALE_GROWTH_INTERVAL`] applied ones in a row.
    pub fn update_loss_scale(&mut self, verdict: Verdict) {
        if verdict == Verdict::SkipNonFinite {
            self.loss_scale = (self.loss_scale * 0.5).max(MIN_LOSS_SCALE);
            self.clean_steps = 0;
        } else {
            self.clean_steps += 1;
            if self.clean_steps >= LOSS_SCALE_GROWTH_INTERVAL {
                self.loss_scale = (self.loss_scale * 2.0).min(MAX_LOSS_SCALE);
                self.clean_steps = 0;
            }
        }
    }

    /// FNV-1a over the step count, loss scale and the bit patterns of the
    /// master weights and both moments.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(&self.t.to_le_bytes());
        h.write(&self.loss_scale.to_bits().to_le_bytes());
        for vec in [&self.master, &self.m, &self.v] {
            for x in vec.iter() {
                h.write(&x.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Bitwise equality of the full-precision state and counters.
    pub fn bitwise_eq(&self, other: &TrainState) -> bool {
        let same = |a: &[f32], b: &[f32]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        self.t == other.t
            && self.loss_scale.to_bits() == other.loss_scale.to_bits()
            && self.clean_steps == other.clean_steps
            && same(&self.master, &other.master)
            && same(&self.m, &other.m)
            && same(&self.v, &other.v)
            && self
                .working
                .iter()
                .map(|w| w.to_bits())
                .eq(other.working.iter().map(|w| w.to_bits()))
    }
}

/// Saved copy of one bucket's full-precision state taken before a
/// speculative step (12 bytes per parameter).
#[derive(Clone, Debug, PartialEq)]
pub struct BucketSnapshot {
    pub bucket_id: u32,
    pub range: Range<usize>,
    pub master: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
