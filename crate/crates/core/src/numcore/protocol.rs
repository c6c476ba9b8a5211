//! One optimizer iteration under the synchronous and speculative protocols.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::adam::{adam_step_bucket, DEFAULT_TILE_ELEMS};
use super::validate::{unscale, validate_with};
use super::{AdamHyper, BucketSnapshot, TrainState, Verdict};
use crate::par::Exec;
use crate::partition::PartitionPlan;
use crate::{Error, Result};

/// Deliberate defects for checking that the equivalence suite notices them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mutation {
    /// Rollback restores weights and first moments but keeps the
    /// speculatively updated second moments.
    StaleSecondMoment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOptions {
    pub tile_elems: usize,
    pub exec: Exec,
    pub mutation: Option<Mutation>,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            tile_elems: DEFAULT_TILE_ELEMS,
            exec: Exec::default(),
            mutation: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub verdict: Verdict,
    /// Snapshot restores performed (0 or 1).
    pub rollbacks: u32,
    /// Step counter after the iteration.
    pub t: u64,
    /// Loss scale the gradients were produced with.
    pub loss_scale: f32,
}

/// Element ranges of every bucket; errors unless they tile `0..len` exactly.
pub fn bucket_ranges(plan: &PartitionPlan, len: usize) -> Result<Vec<Range<usize>>> {
    let ranges: Vec<Range<usize>> = plan
        .buckets
        .iter()
        .map(|b| b.param_range.start as usize..b.param_range.end as usize)
        .collect();
    let mut next = 0;
    for r in &ranges {
        if r.start != next || r.end < r.start {
            return Err(Error::domain("plan buckets overlap or leave gaps"));
        }
        next = r.end;
    }
    if next != len {
        return Err(Error::domain(format!(
            "plan covers {next} elements but the state has {len}"
        )));
    }
    Ok(ranges)
}

fn prepared(grads: &[f32], loss_scale: f32, clip: Option<f64>) -> Vec<f32> {
    match clip {
        None => grads.iter().map(|&g| unscale(g, loss_scale)).collect(),
        Some(c) => {
            let c = c as f32;
            grads.iter().map(|&g| unscale(g, loss_scale) * c).collect()
        }
    }
}

fn split<'a>(grads: &'a [f32], ranges: &[Range<usize>]) -> Vec<&'a [f32]> {
    ranges.iter().map(|r| &grads[r.clone()]).collect()
}

fn step_all(
    state: &mut TrainState,
    grads: &[f32],
    ranges: &[Range<usize>],
    hyper: &AdamHyper,
    opts: &StepOptions,
) -> Result<()> {
    for r in ranges.iter().rev() {
        adam_step_bucket(
            state,
            &grads[r.clone()],
            r.clone(),
            hyper,
            opts.tile_elems,
            opts.exec,
        )?;
    }
    Ok(())
}

fn commit(state: &mut TrainState, verdict: Verdict) {
    if verdict != Verdict::SkipNonFinite {
        state.t += 1;
        state.refresh_working();
    }
    state.update_loss_scale(verdict);
}

fn check_inputs(state: &TrainState, grads: &[f32], hyper: &AdamHyper) -> Result<()> {
    state.check()?;
    hyper.validate()?;
    if grads.len() != state.len() {
        return Err(Error::domain(format!(
            "{} gradients for a state of {} elements",
            grads.len(),
            state.len()
        )));
    }
    Ok(())
}

/// Reference protocol: validate the loss-scaled gradients, then step (with
/// clipped gradients if needed) or skip.
pub fn sync_iteration(
    state: &mut TrainState,
    grads: &[f32],
    plan: &PartitionPlan,
    hyper: &AdamHyper,
    opts: &StepOptions,
) -> Result<IterationReport> {
    check_inputs(state, grads, hyper)?;
    let ranges = bucket_ranges(plan, state.len())?;
    let loss_scale = state.loss_scale;
    let verdict = validate_with(&split(grads, &ranges), hyper, loss_scale, opts.exec);
    match verdict {
        Verdict::Proceed => step_all(
            state,
            &prepared(grads, loss_scale, None),
            &ranges,
            hyper,
            opts,
        )?,
        Verdict::Clip(c) => step_all(
            state,
            &prepared(grads, loss_scale, Some(c)),
            &ranges,
            hyper,
            opts,
        )?,
        Verdict::SkipNonFinite => {}
    }
    commit(state, verdict);
    Ok(IterationReport {
        verdict,
        rollbacks: 0,
        t: state.t,
        loss_scale,
    })
}

/// Speculative protocol with validation run inline after the steps.
pub fn stv_iteration(
    state: &mut TrainState,
    grads: &[f32],
    plan: &PartitionPlan,
    hyper: &AdamHyper,
    opts: &StepOptions,
) -> Result<IterationReport> {
    let ranges = bucket_ranges(plan, state.len())?;
    let loss_scale = state.loss_scale;
    let verdict = || validate_with(&split(grads, &ranges), hyper, loss_scale, opts.exec);
    stv_iteration_with(state, grads, plan, hyper, opts, verdict)
}

/// Speculative protocol with the verdict supplied by `verdict`, which may
/// block on a validator running elsewhere. It is called after every bucket
/// has been stepped.
///
/// Buckets are stepped in backward order, each after a snapshot of its
/// range. `Proceed` drops the snapshots; `Clip` restores them and steps
/// again with the clipped gradients; `SkipNonFinite` restores them and
/// leaves the step counter alone.
pub fn stv_iteration_with(
    state: &mut TrainState,
    grads: &[f32],
    plan: &PartitionPlan,
    hyper: &AdamHyper,
    opts: &StepOptions,
    verdict: impl FnOnce() -> Verdict,
) -> Result<IterationReport> {
    check_inputs(state, grads, hyper)?;
    let ranges = bucket_ranges(plan, state.len())?;
    let loss_scale = state.loss_scale;
    let unscaled = prepared(grads, loss_scale, None);

    let mut snapshots: Vec<BucketSnapshot> = Vec::with_capacity(ranges.len());
    for id in plan.backward_order() {
        let r = ranges[id].clone();
        snapshots.push(state.snapshot(id as u32, r.clone()));
        adam_step_bucket(
            state,
            &unscaled[r.clone()],
            r,
            hyper,
            opts.tile_elems,
            opts.exec,
        )?;
    }

    let verdict = verdict();
    let mut rollbacks = 0;
    if verdict.needs_rollback() {
        for snap in &snapshots {
            restore(state, snap, opts.mutation);
        }
        rollbacks = 1;
        if let Verdict::Clip(c) = verdict {
            step_all(
                state,
                &prepared(grads, loss_scale, Some(c)),
                &ranges,
                hyper,
                opts,
            )?;
        }
    }
    drop(snapshots);
    commit(state, verdict);
    Ok(IterationReport {
        verdict,
        rollbacks,
        t: state.t,
        loss_scale,
    })
}

fn restore(state: &mut TrainState, snap: &BucketSnapshot, mutation: Option<Mutation>) {
    match mutation {
        None => state.restore(snap),
        Some(Mutation::StaleSecondMoment) => {
            let r = snap.range.clone();
            state.master[r.clone()].copy_from_slice(&snap.master);
            state.m[r].copy_from_slice(&snap.m);
            state.t = snap.t;
        }
    }
}
