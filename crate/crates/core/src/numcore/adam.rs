//! AdamW with decoupled weight decay, in cache-sized tiles.
//!
//! Per element, with `t` the step being applied:
//!
//! ```text
//! m' = β1·m + (1 − β1)·g
//! v' = β2·v + (1 − β2)·g·g
//! w' = w − lr·((m' / (1 − β1^t)) / (sqrt(v' / (1 − β2^t)) + eps)) − lr·wd·w
//! ```
//!
//! All arithmetic is `f32` in exactly this order, so the tiled kernel and the
//! scalar reference agree bit for bit and tile size never matters.

use std::ops::Range;

use super::{AdamHyper, TrainState};
use crate::par::Exec;
use crate::{Error, Result};

/// 4096 `f32` lanes: 16 KiB per stream, four streams fit in L1/L2.
pub const DEFAULT_TILE_ELEMS: usize = 4096;

/// One element of the update, written straight from the formula.
pub fn adam_scalar_reference(
    w: f32,
    m: f32,
    v: f32,
    g: f32,
    hyper: &AdamHyper,
    step: u64,
) -> (f32, f32, f32) {
    let t = step as f32;
    let m_new = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
    let v_new = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
    let m_hat = m_new / (1.0 - hyper.beta1.powf(t));
    let v_hat = v_new / (1.0 - hyper.beta2.powf(t));
    let w_new =
        w - hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps)) - hyper.lr * hyper.weight_decay * w;
    (w_new, m_new, v_new)
}

/// Element-at-a-time update over whole slices using the reference.
pub fn adam_step_scalar(
    master: &mut [f32],
    m: &mut [f32],
    v: &mut [f32],
    grads: &[f32],
    hyper: &AdamHyper,
    step: u64,
) {
    for i in 0..master.len() {
        let (w, mm, vv) = adam_scalar_reference(master[i], m[i], v[i], grads[i], hyper, step);
        master[i] = w;
        m[i] = mm;
        v[i] = vv;
    }
}

#[derive(Clone, Copy)]
struct Coeffs {
    b1: f32,
    one_minus_b1: f32,
    b2: f32,
    one_minus_b2: f32,
    bc1: f32,
    bc2: f32,
    lr: f32,
    eps: f32,
    lr_wd: f32,
}

impl Coeffs {
    fn new(hyper: &AdamHyper, step: u64) -> Self {
        let t = step as f32;
        Coeffs {
            b1: hyper.beta1,
            one_minus_b1: 1.0 - hyper.beta1,
            b2: hyper.beta2,
            one_minus_b2: 1.0 - hyper.beta2,
            bc1: 1.0 - hyper.beta1.powf(t),
            bc2: 1.0 - hyper.beta2.powf(t),
            lr: hyper.lr,
            eps: hyper.eps,
            lr_wd: hyper.lr * hyper.weight_decay,
        }
    }
}

fn tile(c: Coeffs, w: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32]) {
    for i in 0..w.len() {
        let gi = g[i];
        let mi = c.b1 * m[i] + c.one_minus_b1 * gi;
        let vi = c.b2 * v[i] + c.one_minus_b2 * gi * gi;
        let update = (mi / c.bc1) / ((vi / c.bc2).sqrt() + c.eps);
        w[i] = w[i] - c.lr * update - c.lr_wd * w[i];
        m[i] = mi;
        v[i] = vi;
    }
}

/// Applies step `state.t + 1` to `range` using `grads` (one per element of
/// the range). The step counter itself is left alone; it moves when the
/// iteration is committed.
pub fn adam_step_bucket(
    state: &mut TrainState,
    grads: &[f32],
    range: Range<usize>,
    hyper: &AdamHyper,
    tile_elems: usize,
    exec: Exec,
) -> Result<()> {
    if range.start > range.end || range.end > state.len() {
        return Err(Error::domain(format!(
            "range {range:?} outside state of {} elements",
            state.len()
        )));
    }
    if grads.len() != range.len() {
        return Err(Error::domain(format!(
            "{} gradients for a range of {} elements",
            grads.len(),
            range.len()
        )));
    }
    if tile_elems == 0 {
        return Err(Error::domain("tile size must be positive"));
    }
    if range.is_empty() {
        return Ok(());
    }
    let c = Coeffs::new(hyper, state.t + 1);
    let TrainState { master, m, v, .. } = state;
    exec.for_each_chunk4(
        tile_elems,
        &mut master[range.clone()],
        &mut m[range.clone()],
        &mut v[range],
        grads,
        |w, m, v, g| tile(c, w, m, v, g),
    );
    Ok(())
}
