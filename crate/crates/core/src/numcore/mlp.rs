//! Small tanh perceptron with an analytic backward pass, used as the
//! gradient source for protocol tests.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fully connected network: tanh on hidden layers, linear output, mean
/// squared error. Parameters are laid out layer by layer as a row-major
/// `out × in` weight matrix followed by the bias (if any).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyModel {
    pub sizes: Vec<usize>,
    pub bias: bool,
}

impl Default for TinyModel {
    fn default() -> Self {
        TinyModel {
            sizes: vec![16, 64, 64, 4],
            bias: true,
        }
    }
}

impl TinyModel {
    pub fn new(sizes: Vec<usize>, bias: bool) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::domain(
                "a model needs at least two nonzero layer sizes",
            ));
        }
        Ok(TinyModel { sizes, bias })
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.sizes
            .windows(2)
            .map(|w| w[0] * w[1] + if self.bias { w[1] } else { 0 })
            .sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.param_count());
        for w in self.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            out.extend((0..fan_in * fan_out).map(|_| rng.random_range(-a..a)));
            if self.bias {
                out.extend(std::iter::repeat_n(0.0, fan_out));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rows: usize,
    /// `rows × inputs`, row-major.
    pub x: Vec<f64>,
    /// `rows × outputs`, row-major.
    pub y: Vec<f64>,
}

/// Gradient of the mean squared error with respect to every parameter, and
/// the loss, evaluated at `params`.
pub fn tiny_model_grads(
    model: &TinyModel,
    params: &[f64],
    batch: &Batch,
) -> Result<(Vec<f64>, f64)> {
    if params.len() != model.param_count() {
        return Err(Error::domain(format!(
            "{} parameters for a model with {}",
            params.len(),
            model.param_count()
        )));
    }
    if batch.rows == 0
        || batch.x.len() != batch.rows * model.inputs()
        || batch.y.len() != batch.rows * model.outputs()
    {
        return Err(Error::domain("batch shape does not match the model"));
    }
    let layers = model.sizes.len() - 1;
    let mut offsets = Vec::with_capacity(layers);
    let mut off = 0;
    for w in model.sizes.windows(2) {
        offsets.push(off);
        off += w[0] * w[1] + if model.bias { w[1] } else { 0 };
    }

    let mut grads = vec![0.0; params.len()];
    let mut loss = 0.0;
    let norm = 1.0 / (batch.rows * model.outputs()) as f64;
    // activations per layer for one row
    let mut acts: Vec<Vec<f64>> = model.sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut delta: Vec<f64> = Vec::new();

    for row in 0..batch.rows {
        acts[0].copy_from_slice(&batch.x[row * model.inputs()..(row + 1) * model.inputs()]);
        for l in 0..layers {
            let (n_in, n_out) = (model.sizes[l], model.sizes[l + 1]);
            let w = &params[offsets[l]..offsets[l] + n_in * n_out];
            let (prev, next) = acts.split_at_mut(l + 1);
            let (a_in, a_out) = (&prev[l], &mut next[0]);
            for o in 0..n_out {
                let mut z = if model.bias {
                    params[offsets[l] + n_in * n_out + o]
                } else {
                    0.0
                };
                for i in 0..n_in {
                    z += w[o * n_in + i] * a_in[i];
                }
                a_out[o] = if l + 1 < layers { z.tanh() } else { z };
            }
        }
        let y = &batch.y[row * model.outputs()..(row + 1) * model.outputs()];
        delta.clear();
        for (o, &target) in y.iter().enumerate() {
            let e = acts[layers][o] - target;
            loss += e * e * norm;
            delta.push(2.0 * e * norm);
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (model.sizes[l], model.sizes[l + 1]);
            let base = offsets[l];
            for o in 0..n_out {
                for i in 0..n_in {
                    grads[base + o * n_in + i] += delta[o] * acts[l][i];
                }
                if model.bias {
                    grads[base + n_in * n_out + o] += delta[o];
                }
            }
            if l == 0 {
                break;
            }
            let mut back = vec![0.0; n_in];
            for (i, slot) in back.iter_mut().enumerate() {
                let mut s = 0.0;
                for o in 0..n_out {
                    s += params[base + o * n_in + i] * delta[o];
                }
                let a = acts[l][i];
                *slot = s * (1.0 - a * a);
            }
            delta = back;
        }
    }
    Ok((grads, loss))
}

/// Endless deterministic regression batches: standard normal inputs and
/// targets from a fixed random teacher `y = tanh(A·x)`.
#[derive(Clone, Debug)]
pub struct DataStream {
    rng: ChaCha8Rng,
    teacher: Vec<f64>,
    inputs: usize,
    outputs: usize,
    rows: usize,
}

impl DataStream {
    pub fn new(model: &TinyModel, rows: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let (inputs, outputs) = (model.inputs(), model.outputs());
        let scale = 1.0 / (inputs as f64).sqrt();
        let teacher = (0..inputs * outputs)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        DataStream {
            rng,
            teacher,
            inputs,
            outputs,
            rows: rows.max(1),
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        let x: Vec<f64> = (0..self.rows * self.inputs)
            .map(|_| self.rng.sample(StandardNormal))
            .collect();
        let mut y = Vec::with_capacity(self.rows * self.outputs);
        for r in 0..self.rows {
            let xr = &x[r * self.inputs..(r + 1) * self.inputs];
            for o in 0..self.outputs {
                let z: f64 = (0..self.inputs)
                    .map(|i| self.teacher[o * self.inputs + i] * xr[i])
                    .sum();
                y.push(z.tanh());
            }
        }
        Batch {
            rows: self.rows,
            x,
            y,
        }
    }
}
