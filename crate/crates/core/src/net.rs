//! Fully connected noise predictor `eps_theta(x_t, t)` with a sinusoidal time
//! embedding and hand-written reverse-mode gradients.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::rng::{self, RngExt};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    /// Softplus, `log(1 + e^z)`.
    SmoothRelu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::SmoothRelu => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::SmoothRelu => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetArch {
    pub input_dim: usize,
    /// Even; half sine and half cosine features.
    pub time_embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl NetArch {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Self {
        NetArch { input_dim, time_embed_dim: 16, hidden, activation: Activation::Tanh }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input dimension must be positive".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "time embedding dimension {} must be positive and even",
                self.time_embed_dim
            )));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Layer widths from input (data + embedding) to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim + self.time_embed_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.input_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

/// One training pair: the network sees `(x_t, t)` and should output `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingExample {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub target: Vec<f64>,
}

impl DenoisingExample {
    /// Noise-prediction example from a clean point: `x_t` from the forward
    /// marginal, target `noise`.
    pub fn from_clean(sched: &NoiseSchedule, x0: &[f64], t: usize, noise: Vec<f64>) -> Self {
        let mut x_t = alloc::vec![0.0; x0.len()];
        sched.forward_into(x0, t, &noise, &mut x_t);
        DenoisingExample { x_t, t, target: noise }
    }
}

/// Reusable buffers for forward and backward passes.
#[derive(Debug, Clone)]
pub struct Scratch {
    pre: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Scratch {
    pub fn new(arch: &NetArch) -> Self {
        let widths = arch.widths();
        let max = *widths.iter().max().unwrap();
        Scratch {
            pre: widths.iter().map(|&w| alloc::vec![0.0; w]).collect(),
            acts: widths.iter().map(|&w| alloc::vec![0.0; w]).collect(),
            delta: alloc::vec![0.0; max],
            delta_prev: alloc::vec![0.0; max],
        }
    }
}

/// Gradient accumulator aligned with the parameter vector.
#[derive(Debug, Clone)]
pub struct GradWorkspace {
    pub grad: Vec<f64>,
    pub loss: f64,
    pub batch_size: usize,
    scratch: Scratch,
}

impl GradWorkspace {
    pub fn new(net: &ScoreNet) -> Self {
        GradWorkspace { grad: alloc::vec![0.0; net.params.len()], loss: 0.0, batch_size: 0, scratch: Scratch::new(&net.arch) }
    }

    pub fn zero(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        self.loss = 0.0;
        self.batch_size = 0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    arch: NetArch,
    widths: Vec<usize>,
    seed: u64,
    params: Vec<f64>,
}

impl ScoreNet {
    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn new(arch: NetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, rng::streams::NET_INIT);
        let mut params = Vec::with_capacity(arch.param_count());
        for w in arch.widths().windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] + 1) * w[1] {
                params.push(r.random_range(-bound..bound));
            }
        }
        Ok(ScoreNet { widths: arch.widths(), arch, seed, params })
    }

    pub fn from_parts(arch: NetArch, seed: u64, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch { expected: arch.param_count(), found: params.len() });
        }
        Ok(ScoreNet { widths: arch.widths(), arch, seed, params })
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    /// Output bias of the final layer.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let n = self.params.len();
        let d = self.arch.input_dim;
        &mut self.params[n - d..]
    }

    pub fn predict_noise(&self, x_t: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        if x_t.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch { expected: self.arch.input_dim, found: x_t.len() });
        }
        let mut scratch = Scratch::new(&self.arch);
        let mut out = alloc::vec![0.0; self.arch.input_dim];
        self.predict_into(x_t, t, sched.steps(), &mut scratch, &mut out);
        Ok(out)
    }

    /// Allocation-free forward pass. `x_t` must have the input dimension.
    pub fn predict_into(&self, x_t: &[f64], t: usize, horizon: usize, scratch: &mut Scratch, out: &mut [f64]) {
        self.forward(x_t, t, horizon, scratch);
        out.copy_from_slice(scratch.acts.last().unwrap());
    }

    fn forward(&self, x_t: &[f64], t: usize, horizon: usize, s: &mut Scratch) {
        let d = self.arch.input_dim;
        let input = &mut s.acts[0];
        input[..d].copy_from_slice(x_t);
        embed_time(t, horizon, &mut input[d..]);
        let widths = &self.widths;
        let layers = widths.len() - 1;
        let mut offset = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let bias = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;
            let (before, after) = s.acts.split_at_mut(l + 1);
            let src = &before[l];
            let dst = &mut after[0];
            let pre = &mut s.pre[l + 1];
            let last = l + 1 == layers;
            for o in 0..fan_out {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let z = bias[o] + row.iter().zip(src.iter()).map(|(w, a)| w * a).sum::<f64>();
                pre[o] = z;
                dst[o] = if last { z } else { self.arch.activation.apply(z) };
            }
        }
    }

    /// Adds the gradient of `weight/n * sum_j ||eps(x_t_j, t_j) - target_j||^2`
    /// into `ws.grad` and returns that loss.
    pub fn batch_loss_and_grad(&self, batch: &[DenoisingExample], weight: f64, horizon: usize, ws: &mut GradWorkspace) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let scale = weight / batch.len() as f64;
        let widths = &self.widths;
        let layers = widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut acc = 0;
        for w in widths.windows(2) {
            offsets.push(acc);
            acc += (w[0] + 1) * w[1];
        }
        let mut loss = 0.0;
        for ex in batch {
            self.forward(&ex.x_t, ex.t, horizon, &mut ws.scratch);
            let s = &mut ws.scratch;
            let out = &s.acts[layers];
            let d = out.len();
            for j in 0..d {
                let r = out[j] - ex.target[j];
                loss += r * r;
                s.delta[j] = 2.0 * scale * r;
            }
            for l in (0..layers).rev() {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let w_off = offsets[l];
                let b_off = w_off + fan_in * fan_out;
                let src = &s.acts[l];
                for o in 0..fan_out {
                    let g = s.delta[o];
                    if g == 0.0 {
                        continue;
                    }
                    ws.grad[b_off + o] += g;
                    let row = &mut ws.grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    for (gw, a) in row.iter_mut().zip(src.iter()) {
                        *gw += g * a;
                    }
                }
                if l == 0 {
                    break;
                }
                let weights = &self.params[w_off..b_off];
                for i in 0..fan_in {
                    let mut back = 0.0;
                    for o in 0..fan_out {
                        back += weights[o * fan_in + i] * s.delta[o];
                    }
                    s.delta_prev[i] = back * self.arch.activation.derivative(s.pre[l][i], s.acts[l][i]);
                }
                core::mem::swap(&mut s.delta, &mut s.delta_prev);
            }
        }
        let loss = scale * loss;
        ws.loss += loss;
        ws.batch_size += batch.len();
        loss
    }

    /// Mean squared prediction error over `batch` without gradients.
    pub fn batch_loss(&self, batch: &[DenoisingExample], horizon: usize, scratch: &mut Scratch) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let mut out = alloc::vec![0.0; self.arch.input_dim];
        let mut total = 0.0;
        for ex in batch {
            self.predict_into(&ex.x_t, ex.t, horizon, scratch, &mut out);
            total += out.iter().zip(&ex.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        total / batch.len() as f64
    }
}

/// `[sin(w_k t/T), cos(w_k t/T)]` with `w_k = pi 2^k / 2`.
pub fn embed_time(t: usize, horizon: usize, out: &mut [f64]) {
    let half = out.len() / 2;
    let u = t as f64 / horizon as f64;
    let mut freq = 0.5 * PI;
    for k in 0..half {
        out[k] = (freq * u).sin();
        out[half + k] = (freq * u).cos();
        freq *= 2.0;
    }
}

/// `s = -eps / sqrt(1 - alpha_bar_t)`.
pub fn to_score(eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let gap = 1.0 - sched.alpha_bar(t);
    if !(gap > 0.0) {
        return Err(Error::DegenerateStep { t });
    }
    let scale = -1.0 / gap.sqrt();
    Ok(eps_hat.iter().map(|e| scale * e).collect())
}

/// Inverse of [`to_score`]: `eps = -s sqrt(1 - alpha_bar_t)`.
pub fn from_score(score: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let gap = 1.0 - sched.alpha_bar(t);
    if !(gap > 0.0) {
        return Err(Error::DegenerateStep { t });
    }
    let scale = -gap.sqrt();
    Ok(score.iter().map(|s| scale * s).collect())
}
