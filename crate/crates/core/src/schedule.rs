//! Variance schedule of the forward/backward diffusion processes.
//!
//! Steps are 1-based: `t` ranges over `1..=T` and every per-step accessor
//! takes the step itself, not a vector offset.

use alloc::format;
use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::rng::{Rng, RngExt};
use crate::{Error, Result};

pub const DEFAULT_C0: f64 = 2.0;
pub const DEFAULT_C1: f64 = 6.0;

/// How per-step retention `alpha_t` is generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// `alpha_1 = 1 - 1/T^c0`, `alpha_t = 1 - c_T min((1 - alpha_1)(1 + c_T)^t, 1)`
    /// with `c_T = c1 log(T) / T`.
    Convergent { c0: f64, c1: f64 },
    /// `1 - alpha_t` linear from `beta_start` to `beta_end`. Debugging only.
    Linear { beta_start: f64, beta_end: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Convergent { c0: DEFAULT_C0, c1: DEFAULT_C1 }
    }
}

/// Diffusion-step distribution used when drawing training examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeMode {
    /// Uniform over `{2, ..., T}`.
    #[default]
    Uniform,
    /// `p(t) = omega_t / omega_bar` over `{2, ..., T}`.
    ElboWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma_q2: Vec<f64>,
    sigma_p2: Vec<f64>,
    omega: Vec<f64>,
    omega_bar: f64,
    /// Variance-mismatch constant per unit dimension.
    v: f64,
    omega_cdf: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, c0: f64, c1: f64) -> Result<Self> {
        Self::with_kind(steps, ScheduleKind::Convergent { c0, c1 })
    }

    pub fn with_kind(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!("horizon T = {steps} must be at least 2")));
        }
        let alpha = match kind {
            ScheduleKind::Convergent { c0, c1 } => convergent_alphas(steps, c0, c1)?,
            ScheduleKind::Linear { beta_start, beta_end } => {
                linear_alphas(steps, beta_start, beta_end)
            }
        };
        if let Some((i, a)) = alpha.iter().enumerate().find(|(_, &a)| !(a > 0.0 && a < 1.0)) {
            return Err(Error::InvalidSchedule(format!("alpha_{} = {a} is outside (0, 1)", i + 1)));
        }
        Ok(Self::from_alphas(kind, alpha))
    }

    pub(crate) fn from_alphas(kind: ScheduleKind, alpha: Vec<f64>) -> Self {
        let steps = alpha.len();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma_p2: Vec<f64> = alpha.iter().map(|&a| 1.0 / a - 1.0).collect();

        // Step 1 never enters the denoising sum; its posterior variance and
        // weight are left at zero.
        let mut sigma_q2 = alloc::vec![0.0; steps];
        let mut omega = alloc::vec![0.0; steps];
        let mut v = 0.0;
        for i in 1..steps {
            let a = alpha[i];
            sigma_q2[i] = (1.0 - a) * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]);
            omega[i] = (1.0 - a) * (1.0 - a) / (2.0 * sigma_q2[i] * a);
            let ratio = sigma_q2[i] / sigma_p2[i];
            v += 0.5 * (-ratio.ln() - 1.0 + ratio);
        }
        let omega_bar: f64 = omega[1..].iter().sum();
        let mut omega_cdf = Vec::with_capacity(steps - 1);
        let mut run = 0.0;
        for w in &omega[1..] {
            run += w / omega_bar;
            omega_cdf.push(run);
        }
        NoiseSchedule { kind, alpha, alpha_bar, sigma_q2, sigma_p2, omega, omega_bar, v, omega_cdf }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Horizon `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma_q2(&self, t: usize) -> f64 {
        self.sigma_q2[t - 1]
    }

    pub fn sigma_p2(&self, t: usize) -> f64 {
        self.sigma_p2[t - 1]
    }

    pub fn omega(&self, t: usize) -> f64 {
        self.omega[t - 1]
    }

    pub fn omega_bar(&self) -> f64 {
        self.omega_bar
    }

    /// Variance-mismatch constant per unit dimension; multiply by `d`.
    pub fn v_per_dim(&self) -> f64 {
        self.v
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
    pub fn forward_marginal_sample(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != x0.len() {
            return Err(Error::DimensionMismatch { expected: x0.len(), found: noise.len() });
        }
        let mut out = alloc::vec![0.0; x0.len()];
        self.forward_into(x0, t, noise, &mut out);
        Ok(out)
    }

    pub(crate) fn forward_into(&self, x0: &[f64], t: usize, noise: &[f64], out: &mut [f64]) {
        let ab = self.alpha_bar(t);
        let (keep, mix) = (ab.sqrt(), (1.0 - ab).sqrt());
        for ((o, &x), &e) in out.iter_mut().zip(x0).zip(noise) {
            *o = keep * x + mix * e;
        }
    }

    /// Probability of each step `t = 2..=T` under `mode` (index 0 is `t = 2`).
    pub fn time_pmf(&self, mode: TimeMode) -> Vec<f64> {
        let n = self.steps() - 1;
        match mode {
            TimeMode::Uniform => alloc::vec![1.0 / n as f64; n],
            TimeMode::ElboWeighted => self.omega[1..].iter().map(|w| w / self.omega_bar).collect(),
        }
    }

    pub fn sample_time(&self, mode: TimeMode, rng: &mut Rng) -> usize {
        match mode {
            TimeMode::Uniform => rng.random_range(2..=self.steps()),
            TimeMode::ElboWeighted => {
                let u: f64 = rng.random();
                let idx = self.omega_cdf.partition_point(|&c| c <= u);
                2 + idx.min(self.steps() - 2)
            }
        }
    }
}

fn convergent_alphas(steps: usize, c0: f64, c1: f64) -> Result<Vec<f64>> {
    if !(c0 > 0.0 && c0.is_finite()) || !(c1 > 0.0 && c1.is_finite()) {
        return Err(Error::InvalidSchedule(format!("c0 = {c0} and c1 = {c1} must be positive")));
    }
    let horizon = steps as f64;
    let first_gap = 1.0 / horizon.powf(c0);
    let c_t = c1 * horizon.ln() / horizon;
    let mut alpha = Vec::with_capacity(steps);
    alpha.push(1.0 - first_gap);
    for t in 2..=steps {
        let ramp = (first_gap * (1.0 + c_t).powi(t as i32)).min(1.0);
        alpha.push(1.0 - c_t * ramp);
    }
    Ok(alpha)
}

fn linear_alphas(steps: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    (0..steps)
        .map(|i| {
            let frac = i as f64 / (steps - 1) as f64;
            1.0 - (beta_start + frac * (beta_end - beta_start))
        })
        .collect()
}
