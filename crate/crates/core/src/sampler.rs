//! Ancestral sampling through the learned backward process.

use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::distributions::GaussianMixture;
use crate::net::{Scratch, ScoreNet};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Anything that can supply `s(x_t, t) ~ grad log q_t(x_t)`.
pub trait ScoreModel {
    type Workspace;

    fn dim(&self) -> usize;

    fn workspace(&self) -> Self::Workspace;

    fn score_into(&self, ws: &mut Self::Workspace, x: &[f64], t: usize, sched: &NoiseSchedule, out: &mut [f64]);
}

impl ScoreModel for ScoreNet {
    type Workspace = Scratch;

    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn workspace(&self) -> Scratch {
        Scratch::new(self.arch())
    }

    fn score_into(&self, ws: &mut Scratch, x: &[f64], t: usize, sched: &NoiseSchedule, out: &mut [f64]) {
        self.predict_into(x, t, sched.steps(), ws, out);
        let scale = -1.0 / (1.0 - sched.alpha_bar(t)).sqrt();
        out.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Exact score of a Gaussian mixture pushed through the forward process.
#[derive(Debug, Clone)]
pub struct AnalyticScore {
    diffused: Vec<GaussianMixture>,
}

impl AnalyticScore {
    pub fn new(target: &GaussianMixture, sched: &NoiseSchedule) -> Self {
        AnalyticScore { diffused: (1..=sched.steps()).map(|t| target.diffused(sched, t)).collect() }
    }
}

impl ScoreModel for AnalyticScore {
    type Workspace = ();

    fn dim(&self) -> usize {
        self.diffused[0].dim()
    }

    fn workspace(&self) {}

    fn score_into(&self, _: &mut (), x: &[f64], t: usize, _: &NoiseSchedule, out: &mut [f64]) {
        self.diffused[t - 1].score_into(x, out);
    }
}

/// `x_{t-1} = (x_t + (1 - alpha_t) s(x_t, t)) / sqrt(alpha_t) + sigma_p(t) noise`.
pub fn backward_step<M: ScoreModel>(
    model: &M,
    ws: &mut M::Workspace,
    sched: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    noise: &[f64],
) -> Vec<f64> {
    let mut out = alloc::vec![0.0; x_t.len()];
    let mut score = alloc::vec![0.0; x_t.len()];
    step_into(model, ws, sched, x_t, t, noise, &mut score, &mut out);
    out
}

/// Posterior-mean update given a precomputed score.
pub fn backward_mean(sched: &NoiseSchedule, x_t: &[f64], score: &[f64], t: usize) -> Vec<f64> {
    let a = sched.alpha(t);
    let inv = 1.0 / a.sqrt();
    x_t.iter().zip(score).map(|(x, s)| inv * (x + (1.0 - a) * s)).collect()
}

#[allow(clippy::too_many_arguments)]
fn step_into<M: ScoreModel>(
    model: &M,
    ws: &mut M::Workspace,
    sched: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    noise: &[f64],
    score: &mut [f64],
    out: &mut [f64],
) {
    model.score_into(ws, x_t, t, sched, score);
    let a = sched.alpha(t);
    let inv = 1.0 / a.sqrt();
    let sd = sched.sigma_p2(t).sqrt();
    for i in 0..out.len() {
        out[i] = inv * (x_t[i] + (1.0 - a) * score[i]) + sd * noise[i];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Capture {
    #[default]
    FinalOnly,
    /// Keep `x_T, ..., x_0` for every chain.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub seed: u64,
    pub outputs: Vec<Vec<f64>>,
    /// Per chain, `T + 1` states from `x_T` down to `x_0`.
    pub latents: Option<Vec<Vec<Vec<f64>>>>,
}

/// Draw `n` samples. Chain `i` uses its own stream keyed by `(seed, i)`;
/// the final `t = 1` step injects no noise.
pub fn generate<M: ScoreModel>(model: &M, sched: &NoiseSchedule, n: usize, seed: u64, capture: Capture) -> Result<SampleRun> {
    let d = model.dim();
    let mut ws = model.workspace();
    let mut outputs = Vec::with_capacity(n);
    let mut latents = match capture {
        Capture::Full => Some(Vec::with_capacity(n)),
        Capture::FinalOnly => None,
    };
    let mut x = alloc::vec![0.0; d];
    let mut next = alloc::vec![0.0; d];
    let mut noise = alloc::vec![0.0; d];
    let mut score = alloc::vec![0.0; d];
    let zeros = alloc::vec![0.0; d];
    for chain in 0..n {
        let mut r = rng::chain_stream(seed, chain);
        rng::fill_standard_normal(&mut r, &mut x);
        let mut path = latents.as_ref().map(|_| {
            let mut p = Vec::with_capacity(sched.steps() + 1);
            p.push(x.clone());
            p
        });
        for t in (1..=sched.steps()).rev() {
            let eps: &[f64] = if t > 1 {
                rng::fill_standard_normal(&mut r, &mut noise);
                &noise
            } else {
                &zeros
            };
            step_into(model, &mut ws, sched, &x, t, eps, &mut score, &mut next);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::SamplingDiverged { chain, step: t });
            }
            core::mem::swap(&mut x, &mut next);
            if let Some(p) = path.as_mut() {
                p.push(x.clone());
            }
        }
        outputs.push(x.clone());
        if let (Some(all), Some(p)) = (latents.as_mut(), path) {
            all.push(p);
        }
    }
    Ok(SampleRun { seed, outputs, latents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::tv_binned;
    use crate::distributions::Density;
    use crate::net::NetArch;
    use crate::schedule::{DEFAULT_C0, DEFAULT_C1};
    use alloc::vec;

    struct Fixed(Vec<f64>);

    impl ScoreModel for Fixed {
        type Workspace = ();
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn workspace(&self) {}
        fn score_into(&self, _: &mut (), _: &[f64], _: usize, _: &NoiseSchedule, out: &mut [f64]) {
            out.copy_from_slice(&self.0);
        }
    }

    #[test]
    fn zero_score_zero_noise_rescales() {
        let s = NoiseSchedule::new(50, DEFAULT_C0, DEFAULT_C1).unwrap();
        let out = backward_step(&Fixed(vec![0.0, 0.0]), &mut (), &s, &[1.0, -2.0], 30, &[0.0, 0.0]);
        let inv = 1.0 / s.alpha(30).sqrt();
        assert_eq!(out, vec![inv, -2.0 * inv]);
    }

    #[test]
    fn unit_alpha_has_no_drift() {
        let s = NoiseSchedule::from_alphas(Default::default(), vec![1.0, 0.9]);
        let mean = backward_mean(&s, &[0.4, 2.0], &[5.0, -7.0], 1);
        assert!((mean[0] - 0.4).abs() < 1e-12 && (mean[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn backward_mean_substitution() {
        // alpha_2 = 0.99 from a linear schedule with beta 0.01 at t = 2.
        let s = NoiseSchedule::with_kind(2, crate::schedule::ScheduleKind::Linear { beta_start: 0.5, beta_end: 0.01 }).unwrap();
        assert!((s.alpha(2) - 0.99).abs() < 1e-15);
        let out = backward_step(&Fixed(vec![-1.0, 0.0]), &mut (), &s, &[1.0, 0.0], 2, &[0.0, 0.0]);
        let expected = 1.0 / 0.99f64.sqrt() - 0.01 / 0.99f64.sqrt();
        assert!((out[0] - expected).abs() < 1e-12);
        assert!((out[0] - 0.99499).abs() < 1e-5);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn empty_and_deterministic_runs() {
        let s = NoiseSchedule::new(20, 2.0, 3.0).unwrap();
        let net = ScoreNet::new(NetArch::new(2, vec![8]), 5).unwrap();
        let run = generate(&net, &s, 0, 1, Capture::FinalOnly).unwrap();
        assert!(run.outputs.is_empty());
        let a = generate(&net, &s, 16, 9, Capture::Full).unwrap();
        let b = generate(&net, &s, 16, 9, Capture::Full).unwrap();
        assert_eq!(a, b);
        let lat = a.latents.as_ref().unwrap();
        assert_eq!(lat.len(), 16);
        assert!(lat.iter().all(|p| p.len() == 21));
        assert_eq!(lat[3][20], a.outputs[3]);
        // Chains are independent of how many siblings run.
        let c = generate(&net, &s, 4, 9, Capture::FinalOnly).unwrap();
        assert_eq!(c.outputs[..], a.outputs[..4]);
    }

    #[test]
    fn divergence_is_reported() {
        let s = NoiseSchedule::new(20, 2.0, 3.0).unwrap();
        let err = generate(&Fixed(vec![f64::INFINITY]), &s, 2, 0, Capture::FinalOnly).unwrap_err();
        assert!(matches!(err, Error::SamplingDiverged { chain: 0, step: 20 }));
    }

    #[test]
    fn analytic_score_reproduces_target() {
        let s = NoiseSchedule::new(400, DEFAULT_C0, DEFAULT_C1).unwrap();
        let q = GaussianMixture::new(vec![0.7, 0.3], vec![vec![-2.0, 0.5], vec![2.0, -0.5]], vec![0.25, 0.16]).unwrap();
        let model = AnalyticScore::new(&q, &s);
        let run = generate(&model, &s, 20_000, 3, Capture::FinalOnly).unwrap();
        let mut r = rng::stream(4, 0);
        // Large reference and a 12x12 grid keep the histogram noise near 0.02.
        let reference = q.sample(200_000, &mut r);
        let tv = tv_binned(&run.outputs, &reference, 12);
        assert!(tv < 0.05, "tv = {tv}");
    }
}
