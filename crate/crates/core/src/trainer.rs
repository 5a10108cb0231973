//! Primal-dual training of the noise predictor.
//!
//! Each dual iteration runs `N` optimizer steps on the Lagrangian
//! `mse(q) + sum_i lambda_i mse(q^i)`, then moves `lambda` along fresh,
//! independent constraint-loss estimates. Thresholds are in scaled-loss
//! units (`b_tilde`); they shift the dual update but not the primal gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::distributions::{GaussianMixture, TabularDist};
pub use crate::dual::{dual_step, resilient_dual_step, DualRecord, DualState};
use crate::net::{DenoisingExample, GradWorkspace, NetArch, Scratch, ScoreNet};
use crate::optim::{AdamParams, AdamW};
use crate::oracle::{exact_dual_iteration, DualProblem};
use crate::rng::{self, Rng, RngExt};
use crate::schedule::{NoiseSchedule, TimeMode};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub enum ConstraintSource {
    /// Clean samples are drawn from a distribution and noised forward.
    Data(GaussianMixture),
    /// Stay close to a frozen network: latents are pure Gaussian noise and
    /// the target is the frozen prediction.
    Pretrained(ScoreNet),
}

#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub source: ConstraintSource,
    /// `b_tilde`, in loss units.
    pub threshold: f64,
    /// Size of the fresh batch used for the dual-step estimate.
    pub batch_size: usize,
    pub label: String,
}

impl ConstraintSpec {
    pub fn data(dist: GaussianMixture, threshold: f64, batch_size: usize, label: impl Into<String>) -> Self {
        ConstraintSpec { source: ConstraintSource::Data(dist), threshold, batch_size, label: label.into() }
    }

    pub fn pretrained(net: ScoreNet, threshold: f64, batch_size: usize, label: impl Into<String>) -> Self {
        ConstraintSpec { source: ConstraintSource::Pretrained(net), threshold, batch_size, label: label.into() }
    }

    fn dim(&self) -> usize {
        match &self.source {
            ConstraintSource::Data(g) => g.dim(),
            ConstraintSource::Pretrained(n) => n.input_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Dual iterations `H`.
    pub dual_iters: usize,
    /// Optimizer steps per dual iteration `N`.
    pub primal_steps: usize,
    pub lr: f64,
    pub dual_lr: f64,
    /// Resilient relaxation cost; 0 disables it.
    pub gamma: f64,
    pub batch_size: usize,
    /// Fresh-batch size for the objective estimate recorded at each dual
    /// iteration; constraints use their own `batch_size`.
    pub eval_batch_size: usize,
    pub seed: u64,
    pub time_mode: TimeMode,
    pub adam: AdamParams,
    pub arch: NetArch,
}

impl TrainConfig {
    pub fn new(arch: NetArch, seed: u64) -> Self {
        TrainConfig {
            dual_iters: 20,
            primal_steps: 200,
            lr: 2e-3,
            dual_lr: 0.5,
            gamma: 0.0,
            batch_size: 128,
            eval_batch_size: 512,
            seed,
            time_mode: TimeMode::Uniform,
            adam: AdamParams::default(),
            arch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.dual_iters == 0 || self.primal_steps == 0 {
            return bad(format!("dual_iters = {} and primal_steps = {} must be at least 1", self.dual_iters, self.primal_steps));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.dual_lr > 0.0 && self.dual_lr.is_finite()) {
            return bad(format!("step sizes lr = {} and dual_lr = {} must be positive", self.lr, self.dual_lr));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma = {} must be nonnegative", self.gamma));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        self.arch.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ScoreNet,
    pub dual: DualState,
    /// Lagrangian of the last primal step.
    pub final_primal_loss: f64,
}

/// `b_tilde = (b_bar - d v) / omega_bar`.
pub fn threshold_transform(b_bar: f64, v_per_dim: f64, omega_bar: f64, d: usize) -> f64 {
    (b_bar - d as f64 * v_per_dim) / omega_bar
}

pub fn threshold_inverse(b_tilde: f64, v_per_dim: f64, omega_bar: f64, d: usize) -> f64 {
    b_tilde * omega_bar + d as f64 * v_per_dim
}

/// Objective MSE plus `lambda`-weighted constraint MSEs.
pub fn lagrangian_loss(
    net: &ScoreNet,
    q_batch: &[DenoisingExample],
    constraint_batches: &[Vec<DenoisingExample>],
    lambda: &[f64],
    sched: &NoiseSchedule,
) -> f64 {
    let mut scratch = Scratch::new(net.arch());
    let horizon = sched.steps();
    let mut total = net.batch_loss(q_batch, horizon, &mut scratch);
    for (batch, l) in constraint_batches.iter().zip(lambda) {
        total += l * net.batch_loss(batch, horizon, &mut scratch);
    }
    total
}

/// Monte Carlo mean of `||eps_pre(x_t, t) - eps(x_t, t)||^2` with
/// `x_t ~ N(0, I)` and `t` uniform on `{2, ..., T}`.
pub fn finetune_constraint_estimate(net: &ScoreNet, pretrained: &ScoreNet, sched: &NoiseSchedule, n: usize, rng: &mut Rng) -> f64 {
    let batch = pretrained_batch(pretrained, sched, n, rng);
    let mut scratch = Scratch::new(net.arch());
    net.batch_loss(&batch, sched.steps(), &mut scratch)
}

/// Noise-prediction examples from clean draws of `dist`.
pub fn data_batch(dist: &GaussianMixture, sched: &NoiseSchedule, mode: TimeMode, n: usize, rng: &mut Rng) -> Vec<DenoisingExample> {
    let d = dist.dim();
    let mut x0 = alloc::vec![0.0; d];
    (0..n)
        .map(|_| {
            dist.draw_into(rng, &mut x0);
            let t = sched.sample_time(mode, rng);
            let mut noise = alloc::vec![0.0; d];
            rng::fill_standard_normal(rng, &mut noise);
            DenoisingExample::from_clean(sched, &x0, t, noise)
        })
        .collect()
}

/// Gaussian latents labeled with the frozen network's predictions.
pub fn pretrained_batch(pretrained: &ScoreNet, sched: &NoiseSchedule, n: usize, rng: &mut Rng) -> Vec<DenoisingExample> {
    let d = pretrained.input_dim();
    let mut scratch = Scratch::new(pretrained.arch());
    (0..n)
        .map(|_| {
            let mut x_t = alloc::vec![0.0; d];
            rng::fill_standard_normal(rng, &mut x_t);
            let t = rng.random_range(2..=sched.steps());
            let mut target = alloc::vec![0.0; d];
            pretrained.predict_into(&x_t, t, sched.steps(), &mut scratch, &mut target);
            DenoisingExample { x_t, t, target }
        })
        .collect()
}

fn constraint_batch(spec: &ConstraintSpec, sched: &NoiseSchedule, mode: TimeMode, n: usize, rng: &mut Rng) -> Vec<DenoisingExample> {
    match &spec.source {
        ConstraintSource::Data(g) => data_batch(g, sched, mode, n, rng),
        ConstraintSource::Pretrained(p) => pretrained_batch(p, sched, n, rng),
    }
}

/// Run `H` dual iterations of `N` primal steps each.
///
/// With `gamma > 0` the resilient update is used and every threshold must be
/// zero. The recorded Lagrangian at iteration `h` is measured on fresh
/// batches after the primal steps, thresholds and relaxation cost included;
/// `lambda_best` maximizes it.
pub fn train(
    config: &TrainConfig,
    q: &GaussianMixture,
    constraints: &[ConstraintSpec],
    init: Option<ScoreNet>,
    sched: &NoiseSchedule,
) -> Result<TrainOutcome> {
    config.validate()?;
    let d = q.dim();
    if config.arch.input_dim != d {
        return Err(Error::DimensionMismatch { expected: d, found: config.arch.input_dim });
    }
    for c in constraints {
        if c.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: c.dim() });
        }
        if c.batch_size == 0 || !c.threshold.is_finite() {
            return Err(Error::InvalidConfig(format!("constraint '{}' needs a finite threshold and a positive batch size", c.label)));
        }
        if config.gamma > 0.0 && c.threshold != 0.0 {
            return Err(Error::InvalidConfig(format!(
                "constraint '{}': resilient training uses zero thresholds, got {}",
                c.label, c.threshold
            )));
        }
    }
    let mut net = match init {
        Some(net) if net.arch() != &config.arch => {
            return Err(Error::InvalidConfig("initial network architecture differs from the configured one".into()));
        }
        Some(net) => net,
        None => ScoreNet::new(config.arch.clone(), config.seed)?,
    };

    let horizon = sched.steps();
    let thresholds: Vec<f64> = constraints.iter().map(|c| c.threshold).collect();
    let mut rng = rng::stream(config.seed, rng::streams::TRAIN);
    let mut opt = AdamW::new(net.params().len(), config.adam);
    let mut ws = GradWorkspace::new(&net);
    let mut scratch = Scratch::new(net.arch());
    let mut dual = DualState::new(constraints.len());
    let mut last = f64::NAN;

    for h in 1..=config.dual_iters {
        for _ in 0..config.primal_steps {
            ws.zero();
            let batch = data_batch(q, sched, config.time_mode, config.batch_size, &mut rng);
            let mut loss = net.batch_loss_and_grad(&batch, 1.0, horizon, &mut ws);
            for (c, &l) in constraints.iter().zip(&dual.lambda) {
                let batch = constraint_batch(c, sched, config.time_mode, config.batch_size, &mut rng);
                if l > 0.0 {
                    loss += net.batch_loss_and_grad(&batch, l, horizon, &mut ws);
                }
            }
            if !loss.is_finite() || ws.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { iteration: h });
            }
            opt.step(net.params_mut(), &ws.grad, config.lr);
            last = loss;
        }

        let objective = net.batch_loss(&data_batch(q, sched, config.time_mode, config.eval_batch_size, &mut rng), horizon, &mut scratch);
        let estimates: Vec<f64> = constraints
            .iter()
            .map(|c| net.batch_loss(&constraint_batch(c, sched, config.time_mode, c.batch_size, &mut rng), horizon, &mut scratch))
            .collect();
        let lambda = dual.lambda.clone();
        let lagrangian = objective
            + lambda.iter().zip(&estimates).zip(&thresholds).map(|((l, e), b)| l * (e - b)).sum::<f64>()
            - config.gamma * lambda.iter().map(|l| l * l).sum::<f64>();
        if !lagrangian.is_finite() {
            return Err(Error::TrainingDiverged { iteration: h });
        }
        dual.lambda = if config.gamma > 0.0 {
            resilient_dual_step(&lambda, &estimates, config.dual_lr, config.gamma)
        } else {
            dual_step(&lambda, &estimates, &thresholds, config.dual_lr)
        };
        dual.record(DualRecord { h, lambda, constraint_estimates: estimates, objective_estimate: objective, lagrangian });
    }
    Ok(TrainOutcome { net, dual, final_primal_loss: last })
}

/// Training loop on the tabular track: the primal step is the closed-form
/// mixture and the estimates are exact constraint KLs. Shares its update
/// with the exact dual ascent.
pub fn train_exact(prob: &DualProblem, dual_iters: usize, dual_lr: f64, floor: f64) -> (DualState, TabularDist) {
    let thresholds = prob.kl_thresholds();
    let mut dual = DualState::new(prob.len());
    dual.lambda.iter_mut().for_each(|l| *l = floor.max(0.0));
    for h in 1..=dual_iters {
        let lambda = dual.lambda.clone();
        let (kls, next) = exact_dual_iteration(prob, &lambda, &thresholds, dual_lr, floor);
        let mix = prob.mixture(&lambda);
        let objective = mix.entropy() + prob.q().kl_to(&mix);
        let lagrangian = prob.dual_function(&lambda);
        dual.lambda = next;
        dual.record(DualRecord { h, lambda, constraint_estimates: kls, objective_estimate: objective, lagrangian });
    }
    let p_star = prob.mixture(&dual.lambda);
    (dual, p_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_dual_ascent, AscentConfig};
    use crate::schedule::{DEFAULT_C0, DEFAULT_C1};
    use alloc::vec;

    fn small_config(seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(NetArch::new(2, vec![16, 16]), seed);
        c.dual_iters = 4;
        c.primal_steps = 20;
        c.batch_size = 32;
        c
    }

    fn two_blobs() -> (GaussianMixture, GaussianMixture) {
        let q = GaussianMixture::isotropic(vec![-2.0, 0.0], 0.25).unwrap();
        let c = GaussianMixture::isotropic(vec![2.0, 0.0], 0.25).unwrap();
        (q, c)
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(100, DEFAULT_C0, DEFAULT_C1).unwrap()
    }

    fn net_batch(s: &NoiseSchedule, g: &GaussianMixture, seed: u64) -> Vec<DenoisingExample> {
        data_batch(g, s, TimeMode::Uniform, 16, &mut rng::stream(seed, 0))
    }

    #[test]
    fn lagrangian_recomposes() {
        let s = sched();
        let (q, c) = two_blobs();
        let net = ScoreNet::new(NetArch::new(2, vec![8]), 1).unwrap();
        let qb = net_batch(&s, &q, 1);
        let cbs = vec![net_batch(&s, &c, 2), net_batch(&s, &q, 3)];
        let mut scratch = Scratch::new(net.arch());
        let parts: Vec<f64> = cbs.iter().map(|b| net.batch_loss(b, 100, &mut scratch)).collect();
        let obj = net.batch_loss(&qb, 100, &mut scratch);

        assert_eq!(lagrangian_loss(&net, &qb, &cbs, &[0.0, 0.0], &s), obj);
        let l = [0.7, 1.9];
        let full = lagrangian_loss(&net, &qb, &cbs, &l, &s);
        assert!((full - (obj + 0.7 * parts[0] + 1.9 * parts[1])).abs() < 1e-12);
        let scaled = lagrangian_loss(&net, &qb, &cbs, &[2.1, 1.9], &s);
        assert!((scaled - full - 1.4 * parts[0]).abs() < 1e-12);
    }

    #[test]
    fn threshold_round_trip() {
        assert_eq!(threshold_transform(6.0, 3.0, 2.0, 2), 0.0);
        let a = threshold_transform(10.0, 0.5, 2.0, 3);
        let b = threshold_transform(10.0, 0.5, 4.0, 3);
        assert!((a - 2.0 * b).abs() < 1e-15);
        let back = threshold_inverse(a, 0.5, 2.0, 3);
        assert!((back - 10.0).abs() < 1e-12);
    }

    #[test]
    fn finetune_gap_examples() {
        let s = sched();
        let net = ScoreNet::new(NetArch::new(2, vec![8]), 3).unwrap();
        let mut r = rng::stream(1, 0);
        assert_eq!(finetune_constraint_estimate(&net, &net.clone(), &s, 64, &mut r), 0.0);
        let mut shifted = net.clone();
        shifted.output_bias_mut().iter_mut().zip([0.3, -0.4]).for_each(|(b, d)| *b += d);
        let gap = finetune_constraint_estimate(&shifted, &net, &s, 64, &mut r);
        assert!((gap - 0.25).abs() < 1e-12, "gap = {gap}");
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(0);
        c.dual_iters = 0;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = small_config(0);
        c.gamma = -1.0;
        assert!(c.validate().is_err());
        let mut c = small_config(0);
        c.gamma = 0.5;
        let (q, g) = two_blobs();
        let spec = ConstraintSpec::data(g, 0.1, 16, "c");
        assert!(matches!(train(&c, &q, &[spec], None, &sched()), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn history_replays_and_is_deterministic() {
        let s = sched();
        let (q, g) = two_blobs();
        let c = small_config(11);
        let specs = [ConstraintSpec::data(g, 0.05, 32, "minority")];
        let a = train(&c, &q, &specs, None, &s).unwrap();
        let b = train(&c, &q, &specs, None, &s).unwrap();
        assert_eq!(a.dual, b.dual);
        assert_eq!(a.net, b.net);
        let hist = &a.dual.history;
        assert_eq!(hist.len(), 4);
        for w in hist.windows(2) {
            assert_eq!(dual_step(&w[0].lambda, &w[0].constraint_estimates, &[0.05], c.dual_lr), w[1].lambda);
        }
        let last = hist.last().unwrap();
        assert_eq!(dual_step(&last.lambda, &last.constraint_estimates, &[0.05], c.dual_lr), a.dual.lambda);
        assert!(hist.iter().all(|r| r.lambda.iter().all(|&l| l >= 0.0)));
        // Untrained for the minority blob, so the constraint is violated.
        assert!(a.dual.lambda[0] > 0.0);
        let best = a.dual.best_record().unwrap();
        assert!(hist.iter().all(|r| r.lagrangian <= best.lagrangian));
    }

    #[test]
    fn slack_resilient_constraint_keeps_zero_dual() {
        let s = sched();
        let (q, _) = two_blobs();
        let mut c = small_config(2);
        c.gamma = 1.0;
        // Zero loss estimates are never positive, so the resilient step
        // never leaves zero. A frozen copy of the trained net gives exactly
        // zero gap.
        let pre = ScoreNet::new(c.arch.clone(), 9).unwrap();
        let specs = [ConstraintSpec::pretrained(pre.clone(), 0.0, 32, "gap")];
        let mut c0 = c.clone();
        c0.lr = 1e-300;
        let out = train(&c0, &q, &specs, Some(pre), &s).unwrap();
        assert!(out.dual.history.iter().all(|r| r.lambda == vec![0.0]));
        assert_eq!(out.dual.lambda, vec![0.0]);

        let mut slack = small_config(2);
        slack.dual_lr = 0.3;
        let (_, g) = two_blobs();
        let specs = [ConstraintSpec::data(g, 1e6, 32, "loose")];
        let out = train(&slack, &q, &specs, None, &s).unwrap();
        assert!(out.dual.history.iter().all(|r| r.lambda == vec![0.0]));
    }

    #[test]
    fn resilient_dual_stays_bounded() {
        let s = sched();
        let (q, g) = two_blobs();
        let mut c = small_config(5);
        c.gamma = 0.5;
        c.dual_lr = 2.0;
        c.dual_iters = 8;
        let specs = [ConstraintSpec::data(g, 0.0, 32, "minority")];
        let out = train(&c, &q, &specs, None, &s).unwrap();
        let m = out.dual.history.iter().map(|r| r.constraint_estimates[0]).fold(0.0, f64::max);
        let bound = m / (2.0 * c.gamma) + c.dual_lr * m;
        for w in out.dual.history.windows(2) {
            assert_eq!(resilient_dual_step(&w[0].lambda, &w[0].constraint_estimates, c.dual_lr, c.gamma), w[1].lambda);
        }
        assert!(out.dual.history.iter().all(|r| r.lambda[0] <= bound));
        assert!(out.dual.lambda[0] <= bound);
    }

    #[test]
    fn unconstrained_loss_decreases() {
        let s = sched();
        let (q, _) = two_blobs();
        let mut c = small_config(3);
        c.dual_iters = 10;
        c.primal_steps = 40;
        let out = train(&c, &q, &[], None, &s).unwrap();
        let h = &out.dual.history;
        assert!(h.iter().all(|r| r.lambda.is_empty()));
        let early: f64 = h[..3].iter().map(|r| r.objective_estimate).sum::<f64>() / 3.0;
        let late: f64 = h[7..].iter().map(|r| r.objective_estimate).sum::<f64>() / 3.0;
        assert!(late < early, "early {early} late {late}");
    }

    #[test]
    fn exact_mode_matches_ascent() {
        let q = TabularDist::new(vec!["a".into(), "b".into()], vec![0.3, 0.7]).unwrap();
        let c1 = TabularDist::new(vec!["c".into(), "d".into()], vec![0.5, 0.5]).unwrap();
        let c2 = TabularDist::uniform(vec!["e".into()]).unwrap();
        let prob = DualProblem::new(q, vec![c1, c2], vec![2.0, 1.5]).unwrap();
        let cfg = AscentConfig { max_iters: 300, tol: 0.0, ..AscentConfig::default() };
        let run = exact_dual_ascent(&prob, &cfg);
        let (dual, _) = train_exact(&prob, 300, cfg.eta, cfg.floor);
        for (rec, step) in dual.history.iter().zip(&run.trajectory) {
            for (a, b) in rec.lambda.iter().zip(&step.lambda) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((rec.lagrangian - step.dual_value).abs() < 1e-12);
        }
        for (a, b) in dual.lambda.iter().zip(&run.lambda) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
