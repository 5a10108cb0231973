//! Exact finite-support track.
//!
//! With tabular `q` and constraint distributions `q^i` on pairwise-disjoint
//! supports, the Lagrangian minimizer at fixed `lambda` is the mixture
//! `q_mix(lambda)`, the dual function is
//! `g(lambda) = -lambda^T b_bar + (1 + sum lambda) H(q_mix(lambda))`, and the
//! optimal multipliers solve `lambda_i / (1 + sum lambda) = exp(h_i - b_bar_i)`.

mod chain;

use alloc::format;
use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

pub use chain::{chain_joint_ops, ChainQuantities, TabularChain, ENUMERATION_BUDGET};

use crate::distributions::TabularDist;
use crate::dual::dual_step;
use crate::{Error, Result};

/// Constraint thresholds are in the entropy-shifted `b_bar` form.
#[derive(Debug, Clone, PartialEq)]
pub struct DualProblem {
    q: TabularDist,
    constraints: Vec<TabularDist>,
    b_bar: Vec<f64>,
    h: Vec<f64>,
}

impl DualProblem {
    pub fn new(q: TabularDist, constraints: Vec<TabularDist>, b_bar: Vec<f64>) -> Result<Self> {
        if b_bar.len() != constraints.len() {
            return Err(Error::DimensionMismatch { expected: constraints.len(), found: b_bar.len() });
        }
        if let Some(b) = b_bar.iter().find(|b| !b.is_finite()) {
            return Err(Error::InvalidDistribution(format!("threshold {b} is not finite")));
        }
        let parts: Vec<&TabularDist> = core::iter::once(&q).chain(&constraints).collect();
        for (i, later) in parts.iter().enumerate().skip(1) {
            for earlier in &parts[..i] {
                if let Some(atom) = later.support().iter().find(|a| earlier.support().contains(a)) {
                    return Err(Error::SupportsOverlap { constraint: i, atom: atom.clone() });
                }
            }
        }
        let h = constraints.iter().map(TabularDist::entropy).collect();
        Ok(DualProblem { q, constraints, b_bar, h })
    }

    pub fn q(&self) -> &TabularDist {
        &self.q
    }

    pub fn constraints(&self) -> &[TabularDist] {
        &self.constraints
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn b_bar(&self) -> &[f64] {
        &self.b_bar
    }

    /// Constraint entropies `h_i`.
    pub fn entropies(&self) -> &[f64] {
        &self.h
    }

    /// Thresholds on `KL(q^i || p)`: `b_i = b_bar_i - h_i`.
    pub fn kl_thresholds(&self) -> Vec<f64> {
        self.b_bar.iter().zip(&self.h).map(|(b, h)| b - h).collect()
    }

    pub fn feasibility(&self) -> Feasibility {
        feasibility_check(&self.h, &self.b_bar)
    }

    pub fn closed_form(&self) -> Result<Vec<f64>> {
        optimal_dual_closed_form(&self.h, &self.b_bar)
    }

    pub fn mixture(&self, lambda: &[f64]) -> TabularDist {
        TabularDist::mixture(&self.q, &self.constraints, lambda)
    }

    /// Exact `KL(q^i || q_mix(lambda))` for every constraint.
    pub fn constraint_kls(&self, lambda: &[f64]) -> Vec<f64> {
        let mix = self.mixture(lambda);
        self.constraints.iter().map(|c| c.kl_to(&mix)).collect()
    }

    /// `g(lambda) = -sum_i lambda_i b_bar_i + (1 + sum lambda) H(q_mix(lambda))`.
    pub fn dual_function(&self, lambda: &[f64]) -> f64 {
        let total = 1.0 + lambda.iter().sum::<f64>();
        let linear: f64 = lambda.iter().zip(&self.b_bar).map(|(l, b)| l * b).sum();
        total * self.mixture(lambda).entropy() - linear
    }

    /// `dg/dlambda_i = h_i - b_bar_i - log(lambda_i / (1 + sum lambda))`.
    pub fn dual_gradient(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        if let Some(index) = lambda.iter().position(|l| !(*l > 0.0)) {
            return Err(Error::NonPositiveDual { index });
        }
        let total = 1.0 + lambda.iter().sum::<f64>();
        Ok(lambda
            .iter()
            .zip(&self.h)
            .zip(&self.b_bar)
            .map(|((l, h), b)| h - b - (l / total).ln())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    /// `s = sum_i exp(h_i - b_bar_i)`; feasible iff `s < 1`.
    pub margin: f64,
}

pub fn feasibility_check(h: &[f64], b_bar: &[f64]) -> Feasibility {
    let margin: f64 = h.iter().zip(b_bar).map(|(h, b)| (h - b).exp()).sum();
    Feasibility { feasible: margin < 1.0, margin }
}

/// `lambda*_i = r_i / (1 - s)` with `r_i = exp(h_i - b_bar_i)`, `s = sum r`.
pub fn optimal_dual_closed_form(h: &[f64], b_bar: &[f64]) -> Result<Vec<f64>> {
    let check = feasibility_check(h, b_bar);
    if !check.feasible {
        return Err(Error::Infeasible { margin: check.margin });
    }
    let slack = 1.0 - check.margin;
    Ok(h.iter().zip(b_bar).map(|(h, b)| (h - b).exp() / slack).collect())
}

/// `1/2 sum |a - b|` over the union of supports.
pub fn tv_exact(a: &TabularDist, b: &TabularDist) -> f64 {
    let mut total = 0.0;
    for (atom, p) in a.support().iter().zip(a.pmf()) {
        total += (p - b.prob_of(atom)).abs();
    }
    for (atom, p) in b.support().iter().zip(b.pmf()) {
        if !a.support().contains(atom) {
            total += p;
        }
    }
    0.5 * total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentConfig {
    pub eta: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// `max lambda` beyond which the run is declared divergent.
    pub divergence_threshold: f64,
    /// Lower bound of the projection. Disjoint supports make the constraint
    /// KL infinite at `lambda_i = 0`.
    pub floor: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig { eta: 0.05, max_iters: 10_000, tol: 1e-10, divergence_threshold: 1e3, floor: 1e-12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AscentStatus {
    Converged,
    Divergent,
    MaxItersExceeded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentStep {
    pub lambda: Vec<f64>,
    pub dual_value: f64,
    pub constraint_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentRun {
    pub trajectory: Vec<AscentStep>,
    pub status: AscentStatus,
    pub lambda: Vec<f64>,
    pub p_star: TabularDist,
}

/// One exact dual iteration: constraint KLs at `q_mix(lambda)` followed by the
/// shared projected update, floored at `floor`.
pub fn exact_dual_iteration(prob: &DualProblem, lambda: &[f64], thresholds: &[f64], eta: f64, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let kls = prob.constraint_kls(lambda);
    let mut next = dual_step(lambda, &kls, thresholds, eta);
    next.iter_mut().for_each(|l| *l = l.max(floor));
    (kls, next)
}

/// Projected dual ascent with the primal step replaced by the closed-form
/// mixture. Starts from `lambda = 0` (projected onto the floor).
pub fn exact_dual_ascent(prob: &DualProblem, cfg: &AscentConfig) -> AscentRun {
    let thresholds = prob.kl_thresholds();
    let mut lambda = alloc::vec![cfg.floor.max(0.0); prob.len()];
    let mut trajectory = Vec::new();
    let mut status = AscentStatus::MaxItersExceeded;
    if prob.is_empty() {
        status = AscentStatus::Converged;
    }
    for _ in 0..if prob.is_empty() { 0 } else { cfg.max_iters } {
        let (kls, next) = exact_dual_iteration(prob, &lambda, &thresholds, cfg.eta, cfg.floor);
        trajectory.push(AscentStep { dual_value: prob.dual_function(&lambda), constraint_values: kls, lambda });
        let step = trajectory.last().unwrap().lambda.iter().zip(&next).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        lambda = next;
        if lambda.iter().any(|l| !l.is_finite() || *l > cfg.divergence_threshold) {
            status = AscentStatus::Divergent;
            break;
        }
        if step < cfg.tol {
            status = AscentStatus::Converged;
            break;
        }
    }
    trajectory.push(AscentStep {
        dual_value: prob.dual_function(&lambda),
        constraint_values: prob.constraint_kls(&lambda),
        lambda: lambda.clone(),
    });
    AscentRun { p_star: prob.mixture(&lambda), trajectory, status, lambda }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Rng, RngExt};
    use alloc::string::String;
    use alloc::vec;
    use core::f64::consts::LN_2;
    use proptest::prelude::*;

    fn table(prefix: &str, pmf: &[f64]) -> TabularDist {
        let support = (0..pmf.len()).map(|i| format!("{prefix}{i}")).collect();
        TabularDist::new(support, pmf.to_vec()).unwrap()
    }

    fn random_pmf(rng: &mut Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| 0.05 + rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|v| v / total).collect()
    }

    /// Feasible problem whose optimal multipliers are bounded away from zero.
    fn random_problem(rng: &mut Rng) -> DualProblem {
        let m = rng.random_range(1..=3);
        let k = rng.random_range(2..=5);
        let q = table("q", &random_pmf(rng, k));
        let constraints: Vec<TabularDist> =
            (0..m)
                .map(|i| {
                    let k = rng.random_range(1..=5);
                    table(&format!("c{i}_"), &random_pmf(rng, k))
                })
                .collect();
        let s = 0.2 + 0.6 * rng.random::<f64>();
        let shares = random_pmf(rng, m);
        let b_bar = constraints.iter().zip(&shares).map(|(c, w)| c.entropy() - (s * w).ln()).collect();
        DualProblem::new(q, constraints, b_bar).unwrap()
    }

    #[test]
    fn feasibility_examples() {
        let f = feasibility_check(&[0.0, 0.0], &[4f64.ln(), 4f64.ln()]);
        assert!(f.feasible && (f.margin - 0.5).abs() < 1e-15);
        let f = feasibility_check(&[0.0], &[0.0]);
        assert!(!f.feasible && f.margin == 1.0);
        let f = feasibility_check(&[1.0], &[0.0]);
        assert!(!f.feasible && (f.margin - core::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn closed_form_examples() {
        let l = optimal_dual_closed_form(&[0.0], &[LN_2]).unwrap();
        assert!((l[0] - 1.0).abs() < 1e-15);
        let l = optimal_dual_closed_form(&[0.0, 0.0], &[4f64.ln(), 4f64.ln()]).unwrap();
        assert!((l[0] - 0.5).abs() < 1e-15 && (l[1] - 0.5).abs() < 1e-15);
        let l = optimal_dual_closed_form(&[LN_2], &[8f64.ln()]).unwrap();
        assert!((l[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(optimal_dual_closed_form(&[1.0], &[0.0]), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn overlapping_supports_are_rejected() {
        let q = table("a", &[0.5, 0.5]);
        let c = table("a", &[1.0]);
        assert!(matches!(DualProblem::new(q, vec![c], vec![1.0]), Err(Error::SupportsOverlap { constraint: 1, .. })));
    }

    #[test]
    fn dual_function_at_zero_is_base_entropy() {
        let mut r = stream(1, 0);
        let p = random_problem(&mut r);
        let zero = vec![0.0; p.len()];
        assert!((p.dual_function(&zero) - p.q().entropy()).abs() < 1e-15);
    }

    /// Independent primal oracle. With disjoint blocks, any `p` is dominated by
    /// `p = sum_j w_j q^j` (the within-block cross-entropy is minimized by the
    /// block's own distribution), so the primal reduces to choosing block
    /// masses: `min h_0 - log w_0` s.t. `h_i - log w_i <= b_bar_i`. The minimum
    /// is `h_0 - log(1 - sum_i exp(h_i - b_bar_i))`. Random feasible points
    /// confirm nothing does better.
    fn primal_optimum(p: &DualProblem, rng: &mut Rng) -> f64 {
        let h0 = p.q().entropy();
        let floors: Vec<f64> = p.entropies().iter().zip(p.b_bar()).map(|(h, b)| (h - b).exp()).collect();
        let best = h0 - (1.0 - floors.iter().sum::<f64>()).ln();
        let cross_entropy = |target: &TabularDist, model: &TabularDist| -> f64 {
            target.support().iter().zip(target.pmf()).map(|(a, t)| -t * model.prob_of(a).ln()).sum()
        };
        for _ in 0..2000 {
            // Perturb block masses and within-block pmfs, keeping feasibility.
            let extra: Vec<f64> = floors.iter().map(|f| f * (1.0 + 0.5 * rng.random::<f64>())).collect();
            let taken: f64 = extra.iter().sum();
            if taken >= 1.0 {
                continue;
            }
            let mut support: Vec<String> = Vec::new();
            let mut pmf = Vec::new();
            let mut push_block = |d: &TabularDist, w: f64, jitter: f64, rng: &mut Rng| {
                let noisy: Vec<f64> = d.pmf().iter().map(|x| x * (1.0 + jitter * rng.random::<f64>())).collect();
                let z: f64 = noisy.iter().sum();
                for (a, x) in d.support().iter().zip(noisy) {
                    support.push(a.clone());
                    pmf.push(w * x / z);
                }
            };
            push_block(p.q(), 1.0 - taken, 0.2, rng);
            for (c, w) in p.constraints().iter().zip(&extra) {
                push_block(c, *w, 0.0, rng);
            }
            let z: f64 = pmf.iter().sum();
            pmf.iter_mut().for_each(|x| *x /= z);
            let model = TabularDist::new(support, pmf).unwrap();
            let feasible = p.constraints().iter().zip(p.b_bar()).all(|(c, b)| cross_entropy(c, &model) <= b + 1e-12);
            if feasible {
                assert!(cross_entropy(p.q(), &model) >= best - 1e-12);
            }
        }
        best
    }

    #[test]
    fn dual_optimum_equals_primal_optimum() {
        let mut r = stream(2, 0);
        for _ in 0..20 {
            let p = random_problem(&mut r);
            let star = p.closed_form().unwrap();
            let primal = primal_optimum(&p, &mut r);
            assert!((p.dual_function(&star) - primal).abs() < 1e-10, "{} vs {primal}", p.dual_function(&star));
        }
    }

    #[test]
    fn dual_function_is_concave() {
        let mut r = stream(3, 0);
        let p = random_problem(&mut r);
        for _ in 0..100 {
            let a: Vec<f64> = (0..p.len()).map(|_| 5.0 * r.random::<f64>()).collect();
            let b: Vec<f64> = (0..p.len()).map(|_| 5.0 * r.random::<f64>()).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
            assert!(p.dual_function(&mid) >= 0.5 * p.dual_function(&a) + 0.5 * p.dual_function(&b) - 1e-12);
        }
    }

    #[test]
    fn gradient_examples() {
        let mut r = stream(4, 0);
        let p = random_problem(&mut r);
        let star = p.closed_form().unwrap();
        assert!(p.dual_gradient(&star).unwrap().iter().all(|g| g.abs() < 1e-12));
        assert_eq!(p.dual_gradient(&vec![0.0; p.len()]), Err(Error::NonPositiveDual { index: 0 }));

        let single = DualProblem::new(table("q", &[1.0]), vec![table("c", &[1.0])], vec![LN_2]).unwrap();
        assert!(single.dual_gradient(&[1.0]).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = stream(5, 0);
        let p = random_problem(&mut r);
        let h = 1e-6;
        for _ in 0..50 {
            let l: Vec<f64> = (0..p.len()).map(|_| 0.1 + 3.0 * r.random::<f64>()).collect();
            let g = p.dual_gradient(&l).unwrap();
            for i in 0..p.len() {
                let (mut up, mut dn) = (l.clone(), l.clone());
                up[i] += h;
                dn[i] -= h;
                let fd = (p.dual_function(&up) - p.dual_function(&dn)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn kkt_at_closed_form() {
        let mut r = stream(6, 0);
        for _ in 0..25 {
            let p = random_problem(&mut r);
            let star = p.closed_form().unwrap();
            let total = 1.0 + star.iter().sum::<f64>();
            for ((l, h), b) in star.iter().zip(p.entropies()).zip(p.b_bar()) {
                assert!((l / total - (h - b).exp()).abs() < 1e-12);
            }
            for (kl, b) in p.constraint_kls(&star).iter().zip(p.kl_thresholds()) {
                assert!((kl - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ascent_matches_closed_form() {
        let q = table("q", &[0.3, 0.7]);
        let c = vec![table("a", &[0.5, 0.5]), table("b", &[0.2, 0.3, 0.5])];
        let b_bar = vec![c[0].entropy() - (0.25f64).ln(), c[1].entropy() - (0.35f64).ln()];
        let p = DualProblem::new(q, c, b_bar).unwrap();
        let run = exact_dual_ascent(&p, &AscentConfig::default());
        assert_eq!(run.status, AscentStatus::Converged);
        let star = p.closed_form().unwrap();
        for (a, b) in run.lambda.iter().zip(&star) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(run.p_star, p.mixture(&run.lambda));
    }

    #[test]
    fn ascent_diverges_when_infeasible() {
        let c = vec![table("a", &[0.5, 0.5]), table("b", &[1.0])];
        let b_bar = vec![c[0].entropy() - (0.7f64).ln(), c[1].entropy() - (0.6f64).ln()];
        let p = DualProblem::new(table("q", &[1.0]), c, b_bar).unwrap();
        assert!(!p.feasibility().feasible);
        let run = exact_dual_ascent(&p, &AscentConfig { max_iters: 100_000, ..AscentConfig::default() });
        assert_eq!(run.status, AscentStatus::Divergent);
        assert!(run.lambda.iter().cloned().fold(0.0, f64::max) > 1e3);
    }

    #[test]
    fn slack_thresholds_leave_lambda_at_zero() {
        let c = table("a", &[0.5, 0.5]);
        let p = DualProblem::new(table("q", &[1.0]), vec![c], vec![60.0]).unwrap();
        let run = exact_dual_ascent(&p, &AscentConfig::default());
        assert_eq!(run.status, AscentStatus::Converged);
        assert!(run.lambda[0] < 1e-10);
    }

    #[test]
    fn empty_problem_returns_base() {
        let q = table("q", &[0.4, 0.6]);
        let p = DualProblem::new(q.clone(), vec![], vec![]).unwrap();
        let run = exact_dual_ascent(&p, &AscentConfig::default());
        assert_eq!(run.status, AscentStatus::Converged);
        assert!(run.lambda.is_empty());
        assert_eq!(run.p_star, q);
        assert!(p.closed_form().unwrap().is_empty());
    }

    #[test]
    fn tv_examples() {
        let a = table("x", &[0.75, 0.25]);
        let b = table("x", &[0.25, 0.75]);
        assert_eq!(tv_exact(&a, &a), 0.0);
        assert!((tv_exact(&a, &b) - 0.5).abs() < 1e-15);
        assert!((tv_exact(&a, &table("y", &[0.5, 0.5])) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mixture_tv_is_bounded_by_multiplier_gap(
            seed in 0u64..1000,
            la in proptest::collection::vec(0.0f64..10.0, 3),
            lb in proptest::collection::vec(0.0f64..10.0, 3),
        ) {
            let mut r = stream(seed, 7);
            let q = table("q", &random_pmf(&mut r, 4));
            let cs: Vec<TabularDist> = (0..3).map(|i| table(&format!("c{i}"), &random_pmf(&mut r, 3))).collect();
            let gap: f64 = la.iter().zip(&lb).map(|(a, b)| (a - b).abs()).sum();
            let tv = tv_exact(&TabularDist::mixture(&q, &cs, &la), &TabularDist::mixture(&q, &cs, &lb));
            prop_assert!(tv <= gap + 1e-15);
        }
    }
}
