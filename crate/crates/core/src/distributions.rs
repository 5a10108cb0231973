//! Synthetic data distributions: isotropic Gaussian mixtures, finite tabular
//! distributions and their `(q + sum_i lambda_i q^i) / (1 + sum lambda)` mixtures.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{E, PI};
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

const WEIGHT_TOL: f64 = 1e-12;

/// Sampling and exact log-density over a point type.
pub trait Density {
    type Point;

    fn draw(&self, rng: &mut Rng) -> Self::Point;

    /// Natural-log density (or pmf); `-inf` outside the support.
    fn log_density(&self, x: &Self::Point) -> f64;

    fn sample(&self, n: usize, rng: &mut Rng) -> Vec<Self::Point> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_pmf(weights: &[f64], what: &str) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidDistribution(format!("{what} is empty")));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidDistribution(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::InvalidDistribution(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Mixture of isotropic Gaussians `sum_k w_k N(mu_k, sigma_k^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    labels: Option<Vec<String>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        check_pmf(&weights, "mixture weights")?;
        if means.len() != weights.len() || variances.len() != weights.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} weights, {} means and {} variances",
                weights.len(),
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidDistribution("zero-dimensional mixture".into()));
        }
        if let Some(m) = means.iter().find(|m| m.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: m.len() });
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidDistribution("component variances must be positive".into()));
        }
        Ok(GaussianMixture { dim, weights, means, variances, labels: None })
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(alloc::vec![1.0], alloc::vec![mean], alloc::vec![variance])
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.weights.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} labels for {} components",
                labels.len(),
                self.weights.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Label of component `k`, falling back to its index.
    pub fn label(&self, k: usize) -> String {
        match &self.labels {
            Some(l) => l[k].clone(),
            None => format!("{k}"),
        }
    }

    /// Draw a point together with the index of the component it came from.
    pub fn draw_labeled(&self, rng: &mut Rng) -> (Vec<f64>, usize) {
        let k = rng::categorical(rng, &self.weights);
        let sd = self.variances[k].sqrt();
        let x = self.means[k].iter().map(|m| m + sd * rng::standard_normal(rng)).collect();
        (x, k)
    }

    pub fn draw_into(&self, rng: &mut Rng, out: &mut [f64]) {
        let k = rng::categorical(rng, &self.weights);
        let sd = self.variances[k].sqrt();
        for (o, m) in out.iter_mut().zip(&self.means[k]) {
            *o = m + sd * rng::standard_normal(rng);
        }
    }

    /// Per-component `log w_k + log N(x; mu_k, sigma_k^2 I)`.
    pub fn component_log_joint(&self, x: &[f64]) -> Vec<f64> {
        (0..self.components())
            .map(|k| self.weights[k].ln() + gaussian_log_density(x, &self.means[k], self.variances[k]))
            .collect()
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let logs = self.component_log_joint(x);
        let norm = log_sum_exp(logs.iter().copied());
        logs.iter().map(|l| (l - norm).exp()).collect()
    }

    /// `grad log p(x)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.dim];
        self.score_into(x, &mut out);
        out
    }

    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let resp = self.responsibilities(x);
        for (k, r) in resp.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            let inv = r / self.variances[k];
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(&self.means[k]) {
                *o -= inv * (xi - mi);
            }
        }
    }

    /// Marginal of the forward process at step `t` started from this mixture.
    pub fn diffused(&self, sched: &NoiseSchedule, t: usize) -> GaussianMixture {
        let ab = sched.alpha_bar(t);
        let scale = ab.sqrt();
        GaussianMixture {
            dim: self.dim,
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().map(|v| scale * v).collect()).collect(),
            variances: self.variances.iter().map(|s2| ab * s2 + 1.0 - ab).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Smallest distance between two component means.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.components() {
            for b in a + 1..self.components() {
                best = best.min(euclidean(&self.means[a], &self.means[b]));
            }
        }
        best
    }

    /// Entropy by disjoint-support decomposition. Requires every pair of
    /// means to be at least `6 max sigma` apart.
    pub fn entropy(&self) -> Result<f64> {
        let max_sd = self.variances.iter().fold(0.0f64, |a, v| a.max(v.sqrt()));
        let required = 6.0 * max_sd;
        let separation = self.min_separation();
        if separation < required {
            return Err(Error::OverlappingComponents { separation, required });
        }
        let d = self.dim as f64;
        let mut h = 0.0;
        for (w, s2) in self.weights.iter().zip(&self.variances) {
            if *w > 0.0 {
                h += w * (0.5 * d * (2.0 * PI * E * s2).ln() - w.ln());
            }
        }
        Ok(h)
    }

    /// Mixture of mixtures with outer weights `outer` (need not be normalized
    /// beyond summing to one). Components are concatenated in order.
    pub fn concat(parts: &[&GaussianMixture], outer: &[f64]) -> Result<GaussianMixture> {
        if parts.is_empty() || parts.len() != outer.len() {
            return Err(Error::InvalidDistribution("mixture parts and weights disagree".into()));
        }
        let dim = parts[0].dim;
        let (mut weights, mut means, mut variances, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (p, w) in parts.iter().zip(outer) {
            if p.dim != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: p.dim });
            }
            for k in 0..p.components() {
                weights.push(w * p.weights[k]);
                means.push(p.means[k].clone());
                variances.push(p.variances[k]);
                labels.push(p.label(k));
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        GaussianMixture::new(weights, means, variances)?.with_labels(labels)
    }
}

impl Density for GaussianMixture {
    type Point = Vec<f64>;

    fn draw(&self, rng: &mut Rng) -> Vec<f64> {
        self.draw_labeled(rng).0
    }

    fn log_density(&self, x: &Vec<f64>) -> f64 {
        if x.len() != self.dim {
            return f64::NEG_INFINITY;
        }
        log_sum_exp(self.component_log_joint(x))
    }
}

pub fn gaussian_log_density(x: &[f64], mean: &[f64], variance: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (2.0 * PI * variance).ln() - 0.5 * sq / variance
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Finite distribution over named atoms. Points are atom names.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDist {
    support: Vec<String>,
    pmf: Vec<f64>,
}

impl TabularDist {
    pub fn new(support: Vec<String>, pmf: Vec<f64>) -> Result<Self> {
        if support.len() != pmf.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} atoms but {} probabilities",
                support.len(),
                pmf.len()
            )));
        }
        check_pmf(&pmf, "pmf")?;
        let mut seen = BTreeMap::new();
        for atom in &support {
            if seen.insert(atom.as_str(), ()).is_some() {
                return Err(Error::InvalidDistribution(format!("atom `{atom}` is repeated")));
            }
        }
        Ok(TabularDist { support, pmf })
    }

    pub fn uniform(support: Vec<String>) -> Result<Self> {
        let k = support.len();
        Self::new(support, alloc::vec![1.0 / k as f64; k])
    }

    pub fn support(&self) -> &[String] {
        &self.support
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn len(&self) -> usize {
        self.pmf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmf.is_empty()
    }

    pub fn draw_index(&self, rng: &mut Rng) -> usize {
        rng::categorical(rng, &self.pmf)
    }

    pub fn prob_of(&self, atom: &str) -> f64 {
        self.support.iter().position(|a| a == atom).map_or(0.0, |i| self.pmf[i])
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.pmf.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// Exact `KL(self || other)` over the union of supports.
    pub fn kl_to(&self, other: &TabularDist) -> f64 {
        let mut kl = 0.0;
        for (atom, &p) in self.support.iter().zip(&self.pmf) {
            if p == 0.0 {
                continue;
            }
            let q = other.prob_of(atom);
            if q == 0.0 {
                return f64::INFINITY;
            }
            kl += p * (p / q).ln();
        }
        kl
    }

    /// `(base + sum_i lambda_i c_i) / (1 + sum lambda)` as a new table over the
    /// union of atoms, in first-seen order.
    pub fn mixture(base: &TabularDist, constraints: &[TabularDist], lambda: &[f64]) -> TabularDist {
        let total = 1.0 + lambda.iter().sum::<f64>();
        let mut support: Vec<String> = Vec::new();
        let mut pmf: Vec<f64> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let parts = core::iter::once((base, 1.0)).chain(constraints.iter().zip(lambda.iter().copied()));
        for (dist, w) in parts {
            for (atom, p) in dist.support.iter().zip(&dist.pmf) {
                let slot = *index.entry(atom.clone()).or_insert_with(|| {
                    support.push(atom.clone());
                    pmf.push(0.0);
                    support.len() - 1
                });
                pmf[slot] += w * p / total;
            }
        }
        TabularDist { support, pmf }
    }
}

impl Density for TabularDist {
    type Point = String;

    fn draw(&self, rng: &mut Rng) -> String {
        self.support[self.draw_index(rng)].clone()
    }

    fn log_density(&self, x: &String) -> f64 {
        self.prob_of(x).ln()
    }
}

/// `q_mix = (q + sum_i lambda_i q^i) / (1 + sum lambda)`.
#[derive(Debug, Clone)]
pub struct MixtureSpec<'a, D> {
    base: &'a D,
    constraints: Vec<&'a D>,
    lambda: Vec<f64>,
}

impl<'a, D> MixtureSpec<'a, D> {
    pub fn new(base: &'a D, constraints: Vec<&'a D>, lambda: Vec<f64>) -> Result<Self> {
        if constraints.len() != lambda.len() {
            return Err(Error::DimensionMismatch { expected: constraints.len(), found: lambda.len() });
        }
        if lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidDistribution("mixture multipliers must be finite and nonnegative".into()));
        }
        Ok(MixtureSpec { base, constraints, lambda })
    }

    /// `(1, lambda_1, ..., lambda_m) / (1 + sum lambda)`.
    pub fn weights(&self) -> Vec<f64> {
        let total = 1.0 + self.lambda.iter().sum::<f64>();
        core::iter::once(1.0).chain(self.lambda.iter().copied()).map(|w| w / total).collect()
    }

    fn part(&self, i: usize) -> &'a D {
        if i == 0 {
            self.base
        } else {
            self.constraints[i - 1]
        }
    }
}

impl<D: Density> Density for MixtureSpec<'_, D> {
    type Point = D::Point;

    fn draw(&self, rng: &mut Rng) -> D::Point {
        let i = rng::categorical(rng, &self.weights());
        self.part(i).draw(rng)
    }

    fn log_density(&self, x: &D::Point) -> f64 {
        let w = self.weights();
        log_sum_exp((0..w.len()).map(|i| w[i].ln() + self.part(i).log_density(x)))
    }
}

/// Closed-form `KL(N(mu_a, var_a I) || N(mu_b, var_b I))` in `d` dimensions.
pub fn gaussian_kl(mu_a: &[f64], var_a: f64, mu_b: &[f64], var_b: f64, d: usize) -> f64 {
    let d = d as f64;
    let sq: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * (d * (var_b / var_a).ln() - d + d * var_a / var_b + sq / var_b)
}

/// Monte Carlo estimate of `KL(from || to)` with its standard error.
pub fn kl_monte_carlo<P, A, B>(from: &A, to: &B, n: usize, rng: &mut Rng) -> Result<(f64, f64)>
where
    A: Density<Point = P>,
    B: Density<Point = P>,
{
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..n {
        let x = from.draw(rng);
        let r = from.log_density(&x) - to.log_density(&x);
        if r == f64::INFINITY || r.is_nan() {
            return Err(Error::InfiniteKl);
        }
        sum += r;
        sum2 += r * r;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 { (sum2 - nf * mean * mean).max(0.0) / (nf - 1.0) } else { 0.0 };
    Ok((mean, (var / nf).sqrt()))
}

/// Histogram estimate of total variation between two point clouds, using
/// `bins` equal-width bins per axis over the pooled range.
pub fn tv_binned(a: &[Vec<f64>], b: &[Vec<f64>], bins: usize) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.is_empty() && b.is_empty() { 0.0 } else { 1.0 };
    }
    let dim = a[0].len();
    let mut lo = alloc::vec![f64::INFINITY; dim];
    let mut hi = alloc::vec![f64::NEG_INFINITY; dim];
    for x in a.iter().chain(b) {
        for j in 0..dim {
            lo[j] = lo[j].min(x[j]);
            hi[j] = hi[j].max(x[j]);
        }
    }
    let cell = |x: &Vec<f64>| -> u64 {
        let mut id = 0u64;
        for j in 0..dim {
            let width = hi[j] - lo[j];
            let k = if width > 0.0 { (((x[j] - lo[j]) / width) * bins as f64) as usize } else { 0 };
            id = id * bins as u64 + k.min(bins - 1) as u64;
        }
        id
    };
    let mut counts: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for x in a {
        counts.entry(cell(x)).or_default().0 += 1.0;
    }
    for x in b {
        counts.entry(cell(x)).or_default().1 += 1.0;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    0.5 * counts.values().map(|(ca, cb)| (ca / na - cb / nb).abs()).sum::<f64>()
}
