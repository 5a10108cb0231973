//! Discrete-state forward/backward chains and the ELBO identities, checked by
//! exhaustive enumeration of trajectories.

use alloc::format;
use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::{Error, Result};

/// Largest number of trajectories `K^(T+1)` enumerated.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;

const ROW_TOL: f64 = 1e-12;

/// A K-state Markov chain over steps `0..=T`.
///
/// Read as a forward chain, `initial` is `q(x_0)` and `kernels[t-1][a][b]` is
/// `q(x_t = b | x_{t-1} = a)`. Read as a backward chain, `initial` is `p(x_T)`
/// and `kernels[t-1][a][b]` is `p(x_{t-1} = b | x_t = a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularChain {
    initial: Vec<f64>,
    kernels: Vec<Vec<Vec<f64>>>,
}

impl TabularChain {
    pub fn new(initial: Vec<f64>, kernels: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let k = initial.len();
        if k == 0 || kernels.is_empty() {
            return Err(Error::InvalidDistribution("chain needs at least one state and one kernel".into()));
        }
        check_row(&initial, "initial pmf")?;
        for (t, kernel) in kernels.iter().enumerate() {
            if kernel.len() != k {
                return Err(Error::DimensionMismatch { expected: k, found: kernel.len() });
            }
            for row in kernel {
                if row.len() != k {
                    return Err(Error::DimensionMismatch { expected: k, found: row.len() });
                }
                check_row(row, &format!("kernel {} row", t + 1))?;
            }
        }
        Ok(TabularChain { initial, kernels })
    }

    pub fn states(&self) -> usize {
        self.initial.len()
    }

    pub fn horizon(&self) -> usize {
        self.kernels.len()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn kernels(&self) -> &[Vec<Vec<f64>>] {
        &self.kernels
    }

    fn forward_prob(&self, path: &[usize]) -> f64 {
        let mut p = self.initial[path[0]];
        for t in 1..path.len() {
            p *= self.kernels[t - 1][path[t - 1]][path[t]];
        }
        p
    }

    fn backward_prob(&self, path: &[usize]) -> f64 {
        let last = path.len() - 1;
        let mut p = self.initial[path[last]];
        for t in (1..=last).rev() {
            p *= self.kernels[t - 1][path[t]][path[t - 1]];
        }
        p
    }
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("{what} has a negative entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidDistribution(format!("{what} sums to {total}")));
    }
    Ok(())
}

/// Quantities of a forward chain `q` against a backward chain `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainQuantities {
    /// `E_q[log p(x_{0:T}) - log q(x_{1:T} | x_0)]`.
    pub elbo: f64,
    /// `KL(q(x_{0:T}) || p(x_{0:T}))`.
    pub kl_joint: f64,
    /// `E_{q(x_0)}[log p(x_0)]`.
    pub loglik: f64,
    /// `E_{q(x_0)} KL(q(x_{1:T} | x_0) || p(x_{1:T} | x_0))`.
    pub posterior_kl: f64,
    /// `E_{q(x_0)}[log q(x_0)]`.
    pub neg_entropy: f64,
    /// `loglik - elbo - posterior_kl`.
    pub residual_1: f64,
    /// `kl_joint + elbo - E_q[log q(x_0)]`.
    pub residual_2: f64,
}

/// Exhaustive evaluation over all `K^(T+1)` trajectories.
pub fn chain_joint_ops(chain_q: &TabularChain, chain_p: &TabularChain) -> Result<ChainQuantities> {
    let k = chain_q.states();
    let horizon = chain_q.horizon();
    if chain_p.states() != k {
        return Err(Error::DimensionMismatch { expected: k, found: chain_p.states() });
    }
    if chain_p.horizon() != horizon {
        return Err(Error::DimensionMismatch { expected: horizon, found: chain_p.horizon() });
    }
    let needed = (k as u128).checked_pow(horizon as u32 + 1).unwrap_or(u128::MAX);
    if needed > ENUMERATION_BUDGET {
        return Err(Error::EnumerationBudgetExceeded { needed, budget: ENUMERATION_BUDGET });
    }
    let paths = needed as usize;
    let mut path = alloc::vec![0usize; horizon + 1];
    let decode = |mut code: usize, path: &mut [usize]| {
        for slot in path.iter_mut() {
            *slot = code % k;
            code /= k;
        }
    };

    let mut p_x0 = alloc::vec![0.0; k];
    for code in 0..paths {
        decode(code, &mut path);
        p_x0[path[0]] += chain_p.backward_prob(&path);
    }

    let (mut elbo, mut kl_joint, mut posterior_kl) = (0.0, 0.0, 0.0);
    for code in 0..paths {
        decode(code, &mut path);
        let q = chain_q.forward_prob(&path);
        if q == 0.0 {
            continue;
        }
        let p = chain_p.backward_prob(&path);
        let q_cond = q / chain_q.initial[path[0]];
        let p_cond = p / p_x0[path[0]];
        elbo += q * (p.ln() - q_cond.ln());
        kl_joint += q * (q.ln() - p.ln());
        posterior_kl += q * (q_cond.ln() - p_cond.ln());
    }
    let q0 = &chain_q.initial;
    let loglik: f64 = q0.iter().zip(&p_x0).filter(|(q, _)| **q > 0.0).map(|(q, p)| q * p.ln()).sum();
    let neg_entropy: f64 = q0.iter().filter(|q| **q > 0.0).map(|q| q * q.ln()).sum();
    Ok(ChainQuantities {
        elbo,
        kl_joint,
        loglik,
        posterior_kl,
        neg_entropy,
        residual_1: loglik - elbo - posterior_kl,
        residual_2: kl_joint + elbo - neg_entropy,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::{stream, Rng, RngExt};
    use alloc::vec;

    fn random_row(rng: &mut Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| 0.05 + rng.random::<f64>()).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / z).collect()
    }

    pub(crate) fn random_chain(rng: &mut Rng, k: usize, horizon: usize) -> TabularChain {
        let initial = random_row(rng, k);
        let kernels = (0..horizon).map(|_| (0..k).map(|_| random_row(rng, k)).collect()).collect();
        TabularChain::new(initial, kernels).unwrap()
    }

    #[test]
    fn identical_chains() {
        // A forward chain and the backward chain of its own time reversal.
        let mut r = stream(1, 0);
        let q = random_chain(&mut r, 3, 2);
        let p = reverse(&q);
        let out = chain_joint_ops(&q, &p).unwrap();
        assert!(out.kl_joint.abs() < 1e-12);
        assert!(out.posterior_kl.abs() < 1e-12);
        assert!((out.elbo - out.loglik).abs() < 1e-12);
    }

    /// Backward chain reproducing the joint of forward chain `q`.
    fn reverse(q: &TabularChain) -> TabularChain {
        let k = q.states();
        let mut marginals = vec![q.initial().to_vec()];
        for kernel in q.kernels() {
            let prev = marginals.last().unwrap();
            let next = (0..k).map(|b| (0..k).map(|a| prev[a] * kernel[a][b]).sum()).collect();
            marginals.push(next);
        }
        let kernels = (0..q.horizon())
            .map(|t| {
                (0..k)
                    .map(|b| {
                        let row: Vec<f64> = (0..k).map(|a| marginals[t][a] * q.kernels()[t][a][b]).collect();
                        let z: f64 = row.iter().sum();
                        row.into_iter().map(|v| v / z).collect()
                    })
                    .collect()
            })
            .collect();
        let last = marginals.last().unwrap().clone();
        let z: f64 = last.iter().sum();
        TabularChain::new(last.into_iter().map(|v| v / z).collect(), kernels).unwrap()
    }

    #[test]
    fn uniform_two_state_loglik() {
        let half = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let c = TabularChain::new(vec![0.5, 0.5], vec![half]).unwrap();
        let out = chain_joint_ops(&c, &c).unwrap();
        assert!((out.loglik + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn identities_hold_on_random_chains() {
        let mut r = stream(2, 0);
        for _ in 0..10 {
            let q = random_chain(&mut r, 3, 3);
            let p = random_chain(&mut r, 3, 3);
            let out = chain_joint_ops(&q, &p).unwrap();
            assert!(out.residual_1.abs() < 1e-12, "{}", out.residual_1);
            assert!(out.residual_2.abs() < 1e-12, "{}", out.residual_2);
        }
    }

    #[test]
    fn elbo_maximizer_minimizes_joint_kl() {
        // One-parameter family: backward chains interpolating between a random
        // chain and the exact reversal of q.
        let mut r = stream(3, 0);
        let q = random_chain(&mut r, 3, 2);
        let target = reverse(&q);
        let other = random_chain(&mut r, 3, 2);
        let mix = |a: f64| {
            let blend = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| a * u + (1.0 - a) * v).collect::<Vec<_>>();
            let kernels = target
                .kernels()
                .iter()
                .zip(other.kernels())
                .map(|(kt, ko)| kt.iter().zip(ko).map(|(rt, ro)| blend(rt, ro)).collect())
                .collect();
            TabularChain::new(blend(target.initial(), other.initial()), kernels).unwrap()
        };
        let grid: Vec<ChainQuantities> = (0..=50).map(|i| chain_joint_ops(&q, &mix(i as f64 / 50.0)).unwrap()).collect();
        let argmax_elbo = (0..grid.len()).max_by(|&a, &b| grid[a].elbo.total_cmp(&grid[b].elbo)).unwrap();
        let argmin_kl = (0..grid.len()).min_by(|&a, &b| grid[a].kl_joint.total_cmp(&grid[b].kl_joint)).unwrap();
        assert_eq!(argmax_elbo, argmin_kl);
    }

    #[test]
    fn budget_and_shape_errors() {
        let mut r = stream(4, 0);
        let big = random_chain(&mut r, 10, 6);
        assert!(matches!(chain_joint_ops(&big, &big), Err(Error::EnumerationBudgetExceeded { .. })));
        let a = random_chain(&mut r, 2, 2);
        let b = random_chain(&mut r, 3, 2);
        assert!(chain_joint_ops(&a, &b).is_err());
        assert!(TabularChain::new(vec![0.5, 0.6], vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]]).is_err());
    }
}
