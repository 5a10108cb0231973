//! Projected dual updates shared by the neural trainer and the exact oracle.

use alloc::vec::Vec;

/// `lambda_i <- max(0, lambda_i + eta (estimate_i - threshold_i))`.
pub fn dual_step(lambda: &[f64], estimates: &[f64], thresholds: &[f64], eta: f64) -> Vec<f64> {
    lambda
        .iter()
        .zip(estimates)
        .zip(thresholds)
        .map(|((l, e), b)| (l + eta * (e - b)).max(0.0))
        .collect()
}

/// Resilient variant with zero thresholds:
/// `lambda_i <- max(0, lambda_i + eta (estimate_i - 2 gamma lambda_i))`.
pub fn resilient_dual_step(lambda: &[f64], estimates: &[f64], eta: f64, gamma: f64) -> Vec<f64> {
    lambda
        .iter()
        .zip(estimates)
        .map(|(l, e)| (l + eta * (e - 2.0 * gamma * l)).max(0.0))
        .collect()
}

/// One recorded dual iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DualRecord {
    /// 1-based dual iteration.
    pub h: usize,
    pub lambda: Vec<f64>,
    pub constraint_estimates: Vec<f64>,
    pub objective_estimate: f64,
    /// Estimated dual value at `lambda`, thresholds included.
    pub lagrangian: f64,
}

/// Dual vector, its history and the best iterate seen so far.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub history: Vec<DualRecord>,
    /// Index into `history` of the iterate with the largest dual estimate.
    pub best: Option<usize>,
}

impl DualState {
    pub fn new(constraints: usize) -> Self {
        DualState { lambda: alloc::vec![0.0; constraints], history: Vec::new(), best: None }
    }

    /// Append a record and update the running best.
    pub fn record(&mut self, record: DualRecord) {
        let better = match self.best {
            Some(i) => record.lagrangian > self.history[i].lagrangian,
            None => true,
        };
        self.history.push(record);
        if better {
            self.best = Some(self.history.len() - 1);
        }
    }

    pub fn best_record(&self) -> Option<&DualRecord> {
        self.best.map(|i| &self.history[i])
    }

    /// `lambda_best`, or the current lambda when nothing has been recorded.
    pub fn lambda_best(&self) -> Vec<f64> {
        self.best_record().map_or_else(|| self.lambda.clone(), |r| r.lambda.clone())
    }
}
