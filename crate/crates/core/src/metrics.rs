//! Per-class frequency diagnostics for generated samples.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::distributions::{GaussianMixture, TabularDist};
use crate::{Error, Result};

/// Argmax posterior component per sample; ties go to the lowest index.
pub fn classify_by_responsibility(samples: &[Vec<f64>], reference: &GaussianMixture) -> Vec<usize> {
    samples
        .iter()
        .map(|x| {
            let logs = reference.component_log_joint(x);
            let mut best = 0;
            for (k, l) in logs.iter().enumerate().skip(1) {
                if *l > logs[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyReport {
    pub labels: Vec<String>,
    pub counts: Vec<usize>,
    pub frequencies: Vec<f64>,
    pub reference_frequencies: Vec<f64>,
    pub max_abs_gap: f64,
}

impl FrequencyReport {
    /// Tally class indices in `0..labels.len()` against a target pmf.
    pub fn from_classes(labels: Vec<String>, classes: &[usize], target: &[f64]) -> Result<Self> {
        if target.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: labels.len(), found: target.len() });
        }
        let total: f64 = target.iter().sum();
        if target.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("target frequencies sum to {total}")));
        }
        let mut counts = alloc::vec![0usize; labels.len()];
        for &c in classes {
            counts[c] += 1;
        }
        let n = classes.len();
        let frequencies: Vec<f64> =
            counts.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect();
        let max_abs_gap = frequencies.iter().zip(target).map(|(f, t)| (f - t).abs()).fold(0.0, f64::max);
        Ok(FrequencyReport { labels, counts, frequencies, reference_frequencies: target.to_vec(), max_abs_gap })
    }

    /// `frequency - target` per label.
    pub fn gaps(&self) -> Vec<f64> {
        self.frequencies.iter().zip(&self.reference_frequencies).map(|(f, t)| f - t).collect()
    }

    pub fn frequency_of(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.frequencies[i])
    }
}

/// Distinct component labels of `reference` in first-seen order, and the
/// class of each component.
pub fn label_classes(reference: &GaussianMixture) -> (Vec<String>, Vec<usize>) {
    let mut labels: Vec<String> = Vec::new();
    let classes = (0..reference.components())
        .map(|k| {
            let l = reference.label(k);
            match labels.iter().position(|x| *x == l) {
                Some(i) => i,
                None => {
                    labels.push(l);
                    labels.len() - 1
                }
            }
        })
        .collect();
    (labels, classes)
}

/// Classify samples against `reference` and compare label frequencies with
/// `target` (one entry per distinct label, see [`label_classes`]).
pub fn frequency_report(samples: &[Vec<f64>], reference: &GaussianMixture, target: &[f64]) -> Result<FrequencyReport> {
    let (labels, component_class) = label_classes(reference);
    let classes: Vec<usize> =
        classify_by_responsibility(samples, reference).into_iter().map(|k| component_class[k]).collect();
    FrequencyReport::from_classes(labels, &classes, target)
}

pub fn uniform_target(classes: usize) -> Vec<f64> {
    alloc::vec![1.0 / classes as f64; classes]
}

/// Targets from `q_mix(lambda)` against empirical frequencies, per label of
/// the concatenated mixture. Components sharing a label (the same class seen
/// through `q` and through a constraint) are pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureMatch {
    pub labels: Vec<String>,
    pub targets: Vec<f64>,
    pub empirical: Vec<f64>,
    pub gaps: Vec<f64>,
    pub max_abs_gap: f64,
}

impl From<FrequencyReport> for MixtureMatch {
    fn from(r: FrequencyReport) -> Self {
        MixtureMatch {
            gaps: r.gaps(),
            labels: r.labels,
            targets: r.reference_frequencies,
            empirical: r.frequencies,
            max_abs_gap: r.max_abs_gap,
        }
    }
}

/// The `q_mix(lambda)` mixture with components of `q` then of each constraint.
pub fn mixture_of(lambda: &[f64], q: &GaussianMixture, constraints: &[&GaussianMixture]) -> Result<GaussianMixture> {
    if lambda.len() != constraints.len() {
        return Err(Error::DimensionMismatch { expected: constraints.len(), found: lambda.len() });
    }
    let total = 1.0 + lambda.iter().sum::<f64>();
    let outer: Vec<f64> = core::iter::once(1.0).chain(lambda.iter().copied()).map(|w| w / total).collect();
    let parts: Vec<&GaussianMixture> = core::iter::once(q).chain(constraints.iter().copied()).collect();
    GaussianMixture::concat(&parts, &outer)
}

pub fn mixture_match_report(
    samples: &[Vec<f64>],
    lambda: &[f64],
    q: &GaussianMixture,
    constraints: &[&GaussianMixture],
) -> Result<MixtureMatch> {
    let mix = mixture_of(lambda, q, constraints)?;
    let (labels, component_class) = label_classes(&mix);
    let mut targets = alloc::vec![0.0; labels.len()];
    for (k, w) in mix.weights().iter().enumerate() {
        targets[component_class[k]] += w;
    }
    let classes: Vec<usize> =
        classify_by_responsibility(samples, &mix).into_iter().map(|k| component_class[k]).collect();
    Ok(FrequencyReport::from_classes(labels, &classes, &targets)?.into())
}

/// Tabular counterpart: classification is exact atom lookup.
pub fn mixture_match_tabular(samples: &[String], lambda: &[f64], q: &TabularDist, constraints: &[TabularDist]) -> Result<MixtureMatch> {
    let mix = TabularDist::mixture(q, constraints, lambda);
    let mut classes = Vec::with_capacity(samples.len());
    for s in samples {
        match mix.support().iter().position(|a| a == s) {
            Some(i) => classes.push(i),
            None => return Err(Error::InvalidDistribution(format!("sample '{s}' is outside the mixture support"))),
        }
    }
    Ok(FrequencyReport::from_classes(mix.support().to_vec(), &classes, mix.pmf())?.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Density;
    use crate::rng;
    use alloc::vec;

    fn labeled(weights: Vec<f64>, means: Vec<Vec<f64>>, names: &[&str]) -> GaussianMixture {
        let n = weights.len();
        GaussianMixture::new(weights, means, vec![0.25; n])
            .unwrap()
            .with_labels(names.iter().map(|s| String::from(*s)).collect())
            .unwrap()
    }

    #[test]
    fn classification_rules() {
        let g = labeled(vec![0.5, 0.5], vec![vec![-1.0, 0.0], vec![1.0, 0.0]], &["a", "b"]);
        assert_eq!(classify_by_responsibility(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 3.0]], &g), vec![1, 0, 0]);
        let samples = vec![vec![0.3, 0.1], vec![-2.0, 0.0], vec![0.9, -1.0]];
        let rev: Vec<Vec<f64>> = samples.iter().rev().cloned().collect();
        let mut back = classify_by_responsibility(&rev, &g);
        back.reverse();
        assert_eq!(back, classify_by_responsibility(&samples, &g));
    }

    #[test]
    fn self_classification_is_calibrated() {
        let g = labeled(vec![0.7, 0.2, 0.1], vec![vec![-4.0, 0.0], vec![4.0, 0.0], vec![0.0, 4.0]], &["a", "b", "c"]);
        let n = 10_000;
        let samples = g.sample(n, &mut rng::stream(3, 0));
        let r = frequency_report(&samples, &g, g.weights()).unwrap();
        assert_eq!(r.counts.iter().sum::<usize>(), n);
        assert!((r.frequencies.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (f, w) in r.frequencies.iter().zip(g.weights()) {
            let sd = (w * (1.0 - w) / n as f64).sqrt();
            assert!((f - w).abs() < 3.0 * sd, "{f} vs {w}");
        }
    }

    #[test]
    fn report_edges() {
        let g = labeled(vec![0.5, 0.5], vec![vec![-3.0], vec![3.0]], &["left", "right"]);
        let r = frequency_report(&[vec![-3.1], vec![-2.9]], &g, &uniform_target(2)).unwrap();
        assert_eq!(r.frequencies, vec![1.0, 0.0]);
        assert_eq!(r.counts, vec![2, 0]);
        assert_eq!(r.max_abs_gap, 0.5);
        assert_eq!(r.frequency_of("right"), Some(0.0));
        assert!(frequency_report(&[], &g, &[0.3, 0.3]).is_err());
        let l1: f64 = r.gaps().iter().map(|g| g.abs()).sum();
        assert!(r.max_abs_gap >= 0.5 * l1 / r.labels.len() as f64);
    }

    #[test]
    fn shared_labels_are_pooled() {
        let g = labeled(vec![0.4, 0.4, 0.2], vec![vec![-5.0], vec![0.0], vec![5.0]], &["old", "old", "new"]);
        let r = frequency_report(&[vec![-5.0], vec![0.0], vec![5.0], vec![0.1]], &g, &[0.8, 0.2]).unwrap();
        assert_eq!(r.labels, vec![String::from("old"), String::from("new")]);
        assert_eq!(r.counts, vec![3, 1]);
    }

    #[test]
    fn mixture_targets() {
        let q = labeled(vec![0.9, 0.1], vec![vec![-2.0, 0.0], vec![2.0, 0.0]], &["major", "minor"]);
        let c = labeled(vec![1.0], vec![vec![2.0, 0.0]], &["minor"]);
        let m = mixture_match_report(&[], &[0.0], &q, &[&c]).unwrap();
        assert_eq!(m.targets, q.weights());
        let m = mixture_match_report(&[vec![2.0, 0.1], vec![-2.0, 0.0]], &[1.5], &q, &[&c]).unwrap();
        assert!((m.targets[1] - 1.6 / 2.5).abs() < 1e-15);
        assert_eq!(m.empirical, vec![0.5, 0.5]);
        let q1 = labeled(vec![1.0], vec![vec![-2.0, 0.0]], &["major"]);
        let m = mixture_match_report(&[], &[1.0], &q1, &[&c]).unwrap();
        assert_eq!(m.targets, vec![0.5, 0.5]);
    }

    #[test]
    fn tabular_mixture_sampling_matches_targets() {
        let q = TabularDist::new(vec!["a".into(), "b".into()], vec![0.25, 0.75]).unwrap();
        let c = TabularDist::new(vec!["x".into(), "y".into()], vec![0.6, 0.4]).unwrap();
        let lambda = [0.8];
        let mix = TabularDist::mixture(&q, &[c.clone()], &lambda);
        let n = 10_000;
        let samples = mix.sample(n, &mut rng::stream(8, 0));
        let m = mixture_match_tabular(&samples, &lambda, &q, &[c]).unwrap();
        for (e, t) in m.empirical.iter().zip(&m.targets) {
            let sd = (t * (1.0 - t) / n as f64).sqrt();
            assert!((e - t).abs() < 3.0 * sd);
        }
        assert!((m.targets[2] - 0.8 * 0.6 / 1.8).abs() < 1e-15);
    }
}
