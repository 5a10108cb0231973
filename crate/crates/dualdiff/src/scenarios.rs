//! Scenario drivers. Each writes its artifacts into a temporary sibling of
//! the output directory and renames it into place only on success.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dualdiff_core::distributions::{tv_binned, Density, GaussianMixture};
use dualdiff_core::dual::DualState;
use dualdiff_core::metrics::{
    frequency_report, label_classes, mixture_match_report, mixture_of, uniform_target, FrequencyReport, MixtureMatch,
};
use dualdiff_core::net::ScoreNet;
use dualdiff_core::oracle::{exact_dual_ascent, AscentRun, AscentStatus, DualProblem, Feasibility};
use dualdiff_core::rng::{self, streams};
use dualdiff_core::sampler::{generate, Capture};
use dualdiff_core::schedule::NoiseSchedule;
use dualdiff_core::trainer::{finetune_constraint_estimate, train, ConstraintSpec, TrainConfig};
use log::info;

use crate::config::{RunConfig, Scenario, TargetSpec};
use crate::error::{CliError, Result};
use crate::io;

/// Fresh latents used to estimate the fine-tune gap after training.
const GAP_EVAL_BATCH: usize = 4096;

/// Run `body` against a fresh temporary directory next to `out`, then move
/// it into place, replacing any previous contents.
pub fn with_output_dir<T>(out: &Path, body: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(CliError::io(&parent))?;
    let tmp = tempfile::Builder::new().prefix(".dualdiff-").tempdir_in(&parent).map_err(CliError::io(&parent))?;
    let value = body(tmp.path())?;
    if out.exists() {
        fs::remove_dir_all(out).map_err(CliError::io(out))?;
    }
    let staged = tmp.keep();
    fs::rename(&staged, out).map_err(CliError::io(out))?;
    Ok(value)
}

pub fn resolve_target(spec: &TargetSpec, reference: &GaussianMixture) -> Result<Vec<f64>> {
    let (labels, classes) = label_classes(reference);
    match spec {
        TargetSpec::Named(n) if n == "uniform" => Ok(uniform_target(labels.len())),
        TargetSpec::Named(n) if n == "reference" => {
            let mut w = vec![0.0; labels.len()];
            for (k, p) in reference.weights().iter().enumerate() {
                w[classes[k]] += p;
            }
            Ok(w)
        }
        TargetSpec::Named(n) => Err(CliError::config(format!("eval.target: unknown target '{n}'"))),
        TargetSpec::Weights(w) if w.len() == labels.len() => Ok(w.clone()),
        TargetSpec::Weights(w) => Err(CliError::config(format!(
            "eval.target: {} weights for {} labels ({})",
            w.len(),
            labels.len(),
            labels.join(", ")
        ))),
    }
}

/// A trained (or loaded) model with its evaluation.
#[derive(Debug, Clone)]
pub struct ModelReport {
    pub net: ScoreNet,
    pub dual: Option<DualState>,
    pub samples: Vec<Vec<f64>>,
    pub frequency: FrequencyReport,
    pub mixture: Option<MixtureMatch>,
    /// Binned TV to the distribution the model is meant to sample.
    pub tv_binned: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FairnessOutcome {
    pub constrained: ModelReport,
    pub unconstrained: Option<ModelReport>,
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub pretrained: ModelReport,
    pub constrained: ModelReport,
    pub unconstrained: Option<ModelReport>,
    pub gap_constrained: f64,
    pub gap_unconstrained: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub feasibility: Feasibility,
    pub closed_form: Option<Vec<f64>>,
    pub run: AscentRun,
    pub matched: bool,
    pub divergent: bool,
    pub kkt: Kkt,
}

/// Optimality residuals at the final ascent iterate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Kkt {
    /// `max_i max(KL_i - b_i, 0)`.
    pub primal: f64,
    /// `max_i |lambda_i (KL_i - b_i)|`.
    pub complementary: f64,
    /// `max_i |dg/dlambda_i|`.
    pub stationarity: f64,
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Fairness(FairnessOutcome),
    Finetune(FinetuneOutcome),
    Oracle(OracleOutcome),
}

pub fn run(config: &RunConfig, out: &Path) -> Result<Outcome> {
    config.validate()?;
    with_output_dir(out, |dir| match config.scenario {
        Scenario::Fairness | Scenario::Unconstrained => run_fairness(config, dir).map(Outcome::Fairness),
        Scenario::Finetune => run_finetune(config, dir).map(Outcome::Finetune),
        Scenario::Oracle => run_oracle(config, dir).map(Outcome::Oracle),
    })
}

struct Eval<'a> {
    sched: &'a NoiseSchedule,
    config: &'a RunConfig,
    reference: &'a GaussianMixture,
    target: Vec<f64>,
}

impl Eval<'_> {
    /// Sample, classify and write `samples.csv` and `frequency.csv` into `dir`.
    fn model(&self, dir: &Path, net: ScoreNet, dual: Option<DualState>, intended: Option<&GaussianMixture>) -> Result<ModelReport> {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let start = Instant::now();
        let run = generate(&net, self.sched, self.config.sample.n, self.config.seed, Capture::FinalOnly)?;
        info!("{}: sampled {} points in {:.1?}", dir.display(), run.outputs.len(), start.elapsed());
        let frequency = frequency_report(&run.outputs, self.reference, &self.target)?;
        let tv = match intended {
            Some(dist) if !run.outputs.is_empty() => {
                let mut r = rng::stream(self.config.seed, streams::EVAL);
                let reference = dist.sample(self.config.eval.reference_n, &mut r);
                Some(tv_binned(&run.outputs, &reference, self.config.eval.bins))
            }
            _ => None,
        };
        io::write_samples(&dir.join("samples.csv"), net.input_dim(), &run.outputs)?;
        io::write_frequency_report(&dir.join("frequency.csv"), &frequency)?;
        Ok(ModelReport { net, dual, samples: run.outputs, frequency, mixture: None, tv_binned: tv })
    }
}

fn train_logged(
    label: &str,
    config: &TrainConfig,
    q: &GaussianMixture,
    specs: &[ConstraintSpec],
    init: Option<ScoreNet>,
    sched: &NoiseSchedule,
) -> Result<(ScoreNet, DualState)> {
    let start = Instant::now();
    let out = train(config, q, specs, init, sched)?;
    info!(
        "{label}: {} x {} steps in {:.1?}, lambda = {:?}",
        config.dual_iters,
        config.primal_steps,
        start.elapsed(),
        out.dual.lambda
    );
    Ok((out.net, out.dual))
}

fn write_model(dir: &Path, report: &ModelReport, sched: &NoiseSchedule, m: usize) -> Result<()> {
    io::save_checkpoint(&dir.join("checkpoint.txt"), &report.net, sched)?;
    if let Some(dual) = &report.dual {
        io::write_dual_history(&dir.join("dual_history.csv"), dual, m)?;
    }
    if let Some(mm) = &report.mixture {
        io::write_mixture_match(&dir.join("mixture_match.csv"), mm)?;
    }
    Ok(())
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().copied().map(io::real).collect();
    format!("[{}]", parts.join(", "))
}

fn model_summary(prefix: &str, r: &ModelReport, out: &mut Vec<(String, String)>) {
    for (label, f) in r.frequency.labels.iter().zip(&r.frequency.frequencies) {
        out.push((format!("{prefix}.frequency.{label}"), io::real(*f)));
    }
    out.push((format!("{prefix}.max_abs_gap"), io::real(r.frequency.max_abs_gap)));
    if let Some(tv) = r.tv_binned {
        out.push((format!("{prefix}.tv_binned"), io::real(tv)));
    }
    if let Some(d) = &r.dual {
        out.push((format!("{prefix}.lambda_final"), fmt_vec(&d.lambda)));
        out.push((format!("{prefix}.lambda_best"), fmt_vec(&d.lambda_best())));
    }
    if let Some(m) = &r.mixture {
        out.push((format!("{prefix}.mixture_max_abs_gap"), io::real(m.max_abs_gap)));
    }
}

pub fn run_fairness(config: &RunConfig, dir: &Path) -> Result<FairnessOutcome> {
    let sched = config.schedule.build()?;
    let q = config.data_dist()?;
    let reference = match config.fairness.as_ref().and_then(|f| f.reference.as_deref()) {
        Some(name) => config.gmm(name)?,
        None => q.clone(),
    };
    let d = q.dim();
    let tc = config.train.build(d, config.seed)?;
    let specs = config.constraint_specs(&sched, d, None)?;
    let gmms = config.constraint_gmms()?;
    let eval = Eval { sched: &sched, config, reference: &reference, target: resolve_target(&config.eval.target, &reference)? };
    let compare = config.scenario == Scenario::Fairness && config.fairness.as_ref().is_some_and(|f| f.compare_unconstrained);
    let mut summary = vec![("scenario".to_string(), format!("{:?}", config.scenario).to_lowercase())];
    summary.push(("seed".into(), config.seed.to_string()));

    let constrained = if specs.is_empty() {
        None
    } else {
        let (net, dual) = train_logged("constrained", &tc, &q, &specs, None, &sched)?;
        let lambda_best = dual.lambda_best();
        let refs: Vec<&GaussianMixture> = gmms.iter().collect();
        let intended = mixture_of(&lambda_best, &q, &refs)?;
        let sub = dir.join("constrained");
        let mut report = eval.model(&sub, net, Some(dual), Some(&intended))?;
        report.mixture = Some(mixture_match_report(&report.samples, &lambda_best, &q, &refs)?);
        write_model(&sub, &report, &sched, specs.len())?;
        model_summary("constrained", &report, &mut summary);
        Some(report)
    };
    let unconstrained = if constrained.is_none() || compare {
        let (net, dual) = train_logged("unconstrained", &tc, &q, &[], None, &sched)?;
        let sub = dir.join("unconstrained");
        let report = eval.model(&sub, net, Some(dual), Some(&q))?;
        write_model(&sub, &report, &sched, 0)?;
        model_summary("unconstrained", &report, &mut summary);
        Some(report)
    } else {
        None
    };
    io::write_summary(&dir.join("summary.txt"), &summary)?;
    let (constrained, unconstrained) = match constrained {
        Some(c) => (c, unconstrained),
        None => (unconstrained.expect("unconstrained run exists when there are no constraints"), None),
    };
    Ok(FairnessOutcome { constrained, unconstrained, train_config: tc })
}

pub fn run_finetune(config: &RunConfig, dir: &Path) -> Result<FinetuneOutcome> {
    let f = config.finetune.as_ref().ok_or_else(|| CliError::config("finetune: section required"))?;
    let sched = config.schedule.build()?;
    let new = config.gmm(&f.new_data)?;
    let reference = config.gmm(&f.reference)?;
    let d = new.dim();
    let tc = config.train.build(d, config.seed)?;
    let eval = Eval { sched: &sched, config, reference: &reference, target: resolve_target(&config.eval.target, &reference)? };
    let mut summary = vec![("scenario".to_string(), "finetune".to_string()), ("seed".into(), config.seed.to_string())];

    let (pre_net, pre_dual) = match (&f.checkpoint, &f.pretrain_data) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(CliError::config(format!("finetune.checkpoint: '{}' does not exist", path.display())));
            }
            let (net, saved) = io::load_checkpoint(path)?;
            if saved != sched {
                return Err(CliError::config("finetune.checkpoint: saved schedule differs from [schedule]"));
            }
            if net.arch() != &tc.arch {
                return Err(CliError::config("finetune.checkpoint: architecture differs from [train]"));
            }
            (net, None)
        }
        (None, Some(old)) => {
            let mut pc = tc.clone();
            pc.dual_iters = f.pretrain_dual_iters.unwrap_or(tc.dual_iters);
            pc.primal_steps = f.pretrain_primal_steps.unwrap_or(tc.primal_steps);
            let (net, dual) = train_logged("pretrain", &pc, &config.gmm(old)?, &[], None, &sched)?;
            (net, Some(dual))
        }
        (None, None) => return Err(CliError::config("finetune: needs either checkpoint or pretrain_data")),
    };
    let sub = dir.join("pretrained");
    let pretrained = eval.model(&sub, pre_net, pre_dual, None)?;
    write_model(&sub, &pretrained, &sched, 0)?;
    model_summary("pretrained", &pretrained, &mut summary);

    let gap = |net: &ScoreNet| {
        let mut r = rng::stream(config.seed, streams::EVAL);
        finetune_constraint_estimate(net, &pretrained.net, &sched, GAP_EVAL_BATCH, &mut r)
    };
    let specs = config.constraint_specs(&sched, d, Some(&pretrained.net))?;
    let (net, dual) = train_logged("constrained", &tc, &new, &specs, Some(pretrained.net.clone()), &sched)?;
    let sub = dir.join("constrained");
    let constrained = eval.model(&sub, net, Some(dual), None)?;
    write_model(&sub, &constrained, &sched, specs.len())?;
    let gap_constrained = gap(&constrained.net);
    model_summary("constrained", &constrained, &mut summary);
    summary.push(("constrained.pretrained_gap".into(), io::real(gap_constrained)));

    let (unconstrained, gap_unconstrained) = if f.compare_unconstrained {
        let (net, dual) = train_logged("unconstrained", &tc, &new, &[], Some(pretrained.net.clone()), &sched)?;
        let sub = dir.join("unconstrained");
        let report = eval.model(&sub, net, Some(dual), None)?;
        write_model(&sub, &report, &sched, 0)?;
        let g = gap(&report.net);
        model_summary("unconstrained", &report, &mut summary);
        summary.push(("unconstrained.pretrained_gap".into(), io::real(g)));
        (Some(report), Some(g))
    } else {
        (None, None)
    };
    io::write_summary(&dir.join("summary.txt"), &summary)?;
    Ok(FinetuneOutcome { pretrained, constrained, unconstrained, gap_constrained, gap_unconstrained })
}

pub fn kkt_residuals(prob: &DualProblem, lambda: &[f64]) -> Kkt {
    let thresholds = prob.kl_thresholds();
    let kls = prob.constraint_kls(lambda);
    let mut k = Kkt::default();
    for ((kl, b), l) in kls.iter().zip(&thresholds).zip(lambda) {
        k.primal = k.primal.max((kl - b).max(0.0));
        k.complementary = k.complementary.max((l * (kl - b)).abs());
    }
    if let Ok(g) = prob.dual_gradient(lambda) {
        k.stationarity = g.iter().fold(0.0, |a, v| a.max(v.abs()));
    }
    k
}

pub fn solve_oracle(config: &RunConfig) -> Result<(DualProblem, OracleOutcome)> {
    let o = config.oracle.as_ref().ok_or_else(|| CliError::config("oracle: section required"))?;
    let prob = config.dual_problem()?;
    let feasibility = prob.feasibility();
    let closed_form = prob.closed_form().ok();
    let run = exact_dual_ascent(&prob, &o.ascent());
    let divergent = run.status == AscentStatus::Divergent;
    let matched = run.status == AscentStatus::Converged
        && closed_form
            .as_ref()
            .is_some_and(|c| c.iter().zip(&run.lambda).all(|(a, b)| (a - b).abs() < o.match_tol));
    let kkt = kkt_residuals(&prob, &run.lambda);
    Ok((prob, OracleOutcome { feasibility, closed_form, run, matched, divergent, kkt }))
}

pub fn run_oracle(config: &RunConfig, dir: &Path) -> Result<OracleOutcome> {
    let (prob, outcome) = solve_oracle(config)?;
    let labels = config.constraint_labels();
    let thresholds = prob.kl_thresholds();
    let kls = prob.constraint_kls(&outcome.run.lambda);
    let rows = (0..prob.len()).map(|i| {
        vec![
            (i + 1).to_string(),
            labels[i].clone(),
            outcome.closed_form.as_ref().map_or_else(|| "nan".into(), |c| io::real(c[i])),
            io::real(outcome.run.lambda[i]),
            io::real(kls[i]),
            io::real(thresholds[i]),
        ]
    });
    io::write_table(&dir.join("lambda.csv"), &["index", "label", "closed_form", "ascent", "kl", "kl_threshold"], rows)?;

    let m = prob.len();
    let mut header: Vec<String> = vec!["iter".into()];
    header.extend((1..=m).map(|i| format!("lambda_{i}")));
    header.push("dual_value".into());
    header.extend((1..=m).map(|i| format!("kl_{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = outcome.run.trajectory.iter().enumerate().map(|(k, s)| {
        let mut row = vec![k.to_string()];
        row.extend(s.lambda.iter().copied().map(io::real));
        row.push(io::real(s.dual_value));
        row.extend(s.constraint_values.iter().copied().map(io::real));
        row
    });
    io::write_table(&dir.join("trajectory.csv"), &header, rows)?;
    let p = &outcome.run.p_star;
    let rows = p.support().iter().zip(p.pmf()).map(|(a, v)| vec![a.clone(), io::real(*v)]);
    io::write_table(&dir.join("p_star.csv"), &["atom", "probability"], rows)?;

    let summary = vec![
        ("scenario".to_string(), "oracle".to_string()),
        ("feasible".into(), outcome.feasibility.feasible.to_string()),
        ("margin".into(), io::real(outcome.feasibility.margin)),
        ("status".into(), format!("{:?}", outcome.run.status).to_lowercase()),
        ("iterations".into(), (outcome.run.trajectory.len() - 1).to_string()),
        ("match".into(), outcome.matched.to_string()),
        ("divergent".into(), outcome.divergent.to_string()),
        ("lambda_ascent".into(), fmt_vec(&outcome.run.lambda)),
        ("lambda_closed_form".into(), outcome.closed_form.as_deref().map_or_else(|| "none".into(), fmt_vec)),
        ("kkt.primal".into(), io::real(outcome.kkt.primal)),
        ("kkt.complementary".into(), io::real(outcome.kkt.complementary)),
        ("kkt.stationarity".into(), io::real(outcome.kkt.stationarity)),
    ];
    io::write_summary(&dir.join("summary.txt"), &summary)?;
    Ok(outcome)
}
