//! TOML run configuration.
//!
//! ```toml
//! scenario = "fairness"
//! seed = 7
//! output = "out/fairness"
//! data = "q"
//!
//! [schedule]
//! steps = 200
//!
//! [dist.q]
//! weights = [0.9, 0.1]
//! means = [[-2.0, 0.0], [2.0, 0.0]]
//! variances = [0.25, 0.25]
//! labels = ["major", "minor"]
//!
//! [[constraint]]
//! dist = "minor"
//! threshold = 0.0
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dualdiff_core::distributions::{GaussianMixture, TabularDist};
use dualdiff_core::net::{Activation, NetArch, ScoreNet};
use dualdiff_core::optim::AdamParams;
use dualdiff_core::oracle::{AscentConfig, DualProblem};
use dualdiff_core::schedule::{NoiseSchedule, ScheduleKind, TimeMode, DEFAULT_C0, DEFAULT_C1};
use dualdiff_core::trainer::{threshold_transform, ConstraintSpec, TrainConfig};
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Fairness,
    Finetune,
    Unconstrained,
    Oracle,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Objective distribution for `fairness`, `unconstrained` and `train`.
    pub data: Option<String>,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub dist: BTreeMap<String, GmmSection>,
    #[serde(default)]
    pub table: BTreeMap<String, TableSection>,
    #[serde(default, rename = "constraint")]
    pub constraints: Vec<ConstraintSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub fairness: Option<FairnessSection>,
    pub finetune: Option<FinetuneSection>,
    pub oracle: Option<OracleSection>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: String,
    pub steps: usize,
    pub c0: f64,
    pub c1: f64,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { kind: "convergent".into(), steps: 200, c0: DEFAULT_C0, c1: DEFAULT_C1, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleSection {
    pub fn kind(&self) -> Result<ScheduleKind> {
        match self.kind.as_str() {
            "convergent" => Ok(ScheduleKind::Convergent { c0: self.c0, c1: self.c1 }),
            "linear" => Ok(ScheduleKind::Linear { beta_start: self.beta_start, beta_end: self.beta_end }),
            other => Err(CliError::config(format!("schedule.kind: expected 'convergent' or 'linear', got '{other}'"))),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::with_kind(self.steps, self.kind()?)?)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSection {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSection {
    pub atoms: Vec<String>,
    pub pmf: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    /// Distribution (`[dist.*]`, or `[table.*]` for the oracle) the
    /// constraint is placed on.
    pub dist: Option<String>,
    /// Constrain against the pretrained network of a fine-tune run.
    #[serde(default)]
    pub pretrained: bool,
    /// `b_tilde`, in loss units.
    pub threshold: Option<f64>,
    /// ELBO-form threshold; converted to `b_tilde` for neural runs.
    pub b_bar: Option<f64>,
    #[serde(default = "default_dual_batch")]
    pub batch_size: usize,
    pub label: Option<String>,
}

fn default_dual_batch() -> usize {
    1024
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub dual_iters: usize,
    pub primal_steps: usize,
    pub lr: f64,
    pub dual_lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub time_mode: String,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub time_embed_dim: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::new(NetArch::new(1, vec![64, 64]), 0);
        TrainSection {
            dual_iters: base.dual_iters,
            primal_steps: base.primal_steps,
            lr: base.lr,
            dual_lr: base.dual_lr,
            gamma: base.gamma,
            batch_size: base.batch_size,
            eval_batch_size: base.eval_batch_size,
            time_mode: "uniform".into(),
            hidden: base.arch.hidden,
            activation: "tanh".into(),
            time_embed_dim: base.arch.time_embed_dim,
            beta1: base.adam.beta1,
            beta2: base.adam.beta2,
            eps: base.adam.eps,
            weight_decay: base.adam.weight_decay,
        }
    }
}

impl TrainSection {
    pub fn activation(&self) -> Result<Activation> {
        parse_activation(&self.activation).ok_or_else(|| {
            CliError::config(format!("train.activation: expected 'tanh' or 'softplus', got '{}'", self.activation))
        })
    }

    pub fn time_mode(&self) -> Result<TimeMode> {
        match self.time_mode.as_str() {
            "uniform" => Ok(TimeMode::Uniform),
            "elbo_weighted" => Ok(TimeMode::ElboWeighted),
            other => Err(CliError::config(format!("train.time_mode: expected 'uniform' or 'elbo_weighted', got '{other}'"))),
        }
    }

    pub fn build(&self, input_dim: usize, seed: u64) -> Result<TrainConfig> {
        let arch = NetArch {
            input_dim,
            time_embed_dim: self.time_embed_dim,
            hidden: self.hidden.clone(),
            activation: self.activation()?,
        };
        let config = TrainConfig {
            dual_iters: self.dual_iters,
            primal_steps: self.primal_steps,
            lr: self.lr,
            dual_lr: self.dual_lr,
            gamma: self.gamma,
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            seed,
            time_mode: self.time_mode()?,
            adam: AdamParams { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay },
            arch,
        };
        config.validate()?;
        Ok(config)
    }
}

pub fn parse_activation(name: &str) -> Option<Activation> {
    match name {
        "tanh" => Some(Activation::Tanh),
        "softplus" | "smooth_relu" => Some(Activation::SmoothRelu),
        _ => None,
    }
}

pub fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::SmoothRelu => "softplus",
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub n: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { n: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    /// `"uniform"` or `"reference"` (the reference mixture's own weights).
    Named(String),
    Weights(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub target: TargetSpec,
    /// Bins per axis for `tv_binned`.
    pub bins: usize,
    /// Size of the reference draw `tv_binned` compares against.
    pub reference_n: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { target: TargetSpec::Named("uniform".into()), bins: 12, reference_n: 100_000 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessSection {
    /// Mixture used to classify samples; defaults to `data`.
    pub reference: Option<String>,
    #[serde(default = "yes")]
    pub compare_unconstrained: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub new_data: String,
    /// Mixture over old and new classes used for the frequency reports.
    pub reference: String,
    /// Pretrained checkpoint. Without one, a model is pretrained on
    /// `pretrain_data` first.
    pub checkpoint: Option<PathBuf>,
    pub pretrain_data: Option<String>,
    pub pretrain_dual_iters: Option<usize>,
    pub pretrain_primal_steps: Option<usize>,
    #[serde(default = "yes")]
    pub compare_unconstrained: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub q: String,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
    /// Agreement required between ascent and the closed form.
    #[serde(default = "default_match")]
    pub match_tol: f64,
}

fn default_eta() -> f64 {
    AscentConfig::default().eta
}
fn default_iters() -> usize {
    AscentConfig::default().max_iters
}
fn default_tol() -> f64 {
    AscentConfig::default().tol
}
fn default_divergence() -> f64 {
    AscentConfig::default().divergence_threshold
}
fn default_floor() -> f64 {
    AscentConfig::default().floor
}
fn default_match() -> f64 {
    1e-6
}

impl OracleSection {
    pub fn ascent(&self) -> AscentConfig {
        AscentConfig {
            eta: self.eta,
            max_iters: self.max_iters,
            tol: self.tol,
            divergence_threshold: self.divergence_threshold,
            floor: self.floor,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        config.validate()?;
        Ok(config)
    }

    /// Collects every problem rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(e) = self.schedule.build() {
            errs.push(format!("schedule: {e}"));
        }
        for (name, d) in &self.dist {
            if let Err(e) = build_gmm(name, d) {
                errs.push(format!("dist.{name}: {e}"));
            }
        }
        for (name, t) in &self.table {
            if let Err(e) = TabularDist::new(t.atoms.clone(), t.pmf.clone()) {
                errs.push(format!("table.{name}: {e}"));
            }
        }
        if let Err(e) = self.train.activation() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.train.time_mode() {
            errs.push(e.to_string());
        }
        if self.eval.bins == 0 {
            errs.push("eval.bins: must be at least 1".into());
        }
        if let TargetSpec::Named(n) = &self.eval.target {
            if n != "uniform" && n != "reference" {
                errs.push(format!("eval.target: expected 'uniform', 'reference' or a weight list, got '{n}'"));
            }
        }
        let need_dist = |errs: &mut Vec<String>, key: &str, name: &Option<String>| match name {
            None => errs.push(format!("{key}: required for scenario {:?}", self.scenario)),
            Some(n) if !self.dist.contains_key(n) => errs.push(format!("{key}: unknown distribution '{n}'")),
            Some(_) => {}
        };

        match self.scenario {
            Scenario::Fairness | Scenario::Unconstrained => {
                need_dist(&mut errs, "data", &self.data);
                if self.scenario == Scenario::Fairness && self.fairness.is_none() {
                    errs.push("fairness: section required for scenario fairness".into());
                }
                if let Some(f) = &self.fairness {
                    if f.reference.is_some() {
                        need_dist(&mut errs, "fairness.reference", &f.reference);
                    }
                }
                if self.scenario == Scenario::Unconstrained && !self.constraints.is_empty() {
                    errs.push("constraint: scenario unconstrained takes no constraints".into());
                }
                self.check_neural_constraints(&mut errs, false);
            }
            Scenario::Finetune => match &self.finetune {
                None => errs.push("finetune: section required for scenario finetune".into()),
                Some(f) => {
                    need_dist(&mut errs, "finetune.new_data", &Some(f.new_data.clone()));
                    need_dist(&mut errs, "finetune.reference", &Some(f.reference.clone()));
                    match (&f.checkpoint, &f.pretrain_data) {
                        (None, None) => errs.push("finetune: needs either checkpoint or pretrain_data".into()),
                        (Some(_), Some(_)) => errs.push("finetune: checkpoint and pretrain_data are exclusive".into()),
                        (None, Some(_)) => need_dist(&mut errs, "finetune.pretrain_data", &f.pretrain_data),
                        (Some(_), None) => {}
                    }
                    self.check_neural_constraints(&mut errs, true);
                }
            },
            Scenario::Oracle => match &self.oracle {
                None => errs.push("oracle: section required for scenario oracle".into()),
                Some(o) => {
                    if !self.table.contains_key(&o.q) {
                        errs.push(format!("oracle.q: unknown table '{}'", o.q));
                    }
                    if !(o.eta > 0.0) || o.max_iters == 0 {
                        errs.push("oracle: eta must be positive and max_iters at least 1".into());
                    }
                    for (i, c) in self.constraints.iter().enumerate() {
                        match &c.dist {
                            Some(n) if self.table.contains_key(n) => {}
                            Some(n) => errs.push(format!("constraint[{i}].dist: unknown table '{n}'")),
                            None => errs.push(format!("constraint[{i}].dist: required")),
                        }
                        if c.b_bar.is_none() {
                            errs.push(format!("constraint[{i}].b_bar: required for the oracle"));
                        }
                    }
                }
            },
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs))
        }
    }

    fn check_neural_constraints(&self, errs: &mut Vec<String>, finetune: bool) {
        for (i, c) in self.constraints.iter().enumerate() {
            match (&c.dist, c.pretrained) {
                (Some(n), false) if !self.dist.contains_key(n) => {
                    errs.push(format!("constraint[{i}].dist: unknown distribution '{n}'"))
                }
                (Some(_), false) => {}
                (None, true) if finetune => {}
                (None, true) => errs.push(format!("constraint[{i}].pretrained: only valid in a finetune scenario")),
                (Some(_), true) => errs.push(format!("constraint[{i}]: dist and pretrained are exclusive")),
                (None, false) => errs.push(format!("constraint[{i}]: needs dist or pretrained = true")),
            }
            match (c.threshold, c.b_bar) {
                (Some(_), Some(_)) => errs.push(format!("constraint[{i}]: give threshold or b_bar, not both")),
                (None, None) if self.train.gamma == 0.0 => {
                    errs.push(format!("constraint[{i}]: a threshold is required unless train.gamma > 0"))
                }
                _ => {}
            }
            if c.batch_size == 0 {
                errs.push(format!("constraint[{i}].batch_size: must be at least 1"));
            }
        }
    }

    pub fn gmm(&self, name: &str) -> Result<GaussianMixture> {
        let d = self.dist.get(name).ok_or_else(|| CliError::config(format!("unknown distribution '{name}'")))?;
        Ok(build_gmm(name, d)?)
    }

    pub fn tabular(&self, name: &str) -> Result<TabularDist> {
        let t = self.table.get(name).ok_or_else(|| CliError::config(format!("unknown table '{name}'")))?;
        Ok(TabularDist::new(t.atoms.clone(), t.pmf.clone())?)
    }

    /// Objective distribution of a fairness / unconstrained / train run.
    pub fn data_dist(&self) -> Result<GaussianMixture> {
        let name = self.data.as_deref().ok_or_else(|| CliError::config("data: required"))?;
        self.gmm(name)
    }

    /// Neural constraints. `pretrained` stands in for `pretrained = true`.
    pub fn constraint_specs(&self, sched: &NoiseSchedule, dim: usize, pretrained: Option<&ScoreNet>) -> Result<Vec<ConstraintSpec>> {
        self.constraints
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let threshold = match (c.threshold, c.b_bar) {
                    (Some(t), _) => t,
                    (None, Some(b)) => threshold_transform(b, sched.v_per_dim(), sched.omega_bar(), dim),
                    (None, None) => 0.0,
                };
                if c.pretrained {
                    let net = pretrained
                        .ok_or_else(|| CliError::config(format!("constraint[{i}]: no pretrained network available")))?;
                    let label = c.label.clone().unwrap_or_else(|| "pretrained".into());
                    Ok(ConstraintSpec::pretrained(net.clone(), threshold, c.batch_size, label))
                } else {
                    let name = c.dist.as_deref().unwrap_or_default();
                    let label = c.label.clone().unwrap_or_else(|| name.to_string());
                    Ok(ConstraintSpec::data(self.gmm(name)?, threshold, c.batch_size, label))
                }
            })
            .collect()
    }

    /// The constraint distributions by name, in order, for mixture reports.
    pub fn constraint_gmms(&self) -> Result<Vec<GaussianMixture>> {
        self.constraints.iter().filter_map(|c| c.dist.as_deref()).map(|n| self.gmm(n)).collect()
    }

    pub fn dual_problem(&self) -> Result<DualProblem> {
        let o = self.oracle.as_ref().ok_or_else(|| CliError::config("oracle: section required"))?;
        let q = self.tabular(&o.q)?;
        let mut constraints = Vec::new();
        let mut b_bar = Vec::new();
        for c in &self.constraints {
            constraints.push(self.tabular(c.dist.as_deref().unwrap_or_default())?);
            b_bar.push(c.b_bar.unwrap_or(f64::NAN));
        }
        Ok(DualProblem::new(q, constraints, b_bar)?)
    }

    pub fn constraint_labels(&self) -> Vec<String> {
        self.constraints
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.label.clone().or_else(|| c.dist.clone()).unwrap_or_else(|| if c.pretrained { "pretrained".into() } else { format!("c{i}") })
            })
            .collect()
    }
}

fn build_gmm(name: &str, d: &GmmSection) -> dualdiff_core::Result<GaussianMixture> {
    let g = GaussianMixture::new(d.weights.clone(), d.means.clone(), d.variances.clone())?;
    let labels = match &d.labels {
        Some(l) => l.clone(),
        None if g.components() == 1 => vec![name.to_string()],
        None => (0..g.components()).map(|k| format!("{name}:{k}")).collect(),
    };
    g.with_labels(labels)
}
