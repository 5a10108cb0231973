use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dualdiff_core::distributions::GaussianMixture;
use dualdiff_core::metrics::frequency_report;
use dualdiff_core::rng::{self, streams};
use dualdiff_core::sampler::{generate, Capture};
use dualdiff_core::schedule::{NoiseSchedule, ScheduleKind};
use dualdiff_core::trainer::{train, train_exact};

use crate::config::{RunConfig, Scenario, TargetSpec};
use crate::error::{CliError, Result};
use crate::io;
use crate::scenarios::{self, resolve_target, Outcome};

#[derive(Debug, Parser)]
#[command(name = "dualdiff", version, about = "Constrained diffusion models trained by dual ascent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Noise schedule utilities.
    #[command(subcommand)]
    Schedule(ScheduleCmd),
    /// Distribution utilities.
    #[command(subcommand)]
    Dist(DistCmd),
    /// Tabular dual problem utilities.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Train a score network (or run exact dual ascent with --exact-mode).
    Train(TrainArgs),
    /// Generate samples from a checkpoint.
    Sample(SampleArgs),
    /// Frequency report of samples against a labelled reference mixture.
    Eval(EvalArgs),
    /// Run the scenario described by a config file.
    Run(RunArgs),
}

#[derive(Debug, Subcommand)]
pub enum ScheduleCmd {
    /// Write t, alpha, alpha_bar, sigma_q2, sigma_p2, omega for t = 1..T.
    Dump(ScheduleDumpArgs),
}

#[derive(Debug, Args)]
pub struct ScheduleDumpArgs {
    /// Take the schedule from this config's [schedule] section.
    #[arg(long, conflicts_with_all = ["steps", "c0", "c1"])]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub c0: Option<f64>,
    #[arg(long)]
    pub c1: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DistCmd {
    /// Draw from a named [dist.*] or [table.*] block.
    Sample(DistSampleArgs),
}

#[derive(Debug, Args)]
pub struct DistSampleArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Block name; must be unique across [dist] and [table].
    #[arg(long)]
    pub dist: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum OracleCmd {
    /// Compare projected dual ascent with the closed-form multipliers.
    Solve(OracleSolveArgs),
}

#[derive(Debug, Args)]
pub struct OracleSolveArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Trajectory CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    pub save: Option<PathBuf>,
    /// Replace the network by exact tabular computation on the [oracle] problem.
    #[arg(long)]
    pub exact_mode: bool,
    /// Dual history CSV.
    #[arg(long, default_value = "dual_history.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub load: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub samples: PathBuf,
    /// Config holding the reference mixture.
    #[arg(long)]
    pub reference: PathBuf,
    /// Reference block name; defaults to the config's `data`.
    #[arg(long)]
    pub dist: Option<String>,
    /// `uniform`, `reference`, or comma-separated weights per label.
    #[arg(long, default_value = "uniform")]
    pub target: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Execute a parsed command. Returns the process exit code.
pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Schedule(ScheduleCmd::Dump(a)) => schedule_dump(&a),
        Command::Dist(DistCmd::Sample(a)) => dist_sample(&a),
        Command::Oracle(OracleCmd::Solve(a)) => oracle_solve(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Sample(a) => sample_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Run(a) => run_cmd(&a),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn schedule_dump(a: &ScheduleDumpArgs) -> Result<i32> {
    let sched = match &a.config {
        Some(path) => RunConfig::load(path)?.schedule.build()?,
        None => {
            let d = crate::config::ScheduleSection::default();
            NoiseSchedule::with_kind(
                a.steps.unwrap_or(d.steps),
                ScheduleKind::Convergent { c0: a.c0.unwrap_or(d.c0), c1: a.c1.unwrap_or(d.c1) },
            )?
        }
    };
    io::write_schedule(&a.out, &sched)?;
    Ok(0)
}

fn dist_sample(a: &DistSampleArgs) -> Result<i32> {
    let config = RunConfig::load(&a.config)?;
    let mut r = rng::stream(a.seed, streams::DATA);
    match (config.dist.contains_key(&a.dist), config.table.contains_key(&a.dist)) {
        (true, false) => {
            let g = config.gmm(&a.dist)?;
            let draws: Vec<(Vec<f64>, usize)> = (0..a.n).map(|_| g.draw_labeled(&mut r)).collect();
            let mut header: Vec<String> = (1..=g.dim()).map(|j| format!("x{j}")).collect();
            header.push("component".into());
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows = draws.into_iter().map(|(x, k)| {
                let mut row: Vec<String> = x.into_iter().map(io::real).collect();
                row.push(k.to_string());
                row
            });
            io::write_table(&a.out, &header, rows)?;
        }
        (false, true) => {
            let t = config.tabular(&a.dist)?;
            let rows = (0..a.n).map(|_| vec![t.support()[t.draw_index(&mut r)].clone()]);
            io::write_table(&a.out, &["atom"], rows)?;
        }
        (true, true) => return Err(CliError::config(format!("'{}' names both a [dist] and a [table] block", a.dist))),
        (false, false) => return Err(CliError::config(format!("unknown distribution '{}'", a.dist))),
    }
    Ok(0)
}

fn oracle_solve(a: &OracleSolveArgs) -> Result<i32> {
    let config = load_config(&a.config, None)?;
    let (_, outcome) = scenarios::solve_oracle(&config)?;
    let m = outcome.run.lambda.len();
    let mut header: Vec<String> = vec!["iter".into()];
    header.extend((1..=m).map(|i| format!("lambda_{i}")));
    header.push("dual_value".into());
    header.extend((1..=m).map(|i| format!("constraint_{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = outcome.run.trajectory.iter().enumerate().map(|(k, s)| {
        let mut row = vec![k.to_string()];
        row.extend(s.lambda.iter().copied().map(io::real));
        row.push(io::real(s.dual_value));
        row.extend(s.constraint_values.iter().copied().map(io::real));
        row
    });
    io::write_table(&a.out, &header, rows)?;
    let max_diff = outcome.closed_form.as_ref().map(|c| {
        c.iter().zip(&outcome.run.lambda).fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
    });
    println!(
        "match: {}  divergent: {}  margin: {}  iterations: {}  max|closed - ascent|: {}",
        outcome.matched,
        outcome.divergent,
        io::real(outcome.feasibility.margin),
        outcome.run.trajectory.len() - 1,
        max_diff.map_or_else(|| "n/a".into(), io::real),
    );
    Ok(if outcome.feasibility.feasible { 0 } else { 4 })
}

fn train_cmd(a: &TrainArgs) -> Result<i32> {
    let config = load_config(&a.config, a.seed)?;
    if a.exact_mode {
        let prob = config.dual_problem()?;
        let o = config.oracle.as_ref().expect("dual_problem checked the section");
        let (dual, mix) = train_exact(&prob, config.train.dual_iters, config.train.dual_lr, o.floor);
        io::write_dual_history(&a.out, &dual, prob.len())?;
        let lambda: Vec<String> = dual.lambda.iter().copied().map(io::real).collect();
        println!("exact: iterations {}  lambda [{}]  H(p) {}", config.train.dual_iters, lambda.join(", "), io::real(mix.entropy()));
        return Ok(0);
    }
    let sched = config.schedule.build()?;
    let q = config.data_dist()?;
    let tc = config.train.build(q.dim(), config.seed)?;
    let specs = config.constraint_specs(&sched, q.dim(), None)?;
    let outcome = train(&tc, &q, &specs, None, &sched)?;
    io::write_dual_history(&a.out, &outcome.dual, specs.len())?;
    if let Some(path) = &a.save {
        io::save_checkpoint(path, &outcome.net, &sched)?;
    }
    let lambda: Vec<String> = outcome.dual.lambda.iter().copied().map(io::real).collect();
    println!(
        "trained: {} x {} steps  final loss {}  lambda [{}]",
        tc.dual_iters,
        tc.primal_steps,
        io::real(outcome.final_primal_loss),
        lambda.join(", ")
    );
    Ok(0)
}

fn sample_cmd(a: &SampleArgs) -> Result<i32> {
    if !a.load.exists() {
        return Err(CliError::config(format!("--load: '{}' does not exist", a.load.display())));
    }
    let (net, sched) = io::load_checkpoint(&a.load)?;
    let run = generate(&net, &sched, a.n, a.seed, Capture::FinalOnly)?;
    io::write_samples(&a.out, net.input_dim(), &run.outputs)?;
    Ok(0)
}

fn parse_target(s: &str) -> Result<TargetSpec> {
    match s {
        "uniform" | "reference" => Ok(TargetSpec::Named(s.into())),
        _ => s
            .split(',')
            .map(|w| w.trim().parse::<f64>().map_err(|e| CliError::config(format!("--target: '{w}': {e}"))))
            .collect::<Result<Vec<_>>>()
            .map(TargetSpec::Weights),
    }
}

fn eval_cmd(a: &EvalArgs) -> Result<i32> {
    let config = RunConfig::load(&a.reference)?;
    let reference: GaussianMixture = match &a.dist {
        Some(name) => config.gmm(name)?,
        None => config.data_dist()?,
    };
    let target = resolve_target(&parse_target(&a.target)?, &reference)?;
    let samples = io::read_samples(&a.samples)?;
    if let Some(x) = samples.iter().find(|x| x.len() != reference.dim()) {
        return Err(CliError::config(format!("--samples: points have dimension {}, reference has {}", x.len(), reference.dim())));
    }
    let report = frequency_report(&samples, &reference, &target)?;
    io::write_frequency_report(&a.out, &report)?;
    println!("samples: {}  max_abs_gap: {}", samples.len(), io::real(report.max_abs_gap));
    Ok(0)
}

fn run_cmd(a: &RunArgs) -> Result<i32> {
    let config = load_config(&a.config, a.seed)?;
    let out = a.out.clone().unwrap_or_else(|| config.output.clone());
    let outcome = scenarios::run(&config, &out)?;
    match outcome {
        Outcome::Fairness(f) => {
            let c = &f.constrained;
            let tag = if config.scenario == Scenario::Unconstrained || c.dual.as_ref().is_none_or(|d| d.lambda.is_empty()) {
                "unconstrained"
            } else {
                "constrained"
            };
            println!("{tag}: max_abs_gap {}", io::real(c.frequency.max_abs_gap));
            if let Some(u) = &f.unconstrained {
                println!("unconstrained: max_abs_gap {}", io::real(u.frequency.max_abs_gap));
            }
        }
        Outcome::Finetune(f) => {
            println!("constrained: pretrained gap {}", io::real(f.gap_constrained));
            if let Some(g) = f.gap_unconstrained {
                println!("unconstrained: pretrained gap {}", io::real(g));
            }
        }
        Outcome::Oracle(o) => {
            println!("match: {}  divergent: {}  margin: {}", o.matched, o.divergent, io::real(o.feasibility.margin));
            if !o.feasibility.feasible {
                return Ok(4);
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(0)
}
