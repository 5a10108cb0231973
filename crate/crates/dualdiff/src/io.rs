//! CSV artifacts and the plain-text checkpoint format.
//!
//! Reals are written with 17 significant digits, enough to round-trip every
//! `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dualdiff_core::dual::DualState;
use dualdiff_core::metrics::{FrequencyReport, MixtureMatch};
use dualdiff_core::net::{NetArch, ScoreNet};
use dualdiff_core::schedule::{NoiseSchedule, ScheduleKind};

use crate::config::{activation_name, parse_activation};
use crate::error::{CliError, Result};

pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(CliError::csv(path))
}

fn write_rows(path: &Path, header: Vec<String>, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(&header).map_err(CliError::csv(path))?;
    for row in rows {
        w.write_record(&row).map_err(CliError::csv(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Columns `x1..xd`.
pub fn write_samples(path: &Path, dim: usize, samples: &[Vec<f64>]) -> Result<()> {
    let header = (1..=dim).map(|j| format!("x{j}")).collect();
    write_rows(path, header, samples.iter().map(|x| x.iter().copied().map(real).collect()))
}

/// Reads the `x1..xd` columns; any other columns (labels, components) are ignored.
pub fn read_samples(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(CliError::csv(path))?;
    let headers = r.headers().map_err(CliError::csv(path))?.clone();
    let cols: Vec<usize> = (1..)
        .map_while(|j| headers.iter().position(|h| h.trim() == format!("x{j}")))
        .collect();
    if cols.is_empty() {
        return Err(parse_error(path, "no x1 column".into()));
    }
    let mut out = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(CliError::csv(path))?;
        let row = cols
            .iter()
            .map(|&c| {
                let f = record.get(c).ok_or_else(|| parse_error(path, format!("row {}: missing field {}", line + 2, c + 1)))?;
                f.trim().parse::<f64>().map_err(|e| parse_error(path, format!("row {}: '{f}': {e}", line + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(row);
    }
    Ok(out)
}

fn parse_error(path: &Path, message: String) -> CliError {
    CliError::Parse { path: path.to_path_buf(), message }
}

/// Columns `h, lambda_1..m, constraint_est_1..m, objective_est, lagrangian, is_best`.
pub fn write_dual_history(path: &Path, dual: &DualState, m: usize) -> Result<()> {
    let mut header = vec!["h".to_string()];
    header.extend((1..=m).map(|i| format!("lambda_{i}")));
    header.extend((1..=m).map(|i| format!("constraint_est_{i}")));
    header.extend(["objective_est", "lagrangian", "is_best"].map(String::from));
    let rows = dual.history.iter().enumerate().map(|(i, r)| {
        let mut row = vec![r.h.to_string()];
        row.extend(r.lambda.iter().copied().map(real));
        row.extend(r.constraint_estimates.iter().copied().map(real));
        row.push(real(r.objective_estimate));
        row.push(real(r.lagrangian));
        row.push((dual.best == Some(i)).to_string());
        row
    });
    write_rows(path, header, rows)
}

/// Columns `label, count, frequency, target, gap`.
pub fn write_frequency_report(path: &Path, r: &FrequencyReport) -> Result<()> {
    let header = ["label", "count", "frequency", "target", "gap"].map(String::from).to_vec();
    let gaps = r.gaps();
    let rows = (0..r.labels.len()).map(|i| {
        vec![r.labels[i].clone(), r.counts[i].to_string(), real(r.frequencies[i]), real(r.reference_frequencies[i]), real(gaps[i])]
    });
    write_rows(path, header, rows)
}

/// Columns `label, target, empirical, gap`.
pub fn write_mixture_match(path: &Path, m: &MixtureMatch) -> Result<()> {
    let header = ["label", "target", "empirical", "gap"].map(String::from).to_vec();
    let rows = (0..m.labels.len()).map(|i| vec![m.labels[i].clone(), real(m.targets[i]), real(m.empirical[i]), real(m.gaps[i])]);
    write_rows(path, header, rows)
}

/// Columns `t, alpha, alpha_bar, sigma_q2, sigma_p2, omega`.
pub fn write_schedule(path: &Path, s: &NoiseSchedule) -> Result<()> {
    let header = ["t", "alpha", "alpha_bar", "sigma_q2", "sigma_p2", "omega"].map(String::from).to_vec();
    let rows = (1..=s.steps()).map(|t| {
        vec![t.to_string(), real(s.alpha(t)), real(s.alpha_bar(t)), real(s.sigma_q2(t)), real(s.sigma_p2(t)), real(s.omega(t))]
    });
    write_rows(path, header, rows)
}

pub fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    write_rows(path, header.iter().map(|s| s.to_string()).collect(), rows)
}

/// `key = value` lines, in the given order.
pub fn write_summary(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        let _ = writeln!(text, "{k} = {v}");
    }
    fs::write(path, text).map_err(CliError::io(path))
}

const MAGIC: &str = "dualdiff-checkpoint v1";

/// Network plus the schedule it was trained under.
///
/// ```text
/// dualdiff-checkpoint v1
/// input_dim 2
/// time_embed_dim 16
/// hidden 64 64
/// activation softplus
/// seed 7
/// schedule convergent 200 1 6
/// params 5442
/// <one parameter per line>
/// ```
pub fn save_checkpoint(path: &Path, net: &ScoreNet, sched: &NoiseSchedule) -> Result<()> {
    let arch = net.arch();
    let mut text = String::new();
    let _ = writeln!(text, "{MAGIC}");
    let _ = writeln!(text, "input_dim {}", arch.input_dim);
    let _ = writeln!(text, "time_embed_dim {}", arch.time_embed_dim);
    let hidden: Vec<String> = arch.hidden.iter().map(|h| h.to_string()).collect();
    let _ = writeln!(text, "hidden {}", hidden.join(" "));
    let _ = writeln!(text, "activation {}", activation_name(arch.activation));
    let _ = writeln!(text, "seed {}", net.seed());
    match sched.kind() {
        ScheduleKind::Convergent { c0, c1 } => {
            let _ = writeln!(text, "schedule convergent {} {} {}", sched.steps(), real(c0), real(c1));
        }
        ScheduleKind::Linear { beta_start, beta_end } => {
            let _ = writeln!(text, "schedule linear {} {} {}", sched.steps(), real(beta_start), real(beta_end));
        }
    }
    let _ = writeln!(text, "params {}", net.params().len());
    for p in net.params() {
        let _ = writeln!(text, "{}", real(*p));
    }
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(ScoreNet, NoiseSchedule)> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let err = |msg: String| parse_error(path, msg);
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(err(format!("not a checkpoint (expected header '{MAGIC}')")));
    }
    let mut field = |key: &str| -> Result<Vec<String>> {
        let line = lines.next().ok_or_else(|| err(format!("missing '{key}'")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(err(format!("expected '{key}', found '{line}'")));
        }
        Ok(parts.map(String::from).collect())
    };
    let int = |v: &str| v.parse::<usize>().map_err(|e| err(format!("'{v}': {e}")));
    let float = |v: &str| v.parse::<f64>().map_err(|e| err(format!("'{v}': {e}")));

    let input_dim = int(&field("input_dim")?.concat())?;
    let time_embed_dim = int(&field("time_embed_dim")?.concat())?;
    let hidden = field("hidden")?.iter().map(|h| int(h)).collect::<Result<Vec<_>>>()?;
    let act = field("activation")?.concat();
    let activation = parse_activation(&act).ok_or_else(|| err(format!("unknown activation '{act}'")))?;
    let seed = field("seed")?.concat().parse::<u64>().map_err(|e| err(e.to_string()))?;
    let sched = field("schedule")?;
    if sched.len() != 4 {
        return Err(err("schedule needs kind, steps and two parameters".into()));
    }
    let (steps, a, b) = (int(&sched[1])?, float(&sched[2])?, float(&sched[3])?);
    let kind = match sched[0].as_str() {
        "convergent" => ScheduleKind::Convergent { c0: a, c1: b },
        "linear" => ScheduleKind::Linear { beta_start: a, beta_end: b },
        other => return Err(err(format!("unknown schedule kind '{other}'"))),
    };
    let count = int(&field("params")?.concat())?;
    let params = lines.map(float).collect::<Result<Vec<f64>>>()?;
    if params.len() != count {
        return Err(err(format!("expected {count} parameters, found {}", params.len())));
    }
    let arch = NetArch { input_dim, time_embed_dim, hidden, activation };
    let net = ScoreNet::from_parts(arch, seed, params)?;
    Ok((net, NoiseSchedule::with_kind(steps, kind)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualdiff_core::net::Activation;

    #[test]
    fn reals_round_trip() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(real(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(real(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut arch = NetArch::new(2, vec![8, 4]);
        arch.activation = Activation::SmoothRelu;
        let net = ScoreNet::new(arch, 42).unwrap();
        let sched = NoiseSchedule::new(50, 1.0, 6.0).unwrap();
        save_checkpoint(&path, &net, &sched).unwrap();
        let (back, s) = load_checkpoint(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(s, sched);

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen("params", "parms", 1)).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CliError::Parse { .. })));
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let samples = vec![vec![0.1, -2.5], vec![1e-17, 3.0]];
        write_samples(&path, 2, &samples).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("x1,x2\n"));
        assert_eq!(read_samples(&path).unwrap(), samples);
    }
}
