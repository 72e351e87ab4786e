//! Across-subject accuracy statistics and the results files.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Divisor convention of the standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StdKind {
    /// Divide by `N`.
    #[default]
    Population,
    /// Divide by `N − 1`.
    Sample,
}

impl FromStr for StdKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "population" => Ok(StdKind::Population),
            "sample" => Ok(StdKind::Sample),
            other => Err(Error::Config(format!(
                "unknown std convention {other:?} (expected population|sample)"
            ))),
        }
    }
}

impl std::fmt::Display for StdKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StdKind::Population => "population",
            StdKind::Sample => "sample",
        })
    }
}

/// Mean and standard deviation of per-subject accuracies.
pub fn summarize_accuracy(per_subject: &[f64], kind: StdKind) -> Result<(f64, f64)> {
    let n = per_subject.len();
    if n == 0 {
        return Err(Error::Data("no accuracies to summarize".into()));
    }
    let mean = per_subject.iter().sum::<f64>() / n as f64;
    let ss: f64 = per_subject.iter().map(|a| (a - mean).powi(2)).sum();
    let denom = match kind {
        StdKind::Population => n as f64,
        StdKind::Sample if n > 1 => (n - 1) as f64,
        StdKind::Sample => return Ok((mean, 0.0)),
    };
    Ok((mean, (ss / denom).sqrt()))
}

/// Outcome of one leave-one-subject-out fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub subject: usize,
    pub test_accuracy: f64,
    pub mean_cycles: f64,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub checkpoint: String,
}

/// Line-oriented `key = value` results text.
pub fn results_text(variant: &str, folds: &[FoldResult], kind: StdKind) -> Result<String> {
    let accs: Vec<f64> = folds.iter().map(|f| f.test_accuracy).collect();
    let (mean, std) = summarize_accuracy(&accs, kind)?;
    let mut out = String::new();
    writeln!(out, "variant = {variant}").unwrap();
    writeln!(out, "folds = {}", folds.len()).unwrap();
    for f in folds {
        let key = format!("subject.{}", f.subject);
        writeln!(out, "{key}.test_accuracy = {:.6}", f.test_accuracy).unwrap();
        writeln!(out, "{key}.mean_cycles = {:.6}", f.mean_cycles).unwrap();
        writeln!(out, "{key}.best_epoch = {}", f.best_epoch).unwrap();
        writeln!(out, "{key}.val_accuracy = {:.6}", f.val_accuracy).unwrap();
        writeln!(out, "{key}.checkpoint = {}", f.checkpoint).unwrap();
    }
    writeln!(out, "mean_accuracy = {mean:.6}").unwrap();
    writeln!(out, "std_accuracy = {std:.6}").unwrap();
    writeln!(out, "std_convention = {kind}").unwrap();
    Ok(out)
}

/// CSV table with one row per fold.
pub fn results_csv(folds: &[FoldResult]) -> String {
    let mut out = String::from("subject,test_accuracy,mean_cycles,best_epoch,val_accuracy\n");
    for f in folds {
        writeln!(
            out,
            "{},{:.6},{:.6},{},{:.6}",
            f.subject, f.test_accuracy, f.mean_cycles, f.best_epoch, f.val_accuracy
        )
        .unwrap();
    }
    out
}

/// Human-readable per-subject table with mean and std rows, 3 decimals.
pub fn accuracy_table(columns: &[(String, Vec<(usize, f64)>)], kind: StdKind) -> Result<String> {
    let mut subjects: Vec<usize> = columns
        .iter()
        .flat_map(|(_, c)| c.iter().map(|&(s, _)| s))
        .collect();
    subjects.sort_unstable();
    subjects.dedup();
    let width = columns
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut out = format!("{:<8}", "Subject");
    for (name, _) in columns {
        write!(out, " {name:>width$}").unwrap();
    }
    out.push('\n');
    for s in &subjects {
        write!(out, "{:<8}", format!("S{s}")).unwrap();
        for (_, col) in columns {
            match col.iter().find(|&&(id, _)| id == *s) {
                Some(&(_, a)) => write!(out, " {a:>width$.3}").unwrap(),
                None => write!(out, " {:>width$}", "-").unwrap(),
            }
        }
        out.push('\n');
    }
    let stats: Vec<(f64, f64)> = columns
        .iter()
        .map(|(_, c)| summarize_accuracy(&c.iter().map(|&(_, a)| a).collect::<Vec<_>>(), kind))
        .collect::<Result<_>>()?;
    write!(out, "{:<8}", "Acc.").unwrap();
    for (m, _) in &stats {
        write!(out, " {m:>width$.3}").unwrap();
    }
    out.push('\n');
    write!(out, "{:<8}", "Std.").unwrap();
    for (_, s) in &stats {
        write!(out, " {s:>width$.3}").unwrap();
    }
    out.push('\n');
    Ok(out)
}

/// Per-subject accuracies read back from a results CSV.
pub fn parse_results_csv(text: &str) -> Result<Vec<(usize, f64)>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty results file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|&c| c == name)
            .ok_or_else(|| Error::Data(format!("results file has no {name} column")))
    };
    let (si, ai) = (find("subject")?, find("test_accuracy")?);
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Data(format!("malformed results row {}: {line:?}", n + 2));
        let subject = fields
            .get(si)
            .and_then(|f| f.parse().ok())
            .ok_or_else(bad)?;
        let acc = fields
            .get(ai)
            .and_then(|f| f.parse().ok())
            .ok_or_else(bad)?;
        rows.push((subject, acc));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r3(x: f64) -> f64 {
        (x * 1000.0).round() / 1000.0
    }

    #[test]
    fn eegnet_columns() {
        let base = [
            0.532, 0.407, 0.583, 0.440, 0.435, 0.463, 0.560, 0.741, 0.583,
        ];
        let (m, s) = summarize_accuracy(&base, StdKind::Population).unwrap();
        assert_eq!((r3(m), r3(s)), (0.527, 0.099));
        let mhsp = [
            0.519, 0.532, 0.699, 0.463, 0.588, 0.537, 0.681, 0.676, 0.607,
        ];
        let (m, s) = summarize_accuracy(&mhsp, StdKind::Population).unwrap();
        assert_eq!((r3(m), r3(s)), (0.589, 0.078));
    }

    #[test]
    fn single_and_empty() {
        assert_eq!(
            summarize_accuracy(&[0.5], StdKind::Population).unwrap(),
            (0.5, 0.0)
        );
        assert_eq!(
            summarize_accuracy(&[0.5], StdKind::Sample).unwrap(),
            (0.5, 0.0)
        );
        assert!(matches!(
            summarize_accuracy(&[], StdKind::Population),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let (_, s) = summarize_accuracy(&[1.0, 3.0], StdKind::Sample).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        let (_, p) = summarize_accuracy(&[1.0, 3.0], StdKind::Population).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let folds = vec![
            FoldResult {
                subject: 0,
                test_accuracy: 0.75,
                mean_cycles: 2.5,
                best_epoch: 3,
                val_accuracy: 0.8,
                checkpoint: "fold0.ckpt".into(),
            },
            FoldResult {
                subject: 4,
                test_accuracy: 0.5,
                mean_cycles: 1.0,
                best_epoch: 1,
                val_accuracy: 0.6,
                checkpoint: "fold4.ckpt".into(),
            },
        ];
        let rows = parse_results_csv(&results_csv(&folds)).unwrap();
        assert_eq!(rows, vec![(0, 0.75), (4, 0.5)]);
        let text = results_text("mhsp", &folds, StdKind::Population).unwrap();
        assert!(text.contains("mean_accuracy = 0.625000"));
        assert!(text.contains("std_accuracy = 0.125000"));
        let table = accuracy_table(&[("mhsp".into(), rows)], StdKind::Population).unwrap();
        assert!(table.contains("0.625") && table.contains("0.125"));
    }
}
