//! CSV tables: training curves, per-subject metrics and the strategy
//! comparison. Floats use the shortest representation that round-trips, so
//! identical runs produce identical bytes.

use std::path::Path;

use skullstrip_core::metrics::{AggregateStats, MeanSd, MetricsRecord};
use skullstrip_core::nn::StrategyKind;
use skullstrip_core::training::EpochRecord;

use crate::{CliError, CliResult};

pub const HISTORY_HEADER: [&str; 5] = ["epoch", "train_loss", "val_loss", "val_accuracy", "lr"];
pub const METRICS_HEADER: [&str; 5] = ["subject", "dice", "sensitivity", "specificity", "accuracy"];
pub const COMPARISON_HEADER: [&str; 9] =
    ["strategy", "dice_mean", "dice_sd", "sens_mean", "sens_sd", "spec_mean", "spec_sd", "acc_mean", "acc_sd"];

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.kind() {
        csv::ErrorKind::Io(_) => CliError::io(path, e),
        _ => CliError::new("format", format!("{}: {e}", path.display())),
    }
}

fn write_rows<const N: usize>(path: &Path, header: [&str; N], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn history_rows(records: &[EpochRecord]) -> Vec<Vec<String>> {
    records
        .iter()
        .map(|r| vec![r.epoch.to_string(), num(r.train_loss), num(r.val_loss), num(r.val_accuracy), num(r.lr)])
        .collect()
}

pub fn write_history(path: &Path, records: &[EpochRecord]) -> CliResult<()> {
    write_rows(path, HISTORY_HEADER, &history_rows(records))
}

pub fn read_history(path: &Path) -> CliResult<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(HISTORY_HEADER) {
        return Err(CliError::new(
            "format",
            format!("{}: expected header {}", path.display(), HISTORY_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |what: &str| CliError::new("format", format!("{}: row {}: bad {what}", path.display(), line + 1));
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(HISTORY_HEADER[i]));
        out.push(EpochRecord {
            epoch: rec[0].parse().map_err(|_| bad("epoch"))?,
            train_loss: f(1)?,
            val_loss: f(2)?,
            val_accuracy: f(3)?,
            lr: f(4)?,
        });
    }
    Ok(out)
}

/// Per-subject rows followed by `mean` and `sd` rows.
pub fn write_metrics(path: &Path, records: &[MetricsRecord], stats: &AggregateStats) -> CliResult<()> {
    let mut rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let m = &r.metrics;
            vec![r.subject.clone(), num(m.dice), num(m.sensitivity), num(m.specificity), num(m.accuracy)]
        })
        .collect();
    let cols = [stats.dice, stats.sensitivity, stats.specificity, stats.accuracy];
    rows.push(std::iter::once("mean".to_string()).chain(cols.iter().map(|c| num(c.mean))).collect());
    rows.push(std::iter::once("sd".to_string()).chain(cols.iter().map(|c| num(c.sd))).collect());
    write_rows(path, METRICS_HEADER, &rows)
}

pub fn comparison_row(strategy: StrategyKind, s: &AggregateStats) -> Vec<String> {
    let pair = |m: MeanSd| [num(m.mean), num(m.sd)];
    std::iter::once(strategy.label().to_string())
        .chain([s.dice, s.sensitivity, s.specificity, s.accuracy].into_iter().flat_map(pair))
        .collect()
}

pub fn write_comparison(path: &Path, rows: &[(StrategyKind, AggregateStats)]) -> CliResult<()> {
    let rows: Vec<Vec<String>> = rows.iter().map(|(k, s)| comparison_row(*k, s)).collect();
    write_rows(path, COMPARISON_HEADER, &rows)
}
