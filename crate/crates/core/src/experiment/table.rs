//! Per-seed result files and the aggregated accuracy/compression table.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, ResultRow};
use crate::betavae::LossBreakdown;
use crate::nn::{DatasetKind, ModelKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "md" | "markdown" => Ok(TableFormat::Markdown),
            _ => Err(Error::Config(format!("unknown table format `{s}` (csv or md)"))),
        }
    }
}

/// Flat on-disk form of [`ResultRow`].
#[derive(Debug, Serialize, Deserialize)]
struct RowRecord {
    dataset: DatasetKind,
    model: ModelKind,
    beta: Option<f64>,
    pruned: bool,
    seed: u64,
    accuracy: f64,
    raw_bytes: u64,
    compressed_bytes: u64,
    kl: f64,
    recon: f64,
    ce: f64,
    total: f64,
    loss_beta: f64,
    collapsed: bool,
    sparsity: f64,
    /// `;`-separated; the training-loss per-dimension KL is not persisted.
    per_dim_kl: String,
}

fn floats(s: &str) -> Result<Vec<f64>> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|e| Error::Config(format!("per_dim_kl `{p}`: {e}"))))
        .collect()
}

/// Writes rows as CSV, atomically.
pub fn write_rows(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(RowRecord {
            dataset: r.dataset,
            model: r.kind,
            beta: r.beta,
            pruned: r.pruned,
            seed: r.seed,
            accuracy: r.accuracy,
            raw_bytes: r.raw_bytes,
            compressed_bytes: r.compressed_bytes,
            kl: r.loss.kl,
            recon: r.loss.recon,
            ce: r.loss.ce,
            total: r.loss.total,
            loss_beta: r.loss.beta,
            collapsed: r.collapsed,
            sparsity: r.sparsity,
            per_dim_kl: r.per_dim_kl.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(";"),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Reads one rows file, or every `*.csv` file in a directory.
pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "csv") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut rows = Vec::new();
    for f in files {
        let mut r = csv::Reader::from_path(&f)?;
        for rec in r.deserialize::<RowRecord>() {
            let rec = rec?;
            rows.push(ResultRow {
                dataset: rec.dataset,
                kind: rec.model,
                beta: rec.beta,
                pruned: rec.pruned,
                seed: rec.seed,
                accuracy: rec.accuracy,
                raw_bytes: rec.raw_bytes,
                compressed_bytes: rec.compressed_bytes,
                loss: LossBreakdown {
                    kl: rec.kl,
                    recon: rec.recon,
                    ce: rec.ce,
                    beta: rec.loss_beta,
                    total: rec.total,
                    per_dim_kl: Vec::new(),
                },
                per_dim_kl: floats(&rec.per_dim_kl)?,
                collapsed: rec.collapsed,
                sparsity: rec.sparsity,
            });
        }
    }
    Ok(rows)
}

/// Seed statistics for one (dataset, model, beta, pruned) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub dataset: DatasetKind,
    pub kind: ModelKind,
    pub beta: Option<f64>,
    pub pruned: bool,
    pub seeds: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    /// Compressed size in `unit`.
    pub comp_mean: f64,
    pub comp_std: f64,
    pub unit: &'static str,
    /// Fewer than three seeds contributed.
    pub flagged: bool,
}

fn unit(dataset: DatasetKind) -> (&'static str, f64) {
    match dataset {
        DatasetKind::Mnist => ("KB", 1e3),
        DatasetKind::Cifar10 => ("MB", 1e6),
    }
}

/// Two-pass mean and population standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates rows that all belong to the same configuration.
pub fn aggregate(rows: &[ResultRow]) -> Result<AggregateRow> {
    let first = rows.first().ok_or_else(|| Error::invalid("aggregate", "no rows"))?;
    let key = |r: &ResultRow| (r.dataset, r.kind, r.beta.map(f64::to_bits), r.pruned);
    if rows.iter().any(|r| key(r) != key(first)) {
        return Err(Error::invalid("aggregate", "rows mix configurations"));
    }
    let (unit, scale) = unit(first.dataset);
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let comp: Vec<f64> = rows.iter().map(|r| r.compressed_bytes as f64 / scale).collect();
    let (acc_mean, acc_std) = mean_std(&acc);
    let (comp_mean, comp_std) = mean_std(&comp);
    Ok(AggregateRow {
        dataset: first.dataset,
        kind: first.kind,
        beta: first.beta,
        pruned: first.pruned,
        seeds: rows.len(),
        acc_mean,
        acc_std,
        comp_mean,
        comp_std,
        unit,
        flagged: rows.len() < 3,
    })
}

fn order_key(dataset: DatasetKind, kind: ModelKind, beta: Option<f64>, pruned: bool) -> (u8, u8, u64, bool) {
    let d = match dataset {
        DatasetKind::Mnist => 0,
        DatasetKind::Cifar10 => 1,
    };
    let k = match kind {
        ModelKind::CnnClassif => 0,
        ModelKind::BetaVaeClassif => 1,
    };
    (d, k, beta.unwrap_or(0.0).to_bits(), pruned)
}

/// Groups rows by configuration, in table order: datasets, then the CNN,
/// then each beta ascending, unpruned before pruned.
pub fn aggregate_all(rows: &[ResultRow]) -> Result<Vec<AggregateRow>> {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by_key(|r| order_key(r.dataset, r.kind, r.beta, r.pruned));
    sorted
        .chunk_by(|a, b| order_key(a.dataset, a.kind, a.beta, a.pruned) == order_key(b.dataset, b.kind, b.beta, b.pruned))
        .map(|group| aggregate(&group.iter().map(|r| (*r).clone()).collect::<Vec<_>>()))
        .collect()
}

fn model_label(kind: ModelKind, pruned: bool) -> String {
    let base = match kind {
        ModelKind::CnnClassif => "CNN-Classif.",
        ModelKind::BetaVaeClassif => "Beta-VAE-Classif.",
    };
    if pruned {
        format!("{base} w/ pruning")
    } else {
        base.to_string()
    }
}

fn beta_label(beta: Option<f64>) -> String {
    beta.map(|b| b.to_string()).unwrap_or_else(|| "-".into())
}

/// Renders aggregates; an empty slice gives the header alone.
pub fn render_table(aggs: &[AggregateRow], format: TableFormat) -> Result<String> {
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["model", "beta", "pruned", "acc_mean", "acc_std", "comp_mean", "comp_std", "unit"])?;
            for a in aggs {
                w.write_record([
                    a.kind.as_str().to_string(),
                    beta_label(a.beta),
                    a.pruned.to_string(),
                    a.acc_mean.to_string(),
                    a.acc_std.to_string(),
                    a.comp_mean.to_string(),
                    a.comp_std.to_string(),
                    a.unit.to_string(),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
        }
        TableFormat::Markdown => {
            let mut s = String::new();
            let mut current = None;
            if aggs.is_empty() {
                s.push_str("| Model | Beta | Acc. (%) | Comp. |\n|---|---|---|---|\n");
            }
            for a in aggs {
                if current != Some(a.dataset) {
                    if current.is_some() {
                        s.push('\n');
                    }
                    current = Some(a.dataset);
                    let _ = writeln!(s, "**{}**\n", a.dataset.as_str().to_uppercase());
                    let _ = writeln!(s, "| Model | Beta | Acc. (%) | Comp. ({}) |\n|---|---|---|---|", a.unit);
                }
                let flag = if a.flagged { format!(" (n={})", a.seeds) } else { String::new() };
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.2} ± {:.1}{flag} | {:.2} ± {:.3} |",
                    model_label(a.kind, a.pruned),
                    beta_label(a.beta),
                    a.acc_mean,
                    a.acc_std,
                    a.comp_mean,
                    a.comp_std
                );
            }
            Ok(s)
        }
    }
}

/// Renders and writes the table atomically.
pub fn emit_table(aggs: &[AggregateRow], format: TableFormat, path: &Path) -> Result<()> {
    write_atomic(path, render_table(aggs, format)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(acc: f64, bytes: u64, kind: ModelKind, beta: Option<f64>, pruned: bool) -> ResultRow {
        ResultRow {
            dataset: DatasetKind::Mnist,
            kind,
            beta,
            pruned,
            seed: 1,
            accuracy: acc,
            raw_bytes: 1000,
            compressed_bytes: bytes,
            loss: LossBreakdown::new(1.0, vec![0.25, 0.5], 3.0, 0.1),
            per_dim_kl: vec![0.125, 1e-7],
            collapsed: false,
            sparsity: 0.5,
        }
    }

    #[test]
    fn closed_form_statistics() {
        let rows: Vec<_> = [90.0, 92.0, 94.0]
            .iter()
            .map(|&a| row(a, 2000, ModelKind::CnnClassif, None, false))
            .collect();
        let a = aggregate(&rows).unwrap();
        assert!((a.acc_mean - 92.0).abs() < 1e-12);
        assert!((a.acc_std - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((a.comp_mean, a.comp_std, a.unit), (2.0, 0.0, "KB"));
        assert!(!a.flagged);
        let single = aggregate(&rows[..1]).unwrap();
        assert_eq!(single.acc_std, 0.0);
        assert!(single.flagged);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn table_order_and_grouping() {
        let rows = vec![
            row(50.0, 1, ModelKind::BetaVaeClassif, Some(10.0), true),
            row(51.0, 1, ModelKind::BetaVaeClassif, Some(3.0), false),
            row(52.0, 1, ModelKind::CnnClassif, None, true),
            row(53.0, 1, ModelKind::CnnClassif, None, false),
            row(54.0, 1, ModelKind::CnnClassif, None, false),
        ];
        let aggs = aggregate_all(&rows).unwrap();
        let order: Vec<_> = aggs.iter().map(|a| (a.kind, a.beta, a.pruned, a.seeds)).collect();
        assert_eq!(
            order,
            vec![
                (ModelKind::CnnClassif, None, false, 2),
                (ModelKind::CnnClassif, None, true, 1),
                (ModelKind::BetaVaeClassif, Some(3.0), false, 1),
                (ModelKind::BetaVaeClassif, Some(10.0), true, 1),
            ]
        );
    }

    #[test]
    fn empty_table_is_header_only() {
        assert_eq!(
            render_table(&[], TableFormat::Csv).unwrap(),
            "model,beta,pruned,acc_mean,acc_std,comp_mean,comp_std,unit\n"
        );
    }

    #[test]
    fn csv_reparses_numbers() {
        let rows = vec![
            row(97.123456789, 84_250, ModelKind::CnnClassif, None, true),
            row(96.5, 260_280, ModelKind::BetaVaeClassif, Some(1.0), false),
        ];
        let aggs = aggregate_all(&rows).unwrap();
        let text = render_table(&aggs, TableFormat::Csv).unwrap();
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let parsed: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(parsed.len(), aggs.len());
        for (rec, a) in parsed.iter().zip(&aggs) {
            assert_eq!(rec[3].parse::<f64>().unwrap(), a.acc_mean);
            assert_eq!(rec[5].parse::<f64>().unwrap(), a.comp_mean);
            assert_eq!(rec[6].parse::<f64>().unwrap(), a.comp_std);
        }
        assert!(render_table(&aggs, TableFormat::Markdown).unwrap().contains("w/ pruning"));
    }

    #[test]
    fn rows_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            row(97.5, 84_250, ModelKind::CnnClassif, None, true),
            row(10.0, 3, ModelKind::BetaVaeClassif, Some(10.0), false),
        ];
        let path = dir.path().join("rows.csv");
        write_rows(&rows, &path).unwrap();
        let back = read_rows(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.per_dim_kl, b.per_dim_kl);
            assert_eq!((a.accuracy, a.compressed_bytes, a.beta), (b.accuracy, b.compressed_bytes, b.beta));
            assert_eq!(a.loss.total, b.loss.total);
        }
    }
}
