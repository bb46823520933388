//! Aggregate tables over report directories, as CSV or JSON.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::Method;
use crate::engine::experiment::{parse_reports_jsonl, quantile};
use crate::engine::CycleReport;
use crate::error::{Error, Result};

pub const NOT_CONFIDENT_FILE: &str = "not_confident.csv";
pub const LEARNING_CURVE_FILE: &str = "learning_curve.csv";
pub const JSON_FILE: &str = "export.json";

/// Median not-confident count across seeds for one (method, λ, cycle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotConfidentRow {
    pub method: Method,
    pub lambda: f64,
    pub cycle: usize,
    pub runs: usize,
    pub median_not_confident: f64,
}

/// Test accuracy against the labeled fraction after one cycle of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurveRow {
    pub method: Method,
    pub lambda: f64,
    pub seed: u64,
    pub cycle: usize,
    pub labeled_count: usize,
    pub pool_size: usize,
    pub labeled_fraction: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportTables {
    pub not_confident: Vec<NotConfidentRow>,
    pub learning_curve: Vec<LearningCurveRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!(
                "unknown export format {other:?} (csv or json)"
            ))),
        }
    }
}

fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            find_reports(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "reports.jsonl") {
            out.push(path);
        }
    }
    Ok(())
}

/// Every report in every `reports.jsonl` below `dir`.
pub fn load_reports(dir: &Path) -> Result<Vec<CycleReport>> {
    let mut files = Vec::new();
    find_reports(dir, &mut files)?;
    files.sort();
    let mut reports = Vec::new();
    for f in files {
        reports.extend(parse_reports_jsonl(&fs::read_to_string(&f)?)?);
    }
    if reports.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no reports under {}",
            dir.display()
        )));
    }
    Ok(reports)
}

pub fn tables(reports: &[CycleReport]) -> ExportTables {
    let mut groups: BTreeMap<(&str, u64, usize), (Method, f64, Vec<f64>)> = BTreeMap::new();
    for r in reports {
        let key = (r.method.as_str(), r.lambda.to_bits(), r.cycle_index);
        groups
            .entry(key)
            .or_insert_with(|| (r.method, r.lambda, Vec::new()))
            .2
            .push(r.not_confident_count as f64);
    }
    let mut not_confident: Vec<NotConfidentRow> = groups
        .into_iter()
        .map(
            |((_, _, cycle), (method, lambda, counts))| NotConfidentRow {
                method,
                lambda,
                cycle,
                runs: counts.len(),
                median_not_confident: quantile(&counts, 0.5),
            },
        )
        .collect();
    not_confident.sort_by(|a, b| {
        (a.method.as_str(), a.lambda, a.cycle)
            .partial_cmp(&(b.method.as_str(), b.lambda, b.cycle))
            .expect("lambda is finite")
    });
    let mut learning_curve: Vec<LearningCurveRow> = reports
        .iter()
        .map(|r| LearningCurveRow {
            method: r.method,
            lambda: r.lambda,
            seed: r.seed,
            cycle: r.cycle_index,
            labeled_count: r.labeled_count,
            pool_size: r.pool_size,
            labeled_fraction: r.labeled_count as f64 / r.pool_size as f64,
            accuracy: r.accuracy,
        })
        .collect();
    learning_curve.sort_by(|a, b| {
        (a.method.as_str(), a.lambda, a.seed, a.cycle)
            .partial_cmp(&(b.method.as_str(), b.lambda, b.seed, b.cycle))
            .expect("lambda is finite")
    });
    ExportTables {
        not_confident,
        learning_curve,
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn read_table<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes the tables into `out_dir`; returns the files written.
pub fn write(tables: &ExportTables, out_dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    match format {
        Format::Csv => {
            let a = out_dir.join(NOT_CONFIDENT_FILE);
            let b = out_dir.join(LEARNING_CURVE_FILE);
            write_table(&a, &tables.not_confident)?;
            write_table(&b, &tables.learning_curve)?;
            Ok(vec![a, b])
        }
        Format::Json => {
            let p = out_dir.join(JSON_FILE);
            fs::write(&p, serde_json::to_string_pretty(tables)? + "\n")?;
            Ok(vec![p])
        }
    }
}

/// Reads tables previously written by [`write`].
pub fn read(dir: &Path, format: Format) -> Result<ExportTables> {
    match format {
        Format::Csv => Ok(ExportTables {
            not_confident: read_table(&dir.join(NOT_CONFIDENT_FILE))?,
            learning_curve: read_table(&dir.join(LEARNING_CURVE_FILE))?,
        }),
        Format::Json => Ok(serde_json::from_str(&fs::read_to_string(
            dir.join(JSON_FILE),
        )?)?),
    }
}
