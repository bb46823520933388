//! Multi-seed experiments, aggregation and report files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::config::ExperimentConfig;
use crate::engine::oracle::SimulatedOracle;
use crate::engine::run::{CycleReport, Observer, Run};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub reports: Vec<CycleReport>,
}

/// Median and interquartile range across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolation quantile of `values` (need not be sorted).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn spread(values: &[f64]) -> Spread {
    Spread {
        median: quantile(values, 0.5),
        q1: quantile(values, 0.25),
        q3: quantile(values, 0.75),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub cycle_index: usize,
    pub runs: usize,
    pub not_confident_count: Spread,
    pub accuracy: Spread,
    pub f1: Spread,
    pub ece: Spread,
    pub labeled_fraction: Spread,
}

pub fn aggregate(runs: &[SeedRun]) -> Vec<AggregateRow> {
    let cycles = runs.iter().map(|r| r.reports.len()).max().unwrap_or(0);
    (0..cycles)
        .map(|c| {
            let at: Vec<&CycleReport> = runs.iter().filter_map(|r| r.reports.get(c)).collect();
            let col =
                |f: fn(&CycleReport) -> f64| spread(&at.iter().map(|r| f(r)).collect::<Vec<_>>());
            AggregateRow {
                cycle_index: c,
                runs: at.len(),
                not_confident_count: col(|r| r.not_confident_count as f64),
                accuracy: col(|r| r.accuracy),
                f1: col(|r| r.f1),
                ece: col(|r| r.ece),
                labeled_fraction: col(|r| r.labeled_fraction),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub runs: Vec<SeedRun>,
    pub aggregate: Vec<AggregateRow>,
}

/// Runs every seed with the simulated oracle; seeds execute in parallel and
/// results come back in `config.seeds` order.
pub fn run_experiment(
    config: &ExperimentConfig,
    dataset: &Dataset,
    input_hash: &str,
    observer: &dyn Observer,
) -> Result<(ExperimentResult, Vec<Run>)> {
    config.validate()?;
    let finished: Vec<Run> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut run = Run::start(config, dataset, seed, input_hash)?;
            let mut oracle = SimulatedOracle::new(&run.ctx.pool);
            run.run_to_end(&mut oracle, observer)?;
            Ok(run)
        })
        .collect::<Result<_>>()?;
    let runs: Vec<SeedRun> = finished
        .iter()
        .map(|r| SeedRun {
            seed: r.ctx.seed,
            reports: r.reports.clone(),
        })
        .collect();
    let aggregate = aggregate(&runs);
    Ok((ExperimentResult { runs, aggregate }, finished))
}

pub const SUMMARY_HEADER: [&str; 12] = [
    "seed",
    "cycle",
    "lambda",
    "not_confident_count",
    "labeled_count",
    "labeled_fraction",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "ece",
    "slice_size",
];

pub fn reports_jsonl(result: &ExperimentResult) -> String {
    let mut out = String::new();
    for run in &result.runs {
        for r in &run.reports {
            out.push_str(&serde_json::to_string(r).expect("report serializes"));
            out.push('\n');
        }
    }
    out
}

pub fn parse_reports_jsonl(text: &str) -> Result<Vec<CycleReport>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| crate::Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn summary_csv(result: &ExperimentResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| crate::Error::Io(std::io::Error::other(e));
    w.write_record(SUMMARY_HEADER).map_err(io)?;
    for run in &result.runs {
        for r in &run.reports {
            w.write_record([
                r.seed.to_string(),
                r.cycle_index.to_string(),
                r.lambda.to_string(),
                r.not_confident_count.to_string(),
                r.labeled_count.to_string(),
                r.labeled_fraction.to_string(),
                r.accuracy.to_string(),
                r.precision.to_string(),
                r.recall.to_string(),
                r.f1.to_string(),
                r.ece.to_string(),
                r.slice_size.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))
}

/// Writes `resolved.cfg`, `reports.jsonl`, `summary.csv`, `aggregate.json`,
/// `timings.csv` and one checkpoint per seed under `checkpoints/`.
pub fn write_outputs(
    out_dir: &Path,
    config: &ExperimentConfig,
    result: &ExperimentResult,
    runs: &[Run],
) -> Result<()> {
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    fs::write(out_dir.join("resolved.cfg"), config.to_toml())?;
    fs::write(out_dir.join("reports.jsonl"), reports_jsonl(result))?;
    fs::write(out_dir.join("summary.csv"), summary_csv(result)?)?;
    fs::write(
        out_dir.join("aggregate.json"),
        serde_json::to_string_pretty(&result.aggregate)? + "\n",
    )?;
    let mut timings = fs::File::create(out_dir.join("timings.csv"))?;
    writeln!(timings, "seed,cycle,wall_time_seconds")?;
    for run in &result.runs {
        for r in &run.reports {
            writeln!(
                timings,
                "{},{},{}",
                r.seed, r.cycle_index, r.wall_time_seconds
            )?;
        }
    }
    for run in runs {
        fs::write(
            out_dir
                .join("checkpoints")
                .join(format!("seed-{}.ualc", run.ctx.seed)),
            run.checkpoint(),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        let s = spread(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!((s.q1, s.median, s.q3, s.iqr()), (2.0, 3.0, 4.0, 2.0));
    }
}
