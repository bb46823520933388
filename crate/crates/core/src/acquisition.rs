//! Acquisition functions, query selection and not-confident counting.
//!
//! Every score follows the convention "higher means more uncertain".

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bayes::PredictiveDistribution;
use crate::data::SampleId;
use crate::error::{Error, Result};
use crate::numeric::Rng;

const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LeastConfidence,
    Margin,
    Entropy,
    PredictiveEntropy,
    PredictiveVariance,
    /// Uniform random scores; a baseline, not an uncertainty measure.
    Random,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::LeastConfidence => "least_confidence",
            Method::Margin => "margin",
            Method::Entropy => "entropy",
            Method::PredictiveEntropy => "predictive_entropy",
            Method::PredictiveVariance => "predictive_variance",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "least_confidence" => Method::LeastConfidence,
            "margin" => Method::Margin,
            "entropy" => Method::Entropy,
            "predictive_entropy" => Method::PredictiveEntropy,
            "predictive_variance" => Method::PredictiveVariance,
            "random" => Method::Random,
            other => {
                return Err(Error::Config(format!(
                    "unknown acquisition method '{other}'"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub sample_id: SampleId,
    pub method: Method,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub cycle_index: usize,
    pub sample_ids: Vec<SampleId>,
    pub scores: Vec<f64>,
    pub budget: usize,
}

fn check_normalized(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.is_empty()
        || (sum - 1.0).abs() > NORMALIZATION_TOL
        || probs.iter().any(|p| !(*p >= 0.0))
    {
        return Err(Error::Contract(format!(
            "probabilities must be non-negative and sum to 1, sum = {sum}"
        )));
    }
    Ok(())
}

pub fn least_confidence(probs: &[f64]) -> Result<f64> {
    check_normalized(probs)?;
    Ok(1.0 - probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// `1 − (p₍₁₎ − p₍₂₎)` over the two largest probabilities.
pub fn margin(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::Contract(format!(
            "margin needs K >= 2, got {}",
            probs.len()
        )));
    }
    check_normalized(probs)?;
    let (mut p1, mut p2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > p1 {
            p2 = p1;
            p1 = p;
        } else if p > p2 {
            p2 = p;
        }
    }
    Ok(1.0 - (p1 - p2))
}

/// Shannon entropy in nats with `0 · ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    check_normalized(probs)?;
    Ok(-probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

pub fn predictive_entropy(dist: &PredictiveDistribution) -> Result<f64> {
    entropy(dist.mean.data())
}

/// Per-class variance across draws, averaged over classes.
pub fn predictive_variance(dist: &PredictiveDistribution) -> Result<f64> {
    let m = dist.samples.shape()[0];
    if m < 2 {
        return Err(Error::Contract(format!(
            "predictive variance needs M >= 2, got {m}"
        )));
    }
    let k = dist.class_count();
    let mut total = 0.0;
    for c in 0..k {
        let mean = dist.mean.data()[c];
        let var = (0..m)
            .map(|i| (dist.samples.row(i)[c] - mean).powi(2))
            .sum::<f64>()
            / m as f64;
        total += var;
    }
    Ok(total / k as f64)
}

/// Scores one predictive distribution.
///
/// `least_confidence`, `margin` and `entropy` act on the MC mean.
pub fn score(method: Method, dist: &PredictiveDistribution, rng: &mut Rng) -> Result<f64> {
    let mean = dist.mean.data();
    match method {
        Method::LeastConfidence => least_confidence(mean),
        Method::Margin => margin(mean),
        Method::Entropy | Method::PredictiveEntropy => predictive_entropy(dist),
        Method::PredictiveVariance => predictive_variance(dist),
        Method::Random => Ok(rng.uniform()),
    }
}

pub fn score_all(
    method: Method,
    ids: &[SampleId],
    dists: &[PredictiveDistribution],
    rng: &mut Rng,
) -> Result<Vec<UncertaintyScore>> {
    if ids.len() != dists.len() {
        return Err(Error::dim("score_all", &[ids.len()], &[dists.len()]));
    }
    ids.iter()
        .zip(dists)
        .map(|(&sample_id, d)| {
            Ok(UncertaintyScore {
                sample_id,
                method,
                value: score(method, d, rng)?,
            })
        })
        .collect()
}

/// Highest scores first; equal scores go to the lower sample id.
pub fn ranking_order(a: &UncertaintyScore, b: &UncertaintyScore) -> Ordering {
    b.value
        .total_cmp(&a.value)
        .then(a.sample_id.cmp(&b.sample_id))
}

pub fn select_queries(
    scores: &[UncertaintyScore],
    budget: usize,
    cycle_index: usize,
) -> QueryBatch {
    let mut sorted: Vec<&UncertaintyScore> = scores.iter().collect();
    sorted.sort_by(|a, b| ranking_order(a, b));
    sorted.truncate(budget);
    QueryBatch {
        cycle_index,
        sample_ids: sorted.iter().map(|s| s.sample_id).collect(),
        scores: sorted.iter().map(|s| s.value).collect(),
        budget,
    }
}

/// Number of distributions whose largest mean probability is below `tau`.
pub fn count_not_confident(dists: &[PredictiveDistribution], tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Parameter(format!(
            "tau must lie in (0, 1), got {tau}"
        )));
    }
    Ok(dists.iter().filter(|d| d.confidence() < tau).count())
}

/// Writes `sample_id,method,value` rows.
pub fn write_scores_csv<W: Write>(scores: &[UncertaintyScore], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "method", "value"])
        .map_err(csv_err)?;
    for s in scores {
        w.write_record([
            s.sample_id.to_string(),
            s.method.to_string(),
            format!("{:e}", s.value),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(text: &str) -> Result<Vec<UncertaintyScore>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let bad = |m: String| Error::Parse { line, message: m };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", rec.len())));
        }
        out.push(UncertaintyScore {
            sample_id: rec[0].parse().map_err(|e| bad(format!("sample_id: {e}")))?,
            method: rec[1].parse()?,
            value: rec[2].parse().map_err(|e| bad(format!("value: {e}")))?,
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn dist(rows: &[&[f64]]) -> PredictiveDistribution {
        let k = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        PredictiveDistribution::from_samples(Tensor::new(&[rows.len(), k], data).unwrap(), 1.0)
    }

    #[test]
    fn least_confidence_examples() {
        assert_eq!(least_confidence(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(least_confidence(&[0.25; 4]).unwrap(), 0.75);
        assert!((least_confidence(&[0.6, 0.3, 0.1]).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(
            least_confidence(&[0.5, 0.6]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin(&[0.25; 4]).unwrap(), 1.0);
        assert_eq!(margin(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((margin(&[0.5, 0.3, 0.2]).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(margin(&[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0]).unwrap(), 0.0);
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn predictive_measures() {
        let d = dist(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((predictive_entropy(&d).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(predictive_variance(&d).unwrap(), 0.25);
        let same = dist(&[&[0.3, 0.7], &[0.3, 0.7]]);
        assert_eq!(predictive_variance(&same).unwrap(), 0.0);
        assert!(predictive_variance(&dist(&[&[0.3, 0.7]])).is_err());
        let det = dist(&[&[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(predictive_entropy(&det).unwrap(), 0.0);
    }

    fn s(id: u64, v: f64) -> UncertaintyScore {
        UncertaintyScore {
            sample_id: id,
            method: Method::Entropy,
            value: v,
        }
    }

    #[test]
    fn selection_rules() {
        let scores = vec![s(5, 0.2), s(3, 0.9), s(1, 0.2), s(2, 0.5)];
        assert!(select_queries(&scores, 0, 0).sample_ids.is_empty());
        assert_eq!(select_queries(&scores, 10, 0).sample_ids, vec![3, 2, 1, 5]);
        let b = select_queries(&scores, 3, 4);
        assert_eq!(b.sample_ids, vec![3, 2, 1]);
        assert_eq!(b.scores, vec![0.9, 0.5, 0.2]);
        assert_eq!((b.cycle_index, b.budget), (4, 3));
    }

    #[test]
    fn not_confident_counts() {
        let onehot = dist(&[&[1.0, 0.0, 0.0, 0.0]]);
        let uniform = dist(&[&[0.25; 4]]);
        assert_eq!(
            count_not_confident(&[onehot.clone(), onehot.clone()], 0.9).unwrap(),
            0
        );
        assert_eq!(
            count_not_confident(&[uniform.clone(), uniform], 0.3).unwrap(),
            2
        );
        assert!(count_not_confident(&[onehot], 1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let scores = vec![s(5, 0.123456789012345), s(3, 1e-300)];
        let mut buf = Vec::new();
        write_scores_csv(&scores, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_id,method,value\n5,entropy,"));
        assert_eq!(read_scores_csv(&text).unwrap(), scores);
    }
}
