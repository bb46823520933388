use serde::{Deserialize, Serialize};

use crate::bayes::{PredictiveDistribution, VariationalModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ece: f64,
}

/// `counts[truth][predicted]`.
pub fn confusion_matrix(
    predicted: &[usize],
    truth: &[usize],
    classes: usize,
) -> Result<Vec<Vec<usize>>> {
    if predicted.len() != truth.len() {
        return Err(Error::dim(
            "confusion_matrix",
            &[predicted.len()],
            &[truth.len()],
        ));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::Index(format!(
                "class {} outside 0..{classes}",
                p.max(t)
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and macro-averaged precision/recall/F1 (0/0 counts as 0); `ece`
/// is left at 0.
pub fn classification_metrics(
    predicted: &[usize],
    truth: &[usize],
    classes: usize,
) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::EmptyInput("no predictions to score".into()));
    }
    let cm = confusion_matrix(predicted, truth, classes)?;
    let correct: usize = (0..classes).map(|k| cm[k][k]).sum();
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for k in 0..classes {
        let tp = cm[k][k];
        let predicted_k: usize = (0..classes).map(|t| cm[t][k]).sum();
        let actual_k: usize = cm[k].iter().sum();
        let pk = ratio(tp, predicted_k);
        let rk = ratio(tp, actual_k);
        p += pk;
        r += rk;
        f += if pk + rk == 0.0 {
            0.0
        } else {
            2.0 * pk * rk / (pk + rk)
        };
    }
    let c = classes as f64;
    Ok(Metrics {
        accuracy: ratio(correct, truth.len()),
        precision: p / c,
        recall: r / c,
        f1: f / c,
        ece: 0.0,
    })
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::dim("ece", &[confidences.len()], &[correct.len()]));
    }
    if bins == 0 {
        return Err(Error::Parameter("ece needs at least one bin".into()));
    }
    if confidences.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

/// Metrics of predictive-mean argmax predictions on `test`.
pub fn evaluate_distributions(
    dists: &[PredictiveDistribution],
    test: &Dataset,
    bins: usize,
) -> Result<Metrics> {
    let predicted: Vec<usize> = dists.iter().map(|d| d.argmax()).collect();
    let mut m = classification_metrics(&predicted, &test.labels, test.class_count)?;
    let conf: Vec<f64> = dists.iter().map(|d| d.confidence()).collect();
    let correct: Vec<bool> = predicted
        .iter()
        .zip(&test.labels)
        .map(|(p, t)| p == t)
        .collect();
    m.ece = ece(&conf, &correct, bins)?;
    Ok(m)
}

pub fn evaluate<M: VariationalModel + ?Sized>(
    model: &M,
    test: &Dataset,
    m: usize,
    lambda: f64,
    bins: usize,
    rng: &mut Rng,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test set is empty".into()));
    }
    let dists = model.predict_mc(&test.features, m, lambda, rng)?;
    evaluate_distributions(&dists, test, bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_predictors() {
        let truth = [0, 1, 0, 1];
        let m = classification_metrics(&truth, &truth, 2).unwrap();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        let c = classification_metrics(&[0, 0, 0, 0], &truth, 2).unwrap();
        assert_eq!(c.accuracy, 0.5);
        assert!((c.f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ece_examples() {
        assert_eq!(
            ece(&[1.0; 4], &[true, false, true, false], 15).unwrap(),
            0.5
        );
        // Confidence 0.75 in one bin with 3 of 4 correct.
        assert!(
            ece(&[0.75; 4], &[true, true, true, false], 10)
                .unwrap()
                .abs()
                < 1e-15
        );
        assert!(ece(&[0.5], &[true, false], 10).is_err());
        assert!(ece(&[0.5], &[true], 0).is_err());
    }
}
