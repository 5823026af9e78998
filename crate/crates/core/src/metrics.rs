//! NRMSE, percentage error and the coefficient error E_c.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local::{CanonicalEquation, Term};
use crate::matrix::Matrix;

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// `√(mean (pred − truth)²) / σ_y`.
pub fn nrmse(pred: &[f64], truth: &[f64], sigma_y: f64) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    if sigma_y.is_nan() || sigma_y <= 0.0 {
        return Err(Error::Degenerate(format!("output standard deviation is {sigma_y}")));
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt() / sigma_y)
}

/// Mean over outputs of the per-output NRMSE.
pub fn nrmse_multi(pred: &Matrix, truth: &Matrix, sigma_y: &[f64]) -> Result<f64> {
    if pred.rows() != truth.rows() || pred.cols() != truth.cols() || sigma_y.len() != truth.cols() {
        return Err(Error::Shape("prediction, truth and σ_y disagree".into()));
    }
    let mut total = 0.0;
    for (o, &s) in sigma_y.iter().enumerate() {
        total += nrmse(&pred.column(o), &truth.column(o), s)?;
    }
    Ok(total / sigma_y.len() as f64)
}

/// `1 / (1 + NRMSE)`.
pub fn reward(nrmse: f64) -> f64 {
    1.0 / (1.0 + nrmse)
}

/// `100·|ŵ − w|/|w|`, capped at 100.
pub fn percentage_error(truth: f64, learned: f64) -> f64 {
    if truth == 0.0 {
        return if learned == 0.0 { 0.0 } else { 100.0 };
    }
    (100.0 * (learned - truth).abs() / truth.abs()).min(100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermMatch {
    pub output: usize,
    pub truth: String,
    pub learned: Option<String>,
    /// One percentage error per coefficient slot of the true term.
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub e_c_percent: f64,
    pub slots: usize,
    pub matches: Vec<TermMatch>,
    /// Learned terms with no counterpart in the truth. Listed only; they do
    /// not enter the average.
    pub spurious: Vec<(usize, String)>,
}

fn label(t: &Term) -> String {
    crate::local::equation::render_sum(std::slice::from_ref(t), 4)
}

/// Average percentage error over every coefficient slot of `truth`.
pub fn e_c(truth: &CanonicalEquation, learned: &CanonicalEquation) -> Result<CoefficientReport> {
    if truth.n_outputs() != learned.n_outputs() {
        return Err(Error::Shape(format!(
            "truth has {} outputs, learned equation {}",
            truth.n_outputs(),
            learned.n_outputs()
        )));
    }
    let mut matches = Vec::new();
    let mut spurious = Vec::new();
    let mut sum = 0.0;
    let mut slots = 0;
    for (o, (tt, lt)) in truth.outputs.iter().zip(&learned.outputs).enumerate() {
        let mut used = vec![false; lt.len()];
        for t in tt {
            let sig = t.signature();
            let ts = t.slots();
            // among same-shaped learned terms prefer the closest one
            let best = lt
                .iter()
                .enumerate()
                .filter(|(i, l)| !used[*i] && l.signature() == sig)
                .map(|(i, l)| {
                    let errs: Vec<f64> = ts.iter().zip(l.slots()).map(|(&a, b)| percentage_error(a, b)).collect();
                    (i, errs)
                })
                .min_by(|a, b| a.1.iter().sum::<f64>().total_cmp(&b.1.iter().sum::<f64>()));
            let (learned_label, errors) = match best {
                Some((i, errs)) => {
                    used[i] = true;
                    (Some(label(&lt[i])), errs)
                }
                None => (None, vec![100.0; ts.len()]),
            };
            sum += errors.iter().sum::<f64>();
            slots += errors.len();
            matches.push(TermMatch { output: o, truth: label(t), learned: learned_label, errors });
        }
        for (i, l) in lt.iter().enumerate() {
            if !used[i] {
                spurious.push((o, label(l)));
            }
        }
    }
    if slots == 0 {
        return Err(Error::Degenerate("the true equation has no coefficient slots".into()));
    }
    Ok(CoefficientReport { e_c_percent: sum / slots as f64, slots, matches, spurious })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nrmse_train: f64,
    pub nrmse_test: Option<f64>,
    pub e_c_percent: Option<f64>,
    pub coefficients: Option<CoefficientReport>,
}
