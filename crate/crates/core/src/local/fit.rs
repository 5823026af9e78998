use serde::{Deserialize, Serialize};

use super::eval::{loss_with_plan, Plan, Workspace};
use super::structure::LocalStructure;
use super::weights::{LocalWeights, ParamSlot};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par::Mode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub init_value: f64,
    /// Samples per update, taken in dataset order; 0 means the full batch.
    pub batch_size: usize,
    /// Give up after this many learning-rate halvings.
    pub max_halvings: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-2, epochs: 8, init_value: 1.0, batch_size: 1, max_halvings: 30 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !self.init_value.is_finite() {
            return Err(Error::Config("init_value must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub weights: LocalWeights,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss after each accepted epoch.
    pub history: Vec<f64>,
    pub final_learning_rate: f64,
    pub halvings: usize,
    /// Live weights whose gradient vanished at the start and which never
    /// moved, e.g. `w₂` of `w₁x₁²cos(w₂x₂)` when both start at zero.
    pub stuck: Vec<ParamSlot>,
}

/// A symbol left its domain during training.
#[derive(Debug, thiserror::Error)]
#[error("training failed in epoch {epoch}: {source}")]
pub struct FitError {
    pub epoch: usize,
    #[source]
    pub source: Error,
    /// Weights and loss at the end of the last completed epoch.
    pub last_weights: LocalWeights,
    pub last_loss: f64,
}

/// Trains every live weight from `cfg.init_value`.
pub fn fit(
    structure: &LocalStructure,
    cfg: &TrainConfig,
    x: &Matrix,
    y: &Matrix,
    mode: Mode,
) -> std::result::Result<FitResult, FitError> {
    fit_from(structure, LocalWeights::filled(structure, cfg.init_value), cfg, x, y, mode)
}

/// Gradient descent on `L = 1/(2N)Σ‖ŷ − y‖²` from the given weights.
///
/// Each epoch walks the data once in order, stepping after every
/// `batch_size` samples. An epoch that raises the loss is undone and
/// repeated at half the learning rate, so the recorded loss never increases.
pub fn fit_from(
    structure: &LocalStructure,
    start: LocalWeights,
    cfg: &TrainConfig,
    x: &Matrix,
    y: &Matrix,
    mode: Mode,
) -> std::result::Result<FitResult, FitError> {
    let fail = |epoch, source, w: &LocalWeights, l| FitError { epoch, source, last_weights: w.clone(), last_loss: l };
    let setup = || -> Result<Plan> {
        cfg.validate()?;
        start.check_shape(structure)?;
        if x.rows() == 0 || x.rows() != y.rows() {
            return Err(Error::Degenerate("training data must be non-empty and aligned".into()));
        }
        if x.cols() != structure.n_inputs() || y.cols() != structure.n_outputs() {
            return Err(Error::Shape("training data does not match the structure".into()));
        }
        Plan::new(structure)
    };
    let plan = setup().map_err(|e| fail(0, e, &start, f64::NAN))?;
    let slots = structure.param_slots();
    let n = x.rows();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };

    let mut weights = start;
    let mut current = loss_with_plan(&plan, &weights, x, y, mode).map_err(|e| fail(0, e, &weights, f64::NAN))?;
    let initial_loss = current;
    let grad0 = plan
        .sse_grad(&weights, x, y, 0..n)
        .map_err(|e| fail(0, e, &weights, initial_loss))?
        .1;
    let start_values = weights.gather(&slots);

    let mut lr = cfg.learning_rate;
    let mut halvings = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut epoch = 0;
    let mut ws = Workspace::new(&plan);
    let mut grad = weights.zeros_like();
    while epoch < cfg.epochs {
        let mut trial = weights.clone();
        let mut step_err = None;
        let mut s = 0;
        while s < n {
            let e = (s + batch).min(n);
            for &slot in &slots {
                grad.set(slot, 0.0);
            }
            match plan.accumulate(&trial, x, y, s..e, &mut ws, &mut grad) {
                Ok(_) => trial.axpy(-lr / (e - s) as f64, &grad, &slots),
                Err(err) => {
                    step_err = Some(err);
                    break;
                }
            }
            s = e;
        }
        if let Some(err) = step_err {
            return Err(fail(epoch, err, &weights, current));
        }
        let next = match loss_with_plan(&plan, &trial, x, y, mode) {
            Ok(l) => l,
            Err(err) => return Err(fail(epoch, err, &weights, current)),
        };
        if next.is_finite() && next <= current {
            weights = trial;
            current = next;
            history.push(current);
            epoch += 1;
        } else {
            if halvings == cfg.max_halvings {
                log::debug!("fit: learning rate exhausted after {halvings} halvings at epoch {epoch}");
                break;
            }
            halvings += 1;
            lr *= 0.5;
        }
    }

    let stuck = slots
        .iter()
        .zip(&start_values)
        .filter(|(&slot, &v0)| grad0.get(slot) == 0.0 && weights.get(slot) == v0)
        .map(|(&slot, _)| slot)
        .collect();
    Ok(FitResult {
        weights,
        initial_loss,
        final_loss: current,
        history,
        final_learning_rate: lr,
        halvings,
        stuck,
    })
}
