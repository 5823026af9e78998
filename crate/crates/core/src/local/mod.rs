//! The LoCaL network: structure, weights, evaluation, training and
//! equation extraction.

pub mod equation;
pub mod eval;
pub mod fit;
pub mod structure;
pub mod weights;

pub use equation::{extract_equation, CanonicalEquation, Func, Power, Term};
pub use eval::{forward, gradients, layer_values, loss, predict, Plan};
pub use fit::{fit, fit_from, FitError, FitResult, TrainConfig};
pub use structure::{fan_out_block, Indicator, LayerKind, LocalStructure};
pub use weights::{LayerWeights, LocalWeights, ParamSlot};
