use serde::{Deserialize, Serialize};

use super::structure::{LayerKind, LocalStructure};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Trainable values of one transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerWeights {
    /// One inner weight per activation neuron; entries of unweighted
    /// symbols are carried but never read.
    Activation { inner: Vec<f64> },
    Multiplication,
    Summation { w: Matrix },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalWeights {
    pub layers: Vec<LayerWeights>,
}

/// Address of one trainable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamSlot {
    Inner { layer: usize, neuron: usize },
    Sum { layer: usize, from: usize, to: usize },
}

impl LocalWeights {
    /// Every weight set to `value`.
    pub fn filled(structure: &LocalStructure, value: f64) -> Self {
        let layers = (0..structure.depth())
            .map(|k| match structure.kind(k) {
                LayerKind::Activation => LayerWeights::Activation { inner: vec![value; structure.size(k + 1)] },
                LayerKind::Multiplication => LayerWeights::Multiplication,
                LayerKind::Summation => LayerWeights::Summation {
                    w: Matrix::filled(structure.size(k), structure.size(k + 1), value),
                },
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerWeights::Activation { inner } => LayerWeights::Activation { inner: vec![0.0; inner.len()] },
                LayerWeights::Multiplication => LayerWeights::Multiplication,
                LayerWeights::Summation { w } => LayerWeights::Summation { w: Matrix::zeros(w.rows(), w.cols()) },
            })
            .collect();
        Self { layers }
    }

    pub fn check_shape(&self, structure: &LocalStructure) -> Result<()> {
        if self.layers.len() != structure.depth() {
            return Err(Error::Shape(format!(
                "{} weight layers for {} transforms",
                self.layers.len(),
                structure.depth()
            )));
        }
        for (k, l) in self.layers.iter().enumerate() {
            let ok = match (l, structure.kind(k)) {
                (LayerWeights::Activation { inner }, LayerKind::Activation) => inner.len() == structure.size(k + 1),
                (LayerWeights::Multiplication, LayerKind::Multiplication) => true,
                (LayerWeights::Summation { w }, LayerKind::Summation) => {
                    w.rows() == structure.size(k) && w.cols() == structure.size(k + 1)
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!("weights of transform {k} do not match the structure")));
            }
        }
        Ok(())
    }

    pub fn inner(&self, layer: usize) -> &[f64] {
        match &self.layers[layer] {
            LayerWeights::Activation { inner } => inner,
            _ => panic!("transform {layer} has no inner weights"),
        }
    }

    pub fn summation(&self, layer: usize) -> &Matrix {
        match &self.layers[layer] {
            LayerWeights::Summation { w } => w,
            _ => panic!("transform {layer} is not a summation"),
        }
    }

    pub fn get(&self, slot: ParamSlot) -> f64 {
        match slot {
            ParamSlot::Inner { layer, neuron } => self.inner(layer)[neuron],
            ParamSlot::Sum { layer, from, to } => self.summation(layer).get(from, to),
        }
    }

    pub fn slot_mut(&mut self, slot: ParamSlot) -> &mut f64 {
        match slot {
            ParamSlot::Inner { layer, neuron } => match &mut self.layers[layer] {
                LayerWeights::Activation { inner } => &mut inner[neuron],
                _ => panic!("transform {layer} has no inner weights"),
            },
            ParamSlot::Sum { layer, from, to } => match &mut self.layers[layer] {
                LayerWeights::Summation { w } => w.get_mut(from, to),
                _ => panic!("transform {layer} is not a summation"),
            },
        }
    }

    pub fn set(&mut self, slot: ParamSlot, value: f64) {
        *self.slot_mut(slot) = value;
    }

    pub fn gather(&self, slots: &[ParamSlot]) -> Vec<f64> {
        slots.iter().map(|&s| self.get(s)).collect()
    }

    pub fn scatter(&mut self, slots: &[ParamSlot], values: &[f64]) {
        assert_eq!(slots.len(), values.len(), "slot count");
        for (&s, &v) in slots.iter().zip(values) {
            self.set(s, v);
        }
    }

    /// `self += alpha * other` on the given slots.
    pub fn axpy(&mut self, alpha: f64, other: &LocalWeights, slots: &[ParamSlot]) {
        for &s in slots {
            *self.slot_mut(s) += alpha * other.get(s);
        }
    }

    /// Element-wise sum over every entry, live or not.
    pub fn add_assign(&mut self, other: &LocalWeights) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (LayerWeights::Activation { inner: x }, LayerWeights::Activation { inner: y }) => {
                    x.iter_mut().zip(y).for_each(|(p, q)| *p += q)
                }
                (LayerWeights::Summation { w: x }, LayerWeights::Summation { w: y }) => x
                    .as_mut_slice()
                    .iter_mut()
                    .zip(y.as_slice())
                    .for_each(|(p, q)| *p += q),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            match l {
                LayerWeights::Activation { inner } => inner.iter_mut().for_each(|v| *v *= factor),
                LayerWeights::Summation { w } => w.map_inplace(|v| v * factor),
                LayerWeights::Multiplication => {}
            }
        }
    }
}

impl LocalStructure {
    /// Live trainable scalars in a fixed order: transform by transform,
    /// inner weights by neuron, summation weights row-major.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let live = self.live_mask();
        let mut slots = Vec::new();
        for k in 0..self.depth() {
            match self.kind(k) {
                LayerKind::Activation => {
                    for n in 0..self.size(k + 1) {
                        if live[k + 1][n] && self.activation_source(k, n).1.has_inner_weight() {
                            slots.push(ParamSlot::Inner { layer: k, neuron: n });
                        }
                    }
                }
                LayerKind::Multiplication => {}
                LayerKind::Summation => {
                    let z = self.indicator(k);
                    for i in 0..self.size(k) {
                        for j in 0..self.size(k + 1) {
                            if z.get(i, j) && live[k + 1][j] {
                                slots.push(ParamSlot::Sum { layer: k, from: i, to: j });
                            }
                        }
                    }
                }
            }
        }
        slots
    }
}
