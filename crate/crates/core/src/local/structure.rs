use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symbols::{SymbolLibrary, SymbolOp};

/// How layer `k + 1` is computed from layer `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Activation,
    Multiplication,
    Summation,
}

/// Binary connection matrix between two adjacent layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct Indicator {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Indicator {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![true; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    /// Row-major bits; panics on a length mismatch.
    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), rows * cols, "indicator length");
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.bits[i * self.cols + j] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of incoming connections of column `j`.
    pub fn fan_in(&self, j: usize) -> usize {
        (0..self.rows).filter(|&i| self.get(i, j)).count()
    }

    pub fn column_rows(&self, j: usize) -> Vec<usize> {
        (0..self.rows).filter(|&i| self.get(i, j)).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

impl TryFrom<Vec<Vec<u8>>> for Indicator {
    type Error = Error;

    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut bits = Vec::with_capacity(rows.len() * cols);
        for row in &rows {
            if row.len() != cols {
                return Err(Error::Shape("ragged indicator rows".into()));
            }
            for &b in row {
                match b {
                    0 => bits.push(false),
                    1 => bits.push(true),
                    other => return Err(Error::Parse(format!("indicator entry {other} is not 0 or 1"))),
                }
            }
        }
        Ok(Self { rows: rows.len(), cols, bits })
    }
}

impl From<Indicator> for Vec<Vec<u8>> {
    fn from(z: Indicator) -> Self {
        (0..z.rows)
            .map(|i| (0..z.cols).map(|j| u8::from(z.get(i, j))).collect())
            .collect()
    }
}

/// Topology of a LoCaL network: layer sizes, layer kinds and connection
/// indicators. Activation layers always use the fixed fan-out block, so
/// only multiplication and summation indicators are free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawStructure", into = "RawStructure")]
pub struct LocalStructure {
    layer_sizes: Vec<usize>,
    layer_kinds: Vec<LayerKind>,
    indicators: Vec<Indicator>,
    library: SymbolLibrary,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStructure {
    layer_sizes: Vec<usize>,
    layer_kinds: Vec<LayerKind>,
    indicators: Vec<Indicator>,
    library: SymbolLibrary,
}

impl TryFrom<RawStructure> for LocalStructure {
    type Error = Error;

    fn try_from(r: RawStructure) -> Result<Self> {
        LocalStructure::new(r.layer_sizes, r.layer_kinds, r.indicators, r.library)
    }
}

impl From<LocalStructure> for RawStructure {
    fn from(s: LocalStructure) -> Self {
        RawStructure {
            layer_sizes: s.layer_sizes,
            layer_kinds: s.layer_kinds,
            indicators: s.indicators,
            library: s.library,
        }
    }
}

/// Fixed input-to-activation block: input `i` feeds neurons `i·|Φ| .. i·|Φ|+|Φ|−1`.
pub fn fan_out_block(n_in: usize, n_ops: usize) -> Indicator {
    Indicator::from_fn(n_in, n_in * n_ops, |i, j| j / n_ops == i)
}

impl LocalStructure {
    pub fn new(
        layer_sizes: Vec<usize>,
        layer_kinds: Vec<LayerKind>,
        indicators: Vec<Indicator>,
        library: SymbolLibrary,
    ) -> Result<Self> {
        let k = layer_kinds.len();
        if k == 0 || layer_sizes.len() != k + 1 || indicators.len() != k {
            return Err(Error::Structure(format!(
                "{} sizes, {} kinds and {} indicators do not describe one network",
                layer_sizes.len(),
                k,
                indicators.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Structure("layer sizes must be positive".into()));
        }
        if layer_kinds[0] != LayerKind::Activation {
            return Err(Error::Structure("the first transform must be an activation layer".into()));
        }
        for (idx, (z, kind)) in indicators.iter().zip(&layer_kinds).enumerate() {
            let (n, m) = (layer_sizes[idx], layer_sizes[idx + 1]);
            if z.rows() != n || z.cols() != m {
                return Err(Error::Structure(format!(
                    "indicator {idx} is {}x{}, expected {n}x{m}",
                    z.rows(),
                    z.cols()
                )));
            }
            if *kind == LayerKind::Activation {
                if m != n * library.len() {
                    return Err(Error::Structure(format!(
                        "activation layer {} must have {} neurons",
                        idx + 1,
                        n * library.len()
                    )));
                }
                if *z != fan_out_block(n, library.len()) {
                    return Err(Error::Structure(format!(
                        "indicator {idx} must be the fixed fan-out block"
                    )));
                }
            }
        }
        Ok(Self { layer_sizes, layer_kinds, indicators, library })
    }

    /// Input → activation → multiplication → summation with empty searched
    /// indicators.
    pub fn standard(
        n_inputs: usize,
        library: SymbolLibrary,
        mult_neurons: usize,
        n_outputs: usize,
    ) -> Result<Self> {
        Self::template(
            n_inputs,
            library,
            &[LayerKind::Multiplication, LayerKind::Summation],
            &[mult_neurons, n_outputs],
        )
    }

    /// Activation layer followed by the given kinds and sizes; every
    /// non-activation indicator starts empty.
    pub fn template(
        n_inputs: usize,
        library: SymbolLibrary,
        kinds_after: &[LayerKind],
        sizes_after: &[usize],
    ) -> Result<Self> {
        if kinds_after.len() != sizes_after.len() {
            return Err(Error::Structure("kinds and sizes differ in length".into()));
        }
        let p = library.len();
        let mut sizes = vec![n_inputs, n_inputs * p];
        let mut kinds = vec![LayerKind::Activation];
        let mut zs = vec![fan_out_block(n_inputs, p)];
        for (&kind, &size) in kinds_after.iter().zip(sizes_after) {
            let prev = *sizes.last().unwrap();
            let size = if kind == LayerKind::Activation { prev * p } else { size };
            zs.push(if kind == LayerKind::Activation {
                fan_out_block(prev, p)
            } else {
                Indicator::zeros(prev, size)
            });
            sizes.push(size);
            kinds.push(kind);
        }
        Self::new(sizes, kinds, zs, library)
    }

    pub fn with_indicator(mut self, k: usize, z: Indicator) -> Result<Self> {
        if k >= self.depth() {
            return Err(Error::Structure(format!("no indicator {k}")));
        }
        self.indicators[k] = z;
        Self::new(self.layer_sizes, self.layer_kinds, self.indicators, self.library)
    }

    /// Number of transforms K.
    pub fn depth(&self) -> usize {
        self.layer_kinds.len()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn size(&self, k: usize) -> usize {
        self.layer_sizes[k]
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn kind(&self, k: usize) -> LayerKind {
        self.layer_kinds[k]
    }

    pub fn kinds(&self) -> &[LayerKind] {
        &self.layer_kinds
    }

    pub fn indicator(&self, k: usize) -> &Indicator {
        &self.indicators[k]
    }

    pub fn indicators(&self) -> &[Indicator] {
        &self.indicators
    }

    pub fn library(&self) -> &SymbolLibrary {
        &self.library
    }

    /// Transforms whose indicators are chosen by the search.
    pub fn searched_stages(&self) -> Vec<usize> {
        (0..self.depth()).filter(|&k| self.layer_kinds[k] != LayerKind::Activation).collect()
    }

    /// (source neuron, op) of neuron `n` in the activation layer produced by transform `k`.
    pub fn activation_source(&self, k: usize, n: usize) -> (usize, SymbolOp) {
        debug_assert_eq!(self.layer_kinds[k], LayerKind::Activation);
        let p = self.library.len();
        (n / p, self.library.get(n % p))
    }

    /// Neurons with a path to some output, per layer.
    pub fn live_mask(&self) -> Vec<Vec<bool>> {
        let k = self.depth();
        let mut live: Vec<Vec<bool>> = self.layer_sizes.iter().map(|&n| vec![false; n]).collect();
        live[k].iter_mut().for_each(|b| *b = true);
        for layer in (0..k).rev() {
            let z = &self.indicators[layer];
            for i in 0..self.layer_sizes[layer] {
                live[layer][i] = (0..self.layer_sizes[layer + 1]).any(|j| live[layer + 1][j] && z.get(i, j));
            }
        }
        live
    }

    /// Rejects live multiplication neurons without factors.
    pub fn validate_live(&self) -> Result<()> {
        let live = self.live_mask();
        for k in 0..self.depth() {
            if self.layer_kinds[k] != LayerKind::Multiplication {
                continue;
            }
            for j in 0..self.layer_sizes[k + 1] {
                if live[k + 1][j] && self.indicators[k].fan_in(j) == 0 {
                    return Err(Error::Structure(format!(
                        "multiplication neuron {j} of layer {} is used but has no inputs",
                        k + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbols::SymbolKind;

    fn lib() -> SymbolLibrary {
        SymbolLibrary::new(&[SymbolKind::Id, SymbolKind::Square, SymbolKind::Cos]).unwrap()
    }

    #[test]
    fn standard_layout() {
        let s = LocalStructure::standard(2, lib(), 4, 1).unwrap();
        assert_eq!(s.layer_sizes(), &[2, 6, 4, 1]);
        assert_eq!(s.searched_stages(), vec![1, 2]);
        assert!(s.indicator(0).get(1, 3) && !s.indicator(0).get(0, 3));
        assert_eq!(s.activation_source(0, 5).1.kind, SymbolKind::Cos);
    }

    #[test]
    fn rejects_bad_fan_out() {
        let s = LocalStructure::standard(2, lib(), 1, 1).unwrap();
        assert!(s.with_indicator(0, Indicator::ones(2, 6)).is_err());
    }

    #[test]
    fn live_mask_and_validation() {
        let s = LocalStructure::standard(2, lib(), 2, 1).unwrap();
        let mut z2 = Indicator::zeros(2, 1);
        z2.set(0, 0, true);
        let s = s.with_indicator(2, z2).unwrap();
        assert!(s.validate_live().is_err());
        let mut z1 = Indicator::zeros(6, 2);
        z1.set(1, 0, true);
        z1.set(5, 0, true);
        let s = s.with_indicator(1, z1).unwrap();
        s.validate_live().unwrap();
        let live = s.live_mask();
        assert_eq!(live[2], vec![true, false]);
        assert_eq!(live[1], vec![false, true, false, false, false, true]);
        assert_eq!(live[0], vec![true, true]);
    }

    #[test]
    fn json_round_trip() {
        let s = LocalStructure::standard(2, lib(), 2, 1).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: LocalStructure = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
