//! The symbolic activation pool.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DomainError, Error};

/// Smallest admissible argument of `log`.
pub const LOG_MIN_ARGUMENT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    Id,
    Square,
    Sqrt,
    Log,
    Cos,
    Sin,
}

impl SymbolKind {
    pub const ALL: [SymbolKind; 6] = [
        SymbolKind::Id,
        SymbolKind::Square,
        SymbolKind::Sqrt,
        SymbolKind::Log,
        SymbolKind::Cos,
        SymbolKind::Sin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SymbolKind::Id => "id",
            SymbolKind::Square => "square",
            SymbolKind::Sqrt => "sqrt",
            SymbolKind::Log => "log",
            SymbolKind::Cos => "cos",
            SymbolKind::Sin => "sin",
        }
    }

    /// Whether the symbol carries a learnable scalar inside its argument.
    /// `x` and `x²` are scaled by the following summation layer instead.
    pub fn has_inner_weight(self) -> bool {
        !matches!(self, SymbolKind::Id | SymbolKind::Square)
    }

    pub fn domain_lower(self) -> Option<f64> {
        match self {
            SymbolKind::Sqrt => Some(0.0),
            SymbolKind::Log => Some(LOG_MIN_ARGUMENT),
            _ => None,
        }
    }

    fn check(self, z: f64) -> Result<(), DomainError> {
        let ok = match self.domain_lower() {
            Some(lo) => z >= lo,
            None => true,
        };
        if ok && z.is_finite() {
            Ok(())
        } else {
            Err(DomainError { symbol: self, argument: z })
        }
    }

    /// φ(z).
    pub fn value(self, z: f64) -> Result<f64, DomainError> {
        self.check(z)?;
        Ok(match self {
            SymbolKind::Id => z,
            SymbolKind::Square => z * z,
            SymbolKind::Sqrt => z.sqrt(),
            SymbolKind::Log => z.ln(),
            SymbolKind::Cos => z.cos(),
            SymbolKind::Sin => z.sin(),
        })
    }

    /// (φ(z), φ′(z), φ″(z)). `sqrt` has no derivative at zero.
    pub fn derivatives(self, z: f64) -> Result<(f64, f64, f64), DomainError> {
        self.check(z)?;
        Ok(match self {
            SymbolKind::Id => (z, 1.0, 0.0),
            SymbolKind::Square => (z * z, 2.0 * z, 2.0),
            SymbolKind::Sqrt => {
                if z <= 0.0 {
                    return Err(DomainError { symbol: self, argument: z });
                }
                let r = z.sqrt();
                (r, 0.5 / r, -0.25 / (z * r))
            }
            SymbolKind::Log => (z.ln(), 1.0 / z, -1.0 / (z * z)),
            SymbolKind::Cos => {
                let (s, c) = z.sin_cos();
                (c, -s, -c)
            }
            SymbolKind::Sin => {
                let (s, c) = z.sin_cos();
                (s, c, -s)
            }
        })
    }
}

impl fmt::Display for SymbolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SymbolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SymbolKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown symbol {s:?}")))
    }
}

/// One entry of a [`SymbolLibrary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolOp {
    pub id: usize,
    pub kind: SymbolKind,
}

impl SymbolOp {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn has_inner_weight(&self) -> bool {
        self.kind.has_inner_weight()
    }

    pub fn domain_lower(&self) -> Option<f64> {
        self.kind.domain_lower()
    }

    fn argument(&self, inner_weight: Option<f64>, v: f64) -> f64 {
        assert_eq!(
            inner_weight.is_some(),
            self.has_inner_weight(),
            "inner weight presence must match symbol {}",
            self.kind
        );
        inner_weight.map_or(v, |w| w * v)
    }

    /// φ(w·v) for weighted symbols, φ(v) otherwise.
    ///
    /// Panics if `inner_weight` is given for an unweighted symbol or missing
    /// for a weighted one.
    pub fn eval(&self, inner_weight: Option<f64>, v: f64) -> Result<f64, DomainError> {
        self.kind.value(self.argument(inner_weight, v))
    }

    /// (∂φ/∂v, ∂φ/∂w); the second entry is `None` for unweighted symbols.
    pub fn eval_grads(
        &self,
        inner_weight: Option<f64>,
        v: f64,
    ) -> Result<(f64, Option<f64>), DomainError> {
        let z = self.argument(inner_weight, v);
        let (_, d1, _) = self.kind.derivatives(z)?;
        Ok(match inner_weight {
            Some(w) => (w * d1, Some(v * d1)),
            None => (d1, None),
        })
    }

    /// (∂²φ/∂v², ∂²φ/∂w², ∂²φ/∂v∂w); the last two are `None` for unweighted symbols.
    pub fn eval_second(
        &self,
        inner_weight: Option<f64>,
        v: f64,
    ) -> Result<(f64, Option<f64>, Option<f64>), DomainError> {
        let z = self.argument(inner_weight, v);
        let (_, d1, d2) = self.kind.derivatives(z)?;
        Ok(match inner_weight {
            Some(w) => (w * w * d2, Some(v * v * d2), Some(d1 + w * v * d2)),
            None => (d2, None, None),
        })
    }
}

/// Ordered pool of activation symbols. The order fixes activation-layer
/// neuron indexing: neuron `i·|Φ| + id` applies symbol `id` to input `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<SymbolKind>", into = "Vec<SymbolKind>")]
pub struct SymbolLibrary {
    ops: Vec<SymbolOp>,
}

impl SymbolLibrary {
    pub fn new(kinds: &[SymbolKind]) -> Result<Self, Error> {
        if kinds.is_empty() {
            return Err(Error::Config("symbol library is empty".into()));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::Config(format!("symbol {k} listed twice")));
            }
        }
        let ops = kinds.iter().enumerate().map(|(id, &kind)| SymbolOp { id, kind }).collect();
        Ok(Self { ops })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, Error> {
        let kinds = names
            .iter()
            .map(|n| n.as_ref().parse())
            .collect::<Result<Vec<SymbolKind>, _>>()?;
        Self::new(&kinds)
    }

    pub fn ops(&self) -> &[SymbolOp] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn get(&self, id: usize) -> SymbolOp {
        self.ops[id]
    }

    pub fn kinds(&self) -> Vec<SymbolKind> {
        self.ops.iter().map(|o| o.kind).collect()
    }

    pub fn position(&self, kind: SymbolKind) -> Option<usize> {
        self.ops.iter().position(|o| o.kind == kind)
    }
}

impl TryFrom<Vec<SymbolKind>> for SymbolLibrary {
    type Error = Error;

    fn try_from(kinds: Vec<SymbolKind>) -> Result<Self, Error> {
        Self::new(&kinds)
    }
}

impl From<SymbolLibrary> for Vec<SymbolKind> {
    fn from(lib: SymbolLibrary) -> Self {
        lib.kinds()
    }
}
