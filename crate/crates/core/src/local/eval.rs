use std::ops::Range;

use super::structure::{LayerKind, LocalStructure};
use super::weights::{LayerWeights, LocalWeights};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par::{self, Mode};
use crate::symbols::SymbolOp;

/// Samples per work item in batched evaluation. Fixed so that the
/// summation order, and hence every result bit, is independent of the mode.
const CHUNK: usize = 128;

#[derive(Debug, Clone)]
enum Step {
    Activation { layer: usize, neurons: Vec<(usize, usize, SymbolOp)> },
    Multiplication { neurons: Vec<(usize, Vec<usize>)> },
    Summation { layer: usize, neurons: Vec<(usize, Vec<usize>)> },
}

/// Scratch buffers for repeated forward/backward passes.
#[derive(Debug, Clone)]
pub struct Workspace {
    h: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    e: Vec<f64>,
}

impl Workspace {
    pub fn new(plan: &Plan) -> Self {
        Self { h: plan.buffers(), g: plan.buffers(), e: vec![0.0; plan.n_outputs()] }
    }
}

/// Structure compiled to the list of live neurons per layer. Dead neurons
/// are never evaluated and read as zero.
#[derive(Debug, Clone)]
pub struct Plan {
    sizes: Vec<usize>,
    steps: Vec<Step>,
}

impl Plan {
    pub fn new(structure: &LocalStructure) -> Result<Self> {
        structure.validate_live()?;
        let live = structure.live_mask();
        let mut steps = Vec::with_capacity(structure.depth());
        for k in 0..structure.depth() {
            let z = structure.indicator(k);
            let live_out = (0..structure.size(k + 1)).filter(|&j| live[k + 1][j]);
            steps.push(match structure.kind(k) {
                LayerKind::Activation => Step::Activation {
                    layer: k,
                    neurons: live_out
                        .map(|n| {
                            let (src, op) = structure.activation_source(k, n);
                            (n, src, op)
                        })
                        .collect(),
                },
                LayerKind::Multiplication => {
                    Step::Multiplication { neurons: live_out.map(|j| (j, z.column_rows(j))).collect() }
                }
                LayerKind::Summation => Step::Summation {
                    layer: k,
                    neurons: live_out.map(|j| (j, z.column_rows(j))).collect(),
                },
            });
        }
        Ok(Self { sizes: structure.layer_sizes().to_vec(), steps })
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Fresh per-layer activation buffers.
    pub fn buffers(&self) -> Vec<Vec<f64>> {
        self.sizes.iter().map(|&n| vec![0.0; n]).collect()
    }

    /// Fills `h` with every layer's values for input `x`.
    pub fn forward_into(&self, weights: &LocalWeights, x: &[f64], h: &mut [Vec<f64>]) -> Result<()> {
        h[0].copy_from_slice(x);
        for (k, step) in self.steps.iter().enumerate() {
            let (lo, hi) = h.split_at_mut(k + 1);
            let (prev, next) = (&lo[k], &mut hi[0]);
            match step {
                Step::Activation { layer, neurons } => {
                    let inner = weights.inner(*layer);
                    for &(n, src, op) in neurons {
                        let w = op.has_inner_weight().then(|| inner[n]);
                        next[n] = op.eval(w, prev[src])?;
                    }
                }
                Step::Multiplication { neurons } => {
                    for (j, rows) in neurons {
                        next[*j] = rows.iter().map(|&i| prev[i]).product();
                    }
                }
                Step::Summation { layer, neurons } => {
                    let w = weights.summation(*layer);
                    for (j, rows) in neurons {
                        next[*j] = rows.iter().map(|&i| w.get(i, *j) * prev[i]).sum();
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulates ∂(g·y)/∂W into `grad`, where `g = grad_out` and `h`
    /// holds the forward values of the same sample.
    pub fn backward_into(
        &self,
        weights: &LocalWeights,
        h: &[Vec<f64>],
        grad_out: &[f64],
        g: &mut [Vec<f64>],
        grad: &mut LocalWeights,
    ) -> Result<()> {
        let depth = self.steps.len();
        for layer in g.iter_mut() {
            layer.iter_mut().for_each(|v| *v = 0.0);
        }
        g[depth].copy_from_slice(grad_out);
        for k in (0..depth).rev() {
            let (lo, hi) = g.split_at_mut(k + 1);
            let (g_prev, g_next) = (&mut lo[k], &hi[0]);
            let prev = &h[k];
            match &self.steps[k] {
                Step::Activation { layer, neurons } => {
                    let inner = weights.inner(*layer);
                    let LayerWeights::Activation { inner: d_inner } = &mut grad.layers[*layer] else {
                        unreachable!()
                    };
                    for &(n, src, op) in neurons {
                        let gn = g_next[n];
                        if gn == 0.0 {
                            continue;
                        }
                        let w = op.has_inner_weight().then(|| inner[n]);
                        let (dv, dw) = op.eval_grads(w, prev[src])?;
                        g_prev[src] += gn * dv;
                        if let Some(dw) = dw {
                            d_inner[n] += gn * dw;
                        }
                    }
                }
                Step::Multiplication { neurons } => {
                    for (j, rows) in neurons {
                        let gj = g_next[*j];
                        if gj == 0.0 {
                            continue;
                        }
                        // prefix/suffix products keep zero factors exact
                        let m = rows.len();
                        let mut suffix = vec![1.0; m + 1];
                        for t in (0..m).rev() {
                            suffix[t] = suffix[t + 1] * prev[rows[t]];
                        }
                        let mut prefix = 1.0;
                        for (t, &i) in rows.iter().enumerate() {
                            g_prev[i] += gj * prefix * suffix[t + 1];
                            prefix *= prev[i];
                        }
                    }
                }
                Step::Summation { layer, neurons } => {
                    let w = weights.summation(*layer);
                    let LayerWeights::Summation { w: dw } = &mut grad.layers[*layer] else { unreachable!() };
                    for (j, rows) in neurons {
                        let gj = g_next[*j];
                        for &i in rows {
                            *dw.get_mut(i, *j) += gj * prev[i];
                            g_prev[i] += gj * w.get(i, *j);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Half sum of squared errors and its gradient over `rows` of the data.
    pub fn sse_grad(
        &self,
        weights: &LocalWeights,
        x: &Matrix,
        y: &Matrix,
        rows: Range<usize>,
    ) -> Result<(f64, LocalWeights)> {
        let mut grad = weights.zeros_like();
        let mut ws = Workspace::new(self);
        let sse = self.accumulate(weights, x, y, rows, &mut ws, &mut grad)?;
        Ok((sse, grad))
    }

    /// Adds the gradient of the half squared error over `rows` to `grad`
    /// and returns that error, reusing the buffers in `ws`.
    pub fn accumulate(
        &self,
        weights: &LocalWeights,
        x: &Matrix,
        y: &Matrix,
        rows: Range<usize>,
        ws: &mut Workspace,
        grad: &mut LocalWeights,
    ) -> Result<f64> {
        let mut sse = 0.0;
        for r in rows {
            self.forward_into(weights, x.row(r), &mut ws.h)?;
            let out = ws.h.last().unwrap();
            for (o, ei) in ws.e.iter_mut().enumerate() {
                *ei = out[o] - y.get(r, o);
                sse += 0.5 * *ei * *ei;
            }
            self.backward_into(weights, &ws.h, &ws.e, &mut ws.g, grad)?;
        }
        Ok(sse)
    }

    /// Half sum of squared errors over `rows`.
    pub fn sse(&self, weights: &LocalWeights, x: &Matrix, y: &Matrix, rows: Range<usize>) -> Result<f64> {
        let mut h = self.buffers();
        let mut sse = 0.0;
        for r in rows {
            self.forward_into(weights, x.row(r), &mut h)?;
            let out = h.last().unwrap();
            for (o, &v) in out.iter().enumerate() {
                let e = v - y.get(r, o);
                sse += 0.5 * e * e;
            }
        }
        Ok(sse)
    }

    /// Value, first and second derivative of every output along
    /// `W + t·direction` at `t = 0`, by second-order forward propagation.
    pub fn jet(&self, weights: &LocalWeights, direction: &LocalWeights, x: &[f64]) -> Result<Vec<[f64; 3]>> {
        let mut h: Vec<Vec<[f64; 3]>> = self.sizes.iter().map(|&n| vec![[0.0; 3]; n]).collect();
        for (i, &v) in x.iter().enumerate() {
            h[0][i] = [v, 0.0, 0.0];
        }
        for (k, step) in self.steps.iter().enumerate() {
            let (lo, hi) = h.split_at_mut(k + 1);
            let (prev, next) = (&lo[k], &mut hi[0]);
            match step {
                Step::Activation { layer, neurons } => {
                    let inner = weights.inner(*layer);
                    let d_inner = direction.inner(*layer);
                    for &(n, src, op) in neurons {
                        let [v, v1, v2] = prev[src];
                        let (z, z1, z2) = if op.has_inner_weight() {
                            let (w, w1) = (inner[n], d_inner[n]);
                            (w * v, w1 * v + w * v1, 2.0 * w1 * v1 + w * v2)
                        } else {
                            (v, v1, v2)
                        };
                        let (f, f1, f2) = op.kind.derivatives(z)?;
                        next[n] = [f, f1 * z1, f2 * z1 * z1 + f1 * z2];
                    }
                }
                Step::Multiplication { neurons } => {
                    for (j, rows) in neurons {
                        let mut acc = [1.0, 0.0, 0.0];
                        for &i in rows {
                            let [b, b1, b2] = prev[i];
                            let [a, a1, a2] = acc;
                            acc = [a * b, a1 * b + a * b1, a2 * b + 2.0 * a1 * b1 + a * b2];
                        }
                        next[*j] = acc;
                    }
                }
                Step::Summation { layer, neurons } => {
                    let w = weights.summation(*layer);
                    let d = direction.summation(*layer);
                    for (j, rows) in neurons {
                        let mut acc = [0.0; 3];
                        for &i in rows {
                            let (wij, dij) = (w.get(i, *j), d.get(i, *j));
                            let [a, a1, a2] = prev[i];
                            acc[0] += wij * a;
                            acc[1] += dij * a + wij * a1;
                            acc[2] += 2.0 * dij * a1 + wij * a2;
                        }
                        next[*j] = acc;
                    }
                }
            }
        }
        Ok(h.pop().unwrap())
    }
}

fn check_data(structure: &LocalStructure, x: &Matrix, y: Option<&Matrix>) -> Result<()> {
    if x.cols() != structure.n_inputs() {
        return Err(Error::Shape(format!("{} input columns, structure has {}", x.cols(), structure.n_inputs())));
    }
    if let Some(y) = y {
        if y.cols() != structure.n_outputs() || y.rows() != x.rows() {
            return Err(Error::Shape(format!(
                "targets are {}x{}, expected {}x{}",
                y.rows(),
                y.cols(),
                x.rows(),
                structure.n_outputs()
            )));
        }
    }
    Ok(())
}

/// Network output for a single input vector.
pub fn forward(structure: &LocalStructure, weights: &LocalWeights, x: &[f64]) -> Result<Vec<f64>> {
    weights.check_shape(structure)?;
    if x.len() != structure.n_inputs() {
        return Err(Error::Shape(format!("input of length {}, expected {}", x.len(), structure.n_inputs())));
    }
    let plan = Plan::new(structure)?;
    let mut h = plan.buffers();
    plan.forward_into(weights, x, &mut h)?;
    Ok(h.pop().unwrap())
}

/// Outputs for every row of `x`.
pub fn predict(structure: &LocalStructure, weights: &LocalWeights, x: &Matrix, mode: Mode) -> Result<Matrix> {
    weights.check_shape(structure)?;
    check_data(structure, x, None)?;
    let plan = Plan::new(structure)?;
    let m = plan.n_outputs();
    let chunks = par::map_chunks(mode, x.rows(), CHUNK, |s, e| -> Result<Vec<f64>> {
        let mut h = plan.buffers();
        let mut out = Vec::with_capacity((e - s) * m);
        for r in s..e {
            plan.forward_into(weights, x.row(r), &mut h)?;
            out.extend_from_slice(h.last().unwrap());
        }
        Ok(out)
    });
    let mut data = Vec::with_capacity(x.rows() * m);
    for c in chunks {
        data.extend(c?);
    }
    Ok(Matrix::from_vec(x.rows(), m, data))
}

/// Values of every layer for every row; `layers[k]` is `N × n_k`.
pub fn layer_values(structure: &LocalStructure, weights: &LocalWeights, x: &Matrix) -> Result<Vec<Matrix>> {
    weights.check_shape(structure)?;
    check_data(structure, x, None)?;
    let plan = Plan::new(structure)?;
    let mut out: Vec<Matrix> = structure.layer_sizes().iter().map(|&n| Matrix::zeros(x.rows(), n)).collect();
    let mut h = plan.buffers();
    for r in 0..x.rows() {
        plan.forward_into(weights, x.row(r), &mut h)?;
        for (m, hk) in out.iter_mut().zip(&h) {
            m.row_mut(r).copy_from_slice(hk);
        }
    }
    Ok(out)
}

/// `L = 1/(2N) Σ‖ŷ − y‖²` over the batch.
pub fn loss(structure: &LocalStructure, weights: &LocalWeights, x: &Matrix, y: &Matrix, mode: Mode) -> Result<f64> {
    weights.check_shape(structure)?;
    check_data(structure, x, Some(y))?;
    if x.rows() == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let plan = Plan::new(structure)?;
    loss_with_plan(&plan, weights, x, y, mode)
}

pub(crate) fn loss_with_plan(plan: &Plan, weights: &LocalWeights, x: &Matrix, y: &Matrix, mode: Mode) -> Result<f64> {
    let parts = par::map_chunks(mode, x.rows(), CHUNK, |s, e| plan.sse(weights, x, y, s..e));
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / x.rows() as f64)
}

/// Loss and its gradient; entries of dead weights are zero.
pub fn gradients(
    structure: &LocalStructure,
    weights: &LocalWeights,
    x: &Matrix,
    y: &Matrix,
    mode: Mode,
) -> Result<(f64, LocalWeights)> {
    weights.check_shape(structure)?;
    check_data(structure, x, Some(y))?;
    if x.rows() == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let plan = Plan::new(structure)?;
    let parts = par::map_chunks(mode, x.rows(), CHUNK, |s, e| plan.sse_grad(weights, x, y, s..e));
    let mut total = 0.0;
    let mut grad = weights.zeros_like();
    for p in parts {
        let (l, g) = p?;
        total += l;
        grad.add_assign(&g);
    }
    let n = x.rows() as f64;
    grad.scale(1.0 / n);
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local::structure::Indicator;
    use crate::symbols::{SymbolKind, SymbolLibrary};

    pub(crate) fn toy() -> (LocalStructure, LocalWeights) {
        let lib = SymbolLibrary::new(&[SymbolKind::Id, SymbolKind::Square, SymbolKind::Cos]).unwrap();
        let mut z1 = Indicator::zeros(6, 1);
        z1.set(1, 0, true); // x1^2
        z1.set(5, 0, true); // cos(w x2)
        let s = LocalStructure::standard(2, lib, 1, 1)
            .unwrap()
            .with_indicator(1, z1)
            .unwrap()
            .with_indicator(2, Indicator::ones(1, 1))
            .unwrap();
        let mut w = LocalWeights::filled(&s, 1.0);
        w.layers[0] = LayerWeights::Activation { inner: vec![1.0, 1.0, 1.0, 1.0, 1.0, 2.5] };
        w.layers[2] = LayerWeights::Summation { w: Matrix::filled(1, 1, 3.0) };
        (s, w)
    }

    #[test]
    fn toy_forward() {
        let (s, w) = toy();
        let y = forward(&s, &w, &[1.0, 1.0]).unwrap();
        assert!((y[0] - (-2.403_430_846_640_801)).abs() < 1e-12);
        assert_eq!(forward(&s, &w, &[0.0, 0.7]).unwrap()[0], 0.0);
    }

    #[test]
    fn single_linear_term() {
        let lib = SymbolLibrary::new(&[SymbolKind::Id]).unwrap();
        let s = LocalStructure::standard(1, lib, 1, 1)
            .unwrap()
            .with_indicator(1, Indicator::ones(1, 1))
            .unwrap()
            .with_indicator(2, Indicator::ones(1, 1))
            .unwrap();
        let w = LocalWeights::filled(&s, 2.0);
        let x = Matrix::from_vec(1, 1, vec![3.0]);
        let y = Matrix::from_vec(1, 1, vec![9.0]);
        let (l, g) = gradients(&s, &w, &x, &y, Mode::Sequential).unwrap();
        assert_eq!(l, 4.5);
        assert_eq!(g.summation(2).get(0, 0), -9.0);
    }

    #[test]
    fn jet_matches_closed_form() {
        let (s, w) = toy();
        let plan = Plan::new(&s).unwrap();
        let mut d = w.zeros_like();
        d.layers[2] = LayerWeights::Summation { w: Matrix::filled(1, 1, 1.0) };
        let j = plan.jet(&w, &d, &[1.0, 1.0]).unwrap();
        assert!((j[0][1] - 2.5f64.cos()).abs() < 1e-14);
        assert_eq!(j[0][2], 0.0);
        let mut d = w.zeros_like();
        d.layers[0] = LayerWeights::Activation { inner: vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0] };
        let j = plan.jet(&w, &d, &[1.0, 1.0]).unwrap();
        assert!((j[0][1] - (-3.0 * 2.5f64.sin())).abs() < 1e-14);
        assert!((j[0][2] - (-3.0 * 2.5f64.cos())).abs() < 1e-14);
    }
}
