//! Fully input-convex networks and a box-constrained minimizer.
//!
//! Layer `l` computes `z_l = softplus(Wz_l·z_{l−1} + Wy_l·x + b_l)`; the
//! scalar output is `wz·z_L + wy·x + b`. With every `Wz` entry
//! nonnegative and softplus convex and nondecreasing, the output is jointly
//! convex in `x`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par::{self, Mode};

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcnnLayer {
    /// Passthrough from the previous hidden layer, entries ≥ 0. Absent on
    /// the first layer.
    pub wz: Option<Matrix>,
    /// Input injection, unconstrained.
    pub wy: Matrix,
    pub b: Vec<f64>,
}

impl IcnnLayer {
    fn width(&self) -> usize {
        self.b.len()
    }

    fn zeros_like(&self) -> Self {
        Self {
            wz: self.wz.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
            wy: Matrix::zeros(self.wy.rows(), self.wy.cols()),
            b: vec![0.0; self.b.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcnnConfig {
    pub hidden: Vec<usize>,
    pub init_std: f64,
}

impl Default for IcnnConfig {
    fn default() -> Self {
        Self { hidden: vec![16, 16], init_std: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcnnTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for IcnnTrainConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-3, epochs: 50, batch_size: 16 }
    }
}

/// One regression example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: f64,
}

/// The network; the last layer has width one and no activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIcnn")]
pub struct Icnn {
    input_dim: usize,
    layers: Vec<IcnnLayer>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIcnn {
    input_dim: usize,
    layers: Vec<IcnnLayer>,
}

impl TryFrom<RawIcnn> for Icnn {
    type Error = Error;

    fn try_from(raw: RawIcnn) -> Result<Self> {
        Icnn::from_layers(raw.input_dim, raw.layers)
    }
}

impl Icnn {
    /// Seeded network with `|N(0, σ)|` passthrough and `N(0, σ)` injection
    /// weights; biases start at zero.
    pub fn new(input_dim: usize, cfg: &IcnnConfig, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || cfg.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("ICNN dimensions must be positive".into()));
        }
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut layers = Vec::with_capacity(cfg.hidden.len() + 1);
        let mut prev = None;
        for &width in cfg.hidden.iter().chain(std::iter::once(&1)) {
            let wz = prev.map(|p| Matrix::from_fn(width, p, |_, _| normal.sample(rng).abs()));
            let wy = Matrix::from_fn(width, input_dim, |_, _| normal.sample(rng));
            layers.push(IcnnLayer { wz, wy, b: vec![0.0; width] });
            prev = Some(width);
        }
        Ok(Self { input_dim, layers })
    }

    /// Validates shapes and the passthrough sign constraint.
    pub fn from_layers(input_dim: usize, layers: Vec<IcnnLayer>) -> Result<Self> {
        if layers.is_empty() || layers.last().map(IcnnLayer::width) != Some(1) {
            return Err(Error::Shape("an ICNN ends in a width-one layer".into()));
        }
        let mut prev = None;
        for (l, layer) in layers.iter().enumerate() {
            let w = layer.width();
            if layer.wy.rows() != w || layer.wy.cols() != input_dim {
                return Err(Error::Shape(format!("layer {l}: Wy is {}×{}", layer.wy.rows(), layer.wy.cols())));
            }
            match (&layer.wz, prev) {
                (None, None) => {}
                (Some(wz), Some(p)) if wz.rows() == w && wz.cols() == p => {
                    if wz.as_slice().iter().any(|&v| !(v >= 0.0)) {
                        return Err(Error::Config(format!("layer {l}: Wz has a negative entry")));
                    }
                }
                _ => return Err(Error::Shape(format!("layer {l}: Wz does not match the previous width"))),
            }
            prev = Some(w);
        }
        Ok(Self { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[IcnnLayer] {
        &self.layers
    }

    /// Smallest passthrough entry, `+∞` when there are none.
    pub fn min_passthrough(&self) -> f64 {
        self.layers.iter().filter_map(|l| l.wz.as_ref()).map(Matrix::min).fold(f64::INFINITY, f64::min)
    }

    fn zeros_like(&self) -> Self {
        Self { input_dim: self.input_dim, layers: self.layers.iter().map(IcnnLayer::zeros_like).collect() }
    }

    /// Parameter blocks in a fixed order, each flagged when it is a
    /// passthrough block.
    fn blocks_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Some(wz) = layer.wz.as_mut() {
                out.push((wz.as_mut_slice(), true));
            }
            out.push((layer.wy.as_mut_slice(), false));
            out.push((layer.b.as_mut_slice(), false));
        }
        out
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!("ICNN input has length {}, expected {}", x.len(), self.input_dim)));
        }
        Ok(())
    }

    /// Pre-activations of every layer.
    fn pre_activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut z: Vec<f64> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut p = layer.b.clone();
            let mut tmp = vec![0.0; layer.width()];
            layer.wy.mul_vec(x, &mut tmp);
            for (a, t) in p.iter_mut().zip(&tmp) {
                *a += t;
            }
            if let Some(wz) = &layer.wz {
                wz.mul_vec(&z, &mut tmp);
                for (a, t) in p.iter_mut().zip(&tmp) {
                    *a += t;
                }
            }
            if l + 1 < self.layers.len() {
                z = p.iter().map(|&v| softplus(v)).collect();
            }
            pre.push(p);
        }
        pre
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.pre_activations(x).last().unwrap()[0])
    }

    /// Output at the concatenation of `s` and `a`.
    pub fn eval(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        self.forward(&x)
    }

    /// Output and its gradient; `scale` multiplies the parameter gradient
    /// accumulated into `pgrad`, when given.
    fn backward(&self, x: &[f64], scale: f64, pgrad: Option<&mut Icnn>, xgrad: Option<&mut [f64]>) -> f64 {
        let pre = self.pre_activations(x);
        let out = pre.last().unwrap()[0];
        let depth = self.layers.len();
        let mut dx = vec![0.0; self.input_dim];
        let mut pgrad = pgrad;
        let mut dpre = vec![1.0];
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            if let Some(g) = pgrad.as_deref_mut() {
                let gl = &mut g.layers[l];
                for (j, &d) in dpre.iter().enumerate() {
                    gl.b[j] += scale * d;
                    for (i, &xi) in x.iter().enumerate() {
                        *gl.wy.get_mut(j, i) += scale * d * xi;
                    }
                    if let Some(gwz) = gl.wz.as_mut() {
                        for (i, &p) in pre[l - 1].iter().enumerate() {
                            *gwz.get_mut(j, i) += scale * d * softplus(p);
                        }
                    }
                }
            }
            for (j, &d) in dpre.iter().enumerate() {
                for (i, dxi) in dx.iter_mut().enumerate() {
                    *dxi += d * layer.wy.get(j, i);
                }
            }
            if let Some(wz) = &layer.wz {
                let mut dz = vec![0.0; wz.cols()];
                wz.transpose_mul_vec(&dpre, &mut dz);
                dpre = dz.iter().zip(&pre[l - 1]).map(|(d, &p)| d * sigmoid(p)).collect();
            }
        }
        if let Some(g) = xgrad {
            g.copy_from_slice(&dx);
        }
        out
    }

    /// Output and gradient with respect to the input.
    pub fn input_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        let mut g = vec![0.0; self.input_dim];
        let v = self.backward(x, 1.0, None, Some(&mut g));
        Ok((v, g))
    }

    /// Mean squared error over `samples`.
    pub fn mse(&self, samples: &[Sample]) -> Result<f64> {
        let mut s = 0.0;
        for smp in samples {
            let e = self.forward(&smp.input)? - smp.target;
            s += e * e;
        }
        Ok(s / samples.len().max(1) as f64)
    }

    /// Minibatch Adam on the mean squared error, projecting every
    /// passthrough entry onto `[0, ∞)` after each step. Returns the trained
    /// copy and the loss after each epoch.
    pub fn fit(&self, samples: &[Sample], cfg: &IcnnTrainConfig, rng: &mut impl Rng) -> Result<(Icnn, Vec<f64>)> {
        if samples.is_empty() {
            return Err(Error::Degenerate("no samples to fit".into()));
        }
        if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
            return Err(Error::Config("ICNN training needs a positive learning rate and batch size".into()));
        }
        for s in samples {
            self.check_input(&s.input)?;
            if !s.target.is_finite() {
                return Err(Error::Degenerate("non-finite regression target".into()));
            }
        }
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let mut net = self.clone();
        let mut m = self.zeros_like();
        let mut v = self.zeros_like();
        let mut step = 0i32;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size) {
                let mut g = self.zeros_like();
                let scale = 2.0 / chunk.len() as f64;
                for &i in chunk {
                    let s = &samples[i];
                    let out = net.forward(&s.input)?;
                    net.backward(&s.input, scale * (out - s.target), Some(&mut g), None);
                }
                step += 1;
                let (c1, c2) = (1.0 - B1.powi(step), 1.0 - B2.powi(step));
                let mut gb = g.blocks_mut();
                let mut mb = m.blocks_mut();
                let mut vb = v.blocks_mut();
                for (((p, pass), (gs, _)), ((ms, _), (vs, _))) in
                    net.blocks_mut().into_iter().zip(gb.iter_mut()).zip(mb.iter_mut().zip(vb.iter_mut()))
                {
                    for k in 0..p.len() {
                        ms[k] = B1 * ms[k] + (1.0 - B1) * gs[k];
                        vs[k] = B2 * vs[k] + (1.0 - B2) * gs[k] * gs[k];
                        p[k] -= cfg.learning_rate * (ms[k] / c1) / ((vs[k] / c2).sqrt() + EPS);
                        if pass && p[k] < 0.0 {
                            p[k] = 0.0;
                        }
                    }
                }
            }
            debug_assert!(net.min_passthrough() >= 0.0);
            history.push(net.mse(samples)?);
        }
        Ok((net, history))
    }

    /// Little-endian binary snapshot: magic, input size, layer count, then
    /// each matrix as `rows, cols, values`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.input_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u64).to_le_bytes());
        let mut put = |rows: usize, cols: usize, vals: &[f64]| {
            out.extend_from_slice(&(rows as u64).to_le_bytes());
            out.extend_from_slice(&(cols as u64).to_le_bytes());
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for layer in &self.layers {
            match &layer.wz {
                Some(wz) => put(wz.rows(), wz.cols(), wz.as_slice()),
                None => put(0, 0, &[]),
            }
            put(layer.wy.rows(), layer.wy.cols(), layer.wy.as_slice());
            put(layer.b.len(), 1, &layer.b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(MAGIC.len())? != MAGIC {
            return Err(Error::Parse("not an ICNN snapshot".into()));
        }
        let input_dim = rd.usize()?;
        let n = rd.usize()?;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let wz = rd.matrix()?;
            let wy = rd.matrix()?;
            let b = rd.matrix()?.into_vec();
            layers.push(IcnnLayer { wz: (wz.rows() > 0).then_some(wz), wy, b });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes after ICNN snapshot".into()));
        }
        Self::from_layers(input_dim, layers)
    }
}

const MAGIC: &[u8] = b"ICNN\x01";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Parse("truncated ICNN snapshot".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let (r, c) = (self.usize()?, self.usize()?);
        let n = r.checked_mul(c).filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len()));
        let n = n.ok_or_else(|| Error::Parse("bad matrix header".into()))?;
        let vals = self.take(n * 8)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(Matrix::from_vec(r, c, vals))
    }
}

/// A differentiable function over a box.
pub trait BoxObjective: Sync {
    fn dim(&self) -> usize;
    /// Writes the gradient at `a` and returns the value.
    fn value_grad(&self, a: &[f64], grad: &mut [f64]) -> f64;
}

/// The network with its leading inputs held at `state`.
pub struct FixedState<'a> {
    pub net: &'a Icnn,
    pub state: &'a [f64],
}

impl BoxObjective for FixedState<'_> {
    fn dim(&self) -> usize {
        self.net.input_dim - self.state.len()
    }

    fn value_grad(&self, a: &[f64], grad: &mut [f64]) -> f64 {
        let x: Vec<f64> = self.state.iter().chain(a).copied().collect();
        let mut g = vec![0.0; x.len()];
        let v = self.net.backward(&x, 1.0, None, Some(&mut g));
        grad.copy_from_slice(&g[self.state.len()..]);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinimizeConfig {
    pub restarts: usize,
    pub max_steps: usize,
    /// Stop once the projected-gradient residual falls below this.
    pub tolerance: f64,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        Self { restarts: 5, max_steps: 500, tolerance: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub value: f64,
    /// `‖P(a − ∇f) − a‖∞` at the returned point.
    pub kkt_residual: f64,
    /// Largest minus smallest final value across restarts.
    pub spread: f64,
}

fn project(a: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in a.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

fn kkt(a: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    a.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&v, &d), (&l, &h))| ((v - d).clamp(l, h) - v).abs())
        .fold(0.0, f64::max)
}

fn descend(obj: &dyn BoxObjective, start: Vec<f64>, lo: &[f64], hi: &[f64], cfg: &MinimizeConfig) -> (Vec<f64>, f64, f64) {
    let n = start.len();
    let mut a = start;
    project(&mut a, lo, hi);
    let mut g = vec![0.0; n];
    let mut f = obj.value_grad(&a, &mut g);
    let mut alpha = 1.0;
    let mut trial = vec![0.0; n];
    let mut gt = vec![0.0; n];
    for _ in 0..cfg.max_steps {
        if kkt(&a, &g, lo, hi) <= cfg.tolerance {
            break;
        }
        // Armijo backtracking along the projection arc
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = a[i] - alpha * g[i];
            }
            project(&mut trial, lo, hi);
            let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - a[i])).sum();
            let ft = obj.value_grad(&trial, &mut gt);
            if ft <= f + 1e-4 * decrease {
                accepted = Some(ft);
                break;
            }
            alpha *= 0.5;
        }
        let Some(ft) = accepted else { break };
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..n {
            let s = trial[i] - a[i];
            ss += s * s;
            sy += s * (gt[i] - g[i]);
        }
        std::mem::swap(&mut a, &mut trial);
        std::mem::swap(&mut g, &mut gt);
        f = ft;
        if ss == 0.0 {
            break;
        }
        // Barzilai-Borwein step for the next iteration
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { (alpha * 2.0).min(1e10) };
    }
    let r = kkt(&a, &g, lo, hi);
    (a, f, r)
}

/// Projected gradient descent over `[lo, hi]`, the first run from the box
/// centre and the others from uniform draws. Returns the lowest value.
pub fn minimize_over_box(
    obj: &dyn BoxObjective,
    lo: &[f64],
    hi: &[f64],
    cfg: &MinimizeConfig,
    rng: &mut impl Rng,
    mode: Mode,
) -> Result<Minimum> {
    let n = obj.dim();
    if lo.len() != n || hi.len() != n {
        return Err(Error::Shape("box bounds do not match the objective".into()));
    }
    if lo.iter().zip(hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
        return Err(Error::Config("box bounds must be finite with lo ≤ hi".into()));
    }
    if cfg.restarts == 0 {
        return Err(Error::Config("at least one restart is needed".into()));
    }
    let mut starts = vec![lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect::<Vec<_>>()];
    for _ in 1..cfg.restarts {
        starts.push(lo.iter().zip(hi).map(|(&l, &h)| if l < h { rng.random_range(l..=h) } else { l }).collect());
    }
    let runs = par::map(mode, &starts, |s| descend(obj, s.clone(), lo, hi, cfg));
    let lowest = runs.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let highest = runs.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let best = runs.into_iter().min_by(|x, y| x.1.total_cmp(&y.1)).unwrap();
    Ok(Minimum { point: best.0, value: best.1, kkt_residual: best.2, spread: highest - lowest })
}

/// Counts `f(λu + (1−λ)v) > λf(u) + (1−λ)f(v) + tol` over random triples
/// in the box.
pub fn segment_violations(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    lo: &[f64],
    hi: &[f64],
    n_triples: usize,
    tol: f64,
    rng: &mut impl Rng,
    mode: Mode,
) -> usize {
    let mut draw = || -> Vec<f64> { lo.iter().zip(hi).map(|(&l, &h)| if l < h { rng.random_range(l..h) } else { l }).collect() };
    let triples: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..n_triples).map(|_| (draw(), draw(), 0.0)).collect();
    let lambdas: Vec<f64> = (0..n_triples).map(|_| rng.random::<f64>()).collect();
    let triples: Vec<_> = triples.into_iter().zip(lambdas).map(|((u, v, _), l)| (u, v, l)).collect();
    par::map(mode, &triples, |(u, v, l)| {
        let mid: Vec<f64> = u.iter().zip(v).map(|(a, b)| l * a + (1.0 - l) * b).collect();
        f(&mid) > l * f(u) + (1.0 - l) * f(v) + tol
    })
    .into_iter()
    .filter(|&bad| bad)
    .count()
}
