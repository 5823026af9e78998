//! Benchmark data: the two synthetic systems, power-flow injections, a
//! mass-damper network, SNR-controlled noise and CSV persistence.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local::{CanonicalEquation, Term};
use crate::matrix::Matrix;
use crate::metrics::population_std;
use crate::symbols::SymbolKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub input_ranges: Vec<(f64, f64)>,
    /// Population standard deviation of each stored output column.
    pub sigma_y: Vec<f64>,
    pub seed: u64,
    pub snr_db: Option<f64>,
    /// Generating equation, when known.
    pub truth: Option<CanonicalEquation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub meta: DatasetMeta,
}

fn column_ranges(x: &Matrix) -> Vec<(f64, f64)> {
    (0..x.cols())
        .map(|c| {
            let col = x.column(c);
            (col.iter().copied().fold(f64::INFINITY, f64::min), col.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        })
        .collect()
}

impl Dataset {
    /// Builds a dataset, computing σ_y and rejecting non-finite entries.
    pub fn new(name: &str, x: Matrix, y: Matrix, seed: u64, truth: Option<CanonicalEquation>) -> Result<Self> {
        if x.rows() == 0 || x.rows() != y.rows() {
            return Err(Error::Degenerate(format!("{name}: {} inputs for {} outputs", x.rows(), y.rows())));
        }
        if x.as_slice().iter().chain(y.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("{name}: non-finite entries")));
        }
        let sigma_y = (0..y.cols()).map(|c| population_std(&y.column(c))).collect();
        let meta = DatasetMeta {
            name: name.to_string(),
            input_ranges: column_ranges(&x),
            sigma_y,
            seed,
            snr_db: None,
            truth,
        };
        Ok(Self { x, y, meta })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn n_inputs(&self) -> usize {
        self.x.cols()
    }

    pub fn n_outputs(&self) -> usize {
        self.y.cols()
    }

    /// Rows `range` as a new dataset sharing the metadata.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let take = |m: &Matrix| {
            let data = range.clone().flat_map(|r| m.row(r).to_vec()).collect();
            Matrix::from_vec(range.len(), m.cols(), data)
        };
        let mut d = Dataset::new(&self.meta.name, take(&self.x), take(&self.y), self.meta.seed, self.meta.truth.clone())?;
        d.meta.snr_db = self.meta.snr_db;
        Ok(d)
    }
}

fn uniform_inputs(rng: &mut ChaCha8Rng, n: usize, dims: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(n, dims, |_, _| rng.random_range(lo..hi))
}

/// Closed form of a synthetic system.
pub fn syn_truth(which: u8) -> Result<CanonicalEquation> {
    use SymbolKind::*;
    let outputs = match which {
        1 => vec![
            vec![Term::monomial(3.0, &[(0, 4)]).with_func(Cos, 2.5, 1, 2)],
            vec![Term::monomial(4.0, &[(0, 2), (2, 2)])],
            vec![Term::monomial(3.0, &[(2, 4)])],
        ],
        2 => vec![
            vec![Term::monomial(2.2f64.sqrt(), &[(0, 1), (1, 2)]), Term::monomial(1.0, &[(0, 2), (1, 4)])],
            vec![
                Term::monomial(1.0, &[]).with_func(Sin, 1.8, 0, 2).with_func(Log, 3.0, 1, 2),
                Term::monomial(1.0, &[(2, 1)]).with_func(Sin, 1.8, 0, 2),
            ],
            vec![Term::monomial(3.7f64.sqrt(), &[(2, 1)]).with_func(Log, 1.6, 0, 2), Term::monomial(1.0, &[(0, 4)])],
        ],
        _ => return Err(Error::Config(format!("no synthetic system {which}"))),
    };
    Ok(CanonicalEquation::new(outputs, 0.0))
}

/// Evaluates a synthetic system at one input, written out directly.
pub fn syn_eval(which: u8, x: &[f64]) -> Vec<f64> {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    match which {
        1 => vec![3.0 * x1 * x1 * (2.5 * x2).cos(), 4.0 * x1 * x3, 3.0 * x3 * x3],
        _ => vec![
            (2.2 * x1).sqrt() * x2 + x1 * x2 * x2,
            (1.8 * x1).sin() * ((3.0 * x2).ln() + x3.sqrt()),
            (3.7 * x3).sqrt() * (1.6 * x1).ln() + x1 * x1,
        ],
    }
}

/// Synthetic train/test pair: train inputs from U(1,2), test from U(3,4).
pub fn gen_syn(which: u8, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let truth = syn_truth(which)?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("sample counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = format!("syn{which}");
    let mut build = |n, lo, hi| {
        let x = uniform_inputs(&mut rng, n, 3, lo, hi);
        let y = Matrix::from_vec(n, 3, (0..n).flat_map(|r| syn_eval(which, x.row(r))).collect());
        Dataset::new(&name, x, y, seed, Some(truth.clone()))
    };
    let train = build(n_train, 1.0, 2.0)?;
    let test = build(n_test, 3.0, 4.0)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSystemSpec {
    pub nodes: usize,
    pub g: Matrix,
    pub b: Matrix,
}

impl PowerSystemSpec {
    pub fn new(g: Matrix, b: Matrix) -> Result<Self> {
        let m = g.rows();
        if g.cols() != m || b.rows() != m || b.cols() != m {
            return Err(Error::Shape("G and B must be square and equal in size".into()));
        }
        for i in 0..m {
            for j in 0..m {
                if g.get(i, j) != g.get(j, i) || b.get(i, j) != b.get(j, i) {
                    return Err(Error::Config("G and B must be symmetric".into()));
                }
            }
        }
        Ok(Self { nodes: m, g, b })
    }

    /// Seeded topology: a spanning path plus extra lines with probability
    /// `density`. Line conductances are drawn from U(0.5, 2) and
    /// susceptances from U(−5, −1). Diagonals stay zero, so every output is
    /// a sum of cross-node products.
    pub fn random(nodes: usize, density: f64, seed: u64) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::Config("a power system needs at least two nodes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Matrix::zeros(nodes, nodes);
        let mut b = Matrix::zeros(nodes, nodes);
        for i in 0..nodes {
            for j in i + 1..nodes {
                let line = j == i + 1 || rng.random::<f64>() < density;
                let (gv, bv) = (rng.random_range(0.5..2.0), rng.random_range(-5.0..-1.0));
                if line {
                    for (a, c) in [(i, j), (j, i)] {
                        g.set(a, c, gv);
                        b.set(a, c, bv);
                    }
                }
            }
        }
        Self::new(g, b)
    }

    /// Active and reactive injection at every node; `x = (u₁, v₁, …)`.
    pub fn injections(&self, x: &[f64]) -> Vec<f64> {
        let m = self.nodes;
        let mut y = vec![0.0; 2 * m];
        for i in 0..m {
            let (ui, vi) = (x[2 * i], x[2 * i + 1]);
            let (mut p, mut q) = (0.0, 0.0);
            for k in 0..m {
                let (uk, vk) = (x[2 * k], x[2 * k + 1]);
                let (g, b) = (self.g.get(i, k), self.b.get(i, k));
                p += g * (ui * uk + vi * vk) + b * (vi * uk - ui * vk);
                q += g * (vi * uk - ui * vk) - b * (ui * uk + vi * vk);
            }
            y[2 * i] = p;
            y[2 * i + 1] = q;
        }
        y
    }

    /// The injections as a canonical equation.
    pub fn truth(&self) -> CanonicalEquation {
        let m = self.nodes;
        let (u, v) = (|i: usize| 2 * i, |i: usize| 2 * i + 1);
        let mut outputs = Vec::with_capacity(2 * m);
        for i in 0..m {
            let mut p = Vec::new();
            let mut q = Vec::new();
            for k in 0..m {
                let (g, b) = (self.g.get(i, k), self.b.get(i, k));
                let pair = |a: usize, c: usize, coef: f64| Term::monomial(coef, &[(a, 2), (c, 2)]);
                p.extend([pair(u(i), u(k), g), pair(v(i), v(k), g), pair(v(i), u(k), b), pair(u(i), v(k), -b)]);
                q.extend([pair(v(i), u(k), g), pair(u(i), v(k), -g), pair(u(i), u(k), -b), pair(v(i), v(k), -b)]);
            }
            outputs.push(p);
            outputs.push(q);
        }
        CanonicalEquation::new(outputs, 0.0)
    }
}

/// Voltages drawn per coordinate from `voltage_range`.
pub fn gen_power(spec: &PowerSystemSpec, n: usize, voltage_range: (f64, f64), seed: u64) -> Result<Dataset> {
    if n == 0 || voltage_range.0 >= voltage_range.1 {
        return Err(Error::Config("power data needs n > 0 and a non-empty voltage range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform_inputs(&mut rng, n, 2 * spec.nodes, voltage_range.0, voltage_range.1);
    let y = Matrix::from_vec(n, 2 * spec.nodes, (0..n).flat_map(|r| spec.injections(x.row(r))).collect());
    Dataset::new("pow", x, y, seed, Some(spec.truth()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassDamperSpec {
    pub nodes: usize,
    /// Node × line incidence.
    pub d: Matrix,
    /// Damping per line.
    pub r: Vec<f64>,
    /// Mass per node.
    pub m: Vec<f64>,
    pub dt: f64,
    pub steps: usize,
}

impl MassDamperSpec {
    pub fn new(d: Matrix, r: Vec<f64>, m: Vec<f64>, dt: f64, steps: usize) -> Result<Self> {
        if d.cols() != r.len() || d.rows() != m.len() {
            return Err(Error::Shape("incidence, damping and mass sizes disagree".into()));
        }
        if r.iter().chain(&m).any(|&v| v.is_nan() || v <= 0.0) || dt.is_nan() || dt <= 0.0 {
            return Err(Error::Config("damping, masses and the step must be positive".into()));
        }
        if steps < 2 {
            return Err(Error::Config("the simulation needs at least two steps".into()));
        }
        Ok(Self { nodes: m.len(), d, r, m, dt, steps })
    }

    /// Seeded connected topology: a spanning path plus extra lines with
    /// probability `density`; damping from U(0.05, 0.15), masses from U(1, 2).
    pub fn random(nodes: usize, density: f64, dt: f64, steps: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lines = Vec::new();
        for i in 0..nodes {
            for j in i + 1..nodes {
                if j == i + 1 || rng.random::<f64>() < density {
                    lines.push((i, j));
                }
            }
        }
        let mut d = Matrix::zeros(nodes, lines.len());
        for (e, &(i, j)) in lines.iter().enumerate() {
            d.set(i, e, 1.0);
            d.set(j, e, -1.0);
        }
        let r = (0..lines.len()).map(|_| rng.random_range(0.05..0.15)).collect();
        let m = (0..nodes).map(|_| rng.random_range(1.0..2.0)).collect();
        Self::new(d, r, m, dt, steps)
    }

    /// `A = −D R Dᵀ M⁻¹`.
    pub fn system_matrix(&self) -> Matrix {
        let n = self.nodes;
        Matrix::from_fn(n, n, |i, j| {
            let s: f64 = (0..self.r.len()).map(|e| self.d.get(i, e) * self.r[e] * self.d.get(j, e)).sum();
            -s / self.m[j]
        })
    }

    pub fn truth(&self) -> CanonicalEquation {
        let a = self.system_matrix();
        let outputs =
            (0..self.nodes).map(|i| (0..self.nodes).map(|j| Term::monomial(a.get(i, j), &[(j, 2)])).collect()).collect();
        CanonicalEquation::new(outputs, 0.0)
    }
}

/// Forward-Euler trajectory from a U(−1, 1) initial state. Rows of `x` are
/// states, rows of `y` the exact derivative `A·q`. The first half is the
/// training set.
pub fn gen_massdamper(spec: &MassDamperSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q0: Vec<f64> = (0..spec.nodes).map(|_| rng.random_range(-1.0..1.0)).collect();
    simulate_massdamper(spec, &q0, seed)
}

/// Same as [`gen_massdamper`] from a given initial state.
pub fn simulate_massdamper(spec: &MassDamperSpec, q0: &[f64], seed: u64) -> Result<(Dataset, Dataset)> {
    let n = spec.nodes;
    if q0.len() != n {
        return Err(Error::Shape("initial state length".into()));
    }
    let a = spec.system_matrix();
    let mut q = q0.to_vec();
    let mut dq = vec![0.0; n];
    let mut xs = Vec::with_capacity(spec.steps * n);
    let mut ys = Vec::with_capacity(spec.steps * n);
    for _ in 0..spec.steps {
        a.mul_vec(&q, &mut dq);
        xs.extend_from_slice(&q);
        ys.extend_from_slice(&dq);
        for (qi, di) in q.iter_mut().zip(&dq) {
            *qi += spec.dt * di;
        }
    }
    let truth = spec.truth();
    let half = spec.steps / 2;
    let part = |from: usize, to: usize| {
        Dataset::new(
            "mas",
            Matrix::from_vec(to - from, n, xs[from * n..to * n].to_vec()),
            Matrix::from_vec(to - from, n, ys[from * n..to * n].to_vec()),
            seed,
            Some(truth.clone()),
        )
    };
    Ok((part(0, half)?, part(half, spec.steps)?))
}

/// Adds Gaussian noise to every output column with standard deviation
/// `rms(column)·10^(−snr_db/20)`. `None` leaves the data unchanged.
pub fn add_noise(ds: &Dataset, snr_db: Option<f64>, seed: u64) -> Result<Dataset> {
    let Some(snr) = snr_db else { return Ok(ds.clone()) };
    if !snr.is_finite() {
        return Err(Error::Config(format!("SNR must be finite, got {snr}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = ds.y.clone();
    for c in 0..y.cols() {
        let col = y.column(c);
        let rms = (col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64).sqrt();
        let std = rms * 10f64.powf(-snr / 20.0);
        if std == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        for r in 0..y.rows() {
            *y.get_mut(r, c) += normal.sample(&mut rng);
        }
    }
    let mut out = Dataset::new(&ds.meta.name, ds.x.clone(), y, ds.meta.seed, ds.meta.truth.clone())?;
    out.meta.input_ranges = ds.meta.input_ranges.clone();
    out.meta.snr_db = Some(snr);
    Ok(out)
}

/// Path of the JSON sidecar next to a CSV file.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// CSV body with header `x1..xn,y1..ym`; values use the shortest decimal
/// form that parses back to the same bits.
pub fn to_csv(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (1..=ds.n_inputs())
        .map(|i| format!("x{i}"))
        .chain((1..=ds.n_outputs()).map(|i| format!("y{i}")))
        .collect();
    w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
    for r in 0..ds.len() {
        let rec: Vec<String> = ds.x.row(r).iter().chain(ds.y.row(r)).map(|v| v.to_string()).collect();
        w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

/// Parses a CSV body; `meta` supplies the name and ground truth.
pub fn from_csv(bytes: &[u8], meta: Option<DatasetMeta>) -> Result<Dataset> {
    let mut rd = csv::Reader::from_reader(bytes);
    let header = rd.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let n_in = header.iter().take_while(|h| h.starts_with('x')).count();
    let n_out = header.len() - n_in;
    for (i, h) in header.iter().enumerate() {
        let want = if i < n_in { format!("x{}", i + 1) } else { format!("y{}", i - n_in + 1) };
        if h != want {
            return Err(Error::Parse(format!("header column {} is {h:?}, expected {want:?}", i + 1)));
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(Error::Parse("header needs x and y columns".into()));
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse(format!("row {}: bad number {field:?}", line + 1)))?;
            if i < n_in {
                xs.push(v)
            } else {
                ys.push(v)
            }
        }
    }
    let rows = xs.len() / n_in;
    let (name, seed, truth, snr, ranges) = match meta {
        Some(m) => (m.name, m.seed, m.truth, m.snr_db, Some(m.input_ranges)),
        None => ("csv".to_string(), 0, None, None, None),
    };
    let mut ds = Dataset::new(&name, Matrix::from_vec(rows, n_in, xs), Matrix::from_vec(rows, n_out, ys), seed, truth)?;
    ds.meta.snr_db = snr;
    if let Some(r) = ranges {
        ds.meta.input_ranges = r;
    }
    Ok(ds)
}

/// Reads a CSV file and its sidecar, when present.
pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mp = meta_path(path);
    let meta = if mp.exists() { Some(serde_json::from_slice(&std::fs::read(&mp)?)?) } else { None };
    from_csv(&bytes, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn syn_examples() {
        let y = syn_eval(1, &[1.0, 0.0, 2.0]);
        assert_eq!(y, vec![3.0, 8.0, 12.0]);
        let y = syn_eval(2, &[1.0, 1.0, 1.0]);
        assert!((y[0] - 2.483_239_697_419_132).abs() < 1e-14);
    }

    #[test]
    fn syn_is_seeded_and_in_range() {
        let (a, t) = gen_syn(1, 50, 40, 3).unwrap();
        let (b, _) = gen_syn(1, 50, 40, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.x.as_slice().iter().all(|&v| (1.0..2.0).contains(&v)));
        assert!(t.x.as_slice().iter().all(|&v| (3.0..4.0).contains(&v)));
        assert_eq!(t.len(), 40);
    }

    #[test]
    fn truth_matches_generator() {
        for which in [1, 2] {
            let (tr, _) = gen_syn(which, 100, 1, 9).unwrap();
            let eq = tr.meta.truth.as_ref().unwrap();
            for r in 0..tr.len() {
                for o in 0..3 {
                    let v = eq.eval(o, tr.x.row(r)).unwrap();
                    assert!((v - tr.y.get(r, o)).abs() <= 1e-12 * v.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn power_examples() {
        let spec = PowerSystemSpec::new(
            Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]),
            Matrix::zeros(2, 2),
        )
        .unwrap();
        assert_eq!(spec.injections(&[1.0, 0.0, 1.0, 0.0])[0], 1.0);
        assert!(spec.injections(&[0.0; 4]).iter().all(|&v| v == 0.0));
        let spec = PowerSystemSpec::random(5, 0.4, 11).unwrap();
        let ds = gen_power(&spec, 30, (-1.0, 1.0), 2).unwrap();
        let eq = ds.meta.truth.as_ref().unwrap();
        for r in 0..ds.len() {
            for o in 0..10 {
                assert!((eq.eval(o, ds.x.row(r)).unwrap() - ds.y.get(r, o)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn massdamper_examples() {
        let spec = MassDamperSpec::new(Matrix::from_vec(1, 1, vec![1.0]), vec![0.3], vec![1.5], 0.01, 4).unwrap();
        let (tr, _) = simulate_massdamper(&spec, &[1.0], 0).unwrap();
        assert!((tr.y.get(0, 0) - (-0.3 / 1.5)).abs() < 1e-15);
        let spec = MassDamperSpec::random(4, 0.5, 0.01, 20, 1).unwrap();
        let (tr, te) = simulate_massdamper(&spec, &[0.0; 4], 0).unwrap();
        assert!(tr.x.as_slice().iter().chain(te.y.as_slice()).all(|&v| v == 0.0));
        // momentum is conserved: columns of A sum to zero after mass scaling
        let a = spec.system_matrix();
        for j in 0..4 {
            let s: f64 = (0..4).map(|i| a.get(i, j)).sum();
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn noise_levels() {
        let x = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let y = Matrix::from_vec(4, 1, vec![5.0; 4]);
        let ds = Dataset::new("c", x, y, 0, None).unwrap();
        assert_eq!(add_noise(&ds, None, 1).unwrap(), ds);
        let noisy = add_noise(&ds, Some(20.0), 1).unwrap();
        assert_eq!(noisy.x, ds.x);
        assert_eq!(noisy.meta.snr_db, Some(20.0));
        assert!(add_noise(&ds, Some(f64::NAN), 1).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let (mut ds, _) = gen_syn(2, 25, 1, 4).unwrap();
        ds = add_noise(&ds, Some(90.0), 5).unwrap();
        let bytes = to_csv(&ds).unwrap();
        let back = from_csv(&bytes, Some(ds.meta.clone())).unwrap();
        assert_eq!(back, ds);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("x1,x2,x3,y1,y2,y3\n"));
    }
}
