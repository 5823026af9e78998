//! Numerical checks of the convexity claims: segment tests for convex
//! surrogates, directional second derivatives of the training loss, the
//! closed-form directional derivatives of a single-block network, the
//! safe-region inequality and the initialization sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DomainError, Error, Result};
use crate::icnn::segment_violations;
use crate::local::{fit, loss, LayerKind, LocalStructure, LocalWeights, ParamSlot, Plan, TrainConfig};
use crate::matrix::Matrix;
use crate::par::{self, Mode};

/// Relative agreement required between the two second-derivative paths.
pub const CONSISTENCY_TOL: f64 = 1e-4;

/// Convexity violations of `f` over `n_triples` random segments in the box.
pub fn segment_convexity_test(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    lo: &[f64],
    hi: &[f64],
    n_triples: usize,
    tol: f64,
    seed: u64,
    mode: Mode,
) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    segment_violations(f, lo, hi, n_triples, tol, &mut rng, mode)
}

/// Direction with the given values on `slots` and zeros elsewhere.
pub fn direction_from(weights: &LocalWeights, slots: &[ParamSlot], values: &[f64]) -> LocalWeights {
    let mut d = weights.zeros_like();
    d.scatter(slots, values);
    d
}

/// Uniformly random unit direction over the live weights.
pub fn random_direction(structure: &LocalStructure, weights: &LocalWeights, rng: &mut impl Rng) -> LocalWeights {
    let slots = structure.param_slots();
    let mut v: Vec<f64> = slots.iter().map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter_mut().for_each(|a| *a /= norm);
    direction_from(weights, &slots, &v)
}

fn shifted(weights: &LocalWeights, direction: &LocalWeights, t: f64) -> LocalWeights {
    let mut w = weights.clone();
    let mut d = direction.clone();
    d.scale(t);
    w.add_assign(&d);
    w
}

/// Richardson-extrapolated central first difference from steps `h` and `h/10`.
pub fn richardson_first(f: &dyn Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let d = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    Ok((100.0 * d(h / 10.0)? - d(h)?) / 99.0)
}

/// Richardson-extrapolated central second difference from steps `h` and `h/10`.
pub fn richardson_second(f: &dyn Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let f0 = f(0.0)?;
    let d = |h: f64| -> Result<f64> { Ok((f(h)? - 2.0 * f0 + f(-h)?) / (h * h)) };
    Ok((100.0 * d(h / 10.0)? - d(h)?) / 99.0)
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// `d²/dt² L(W + tX)` at `t = 0` by the chain rule,
/// `(1/N)Σ[(ŷ′)² + e·ŷ″]`, after checking it against finite differences.
pub fn loss_second_derivative(
    structure: &LocalStructure,
    weights: &LocalWeights,
    x: &Matrix,
    y: &Matrix,
    direction: &LocalWeights,
    mode: Mode,
) -> Result<f64> {
    let plan = Plan::new(structure)?;
    let parts = par::map_range(mode, x.rows(), |r| -> Result<f64> {
        let jet = plan.jet(weights, direction, x.row(r))?;
        Ok(jet.iter().enumerate().map(|(o, [v, d1, d2])| d1 * d1 + (v - y.get(r, o)) * d2).sum())
    });
    let mut chain = 0.0;
    for p in parts {
        chain += p?;
    }
    chain /= x.rows() as f64;
    let along = |t: f64| loss(structure, &shifted(weights, direction, t), x, y, mode);
    let fd = richardson_second(&along, 1e-4)?;
    let gap = relative_gap(fd, chain);
    if gap > CONSISTENCY_TOL {
        return Err(Error::Consistency(format!(
            "loss curvature: chain rule {chain:e}, finite differences {fd:e} (relative gap {gap:e})"
        )));
    }
    Ok(chain)
}

/// First and second directional derivatives of every output of a
/// single-block network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalDerivs {
    pub y_prime: Vec<f64>,
    /// `2X₁ᵀ(u∘v) + W₁ᵀ[u∘(v∘v + c)]`.
    pub y_second: Vec<f64>,
    /// `2X₁ᵀ(u∘v) + W₁ᵀ(u∘v∘w)`; equal to `y_second` when every product
    /// carries at most one weighted factor.
    pub y_second_product_form: Vec<f64>,
}

fn single_block(structure: &LocalStructure) -> Result<()> {
    if structure.kinds() != [LayerKind::Activation, LayerKind::Multiplication, LayerKind::Summation] {
        return Err(Error::Structure("closed-form derivatives need one activation, product and sum layer".into()));
    }
    Ok(())
}

/// Closed forms through the vectors `u = exp(Sᵀ log Φ)`,
/// `v = Sᵀ(Φ′/Φ ∘ X₀x)` and `w = Sᵀ(Φ″/Φ′ ∘ X₀x)`. Factor signs are kept
/// apart from the logarithm, so negative factors are fine; a zero factor is
/// a domain error.
pub fn analytic_directional_derivs(
    structure: &LocalStructure,
    weights: &LocalWeights,
    x: &[f64],
    direction: &LocalWeights,
) -> Result<DirectionalDerivs> {
    single_block(structure)?;
    weights.check_shape(structure)?;
    direction.check_shape(structure)?;
    if x.len() != structure.n_inputs() {
        return Err(Error::Shape("input length".into()));
    }
    let live = structure.live_mask();
    let (inner, d_inner) = (weights.inner(0), direction.inner(0));
    let (w1, x1) = (weights.summation(2), direction.summation(2));
    let s = structure.indicator(1);
    let z2 = structure.indicator(2);
    let n_mult = structure.size(2);
    let mut u = vec![0.0; n_mult];
    let mut v = vec![0.0; n_mult];
    let mut c = vec![0.0; n_mult];
    let mut w = vec![0.0; n_mult];
    for m in (0..n_mult).filter(|&m| live[2][m]) {
        let (mut log_abs, mut sign) = (0.0, 1.0);
        for n in s.column_rows(m) {
            let (src, op) = structure.activation_source(0, n);
            let (z, dz) = if op.has_inner_weight() { (inner[n] * x[src], d_inner[n] * x[src]) } else { (x[src], 0.0) };
            let (f, f1, f2) = op.kind.derivatives(z)?;
            if f == 0.0 {
                return Err(DomainError { symbol: op.kind, argument: z }.into());
            }
            log_abs += f.abs().ln();
            sign *= f.signum();
            v[m] += f1 / f * dz;
            c[m] += (f2 / f - (f1 / f) * (f1 / f)) * dz * dz;
            if f1 != 0.0 {
                w[m] += f2 / f1 * dz;
            }
        }
        u[m] = sign * log_abs.exp();
    }
    let n_out = structure.n_outputs();
    let mut out = DirectionalDerivs {
        y_prime: vec![0.0; n_out],
        y_second: vec![0.0; n_out],
        y_second_product_form: vec![0.0; n_out],
    };
    for o in 0..n_out {
        for m in (0..n_mult).filter(|&m| z2.get(m, o)) {
            let uv = u[m] * v[m];
            out.y_prime[o] += x1.get(m, o) * u[m] + w1.get(m, o) * uv;
            out.y_second[o] += 2.0 * x1.get(m, o) * uv + w1.get(m, o) * u[m] * (v[m] * v[m] + c[m]);
            out.y_second_product_form[o] += 2.0 * x1.get(m, o) * uv + w1.get(m, o) * uv * w[m];
        }
    }
    Ok(out)
}

/// Finite-difference counterparts of [`analytic_directional_derivs`].
pub fn numeric_directional_derivs(
    structure: &LocalStructure,
    weights: &LocalWeights,
    x: &[f64],
    direction: &LocalWeights,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    for o in 0..structure.n_outputs() {
        let f = |t: f64| -> Result<f64> { Ok(crate::local::forward(structure, &shifted(weights, direction, t), x)?[o]) };
        d1.push(richardson_first(&f, 1e-4)?);
        d2.push(richardson_second(&f, 1e-1)?);
    }
    Ok((d1, d2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEstimate {
    /// Largest observed `|ŷ″|/|ŷ′|`.
    pub eta: f64,
    /// Per direction, the smallest and largest `|ŷ′|` over the samples.
    pub min_abs_y_prime: Vec<f64>,
    pub max_abs_y_prime: Vec<f64>,
    pub max_residual: f64,
    /// `min over directions of min|ŷ′|² / (η·max|ŷ′|)`.
    pub bound: f64,
    pub membership: bool,
}

impl RegionEstimate {
    /// Whether the inequality would hold with residuals of size `r`.
    pub fn holds_with_residual(&self, r: f64) -> bool {
        self.bound > r
    }
}

/// Guard below which `|ŷ′|` is left out of the η ratio.
pub const Y_PRIME_GUARD: f64 = 1e-10;

/// Samples `n_directions` unit directions and tests
/// `min|ŷ′|² / (η·max|ŷ′|) > max|ŷ − y|` for all of them.
pub fn estimate_region(
    structure: &LocalStructure,
    weights: &LocalWeights,
    x: &Matrix,
    y: &Matrix,
    n_directions: usize,
    seed: u64,
    mode: Mode,
) -> Result<RegionEstimate> {
    if n_directions == 0 {
        return Err(Error::Config("at least one direction is needed".into()));
    }
    let plan = Plan::new(structure)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<LocalWeights> = (0..n_directions).map(|_| random_direction(structure, weights, &mut rng)).collect();
    // (min |ŷ′|, max |ŷ′|, max ratio, max residual) per direction
    let stats = par::map(mode, &dirs, |d| -> Result<(f64, f64, f64, f64)> {
        let (mut lo, mut hi, mut ratio, mut res) = (f64::INFINITY, 0.0f64, 0.0f64, 0.0f64);
        for r in 0..x.rows() {
            for (o, [v, d1, d2]) in plan.jet(weights, d, x.row(r))?.into_iter().enumerate() {
                let a = d1.abs();
                lo = lo.min(a);
                hi = hi.max(a);
                if a > Y_PRIME_GUARD {
                    ratio = ratio.max(d2.abs() / a);
                }
                res = res.max((v - y.get(r, o)).abs());
            }
        }
        Ok((lo, hi, ratio, res))
    });
    let stats = stats.into_iter().collect::<Result<Vec<_>>>()?;
    if stats.iter().all(|s| s.1 <= Y_PRIME_GUARD) {
        return Err(Error::Degenerate("every directional derivative vanishes".into()));
    }
    let eta = stats.iter().map(|s| s.2).fold(0.0, f64::max);
    let max_residual = stats.iter().map(|s| s.3).fold(0.0, f64::max);
    let bound = stats
        .iter()
        .map(|&(lo, hi, _, _)| if hi > 0.0 && eta > 0.0 { lo * lo / (eta * hi) } else { 0.0 })
        .fold(f64::INFINITY, f64::min);
    Ok(RegionEstimate {
        eta,
        min_abs_y_prime: stats.iter().map(|s| s.0).collect(),
        max_abs_y_prime: stats.iter().map(|s| s.1).collect(),
        max_residual,
        bound,
        membership: bound > max_residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w0: f64,
    /// `1/(2N)Σ‖ŷ − y‖²` after training; infinite when training failed.
    pub final_loss: f64,
    /// `Σ‖ŷ − y‖²`, the same quantity as a plain sum.
    pub sse: f64,
}

/// Trains from every weight set to `w0`, for each grid point.
pub fn init_sweep(
    structure: &LocalStructure,
    x: &Matrix,
    y: &Matrix,
    grid: &[f64],
    train: &TrainConfig,
    mode: Mode,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("empty initialization grid".into()));
    }
    let n = x.rows() as f64;
    Ok(par::map(mode, grid, |&w0| {
        let cfg = TrainConfig { init_value: w0, ..train.clone() };
        let final_loss = match fit(structure, &cfg, x, y, Mode::Sequential) {
            Ok(r) => r.final_loss,
            Err(e) => {
                log::info!("w0 = {w0}: {e}");
                f64::INFINITY
            }
        };
        SweepRow { w0, final_loss, sse: 2.0 * n * final_loss }
    }))
}

/// CSV body `w0,final_loss,sse`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("w0,final_loss,sse\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.w0, r.final_loss, r.sse));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local::Indicator;
    use crate::symbols::SymbolLibrary;

    /// `w₁·x₁²·cos(w₂x₂)` with library {id, square, cos}.
    pub(crate) fn toy() -> (LocalStructure, Vec<ParamSlot>) {
        let lib = SymbolLibrary::from_names(&["id", "square", "cos"]).unwrap();
        let s = LocalStructure::standard(2, lib, 1, 1)
            .unwrap()
            .with_indicator(1, Indicator::from_fn(6, 1, |i, _| i == 1 || i == 5))
            .unwrap()
            .with_indicator(2, Indicator::ones(1, 1))
            .unwrap();
        let slots = s.param_slots();
        (s, slots)
    }

    fn at(s: &LocalStructure, slots: &[ParamSlot], w1: f64, w2: f64) -> LocalWeights {
        let mut w = LocalWeights::filled(s, 1.0);
        // inner weight first, then the summation weight
        w.scatter(slots, &[w2, w1]);
        w
    }

    #[test]
    fn closed_form_examples() {
        let (s, slots) = toy();
        let w = at(&s, &slots, 3.0, 2.5);
        let d = analytic_directional_derivs(&s, &w, &[1.0, 1.0], &direction_from(&w, &slots, &[0.0, 1.0])).unwrap();
        assert!((d.y_prime[0] - 2.5f64.cos()).abs() < 1e-12);
        let d = analytic_directional_derivs(&s, &w, &[1.0, 1.0], &direction_from(&w, &slots, &[1.0, 0.0])).unwrap();
        assert!((d.y_prime[0] - -1.795_416_432_311_869_8).abs() < 1e-12);
        let d = analytic_directional_derivs(&s, &w, &[1.0, 1.0], &w.zeros_like()).unwrap();
        assert_eq!((d.y_prime[0], d.y_second[0]), (0.0, 0.0));
        assert!(matches!(
            analytic_directional_derivs(&s, &w, &[0.0, 1.0], &w.zeros_like()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn closed_form_matches_differences() {
        let (s, slots) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let w = at(&s, &slots, rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let d = random_direction(&s, &w, &mut rng);
            let x = [rng.random_range(1.0..2.0), rng.random_range(1.0..2.0)];
            let a = analytic_directional_derivs(&s, &w, &x, &d).unwrap();
            let (n1, n2) = numeric_directional_derivs(&s, &w, &x, &d).unwrap();
            assert!(relative_gap(a.y_prime[0], n1[0]) < 1e-6 || (a.y_prime[0] - n1[0]).abs() < 1e-9);
            assert!(relative_gap(a.y_second[0], n2[0]) < 1e-5 || (a.y_second[0] - n2[0]).abs() < 1e-7);
            assert!((a.y_second[0] - a.y_second_product_form[0]).abs() <= 1e-9 * a.y_second[0].abs().max(1.0));
        }
    }

    #[test]
    fn linear_model_curvature_is_mean_square_input() {
        let lib = SymbolLibrary::from_names(&["id"]).unwrap();
        let s = LocalStructure::standard(1, lib, 1, 1)
            .unwrap()
            .with_indicator(1, Indicator::ones(1, 1))
            .unwrap()
            .with_indicator(2, Indicator::ones(1, 1))
            .unwrap();
        let x = Matrix::from_vec(3, 1, vec![1.0, 2.0, 4.0]);
        let y = Matrix::from_vec(3, 1, vec![0.5, 3.0, -1.0]);
        let w = LocalWeights::filled(&s, 0.7);
        let d = direction_from(&w, &s.param_slots(), &[1.0]);
        let v = loss_second_derivative(&s, &w, &x, &y, &d, Mode::Sequential).unwrap();
        assert!((v - 7.0).abs() < 1e-9, "{v}");
    }

    fn toy_data(n: usize) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::from_fn(n, 2, |_, _| rng.random_range(1.0..2.0));
        let y = Matrix::from_fn(n, 1, |r, _| 3.0 * x.get(r, 0).powi(2) * (2.5 * x.get(r, 1)).cos());
        (x, y)
    }

    #[test]
    fn region_at_and_away_from_the_optimum() {
        let (s, slots) = toy();
        let (x, y) = toy_data(300);
        let opt = estimate_region(&s, &at(&s, &slots, 3.0, 2.5), &x, &y, 20, 3, Mode::default()).unwrap();
        assert!(opt.membership && opt.eta > 0.0);
        assert!(!opt.holds_with_residual(opt.bound * 10.0));
        let far = estimate_region(&s, &at(&s, &slots, 10.0, 10.0), &x, &y, 20, 3, Mode::default()).unwrap();
        assert!(!far.membership);
    }

    #[test]
    fn optimum_has_positive_curvature() {
        let (s, slots) = toy();
        let (x, y) = toy_data(200);
        let w = at(&s, &slots, 3.0, 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let d = random_direction(&s, &w, &mut rng);
            assert!(loss_second_derivative(&s, &w, &x, &y, &d, Mode::Sequential).unwrap() > 0.0);
        }
    }

    #[test]
    fn sweep_flags_zero_init() {
        let (s, _) = toy();
        let (x, y) = toy_data(400);
        let rows = init_sweep(&s, &x, &y, &[0.0, 1.0], &TrainConfig::default(), Mode::default()).unwrap();
        assert!(rows[0].sse > 1.0);
        assert!(rows[1].sse < 1e-6, "{rows:?}");
        assert!(sweep_csv(&rows).starts_with("w0,final_loss,sse\n0,"));
    }
}
