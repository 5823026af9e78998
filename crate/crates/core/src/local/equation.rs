//! Expansion of a trained network into a simplified sum of terms.
//!
//! A term is `coef · Π x_i^{p_i} · Π f(w·arg)`. Exponents are stored in
//! half units so that `√x`, `x` and `x²` share one representation, which
//! makes `√x·√x = x`, `(√x)² = x` and `√(x²) = x` fall out of ordinary
//! exponent arithmetic. Inputs are assumed nonnegative, as in every
//! dataset where `√` is in the library.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::structure::{LayerKind, LocalStructure};
use super::weights::LocalWeights;
use crate::symbols::SymbolKind;

/// `x_input^(halves/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Power {
    pub input: usize,
    pub halves: i32,
}

/// `kind(weight · Σ arg)`; `kind` is never `id` or `square`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Func {
    pub kind: SymbolKind,
    pub weight: f64,
    pub arg: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coef: f64,
    pub powers: Vec<Power>,
    pub funcs: Vec<Func>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalEquation {
    /// One sum of terms per output.
    pub outputs: Vec<Vec<Term>>,
}

impl Term {
    pub fn constant(coef: f64) -> Self {
        Self { coef, powers: Vec::new(), funcs: Vec::new() }
    }

    /// `coef · Π x_i^{halves/2}`.
    pub fn monomial(coef: f64, powers: &[(usize, i32)]) -> Self {
        let mut t = Self::constant(coef);
        for &(input, halves) in powers {
            t = t.mul(&Term { coef: 1.0, powers: vec![Power { input, halves }], funcs: Vec::new() });
        }
        t
    }

    /// Multiplies in `kind(weight · x_input^{halves/2})`.
    pub fn with_func(mut self, kind: SymbolKind, weight: f64, input: usize, halves: i32) -> Self {
        let arg = vec![Term::monomial(1.0, &[(input, halves)])];
        self.funcs.push(Func { kind, weight, arg });
        self
    }

    pub fn mul(&self, other: &Term) -> Term {
        let mut powers = self.powers.clone();
        for p in &other.powers {
            match powers.iter_mut().find(|q| q.input == p.input) {
                Some(q) => q.halves += p.halves,
                None => powers.push(*p),
            }
        }
        powers.retain(|p| p.halves != 0);
        powers.sort();
        let mut funcs = self.funcs.clone();
        funcs.extend(other.funcs.iter().cloned());
        funcs.sort_by(func_order);
        Term { coef: self.coef * other.coef, powers, funcs }
    }

    fn scaled(&self, c: f64) -> Term {
        Term { coef: self.coef * c, ..self.clone() }
    }

    /// Shape of the term with every coefficient and weight blanked out.
    pub fn signature(&self) -> String {
        let mut parts: Vec<String> = self.powers.iter().map(render_power).collect();
        parts.extend(self.funcs.iter().map(|f| format!("{}(#*{})", f.kind, arg_signature(&f.arg))));
        if parts.is_empty() {
            "1".into()
        } else {
            parts.join("*")
        }
    }

    /// Coefficient slots: the term coefficient, then every function weight
    /// depth first.
    pub fn slots(&self) -> Vec<f64> {
        let mut out = vec![self.coef];
        self.func_slots(&mut out);
        out
    }

    fn func_slots(&self, out: &mut Vec<f64>) {
        for f in &self.funcs {
            out.push(f.weight);
            if f.arg.len() == 1 {
                f.arg[0].func_slots(out);
            } else {
                for t in &f.arg {
                    out.extend(t.slots());
                }
            }
        }
    }

    fn body(&self, digits: usize) -> String {
        let mut parts: Vec<String> = self.powers.iter().map(render_power).collect();
        for f in &self.funcs {
            let arg = if f.arg.len() == 1 && f.arg[0].coef == 1.0 {
                let b = f.arg[0].body(digits);
                if b.is_empty() {
                    "1".to_string()
                } else {
                    b
                }
            } else {
                format!("({})", render_sum(&f.arg, digits))
            };
            parts.push(format!("{}({:.digits$}*{arg})", f.kind, f.weight));
        }
        parts.join("*")
    }
}

fn render_power(p: &Power) -> String {
    let v = p.input + 1;
    match p.halves {
        1 => format!("sqrt(x{v})"),
        2 => format!("x{v}"),
        h if h % 2 == 0 => format!("x{v}^{}", h / 2),
        h => format!("x{v}^{}", f64::from(h) / 2.0),
    }
}

fn arg_signature(arg: &[Term]) -> String {
    match arg {
        [t] => t.signature(),
        _ => format!("({})", arg.iter().map(Term::signature).collect::<Vec<_>>().join(" + ")),
    }
}

fn func_order(a: &Func, b: &Func) -> Ordering {
    let ka = (first_input(&a.arg), a.kind, arg_signature(&a.arg));
    let kb = (first_input(&b.arg), b.kind, arg_signature(&b.arg));
    ka.cmp(&kb).then(a.weight.total_cmp(&b.weight))
}

fn first_input(arg: &[Term]) -> usize {
    arg.iter().flat_map(|t| t.powers.iter().map(|p| p.input)).min().unwrap_or(usize::MAX)
}

fn term_order(a: &Term, b: &Term) -> Ordering {
    let (pa, pb) = (a.powers.iter().map(|p| (p.input, -p.halves)), b.powers.iter().map(|p| (p.input, -p.halves)));
    pa.cmp(pb)
        .then_with(|| a.signature().cmp(&b.signature()))
        .then_with(|| {
            let (sa, sb) = (a.slots(), b.slots());
            for (x, y) in sa.iter().zip(&sb).skip(1) {
                match x.total_cmp(y) {
                    Ordering::Equal => {}
                    o => return o,
                }
            }
            Ordering::Equal
        })
}

/// Same factors with bit-identical weights, so coefficients may be added.
fn same_factors(a: &Term, b: &Term) -> bool {
    a.powers == b.powers
        && a.funcs.len() == b.funcs.len()
        && a.funcs.iter().zip(&b.funcs).all(|(f, g)| {
            f.kind == g.kind
                && f.weight.to_bits() == g.weight.to_bits()
                && f.arg.len() == g.arg.len()
                && f.arg.iter().zip(&g.arg).all(|(s, t)| s.coef.to_bits() == t.coef.to_bits() && same_factors(s, t))
        })
}

fn mul_sums(a: &[Term], b: &[Term]) -> Vec<Term> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for s in a {
        for t in b {
            out.push(s.mul(t));
        }
    }
    merge(out)
}

fn merge(terms: Vec<Term>) -> Vec<Term> {
    let mut out: Vec<Term> = Vec::with_capacity(terms.len());
    for t in terms {
        match out.iter_mut().find(|u| same_factors(u, &t)) {
            Some(u) => u.coef += t.coef,
            None => out.push(t),
        }
    }
    out.retain(|t| t.coef != 0.0);
    out
}

/// `√(c · Π x^p)` as a monomial when that is exact for nonnegative inputs.
fn sqrt_monomial(t: &Term) -> Option<Term> {
    if t.funcs.is_empty() && t.coef > 0.0 && t.powers.iter().all(|p| p.halves % 2 == 0) {
        let powers = t.powers.iter().map(|p| Power { input: p.input, halves: p.halves / 2 }).collect();
        Some(Term { coef: t.coef.sqrt(), powers, funcs: Vec::new() })
    } else {
        None
    }
}

/// Symbol `kind` with inner weight `w` (1 for unweighted symbols) applied to a sum.
pub fn apply_symbol(kind: SymbolKind, w: f64, arg: &[Term]) -> Vec<Term> {
    match kind {
        SymbolKind::Id => arg.to_vec(),
        SymbolKind::Square => mul_sums(arg, arg),
        _ => {
            if arg.is_empty() {
                let v = kind.value(0.0).unwrap_or(f64::NAN);
                return if v == 0.0 { Vec::new() } else { vec![Term::constant(v)] };
            }
            if kind == SymbolKind::Sqrt {
                if let [t] = arg {
                    if let Some(m) = sqrt_monomial(&t.scaled(w)) {
                        return vec![m];
                    }
                }
            }
            vec![Term { coef: 1.0, powers: Vec::new(), funcs: vec![Func { kind, weight: w, arg: arg.to_vec() }] }]
        }
    }
}

/// Applies the rewrite rules until nothing changes.
///
/// Rules: a single-term argument has its coefficient moved into the
/// weight; `cos(−a) = cos(a)`; `sin(−a) = −sin(a)`; `√` of a nonnegative
/// monomial becomes a power; with `threshold > 0`, `cos` of a weight below
/// the threshold is 1, `sin` of such a weight removes the term, and terms
/// with `|coef| < threshold` are dropped. Equal terms are merged and the
/// result sorted.
pub fn simplify(terms: &[Term], threshold: f64) -> Vec<Term> {
    let mut cur = terms.to_vec();
    for _ in 0..64 {
        let next = simplify_once(&cur, threshold);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

fn simplify_once(terms: &[Term], threshold: f64) -> Vec<Term> {
    let mut out = Vec::with_capacity(terms.len());
    'terms: for t in terms {
        let mut term = Term { coef: t.coef, powers: t.powers.clone(), funcs: Vec::new() };
        let mut extra: Vec<Term> = Vec::new();
        for f in &t.funcs {
            let mut f = Func { kind: f.kind, weight: f.weight, arg: simplify(&f.arg, threshold) };
            if let [a] = f.arg.as_slice() {
                if a.coef != 1.0 {
                    f.weight *= a.coef;
                    f.arg[0].coef = 1.0;
                }
            }
            match f.kind {
                SymbolKind::Cos => {
                    f.weight = f.weight.abs();
                    if threshold > 0.0 && f.weight < threshold {
                        continue;
                    }
                }
                SymbolKind::Sin => {
                    if f.weight < 0.0 {
                        f.weight = -f.weight;
                        term.coef = -term.coef;
                    }
                    if threshold > 0.0 && f.weight < threshold {
                        continue 'terms;
                    }
                }
                SymbolKind::Sqrt => {
                    if let [a] = f.arg.as_slice() {
                        if let Some(m) = sqrt_monomial(&a.scaled(f.weight)) {
                            extra.push(m);
                            continue;
                        }
                    }
                }
                _ => {}
            }
            if f.arg.is_empty() {
                match f.kind.value(0.0) {
                    Ok(v) => {
                        term.coef *= v;
                        continue;
                    }
                    Err(_) => {}
                }
            }
            term.funcs.push(f);
        }
        for m in &extra {
            term = term.mul(m);
        }
        term.funcs.sort_by(func_order);
        out.push(term);
    }
    let mut out = merge(out);
    if threshold > 0.0 {
        out.retain(|t| t.coef.abs() >= threshold);
    }
    out.sort_by(term_order);
    out
}

/// Renders a sum of terms with `digits` decimals.
pub fn render_sum(terms: &[Term], digits: usize) -> String {
    if terms.is_empty() {
        return "0".into();
    }
    let mut s = String::new();
    for (idx, t) in terms.iter().enumerate() {
        let body = t.body(digits);
        let mag = t.coef.abs();
        let piece = if body.is_empty() { format!("{mag:.digits$}") } else { format!("{mag:.digits$}*{body}") };
        match (idx, t.coef.is_sign_negative()) {
            (0, false) => s.push_str(&piece),
            (0, true) => {
                let _ = write!(s, "-{piece}");
            }
            (_, false) => {
                let _ = write!(s, " + {piece}");
            }
            (_, true) => {
                let _ = write!(s, " - {piece}");
            }
        }
    }
    s
}

impl CanonicalEquation {
    pub fn new(outputs: Vec<Vec<Term>>, threshold: f64) -> Self {
        Self { outputs: outputs.iter().map(|o| simplify(o, threshold)).collect() }
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// One line per output, e.g. `y1 = 3.0000*x1^2*cos(2.5000*x2)`.
    pub fn render(&self, digits: usize) -> String {
        self.outputs
            .iter()
            .enumerate()
            .map(|(o, terms)| format!("y{} = {}", o + 1, render_sum(terms, digits)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Evaluates output `o` at `x`; `None` when a symbol leaves its domain.
    pub fn eval(&self, o: usize, x: &[f64]) -> Option<f64> {
        eval_sum(&self.outputs[o], x)
    }

    pub fn slot_count(&self) -> usize {
        self.outputs.iter().flatten().map(|t| t.slots().len()).sum()
    }
}

fn eval_sum(terms: &[Term], x: &[f64]) -> Option<f64> {
    let mut total = 0.0;
    for t in terms {
        let mut v = t.coef;
        for p in &t.powers {
            v *= x[p.input].powf(f64::from(p.halves) / 2.0);
        }
        for f in &t.funcs {
            v *= f.kind.value(f.weight * eval_sum(&f.arg, x)?).ok()?;
        }
        total += v;
    }
    Some(total)
}

/// Expands the network and simplifies each output with `prune_threshold`.
pub fn extract_equation(structure: &LocalStructure, weights: &LocalWeights, prune_threshold: f64) -> CanonicalEquation {
    let live = structure.live_mask();
    let mut prev: Vec<Vec<Term>> =
        (0..structure.n_inputs()).map(|i| vec![Term::monomial(1.0, &[(i, 2)])]).collect();
    for k in 0..structure.depth() {
        let z = structure.indicator(k);
        let next: Vec<Vec<Term>> = (0..structure.size(k + 1))
            .map(|j| {
                if !live[k + 1][j] {
                    return Vec::new();
                }
                let terms = match structure.kind(k) {
                    LayerKind::Activation => {
                        let (src, op) = structure.activation_source(k, j);
                        let w = if op.has_inner_weight() { weights.inner(k)[j] } else { 1.0 };
                        apply_symbol(op.kind, w, &prev[src])
                    }
                    LayerKind::Multiplication => {
                        let rows = z.column_rows(j);
                        if rows.is_empty() {
                            Vec::new()
                        } else {
                            rows.iter().fold(vec![Term::constant(1.0)], |acc, &i| mul_sums(&acc, &prev[i]))
                        }
                    }
                    LayerKind::Summation => {
                        let w = weights.summation(k);
                        let scaled = z.column_rows(j).into_iter().flat_map(|i| {
                            let c = w.get(i, j);
                            prev[i].iter().map(move |t| t.scaled(c))
                        });
                        merge(scaled.collect())
                    }
                };
                simplify(&terms, 0.0)
            })
            .collect();
        prev = next;
    }
    CanonicalEquation::new(prev, prune_threshold)
}
