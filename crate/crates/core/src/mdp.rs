//! Structure search as an MDP.
//!
//! The state before transform `k` counts, for every neuron of layer `k`,
//! the paths reaching it from the inputs; the action is the flattened
//! indicator `Z_k`. Both are zero-padded to the largest layer and the
//! largest indicator of the template.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local::{layer_values, Indicator, LayerKind, LocalStructure, LocalWeights};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateVec {
    pub values: Vec<u64>,
    pub stage: usize,
}

/// `s' = Mat(a)ᵀ·s` where `Mat` reshapes the first `n_k·n_{k+1}` entries of
/// `a` row-major into an `n_k × n_{k+1}` matrix.
pub fn transition(s: &StateVec, a: &[bool], n_k: usize, n_k1: usize) -> Result<StateVec> {
    let n_s = s.values.len();
    if n_k * n_k1 > a.len() || n_k > n_s || n_k1 > n_s {
        return Err(Error::Shape(format!(
            "a {n_k}×{n_k1} stage does not fit states of length {n_s} and actions of length {}",
            a.len()
        )));
    }
    let mut next = vec![0u64; n_s];
    for (j, v) in next.iter_mut().enumerate().take(n_k1) {
        for i in 0..n_k {
            if a[i * n_k1 + j] {
                *v = v.saturating_add(s.values[i]);
            }
        }
    }
    Ok(StateVec { values: next, stage: s.stage + 1 })
}

/// The leading `n_k × n_{k+1}` block of `Mat(a)`.
pub fn indicator_from_action(a: &[bool], n_k: usize, n_k1: usize) -> Result<Indicator> {
    if n_k * n_k1 > a.len() {
        return Err(Error::Shape(format!("action of length {} cannot hold {n_k}×{n_k1}", a.len())));
    }
    Ok(Indicator::from_bits(n_k, n_k1, a[..n_k * n_k1].to_vec()))
}

/// Flattens `z` row-major and pads it with zeros to length `n_a`.
pub fn action_from_indicator(z: &Indicator, n_a: usize) -> Result<Vec<bool>> {
    if z.bits().len() > n_a {
        return Err(Error::Shape(format!("{}×{} indicator exceeds n_a = {n_a}", z.rows(), z.cols())));
    }
    let mut a = z.bits().to_vec();
    a.resize(n_a, false);
    Ok(a)
}

/// Entry is on iff the relaxed value is at least one half.
pub fn discretize(a: &[f64]) -> Vec<bool> {
    a.iter().map(|&v| v >= 0.5).collect()
}

pub fn relax(a: &[bool]) -> Vec<f64> {
    a.iter().map(|&b| f64::from(u8::from(b))).collect()
}

/// A connection forced on or off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pin {
    pub stage: usize,
    pub from: usize,
    pub to: usize,
    pub on: bool,
}

/// A layer `K−1` neuron kept for an output by the dynamic constraint,
/// with the pins that hold its path in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptNeuron {
    pub output: usize,
    pub neuron: usize,
    pub correlation: f64,
    pub path: Vec<Pin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintConfig {
    /// Fan-in cap for multiplication neurons.
    pub max_factors_per_neuron: usize,
    /// Fan-in cap for summation outputs, when set.
    pub max_terms_per_output: Option<usize>,
    pub corr_keep_threshold: f64,
    pub dynamic: bool,
    /// Pins supplied by the user.
    pub frozen: Vec<Pin>,
    /// Pins added by the dynamic constraint.
    pub kept: Vec<KeptNeuron>,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            max_factors_per_neuron: 3,
            max_terms_per_output: None,
            corr_keep_threshold: 0.99,
            dynamic: true,
            frozen: Vec::new(),
            kept: Vec::new(),
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_factors_per_neuron == 0 || self.max_terms_per_output == Some(0) {
            return Err(Error::Config("fan-in caps must be at least 1".into()));
        }
        if !(self.corr_keep_threshold > 0.0 && self.corr_keep_threshold <= 1.0) {
            return Err(Error::Config("corr_keep_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Effective pins; user pins win over kept paths, earlier kept paths
    /// over later ones.
    pub fn pins(&self) -> BTreeMap<(usize, usize, usize), bool> {
        let mut out = BTreeMap::new();
        for p in self.frozen.iter().chain(self.kept.iter().flat_map(|k| &k.path)) {
            out.entry((p.stage, p.from, p.to)).or_insert(p.on);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rejection {
    /// Static constraint: too many factors or terms.
    FanIn { neuron: usize, count: usize, cap: usize },
    /// A pinned connection was flipped.
    Frozen { from: usize, to: usize },
    /// An output of the last transform has no inputs.
    EmptyOutput { neuron: usize },
    /// A connection leaves a neuron that no input reaches.
    DeadSource { neuron: usize },
    /// The action sets padding entries.
    Padding,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::FanIn { neuron, count, cap } => write!(f, "neuron {neuron} has fan-in {count} > {cap}"),
            Rejection::Frozen { from, to } => write!(f, "pinned connection {from}->{to} flipped"),
            Rejection::EmptyOutput { neuron } => write!(f, "output {neuron} has no inputs"),
            Rejection::DeadSource { neuron } => write!(f, "neuron {neuron} is unreachable but used"),
            Rejection::Padding => write!(f, "padding entries set"),
        }
    }
}

/// The search space over one template. Stages not listed as searched keep
/// the template's indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    template: LocalStructure,
    searched: Vec<bool>,
    n_s: usize,
    n_a: usize,
}

impl SearchSpace {
    /// Searches every non-activation transform.
    pub fn new(template: LocalStructure) -> Self {
        let stages = template.searched_stages();
        Self::with_stages(template, &stages).expect("non-activation stages are searchable")
    }

    pub fn with_stages(template: LocalStructure, stages: &[usize]) -> Result<Self> {
        let k = template.depth();
        let mut searched = vec![false; k];
        for &st in stages {
            if st >= k || template.kind(st) == LayerKind::Activation {
                return Err(Error::Config(format!("stage {st} cannot be searched")));
            }
            searched[st] = true;
        }
        if !searched.iter().any(|&b| b) {
            return Err(Error::Config("no stage to search".into()));
        }
        let sizes = template.layer_sizes();
        let n_s = *sizes.iter().max().unwrap();
        let n_a = sizes.windows(2).map(|w| w[0] * w[1]).max().unwrap();
        Ok(Self { template, searched, n_s, n_a })
    }

    pub fn template(&self) -> &LocalStructure {
        &self.template
    }

    pub fn depth(&self) -> usize {
        self.template.depth()
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn is_searched(&self, stage: usize) -> bool {
        self.searched[stage]
    }

    pub fn searched_stages(&self) -> Vec<usize> {
        (0..self.depth()).filter(|&k| self.searched[k]).collect()
    }

    /// `(n_k, n_{k+1})`.
    pub fn dims(&self, stage: usize) -> (usize, usize) {
        (self.template.size(stage), self.template.size(stage + 1))
    }

    /// No searched stage remains at or after `stage`.
    pub fn is_terminal(&self, stage: usize) -> bool {
        !self.searched[stage.min(self.depth())..].iter().any(|&b| b)
    }

    /// `[1,…,1, 0,…,0]` with one entry per input.
    pub fn initial_state(&self) -> StateVec {
        let mut values = vec![0; self.n_s];
        values[..self.template.n_inputs()].fill(1);
        StateVec { values, stage: 0 }
    }

    /// Length of the Q/R network input: state, stage one-hot, action.
    pub fn feature_len(&self) -> usize {
        self.n_s + self.depth() + self.n_a
    }

    /// State part of the network input.
    pub fn state_features(&self, s: &StateVec) -> Vec<f64> {
        let mut f: Vec<f64> = s.values.iter().map(|&v| v as f64).collect();
        f.extend((0..self.depth()).map(|k| f64::from(u8::from(k == s.stage))));
        f
    }

    pub fn features(&self, s: &StateVec, a: &[f64]) -> Vec<f64> {
        let mut f = self.state_features(s);
        f.extend_from_slice(a);
        f
    }

    /// Applies the template indicator of a fixed stage.
    pub fn fixed_action(&self, stage: usize) -> Vec<bool> {
        action_from_indicator(self.template.indicator(stage), self.n_a).expect("template fits n_a")
    }

    pub fn apply(&self, s: &StateVec, a: &[bool]) -> Result<StateVec> {
        let (n, m) = self.dims(s.stage);
        transition(s, a, n, m)
    }

    /// Builds the network from one action per transform.
    pub fn build(&self, actions: &[Vec<bool>]) -> Result<LocalStructure> {
        if actions.len() != self.depth() {
            return Err(Error::Shape(format!("{} actions for {} stages", actions.len(), self.depth())));
        }
        let mut st = self.template.clone();
        for (k, a) in actions.iter().enumerate() {
            if self.searched[k] {
                let (n, m) = self.dims(k);
                st = st.with_indicator(k, indicator_from_action(a, n, m)?)?;
            }
        }
        Ok(st)
    }

    /// Per-entry bounds for the relaxed action: padding, entries leaving
    /// unreachable neurons and pinned entries are fixed.
    pub fn box_bounds(&self, s: &StateVec, cfg: &ConstraintConfig) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = self.dims(s.stage);
        let mut lo = vec![0.0; self.n_a];
        let mut hi = vec![0.0; self.n_a];
        for i in 0..n {
            if s.values[i] > 0 {
                hi[i * m..(i + 1) * m].fill(1.0);
            }
        }
        for ((stage, i, j), on) in cfg.pins() {
            if stage == s.stage && i < n && j < m && s.values[i] > 0 {
                let v = f64::from(u8::from(on));
                lo[i * m + j] = v;
                hi[i * m + j] = v;
            }
        }
        (lo, hi)
    }

    fn cap(&self, stage: usize, cfg: &ConstraintConfig) -> Option<usize> {
        match self.template.kind(stage) {
            LayerKind::Multiplication => Some(cfg.max_factors_per_neuron),
            LayerKind::Summation => cfg.max_terms_per_output,
            LayerKind::Activation => None,
        }
    }

    /// Accepts or rejects a discrete action from `s`.
    pub fn check(&self, s: &StateVec, a: &[bool], cfg: &ConstraintConfig) -> std::result::Result<(), Rejection> {
        let stage = s.stage;
        let (n, m) = self.dims(stage);
        if a.len() != self.n_a || a[n * m..].iter().any(|&b| b) {
            return Err(Rejection::Padding);
        }
        for i in 0..n {
            if s.values[i] == 0 && a[i * m..(i + 1) * m].iter().any(|&b| b) {
                return Err(Rejection::DeadSource { neuron: i });
            }
        }
        for ((st, i, j), on) in cfg.pins() {
            if st == stage && i < n && j < m && s.values[i] > 0 && a[i * m + j] != on {
                return Err(Rejection::Frozen { from: i, to: j });
            }
        }
        let cap = self.cap(stage, cfg);
        let last = stage + 1 == self.depth();
        for j in 0..m {
            let count = (0..n).filter(|&i| a[i * m + j]).count();
            if let Some(cap) = cap.filter(|&c| count > c) {
                return Err(Rejection::FanIn { neuron: j, count, cap });
            }
            if last && count == 0 {
                return Err(Rejection::EmptyOutput { neuron: j });
            }
        }
        // fixed stages that follow must still find their sources reachable
        let mut next = self.apply(s, a).map_err(|_| Rejection::Padding)?;
        for k in stage + 1..self.depth() {
            if self.searched[k] {
                break;
            }
            if self.template.kind(k) != LayerKind::Activation {
                let (n, m) = self.dims(k);
                let z = self.template.indicator(k);
                for i in 0..n {
                    if next.values[i] == 0 && (0..m).any(|j| z.get(i, j)) {
                        return Err(Rejection::DeadSource { neuron: i });
                    }
                }
            }
            next = self.apply(&next, &self.fixed_action(k)).map_err(|_| Rejection::Padding)?;
        }
        Ok(())
    }

    /// Whether neuron `j` of layer `stage + 1` must receive an input.
    fn needs_input(&self, stage: usize, j: usize) -> bool {
        let k = stage + 1;
        k == self.depth()
            || (!self.searched[k]
                && self.template.kind(k) != LayerKind::Activation
                && (0..self.template.size(k + 1)).any(|o| self.template.indicator(k).get(j, o)))
    }

    /// Draws each column uniformly among the subsets of reachable rows
    /// that respect the pins and the fan-in cap. `None` when some column
    /// has no valid subset.
    pub fn random_action(&self, s: &StateVec, cfg: &ConstraintConfig, rng: &mut impl Rng) -> Option<Vec<bool>> {
        let stage = s.stage;
        let (n, m) = self.dims(stage);
        let pins = cfg.pins();
        let cap = self.cap(stage, cfg).unwrap_or(usize::MAX);
        let mut a = vec![false; self.n_a];
        for j in 0..m {
            let min = usize::from(self.needs_input(stage, j));
            let mut fixed_on = 0;
            let mut free = Vec::new();
            for i in (0..n).filter(|&i| s.values[i] > 0) {
                match pins.get(&(stage, i, j)) {
                    Some(&on) => {
                        a[i * m + j] = on;
                        fixed_on += usize::from(on);
                    }
                    None => free.push(i),
                }
            }
            let f = free.len();
            let lo = min.saturating_sub(fixed_on);
            let hi = cap.checked_sub(fixed_on)?.min(f);
            if lo > hi {
                return None;
            }
            // pick the subset size with weight C(f, size), then the subset
            let weights: Vec<f64> = (lo..=hi).map(|k| binomial(f, k)).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut size = hi;
            for (k, w) in (lo..=hi).zip(&weights) {
                if u < *w {
                    size = k;
                    break;
                }
                u -= w;
            }
            for r in index::sample(rng, f, size) {
                a[free[r] * m + j] = true;
            }
        }
        Some(a)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let scale_a = ma.abs().max(1.0) * n;
    let scale_b = mb.abs().max(1.0) * n;
    if saa <= 1e-24 * scale_a * scale_a || sbb <= 1e-24 * scale_b * scale_b {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Values of layer `K−1` for every row, with every neuron evaluated.
/// Neurons that feed nothing in `structure` are wired to the first output
/// of a copy so that they are computed too; summation weights do not
/// affect this layer.
pub fn penultimate_values(structure: &LocalStructure, weights: &LocalWeights, x: &Matrix) -> Result<Matrix> {
    let k = structure.depth() - 1;
    let mut z = structure.indicator(k).clone();
    let below = structure.kind(k - 1);
    let src = structure.indicator(k - 1);
    for i in 0..z.rows() {
        let usable = below != LayerKind::Multiplication || src.fan_in(i) > 0;
        if usable && (0..z.cols()).all(|j| !z.get(i, j)) {
            z.set(i, 0, true);
        }
    }
    let probe = structure.clone().with_indicator(k, z)?;
    Ok(layer_values(&probe, weights, x)?.swap_remove(k))
}

/// Path pins for neuron `j` of layer `K−1` and its link to `output`: every
/// searched column on the way back to the inputs is pinned entirely, ones
/// and zeros, so that the neuron keeps its meaning.
pub fn path_pins(space: &SearchSpace, structure: &LocalStructure, neuron: usize, output: usize) -> Vec<Pin> {
    let last = structure.depth() - 1;
    let mut pins = vec![Pin { stage: last, from: neuron, to: output, on: true }];
    let mut frontier = vec![neuron];
    for k in (0..last).rev() {
        let z = structure.indicator(k);
        let mut next = Vec::new();
        for &j in &frontier {
            if structure.kind(k) == LayerKind::Activation {
                next.push(structure.activation_source(k, j).0);
                continue;
            }
            for i in 0..z.rows() {
                if space.is_searched(k) {
                    pins.push(Pin { stage: k, from: i, to: j, on: z.get(i, j) });
                }
                if z.get(i, j) {
                    next.push(i);
                }
            }
        }
        next.sort_unstable();
        next.dedup();
        frontier = next;
    }
    pins.sort();
    pins.dedup();
    pins
}

/// Dynamic constraint: for each output, the layer `K−1` neuron with the
/// largest |Pearson correlation| above the threshold is kept, replacing an
/// earlier choice only when strictly better.
pub fn update_frozen_paths(
    cfg: &ConstraintConfig,
    space: &SearchSpace,
    structure: &LocalStructure,
    penultimate: &Matrix,
    targets: &Matrix,
) -> ConstraintConfig {
    let mut out = cfg.clone();
    let cols: Vec<Vec<f64>> = (0..penultimate.cols()).map(|c| penultimate.column(c)).collect();
    for o in 0..targets.cols() {
        let y = targets.column(o);
        let best = cols
            .iter()
            .enumerate()
            .filter_map(|(j, c)| pearson(c, &y).map(|r| (j, r.abs())))
            .filter(|&(_, r)| r > cfg.corr_keep_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((j, r)) = best else { continue };
        let current = out.kept.iter().position(|k| k.output == o);
        if current.is_some_and(|p| out.kept[p].correlation >= r) {
            continue;
        }
        let kept = KeptNeuron { output: o, neuron: j, correlation: r, path: path_pins(space, structure, j, o) };
        match current {
            Some(p) => out.kept[p] = kept,
            None => out.kept.push(kept),
        }
    }
    out.kept.sort_by_key(|k| k.output);
    out
}
