//! The search loop: ε-greedy convex action selection, LoCaL training for
//! the episode reward, and fitted-Q updates of the reward and Q networks
//! with replay and a target network.

use std::collections::{HashMap, VecDeque};
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icnn::{minimize_over_box, FixedState, Icnn, IcnnConfig, IcnnTrainConfig, MinimizeConfig, Sample};
use crate::local::{extract_equation, fit, fit_from, predict, CanonicalEquation, LocalStructure, LocalWeights, TrainConfig};
use crate::matrix::Matrix;
use crate::mdp::{self, discretize, relax, ConstraintConfig, SearchSpace, StateVec};
use crate::metrics::{nrmse_multi, population_std, reward};
use crate::par::{self, Mode};

/// NRMSE charged to a network that cannot be evaluated at all.
pub const NRMSE_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QLearnConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub max_episodes: usize,
    pub stop_lambda: f64,
    pub target_update_interval: usize,
    pub buffer_capacity: usize,
    pub minibatch_size: usize,
    pub q_lr: f64,
    pub r_lr: f64,
    pub q_epochs: usize,
    pub r_epochs: usize,
    /// Samples per Adam step when fitting either network.
    pub icnn_batch_size: usize,
    pub icnn: IcnnConfig,
    /// Minimizer used for action selection.
    pub minimize: MinimizeConfig,
    /// Minimizer used for bootstrapped targets.
    pub target_minimize: MinimizeConfig,
    pub retry_cap: usize,
    pub polish_epochs: usize,
    pub prune_threshold: f64,
    /// Record wall-clock seconds per episode; off keeps logs reproducible.
    pub record_time: bool,
}

impl Default for QLearnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            epsilon: 0.4,
            max_episodes: 600,
            stop_lambda: 1e-2,
            target_update_interval: 10,
            buffer_capacity: 10_000,
            minibatch_size: 100,
            q_lr: 5e-3,
            r_lr: 5e-3,
            q_epochs: 50,
            r_epochs: 50,
            icnn_batch_size: 16,
            icnn: IcnnConfig::default(),
            minimize: MinimizeConfig { restarts: 3, max_steps: 300, tolerance: 1e-9 },
            target_minimize: MinimizeConfig { restarts: 1, max_steps: 200, tolerance: 1e-8 },
            retry_cap: 20,
            polish_epochs: 500,
            prune_threshold: 0.01,
            record_time: false,
        }
    }
}

impl QLearnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(self.stop_lambda > 0.0) {
            return bad("stop_lambda must be positive");
        }
        if self.target_update_interval == 0 || self.buffer_capacity == 0 || self.minibatch_size == 0 {
            return bad("target_update_interval, buffer_capacity and minibatch_size must be positive");
        }
        if !(self.q_lr > 0.0 && self.r_lr > 0.0) || self.icnn_batch_size == 0 {
            return bad("network learning rates and batch size must be positive");
        }
        if self.minimize.restarts == 0 || self.target_minimize.restarts == 0 {
            return bad("minimizers need at least one restart");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: StateVec,
    pub a: Vec<f64>,
    pub s_next: StateVec,
    pub reward: f64,
    pub terminal: bool,
}

/// FIFO ring of transitions.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` distinct transitions drawn uniformly.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<&Transition> {
        index::sample(rng, self.items.len(), n.min(self.items.len())).into_iter().map(|i| &self.items[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAction {
    pub stage: usize,
    pub relaxed: Vec<f64>,
    pub discrete: Vec<bool>,
    pub greedy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub reward: f64,
    pub nrmse: f64,
    pub actions: Vec<StageAction>,
    pub rejections: usize,
    /// Why the episode was skipped, if it was.
    pub aborted: Option<String>,
    pub seconds: f64,
}

impl EpisodeLog {
    /// Discrete actions as `0/1` strings, one per searched stage, joined by `|`.
    pub fn action_bits(&self) -> String {
        self.actions
            .iter()
            .map(|a| a.discrete.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>())
            .collect::<Vec<_>>()
            .join("|")
    }
}

pub const EPISODE_CSV_HEADER: &str = "t,reward,nrmse,actions,rejections,seconds";

pub fn episode_csv_row(log: &EpisodeLog) -> String {
    format!("{},{},{},{},{},{}", log.episode, log.reward, log.nrmse, log.action_bits(), log.rejections, log.seconds)
}

/// State of the search handed to observers after every episode.
pub struct Snapshot<'a> {
    pub log: &'a EpisodeLog,
    pub qnet: &'a Icnn,
    pub rnet: &'a Icnn,
    pub constraints: &'a ConstraintConfig,
    /// The target network was refreshed after this episode.
    pub target_updated: bool,
    pub best_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub structure: LocalStructure,
    pub weights: LocalWeights,
    pub equation: CanonicalEquation,
    /// Reward of the winning episode, before polishing.
    pub best_reward: f64,
    pub best_episode: usize,
    /// Training NRMSE after polishing.
    pub nrmse_train: f64,
    pub episodes: Vec<EpisodeLog>,
    pub stopped_early: bool,
    pub constraints: ConstraintConfig,
    pub qnet: Icnn,
    pub rnet: Icnn,
}

/// Reward bookkeeping for one trained candidate.
#[derive(Debug, Clone)]
pub struct Scored {
    pub weights: LocalWeights,
    pub nrmse: f64,
    pub reward: f64,
}

/// Trains `structure` and scores it by `1/(1 + NRMSE)` on the training
/// data. A domain failure mid-training keeps the last good weights.
pub fn score(
    structure: &LocalStructure,
    train: &TrainConfig,
    x: &Matrix,
    y: &Matrix,
    sigma: &[f64],
    mode: Mode,
) -> Scored {
    let weights = match fit(structure, train, x, y, mode) {
        Ok(r) => r.weights,
        Err(e) => {
            log::debug!("candidate fit stopped: {e}");
            e.last_weights
        }
    };
    let nrmse = predict(structure, &weights, x, mode)
        .and_then(|p| nrmse_multi(&p, y, sigma))
        .ok()
        .filter(|v| v.is_finite())
        .map_or(NRMSE_CAP, |v| v.min(NRMSE_CAP));
    Scored { weights, nrmse, reward: reward(nrmse) }
}

/// Per-output population standard deviation; errors when one is zero.
pub fn output_sigmas(y: &Matrix) -> Result<Vec<f64>> {
    let s: Vec<f64> = (0..y.cols()).map(|c| population_std(&y.column(c))).collect();
    if let Some(o) = s.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Degenerate(format!("output y{} is constant", o + 1)));
    }
    Ok(s)
}

struct Rolled {
    actions: Vec<Vec<bool>>,
    records: Vec<(StateVec, StageAction, StateVec)>,
    rejections: usize,
    aborted: Option<String>,
}

/// Runs the search loop of one training set.
pub struct Searcher<'d> {
    space: SearchSpace,
    cfg: QLearnConfig,
    train: TrainConfig,
    x: &'d Matrix,
    y: &'d Matrix,
    sigma: Vec<f64>,
    mode: Mode,
    rng: ChaCha8Rng,
    constraints: ConstraintConfig,
    qnet: Icnn,
    target: Icnn,
    rnet: Icnn,
    buffer: ReplayBuffer,
    cache: HashMap<(StateVec, Vec<u64>), f64>,
    episode: usize,
    logs: Vec<EpisodeLog>,
    best: Option<(LocalStructure, Scored, usize)>,
}

impl<'d> Searcher<'d> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        space: SearchSpace,
        cfg: QLearnConfig,
        train: TrainConfig,
        constraints: ConstraintConfig,
        x: &'d Matrix,
        y: &'d Matrix,
        seed: u64,
        mode: Mode,
    ) -> Result<Self> {
        cfg.validate()?;
        train.validate()?;
        constraints.validate()?;
        let t = space.template();
        if x.rows() == 0 || x.rows() != y.rows() || x.cols() != t.n_inputs() || y.cols() != t.n_outputs() {
            return Err(Error::Shape("training data does not match the template".into()));
        }
        let sigma = output_sigmas(y)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qnet = Icnn::new(space.feature_len(), &cfg.icnn, &mut rng)?;
        let rnet = Icnn::new(space.feature_len(), &cfg.icnn, &mut rng)?;
        Ok(Self {
            target: qnet.clone(),
            qnet,
            rnet,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            cache: HashMap::new(),
            space,
            cfg,
            train,
            x,
            y,
            sigma,
            mode,
            rng,
            constraints,
            episode: 0,
            logs: Vec::new(),
            best: None,
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn qnet(&self) -> &Icnn {
        &self.qnet
    }

    pub fn target(&self) -> &Icnn {
        &self.target
    }

    pub fn rnet(&self) -> &Icnn {
        &self.rnet
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn constraints(&self) -> &ConstraintConfig {
        &self.constraints
    }

    pub fn logs(&self) -> &[EpisodeLog] {
        &self.logs
    }

    pub fn best_reward(&self) -> f64 {
        self.best.as_ref().map_or(0.0, |b| b.1.reward)
    }

    /// Maximizer of `net` at `s` over the constrained box.
    fn argmax(&mut self, target: bool, s: &StateVec, cfg: &MinimizeConfig) -> Result<(Vec<f64>, f64)> {
        let feats = self.space.state_features(s);
        let (lo, hi) = self.space.box_bounds(s, &self.constraints);
        let net = if target { &self.target } else { &self.qnet };
        let m = minimize_over_box(&FixedState { net, state: &feats }, &lo, &hi, cfg, &mut self.rng, self.mode)?;
        Ok((m.point, -m.value))
    }

    fn rollout(&mut self, epsilon: f64) -> Result<Rolled> {
        let mut s = self.space.initial_state();
        let mut actions = Vec::with_capacity(self.space.depth());
        let mut records = Vec::new();
        let mut rejections = 0;
        for k in 0..self.space.depth() {
            if !self.space.is_searched(k) {
                let a = self.space.fixed_action(k);
                s = self.space.apply(&s, &a)?;
                actions.push(a);
                continue;
            }
            let minimize = self.cfg.minimize.clone();
            let greedy = self.argmax(false, &s, &minimize)?.0;
            let mut explore = self.rng.random::<f64>() < epsilon;
            let mut chosen = None;
            for _ in 0..=self.cfg.retry_cap {
                let candidate = if explore {
                    self.space.random_action(&s, &self.constraints, &mut self.rng).map(|a| (relax(&a), a, false))
                } else {
                    Some((greedy.clone(), discretize(&greedy), true))
                };
                let Some((relaxed, discrete, is_greedy)) = candidate else {
                    rejections += 1;
                    break;
                };
                match self.space.check(&s, &discrete, &self.constraints) {
                    Ok(()) => {
                        chosen = Some(StageAction { stage: k, relaxed, discrete, greedy: is_greedy });
                        break;
                    }
                    Err(why) => {
                        log::trace!("stage {k}: rejected ({why})");
                        rejections += 1;
                        // a rejected greedy action would repeat; explore instead
                        if epsilon == 0.0 && is_greedy {
                            return Ok(Rolled { actions, records, rejections, aborted: Some(format!("greedy action rejected: {why}")) });
                        }
                        explore = true;
                    }
                }
            }
            let Some(choice) = chosen else {
                return Ok(Rolled { actions, records, rejections, aborted: Some(format!("no valid action at stage {k}")) });
            };
            let next = self.space.apply(&s, &choice.discrete)?;
            actions.push(choice.discrete.clone());
            records.push((s, choice, next.clone()));
            s = next;
        }
        Ok(Rolled { actions, records, rejections, aborted: None })
    }

    /// Greedy decoding from the current Q-network, without exploration.
    /// Leaves the search's random stream untouched.
    pub fn decode_greedy(&mut self) -> Result<LocalStructure> {
        let saved = self.rng.clone();
        let rolled = self.rollout(0.0);
        self.rng = saved;
        let rolled = rolled?;
        if let Some(why) = rolled.aborted {
            return Err(Error::Structure(why));
        }
        self.space.build(&rolled.actions)
    }

    fn fit_net(net: &Icnn, samples: &[Sample], lr: f64, epochs: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<Icnn> {
        let cfg = IcnnTrainConfig { learning_rate: lr, epochs, batch_size: batch };
        Ok(net.fit(samples, &cfg, rng)?.0)
    }

    fn update_q(&mut self) -> Result<()> {
        if self.buffer.len() < self.cfg.minibatch_size {
            return Ok(());
        }
        let batch: Vec<Transition> =
            self.buffer.sample(self.cfg.minibatch_size, &mut self.rng).into_iter().cloned().collect();
        // bootstrapped values of successor states, cached per target network
        let mut pending: Vec<(StateVec, Vec<u64>)> = Vec::new();
        for t in batch.iter().filter(|t| !t.terminal) {
            let (lo, hi) = self.space.box_bounds(&t.s_next, &self.constraints);
            let key = (t.s_next.clone(), lo.iter().chain(&hi).map(|v| v.to_bits()).collect());
            if !self.cache.contains_key(&key) && !pending.contains(&key) {
                pending.push(key);
            }
        }
        let seeds: Vec<u64> = pending.iter().map(|_| self.rng.random()).collect();
        let jobs: Vec<_> = pending.into_iter().zip(seeds).collect();
        let (space, target, constraints, mcfg) = (&self.space, &self.target, &self.constraints, &self.cfg.target_minimize);
        let values = par::map(self.mode, &jobs, |((s, _), seed)| -> Result<f64> {
            let feats = space.state_features(s);
            let (lo, hi) = space.box_bounds(s, constraints);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let m = minimize_over_box(&FixedState { net: target, state: &feats }, &lo, &hi, mcfg, &mut rng, Mode::Sequential)?;
            Ok(-m.value)
        });
        for ((key, _), v) in jobs.into_iter().zip(values) {
            self.cache.insert(key, v?);
        }
        let samples: Vec<Sample> = batch
            .iter()
            .map(|t| {
                let y = if t.terminal {
                    t.reward
                } else {
                    let (lo, hi) = self.space.box_bounds(&t.s_next, &self.constraints);
                    let key = (t.s_next.clone(), lo.iter().chain(&hi).map(|v| v.to_bits()).collect());
                    t.reward + self.cfg.gamma * self.cache[&key]
                };
                Sample { input: self.space.features(&t.s, &t.a), target: -y }
            })
            .collect();
        self.qnet =
            Self::fit_net(&self.qnet, &samples, self.cfg.q_lr, self.cfg.q_epochs, self.cfg.icnn_batch_size, &mut self.rng)?;
        Ok(())
    }

    /// One episode; returns its log.
    pub fn step(&mut self) -> Result<&EpisodeLog> {
        let started = Instant::now();
        self.episode += 1;
        let t = self.episode;
        let rolled = self.rollout(self.cfg.epsilon)?;
        let seconds = |s: &Self| if s.cfg.record_time { started.elapsed().as_secs_f64() } else { 0.0 };
        let actions_log: Vec<StageAction> = rolled.records.iter().map(|r| r.1.clone()).collect();
        if let Some(why) = rolled.aborted {
            log::info!("episode {t} aborted: {why}");
            let log = EpisodeLog {
                episode: t,
                reward: 0.0,
                nrmse: f64::NAN,
                actions: actions_log,
                rejections: rolled.rejections,
                aborted: Some(why),
                seconds: seconds(self),
            };
            self.logs.push(log);
            self.after_episode();
            return Ok(self.logs.last().unwrap());
        }
        let structure = self.space.build(&rolled.actions)?;
        let scored = score(&structure, &self.train, self.x, self.y, &self.sigma, self.mode);
        let r = scored.reward;

        // −R regression on this episode's pairs, then replay inserts
        let r_samples: Vec<Sample> = rolled
            .records
            .iter()
            .map(|(s, a, _)| Sample { input: self.space.features(s, &relax(&a.discrete)), target: -r })
            .collect();
        self.rnet =
            Self::fit_net(&self.rnet, &r_samples, self.cfg.r_lr, self.cfg.r_epochs, self.cfg.icnn_batch_size, &mut self.rng)?;
        for (s, a, s_next) in &rolled.records {
            let terminal = self.space.is_terminal(s_next.stage);
            self.buffer.push(Transition { s: s.clone(), a: relax(&a.discrete), s_next: s_next.clone(), reward: r, terminal });
            let r_relaxed = -self.rnet.forward(&self.space.features(s, &a.relaxed))?;
            self.buffer.push(Transition { s: s.clone(), a: a.relaxed.clone(), s_next: s_next.clone(), reward: r_relaxed, terminal });
        }
        self.update_q()?;

        if self.constraints.dynamic {
            match mdp::penultimate_values(&structure, &scored.weights, self.x) {
                Ok(pen) => {
                    self.constraints = mdp::update_frozen_paths(&self.constraints, &self.space, &structure, &pen, self.y)
                }
                Err(e) => log::debug!("episode {t}: no correlation check ({e})"),
            }
        }
        let log = EpisodeLog {
            episode: t,
            reward: r,
            nrmse: scored.nrmse,
            actions: actions_log,
            rejections: rolled.rejections,
            aborted: None,
            seconds: seconds(self),
        };
        log::debug!("episode {t}: R = {r:.6}, NRMSE = {:.6}", scored.nrmse);
        if self.best.as_ref().is_none_or(|b| r > b.1.reward) {
            self.best = Some((structure, scored, t));
        }
        self.logs.push(log);
        self.after_episode();
        Ok(self.logs.last().unwrap())
    }

    fn after_episode(&mut self) {
        if self.episode % self.cfg.target_update_interval == 0 {
            self.target = self.qnet.clone();
            self.cache.clear();
        }
    }

    /// Episodes until `|R − 1| ≤ λ` or the budget runs out, then a long
    /// refit of the best structure from its trained weights.
    pub fn run(mut self, observer: &mut dyn FnMut(&Snapshot)) -> Result<SearchResult> {
        let mut stopped_early = false;
        while self.episode < self.cfg.max_episodes {
            self.step()?;
            let log = self.logs.last().unwrap();
            let snap = Snapshot {
                log,
                qnet: &self.qnet,
                rnet: &self.rnet,
                constraints: &self.constraints,
                target_updated: self.episode % self.cfg.target_update_interval == 0,
                best_reward: self.best_reward(),
            };
            observer(&snap);
            if log.aborted.is_none() && (log.reward - 1.0).abs() <= self.cfg.stop_lambda {
                stopped_early = true;
                break;
            }
        }
        let (structure, scored, best_episode) =
            self.best.take().ok_or_else(|| Error::Structure("every episode was aborted".into()))?;
        let polish = TrainConfig { epochs: self.cfg.polish_epochs, ..self.train.clone() };
        let weights = match fit_from(&structure, scored.weights.clone(), &polish, self.x, self.y, self.mode) {
            Ok(r) => r.weights,
            Err(e) => e.last_weights,
        };
        let nrmse_train = predict(&structure, &weights, self.x, self.mode).and_then(|p| nrmse_multi(&p, self.y, &self.sigma))?;
        let equation = extract_equation(&structure, &weights, self.cfg.prune_threshold);
        Ok(SearchResult {
            structure,
            weights,
            equation,
            best_reward: scored.reward,
            best_episode,
            nrmse_train,
            episodes: self.logs,
            stopped_early,
            constraints: self.constraints,
            qnet: self.qnet,
            rnet: self.rnet,
        })
    }
}

/// Convenience wrapper around [`Searcher`].
#[allow(clippy::too_many_arguments)]
pub fn run_search(
    space: SearchSpace,
    cfg: QLearnConfig,
    train: TrainConfig,
    constraints: ConstraintConfig,
    x: &Matrix,
    y: &Matrix,
    seed: u64,
    mode: Mode,
    observer: &mut dyn FnMut(&Snapshot),
) -> Result<SearchResult> {
    Searcher::new(space, cfg, train, constraints, x, y, seed, mode)?.run(observer)
}

/// Every structure reachable under the constraints, by brute force over
/// the searched stages. Meant for tiny spaces.
pub fn enumerate_structures(space: &SearchSpace, constraints: &ConstraintConfig, limit: usize) -> Result<Vec<LocalStructure>> {
    let mut out = Vec::new();
    let mut stack = vec![(space.initial_state(), Vec::<Vec<bool>>::new())];
    while let Some((s, actions)) = stack.pop() {
        if s.stage == space.depth() {
            out.push(space.build(&actions)?);
            if out.len() > limit {
                return Err(Error::Config(format!("more than {limit} structures")));
            }
            continue;
        }
        let candidates: Vec<Vec<bool>> = if space.is_searched(s.stage) {
            let (n, m) = space.dims(s.stage);
            if n * m > 20 {
                return Err(Error::Config("stage too large to enumerate".into()));
            }
            (0u32..1 << (n * m))
                .map(|bits| {
                    let mut a: Vec<bool> = (0..n * m).map(|b| bits >> b & 1 == 1).collect();
                    a.resize(space.n_a(), false);
                    a
                })
                .filter(|a| space.check(&s, a, constraints).is_ok())
                .collect()
        } else {
            vec![space.fixed_action(s.stage)]
        };
        for a in candidates {
            let next = space.apply(&s, &a)?;
            let mut acts = actions.clone();
            acts.push(a);
            stack.push((next, acts));
        }
    }
    out.sort_by(|a, b| format!("{:?}", a.indicators()).cmp(&format!("{:?}", b.indicators())));
    Ok(out)
}
