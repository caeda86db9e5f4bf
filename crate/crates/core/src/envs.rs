//! Tutoring CMDPs.
//!
//! Four environments share the [`Environment`] interface:
//!
//! * [`MinimalEnv`]: one decision, `prog` (concept 0) or `hack`.
//! * [`SafetyGapEnv`]: the horizon-2 instance `s0 -> {s1, s⊥}` where an
//!   unconstrained optimum starves the feasible optimum of support.
//! * [`ChainEnv`]: five concepts in a chain with binary mastery and
//!   stochastic learning.
//! * [`TutoringEnv`]: BKT-style mastery over a prerequisite DAG with
//!   engagement shaped by novelty and difficulty.
//!
//! Action layout is always concept actions first, then extra actions
//! (`hack` / low-effort). Costs are reported as the triple `(c2, c3, c4)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feasibility::{feasible_set, ConceptId, FeasibleMask, MasteryVector, PrereqGraph};
use crate::rng::CounterRng;

/// `(c2, c3, c4)`: insufficient progress, inadequate demand, engagement
/// without learning.
pub type Costs = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub mastery: MasteryVector,
    pub step_index: usize,
    /// Observable interaction features; empty in every provided env.
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub costs: Costs,
    pub next_state: EnvState,
    pub terminal: bool,
    pub mastery_delta: f64,
    pub feasible_mask_next: FeasibleMask,
}

pub trait Environment: Send {
    fn num_actions(&self) -> usize;
    /// The always-available reward-hacking action, if the env has one.
    fn hack_action(&self) -> Option<usize>;
    fn gamma(&self) -> f64;
    fn horizon(&self) -> usize;
    /// Largest possible `|r_E|`.
    fn reward_bound(&self) -> f64;
    fn reset(&mut self) -> EnvState;
    fn state(&self) -> &EnvState;
    /// Prerequisite feasibility computed from an arbitrary (possibly noisy)
    /// mastery estimate at the current step.
    fn mask_for(&self, mastery: &MasteryVector) -> FeasibleMask;
    /// Prerequisite feasibility of the true current state.
    fn feasible_mask(&self) -> FeasibleMask {
        self.mask_for(&self.state().mastery)
    }
    /// Actions a post-hoc filter treats as safe in the current state.
    fn filter_mask(&self) -> FeasibleMask;
    fn step(&mut self, action: usize, rng: &mut CounterRng) -> Result<StepOutcome>;
    /// A no-op: time advances, zero reward and zero cost, no learning.
    fn noop(&mut self) -> Result<StepOutcome>;
    fn is_terminal(&self) -> bool;
}

/// Environments with a finite enumerable state space.
pub trait TabularEnv: Environment {
    fn num_states(&self) -> usize;
    fn state_id(&self) -> usize;
}

fn finished_guard(done: bool) -> Result<()> {
    if done {
        Err(Error::EpisodeFinished)
    } else {
        Ok(())
    }
}

/// `K' = K + eta (1 - K)` on one concept.
pub fn bkt_update(mastery: &MasteryVector, concept: ConceptId, eta: f64) -> Result<MasteryVector> {
    if concept.0 >= mastery.len() {
        return Err(Error::IndexOutOfRange { index: concept.0, len: mastery.len() });
    }
    let mut out = mastery.clone();
    let k = mastery.get(concept);
    out.set(concept, k + eta * (1.0 - k));
    Ok(out)
}

/// Independent `N(0, sigma^2)` perturbation per entry, clipped to `[0, 1]`.
pub fn inject_observation_noise(mastery: &MasteryVector, sigma: f64, rng: &mut CounterRng) -> MasteryVector {
    if sigma == 0.0 {
        return mastery.clone();
    }
    MasteryVector::clamped(mastery.values().iter().map(|&k| k + sigma * rng.gaussian()).collect())
}

// ---------------------------------------------------------------------------

/// One-step CMDP: `prog` (action 0) earns `reward_prog` and masters concept
/// 0; `hack` (action 1) earns 1 at cost `c2 = 1`.
#[derive(Debug, Clone)]
pub struct MinimalEnv {
    graph: PrereqGraph,
    reward_prog: f64,
    gamma: f64,
    theta_min: f64,
    state: EnvState,
}

impl MinimalEnv {
    pub const PROG: usize = 0;
    pub const HACK: usize = 1;

    pub fn new(reward_prog: f64, gamma: f64, theta_min: f64) -> Self {
        let graph = PrereqGraph::chain(2);
        let state = EnvState { mastery: MasteryVector::zeros(2), step_index: 0, features: Vec::new() };
        Self { graph, reward_prog, gamma, theta_min, state }
    }

    fn done(&self) -> bool {
        self.state.step_index >= 1
    }
}

impl Environment for MinimalEnv {
    fn num_actions(&self) -> usize {
        2
    }
    fn hack_action(&self) -> Option<usize> {
        Some(Self::HACK)
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }
    fn horizon(&self) -> usize {
        1
    }
    fn reward_bound(&self) -> f64 {
        self.reward_prog.abs().max(1.0)
    }
    fn reset(&mut self) -> EnvState {
        self.state = EnvState { mastery: MasteryVector::zeros(2), step_index: 0, features: Vec::new() };
        self.state.clone()
    }
    fn state(&self) -> &EnvState {
        &self.state
    }
    fn mask_for(&self, mastery: &MasteryVector) -> FeasibleMask {
        let concepts = feasible_set(&self.graph, mastery, self.theta_min).expect("mastery has two entries");
        FeasibleMask::from_bits(vec![concepts.is_admissible(0)]).with_extra(1)
    }
    fn filter_mask(&self) -> FeasibleMask {
        let mut m = self.feasible_mask();
        m.forbid(Self::HACK);
        m
    }
    fn step(&mut self, action: usize, _rng: &mut CounterRng) -> Result<StepOutcome> {
        finished_guard(self.done())?;
        let (reward, costs, delta) = match action {
            Self::PROG => {
                self.state.mastery.set(ConceptId(0), 1.0);
                (self.reward_prog, [0.0; 3], 1.0)
            }
            Self::HACK => (1.0, [1.0, 0.0, 0.0], 0.0),
            a => return Err(Error::InvalidAction(a)),
        };
        self.state.step_index = 1;
        Ok(StepOutcome {
            reward,
            costs,
            next_state: self.state.clone(),
            terminal: true,
            mastery_delta: delta,
            feasible_mask_next: self.feasible_mask(),
        })
    }
    fn noop(&mut self) -> Result<StepOutcome> {
        finished_guard(self.done())?;
        self.state.step_index = 1;
        Ok(StepOutcome {
            reward: 0.0,
            costs: [0.0; 3],
            next_state: self.state.clone(),
            terminal: true,
            mastery_delta: 0.0,
            feasible_mask_next: self.feasible_mask(),
        })
    }
    fn is_terminal(&self) -> bool {
        self.done()
    }
}

impl TabularEnv for MinimalEnv {
    fn num_states(&self) -> usize {
        1
    }
    fn state_id(&self) -> usize {
        0
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GapState {
    S0,
    S1,
    Bottom,
}

/// Horizon-2 instance: `hack` (1 reward, `c2 = 1`), `prog` (to `s1`),
/// `safe` (to `s⊥`) at `s0`; `learn` (reward `R`) at `s1`. Budget `d2 = 0`.
#[derive(Debug, Clone)]
pub struct SafetyGapEnv {
    reward_learn: f64,
    gamma: f64,
    at: GapState,
    state: EnvState,
}

impl SafetyGapEnv {
    pub const HACK: usize = 0;
    pub const PROG: usize = 1;
    pub const SAFE: usize = 2;
    pub const LEARN: usize = 3;

    pub fn new(reward_learn: f64, gamma: f64) -> Self {
        let mut env = Self {
            reward_learn,
            gamma,
            at: GapState::S0,
            state: EnvState { mastery: MasteryVector::zeros(1), step_index: 0, features: Vec::new() },
        };
        env.reset();
        env
    }

    pub fn at(&self) -> GapState {
        self.at
    }

    /// Actions available at `at`.
    pub fn actions_at(at: GapState) -> &'static [usize] {
        match at {
            GapState::S0 => &[Self::HACK, Self::PROG, Self::SAFE],
            GapState::S1 => &[Self::LEARN],
            GapState::Bottom => &[],
        }
    }

    fn outcome(&self, reward: f64, costs: Costs, delta: f64) -> StepOutcome {
        StepOutcome {
            reward,
            costs,
            next_state: self.state.clone(),
            terminal: self.at == GapState::Bottom,
            mastery_delta: delta,
            feasible_mask_next: self.feasible_mask(),
        }
    }
}

impl Environment for SafetyGapEnv {
    fn num_actions(&self) -> usize {
        4
    }
    fn hack_action(&self) -> Option<usize> {
        Some(Self::HACK)
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }
    fn horizon(&self) -> usize {
        2
    }
    fn reward_bound(&self) -> f64 {
        1.0
    }
    fn reset(&mut self) -> EnvState {
        self.at = GapState::S0;
        self.state = EnvState { mastery: MasteryVector::zeros(1), step_index: 0, features: Vec::new() };
        self.state.clone()
    }
    fn state(&self) -> &EnvState {
        &self.state
    }
    fn mask_for(&self, _mastery: &MasteryVector) -> FeasibleMask {
        let mut bits = vec![false; 4];
        for &a in Self::actions_at(self.at) {
            bits[a] = true;
        }
        FeasibleMask::from_bits(bits)
    }
    fn filter_mask(&self) -> FeasibleMask {
        let mut m = self.feasible_mask();
        m.forbid(Self::HACK);
        m
    }
    fn step(&mut self, action: usize, _rng: &mut CounterRng) -> Result<StepOutcome> {
        finished_guard(self.at == GapState::Bottom)?;
        if !Self::actions_at(self.at).contains(&action) {
            return Err(Error::InvalidAction(action));
        }
        self.state.step_index += 1;
        let (reward, costs, delta) = match (self.at, action) {
            (GapState::S0, Self::HACK) => {
                self.at = GapState::Bottom;
                (1.0, [1.0, 0.0, 0.0], 0.0)
            }
            (GapState::S0, Self::PROG) => {
                self.at = GapState::S1;
                self.state.mastery.set(ConceptId(0), 1.0);
                (0.0, [0.0; 3], 1.0)
            }
            (GapState::S0, Self::SAFE) => {
                self.at = GapState::Bottom;
                (0.0, [0.0; 3], 0.0)
            }
            (GapState::S1, Self::LEARN) => {
                self.at = GapState::Bottom;
                (self.reward_learn, [0.0; 3], 0.0)
            }
            _ => unreachable!("action validated against state"),
        };
        Ok(self.outcome(reward, costs, delta))
    }
    fn noop(&mut self) -> Result<StepOutcome> {
        finished_guard(self.at == GapState::Bottom)?;
        self.state.step_index += 1;
        self.at = GapState::Bottom;
        Ok(self.outcome(0.0, [0.0; 3], 0.0))
    }
    fn is_terminal(&self) -> bool {
        self.at == GapState::Bottom
    }
}

impl TabularEnv for SafetyGapEnv {
    fn num_states(&self) -> usize {
        3
    }
    fn state_id(&self) -> usize {
        self.at as usize
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainParams {
    pub num_concepts: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub theta_min: f64,
    pub p_learn: f64,
    pub concept_reward: f64,
    pub hack_reward: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self { num_concepts: 5, horizon: 5, gamma: 0.99, theta_min: 0.5, p_learn: 0.8, concept_reward: 0.6, hack_reward: 1.0 }
    }
}

/// Binary-mastery prerequisite chain. Action `i < n` presents concept `i`;
/// action `n` is `hack`. Presenting an infeasible concept earns nothing and
/// teaches nothing.
#[derive(Debug, Clone)]
pub struct ChainEnv {
    params: ChainParams,
    graph: PrereqGraph,
    state: EnvState,
}

impl ChainEnv {
    pub fn new(params: ChainParams) -> Self {
        assert!(params.num_concepts <= 20, "chain state ids are bitmasks");
        let graph = PrereqGraph::chain(params.num_concepts);
        let state = EnvState { mastery: MasteryVector::zeros(params.num_concepts), step_index: 0, features: Vec::new() };
        Self { params, graph, state }
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn hack(&self) -> usize {
        self.params.num_concepts
    }

    fn done(&self) -> bool {
        self.state.step_index >= self.params.horizon
    }

    fn mastery_bits(&self) -> usize {
        self.state
            .mastery
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &k)| k >= 0.5)
            .fold(0, |acc, (i, _)| acc | (1 << i))
    }
}

impl Environment for ChainEnv {
    fn num_actions(&self) -> usize {
        self.params.num_concepts + 1
    }
    fn hack_action(&self) -> Option<usize> {
        Some(self.hack())
    }
    fn gamma(&self) -> f64 {
        self.params.gamma
    }
    fn horizon(&self) -> usize {
        self.params.horizon
    }
    fn reward_bound(&self) -> f64 {
        self.params.concept_reward.abs().max(self.params.hack_reward.abs())
    }
    fn reset(&mut self) -> EnvState {
        self.state = EnvState { mastery: MasteryVector::zeros(self.params.num_concepts), step_index: 0, features: Vec::new() };
        self.state.clone()
    }
    fn state(&self) -> &EnvState {
        &self.state
    }
    fn mask_for(&self, mastery: &MasteryVector) -> FeasibleMask {
        feasible_set(&self.graph, mastery, self.params.theta_min).expect("chain mastery length").with_extra(1)
    }
    fn filter_mask(&self) -> FeasibleMask {
        let mut m = self.feasible_mask();
        m.forbid(self.hack());
        m
    }
    fn step(&mut self, action: usize, rng: &mut CounterRng) -> Result<StepOutcome> {
        if action >= self.num_actions() {
            return Err(Error::InvalidAction(action));
        }
        finished_guard(self.done())?;
        let mask = self.feasible_mask();
        let feasible = mask.is_admissible(action);
        let before = self.state.mastery.total();
        let reward = if action == self.hack() {
            self.params.hack_reward
        } else if feasible {
            let c = ConceptId(action);
            if self.state.mastery.get(c) < 1.0 && rng.bernoulli(self.params.p_learn) {
                self.state.mastery.set(c, 1.0);
            }
            self.params.concept_reward
        } else {
            0.0
        };
        let delta = self.state.mastery.total() - before;
        let no_gain = delta == 0.0;
        let costs = [
            (feasible && action != self.hack() && no_gain) as u8 as f64,
            (!feasible) as u8 as f64,
            (reward > 0.0 && no_gain) as u8 as f64,
        ];
        self.state.step_index += 1;
        Ok(StepOutcome {
            reward,
            costs,
            next_state: self.state.clone(),
            terminal: self.done(),
            mastery_delta: delta,
            feasible_mask_next: self.feasible_mask(),
        })
    }
    fn noop(&mut self) -> Result<StepOutcome> {
        finished_guard(self.done())?;
        self.state.step_index += 1;
        Ok(StepOutcome {
            reward: 0.0,
            costs: [0.0; 3],
            next_state: self.state.clone(),
            terminal: self.done(),
            mastery_delta: 0.0,
            feasible_mask_next: self.feasible_mask(),
        })
    }
    fn is_terminal(&self) -> bool {
        self.done()
    }
}

impl TabularEnv for ChainEnv {
    fn num_states(&self) -> usize {
        (self.params.horizon + 1) << self.params.num_concepts
    }
    fn state_id(&self) -> usize {
        (self.state.step_index << self.params.num_concepts) | self.mastery_bits()
    }
}

// ---------------------------------------------------------------------------

/// Reward and cost constants of the tutoring simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TutoringParams {
    pub horizon: usize,
    pub gamma: f64,
    pub theta_min: f64,
    pub eta: f64,
    /// Engagement for every concept presentation.
    pub base_engagement: f64,
    /// Extra engagement on a concept's first presentation in the episode.
    pub novelty_bonus: f64,
    /// Penalty per unit of `difficulty - mastery` when positive.
    pub difficulty_penalty: f64,
    /// Engagement of the low-effort action.
    pub hack_reward: f64,
    pub reward_max: f64,
    /// Difficulty of a root concept.
    pub difficulty_base: f64,
    /// Added difficulty per level of prerequisite depth.
    pub difficulty_step: f64,
    /// A concept is too easy once `difficulty < mastery - margin`.
    pub easy_margin: f64,
    /// `Delta K` below this counts as no progress.
    pub progress_threshold: f64,
}

impl Default for TutoringParams {
    fn default() -> Self {
        Self {
            horizon: 100,
            gamma: 0.99,
            theta_min: 0.7,
            eta: 0.08,
            base_engagement: 0.1,
            novelty_bonus: 0.2,
            difficulty_penalty: 0.5,
            hack_reward: 3.0,
            reward_max: 3.0,
            difficulty_base: 0.3,
            difficulty_step: 0.15,
            easy_margin: 0.5,
            progress_threshold: 1e-3,
        }
    }
}

/// BKT tutoring simulator over an arbitrary prerequisite DAG. Action `i < n`
/// presents concept `i`; action `n` is the low-effort action.
#[derive(Debug, Clone)]
pub struct TutoringEnv {
    params: TutoringParams,
    graph: PrereqGraph,
    difficulty: Vec<f64>,
    presented: Vec<bool>,
    state: EnvState,
}

impl TutoringEnv {
    pub fn new(graph: PrereqGraph, params: TutoringParams) -> Self {
        let difficulty = graph
            .depths()
            .into_iter()
            .map(|d| (params.difficulty_base + params.difficulty_step * d as f64).clamp(0.0, 1.0))
            .collect();
        let n = graph.num_concepts();
        Self {
            params,
            graph,
            difficulty,
            presented: vec![false; n],
            state: EnvState { mastery: MasteryVector::zeros(n), step_index: 0, features: Vec::new() },
        }
    }

    pub fn params(&self) -> &TutoringParams {
        &self.params
    }

    pub fn graph(&self) -> &PrereqGraph {
        &self.graph
    }

    pub fn difficulty(&self, v: ConceptId) -> f64 {
        self.difficulty[v.0]
    }

    pub fn low_effort(&self) -> usize {
        self.graph.num_concepts()
    }

    fn done(&self) -> bool {
        self.state.step_index >= self.params.horizon
    }
}

impl Environment for TutoringEnv {
    fn num_actions(&self) -> usize {
        self.graph.num_concepts() + 1
    }
    fn hack_action(&self) -> Option<usize> {
        Some(self.low_effort())
    }
    fn gamma(&self) -> f64 {
        self.params.gamma
    }
    fn horizon(&self) -> usize {
        self.params.horizon
    }
    fn reward_bound(&self) -> f64 {
        self.params.reward_max
    }
    fn reset(&mut self) -> EnvState {
        self.presented.iter_mut().for_each(|p| *p = false);
        self.state = EnvState { mastery: MasteryVector::zeros(self.graph.num_concepts()), step_index: 0, features: Vec::new() };
        self.state.clone()
    }
    fn state(&self) -> &EnvState {
        &self.state
    }
    fn mask_for(&self, mastery: &MasteryVector) -> FeasibleMask {
        feasible_set(&self.graph, mastery, self.params.theta_min).expect("mastery length").with_extra(1)
    }
    /// The post-hoc filter masks on prerequisites only, like the policy mask.
    fn filter_mask(&self) -> FeasibleMask {
        self.feasible_mask()
    }
    fn step(&mut self, action: usize, _rng: &mut CounterRng) -> Result<StepOutcome> {
        if action >= self.num_actions() {
            return Err(Error::InvalidAction(action));
        }
        finished_guard(self.done())?;
        let p = &self.params;
        let (reward, delta, too_easy) = if action == self.low_effort() {
            (p.hack_reward.clamp(0.0, p.reward_max), 0.0, true)
        } else {
            let c = ConceptId(action);
            let k = self.state.mastery.get(c);
            let diff = self.difficulty[action];
            let novelty = if self.presented[action] { 0.0 } else { p.novelty_bonus };
            let raw = p.base_engagement + novelty - p.difficulty_penalty * (diff - k).max(0.0);
            self.presented[action] = true;
            let next = bkt_update(&self.state.mastery, c, p.eta)?;
            let delta = next.get(c) - k;
            self.state.mastery = next;
            (raw.clamp(0.0, p.reward_max), delta, diff < k - p.easy_margin)
        };
        let no_progress = delta < p.progress_threshold;
        let costs = [no_progress as u8 as f64, too_easy as u8 as f64, (reward > 0.0 && no_progress) as u8 as f64];
        self.state.step_index += 1;
        Ok(StepOutcome {
            reward,
            costs,
            next_state: self.state.clone(),
            terminal: self.done(),
            mastery_delta: delta,
            feasible_mask_next: self.feasible_mask(),
        })
    }
    fn noop(&mut self) -> Result<StepOutcome> {
        finished_guard(self.done())?;
        self.state.step_index += 1;
        Ok(StepOutcome {
            reward: 0.0,
            costs: [0.0; 3],
            next_state: self.state.clone(),
            terminal: self.done(),
            mastery_delta: 0.0,
            feasible_mask_next: self.feasible_mask(),
        })
    }
    fn is_terminal(&self) -> bool {
        self.done()
    }
}
