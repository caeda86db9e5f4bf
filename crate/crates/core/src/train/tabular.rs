//! Softmax-tabular REINFORCE: unconstrained, shaped and MC-CPO.

use serde::{Deserialize, Serialize};

use super::{dual_update, lagrangian_advantage, reward_shape, step_sizes, DualState, HistoryRow, Method, Shaping, StepSizeSchedule};
use crate::envs::{Costs, TabularEnv};
use crate::error::Result;
use crate::feasibility::{frontier, FeasibleMask, FrontierSet};
use crate::metrics::{discounted_sum, EpisodeMetrics};
use crate::policy::{
    frontier_mix, importance_weight, sample_action, sample_filtered, FilterChoice, FilterMode, TabularPolicyParams,
};
use crate::rng::CounterRng;

/// Which actions the policy's softmax ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Every action, feasible or not.
    Unmasked,
    /// The prerequisite-feasible set (extra actions always admissible).
    Prerequisite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSpec {
    pub mask: MaskKind,
    /// Zero disables frontier mixing.
    pub epsilon_min: f64,
    /// Post-hoc filter applied to the base policy; disables mixing.
    pub filter: Option<FilterMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub costs: Costs,
    /// Support of the base policy at this step.
    pub support: FeasibleMask,
    pub frontier: bool,
    /// `pi(a|s) / pi_mixed(a|s)`; exactly 1 when `frontier` is false.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

/// Learning signal for [`reinforce_update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Reward,
    Shaped(Shaping),
    Lagrangian([f64; 3]),
    /// Lagrangian divided by `1 + sum(lambda)`, keeping step magnitudes
    /// bounded as the multipliers grow.
    NormalizedLagrangian([f64; 3]),
}

impl Objective {
    fn signal(&self, reward: f64, costs: &Costs) -> f64 {
        match *self {
            Objective::Reward => reward,
            Objective::Shaped(s) => reward_shape(reward, costs[0], costs[2], s.alpha2, s.alpha4),
            Objective::Lagrangian(l) => lagrangian_advantage(reward, *costs, l),
            Objective::NormalizedLagrangian(l) => lagrangian_advantage(reward, *costs, l) / (1.0 + l.iter().sum::<f64>()),
        }
    }
}

fn policy_mask<E: TabularEnv + ?Sized>(env: &E, kind: MaskKind) -> FeasibleMask {
    match kind {
        MaskKind::Unmasked => FeasibleMask::all(env.num_actions()),
        MaskKind::Prerequisite => env.feasible_mask(),
    }
}

/// Runs one episode of the frozen `params` in `env`.
pub fn rollout_tabular<E: TabularEnv + ?Sized>(
    env: &mut E,
    params: &TabularPolicyParams,
    spec: &RolloutSpec,
    rng: &mut CounterRng,
) -> Result<(Trajectory, EpisodeMetrics)> {
    env.reset();
    let gamma = env.gamma();
    let hack = env.hack_action();
    let mut traj = Trajectory::default();
    let mut m = EpisodeMetrics::default();
    let mut rewards = Vec::new();
    let mut costs: [Vec<f64>; 3] = Default::default();
    let mut prev_mask = policy_mask(env, spec.mask);
    let mut pi_hack_sum = 0.0;
    while !env.is_terminal() {
        let state = env.state_id();
        let mask = policy_mask(env, spec.mask);
        let front = if spec.mask == MaskKind::Prerequisite {
            frontier(&prev_mask, &mask)?
        } else {
            FrontierSet::default()
        };
        prev_mask = mask.clone();
        let base = params.distribution(state, &mask)?;
        if let Some(h) = hack {
            pi_hack_sum += base.prob(h);
        }
        let true_mask = env.feasible_mask();
        let filter_mask = env.filter_mask();
        let (choice, weight, mixed_frontier) = match spec.filter {
            Some(mode) => (sample_filtered(&base, &filter_mask, mode, rng)?, 1.0, false),
            None => {
                let mixed = frontier_mix(&base, &front, spec.epsilon_min)?;
                let a = sample_action(&mixed.executed, rng);
                (FilterChoice::Act(a), importance_weight(&mixed, a)?, mixed.epsilon > 0.0)
            }
        };
        if !front.is_empty() {
            m.frontier_events += 1;
        }
        let (action, out) = match choice {
            FilterChoice::Act(a) => {
                m.violated |= !filter_mask.is_admissible(a);
                m.infeasible_actions += !true_mask.is_admissible(a) as u32;
                (a, env.step(a, rng)?)
            }
            FilterChoice::Noop => (usize::MAX, env.noop()?),
        };
        m.mastery_gain += out.mastery_delta;
        rewards.push(out.reward);
        for i in 0..3 {
            costs[i].push(out.costs[i]);
        }
        if action != usize::MAX {
            traj.steps.push(TrajectoryStep {
                state,
                action,
                reward: out.reward,
                costs: out.costs,
                support: mask,
                frontier: mixed_frontier,
                weight,
            });
        }
    }
    m.steps = rewards.len() as u32;
    m.discounted_return = discounted_sum(&rewards, gamma);
    m.discounted_costs = std::array::from_fn(|i| discounted_sum(&costs[i], gamma));
    m.pi_hack = if m.steps > 0 { pi_hack_sum / m.steps as f64 } else { 0.0 };
    Ok((traj, m))
}

/// Per-state running mean of the return-to-go, starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBaseline {
    pub values: Vec<f64>,
    pub rate: f64,
}

impl StateBaseline {
    pub fn new(num_states: usize, rate: f64) -> Self {
        Self { values: vec![0.0; num_states], rate }
    }
}

/// `theta[s_t] += alpha w_t (G_t - b(s_t)) (e_{a_t} - pi(.|s_t))` for every
/// step, with `G_t` the discounted return-to-go of the objective's per-step
/// signal and the gradient taken at the pre-update parameters. Masked actions
/// have zero gradient. The baseline, if any, moves toward `G_t` after use. A
/// batch with all-zero returns leaves `params` (and a zero baseline)
/// unchanged.
pub fn reinforce_update(
    params: &mut TabularPolicyParams,
    batch: &[Trajectory],
    objective: Objective,
    gamma: f64,
    alpha: f64,
    mut baseline: Option<&mut StateBaseline>,
) -> Result<()> {
    let snapshot = params.clone();
    for traj in batch {
        let mut g = 0.0;
        for step in traj.steps.iter().rev() {
            g = objective.signal(step.reward, &step.costs) + gamma * g;
            let b = match baseline.as_deref_mut() {
                Some(base) => {
                    let v = &mut base.values[step.state];
                    let old = *v;
                    *v += base.rate * (g - old);
                    old
                }
                None => 0.0,
            };
            let adv = g - b;
            if adv == 0.0 {
                continue;
            }
            let dist = snapshot.distribution(step.state, &step.support)?;
            let grad = dist.log_prob_grad(step.action);
            let scale = alpha * step.weight * adv;
            for (theta, d) in params.row_mut(step.state).iter_mut().zip(&grad) {
                *theta += scale * d;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularConfig {
    pub episodes: u64,
    pub schedule: StepSizeSchedule,
    pub epsilon_min: f64,
    pub shaping: Shaping,
    pub budgets: [f64; 3],
    pub kappas: [f64; 3],
    /// Step of the per-state return baseline; 0 disables it.
    pub baseline_rate: f64,
    pub normalize_lagrangian: bool,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            episodes: 20_000,
            schedule: StepSizeSchedule::default(),
            epsilon_min: 0.05,
            shaping: Shaping::default(),
            budgets: [0.0; 3],
            kappas: [0.95, 0.5, 0.85],
            baseline_rate: 0.0,
            normalize_lagrangian: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularRun {
    pub params: TabularPolicyParams,
    pub dual: DualState,
    pub history: Vec<HistoryRow>,
    pub infeasible_actions: u64,
    /// `beta_k / alpha_k` at every episode.
    pub step_ratio: Vec<f64>,
}

/// Per-episode policy-gradient training for any method. Constrained methods
/// use the prerequisite mask and a dual update per episode; the others are
/// unmasked.
pub fn train_tabular<E: TabularEnv + ?Sized>(
    env: &mut E,
    method: Method,
    cfg: &TabularConfig,
    rng: &mut CounterRng,
) -> Result<TabularRun> {
    cfg.schedule.validate()?;
    let mut params = TabularPolicyParams::zeros(env.num_states(), env.num_actions());
    let mut dual = DualState::new(cfg.budgets, cfg.kappas);
    let spec = match method {
        Method::Mccpo => RolloutSpec { mask: MaskKind::Prerequisite, epsilon_min: cfg.epsilon_min, filter: None },
        Method::MccpoNoFrontier => RolloutSpec { mask: MaskKind::Prerequisite, epsilon_min: 0.0, filter: None },
        _ => RolloutSpec { mask: MaskKind::Unmasked, epsilon_min: 0.0, filter: None },
    };
    let mut history = Vec::with_capacity(cfg.episodes as usize);
    let mut step_ratio = Vec::with_capacity(cfg.episodes as usize);
    let mut infeasible = 0u64;
    let mut baseline = (cfg.baseline_rate > 0.0).then(|| StateBaseline::new(env.num_states(), cfg.baseline_rate));
    for k in 0..cfg.episodes {
        let (alpha, beta) = step_sizes(&cfg.schedule, k)?;
        let (traj, metrics) = rollout_tabular(env, &params, &spec, rng)?;
        infeasible += metrics.infeasible_actions as u64;
        let objective = match method {
            Method::Shaped => Objective::Shaped(cfg.shaping),
            Method::Mccpo | Method::MccpoNoFrontier if cfg.normalize_lagrangian => {
                Objective::NormalizedLagrangian(dual.lambdas)
            }
            Method::Mccpo | Method::MccpoNoFrontier => Objective::Lagrangian(dual.lambdas),
            Method::Unconstrained | Method::Posthoc => Objective::Reward,
        };
        reinforce_update(&mut params, std::slice::from_ref(&traj), objective, env.gamma(), alpha, baseline.as_mut())?;
        if method.is_constrained() {
            dual = dual_update(&dual, metrics.discounted_costs, beta);
        }
        step_ratio.push(if alpha > 0.0 { beta / alpha } else { 0.0 });
        history.push(HistoryRow { episode: k, metrics, lambdas: dual.lambdas });
    }
    Ok(TabularRun { params, dual, history, infeasible_actions: infeasible, step_ratio })
}

/// Masked tabular MC-CPO with frontier mixing and projected dual ascent.
pub fn train_mccpo_tabular<E: TabularEnv + ?Sized>(env: &mut E, cfg: &TabularConfig, rng: &mut CounterRng) -> Result<TabularRun> {
    train_tabular(env, Method::Mccpo, cfg, rng)
}

/// Frozen-policy evaluation. Constrained methods are rolled out under their
/// mask without mixing; `filter` applies a post-hoc filter to the base policy.
pub fn evaluate_tabular<E: TabularEnv + ?Sized>(
    env: &mut E,
    params: &TabularPolicyParams,
    mask: MaskKind,
    filter: Option<FilterMode>,
    episodes: usize,
    rng: &mut CounterRng,
) -> Result<Vec<EpisodeMetrics>> {
    let spec = RolloutSpec { mask, epsilon_min: 0.0, filter };
    (0..episodes).map(|_| rollout_tabular(env, params, &spec, rng).map(|(_, m)| m)).collect()
}
