//! Exhaustive check of the safety gap on [`SafetyGapEnv`].

use serde::{Deserialize, Serialize};

use crate::envs::{Environment, GapState, SafetyGapEnv};
use crate::error::Result;
use crate::policy::{sample_filtered, ActionDistribution, FilterChoice, FilterMode};
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub reward_learn: f64,
    pub gamma: f64,
    /// Best return over deterministic policies with zero `c2` cost.
    pub max_feasible_return: f64,
    /// Best return ignoring costs.
    pub unconstrained_return: f64,
    /// Return of the unconstrained optimum behind a nullifying filter.
    pub filtered_return: f64,
    pub gap_confirmed: bool,
}

/// Discounted return and `c2` cost of the deterministic policy choosing
/// `first` at `s0`. The env is deterministic, so one rollout is exact.
fn evaluate(env: &mut SafetyGapEnv, first: usize) -> Result<(f64, f64)> {
    let mut rng = CounterRng::new(0);
    env.reset();
    let (mut ret, mut cost, mut discount) = (0.0, 0.0, 1.0);
    let mut action = first;
    while !env.is_terminal() {
        let out = env.step(action, &mut rng)?;
        ret += discount * out.reward;
        cost += discount * out.costs[0];
        discount *= env.gamma();
        action = SafetyGapEnv::LEARN;
    }
    Ok((ret, cost))
}

/// Enumerates every deterministic policy (three choices at `s0`, one at
/// `s1`). The budget is `d2 = 0`, so any feasible stochastic policy puts
/// zero mass on `hack` and is a mixture of the deterministic feasible ones;
/// the deterministic maximum is therefore the feasible optimum.
pub fn verify_safety_gap(reward_learn: f64, gamma: f64) -> Result<GapReport> {
    let mut env = SafetyGapEnv::new(reward_learn, gamma);
    let mut best_feasible = f64::NEG_INFINITY;
    let mut best = (f64::NEG_INFINITY, SafetyGapEnv::SAFE);
    for &a in SafetyGapEnv::actions_at(GapState::S0) {
        let (ret, cost) = evaluate(&mut env, a)?;
        if cost == 0.0 {
            best_feasible = best_feasible.max(ret);
        }
        if ret > best.0 {
            best = (ret, a);
        }
    }

    // The unconstrained optimum is deterministic; nullify replaces a
    // filtered action with a terminal no-op.
    let mut probs = vec![0.0; env.num_actions()];
    probs[best.1] = 1.0;
    env.reset();
    let support = env.feasible_mask().iter().collect();
    let base = ActionDistribution::new(probs, support)?;
    let mut rng = CounterRng::new(0);
    let mut filtered = 0.0;
    let mut discount = 1.0;
    let mut choice = sample_filtered(&base, &env.filter_mask(), FilterMode::Nullify, &mut rng)?;
    while !env.is_terminal() {
        let out = match choice {
            FilterChoice::Act(a) => env.step(a, &mut rng)?,
            FilterChoice::Noop => env.noop()?,
        };
        filtered += discount * out.reward;
        discount *= gamma;
        choice = FilterChoice::Act(SafetyGapEnv::LEARN);
    }
    Ok(GapReport {
        reward_learn,
        gamma,
        max_feasible_return: best_feasible,
        unconstrained_return: best.0,
        filtered_return: filtered,
        gap_confirmed: filtered < best_feasible,
    })
}
