//! Masked-softmax policies, frontier mixing and post-hoc filters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feasibility::{FeasibleMask, FrontierSet};
use crate::rng::CounterRng;

const SUM_TOL: f64 = 1e-9;

/// Probabilities over the full action space together with the admissible
/// set they were built on. Entries off the support are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    probs: Vec<f64>,
    support: Vec<bool>,
}

impl ActionDistribution {
    pub fn new(probs: Vec<f64>, support: Vec<bool>) -> Result<Self> {
        if probs.len() != support.len() {
            return Err(Error::DimensionMismatch { expected: support.len(), actual: probs.len() });
        }
        if probs.iter().zip(&support).any(|(&p, &s)| !(p >= 0.0 && p.is_finite()) || (!s && p != 0.0)) {
            return Err(Error::Parse("probabilities must be finite, nonnegative and zero off support".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::Parse(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs, support })
    }

    /// Distribution with every action admissible.
    pub fn unmasked(probs: Vec<f64>) -> Result<Self> {
        let n = probs.len();
        Self::new(probs, vec![true; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, action: usize) -> f64 {
        self.probs[action]
    }

    pub fn support(&self) -> &[bool] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }

    /// `d log pi(action) / d logits`: `1[j = a] - p_j` on the support, 0 off it.
    pub fn log_prob_grad(&self, action: usize) -> Vec<f64> {
        self.probs
            .iter()
            .zip(&self.support)
            .enumerate()
            .map(|(j, (&p, &s))| if s { (j == action) as u8 as f64 - p } else { 0.0 })
            .collect()
    }

    /// `d H / d logits`: `-p_j (ln p_j + H)` on the support.
    pub fn entropy_grad(&self) -> Vec<f64> {
        let h = self.entropy();
        self.probs
            .iter()
            .zip(&self.support)
            .map(|(&p, &s)| if s && p > 0.0 { -p * (p.ln() + h) } else { 0.0 })
            .collect()
    }
}

/// Softmax restricted to the admissible actions. Masked actions get exactly
/// zero; the max admissible logit is subtracted before exponentiation.
pub fn masked_softmax(logits: &[f64], mask: &FeasibleMask) -> Result<ActionDistribution> {
    if logits.len() != mask.len() {
        return Err(Error::DimensionMismatch { expected: mask.len(), actual: logits.len() });
    }
    let support: Vec<bool> = mask.iter().collect();
    let mut max = f64::NEG_INFINITY;
    for (a, (&z, &s)) in logits.iter().zip(&support).enumerate() {
        if s {
            if !z.is_finite() {
                return Err(Error::NonFiniteLogit(a));
            }
            max = max.max(z);
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyFeasibleSet);
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(&support)
        .map(|(&z, &s)| if s { (z - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(ActionDistribution { probs, support })
}

/// Executed policy `(1 - eps) * base + eps * uniform(frontier)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedDistribution {
    pub executed: ActionDistribution,
    pub base: ActionDistribution,
    pub epsilon: f64,
    pub frontier: FrontierSet,
}

pub fn frontier_mix(base: &ActionDistribution, frontier: &FrontierSet, epsilon_min: f64) -> Result<MixedDistribution> {
    for &a in &frontier.newly_admissible {
        if a >= base.len() || !base.support[a] {
            return Err(Error::FrontierOutsideMask(a));
        }
    }
    if frontier.is_empty() || epsilon_min == 0.0 {
        return Ok(MixedDistribution {
            executed: base.clone(),
            base: base.clone(),
            epsilon: 0.0,
            frontier: frontier.clone(),
        });
    }
    let share = epsilon_min / frontier.len() as f64;
    let mut probs: Vec<f64> = base.probs.iter().map(|&p| (1.0 - epsilon_min) * p).collect();
    for &a in &frontier.newly_admissible {
        probs[a] += share;
    }
    Ok(MixedDistribution {
        executed: ActionDistribution { probs, support: base.support.clone() },
        base: base.clone(),
        epsilon: epsilon_min,
        frontier: frontier.clone(),
    })
}

/// `w = pi(a) / pi_tilde(a)`.
pub fn importance_weight(mixed: &MixedDistribution, action: usize) -> Result<f64> {
    let executed = mixed.executed.probs.get(action).copied().unwrap_or(0.0);
    if executed <= 0.0 {
        return Err(Error::ZeroExecutedProbability(action));
    }
    if mixed.epsilon == 0.0 {
        return Ok(1.0);
    }
    Ok(mixed.base.probs[action] / executed)
}

/// Inverse-CDF draw; zero-probability actions are never returned.
pub fn sample_action(dist: &ActionDistribution, rng: &mut CounterRng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = None;
    for (a, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = Some(a);
            if u < acc {
                return a;
            }
        }
    }
    // Rounding can leave `acc` just below 1.
    last.expect("distribution has positive mass")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Infeasible samples become a zero-reward, zero-cost no-op.
    Nullify,
    /// Infeasible samples are replaced by the lowest-index feasible action.
    RedirectLowest,
    /// Infeasible probability is removed and the rest rescaled.
    Renormalize,
}

/// What a filtered policy executes for one decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterChoice {
    Act(usize),
    Noop,
}

/// Exact law of a filtered policy: per-action mass plus no-op mass.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredLaw {
    pub action_mass: Vec<f64>,
    pub noop_mass: f64,
    /// Set when renormalization found no feasible mass and fell back to
    /// uniform over the feasible set.
    pub fallback_uniform: bool,
}

fn renormalized(base: &ActionDistribution, mask: &FeasibleMask) -> Result<(Vec<f64>, bool)> {
    let feasible: Vec<usize> = mask.admissible();
    if feasible.is_empty() {
        return Err(Error::EmptyFeasibleSet);
    }
    let kept: f64 = feasible.iter().map(|&a| base.probs[a]).sum();
    let mut mass = vec![0.0; base.len()];
    if kept > 0.0 {
        for &a in &feasible {
            mass[a] = base.probs[a] / kept;
        }
        Ok((mass, false))
    } else {
        log::debug!("renormalize filter: no feasible mass, falling back to uniform");
        for &a in &feasible {
            mass[a] = 1.0 / feasible.len() as f64;
        }
        Ok((mass, true))
    }
}

/// Filtered policy law for `base` under `mask`. Identity whenever `base`
/// already lives inside the mask.
pub fn posthoc_filter(base: &ActionDistribution, mask: &FeasibleMask, mode: FilterMode) -> Result<FilteredLaw> {
    if mask.len() != base.len() {
        return Err(Error::DimensionMismatch { expected: base.len(), actual: mask.len() });
    }
    let infeasible_mass: f64 = (0..base.len()).filter(|&a| !mask.is_admissible(a)).map(|a| base.probs[a]).sum();
    let mut mass: Vec<f64> = (0..base.len()).map(|a| if mask.is_admissible(a) { base.probs[a] } else { 0.0 }).collect();
    match mode {
        FilterMode::Nullify => Ok(FilteredLaw { action_mass: mass, noop_mass: infeasible_mass, fallback_uniform: false }),
        FilterMode::RedirectLowest => {
            let lowest = mask.admissible().first().copied().ok_or(Error::EmptyFeasibleSet)?;
            mass[lowest] += infeasible_mass;
            Ok(FilteredLaw { action_mass: mass, noop_mass: 0.0, fallback_uniform: false })
        }
        FilterMode::Renormalize => {
            if infeasible_mass == 0.0 {
                return Ok(FilteredLaw { action_mass: mass, noop_mass: 0.0, fallback_uniform: false });
            }
            let (mass, fallback) = renormalized(base, mask)?;
            Ok(FilteredLaw { action_mass: mass, noop_mass: 0.0, fallback_uniform: fallback })
        }
    }
}

/// Executes the filter for one decision: draw from `base`, then repair.
pub fn sample_filtered(
    base: &ActionDistribution,
    mask: &FeasibleMask,
    mode: FilterMode,
    rng: &mut CounterRng,
) -> Result<FilterChoice> {
    match mode {
        FilterMode::Renormalize => {
            let law = posthoc_filter(base, mask, mode)?;
            let dist = ActionDistribution { probs: law.action_mass, support: mask.iter().collect() };
            Ok(FilterChoice::Act(sample_action(&dist, rng)))
        }
        FilterMode::Nullify | FilterMode::RedirectLowest => {
            let a = sample_action(base, rng);
            if mask.is_admissible(a) {
                Ok(FilterChoice::Act(a))
            } else if mode == FilterMode::Nullify {
                Ok(FilterChoice::Noop)
            } else {
                mask.admissible().first().map(|&l| FilterChoice::Act(l)).ok_or(Error::EmptyFeasibleSet)
            }
        }
    }
}

/// Logit table `f(s, a)` for tabular policies; serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicyParams {
    pub num_states: usize,
    pub num_actions: usize,
    pub logits: Vec<f64>,
}

impl TabularPolicyParams {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self { num_states, num_actions, logits: vec![0.0; num_states * num_actions] }
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn row_mut(&mut self, state: usize) -> &mut [f64] {
        &mut self.logits[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn distribution(&self, state: usize, mask: &FeasibleMask) -> Result<ActionDistribution> {
        if state >= self.num_states {
            return Err(Error::IndexOutOfRange { index: state, len: self.num_states });
        }
        masked_softmax(self.row(state), mask)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        let expected = p.num_states.checked_mul(p.num_actions).ok_or_else(|| Error::Parse("shape overflow".into()))?;
        if p.logits.len() != expected {
            return Err(Error::LengthMismatch { expected, actual: p.logits.len() });
        }
        if p.logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Parse("non-finite logit in checkpoint".into()));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ChainEnv, ChainParams, Environment, MinimalEnv};
    use proptest::prelude::*;

    fn mask(bits: &[bool]) -> FeasibleMask {
        FeasibleMask::from_bits(bits.to_vec())
    }

    #[test]
    fn single_admissible_action() {
        let d = masked_softmax(&[5.0, -3.0], &mask(&[true, false])).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn symmetric_pair() {
        let d = masked_softmax(&[0.0, 0.0, 0.0], &mask(&[true, true, false])).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn two_logit_softmax() {
        let d = masked_softmax(&[1.0, 2.0], &mask(&[true, true])).unwrap();
        // 1 / (1 + e) and e / (1 + e)
        assert!((d.prob(0) - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((d.prob(1) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_errors_and_stability() {
        assert_eq!(masked_softmax(&[0.0, 0.0], &mask(&[false, false])), Err(Error::EmptyFeasibleSet));
        assert_eq!(masked_softmax(&[f64::NAN, 0.0], &mask(&[true, true])), Err(Error::NonFiniteLogit(0)));
        // Masked entries may be anything, including infinities.
        let d = masked_softmax(&[f64::INFINITY, 1000.0, 999.0], &mask(&[false, true, true])).unwrap();
        assert_eq!(d.prob(0), 0.0);
        assert!((d.prob(1) + d.prob(2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frontier_mix_examples() {
        let base = ActionDistribution::new(vec![0.8, 0.2, 0.0], vec![true, true, true]).unwrap();
        let empty = FrontierSet::default();
        let m = frontier_mix(&base, &empty, 0.05).unwrap();
        assert_eq!(m.executed, base);
        assert_eq!(m.epsilon, 0.0);

        let f = FrontierSet { newly_admissible: vec![2] };
        let m = frontier_mix(&base, &f, 0.05).unwrap();
        let expected = [0.76, 0.19, 0.05];
        for (p, e) in m.executed.probs().iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
        assert!((importance_weight(&m, 0).unwrap() - 0.8 / 0.76).abs() < 1e-15);
        assert_eq!(importance_weight(&m, 2).unwrap(), 0.0);
        assert_eq!(importance_weight(&frontier_mix(&base, &empty, 0.05).unwrap(), 1).unwrap(), 1.0);

        let masked = ActionDistribution::new(vec![0.9, 0.1, 0.0], vec![true, true, false]).unwrap();
        assert_eq!(frontier_mix(&masked, &f, 0.05), Err(Error::FrontierOutsideMask(2)));
    }

    #[test]
    fn zero_executed_probability() {
        let base = ActionDistribution::new(vec![1.0, 0.0], vec![true, true]).unwrap();
        let m = frontier_mix(&base, &FrontierSet::default(), 0.05).unwrap();
        assert_eq!(importance_weight(&m, 1), Err(Error::ZeroExecutedProbability(1)));
    }

    #[test]
    fn sampling() {
        let mut rng = CounterRng::new(8);
        let point = ActionDistribution::unmasked(vec![1.0, 0.0]).unwrap();
        for _ in 0..1000 {
            assert_eq!(sample_action(&point, &mut rng), 0);
        }
        let fair = ActionDistribution::unmasked(vec![0.5, 0.5]).unwrap();
        let n = 100_000;
        let ones = (0..n).filter(|_| sample_action(&fair, &mut rng) == 1).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
        let masked = masked_softmax(&[3.0, 10.0, -1.0], &mask(&[true, false, true])).unwrap();
        for _ in 0..1_000_000 {
            assert_ne!(sample_action(&masked, &mut rng), 1);
        }
    }

    #[test]
    fn nullify_on_minimal_env() {
        // base = (0.0005 prog, 0.9995 hack)
        let env = MinimalEnv::new(0.6, 0.99, 0.5);
        let base = ActionDistribution::unmasked(vec![0.0005, 0.9995]).unwrap();
        let law = posthoc_filter(&base, &env.filter_mask(), FilterMode::Nullify).unwrap();
        let expected_return = law.action_mass[MinimalEnv::PROG] * 0.6;
        assert!((expected_return - 0.0003).abs() < 1e-12);
        assert!((law.noop_mass - 0.9995).abs() < 1e-12);
    }

    #[test]
    fn redirect_on_chain_with_hack_policy() {
        let mut env = ChainEnv::new(ChainParams::default());
        let mut rng = CounterRng::new(1);
        let hack = env.hack();
        let mut probs = vec![0.0; 6];
        probs[hack] = 1.0;
        let base = ActionDistribution::unmasked(probs).unwrap();
        let mut ret = 0.0;
        let mut discount = 1.0;
        while !env.is_terminal() {
            let choice = sample_filtered(&base, &env.filter_mask(), FilterMode::RedirectLowest, &mut rng).unwrap();
            let FilterChoice::Act(a) = choice else { panic!("redirect never no-ops") };
            ret += discount * env.step(a, &mut rng).unwrap().reward;
            discount *= 0.99;
        }
        // 0.6 * (1 - 0.99^5) / 0.01
        assert!((ret - 2.940_597_006).abs() < 1e-9);
    }

    #[test]
    fn filters_are_identity_on_feasible_policies() {
        let m = mask(&[true, false, true]);
        let base = masked_softmax(&[0.3, 9.0, -0.2], &m).unwrap();
        for mode in [FilterMode::Nullify, FilterMode::RedirectLowest, FilterMode::Renormalize] {
            let law = posthoc_filter(&base, &m, mode).unwrap();
            assert_eq!(law.action_mass, base.probs());
            assert_eq!(law.noop_mass, 0.0);
        }
    }

    #[test]
    fn renormalize_fallback() {
        let base = ActionDistribution::unmasked(vec![0.0, 1.0, 0.0]).unwrap();
        let law = posthoc_filter(&base, &mask(&[true, false, true]), FilterMode::Renormalize).unwrap();
        assert!(law.fallback_uniform);
        assert_eq!(law.action_mass, vec![0.5, 0.0, 0.5]);
        assert_eq!(
            posthoc_filter(&base, &mask(&[false, false, false]), FilterMode::Renormalize),
            Err(Error::EmptyFeasibleSet)
        );
    }

    #[test]
    fn tabular_checkpoint_round_trip() {
        let mut p = TabularPolicyParams::zeros(3, 2);
        p.row_mut(1)[0] = 1.5;
        assert_eq!(TabularPolicyParams::from_json(&p.to_json()).unwrap(), p);
        assert!(TabularPolicyParams::from_json(r#"{"num_states":2,"num_actions":2,"logits":[0.0]}"#).is_err());
    }

    #[test]
    fn log_prob_grad_matches_finite_difference() {
        let m = mask(&[true, true, false, true]);
        let z = [0.3, -1.2, 4.0, 0.7];
        let d = masked_softmax(&z, &m).unwrap();
        let g = d.log_prob_grad(1);
        let h = 1e-6;
        for j in 0..4 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let fd = (masked_softmax(&zp, &m).unwrap().prob(1).ln() - masked_softmax(&zm, &m).unwrap().prob(1).ln()) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-7);
            let fd_h = (masked_softmax(&zp, &m).unwrap().entropy() - masked_softmax(&zm, &m).unwrap().entropy()) / (2.0 * h);
            assert!((fd_h - d.entropy_grad()[j]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn masked_entries_are_exactly_zero(logits in proptest::collection::vec(-50.0f64..50.0, 1..12), bits in proptest::collection::vec(any::<bool>(), 12)) {
            let mut bits: Vec<bool> = bits[..logits.len()].to_vec();
            bits[0] = true;
            let m = FeasibleMask::from_bits(bits.clone());
            let d = masked_softmax(&logits, &m).unwrap();
            let total: f64 = d.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (p, b) in d.probs().iter().zip(&bits) {
                if !b { prop_assert_eq!(*p, 0.0); } else { prop_assert!(*p >= 0.0); }
            }
        }

        #[test]
        fn mixing_is_unbiased(seed in any::<u64>(), n in 2usize..7) {
            let mut rng = CounterRng::new(seed);
            let bits: Vec<bool> = (0..n).map(|i| i == 0 || rng.bernoulli(0.7)).collect();
            let m = FeasibleMask::from_bits(bits.clone());
            let logits: Vec<f64> = (0..n).map(|_| 4.0 * rng.gaussian()).collect();
            let base = masked_softmax(&logits, &m).unwrap();
            let frontier = FrontierSet { newly_admissible: (0..n).filter(|&a| bits[a] && rng.bernoulli(0.5)).collect() };
            let mixed = frontier_mix(&base, &frontier, 0.05).unwrap();
            let g: Vec<f64> = (0..n).map(|_| rng.uniform() * 2.0 - 1.0).collect();
            let lhs: f64 = (0..n).filter(|&a| mixed.executed.prob(a) > 0.0)
                .map(|a| mixed.executed.prob(a) * importance_weight(&mixed, a).unwrap() * g[a]).sum();
            let rhs: f64 = (0..n).map(|a| base.prob(a) * g[a]).sum();
            prop_assert!((lhs - rhs).abs() < 1e-10);
            let total: f64 = mixed.executed.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for a in 0..n {
                prop_assert!(bits[a] || mixed.executed.prob(a) == 0.0);
            }
        }
    }
}
