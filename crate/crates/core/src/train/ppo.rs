//! PPO with a shared-trunk MLP, one critic per signal (reward and each
//! cost), GAE, masked softmax, and optional frontier mixing with
//! importance-corrected surrogates.

use serde::{Deserialize, Serialize};

use super::{dual_update, lagrangian_advantage, reward_shape, step_sizes, DualState, HistoryRow, Method, Shaping, StepSizeSchedule};
use crate::envs::{inject_observation_noise, Environment};
use crate::error::{Error, Result};
use crate::feasibility::{frontier, FeasibleMask};
use crate::metrics::{discounted_sum, summarize, EpisodeMetrics, WindowSummary};
use crate::neural::{gae, ForwardCache, GradientBuffer, MlpParams, MlpShape, OptimizerState};
use crate::policy::{frontier_mix, importance_weight, masked_softmax, sample_action, sample_filtered, FilterChoice, FilterMode};
use crate::rng::CounterRng;

/// Reward critic plus one critic per cost.
const NUM_HEADS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub total_steps: u64,
    /// Whole episodes collected per update.
    pub batch_episodes: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub clip: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    /// Standardize advantages per batch. Off by default: near the dual
    /// equilibrium the Lagrangian advantage gap shrinks and standardizing
    /// re-inflates it, which makes the policy response bang-bang.
    pub normalize_advantages: bool,
    pub hidden: [usize; 2],
    /// `alpha` is the Adam learning rate, `beta` the dual step; `k` counts updates.
    pub schedule: StepSizeSchedule,
    pub epsilon_min: f64,
    pub shaping: Shaping,
    pub budgets: [f64; 3],
    pub kappas: [f64; 3],
    /// Standard deviation of Gaussian noise on observed mastery.
    pub obs_noise: f64,
    pub eval_episodes: usize,
    /// Checkpoint evaluation cadence in environment steps; the final policy
    /// is always evaluated.
    pub eval_every_steps: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            total_steps: 100_000,
            batch_episodes: 20,
            epochs: 10,
            minibatch_size: 250,
            clip: 0.2,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.15,
            max_grad_norm: 0.5,
            normalize_advantages: false,
            hidden: [64, 64],
            schedule: StepSizeSchedule { alpha0: 1e-3, beta0: 0.004, p_alpha: 0.6, p_beta: 0.9, offset: 1000.0 },
            epsilon_min: 0.05,
            shaping: Shaping::default(),
            budgets: [0.0; 3],
            kappas: [0.95, 0.5, 0.85],
            obs_noise: 0.0,
            eval_episodes: 200,
            eval_every_steps: 50_000,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |m: &str| Err(Error::ConfigInvalid(m.into()));
        if self.batch_episodes == 0 || self.epochs == 0 || self.minibatch_size == 0 {
            return bad("batch_episodes, epochs and minibatch_size must be positive");
        }
        if !(self.clip > 0.0) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("clip must be positive and gae_lambda in [0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.epsilon_min) || self.obs_noise < 0.0 {
            return bad("epsilon_min must be in [0, 1) and obs_noise non-negative");
        }
        Ok(())
    }
}

/// Observed (possibly noisy) mastery followed by `t / T`.
pub fn observation<E: Environment + ?Sized>(env: &E, mastery: &[f64]) -> Vec<f64> {
    let mut obs = mastery.to_vec();
    obs.push(env.state().step_index as f64 / env.horizon().max(1) as f64);
    obs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub steps: u64,
    pub summary: WindowSummary,
}

#[derive(Debug, Clone)]
pub struct NeuralRun {
    pub params: MlpParams,
    pub dual: DualState,
    pub history: Vec<HistoryRow>,
    pub checkpoints: Vec<Checkpoint>,
    /// Evaluation episodes of the final policy.
    pub final_eval: Vec<EpisodeMetrics>,
    /// Truly infeasible actions executed in training plus final evaluation.
    pub infeasible_actions: u64,
}

struct Streams {
    env: CounterRng,
    act: CounterRng,
    noise: CounterRng,
    shuffle: CounterRng,
}

#[derive(Default)]
struct Episode {
    obs: Vec<Vec<f64>>,
    masks: Vec<FeasibleMask>,
    actions: Vec<usize>,
    /// Base-policy probability of the taken action at collection time.
    old_prob: Vec<f64>,
    weights: Vec<f64>,
    /// Per head: learning signal, scaled by `1 - gamma`.
    signals: [Vec<f64>; NUM_HEADS],
    values: [Vec<f64>; NUM_HEADS],
    metrics: EpisodeMetrics,
}

struct Sampler {
    epsilon_min: f64,
    obs_noise: f64,
    filter: Option<FilterMode>,
}

fn run_episode<E: Environment + ?Sized>(
    env: &mut E,
    params: &MlpParams,
    sampler: &Sampler,
    signal: &dyn Fn(f64, &[f64; 3]) -> f64,
    act_rng: &mut CounterRng,
    env_rng: &mut CounterRng,
    noise_rng: &mut CounterRng,
) -> Result<Episode> {
    env.reset();
    let gamma = env.gamma();
    let scale = 1.0 - gamma;
    let hack = env.hack_action();
    let mut ep = Episode::default();
    let mut rewards = Vec::with_capacity(env.horizon());
    let mut costs: [Vec<f64>; 3] = Default::default();
    let mut cache = ForwardCache::default();
    let mut prev_mask: Option<FeasibleMask> = None;
    let mut pi_hack = 0.0;
    while !env.is_terminal() {
        let observed = inject_observation_noise(&env.state().mastery, sampler.obs_noise, noise_rng);
        let mask = env.mask_for(&observed);
        let obs = observation(env, observed.values());
        params.forward_cached(&obs, &mut cache)?;
        let base = masked_softmax(&cache.logits, &mask)?;
        let front = frontier(prev_mask.as_ref().unwrap_or(&mask), &mask)?;
        if !front.is_empty() {
            ep.metrics.frontier_events += 1;
        }
        if let Some(h) = hack {
            pi_hack += base.prob(h);
        }
        let true_mask = env.feasible_mask();
        let filter_mask = env.filter_mask();
        let (choice, weight) = match sampler.filter {
            Some(mode) => (sample_filtered(&base, &filter_mask, mode, act_rng)?, 1.0),
            None => {
                let mixed = frontier_mix(&base, &front, sampler.epsilon_min)?;
                let a = sample_action(&mixed.executed, act_rng);
                (FilterChoice::Act(a), importance_weight(&mixed, a)?)
            }
        };
        let out = match choice {
            FilterChoice::Act(a) => {
                ep.metrics.violated |= !filter_mask.is_admissible(a);
                ep.metrics.infeasible_actions += !true_mask.is_admissible(a) as u32;
                ep.actions.push(a);
                ep.old_prob.push(base.prob(a));
                env.step(a, env_rng)?
            }
            FilterChoice::Noop => {
                ep.actions.push(usize::MAX);
                ep.old_prob.push(0.0);
                env.noop()?
            }
        };
        ep.weights.push(weight);
        ep.metrics.mastery_gain += out.mastery_delta;
        rewards.push(out.reward);
        ep.signals[0].push(scale * signal(out.reward, &out.costs));
        for i in 0..3 {
            costs[i].push(out.costs[i]);
            ep.signals[i + 1].push(scale * out.costs[i]);
        }
        for (h, v) in cache.values.iter().enumerate() {
            ep.values[h].push(*v);
        }
        ep.obs.push(obs);
        ep.masks.push(mask.clone());
        prev_mask = Some(mask);
    }
    let m = &mut ep.metrics;
    m.steps = rewards.len() as u32;
    m.discounted_return = discounted_sum(&rewards, gamma);
    m.discounted_costs = std::array::from_fn(|i| discounted_sum(&costs[i], gamma));
    m.pi_hack = if m.steps > 0 { pi_hack / m.steps as f64 } else { 0.0 };
    Ok(ep)
}

/// Frozen base-policy rollouts (no mixing, no updates).
pub fn evaluate_neural<E: Environment + ?Sized>(
    env: &mut E,
    params: &MlpParams,
    episodes: usize,
    obs_noise: f64,
    filter: Option<FilterMode>,
    rng: &mut CounterRng,
) -> Result<Vec<EpisodeMetrics>> {
    let sampler = Sampler { epsilon_min: 0.0, obs_noise, filter };
    let mut act = rng.stream(1);
    let mut env_rng = rng.stream(2);
    let mut noise = rng.stream(3);
    (0..episodes)
        .map(|_| run_episode(env, params, &sampler, &|r, _| r, &mut act, &mut env_rng, &mut noise).map(|e| e.metrics))
        .collect()
}

struct Sample<'a> {
    obs: &'a [f64],
    mask: &'a FeasibleMask,
    action: usize,
    old_prob: f64,
    weight: f64,
    advantage: f64,
    targets: [f64; NUM_HEADS],
}

/// PPO for the unconstrained, shaped, post-hoc (trained unconstrained) and
/// MC-CPO variants. Every variant uses the prerequisite-masked softmax;
/// MC-CPO adds frontier mixing and Lagrangian advantages.
pub fn train_ppo<E: Environment + ?Sized>(env: &mut E, method: Method, cfg: &PpoConfig, seed: u64) -> Result<NeuralRun> {
    cfg.validate()?;
    let root = CounterRng::new(seed);
    let mut streams = Streams { env: root.stream(10), act: root.stream(11), noise: root.stream(12), shuffle: root.stream(13) };
    env.reset();
    let input_dim = env.state().mastery.len() + 1;
    let shape = MlpShape::new(input_dim, cfg.hidden, env.num_actions(), NUM_HEADS);
    let mut params = MlpParams::init(shape, &mut root.stream(14));
    let mut opt = OptimizerState::new(shape.num_params(), cfg.schedule.alpha0);
    let mut dual = DualState::new(cfg.budgets, cfg.kappas);
    let gamma = env.gamma();
    let shaping = cfg.shaping;
    let signal: Box<dyn Fn(f64, &[f64; 3]) -> f64> = match method {
        Method::Shaped => Box::new(move |r, c| reward_shape(r, c[0], c[2], shaping.alpha2, shaping.alpha4)),
        _ => Box::new(|r, _| r),
    };
    let epsilon_min = if method == Method::Mccpo { cfg.epsilon_min } else { 0.0 };
    let sampler = Sampler { epsilon_min, obs_noise: cfg.obs_noise, filter: None };

    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let mut infeasible = 0u64;
    let mut steps = 0u64;
    let mut next_eval = cfg.eval_every_steps;
    let mut grads = GradientBuffer::zeros(&shape);
    let mut cache = ForwardCache::default();
    let mut update = 0u64;
    while steps < cfg.total_steps {
        let (alpha, beta) = step_sizes(&cfg.schedule, update)?;
        let mut batch = Vec::with_capacity(cfg.batch_episodes);
        for _ in 0..cfg.batch_episodes {
            let ep = run_episode(env, &params, &sampler, &*signal, &mut streams.act, &mut streams.env, &mut streams.noise)?;
            steps += ep.metrics.steps as u64;
            infeasible += ep.metrics.infeasible_actions as u64;
            batch.push(ep);
        }

        let lambdas = if method.is_constrained() { dual.lambdas } else { [0.0; 3] };
        // Back to reward units, and divided by 1 + sum(lambda) so the
        // Lagrangian stays on the reward scale as the multipliers grow.
        let adv_scale = 1.0 / ((1.0 - gamma) * (1.0 + lambdas.iter().sum::<f64>()));
        let mut samples = Vec::new();
        for ep in &batch {
            let mut advs: [Vec<f64>; NUM_HEADS] = Default::default();
            for h in 0..NUM_HEADS {
                let mut v = ep.values[h].clone();
                v.push(0.0);
                advs[h] = gae(&ep.signals[h], &v, gamma, cfg.gae_lambda)?;
            }
            for t in 0..ep.actions.len() {
                if ep.actions[t] == usize::MAX {
                    continue;
                }
                let a_costs = [advs[1][t], advs[2][t], advs[3][t]];
                samples.push(Sample {
                    obs: &ep.obs[t],
                    mask: &ep.masks[t],
                    action: ep.actions[t],
                    old_prob: ep.old_prob[t],
                    weight: ep.weights[t],
                    advantage: adv_scale * lagrangian_advantage(advs[0][t], a_costs, lambdas),
                    targets: std::array::from_fn(|h| advs[h][t] + ep.values[h][t]),
                });
            }
        }
        if cfg.normalize_advantages {
            let n = samples.len() as f64;
            let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
            let std = (samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n).sqrt();
            for s in &mut samples {
                s.advantage = (s.advantage - mean) / (std + 1e-8);
            }
        }

        opt.lr = alpha;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..cfg.epochs {
            for i in (1..order.len()).rev() {
                order.swap(i, streams.shuffle.below(i + 1));
            }
            for chunk in order.chunks(cfg.minibatch_size) {
                grads.clear();
                let m = chunk.len() as f64;
                let mut loss = 0.0;
                for &idx in chunk {
                    let s = &samples[idx];
                    params.forward_cached(s.obs, &mut cache)?;
                    let dist = masked_softmax(&cache.logits, s.mask)?;
                    let ratio = dist.prob(s.action) / s.old_prob;
                    let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
                    let surrogate = (ratio * s.advantage).min(clipped * s.advantage);
                    let active = ratio * s.advantage <= clipped * s.advantage;
                    loss -= s.weight * surrogate / m;
                    let mut dlogits = vec![0.0; dist.len()];
                    if active {
                        let coef = -s.weight * s.advantage * ratio / m;
                        for (d, g) in dlogits.iter_mut().zip(dist.log_prob_grad(s.action)) {
                            *d += coef * g;
                        }
                    }
                    loss -= cfg.entropy_coef * dist.entropy() / m;
                    for (d, g) in dlogits.iter_mut().zip(dist.entropy_grad()) {
                        *d -= cfg.entropy_coef * g / m;
                    }
                    let mut dvalues = [0.0; NUM_HEADS];
                    for h in 0..NUM_HEADS {
                        let err = cache.values[h] - s.targets[h];
                        loss += cfg.value_coef * err * err / m;
                        dvalues[h] = 2.0 * cfg.value_coef * err / m;
                    }
                    params.backward(&cache, &dlogits, &dvalues, &mut grads);
                }
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::NonFiniteLoss(update as usize));
                }
                grads.clip_norm(cfg.max_grad_norm);
                opt.step(&mut params.data, &grads.data)?;
            }
        }

        if method.is_constrained() {
            let k = batch.len() as f64;
            let measured = std::array::from_fn(|i| batch.iter().map(|e| e.metrics.discounted_costs[i]).sum::<f64>() / k);
            dual = dual_update(&dual, measured, beta);
        }
        for ep in &batch {
            history.push(HistoryRow { episode: history.len() as u64, metrics: ep.metrics, lambdas: dual.lambdas });
        }
        update += 1;

        if cfg.eval_every_steps > 0 && steps >= next_eval && steps < cfg.total_steps {
            let eval = evaluate_neural(env, &params, cfg.eval_episodes, cfg.obs_noise, None, &mut root.stream(1000 + update))?;
            checkpoints.push(Checkpoint { steps, summary: summarize(&eval) });
            while next_eval <= steps {
                next_eval += cfg.eval_every_steps;
            }
        }
    }
    let final_eval = evaluate_neural(env, &params, cfg.eval_episodes, cfg.obs_noise, None, &mut root.stream(999))?;
    infeasible += final_eval.iter().map(|m| m.infeasible_actions as u64).sum::<u64>();
    checkpoints.push(Checkpoint { steps, summary: summarize(&final_eval) });
    Ok(NeuralRun { params, dual, history, checkpoints, final_eval, infeasible_actions: infeasible })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{TutoringEnv, TutoringParams};
    use crate::feasibility::PrereqGraph;

    fn small_env() -> TutoringEnv {
        TutoringEnv::new(PrereqGraph::layered(6, 2), TutoringParams { horizon: 20, ..Default::default() })
    }

    fn small_cfg() -> PpoConfig {
        PpoConfig { total_steps: 2_000, batch_episodes: 5, minibatch_size: 50, eval_episodes: 10, ..Default::default() }
    }

    #[test]
    fn ppo_is_deterministic_per_seed() {
        let a = train_ppo(&mut small_env(), Method::Mccpo, &small_cfg(), 5).unwrap();
        let b = train_ppo(&mut small_env(), Method::Mccpo, &small_cfg(), 5).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        let c = train_ppo(&mut small_env(), Method::Mccpo, &small_cfg(), 6).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn mccpo_never_executes_infeasible_actions() {
        let run = train_ppo(&mut small_env(), Method::Mccpo, &small_cfg(), 1).unwrap();
        assert_eq!(run.infeasible_actions, 0);
        assert!(run.history.iter().all(|r| r.lambdas.iter().all(|&l| l >= 0.0)));
        assert_eq!(run.history.len(), 100);
    }

    #[test]
    fn unconstrained_ppo_learns_low_effort() {
        let cfg = PpoConfig { total_steps: 20_000, ..small_cfg() };
        let run = train_ppo(&mut small_env(), Method::Unconstrained, &cfg, 0).unwrap();
        let tail = summarize(&run.final_eval);
        assert!(tail.pi_hack.mean > 0.8, "{tail:?}");
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PpoConfig { minibatch_size: 0, ..Default::default() };
        assert!(matches!(train_ppo(&mut small_env(), Method::Mccpo, &cfg, 0), Err(Error::ConfigInvalid(_))));
    }
}
