//! Training algorithms and their shared pieces: dual variables, two-timescale
//! step sizes, reward shaping, Lagrangian advantages, and per-episode
//! history.

mod gap;
mod ppo;
mod tabular;

pub use gap::{verify_safety_gap, GapReport};
pub use ppo::{Checkpoint, evaluate_neural, observation, train_ppo, NeuralRun, PpoConfig};
pub use tabular::{
    evaluate_tabular, reinforce_update, rollout_tabular, train_mccpo_tabular, train_tabular, MaskKind, Objective,
    RolloutSpec, StateBaseline, TabularConfig, TabularRun, Trajectory, TrajectoryStep,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EpisodeMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Unconstrained,
    Shaped,
    /// Trains like `Unconstrained`; the filter is applied only at evaluation.
    Posthoc,
    Mccpo,
    /// MC-CPO with `epsilon_min = 0`.
    MccpoNoFrontier,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Unconstrained, Method::Shaped, Method::Posthoc, Method::Mccpo, Method::MccpoNoFrontier];

    pub fn name(self) -> &'static str {
        match self {
            Method::Unconstrained => "unconstrained",
            Method::Shaped => "shaped",
            Method::Posthoc => "posthoc",
            Method::Mccpo => "mccpo",
            Method::MccpoNoFrontier => "mccpo_no_frontier",
        }
    }

    pub fn is_constrained(self) -> bool {
        matches!(self, Method::Mccpo | Method::MccpoNoFrontier)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::ConfigInvalid(format!("unknown method {s:?}")))
    }
}

/// Lagrange multipliers for `(c2, c3, c4)` and their budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    /// Always `>= 0`.
    pub lambdas: [f64; 3],
    pub budgets: [f64; 3],
    pub kappas: [f64; 3],
}

impl DualState {
    pub fn new(budgets: [f64; 3], kappas: [f64; 3]) -> Self {
        Self { lambdas: [0.0; 3], budgets, kappas }
    }
}

/// `lambda_i <- max(0, lambda_i + beta (J_i - d_i))`.
pub fn dual_update(dual: &DualState, measured_costs: [f64; 3], beta: f64) -> DualState {
    let mut out = *dual;
    for i in 0..3 {
        out.lambdas[i] = (dual.lambdas[i] + beta * (measured_costs[i] - dual.budgets[i])).max(0.0);
    }
    out
}

/// `alpha_k = alpha0 / (1 + k/offset)^p_alpha`, likewise for `beta_k`.
/// Requires `0.5 < p_alpha <= 1` and `p_alpha < p_beta <= 1`, which makes
/// both sequences square-summable but not summable and sends
/// `beta_k / alpha_k` to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSizeSchedule {
    pub alpha0: f64,
    pub beta0: f64,
    pub p_alpha: f64,
    pub p_beta: f64,
    pub offset: f64,
}

impl Default for StepSizeSchedule {
    fn default() -> Self {
        Self { alpha0: 1.0, beta0: 0.01, p_alpha: 0.6, p_beta: 0.9, offset: 1000.0 }
    }
}

impl StepSizeSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.p_alpha > 0.5 && self.p_alpha <= 1.0 && self.p_beta > self.p_alpha && self.p_beta <= 1.0;
        if !ok {
            return Err(Error::InvalidExponents { p_alpha: self.p_alpha, p_beta: self.p_beta });
        }
        if !(self.alpha0 > 0.0 && self.beta0 >= 0.0 && self.offset > 0.0) {
            return Err(Error::ConfigInvalid("step sizes need alpha0 > 0, beta0 >= 0, offset > 0".into()));
        }
        Ok(())
    }
}

pub fn step_sizes(schedule: &StepSizeSchedule, k: u64) -> Result<(f64, f64)> {
    schedule.validate()?;
    let base = 1.0 + k as f64 / schedule.offset;
    Ok((schedule.alpha0 / base.powf(schedule.p_alpha), schedule.beta0 / base.powf(schedule.p_beta)))
}

pub fn reward_shape(r: f64, c2: f64, c4: f64, alpha2: f64, alpha4: f64) -> f64 {
    r - alpha2 * c2 - alpha4 * c4
}

/// Shaping coefficients for `(c2, c4)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Shaping {
    pub alpha2: f64,
    pub alpha4: f64,
}

impl Default for Shaping {
    fn default() -> Self {
        Self { alpha2: 0.5, alpha4: 1.0 }
    }
}

pub fn lagrangian_advantage(adv_reward: f64, adv_costs: [f64; 3], lambdas: [f64; 3]) -> f64 {
    adv_reward - (0..3).map(|i| lambdas[i] * adv_costs[i]).sum::<f64>()
}

/// One training episode as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub episode: u64,
    pub metrics: EpisodeMetrics,
    /// Multipliers after this episode's dual update.
    pub lambdas: [f64; 3],
}

const HISTORY_HEADER: [&str; 11] = [
    "episode", "return", "j_c2", "j_c3", "j_c4", "pi_hack", "lambda2", "lambda3", "lambda4", "violation",
    "frontier_events",
];

pub fn write_history_csv<W: std::io::Write>(rows: &[HistoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_HEADER)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record(&[
            r.episode.to_string(),
            m.discounted_return.to_string(),
            m.discounted_costs[0].to_string(),
            m.discounted_costs[1].to_string(),
            m.discounted_costs[2].to_string(),
            m.pi_hack.to_string(),
            r.lambdas[0].to_string(),
            r.lambdas[1].to_string(),
            r.lambdas[2].to_string(),
            (m.violated as u8).to_string(),
            m.frontier_events.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the columns written by [`write_history_csv`]; fields not stored in
/// the file are left at their defaults.
pub fn read_history_csv<R: std::io::Read>(input: R) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != HISTORY_HEADER {
        return Err(Error::Parse(format!("unexpected history header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != HISTORY_HEADER.len() {
            return Err(Error::Parse(format!("history row has {} fields", rec.len())));
        }
        let f = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| Error::Parse(format!("column {}: {e}", HISTORY_HEADER[i])))
        };
        let violated = match &rec[9] {
            "0" => false,
            "1" => true,
            other => return Err(Error::Parse(format!("violation flag {other:?}"))),
        };
        let metrics = EpisodeMetrics {
            discounted_return: f(1)?,
            discounted_costs: [f(2)?, f(3)?, f(4)?],
            pi_hack: f(5)?,
            violated,
            frontier_events: rec[10].parse().map_err(|e| Error::Parse(format!("frontier_events: {e}")))?,
            ..Default::default()
        };
        rows.push(HistoryRow {
            episode: rec[0].parse().map_err(|e| Error::Parse(format!("episode: {e}")))?,
            metrics,
            lambdas: [f(6)?, f(7)?, f(8)?],
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_update_examples() {
        let d = DualState { lambdas: [0.1, 0.0, 2.0], budgets: [1.0, 1.0, 1.0], kappas: [0.5; 3] };
        assert_eq!(dual_update(&d, [1.0, 1.0, 1.0], 0.3).lambdas, d.lambdas);
        let next = dual_update(&d, [1.5, 0.2, 1.0], 0.01);
        assert!((next.lambdas[0] - 0.105).abs() < 1e-15);
        assert_eq!(next.lambdas[1], 0.0);
        assert_eq!(next.budgets, d.budgets);
    }

    #[test]
    fn step_size_examples() {
        let s = StepSizeSchedule { alpha0: 0.5, beta0: 0.05, ..Default::default() };
        assert_eq!(step_sizes(&s, 0).unwrap(), (0.5, 0.05));
        let ratio = |k| {
            let (a, b) = step_sizes(&s, k).unwrap();
            b / a
        };
        assert!(ratio(1_000_000) < ratio(1_000));
        let mut prev = f64::INFINITY;
        for k in (0..100_000).step_by(997) {
            assert!(ratio(k) < prev);
            prev = ratio(k);
        }
        for (pa, pb) in [(0.6, 0.6), (0.6, 0.5), (0.5, 0.9), (0.7, 1.1)] {
            let bad = StepSizeSchedule { p_alpha: pa, p_beta: pb, ..s };
            assert_eq!(step_sizes(&bad, 3), Err(Error::InvalidExponents { p_alpha: pa, p_beta: pb }));
        }
    }

    #[test]
    fn shaping_and_lagrangian_examples() {
        assert_eq!(reward_shape(1.0, 1.0, 1.0, 0.5, 1.0), -0.5);
        assert_eq!(reward_shape(0.7, 0.0, 0.0, 0.5, 1.0), 0.7);
        assert!(reward_shape(1.0, 1.0, 0.0, 0.5, 1.0) < reward_shape(0.6, 0.0, 0.0, 0.5, 1.0));
        assert_eq!(lagrangian_advantage(1.3, [4.0, 5.0, 6.0], [0.0; 3]), 1.3);
        assert_eq!(lagrangian_advantage(1.0, [1.0; 3], [1.0; 3]), -2.0);
        assert_eq!(lagrangian_advantage(0.4, [0.0; 3], [3.0, 1.0, 9.0]), 0.4);
    }

    #[test]
    fn history_csv_round_trip() {
        let rows: Vec<HistoryRow> = (0..3)
            .map(|i| HistoryRow {
                episode: i,
                metrics: EpisodeMetrics {
                    discounted_return: 0.1 * i as f64,
                    discounted_costs: [1.0, 0.5, 0.25],
                    violated: i % 2 == 1,
                    pi_hack: 0.3,
                    frontier_events: 2,
                    ..Default::default()
                },
                lambdas: [0.01, 0.0, 1.5],
            })
            .collect();
        let mut buf = Vec::new();
        write_history_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("episode,return,j_c2,j_c3,j_c4,pi_hack,lambda2,lambda3,lambda4,violation,frontier_events\n"));
        assert_eq!(read_history_csv(buf.as_slice()).unwrap(), rows);
        assert!(read_history_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }
}
