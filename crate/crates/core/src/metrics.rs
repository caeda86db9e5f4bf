//! Episode metrics, the reward hacking severity index, constraint
//! satisfaction, and cross-seed statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-episode measurements recorded during training or evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub discounted_return: f64,
    /// `(J_c2, J_c3, J_c4)`, each `>= 0`.
    pub discounted_costs: [f64; 3],
    /// An action outside the filter mask was executed.
    pub violated: bool,
    pub mastery_gain: f64,
    /// Steps at which the frontier was non-empty; at most the horizon.
    pub frontier_events: u32,
    /// Mean base-policy probability of the hack action over visited states.
    pub pi_hack: f64,
    /// Executed actions that were outside the prerequisite-feasible set.
    pub infeasible_actions: u32,
    pub steps: u32,
}

pub fn discounted_sum(values: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut g = 1.0;
    for v in values {
        acc += g * v;
        g *= gamma;
    }
    acc
}

/// `(v_pi / v_star) * sqrt(mean_i (J_ci / d_i^max)^2)` over the supplied
/// constraints. Values above `max_i v_i` cannot occur; `v_i > 1` only when a
/// policy exceeds the baseline cost.
pub fn rhsi_normalized(v_pi: f64, v_star: f64, costs: &[f64], d_max: &[f64]) -> Result<f64> {
    if v_star == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    if costs.len() != d_max.len() {
        return Err(Error::DimensionMismatch { expected: d_max.len(), actual: costs.len() });
    }
    if costs.is_empty() {
        return Err(Error::DegenerateSample("no constraints"));
    }
    if d_max.iter().any(|&d| d <= 0.0) {
        return Err(Error::DegenerateSample("non-positive cost normalizer"));
    }
    let ms = costs.iter().zip(d_max).map(|(j, d)| (j / d).powi(2)).sum::<f64>() / costs.len() as f64;
    Ok(v_pi / v_star * ms.sqrt())
}

/// `v_pi * sqrt(mean_i J_ci^2)`: the normalized form with unit normalizers.
/// Only meaningful as a relative indicator between runs.
pub fn rhsi_raw(v_pi: f64, costs: &[f64]) -> f64 {
    if costs.is_empty() {
        return 0.0;
    }
    let ms = costs.iter().map(|j| j * j).sum::<f64>() / costs.len() as f64;
    v_pi * ms.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Satisfaction {
    pub per_constraint: [bool; 3],
    pub all: bool,
}

/// `J_i <= (1 + tau) d_i` for each constraint.
pub fn constraint_satisfied(costs: [f64; 3], budgets: [f64; 3], tau: f64) -> Satisfaction {
    let per_constraint = std::array::from_fn(|i| costs[i] <= (1.0 + tau) * budgets[i]);
    Satisfaction { per_constraint, all: per_constraint.iter().all(|&b| b) }
}

/// Sample mean and `n - 1` standard deviation; std is 0 for fewer than two points.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn sample_var(xs: &[f64]) -> f64 {
    let (_, s) = mean_std(xs);
    s * s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub dof: f64,
    pub significant_at_0_01: bool,
}

/// Two-sided 0.01 critical values of Student's t, rounded up.
const T_CRIT_001: [(u32, f64); 33] = [
    (1, 63.657), (2, 9.925), (3, 5.841), (4, 4.605), (5, 4.033), (6, 3.708), (7, 3.500), (8, 3.356),
    (9, 3.250), (10, 3.170), (11, 3.106), (12, 3.055), (13, 3.013), (14, 2.977), (15, 2.947),
    (16, 2.921), (17, 2.899), (18, 2.879), (19, 2.861), (20, 2.846), (21, 2.832), (22, 2.819),
    (23, 2.808), (24, 2.797), (25, 2.788), (26, 2.779), (27, 2.771), (28, 2.764), (29, 2.757),
    (30, 2.750), (40, 2.705), (60, 2.661), (120, 2.618),
];

/// Critical value at the largest tabulated dof not exceeding `dof`; since the
/// critical value falls with dof this never overstates significance.
pub fn t_critical_001(dof: f64) -> f64 {
    let d = dof.floor().max(1.0);
    T_CRIT_001.iter().rev().find(|(k, _)| (*k as f64) <= d).map(|(_, c)| *c).unwrap_or(T_CRIT_001[0].1)
}

pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::DegenerateSample("welch test needs two points per sample"));
    }
    let (ma, _) = mean_std(a);
    let (mb, _) = mean_std(b);
    let qa = sample_var(a) / a.len() as f64;
    let qb = sample_var(b) / b.len() as f64;
    let se2 = qa + qb;
    if se2 <= 0.0 {
        return Err(Error::DegenerateSample("both samples have zero variance"));
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (qa * qa / (a.len() - 1) as f64 + qb * qb / (b.len() - 1) as f64);
    Ok(WelchResult { t, dof, significant_at_0_01: t.abs() > t_critical_001(dof) })
}

pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() + b.len() < 3 || a.is_empty() || b.is_empty() {
        return Err(Error::DegenerateSample("cohen's d needs at least three points"));
    }
    let (ma, _) = mean_std(a);
    let (mb, _) = mean_std(b);
    let pooled = ((a.len() - 1) as f64 * sample_var(a) + (b.len() - 1) as f64 * sample_var(b))
        / (a.len() + b.len() - 2) as f64;
    if pooled <= 0.0 {
        return Err(Error::DegenerateSample("pooled standard deviation is zero"));
    }
    Ok((ma - mb) / pooled.sqrt())
}

/// Mean and std of the trailing `last_n` values.
pub fn window_mean_std(values: &[f64], last_n: usize) -> Result<(f64, f64)> {
    if values.len() < last_n || last_n == 0 {
        return Err(Error::InsufficientHistory { len: values.len(), needed: last_n.max(1) });
    }
    Ok(mean_std(&values[values.len() - last_n..]))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Self { mean, std }
    }
}

/// Trailing-window summary of an episode history.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WindowSummary {
    pub discounted_return: MeanStd,
    pub discounted_costs: [MeanStd; 3],
    pub violation_rate: f64,
    pub pi_hack: MeanStd,
    /// Frontier events per step.
    pub frontier_rate: f64,
    pub mastery_gain: MeanStd,
}

pub fn aggregate_window(history: &[EpisodeMetrics], last_n: usize) -> Result<WindowSummary> {
    if history.len() < last_n || last_n == 0 {
        return Err(Error::InsufficientHistory { len: history.len(), needed: last_n.max(1) });
    }
    Ok(summarize(&history[history.len() - last_n..]))
}

pub fn summarize(episodes: &[EpisodeMetrics]) -> WindowSummary {
    let col = |f: &dyn Fn(&EpisodeMetrics) -> f64| MeanStd::of(&episodes.iter().map(f).collect::<Vec<_>>());
    let n = episodes.len().max(1) as f64;
    let steps: u64 = episodes.iter().map(|e| e.steps as u64).sum();
    let events: u64 = episodes.iter().map(|e| e.frontier_events as u64).sum();
    WindowSummary {
        discounted_return: col(&|e| e.discounted_return),
        discounted_costs: std::array::from_fn(|i| col(&|e| e.discounted_costs[i])),
        violation_rate: episodes.iter().filter(|e| e.violated).count() as f64 / n,
        pi_hack: col(&|e| e.pi_hack),
        frontier_rate: if steps == 0 { 0.0 } else { events as f64 / steps as f64 },
        mastery_gain: col(&|e| e.mastery_gain),
    }
}

/// Final numbers of one (method, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_return: f64,
    pub final_costs: [f64; 3],
    pub pi_hack: f64,
    pub violation_rate: f64,
    pub frontier_rate: f64,
    pub infeasible_actions: u64,
    pub satisfied: bool,
    pub rhsi_normalized: Option<f64>,
    pub rhsi_raw: f64,
    pub lambdas: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub final_return: MeanStd,
    pub final_costs: [MeanStd; 3],
    pub pi_hack: MeanStd,
    pub violation_rate: MeanStd,
    pub frontier_rate: MeanStd,
    /// Fraction of seeds whose constraints were all satisfied.
    pub satisfaction_rate: f64,
    pub rhsi_normalized: Option<MeanStd>,
    pub rhsi_raw: MeanStd,
    pub infeasible_actions: u64,
    pub seeds: Vec<SeedResult>,
    /// `(seed, message)` for runs that failed.
    pub failures: Vec<(u64, String)>,
}

impl MethodReport {
    pub fn from_seeds(method: &str, seeds: Vec<SeedResult>, failures: Vec<(u64, String)>) -> Self {
        let col = |f: &dyn Fn(&SeedResult) -> f64| MeanStd::of(&seeds.iter().map(f).collect::<Vec<_>>());
        let rhsi: Vec<f64> = seeds.iter().filter_map(|s| s.rhsi_normalized).collect();
        let n = seeds.len().max(1) as f64;
        Self {
            method: method.to_string(),
            final_return: col(&|s| s.final_return),
            final_costs: std::array::from_fn(|i| col(&|s| s.final_costs[i])),
            pi_hack: col(&|s| s.pi_hack),
            violation_rate: col(&|s| s.violation_rate),
            frontier_rate: col(&|s| s.frontier_rate),
            satisfaction_rate: seeds.iter().filter(|s| s.satisfied).count() as f64 / n,
            rhsi_normalized: (rhsi.len() == seeds.len() && !rhsi.is_empty()).then(|| MeanStd::of(&rhsi)),
            rhsi_raw: col(&|s| s.rhsi_raw),
            infeasible_actions: seeds.iter().map(|s| s.infeasible_actions).sum(),
            seeds,
            failures,
        }
    }

    pub fn returns(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.final_return).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub welch: Option<WelchResult>,
    pub cohens_d: Option<f64>,
}

impl Comparison {
    pub fn of(a: &MethodReport, b: &MethodReport) -> Self {
        let (ra, rb) = (a.returns(), b.returns());
        Self { a: a.method.clone(), b: b.method.clone(), welch: welch_t(&ra, &rb).ok(), cohens_d: cohens_d(&ra, &rb).ok() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub suite: String,
    pub budgets: Option<[f64; 3]>,
    pub methods: Vec<MethodReport>,
    pub comparisons: Vec<Comparison>,
}

impl AggregateReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Flat table: one row per method.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method", "return_mean", "return_std", "j_c2_mean", "j_c2_std", "j_c3_mean", "j_c3_std", "j_c4_mean",
            "j_c4_std", "pi_hack_mean", "pi_hack_std", "violation_rate", "frontier_rate", "satisfaction_rate",
            "rhsi_normalized", "rhsi_raw", "infeasible_actions", "seeds", "failures",
        ])?;
        for m in &self.methods {
            let f = |x: f64| format!("{x}");
            let mut row = vec![m.method.clone(), f(m.final_return.mean), f(m.final_return.std)];
            for c in &m.final_costs {
                row.push(f(c.mean));
                row.push(f(c.std));
            }
            row.extend([
                f(m.pi_hack.mean),
                f(m.pi_hack.std),
                f(m.violation_rate.mean),
                f(m.frontier_rate.mean),
                f(m.satisfaction_rate),
                m.rhsi_normalized.map(|r| f(r.mean)).unwrap_or_default(),
                f(m.rhsi_raw.mean),
                m.infeasible_actions.to_string(),
                m.seeds.len().to_string(),
                m.failures.len().to_string(),
            ]);
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn discounted_sum_examples() {
        assert_eq!(discounted_sum(&[1.0], 0.99), 1.0);
        assert_eq!(discounted_sum(&[0.0; 7], 0.99), 0.0);
        let oracle = 0.6 * (1.0 - 0.99f64.powi(5)) / (1.0 - 0.99);
        assert!((discounted_sum(&[0.6; 5], 0.99) - oracle).abs() < 1e-12);
    }

    #[test]
    fn rhsi_examples() {
        assert_eq!(rhsi_normalized(0.7, 1.0, &[0.0; 3], &[1.0; 3]).unwrap(), 0.0);
        let baseline = [0.9, 19.0, 27.0];
        assert!((rhsi_normalized(34.0, 34.0, &baseline, &baseline).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(rhsi_normalized(1.0, 0.0, &[1.0], &[1.0]), Err(Error::ZeroBaseline));
        assert!(rhsi_normalized(1.0, 1.0, &[1.0], &[0.0]).is_err());
        assert_eq!(rhsi_raw(2.0, &[1.0, 1.0, 1.0]), 2.0);
        assert_eq!(rhsi_raw(5.0, &[0.0; 3]), 0.0);
    }

    #[test]
    fn satisfaction_boundaries() {
        assert!(constraint_satisfied([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 0.1).all);
        let s = constraint_satisfied([1.11, 0.0, 0.0], [1.0, 1.0, 1.0], 0.1);
        assert_eq!(s.per_constraint, [false, true, true]);
        assert!(!s.all);
        assert!(constraint_satisfied([50.0; 3], [1e9; 3], 0.1).all);
    }

    #[test]
    fn welch_and_cohen_fixture() {
        let a = [1.0, 2.0, 3.0];
        let b = [4.0, 6.0, 8.0];
        let w = welch_t(&a, &b).unwrap();
        assert!((w.t - -3.0983866769659336).abs() < 1e-9);
        assert!((w.dof - 2.9411764705882346).abs() < 1e-9);
        assert!(!w.significant_at_0_01);
        assert!((cohens_d(&a, &b).unwrap() - -2.5298221281347035).abs() < 1e-9);

        let a = [0.61, 0.59, 0.605];
        let b = [0.001, 0.0, 0.0012];
        let w = welch_t(&a, &b).unwrap();
        assert!((w.t - 99.81112373766445).abs() < 1e-9);
        assert!((w.dof - 2.0152613163001187).abs() < 1e-9);
        assert!(w.significant_at_0_01);
        assert!((cohens_d(&a, &b).unwrap() - 81.49544127035722).abs() < 1e-9);
    }

    #[test]
    fn welch_degenerate_and_identical() {
        assert_eq!(welch_t(&[1.0, 2.0], &[1.0, 2.0]).unwrap().t, 0.0);
        assert!(welch_t(&[1.0], &[1.0, 2.0]).is_err());
        assert!(welch_t(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(cohens_d(&[1.0, 1.0], &[1.0, 1.0]).is_err());
        // Means 1 and 0 with unit sample std on both sides.
        assert!((cohens_d(&[0.0, 1.0, 2.0], &[-1.0, 0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn critical_table_is_conservative() {
        assert_eq!(t_critical_001(0.3), 63.657);
        assert_eq!(t_critical_001(2.99), 9.925);
        assert_eq!(t_critical_001(35.0), 2.750);
        assert_eq!(t_critical_001(1e6), 2.618);
        for w in T_CRIT_001.windows(2) {
            assert!(w[0].1 > w[1].1);
        }
    }

    #[test]
    fn window_examples() {
        assert_eq!(window_mean_std(&[3.0; 10], 4).unwrap(), (3.0, 0.0));
        let (m, s) = window_mean_std(&[9.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(m, 0.5);
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(window_mean_std(&[1.0], 2), Err(Error::InsufficientHistory { .. })));
        assert!(aggregate_window(&[EpisodeMetrics::default()], 2).is_err());
    }

    #[test]
    fn report_csv_has_one_row_per_method() {
        let seed = SeedResult {
            seed: 0,
            final_return: 0.6,
            final_costs: [0.0; 3],
            pi_hack: 0.0,
            violation_rate: 0.0,
            frontier_rate: 0.0,
            infeasible_actions: 0,
            satisfied: true,
            rhsi_normalized: Some(0.0),
            rhsi_raw: 0.0,
            lambdas: [0.0; 3],
        };
        let m = MethodReport::from_seeds("mccpo", vec![seed.clone(), seed], vec![]);
        let r = AggregateReport { suite: "s".into(), budgets: None, methods: vec![m], comparisons: vec![] };
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("mccpo,0.6,0,"));
    }

    proptest! {
        #[test]
        fn welch_and_cohen_antisymmetric(a in prop::collection::vec(-10.0f64..10.0, 2..8), b in prop::collection::vec(-10.0f64..10.0, 2..8)) {
            if let (Ok(x), Ok(y)) = (welch_t(&a, &b), welch_t(&b, &a)) {
                prop_assert!((x.t + y.t).abs() < 1e-9 * (1.0 + x.t.abs()));
                prop_assert!((x.dof - y.dof).abs() < 1e-9 * (1.0 + x.dof));
            }
            if let (Ok(x), Ok(y)) = (cohens_d(&a, &b), cohens_d(&b, &a)) {
                prop_assert!((x + y).abs() < 1e-9 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn satisfaction_monotone(c in prop::array::uniform3(0.0f64..5.0), d in prop::array::uniform3(0.0f64..5.0), shrink in prop::array::uniform3(0.0f64..1.0)) {
            let before = constraint_satisfied(c, d, 0.1);
            let lower = std::array::from_fn(|i| c[i] * shrink[i]);
            let after = constraint_satisfied(lower, d, 0.1);
            for i in 0..3 {
                prop_assert!(!before.per_constraint[i] || after.per_constraint[i]);
            }
        }

        #[test]
        fn discounted_sum_linear(x in prop::collection::vec(-3.0f64..3.0, 0..12), k in -4.0f64..4.0) {
            let y: Vec<f64> = x.iter().map(|v| v * 0.5 - 1.0).collect();
            let lhs = discounted_sum(&x.iter().zip(&y).map(|(a, b)| k * a + b).collect::<Vec<_>>(), 0.95);
            let rhs = k * discounted_sum(&x, 0.95) + discounted_sum(&y, 0.95);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn rhsi_bounded_by_max_ratio(j in prop::array::uniform3(0.0f64..3.0), d in prop::array::uniform3(0.1f64..3.0), v in 0.0f64..1.0) {
            let r = rhsi_normalized(v, 1.0, &j, &d).unwrap();
            let max = (0..3).map(|i| j[i] / d[i]).fold(0.0, f64::max);
            prop_assert!(r >= 0.0 && r <= max + 1e-12);
        }
    }
}
