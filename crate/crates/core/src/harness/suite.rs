use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{BuiltEnv, ExperimentConfig};
use crate::envs::{Environment, TabularEnv};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_window, constraint_satisfied, rhsi_normalized, rhsi_raw, summarize, AggregateReport, Comparison,
    EpisodeMetrics, MethodReport, SeedResult, WindowSummary,
};
use crate::neural::MlpParams;
use crate::policy::TabularPolicyParams;
use crate::rng::CounterRng;
use crate::train::{
    evaluate_neural, evaluate_tabular, train_ppo, train_tabular, write_history_csv, Checkpoint, HistoryRow,
    MaskKind, Method,
};

/// Cross-seed means of the unconstrained baseline's evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub seeds: usize,
    pub return_mean: f64,
    pub cost_means: [f64; 3],
}

impl BaselineSummary {
    pub fn from_evals(evals: &[WindowSummary]) -> Self {
        let n = evals.len().max(1) as f64;
        Self {
            seeds: evals.len(),
            return_mean: evals.iter().map(|e| e.discounted_return.mean).sum::<f64>() / n,
            cost_means: std::array::from_fn(|i| evals.iter().map(|e| e.discounted_costs[i].mean).sum::<f64>() / n),
        }
    }
}

/// `d_i = kappa_i * mean J_ci` of the baseline.
pub fn derive_budgets(baseline: &BaselineSummary, kappas: [f64; 3]) -> Result<[f64; 3]> {
    if baseline.seeds == 0 || baseline.cost_means.iter().any(|c| !c.is_finite()) {
        return Err(Error::MissingBaseline);
    }
    if let Some(k) = kappas.iter().find(|k| !(**k > 0.0 && **k < 1.0)) {
        return Err(Error::ConfigInvalid(format!("kappa {k} outside (0, 1)")));
    }
    Ok(std::array::from_fn(|i| kappas[i] * baseline.cost_means[i]))
}

/// Contents of `budgets.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetFile {
    pub baseline_hash: String,
    pub baseline: BaselineSummary,
    pub kappas: [f64; 3],
    pub budgets: [f64; 3],
    /// Budgets came from the config rather than from `kappas`.
    pub explicit: bool,
}

impl BudgetFile {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Per-run artifact written next to the history CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub suite: String,
    pub method: Method,
    pub seed: u64,
    pub history_path: PathBuf,
    pub result: Option<SeedResult>,
    pub failure: Option<String>,
    pub checkpoints: Vec<Checkpoint>,
    pub wall_time_secs: f64,
    pub build: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; defaults to the number of seeds.
    pub jobs: Option<usize>,
    pub seed_offset: u64,
    /// Replaces the config's `out_dir`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub report: AggregateReport,
    pub budgets: BudgetFile,
    pub dir: PathBuf,
}

pub fn build_id() -> String {
    format!("mccpo-{}", env!("CARGO_PKG_VERSION"))
}

enum Policy {
    Tabular(TabularPolicyParams),
    Neural(MlpParams),
}

/// What a finished job hands back before budgets are known.
struct Outcome {
    summary: WindowSummary,
    infeasible: u64,
    lambdas: [f64; 3],
    history: Vec<HistoryRow>,
    checkpoints: Vec<Checkpoint>,
    policy: Option<Policy>,
    baseline_eval: Option<WindowSummary>,
}

struct JobResult {
    method: Method,
    seed: u64,
    outcome: std::result::Result<Outcome, String>,
    wall: f64,
}

fn eval_rows(eval: &[EpisodeMetrics]) -> Vec<HistoryRow> {
    eval.iter().enumerate().map(|(i, m)| HistoryRow { episode: i as u64, metrics: *m, lambdas: [0.0; 3] }).collect()
}

fn tabular_job<E: TabularEnv>(
    env: &mut E,
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    budgets: [f64; 3],
    base: Option<&Policy>,
) -> Result<Outcome> {
    let root = CounterRng::new(seed);
    if method == Method::Posthoc {
        let Some(Policy::Tabular(params)) = base else {
            return Err(Error::BaselineMissing(cfg.name.clone()));
        };
        let eval =
            evaluate_tabular(env, params, MaskKind::Unmasked, Some(cfg.filter), cfg.eval_episodes, &mut root.stream(3))?;
        return Ok(Outcome {
            summary: summarize(&eval),
            infeasible: eval.iter().map(|m| m.infeasible_actions as u64).sum(),
            lambdas: [0.0; 3],
            history: eval_rows(&eval),
            checkpoints: Vec::new(),
            policy: None,
            baseline_eval: None,
        });
    }
    let run = train_tabular(env, method, &cfg.tabular_config(budgets), &mut root.stream(1))?;
    let window: Vec<EpisodeMetrics> = run.history.iter().map(|r| r.metrics).collect();
    let summary = aggregate_window(&window, cfg.final_window)?;
    let baseline_eval = if method == Method::Unconstrained {
        let eval = evaluate_tabular(
            env,
            &run.params,
            MaskKind::Unmasked,
            None,
            cfg.baseline_eval_episodes,
            &mut root.stream(2),
        )?;
        Some(summarize(&eval))
    } else {
        None
    };
    Ok(Outcome {
        summary,
        infeasible: run.infeasible_actions,
        lambdas: run.dual.lambdas,
        history: run.history,
        checkpoints: Vec::new(),
        policy: (method == Method::Unconstrained).then_some(Policy::Tabular(run.params)),
        baseline_eval,
    })
}

fn neural_job<E: Environment>(
    env: &mut E,
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    budgets: [f64; 3],
    base: Option<&Policy>,
) -> Result<Outcome> {
    let ppo = cfg.ppo_config(budgets);
    if method == Method::Posthoc {
        let Some(Policy::Neural(params)) = base else {
            return Err(Error::BaselineMissing(cfg.name.clone()));
        };
        let rng = &mut CounterRng::new(seed).stream(3);
        let eval = evaluate_neural(env, params, ppo.eval_episodes, ppo.obs_noise, Some(cfg.filter), rng)?;
        return Ok(Outcome {
            summary: summarize(&eval),
            infeasible: eval.iter().map(|m| m.infeasible_actions as u64).sum(),
            lambdas: [0.0; 3],
            history: eval_rows(&eval),
            checkpoints: Vec::new(),
            policy: None,
            baseline_eval: None,
        });
    }
    let run = train_ppo(env, method, &ppo, seed)?;
    let baseline_eval = if method == Method::Unconstrained {
        let rng = &mut CounterRng::new(seed).stream(2);
        Some(summarize(&evaluate_neural(env, &run.params, cfg.baseline_eval_episodes, 0.0, None, rng)?))
    } else {
        None
    };
    Ok(Outcome {
        summary: summarize(&run.final_eval),
        infeasible: run.infeasible_actions,
        lambdas: run.dual.lambdas,
        history: run.history,
        checkpoints: run.checkpoints,
        policy: (method == Method::Unconstrained).then_some(Policy::Neural(run.params)),
        baseline_eval,
    })
}

fn run_job(cfg: &ExperimentConfig, method: Method, seed: u64, budgets: [f64; 3], base: Option<&Policy>) -> JobResult {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<Outcome> {
        match cfg.env.build()? {
            BuiltEnv::Minimal(mut env) => tabular_job(&mut env, cfg, method, seed, budgets, base),
            BuiltEnv::Chain(mut env) => tabular_job(&mut env, cfg, method, seed, budgets, base),
            BuiltEnv::Tutoring(mut env) => neural_job(&mut env, cfg, method, seed, budgets, base),
        }
    }));
    let outcome = match outcome {
        Ok(Ok(o)) => Ok(o),
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "job panicked".into())),
    };
    JobResult { method, seed, outcome, wall: start.elapsed().as_secs_f64() }
}

/// Constraints the baseline actually incurs; RHSI is taken over these only.
fn active(baseline: &BaselineSummary) -> Vec<usize> {
    (0..3).filter(|&i| baseline.cost_means[i] > 0.0).collect()
}

fn seed_result(seed: u64, o: &Outcome, budgets: &BudgetFile, tau: f64) -> SeedResult {
    let s = &o.summary;
    let costs: [f64; 3] = std::array::from_fn(|i| s.discounted_costs[i].mean);
    let ret = s.discounted_return.mean;
    let idx = active(&budgets.baseline);
    let normalized = (budgets.baseline.seeds > 0 && !idx.is_empty())
        .then(|| {
            let c: Vec<f64> = idx.iter().map(|&i| costs[i]).collect();
            let d: Vec<f64> = idx.iter().map(|&i| budgets.baseline.cost_means[i]).collect();
            rhsi_normalized(ret, budgets.baseline.return_mean, &c, &d).ok()
        })
        .flatten();
    SeedResult {
        seed,
        final_return: ret,
        final_costs: costs,
        pi_hack: s.pi_hack.mean,
        violation_rate: s.violation_rate,
        frontier_rate: s.frontier_rate,
        infeasible_actions: o.infeasible,
        satisfied: constraint_satisfied(costs, budgets.budgets, tau).all,
        rhsi_normalized: normalized,
        rhsi_raw: rhsi_raw(ret, &costs),
        lambdas: o.lambdas,
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| Error::Io(e.to_string()))
}

fn method_dir(dir: &Path, method: Method, seed: u64) -> PathBuf {
    dir.join(method.name()).join(seed.to_string())
}

fn persist(dir: &Path, cfg: &ExperimentConfig, job: &JobResult, result: Option<SeedResult>) -> Result<()> {
    let run_dir = method_dir(dir, job.method, job.seed);
    fs::create_dir_all(&run_dir)?;
    let history_path = run_dir.join("history.csv");
    let (checkpoints, failure) = match &job.outcome {
        Ok(o) => {
            write_history_csv(&o.history, fs::File::create(&history_path)?)?;
            (o.checkpoints.clone(), None)
        }
        Err(e) => (Vec::new(), Some(e.clone())),
    };
    let record = RunRecord {
        config_hash: cfg.hash(),
        suite: cfg.name.clone(),
        method: job.method,
        seed: job.seed,
        history_path: history_path.strip_prefix(dir).unwrap_or(&history_path).to_path_buf(),
        result,
        failure,
        checkpoints,
        wall_time_secs: job.wall,
        build: build_id(),
    };
    fs::write(run_dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

/// Per-method reports in config order plus every pairwise comparison.
pub fn aggregate(suite: &str, budgets: Option<[f64; 3]>, records: &[RunRecord], order: &[Method]) -> AggregateReport {
    let methods: Vec<MethodReport> = order
        .iter()
        .map(|&m| {
            let mine: Vec<&RunRecord> = records.iter().filter(|r| r.method == m).collect();
            let seeds = mine.iter().filter_map(|r| r.result.clone()).collect();
            let failures = mine
                .iter()
                .filter_map(|r| r.failure.as_ref().map(|f| (r.seed, f.clone())))
                .collect();
            MethodReport::from_seeds(m.name(), seeds, failures)
        })
        .collect();
    let mut comparisons = Vec::new();
    for i in 0..methods.len() {
        for j in i + 1..methods.len() {
            comparisons.push(Comparison::of(&methods[i], &methods[j]));
        }
    }
    AggregateReport { suite: suite.to_string(), budgets, methods, comparisons }
}

fn write_report(dir: &Path, report: &AggregateReport) -> Result<()> {
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("report.csv"), report.to_csv()?)?;
    Ok(())
}

/// Runs every (method, seed) job of `cfg` and writes all artifacts.
pub fn run_suite(cfg: &ExperimentConfig) -> Result<AggregateReport> {
    Ok(run_suite_with(cfg, &RunOptions::default(), None)?.report)
}

/// As [`run_suite`], optionally reusing a baseline measured elsewhere.
pub fn run_suite_with(cfg: &ExperimentConfig, opts: &RunOptions, baseline: Option<BudgetFile>) -> Result<SuiteOutcome> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if let Some(out) = &opts.out_dir {
        cfg.out_dir = out.clone();
    }
    cfg.seeds = cfg.seeds.iter().map(|s| s + opts.seed_offset).collect();
    let dir = cfg.suite_dir();
    fs::create_dir_all(&dir)?;
    let pool = pool(opts.jobs.unwrap_or(cfg.seeds.len()))?;
    let budget_path = dir.join("budgets.json");
    let cached = baseline.or_else(|| {
        BudgetFile::read(&budget_path).ok().filter(|b| b.baseline_hash == cfg.baseline_hash())
    });

    let needs_policy = cfg.methods.iter().any(|m| matches!(m, Method::Unconstrained | Method::Posthoc));
    let mut jobs: Vec<JobResult> = Vec::new();
    if needs_policy || cached.is_none() {
        let seeds = cfg.seeds.clone();
        let c = &cfg;
        jobs = pool.install(|| {
            seeds.par_iter().map(|&s| run_job(c, Method::Unconstrained, s, [0.0; 3], None)).collect()
        });
    }
    let budgets = match cached {
        Some(b) => BudgetFile { budgets: cfg.budgets.unwrap_or(b.budgets), explicit: cfg.budgets.is_some(), ..b },
        None => {
            let evals: Vec<WindowSummary> =
                jobs.iter().filter_map(|j| j.outcome.as_ref().ok().and_then(|o| o.baseline_eval)).collect();
            let baseline = BaselineSummary::from_evals(&evals);
            let needs_budgets = cfg.methods.iter().any(|m| m.is_constrained()) && cfg.budgets.is_none();
            let budgets = match cfg.budgets {
                Some(b) => b,
                None if evals.is_empty() && needs_budgets => return Err(Error::BaselineMissing(cfg.name.clone())),
                None if evals.is_empty() => [0.0; 3],
                None => derive_budgets(&baseline, cfg.kappas)?,
            };
            BudgetFile {
                baseline_hash: cfg.baseline_hash(),
                baseline,
                kappas: cfg.kappas,
                budgets,
                explicit: cfg.budgets.is_some(),
            }
        }
    };
    fs::write(&budget_path, serde_json::to_string_pretty(&budgets)?)?;

    let rest: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .filter(|m| **m != Method::Unconstrained)
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let later: Vec<JobResult> = {
        let (c, b, base_jobs) = (&cfg, budgets.budgets, &jobs);
        pool.install(|| {
            rest.par_iter()
                .map(|&(m, s)| {
                    let base = base_jobs
                        .iter()
                        .find(|j| j.seed == s)
                        .and_then(|j| j.outcome.as_ref().ok())
                        .and_then(|o| o.policy.as_ref());
                    run_job(c, m, s, b, base)
                })
                .collect()
        })
    };
    if !cfg.methods.contains(&Method::Unconstrained) {
        jobs.clear();
    }
    jobs.extend(later);

    let mut records = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let result = job.outcome.as_ref().ok().map(|o| seed_result(job.seed, o, &budgets, cfg.tau));
        persist(&dir, &cfg, job, result)?;
        records.push(read_record(&method_dir(&dir, job.method, job.seed).join("run.json"))?);
    }
    let report = aggregate(&cfg.name, Some(budgets.budgets), &records, &cfg.methods);
    write_report(&dir, &report)?;
    Ok(SuiteOutcome { report, budgets, dir })
}

fn read_record(path: &Path) -> Result<RunRecord> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Rebuilds the report of a finished suite directory from its run records.
pub fn load_report(dir: &Path) -> Result<AggregateReport> {
    let mut records = Vec::new();
    for method in Method::ALL {
        let mdir = dir.join(method.name());
        let Ok(entries) = fs::read_dir(&mdir) else { continue };
        let mut seeds: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path().join("run.json"))).collect();
        seeds.sort();
        for path in seeds.into_iter().filter(|p| p.is_file()) {
            records.push(read_record(&path)?);
        }
    }
    if records.is_empty() {
        return Err(Error::Io(format!("no run records under {}", dir.display())));
    }
    records.sort_by_key(|r| r.seed);
    let order: Vec<Method> = Method::ALL.into_iter().filter(|m| records.iter().any(|r| r.method == *m)).collect();
    let suite = records[0].suite.clone();
    let budgets = BudgetFile::read(&dir.join("budgets.json")).ok().map(|b| b.budgets);
    let report = aggregate(&suite, budgets, &records, &order);
    write_report(dir, &report)?;
    Ok(report)
}

/// Fixed-width table of the headline numbers, one row per method.
pub fn render_report(report: &AggregateReport) -> String {
    let mut out = format!("suite {}", report.suite);
    if let Some(b) = report.budgets {
        out += &format!("  budgets [{:.4}, {:.4}, {:.4}]", b[0], b[1], b[2]);
    }
    out += &format!(
        "\n{:<18} {:>18} {:>10} {:>10} {:>10} {:>8} {:>8} {:>6} {:>8} {:>10} {:>6}\n",
        "method", "return", "J_c2", "J_c3", "J_c4", "pi_hack", "viol", "sat", "rhsi", "rhsi_raw", "fail"
    );
    for m in &report.methods {
        out += &format!(
            "{:<18} {:>9.4}±{:<8.4} {:>10.4} {:>10.4} {:>10.4} {:>8.4} {:>8.4} {:>6.2} {:>8} {:>10.4} {:>6}\n",
            m.method,
            m.final_return.mean,
            m.final_return.std,
            m.final_costs[0].mean,
            m.final_costs[1].mean,
            m.final_costs[2].mean,
            m.pi_hack.mean,
            m.violation_rate.mean,
            m.satisfaction_rate,
            m.rhsi_normalized.map(|r| format!("{:.4}", r.mean)).unwrap_or_else(|| "-".into()),
            m.rhsi_raw.mean,
            m.failures.len(),
        );
    }
    for c in &report.comparisons {
        if let (Some(w), Some(d)) = (c.welch, c.cohens_d) {
            out += &format!(
                "{} vs {}: t={:.2} dof={:.2} d={:.2} p<0.01={}\n",
                c.a, c.b, w.t, w.dof, d, w.significant_at_0_01
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub default_return: f64,
    pub ablated_return: f64,
    /// `ablated - default`.
    pub delta: f64,
    pub report: AggregateReport,
}

/// MC-CPO with and without frontier mixing on the same seeds.
pub fn ablate_frontier(cfg: &ExperimentConfig, opts: &RunOptions, baseline: Option<BudgetFile>) -> Result<AblationReport> {
    let mut c = cfg.clone();
    c.name = format!("{}_frontier_ablation", cfg.name);
    c.methods = vec![Method::Mccpo, Method::MccpoNoFrontier];
    let out = run_suite_with(&c, opts, baseline)?;
    let mean = |m: Method| {
        out.report
            .method(m.name())
            .filter(|r| !r.seeds.is_empty())
            .map(|r| r.final_return.mean)
            .ok_or_else(|| Error::DegenerateSample("every ablation seed failed"))
    };
    let (default_return, ablated_return) = (mean(Method::Mccpo)?, mean(Method::MccpoNoFrontier)?);
    let report = AblationReport { default_return, ablated_return, delta: ablated_return - default_return, report: out.report };
    fs::write(out.dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub sigma: f64,
    pub report: AggregateReport,
}

/// One suite per observation-noise level, all sharing the noise-free
/// baseline budgets.
pub fn noise_sweep(cfg: &ExperimentConfig, opts: &RunOptions, baseline: Option<BudgetFile>) -> Result<Vec<NoisePoint>> {
    if cfg.env.is_tabular() || cfg.noise_sigmas.is_empty() {
        return Err(Error::ConfigInvalid("noise sweep needs the tutoring env and noise_sigmas".into()));
    }
    let shared = match baseline {
        Some(b) => b,
        None => {
            let mut c = cfg.clone();
            c.name = format!("{}_baseline", cfg.name);
            c.methods = vec![Method::Unconstrained];
            c.ppo.obs_noise = 0.0;
            c.noise_sigmas.clear();
            run_suite_with(&c, opts, None)?.budgets
        }
    };
    let mut points = Vec::new();
    for &sigma in &cfg.noise_sigmas {
        let mut c = cfg.clone();
        c.name = format!("{}_sigma_{sigma}", cfg.name);
        c.ppo.obs_noise = sigma;
        c.noise_sigmas.clear();
        let out = run_suite_with(&c, opts, Some(shared.clone()))?;
        points.push(NoisePoint { sigma, report: out.report });
    }
    Ok(points)
}
