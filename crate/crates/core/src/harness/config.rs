use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{ChainEnv, ChainParams, MinimalEnv, TutoringEnv, TutoringParams};
use crate::error::{Error, Result};
use crate::feasibility::PrereqGraph;
use crate::policy::FilterMode;
use crate::train::{Method, PpoConfig, TabularConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Minimal {
        #[serde(default = "default_reward_prog")]
        reward_prog: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_theta")]
        theta_min: f64,
    },
    Chain {
        #[serde(default)]
        params: ChainParams,
    },
    Tutoring {
        #[serde(default = "default_concepts")]
        concepts: usize,
        /// Width of the layered default graph.
        #[serde(default = "default_width")]
        layer_width: usize,
        /// JSON prerequisite graph; replaces the layered default.
        #[serde(default)]
        graph_file: Option<PathBuf>,
        #[serde(default)]
        params: TutoringParams,
    },
}

fn default_reward_prog() -> f64 {
    0.6
}
fn default_gamma() -> f64 {
    0.99
}
fn default_theta() -> f64 {
    0.5
}
fn default_concepts() -> usize {
    15
}
fn default_width() -> usize {
    3
}

/// A constructed environment, split by trainer family.
pub enum BuiltEnv {
    Minimal(MinimalEnv),
    Chain(ChainEnv),
    Tutoring(TutoringEnv),
}

impl EnvConfig {
    pub fn is_tabular(&self) -> bool {
        !matches!(self, EnvConfig::Tutoring { .. })
    }

    pub fn build(&self) -> Result<BuiltEnv> {
        Ok(match self {
            EnvConfig::Minimal { reward_prog, gamma, theta_min } => {
                BuiltEnv::Minimal(MinimalEnv::new(*reward_prog, *gamma, *theta_min))
            }
            EnvConfig::Chain { params } => BuiltEnv::Chain(ChainEnv::new(params.clone())),
            EnvConfig::Tutoring { concepts, layer_width, graph_file, params } => {
                let graph = match graph_file {
                    Some(path) => {
                        let text = std::fs::read_to_string(path)
                            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                        PrereqGraph::from_json(&text)?
                    }
                    None => PrereqGraph::layered(*concepts, *layer_width),
                };
                BuiltEnv::Tutoring(TutoringEnv::new(graph, params.clone()))
            }
        })
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.into()));
        match self {
            EnvConfig::Minimal { reward_prog, gamma, .. } => {
                if !(0.0..1.0).contains(gamma) || *gamma == 0.0 {
                    return bad("gamma must be in (0, 1)");
                }
                if !reward_prog.is_finite() {
                    return bad("reward_prog must be finite");
                }
            }
            EnvConfig::Chain { params } => {
                if params.num_concepts == 0 || params.horizon == 0 {
                    return bad("chain needs concepts and a horizon");
                }
                if params.num_concepts > 20 {
                    return bad("chain state space too large for a table");
                }
            }
            EnvConfig::Tutoring { concepts, layer_width, graph_file, params } => {
                if graph_file.is_none() && (*concepts == 0 || *layer_width == 0) {
                    return bad("tutoring needs concepts and a layer width");
                }
                if params.horizon == 0 || !(params.gamma > 0.0 && params.gamma < 1.0) {
                    return bad("tutoring needs a horizon and gamma in (0, 1)");
                }
            }
        }
        Ok(())
    }
}

/// One experiment suite. Top-level `kappas` and `epsilon_min` override the
/// copies inside the trainer tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: EnvConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_kappas")]
    pub kappas: [f64; 3],
    /// Explicit budgets; skips derivation from the baseline.
    #[serde(default)]
    pub budgets: Option<[f64; 3]>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_filter")]
    pub filter: FilterMode,
    #[serde(default = "default_epsilon")]
    pub epsilon_min: f64,
    /// Trailing training episodes behind tabular final metrics.
    #[serde(default = "default_window")]
    pub final_window: usize,
    /// Episodes for tabular post-hoc evaluation.
    #[serde(default = "default_eval")]
    pub eval_episodes: usize,
    /// Episodes for measuring baseline costs.
    #[serde(default = "default_baseline_eval")]
    pub baseline_eval_episodes: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub tabular: TabularConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    /// Observation-noise levels for `noise-sweep`.
    #[serde(default)]
    pub noise_sigmas: Vec<f64>,
}

fn default_kappas() -> [f64; 3] {
    [0.95, 0.5, 0.85]
}
fn default_tau() -> f64 {
    0.1
}
fn default_filter() -> FilterMode {
    FilterMode::Nullify
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_window() -> usize {
    1000
}
fn default_eval() -> usize {
    1000
}
fn default_baseline_eval() -> usize {
    200
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a TOML file. A relative `graph_file` resolves
    /// against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let EnvConfig::Tutoring { graph_file: Some(g), .. } = &mut cfg.env {
            if g.is_relative() {
                *g = path.parent().unwrap_or(Path::new(".")).join(&*g);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return bad(format!("suite name {:?} is not a plain directory name", self.name));
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.methods.is_empty() {
            return bad("method list is empty".into());
        }
        if self.methods.iter().collect::<HashSet<_>>().len() != self.methods.len() {
            return bad("methods must be distinct".into());
        }
        if self.budgets.is_none() {
            for k in self.kappas {
                if !(k > 0.0 && k < 1.0) {
                    return bad(format!("kappa {k} outside (0, 1)"));
                }
            }
        }
        if let Some(b) = self.budgets {
            if b.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
                return bad("budgets must be finite and nonnegative".into());
            }
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return bad("tau must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.epsilon_min) {
            return bad("epsilon_min must be in [0, 1)".into());
        }
        if self.baseline_eval_episodes == 0 || self.eval_episodes == 0 {
            return bad("evaluation episode counts must be positive".into());
        }
        if self.noise_sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise sigmas must be nonnegative".into());
        }
        self.env.validate()?;
        if self.env.is_tabular() {
            if self.final_window == 0 || self.final_window as u64 > self.tabular.episodes {
                return bad("final_window must be in 1..=episodes".into());
            }
            if !self.noise_sigmas.is_empty() {
                return bad("observation noise applies to the tutoring env only".into());
            }
            self.tabular.schedule.validate()?;
        } else {
            self.ppo.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. The output root is not part of
    /// an experiment's identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex_digest(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// Hash of everything that determines the unconstrained baseline.
    pub fn baseline_hash(&self) -> String {
        let trainer = if self.env.is_tabular() {
            serde_json::to_value(&self.tabular)
        } else {
            let mut ppo = self.ppo.clone();
            ppo.obs_noise = 0.0;
            ppo.budgets = [0.0; 3];
            serde_json::to_value(&ppo)
        }
        .expect("config serializes");
        let key = serde_json::json!({
            "env": self.env,
            "seeds": self.seeds,
            "trainer": trainer,
            "baseline_eval_episodes": self.baseline_eval_episodes,
        });
        hex_digest(key.to_string().as_bytes())
    }

    pub fn suite_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn tabular_config(&self, budgets: [f64; 3]) -> TabularConfig {
        TabularConfig { budgets, kappas: self.kappas, epsilon_min: self.epsilon_min, ..self.tabular.clone() }
    }

    pub fn ppo_config(&self, budgets: [f64; 3]) -> PpoConfig {
        PpoConfig { budgets, kappas: self.kappas, epsilon_min: self.epsilon_min, ..self.ppo.clone() }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
