//! Experiment configuration, read from TOML with dotted sections.
//!
//! ```toml
//! mode = "sps"
//! seed = 7
//! output_dir = "runs/sps"
//!
//! [suite]
//! num_tasks = 32
//!
//! [rl]
//! objective = "grpo"
//! lr = 0.05
//!
//! [sps]
//! sampling_size = 3
//! ```
//!
//! Unknown keys are rejected with the full field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::SuiteParams;
use crate::error::{Error, Result};
use crate::irl::{LikelihoodNorm, SpsConfig};
use crate::metrics::EvalParams;
use crate::objectives::{ClipConfig, ObjectiveKind, RlConfig};

pub const SEED_ENV: &str = "SQUEEZELAB_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Grpo,
    Dapo,
    Gspo,
    Sps,
    SqueezeDemo,
    Eval,
}

impl Mode {
    /// Objective used by the RL stage of this mode.
    pub fn objective(self, configured: ObjectiveKind) -> ObjectiveKind {
        match self {
            Mode::Grpo => ObjectiveKind::Grpo,
            Mode::Dapo => ObjectiveKind::Dapo,
            Mode::Gspo => ObjectiveKind::Gspo,
            _ => configured,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    /// Logit boost on one correct path per task; 0 gives a uniform policy.
    pub skew: f64,
    /// Start from this checkpoint instead of the skewed base.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            skew: 4.0,
            init_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSection {
    pub objective: ObjectiveKind,
    /// Clip bounds and KL coefficient; unset values take the objective's defaults.
    pub eps_low: Option<f64>,
    pub eps_high: Option<f64>,
    pub beta: Option<f64>,
    pub group_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub updates_per_rollout: usize,
    pub dapo_resample: bool,
    pub max_resample_times: usize,
}

impl Default for RlSection {
    fn default() -> Self {
        let d = RlConfig::default();
        Self {
            objective: ObjectiveKind::Grpo,
            eps_low: None,
            eps_high: None,
            beta: None,
            group_size: d.group_size,
            lr: d.lr,
            temperature: d.temperature,
            updates_per_rollout: d.updates_per_rollout,
            dapo_resample: d.dapo_resample,
            max_resample_times: d.max_resample_times,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpsSection {
    pub sampling_size: usize,
    pub irl_steps_per_iteration: usize,
    pub irl_batch_size: Option<usize>,
    pub rl_steps_per_iteration: usize,
    pub irl_lr: f64,
    pub quantile: Option<f64>,
    pub min_negatives_for_pure_l2te: usize,
    pub likelihood_norm: LikelihoodNorm,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub retain_old_policy: bool,
    pub trace_k: usize,
}

impl Default for SpsSection {
    fn default() -> Self {
        let d = SpsConfig::default();
        Self {
            sampling_size: d.sampling_size,
            irl_steps_per_iteration: d.irl_steps_per_iteration,
            irl_batch_size: d.irl_batch_size,
            rl_steps_per_iteration: d.rl_steps_per_iteration,
            irl_lr: d.irl_lr,
            quantile: d.quantile,
            min_negatives_for_pure_l2te: d.min_negatives_for_pure_l2te,
            likelihood_norm: d.likelihood_norm,
            max_iterations: d.max_iterations,
            convergence_tol: d.convergence_tol,
            retain_old_policy: d.retain_old_policy,
            trace_k: d.trace_k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n: usize,
    pub k: Vec<usize>,
    pub prob_floor: f64,
    /// Extra generated tasks for the convergence test; 0 disables it.
    pub heldout_tasks: usize,
    /// `eval` mode inputs.
    pub checkpoint: Option<PathBuf>,
    pub suite: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalParams::default();
        Self {
            n: d.n,
            k: d.k,
            prob_floor: d.prob_floor,
            heldout_tasks: 0,
            checkpoint: None,
            suite: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SqueezeSection {
    pub logits: Vec<f64>,
    pub penalized: usize,
    pub eta: f64,
}

impl Default for SqueezeSection {
    fn default() -> Self {
        Self {
            logits: vec![2.0, 1.0, 0.0, -3.0],
            penalized: 3,
            eta: -1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    /// Worker threads; unset uses the machine's parallelism.
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub suite: SuiteParams,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub rl: RlSection,
    #[serde(default)]
    pub sps: SpsSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub squeeze: SqueezeSection,
    #[serde(default)]
    pub runtime: RuntimeSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            seed: 0,
            output_dir: default_output_dir(),
            suite: SuiteParams::default(),
            policy: PolicySection::default(),
            rl: RlSection::default(),
            sps: SpsSection::default(),
            eval: EvalSection::default(),
            squeeze: SqueezeSection::default(),
            runtime: RuntimeSection::default(),
        }
    }

    /// Parses and validates; errors name the offending field path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config(format!("{path}: {}", inner.message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file and applies the seed override from the environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: `{s}` is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn objective(&self) -> ObjectiveKind {
        self.mode.objective(self.rl.objective)
    }

    pub fn clip(&self) -> ClipConfig {
        let d = ClipConfig::for_kind(self.objective());
        ClipConfig {
            eps_low: self.rl.eps_low.unwrap_or(d.eps_low),
            eps_high: self.rl.eps_high.unwrap_or(d.eps_high),
            beta: self.rl.beta.unwrap_or(d.beta),
            kind: d.kind,
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            clip: self.clip(),
            group_size: self.rl.group_size,
            lr: self.rl.lr,
            temperature: self.rl.temperature,
            updates_per_rollout: self.rl.updates_per_rollout,
            dapo_resample: self.rl.dapo_resample,
            max_resample_times: self.rl.max_resample_times,
        }
    }

    pub fn sps_config(&self) -> SpsConfig {
        let s = &self.sps;
        SpsConfig {
            rl: self.rl_config(),
            sampling_size: s.sampling_size,
            irl_steps_per_iteration: s.irl_steps_per_iteration,
            irl_batch_size: s.irl_batch_size,
            rl_steps_per_iteration: s.rl_steps_per_iteration,
            irl_lr: s.irl_lr,
            quantile: s.quantile,
            min_negatives_for_pure_l2te: s.min_negatives_for_pure_l2te,
            likelihood_norm: s.likelihood_norm,
            max_iterations: s.max_iterations,
            convergence_tol: s.convergence_tol,
            retain_old_policy: s.retain_old_policy,
            trace_k: s.trace_k,
            prob_floor: self.eval.prob_floor,
        }
    }

    pub fn eval_params(&self) -> EvalParams {
        EvalParams {
            n: self.eval.n,
            k: self.eval.k.clone(),
            prob_floor: self.eval.prob_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |section: &'static str| move |e: Error| Error::Config(format!("{section}: {e}"));
        match self.mode {
            Mode::SqueezeDemo => {
                if self.squeeze.logits.len() < 2 {
                    return Err(Error::Config("squeeze.logits: need at least 2 logits".into()));
                }
                if self.squeeze.penalized >= self.squeeze.logits.len() {
                    return Err(Error::Config("squeeze.penalized: index out of range".into()));
                }
                if !self.squeeze.eta.is_finite() {
                    return Err(Error::Config("squeeze.eta: must be finite".into()));
                }
            }
            Mode::Eval => {
                if self.eval.checkpoint.is_none() || self.eval.suite.is_none() {
                    return Err(Error::Config(
                        "eval: `checkpoint` and `suite` are required in eval mode".into(),
                    ));
                }
                self.eval_params().validate().map_err(ctx("eval"))?;
            }
            _ => {
                self.suite.validate().map_err(ctx("suite"))?;
                if !(self.policy.skew.is_finite() && self.policy.skew >= 0.0) {
                    return Err(Error::Config("policy.skew: must be finite and >= 0".into()));
                }
                self.sps_config().validate().map_err(ctx("rl/sps"))?;
                self.eval_params().validate().map_err(ctx("eval"))?;
            }
        }
        if self.runtime.workers == Some(0) {
            return Err(Error::Config("runtime.workers: must be >= 1".into()));
        }
        Ok(())
    }
}
