//! The IRL stage over self-generated rollouts, low-likelihood demonstration
//! selection, and the alternating RL/IRL training loop.
//!
//! With the rollout distribution taken as the empirical distribution over the
//! selected demos, the forward-KL fit reduces to minimizing the mean negative
//! log-likelihood of those demos under the policy.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::PathTask;
use crate::error::{Error, Result};
use crate::metrics;
use crate::objectives::{rl_step, suite_diagnostics, RlConfig, RlStepContext, StepRecord};
use crate::policy::{PolicyTable, SparseGradient, TokenId, Trajectory};

/// One rollout kept for demonstration selection.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub prompt_id: u32,
    pub trajectory: Trajectory,
    pub reward: u8,
    /// Log-prob under the policy that generated the rollout.
    pub behavior_total_logp: f64,
    pub rl_step_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutPool {
    entries: Vec<PoolEntry>,
}

impl RolloutPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: PoolEntry) {
        debug_assert!(entry.reward <= 1 && entry.behavior_total_logp <= 0.0);
        self.entries.push(entry);
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = PoolEntry>) {
        for e in entries {
            self.push(e);
        }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    /// Entries for one prompt, in insertion order.
    pub fn for_prompt(&self, prompt_id: u32) -> impl Iterator<Item = &PoolEntry> {
        self.entries.iter().filter(move |e| e.prompt_id == prompt_id)
    }

    pub fn prompt_ids(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.prompt_id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    LowLikelihood,
    PositiveAugment,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub normalized_logp: f64,
    /// Rank among the prompt's rollouts divided by their count; 0 is the least likely.
    pub quantile_rank: f64,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demo {
    pub prompt_id: u32,
    pub trajectory: Trajectory,
    pub reward: u8,
    pub meta: DemoMeta,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemoSet {
    pub demos: Vec<Demo>,
}

impl DemoSet {
    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    fn distinct_prompts(&self) -> usize {
        self.demos.iter().map(|d| d.prompt_id).collect::<BTreeSet<_>>().len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodNorm {
    /// Total log-prob divided by length.
    #[default]
    PerToken,
    Total,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpsConfig {
    pub rl: RlConfig,
    /// Demos selected per prompt.
    pub sampling_size: usize,
    pub irl_steps_per_iteration: usize,
    /// Demos per IRL step, cycling through the set; `None` uses all of them.
    pub irl_batch_size: Option<usize>,
    pub rl_steps_per_iteration: usize,
    /// Per-prompt IRL step size, scaled like the RL rate.
    pub irl_lr: f64,
    /// Widens the candidate window to the lowest `ceil(q * n)` rollouts.
    pub quantile: Option<f64>,
    pub min_negatives_for_pure_l2te: usize,
    pub likelihood_norm: LikelihoodNorm,
    pub max_iterations: usize,
    /// Stop when held-out Avg@1 moves less than this between iterations.
    pub convergence_tol: f64,
    /// Importance ratios of the first RL step after an IRL stage use the
    /// pre-IRL policy as `π_old`.
    pub retain_old_policy: bool,
    /// k for the exact Pass@k recorded in the trace.
    pub trace_k: usize,
    pub prob_floor: f64,
}

impl Default for SpsConfig {
    fn default() -> Self {
        Self {
            rl: RlConfig::default(),
            sampling_size: 3,
            irl_steps_per_iteration: 4,
            irl_batch_size: None,
            rl_steps_per_iteration: 4,
            irl_lr: 0.005,
            quantile: None,
            min_negatives_for_pure_l2te: 1,
            likelihood_norm: LikelihoodNorm::PerToken,
            max_iterations: 8,
            convergence_tol: 1e-3,
            retain_old_policy: false,
            trace_k: 8,
            prob_floor: 1e-4,
        }
    }
}

impl SpsConfig {
    pub fn validate(&self) -> Result<()> {
        self.rl.validate()?;
        if self.sampling_size == 0 || self.sampling_size > self.rl.group_size {
            return Err(Error::InvalidConfig("sampling_size must lie in 1..=group_size".into()));
        }
        if let Some(q) = self.quantile {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::InvalidConfig("quantile must lie in (0, 1]".into()));
            }
        }
        if self.irl_batch_size == Some(0) {
            return Err(Error::InvalidConfig("irl_batch_size must be >= 1".into()));
        }
        if !(self.irl_lr.is_finite() && self.irl_lr >= 0.0) {
            return Err(Error::InvalidConfig("irl_lr must be finite and >= 0".into()));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return Err(Error::InvalidConfig("convergence_tol must be >= 0".into()));
        }
        if self.trace_k == 0 {
            return Err(Error::InvalidConfig("trace_k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.prob_floor) {
            return Err(Error::InvalidConfig("prob_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn likelihood_score(entry: &PoolEntry, norm: LikelihoodNorm) -> f64 {
    match norm {
        LikelihoodNorm::Total => entry.behavior_total_logp,
        LikelihoodNorm::PerToken if entry.trajectory.is_empty() => entry.behavior_total_logp,
        LikelihoodNorm::PerToken => entry.behavior_total_logp / entry.trajectory.len() as f64,
    }
}

/// Picks `sampling_size` demos for one prompt, preferring the rollouts the
/// behavior policy found least likely. When the prompt has some negatives but
/// fewer than `min_negatives_for_pure_l2te`, every negative is taken and the
/// rest is filled with the least likely positives.
pub fn l2te_select(pool: &RolloutPool, prompt_id: u32, cfg: &SpsConfig) -> Result<Vec<Demo>> {
    let mut ranked: Vec<(f64, &PoolEntry)> = pool
        .for_prompt(prompt_id)
        .map(|e| (likelihood_score(e, cfg.likelihood_norm), e))
        .collect();
    if ranked.is_empty() {
        return Err(Error::NoRollouts(prompt_id));
    }
    // stable: ties keep insertion order
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = ranked.len();
    let k = cfg.sampling_size.min(n);
    let demo = |rank: usize, source: Source| {
        let (score, e) = ranked[rank];
        Demo {
            prompt_id,
            trajectory: e.trajectory.clone(),
            reward: e.reward,
            meta: DemoMeta {
                normalized_logp: score,
                quantile_rank: rank as f64 / n as f64,
                source,
            },
        }
    };

    let negatives = ranked.iter().filter(|(_, e)| e.reward == 0).count();
    if negatives == 0 || negatives >= cfg.min_negatives_for_pure_l2te {
        let window = match cfg.quantile {
            Some(q) => ((q * n as f64).ceil() as usize).clamp(k, n),
            None => k,
        };
        return Ok((0..k).map(|i| demo(i * window / k, Source::LowLikelihood)).collect());
    }

    let mut picked: Vec<(usize, Source)> = (0..n)
        .filter(|&i| ranked[i].1.reward == 0)
        .take(k)
        .map(|i| (i, Source::LowLikelihood))
        .collect();
    let fill = k - picked.len();
    picked.extend(
        (0..n)
            .filter(|&i| ranked[i].1.reward == 1)
            .take(fill)
            .map(|i| (i, Source::PositiveAugment)),
    );
    picked.sort_by_key(|&(i, _)| i);
    Ok(picked.into_iter().map(|(i, s)| demo(i, s)).collect())
}

/// Demo selection for every prompt present in the pool, in prompt order.
pub fn select_demos(pool: &RolloutPool, cfg: &SpsConfig) -> Result<DemoSet> {
    let mut demos = Vec::new();
    for pid in pool.prompt_ids() {
        demos.extend(l2te_select(pool, pid, cfg)?);
    }
    Ok(DemoSet { demos })
}

/// Mean negative log-likelihood of the demos and its gradient.
pub fn irl_loss(policy: &PolicyTable, demos: &[Demo]) -> Result<(f64, SparseGradient)> {
    if demos.is_empty() {
        return Err(Error::NoDemos);
    }
    let parts = demos
        .par_iter()
        .map(|d| {
            let (_, total) = policy.trajectory_log_prob(d.prompt_id, &d.trajectory.tokens)?;
            let mut g = SparseGradient::new();
            policy.accumulate_grad_log_prob(d.prompt_id, &d.trajectory.tokens, 1.0, &mut g)?;
            Ok((total, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = demos.len() as f64;
    let mut value = 0.0;
    let mut gradient = SparseGradient::new();
    for (total, g) in &parts {
        value -= total;
        gradient.add_scaled(g, -1.0 / m);
    }
    Ok((value / m, gradient))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IrlStepReport {
    /// Loss on each step's batch after the step.
    pub losses: Vec<f64>,
    /// Number of step halvings taken across all steps.
    pub halvings: usize,
}

const MAX_HALVINGS: usize = 40;

fn irl_batch(demos: &DemoSet, size: Option<usize>, step: usize) -> Vec<Demo> {
    let n = demos.len();
    match size {
        Some(b) if b < n => (0..b).map(|i| demos.demos[(step * b + i) % n].clone()).collect(),
        _ => demos.demos.clone(),
    }
}

/// Gradient descent on [`irl_loss`]. A step that fails to lower the loss is
/// halved until it does; a step that cannot be made to help ends the stage.
pub fn irl_step(policy: &mut PolicyTable, demos: &DemoSet, cfg: &SpsConfig) -> Result<IrlStepReport> {
    let mut report = IrlStepReport::default();
    if demos.is_empty() || cfg.irl_lr == 0.0 {
        return Ok(report);
    }
    let base_step = cfg.irl_lr * demos.distinct_prompts() as f64;
    for s in 0..cfg.irl_steps_per_iteration {
        let batch = irl_batch(demos, cfg.irl_batch_size, s);
        let (loss, grad) = irl_loss(policy, &batch)?;
        if grad.l2_norm() == 0.0 {
            report.losses.push(loss);
            break;
        }
        let mut step = base_step;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut candidate = policy.clone();
            candidate.apply_update(&grad, -step)?;
            let (new_loss, _) = irl_loss(&candidate, &batch)?;
            if new_loss < loss {
                accepted = Some((candidate, new_loss));
                break;
            }
            step *= 0.5;
            report.halvings += 1;
        }
        match accepted {
            Some((candidate, new_loss)) => {
                *policy = candidate;
                report.losses.push(new_loss);
            }
            None => {
                report.losses.push(loss);
                break;
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "RL")]
    Rl,
    #[serde(rename = "IRL")]
    Irl,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Rl => "RL",
            Phase::Irl => "IRL",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub phase: Phase,
    /// Step index within the phase.
    pub step: usize,
    pub objective: String,
    pub irl_loss: Option<f64>,
    pub mean_reward: Option<f64>,
    pub entropy_root: f64,
    pub greedy_logp: f64,
    /// Exact Pass@trace_k averaged over the suite.
    pub pass_at_k: f64,
    /// Correct trajectories above the probability floor, summed over the suite.
    pub support_coverage: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub rl_steps: Vec<StepRecord>,
    /// Iterations completed.
    pub iterations: usize,
}

fn opt_csv(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str =
        "iter,phase,step,objective,irl_loss,mean_reward,entropy_root,greedy_logp,pass_at_k,support_coverage,seed";

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:?},{:?},{:?},{},{}\n",
                r.iter,
                r.phase,
                r.step,
                r.objective,
                opt_csv(r.irl_loss),
                opt_csv(r.mean_reward),
                r.entropy_root,
                r.greedy_logp,
                r.pass_at_k,
                r.support_coverage,
                r.seed
            ));
        }
        out
    }
}

/// Correct sets of a suite, enumerated once for repeated coverage queries.
#[derive(Clone, Debug)]
pub struct CorrectSets {
    sets: Vec<(u32, Vec<Vec<TokenId>>)>,
}

impl CorrectSets {
    pub fn new(tasks: &[PathTask]) -> Result<Self> {
        let sets = tasks
            .par_iter()
            .map(|t| Ok((t.prompt_id(), t.enumerate_correct()?)))
            .collect::<Result<_>>()?;
        Ok(Self { sets })
    }

    /// Per-task coverage in suite order.
    pub fn coverage(&self, policy: &PolicyTable, prob_floor: f64) -> Result<Vec<metrics::SupportCoverage>> {
        self.sets
            .par_iter()
            .map(|(pid, set)| metrics::coverage_over(policy, *pid, set, prob_floor))
            .collect()
    }

    /// Mean exact Pass@k and summed coverage count.
    pub fn summary(&self, policy: &PolicyTable, k: usize, prob_floor: f64) -> Result<(f64, usize)> {
        let cov = self.coverage(policy, prob_floor)?;
        if cov.is_empty() {
            return Ok((0.0, 0));
        }
        let pass = cov
            .iter()
            .map(|c| 1.0 - (1.0 - c.mass_on_correct.min(1.0)).powi(k as i32))
            .sum::<f64>()
            / cov.len() as f64;
        Ok((pass, cov.iter().map(|c| c.covered).sum()))
    }

    /// Mean probability of a correct answer from a single sample.
    pub fn mean_mass(&self, policy: &PolicyTable) -> Result<f64> {
        let cov = self.coverage(policy, 0.0)?;
        if cov.is_empty() {
            return Ok(0.0);
        }
        Ok(cov.iter().map(|c| c.mass_on_correct).sum::<f64>() / cov.len() as f64)
    }
}

/// Called after every completed iteration with the policy at that point.
pub type IterationHook<'a> = &'a mut dyn FnMut(usize, &PolicyTable) -> Result<()>;

/// Loop wiring that differs between runs.
pub struct LoopOptions<'a> {
    pub irl_enabled: bool,
    /// Held-out tasks for the convergence test; empty disables it.
    pub heldout: &'a [PathTask],
    pub on_iteration: Option<IterationHook<'a>>,
}

impl LoopOptions<'_> {
    pub fn plain(irl_enabled: bool) -> Self {
        Self {
            irl_enabled,
            heldout: &[],
            on_iteration: None,
        }
    }
}

/// Alternating RL and IRL stages.
pub fn sps_loop(
    base: &PolicyTable,
    tasks: &[PathTask],
    cfg: &SpsConfig,
    seed: u64,
) -> Result<(PolicyTable, TrainTrace)> {
    run_loop(base, tasks, cfg, seed, LoopOptions::plain(true))
}

/// The same schedule with the IRL stage disabled.
pub fn grpo_baseline_loop(
    base: &PolicyTable,
    tasks: &[PathTask],
    cfg: &SpsConfig,
    seed: u64,
) -> Result<(PolicyTable, TrainTrace)> {
    run_loop(base, tasks, cfg, seed, LoopOptions::plain(false))
}

pub fn run_loop(
    base: &PolicyTable,
    tasks: &[PathTask],
    cfg: &SpsConfig,
    seed: u64,
    mut opts: LoopOptions<'_>,
) -> Result<(PolicyTable, TrainTrace)> {
    cfg.validate()?;
    let mut policy = base.clone();
    let mut trace = TrainTrace::default();
    if cfg.max_iterations == 0 {
        return Ok((policy, trace));
    }
    let correct = CorrectSets::new(tasks)?;
    let heldout = if opts.heldout.is_empty() {
        None
    } else {
        Some(CorrectSets::new(opts.heldout)?)
    };
    let mut last_heldout: Option<f64> = None;
    let mut pool = RolloutPool::new();
    let mut pre_irl: Option<PolicyTable> = None;
    let mut global_step = 0usize;

    let record =
        |policy: &PolicyTable, iter, phase, step, objective: String, irl_loss, mean_reward| -> Result<TraceRecord> {
            let (entropy_root, greedy_logp) = suite_diagnostics(policy, tasks);
            let (pass_at_k, support_coverage) = correct.summary(policy, cfg.trace_k, cfg.prob_floor)?;
            Ok(TraceRecord {
                iter,
                phase,
                step,
                objective,
                irl_loss,
                mean_reward,
                entropy_root,
                greedy_logp,
                pass_at_k,
                support_coverage,
                seed,
            })
        };

    for iter in 0..cfg.max_iterations {
        let reference = (cfg.rl.clip.beta > 0.0).then(|| policy.clone());
        pool.clear();
        for step in 0..cfg.rl_steps_per_iteration {
            let behavior = if step == 0 && cfg.retain_old_policy {
                pre_irl.take()
            } else {
                None
            };
            let ctx = RlStepContext {
                seed,
                tags: vec![iter as u64, step as u64],
                step_index: global_step,
                ref_policy: reference.as_ref(),
                behavior: behavior.as_ref(),
            };
            let (rec, entries) = rl_step(&mut policy, tasks, &cfg.rl, &ctx)?;
            pool.extend(entries);
            trace.records.push(record(
                &policy,
                iter,
                Phase::Rl,
                step,
                rec.objective_kind.to_string(),
                None,
                Some(rec.mean_reward),
            )?);
            trace.rl_steps.push(rec);
            global_step += 1;
        }

        if opts.irl_enabled && cfg.irl_steps_per_iteration > 0 && !pool.is_empty() {
            let demos = select_demos(&pool, cfg)?;
            let demo_reward = demos.demos.iter().map(|d| d.reward as f64).sum::<f64>() / demos.len().max(1) as f64;
            if cfg.retain_old_policy {
                pre_irl = Some(policy.clone());
            }
            for step in 0..cfg.irl_steps_per_iteration {
                let one = SpsConfig {
                    irl_steps_per_iteration: 1,
                    ..cfg.clone()
                };
                let batch = DemoSet {
                    demos: irl_batch(&demos, cfg.irl_batch_size, step),
                };
                let rep = irl_step(&mut policy, &batch, &one)?;
                let loss = match rep.losses.last() {
                    Some(&l) => l,
                    None => irl_loss(&policy, &batch.demos)?.0,
                };
                trace.records.push(record(
                    &policy,
                    iter,
                    Phase::Irl,
                    step,
                    "irl".to_string(),
                    Some(loss),
                    Some(demo_reward),
                )?);
            }
        }

        trace.iterations = iter + 1;
        if let Some(hook) = opts.on_iteration.as_mut() {
            hook(iter, &policy)?;
        }
        if let Some(h) = &heldout {
            let avg = h.mean_mass(&policy)?;
            if last_heldout.is_some_and(|prev| (avg - prev).abs() < cfg.convergence_tol) {
                break;
            }
            last_heldout = Some(avg);
        }
    }
    Ok((policy, trace))
}
