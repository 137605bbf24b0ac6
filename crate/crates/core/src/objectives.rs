//! Group-relative policy objectives: GRPO, DAPO and GSPO.
//!
//! All three share group-normalized advantages over binary rewards and a
//! PPO-style `min(ratio * A, clip(ratio) * A)` surrogate. They differ in where
//! the ratio lives (token vs. sequence), how clipping bounds are set, and how
//! token terms are averaged. Gradients are analytical in the logit table;
//! a term whose minimum selects the clipped branch contributes no gradient.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::PathTask;
use crate::error::{Error, Result};
use crate::irl::PoolEntry;
use crate::policy::{PolicyTable, Prefix, SparseGradient, Trajectory};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Grpo,
    Dapo,
    Gspo,
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectiveKind::Grpo => "grpo",
            ObjectiveKind::Dapo => "dapo",
            ObjectiveKind::Gspo => "gspo",
        })
    }
}

/// Clip range and KL coefficient for one objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    /// KL coefficient; only GRPO uses it.
    pub beta: f64,
    pub kind: ObjectiveKind,
}

impl ClipConfig {
    /// ε = 0.2, β = 0.01.
    pub fn grpo() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.2,
            beta: 0.01,
            kind: ObjectiveKind::Grpo,
        }
    }

    /// ε_low = 0.2, ε_high = 0.28, no KL.
    pub fn dapo() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.0,
            kind: ObjectiveKind::Dapo,
        }
    }

    /// ε_low = 3e-4, ε_high = 4e-4, no KL.
    pub fn gspo() -> Self {
        Self {
            eps_low: 3e-4,
            eps_high: 4e-4,
            beta: 0.0,
            kind: ObjectiveKind::Gspo,
        }
    }

    pub fn for_kind(kind: ObjectiveKind) -> Self {
        match kind {
            ObjectiveKind::Grpo => Self::grpo(),
            ObjectiveKind::Dapo => Self::dapo(),
            ObjectiveKind::Gspo => Self::gspo(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.eps_low) || !ok(self.eps_high) {
            return Err(Error::InvalidConfig("clip epsilons must be positive".into()));
        }
        if self.eps_low > self.eps_high {
            return Err(Error::InvalidConfig("eps_low must not exceed eps_high".into()));
        }
        if self.kind == ObjectiveKind::Grpo && self.eps_low != self.eps_high {
            return Err(Error::InvalidConfig("GRPO uses a symmetric clip range".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidConfig("beta must be >= 0".into()));
        }
        Ok(())
    }

    fn bounds(&self) -> (f64, f64) {
        (1.0 - self.eps_low, 1.0 + self.eps_high)
    }
}

/// G rollouts for one prompt, their binary rewards and the behavior
/// policy's per-token log-probs.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt_id: u32,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<u8>,
    pub old_logps: Vec<Vec<f64>>,
}

impl RolloutGroup {
    /// Group whose behavior policy is the one that sampled the trajectories.
    pub fn on_policy(prompt_id: u32, trajectories: Vec<Trajectory>, rewards: Vec<u8>) -> Self {
        let old_logps = trajectories.iter().map(|t| t.per_token_logp.clone()).collect();
        Self {
            prompt_id,
            trajectories,
            rewards,
            old_logps,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.rewards.iter().filter(|&&r| r == 1).count()
    }

    fn check(&self) -> Result<()> {
        if self.rewards.len() != self.trajectories.len() || self.old_logps.len() != self.trajectories.len() {
            return Err(Error::MalformedGroup("length mismatch".into()));
        }
        if self.rewards.iter().any(|&r| r > 1) {
            return Err(Error::MalformedGroup("rewards must be 0 or 1".into()));
        }
        for (t, old) in self.trajectories.iter().zip(&self.old_logps) {
            if t.prompt_id != self.prompt_id || t.len() != old.len() {
                return Err(Error::MalformedGroup("trajectory/old log-prob mismatch".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    /// All rewards equal: advantages are zero and the group carries no signal.
    pub degenerate: bool,
}

/// `(R_i - mean) / std` with the population standard deviation.
pub fn group_advantages(rewards: &[u8]) -> Result<AdvantageVector> {
    if rewards.len() < 2 {
        return Err(Error::MalformedGroup(format!(
            "need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|&r| r as f64).sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(AdvantageVector {
            values: vec![0.0; rewards.len()],
            degenerate: true,
        });
    }
    let pos = (1.0 - mean) / std;
    let neg = (0.0 - mean) / std;
    Ok(AdvantageVector {
        values: rewards.iter().map(|&r| if r == 1 { pos } else { neg }).collect(),
        degenerate: false,
    })
}

/// `π_θ(y_t | ·) / π_old(y_t | ·)`.
pub fn token_ratio(policy: &PolicyTable, old_logps: &[f64], trajectory: &Trajectory, t: usize) -> Result<f64> {
    let (cur, _) = policy.trajectory_log_prob(trajectory.prompt_id, &trajectory.tokens)?;
    let old = old_logps
        .get(t)
        .ok_or_else(|| Error::MalformedGroup(format!("no old log-prob for token {t}")))?;
    Ok((cur[t] - old).exp())
}

/// Geometric mean of the token ratios of one response.
pub fn sequence_ratio_gspo(policy: &PolicyTable, old_logps: &[f64], trajectory: &Trajectory) -> Result<f64> {
    if trajectory.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let (cur, _) = policy.trajectory_log_prob(trajectory.prompt_id, &trajectory.tokens)?;
    Ok(mean_log_ratio(&cur, old_logps).exp())
}

fn mean_log_ratio(cur: &[f64], old: &[f64]) -> f64 {
    cur.iter().zip(old).map(|(c, o)| c - o).sum::<f64>() / cur.len() as f64
}

/// `min(ratio * adv, clip(ratio) * adv)` and whether the unclipped branch is
/// the one selected (ties count as unclipped).
pub fn clipped_surrogate(ratio: f64, adv: f64, lo: f64, hi: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(lo, hi) * adv;
    if clipped < unclipped {
        (clipped, false)
    } else {
        (unclipped, true)
    }
}

#[derive(Clone, Debug)]
pub struct ObjectiveReport {
    pub value: f64,
    /// Gradient of `value` with respect to the logit table.
    pub gradient: SparseGradient,
    pub clipped_token_fraction: f64,
    pub kl_to_ref: f64,
    /// One flag per token of every non-skipped group, in group/trajectory/token
    /// order; skipped (degenerate) groups contribute `false` for each token.
    pub token_clipped: Vec<bool>,
}

fn score_tokens(
    policy: &PolicyTable,
    trajectory: &Trajectory,
    weight: impl Fn(usize) -> f64,
    grad: &mut SparseGradient,
) -> Result<()> {
    let mut prefix = Prefix::root(trajectory.prompt_id);
    for (t, &tok) in trajectory.tokens.iter().enumerate() {
        let w = weight(t);
        if w != 0.0 {
            policy.accumulate_token_score(&prefix, tok, w, grad)?;
        }
        prefix.tokens.push(tok);
    }
    Ok(())
}

fn require_kind(cfg: &ClipConfig, kind: ObjectiveKind) -> Result<()> {
    cfg.validate()?;
    if cfg.kind != kind {
        return Err(Error::InvalidConfig(format!(
            "{} objective called with {} config",
            kind, cfg.kind
        )));
    }
    Ok(())
}

/// Token-level clipped objective with per-sequence length normalization,
/// averaged over groups, minus `β` times the k3 KL estimate to `ref_policy`.
/// Degenerate groups contribute zero but count in the group average.
pub fn grpo_objective(
    groups: &[RolloutGroup],
    policy: &PolicyTable,
    ref_policy: Option<&PolicyTable>,
    cfg: &ClipConfig,
) -> Result<ObjectiveReport> {
    require_kind(cfg, ObjectiveKind::Grpo)?;
    if groups.is_empty() {
        return Err(Error::NoTrainableGroups);
    }
    let (lo, hi) = cfg.bounds();
    let n_groups = groups.len() as f64;
    let mut value = 0.0;
    let mut gradient = SparseGradient::new();
    let mut flags = Vec::new();
    let (mut clipped, mut counted) = (0usize, 0usize);
    let (mut kl_sum, mut kl_weight) = (0.0, 0.0);

    for group in groups {
        group.check()?;
        let adv = group_advantages(&group.rewards)?;
        if adv.degenerate {
            flags.extend(group.trajectories.iter().flat_map(|t| vec![false; t.len()]));
            continue;
        }
        let g = group.len() as f64;
        for ((traj, old), &a) in group.trajectories.iter().zip(&group.old_logps).zip(&adv.values) {
            if traj.is_empty() {
                continue;
            }
            let (cur, _) = policy.trajectory_log_prob(traj.prompt_id, &traj.tokens)?;
            let ref_lp = match ref_policy {
                Some(r) if cfg.beta > 0.0 => Some(r.trajectory_log_prob(traj.prompt_id, &traj.tokens)?.0),
                _ => None,
            };
            let w = 1.0 / (n_groups * g * traj.len() as f64);
            let mut token_weights = vec![0.0; traj.len()];
            for t in 0..traj.len() {
                let ratio = (cur[t] - old[t]).exp();
                let (v, active) = clipped_surrogate(ratio, a, lo, hi);
                value += w * v;
                counted += 1;
                flags.push(!active);
                if active {
                    token_weights[t] += w * a * ratio;
                } else {
                    clipped += 1;
                }
                if let Some(ref_lp) = &ref_lp {
                    let log_rho = ref_lp[t] - cur[t];
                    let rho = log_rho.exp();
                    let kl = rho - log_rho - 1.0;
                    value -= w * cfg.beta * kl;
                    token_weights[t] -= w * cfg.beta * (1.0 - rho);
                    kl_sum += w * kl;
                    kl_weight += w;
                }
            }
            score_tokens(policy, traj, |t| token_weights[t], &mut gradient)?;
        }
    }
    Ok(ObjectiveReport {
        value,
        gradient,
        clipped_token_fraction: fraction(clipped, counted),
        kl_to_ref: if kl_weight > 0.0 { kl_sum / kl_weight } else { 0.0 },
        token_clipped: flags,
    })
}

fn fraction(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Splits off groups whose rewards are all 0 or all 1.
pub fn dapo_filter(groups: Vec<RolloutGroup>) -> (Vec<RolloutGroup>, usize) {
    let before = groups.len();
    let kept: Vec<RolloutGroup> = groups
        .into_iter()
        .filter(|g| {
            let pos = g.positives();
            pos > 0 && pos < g.len()
        })
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Token-level clipped objective averaged over every token of the batch,
/// with the asymmetric range `[1 - ε_low, 1 + ε_high]` and no KL term.
pub fn dapo_objective(groups: &[RolloutGroup], policy: &PolicyTable, cfg: &ClipConfig) -> Result<ObjectiveReport> {
    require_kind(cfg, ObjectiveKind::Dapo)?;
    let total_tokens: usize = groups
        .iter()
        .flat_map(|g| g.trajectories.iter().map(Trajectory::len))
        .sum();
    if groups.is_empty() || total_tokens == 0 {
        return Err(Error::NoTrainableGroups);
    }
    let (lo, hi) = cfg.bounds();
    let w = 1.0 / total_tokens as f64;
    let mut value = 0.0;
    let mut gradient = SparseGradient::new();
    let mut flags = Vec::with_capacity(total_tokens);
    let mut clipped = 0usize;

    for group in groups {
        group.check()?;
        let adv = group_advantages(&group.rewards)?;
        for ((traj, old), &a) in group.trajectories.iter().zip(&group.old_logps).zip(&adv.values) {
            let (cur, _) = policy.trajectory_log_prob(traj.prompt_id, &traj.tokens)?;
            let mut token_weights = vec![0.0; traj.len()];
            for t in 0..traj.len() {
                let ratio = (cur[t] - old[t]).exp();
                let (v, active) = clipped_surrogate(ratio, a, lo, hi);
                value += w * v;
                flags.push(!active);
                if active {
                    token_weights[t] = w * a * ratio;
                } else {
                    clipped += 1;
                }
            }
            score_tokens(policy, traj, |t| token_weights[t], &mut gradient)?;
        }
    }
    Ok(ObjectiveReport {
        value,
        gradient,
        clipped_token_fraction: fraction(clipped, total_tokens),
        kl_to_ref: 0.0,
        token_clipped: flags,
    })
}

/// Sequence-level clipped objective on `s_i`, the geometric mean of token
/// ratios. Clipping gates the whole response.
pub fn gspo_objective(groups: &[RolloutGroup], policy: &PolicyTable, cfg: &ClipConfig) -> Result<ObjectiveReport> {
    require_kind(cfg, ObjectiveKind::Gspo)?;
    if groups.is_empty() {
        return Err(Error::NoTrainableGroups);
    }
    let (lo, hi) = cfg.bounds();
    let n_groups = groups.len() as f64;
    let mut value = 0.0;
    let mut gradient = SparseGradient::new();
    let mut flags = Vec::new();
    let (mut clipped, mut counted) = (0usize, 0usize);

    for group in groups {
        group.check()?;
        let adv = group_advantages(&group.rewards)?;
        if adv.degenerate {
            flags.extend(group.trajectories.iter().flat_map(|t| vec![false; t.len()]));
            continue;
        }
        let w = 1.0 / (n_groups * group.len() as f64);
        for ((traj, old), &a) in group.trajectories.iter().zip(&group.old_logps).zip(&adv.values) {
            if traj.is_empty() {
                return Err(Error::EmptyTrajectory);
            }
            let (cur, _) = policy.trajectory_log_prob(traj.prompt_id, &traj.tokens)?;
            let s = mean_log_ratio(&cur, old).exp();
            let (v, active) = clipped_surrogate(s, a, lo, hi);
            value += w * v;
            counted += traj.len();
            flags.extend(std::iter::repeat_n(!active, traj.len()));
            if active {
                let per_token = w * a * s / traj.len() as f64;
                score_tokens(policy, traj, |_| per_token, &mut gradient)?;
            } else {
                clipped += traj.len();
            }
        }
    }
    Ok(ObjectiveReport {
        value,
        gradient,
        clipped_token_fraction: fraction(clipped, counted),
        kl_to_ref: 0.0,
        token_clipped: flags,
    })
}

/// Dispatches on `cfg.kind`. The KL reference is only used by GRPO.
pub fn objective(
    groups: &[RolloutGroup],
    policy: &PolicyTable,
    ref_policy: Option<&PolicyTable>,
    cfg: &ClipConfig,
) -> Result<ObjectiveReport> {
    match cfg.kind {
        ObjectiveKind::Grpo => grpo_objective(groups, policy, ref_policy, cfg),
        ObjectiveKind::Dapo => dapo_objective(groups, policy, cfg),
        ObjectiveKind::Gspo => gspo_objective(groups, policy, cfg),
    }
}

/// Binary-reward decomposition of the group objective into a Bernoulli
/// standard deviation times a difference of length-normalized likelihoods.
/// Diagnostic only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContrastiveTerms {
    pub var_term: f64,
    pub pos_expectation: f64,
    pub neg_expectation: f64,
    pub value: f64,
}

pub fn contrastive_decomposition(group: &RolloutGroup, policy: &PolicyTable) -> Result<ContrastiveTerms> {
    group.check()?;
    let pos = group.positives();
    if pos == 0 || pos == group.len() {
        return Err(Error::OneSidedGroup);
    }
    let p_hat = pos as f64 / group.len() as f64;
    let var_term = (p_hat * (1.0 - p_hat)).sqrt();
    let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
    for (traj, &r) in group.trajectories.iter().zip(&group.rewards) {
        if traj.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let (_, total) = policy.trajectory_log_prob(traj.prompt_id, &traj.tokens)?;
        let term = total.exp() / traj.len() as f64;
        if r == 1 {
            pos_sum += term;
        } else {
            neg_sum += term;
        }
    }
    let pos_expectation = pos_sum / pos as f64;
    let neg_expectation = neg_sum / (group.len() - pos) as f64;
    Ok(ContrastiveTerms {
        var_term,
        pos_expectation,
        neg_expectation,
        value: var_term * (pos_expectation - neg_expectation),
    })
}

/// Settings for one RL update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub clip: ClipConfig,
    pub group_size: usize,
    /// Per-prompt step size. Prompts share no parameters in a tabular
    /// policy, so the batch-mean gradient is scaled by the batch's group
    /// count before the step.
    pub lr: f64,
    pub temperature: f64,
    /// Gradient steps per rollout batch, with `π_old` fixed at sampling time.
    pub updates_per_rollout: usize,
    /// DAPO only: re-sample degenerate groups up to `max_resample_times`.
    pub dapo_resample: bool,
    pub max_resample_times: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            clip: ClipConfig::grpo(),
            group_size: 8,
            lr: 0.05,
            temperature: 1.0,
            updates_per_rollout: 1,
            dapo_resample: false,
            max_resample_times: 3,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        if self.group_size < 2 {
            return Err(Error::InvalidConfig("group_size must be >= 2".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig("lr must be finite and >= 0".into()));
        }
        if !(self.temperature >= 1e-6 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be >= 1e-6".into()));
        }
        if self.updates_per_rollout == 0 {
            return Err(Error::InvalidConfig("updates_per_rollout must be >= 1".into()));
        }
        Ok(())
    }
}

/// Seeds and snapshots for one [`rl_step`].
#[derive(Clone, Debug)]
pub struct RlStepContext<'a> {
    pub seed: u64,
    /// Stream tags identifying this step, e.g. `[iteration, step]`.
    pub tags: Vec<u64>,
    pub step_index: usize,
    /// KL reference (GRPO with β > 0).
    pub ref_policy: Option<&'a PolicyTable>,
    /// If set, importance ratios use this policy as `π_old` instead of the
    /// policy that sampled the rollouts.
    pub behavior: Option<&'a PolicyTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub objective_kind: ObjectiveKind,
    pub value: f64,
    pub clipped_frac: f64,
    pub kl: f64,
    pub mean_reward: f64,
    pub entropy_root: f64,
    pub greedy_logp: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str =
        "step,objective_kind,value,clipped_frac,kl,mean_reward,entropy_root,greedy_logp";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.step,
            self.objective_kind,
            self.value,
            self.clipped_frac,
            self.kl,
            self.mean_reward,
            self.entropy_root,
            self.greedy_logp
        )
    }
}

pub fn step_records_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(StepRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Mean root-distribution entropy and mean greedy log-prob over a suite.
pub fn suite_diagnostics(policy: &PolicyTable, tasks: &[PathTask]) -> (f64, f64) {
    if tasks.is_empty() {
        return (0.0, 0.0);
    }
    let n = tasks.len() as f64;
    let entropy = tasks
        .iter()
        .map(|t| {
            policy
                .token_distribution(&Prefix::root(t.prompt_id()))
                .map(|d| d.entropy())
                .unwrap_or(0.0)
        })
        .sum::<f64>()
        / n;
    let greedy = tasks
        .iter()
        .map(|t| policy.greedy_decode(t.prompt_id()).total_logp)
        .sum::<f64>()
        / n;
    (entropy, greedy)
}

fn sample_group(
    policy: &PolicyTable,
    task: &PathTask,
    cfg: &RlConfig,
    mut rng: rng::StreamRng,
) -> Result<(Vec<Trajectory>, Vec<u8>)> {
    let mut trajectories = Vec::with_capacity(cfg.group_size);
    let mut rewards = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let t = policy.sample_trajectory(task.prompt_id(), cfg.temperature, &mut rng)?;
        rewards.push(task.reward(&t.tokens));
        trajectories.push(t);
    }
    Ok((trajectories, rewards))
}

/// Samples a group per task, scores it with the validator, and applies the
/// configured objective's gradient (ascent). Returns the step record and
/// every rollout used, for the IRL pool.
pub fn rl_step(
    policy: &mut PolicyTable,
    tasks: &[PathTask],
    cfg: &RlConfig,
    ctx: &RlStepContext<'_>,
) -> Result<(StepRecord, Vec<PoolEntry>)> {
    cfg.validate()?;
    let snapshot: &PolicyTable = policy;
    let sampled: Vec<(Vec<Trajectory>, Vec<u8>)> = tasks
        .par_iter()
        .map(|task| {
            let mut tags = vec![rng::TAG_RL];
            tags.extend(&ctx.tags);
            tags.push(task.prompt_id() as u64);
            let mut group = sample_group(snapshot, task, cfg, rng::stream(ctx.seed, &tags))?;
            if cfg.clip.kind == ObjectiveKind::Dapo && cfg.dapo_resample {
                for round in 0..cfg.max_resample_times {
                    let pos = group.1.iter().filter(|&&r| r == 1).count();
                    if pos > 0 && pos < group.1.len() {
                        break;
                    }
                    let mut t = tags.clone();
                    t.extend([rng::TAG_RESAMPLE, round as u64]);
                    group = sample_group(snapshot, task, cfg, rng::stream(ctx.seed, &t))?;
                }
            }
            Ok(group)
        })
        .collect::<Result<_>>()?;

    let mut groups = Vec::with_capacity(tasks.len());
    let mut pool = Vec::new();
    for (task, (trajectories, rewards)) in tasks.iter().zip(sampled) {
        for (t, &r) in trajectories.iter().zip(&rewards) {
            pool.push(PoolEntry {
                prompt_id: task.prompt_id(),
                trajectory: t.clone(),
                reward: r,
                behavior_total_logp: t.total_logp,
                rl_step_index: ctx.step_index,
            });
        }
        let mut group = RolloutGroup::on_policy(task.prompt_id(), trajectories, rewards);
        if let Some(b) = ctx.behavior {
            group.old_logps = group
                .trajectories
                .iter()
                .map(|t| Ok(b.trajectory_log_prob(t.prompt_id, &t.tokens)?.0))
                .collect::<Result<_>>()?;
        }
        groups.push(group);
    }
    let mean_reward = if pool.is_empty() {
        0.0
    } else {
        pool.iter().map(|e| e.reward as f64).sum::<f64>() / pool.len() as f64
    };

    let groups = if cfg.clip.kind == ObjectiveKind::Dapo {
        dapo_filter(groups).0
    } else {
        groups
    };

    let (mut value, mut clipped_frac, mut kl) = (0.0, 0.0, 0.0);
    for _ in 0..cfg.updates_per_rollout {
        let report = match objective(&groups, policy, ctx.ref_policy, &cfg.clip) {
            Ok(r) => r,
            // every group was filtered out: nothing to learn from this batch
            Err(Error::NoTrainableGroups) => break,
            Err(e) => return Err(e),
        };
        value = report.value;
        clipped_frac = report.clipped_token_fraction;
        kl = report.kl_to_ref;
        policy.apply_update(&report.gradient, cfg.lr * groups.len() as f64)?;
    }

    let (entropy_root, greedy_logp) = suite_diagnostics(policy, tasks);
    Ok((
        StepRecord {
            step: ctx.step_index,
            objective_kind: cfg.clip.kind,
            value,
            clipped_frac,
            kl,
            mean_reward,
            entropy_root,
            greedy_logp,
        },
        pool,
    ))
}
