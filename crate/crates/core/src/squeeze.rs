//! Mass redistribution under a single negative update.
//!
//! Lowering one logit `z_m` by `|η|` rescales every other probability by the
//! same factor `1 / (1 + p(m)(e^η - 1))`. Because that factor is common, the
//! token that already had the most mass gains the most in absolute terms and
//! the distribution gets more peaked. The same algebra holds for a sequence
//! distribution when one sequence's log-probability is lowered.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::{softmax, PolicyTable, Prefix, TokenDistribution, TokenId, Trajectory};

/// Enumeration limit for sequence-level reports.
pub const SEQUENCE_BOUND: u128 = 100_000;

#[derive(Clone, Debug)]
pub struct SqueezeReport {
    pub before: TokenDistribution,
    pub after: TokenDistribution,
    pub penalized: TokenId,
    pub eta: f64,
    /// `Z / Z'` from the actual partition sums.
    pub scale_factor: f64,
    pub mass_delta: Vec<f64>,
    /// `1 + p(m)(e^η - 1)`
    pub denom: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub residual: f64,
}

/// Tolerance for the closed-form and common-factor checks.
pub const EXACT_TOL: f64 = 1e-12;

/// `z_m <- z_m + η`, with before/after distributions recomputed from scratch.
pub fn penalize_token(logits: &[f64], m: TokenId, eta: f64) -> Result<(Vec<f64>, SqueezeReport)> {
    if m >= logits.len() {
        return Err(Error::InvalidToken {
            token: m,
            vocab: logits.len(),
        });
    }
    if !eta.is_finite() {
        return Err(Error::InvalidLogits(format!("non-finite eta {eta}")));
    }
    let before = softmax(logits)?;
    let mut new_logits = logits.to_vec();
    new_logits[m] += eta;
    let after = softmax(&new_logits)?;

    let shift = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - shift).exp()).sum();
    let z_new: f64 = new_logits.iter().map(|l| (l - shift).exp()).sum();

    let mass_delta = after.probs().iter().zip(before.probs()).map(|(a, b)| a - b).collect();
    let denom = 1.0 + before.prob(m) * eta.exp_m1();
    let report = SqueezeReport {
        before,
        after,
        penalized: m,
        eta,
        scale_factor: z / z_new,
        mass_delta,
        denom,
    };
    Ok((new_logits, report))
}

/// Checks the squeezing relations on a report with `η < 0` and a
/// non-dominant penalized token.
pub fn verify_squeeze(report: &SqueezeReport) -> Result<Vec<CheckResult>> {
    let before = report.before.probs();
    let after = report.after.probs();
    let m = report.penalized;
    let top = report.before.argmax();
    if report.eta.is_nan() || report.eta >= 0.0 {
        return Err(Error::NotASqueezeSetting(format!(
            "eta = {} is not negative",
            report.eta
        )));
    }
    if before[m] >= before[top] {
        return Err(Error::NotASqueezeSetting(format!(
            "token {m} already holds the largest probability"
        )));
    }

    let others = || (0..before.len()).filter(move |&j| j != m);
    let closed_form_residual = others()
        .map(|j| (after[j] - before[j] / report.denom).abs())
        .chain(std::iter::once(
            (after[m] - before[m] * report.eta.exp() / report.denom).abs(),
        ))
        .fold(0.0, f64::max);

    let ratios: Vec<f64> = others().map(|j| after[j] / before[j]).collect();
    let rmax = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rmin = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = if ratios.is_empty() { 0.0 } else { rmax - rmin };

    let max_gain = report.mass_delta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_before = before.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_after = after.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    Ok(vec![
        CheckResult {
            name: "closed_form",
            passed: closed_form_residual <= EXACT_TOL,
            residual: closed_form_residual,
        },
        CheckResult {
            name: "penalized_decreases",
            passed: after[m] < before[m],
            residual: after[m] - before[m],
        },
        CheckResult {
            name: "common_factor",
            passed: spread < EXACT_TOL && 1.0 / report.denom > 1.0,
            residual: spread,
        },
        CheckResult {
            name: "dominant_absorbs_most",
            passed: report.mass_delta[top] == max_gain,
            residual: max_gain - report.mass_delta[top],
        },
        CheckResult {
            name: "max_prob_increases",
            passed: max_after >= max_before,
            residual: max_after - max_before,
        },
    ])
}

#[derive(Clone, Debug)]
pub struct SequenceSqueezeReport {
    /// Complete sequences of the prompt, in lexicographic order.
    pub sequences: Vec<Vec<TokenId>>,
    pub before_seq_probs: Vec<f64>,
    pub after_seq_probs: Vec<f64>,
    pub penalized: Trajectory,
    pub eta: f64,
    pub denom: f64,
    pub max_before: f64,
    pub max_after: f64,
}

impl SequenceSqueezeReport {
    pub fn modal_before(&self) -> usize {
        argmax(&self.before_seq_probs)
    }

    pub fn penalized_index(&self) -> usize {
        self.sequences
            .iter()
            .position(|s| *s == self.penalized.tokens)
            .expect("penalized sequence comes from the enumeration")
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sequence_probs(policy: &PolicyTable, prompt_id: u32, seqs: &[Vec<TokenId>]) -> Result<Vec<f64>> {
    seqs.iter()
        .map(|s| Ok(policy.trajectory_log_prob(prompt_id, s)?.1.exp()))
        .collect()
}

fn check_penalized(seqs: &[Vec<TokenId>], y_minus: &Trajectory) -> Result<()> {
    if !seqs.contains(&y_minus.tokens) {
        return Err(Error::NotASqueezeSetting(format!(
            "{:?} is not a complete sequence",
            y_minus.tokens
        )));
    }
    Ok(())
}

/// Idealized sequence-level update: `log P(y⁻) += η`, then renormalize
/// over the enumerated sequence space.
pub fn sequence_squeeze(policy: &PolicyTable, y_minus: &Trajectory, eta: f64) -> Result<SequenceSqueezeReport> {
    if !eta.is_finite() || eta > 0.0 {
        return Err(Error::NotASqueezeSetting(format!("eta = {eta} must be <= 0")));
    }
    let seqs = policy.complete_sequences(SEQUENCE_BOUND)?;
    check_penalized(&seqs, y_minus)?;
    let before = sequence_probs(policy, y_minus.prompt_id, &seqs)?;
    let idx = seqs.iter().position(|s| *s == y_minus.tokens).expect("checked");

    let mut unnormalized = before.clone();
    unnormalized[idx] *= eta.exp();
    let z: f64 = unnormalized.iter().sum();
    let after: Vec<f64> = unnormalized.iter().map(|p| p / z).collect();
    let denom = 1.0 + before[idx] * eta.exp_m1();
    Ok(build_report(seqs, before, after, y_minus, eta, denom))
}

/// Realizable counterpart of [`sequence_squeeze`]: one gradient step of
/// size `step` down `∇ log π(y⁻)` on the tabular policy, then re-enumerate.
pub fn realized_sequence_squeeze(
    policy: &PolicyTable,
    y_minus: &Trajectory,
    step: f64,
) -> Result<(PolicyTable, SequenceSqueezeReport)> {
    let seqs = policy.complete_sequences(SEQUENCE_BOUND)?;
    check_penalized(&seqs, y_minus)?;
    let before = sequence_probs(policy, y_minus.prompt_id, &seqs)?;
    let mut updated = policy.clone();
    let grad = policy.grad_log_prob(y_minus)?;
    updated.apply_update(&grad, -step.abs())?;
    let after = sequence_probs(&updated, y_minus.prompt_id, &seqs)?;
    let idx = seqs.iter().position(|s| *s == y_minus.tokens).expect("checked");
    let eta = (after[idx] / before[idx]).ln();
    let denom = 1.0 + before[idx] * eta.exp_m1();
    Ok((updated, build_report(seqs, before, after, y_minus, eta, denom)))
}

fn build_report(
    sequences: Vec<Vec<TokenId>>,
    before: Vec<f64>,
    after: Vec<f64>,
    y_minus: &Trajectory,
    eta: f64,
    denom: f64,
) -> SequenceSqueezeReport {
    let max_before = before.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_after = after.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    SequenceSqueezeReport {
        sequences,
        before_seq_probs: before,
        after_seq_probs: after,
        penalized: y_minus.clone(),
        eta,
        denom,
        max_before,
        max_after,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeakednessRecord {
    pub prompt_id: u32,
    /// Probability of the greedy sequence, a lower bound on the modal mass.
    pub max_seq_prob_est: f64,
    pub mean_token_entropy: f64,
    pub greedy_total_logp: f64,
}

/// Greedy-path peakedness diagnostics for each prompt.
pub fn peakedness_trace(policy: &PolicyTable, prompts: &[u32]) -> Vec<PeakednessRecord> {
    prompts
        .iter()
        .map(|&prompt_id| {
            let greedy = policy.greedy_decode(prompt_id);
            let entropies: Vec<f64> = (0..greedy.len())
                .map(|t| {
                    policy
                        .token_distribution(&Prefix::new(prompt_id, greedy.tokens[..t].to_vec()))
                        .expect("greedy prefixes are shorter than max_len")
                        .entropy()
                })
                .collect();
            let mean_token_entropy = if entropies.is_empty() {
                0.0
            } else {
                entropies.iter().sum::<f64>() / entropies.len() as f64
            };
            PeakednessRecord {
                prompt_id,
                max_seq_prob_est: greedy.total_logp.exp(),
                mean_token_entropy,
                greedy_total_logp: greedy.total_logp,
            }
        })
        .collect()
}
