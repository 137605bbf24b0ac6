//! Evaluation: Pass@k / Avg@k, accuracy histograms, bigram similarity,
//! support coverage over the enumerated correct set, and greedy drift.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::PathTask;
use crate::error::{Error, Result};
use crate::policy::{PolicyTable, TokenId};
use crate::rng;

/// `C(n, k)`, or `None` on `u128` overflow.
fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by i + 1
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// `1 - C(n-c, k) / C(n, k)`. Exact integer counts when they fit in `u128`,
/// the product form `1 - prod (1 - k/i)` otherwise.
pub fn pass_at_k_unbiased(n: usize, c: usize, k: usize) -> Result<f64> {
    if k > n {
        return Err(Error::KExceedsN { n, k });
    }
    if k == 0 || c > n {
        return Err(Error::InvalidConfig(format!(
            "pass@k needs 1 <= k and c <= n (n={n}, c={c}, k={k})"
        )));
    }
    if n - c < k {
        return Ok(1.0);
    }
    if let (Some(total), Some(miss)) = (binomial(n, k), binomial(n - c, k)) {
        return Ok((total - miss) as f64 / total as f64);
    }
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    MonteCarlo,
    UnbiasedCombinatorial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassAtKEstimate {
    pub k: usize,
    pub value: f64,
    pub method: EstimateMethod,
    pub stderr: f64,
}

/// Fraction of `trials` in which at least one of `k` fresh samples is correct.
pub fn pass_at_k_mc<R: Rng + ?Sized>(
    policy: &PolicyTable,
    task: &PathTask,
    k: usize,
    trials: usize,
    rng: &mut R,
) -> Result<PassAtKEstimate> {
    if trials == 0 || k == 0 {
        return Err(Error::InvalidConfig("pass_at_k_mc needs k >= 1 and trials >= 1".into()));
    }
    let mut hits = 0usize;
    for _ in 0..trials {
        let mut hit = false;
        for _ in 0..k {
            let t = policy.sample_trajectory(task.prompt_id(), 1.0, rng)?;
            hit |= task.reward(&t.tokens) == 1;
        }
        hits += hit as usize;
    }
    let p = hits as f64 / trials as f64;
    Ok(PassAtKEstimate {
        k,
        value: p,
        method: EstimateMethod::MonteCarlo,
        stderr: (p * (1.0 - p) / trials as f64).sqrt(),
    })
}

/// `n` sampled responses per prompt with their binary rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrix {
    prompt_ids: Vec<u32>,
    rewards: Vec<Vec<u8>>,
    tokens: Vec<Vec<Vec<TokenId>>>,
}

impl SampleMatrix {
    /// Rewards only; `similarity` over this matrix is unavailable.
    pub fn from_rewards(rewards: Vec<Vec<u8>>) -> Result<Self> {
        let prompt_ids = (0..rewards.len() as u32).collect();
        Self::new(prompt_ids, rewards, Vec::new())
    }

    pub fn new(prompt_ids: Vec<u32>, rewards: Vec<Vec<u8>>, tokens: Vec<Vec<Vec<TokenId>>>) -> Result<Self> {
        if prompt_ids.len() != rewards.len() {
            return Err(Error::InvalidConfig("one reward row per prompt".into()));
        }
        if let Some(first) = rewards.first() {
            if rewards.iter().any(|r| r.len() != first.len()) {
                return Err(Error::InvalidConfig("sample count must match across prompts".into()));
            }
        }
        if rewards.iter().flatten().any(|&r| r > 1) {
            return Err(Error::InvalidConfig("rewards must be 0 or 1".into()));
        }
        if !tokens.is_empty()
            && (tokens.len() != rewards.len() || tokens.iter().zip(&rewards).any(|(t, r)| t.len() != r.len()))
        {
            return Err(Error::InvalidConfig("token rows must match reward rows".into()));
        }
        Ok(Self {
            prompt_ids,
            rewards,
            tokens,
        })
    }

    /// Draws `n` samples per task at temperature 1, one RNG stream per prompt.
    pub fn sample(policy: &PolicyTable, tasks: &[PathTask], n: usize, seed: u64) -> Result<Self> {
        let rows: Vec<(Vec<u8>, Vec<Vec<TokenId>>)> = tasks
            .par_iter()
            .map(|task| {
                let mut r = rng::stream(seed, &[rng::TAG_EVAL, task.prompt_id() as u64]);
                let mut rewards = Vec::with_capacity(n);
                let mut tokens = Vec::with_capacity(n);
                for _ in 0..n {
                    let t = policy.sample_trajectory(task.prompt_id(), 1.0, &mut r)?;
                    rewards.push(task.reward(&t.tokens));
                    tokens.push(t.tokens);
                }
                Ok((rewards, tokens))
            })
            .collect::<Result<_>>()?;
        let (rewards, tokens) = rows.into_iter().unzip();
        Self::new(tasks.iter().map(|t| t.prompt_id()).collect(), rewards, tokens)
    }

    pub fn prompts(&self) -> usize {
        self.rewards.len()
    }

    /// Samples per prompt.
    pub fn n(&self) -> usize {
        self.rewards.first().map_or(0, Vec::len)
    }

    pub fn prompt_ids(&self) -> &[u32] {
        &self.prompt_ids
    }

    pub fn rewards(&self) -> &[Vec<u8>] {
        &self.rewards
    }

    pub fn tokens(&self) -> &[Vec<Vec<TokenId>>] {
        &self.tokens
    }

    pub fn correct_counts(&self) -> Vec<usize> {
        self.rewards
            .iter()
            .map(|r| r.iter().filter(|&&x| x == 1).count())
            .collect()
    }
}

/// Mean over prompts of the per-prompt mean reward.
pub fn avg_at_k(matrix: &SampleMatrix) -> f64 {
    let n = matrix.n();
    if matrix.prompts() == 0 || n == 0 {
        return 0.0;
    }
    matrix
        .correct_counts()
        .iter()
        .map(|&c| c as f64 / n as f64)
        .sum::<f64>()
        / matrix.prompts() as f64
}

/// Unbiased Pass@k averaged over prompts.
pub fn pass_at_k(matrix: &SampleMatrix, k: usize) -> Result<f64> {
    if matrix.prompts() == 0 {
        return Ok(0.0);
    }
    let n = matrix.n();
    let mut sum = 0.0;
    for c in matrix.correct_counts() {
        sum += pass_at_k_unbiased(n, c, k)?;
    }
    Ok(sum / matrix.prompts() as f64)
}

pub const HISTOGRAM_BUCKETS: usize = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl AccuracyHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,count\n");
        for (e, c) in self.edges.iter().zip(&self.counts) {
            out.push_str(&format!("{e:.1},{c}\n"));
        }
        out
    }
}

/// Bucket index of `c / n` at the nearest of 0.0, 0.1, ..., 1.0, ties up.
pub fn accuracy_bucket(c: usize, n: usize) -> usize {
    // floor(10c/n + 1/2) in integers
    (20 * c + n) / (2 * n)
}

pub fn accuracy_histogram(matrix: &SampleMatrix) -> AccuracyHistogram {
    let mut counts = vec![0; HISTOGRAM_BUCKETS];
    let n = matrix.n();
    if n > 0 {
        for c in matrix.correct_counts() {
            counts[accuracy_bucket(c, n)] += 1;
        }
    } else {
        counts[0] = matrix.prompts();
    }
    AccuracyHistogram {
        edges: (0..HISTOGRAM_BUCKETS).map(|i| i as f64 / 10.0).collect(),
        counts,
    }
}

fn bigrams(tokens: &[TokenId]) -> HashSet<(TokenId, TokenId)> {
    tokens.windows(2).map(|w| (w[0], w[1])).collect()
}

/// 100 × mean pairwise Jaccard similarity of token-bigram sets.
/// Two trajectories with no bigrams count as identical.
pub fn similarity(trajectories: &[Vec<TokenId>]) -> Result<f64> {
    if trajectories.len() < 2 {
        return Err(Error::InsufficientSamples(trajectories.len()));
    }
    let sets: Vec<_> = trajectories.iter().map(|t| bigrams(t)).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            let union = sets[i].union(&sets[j]).count();
            sum += if union == 0 {
                1.0
            } else {
                sets[i].intersection(&sets[j]).count() as f64 / union as f64
            };
            pairs += 1;
        }
    }
    Ok(100.0 * sum / pairs as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportCoverage {
    pub covered: usize,
    pub total: usize,
    pub mass_on_correct: f64,
}

pub fn support_coverage(policy: &PolicyTable, task: &PathTask, prob_floor: f64) -> Result<SupportCoverage> {
    let correct = task.enumerate_correct()?;
    coverage_over(policy, task.prompt_id(), &correct, prob_floor)
}

/// Coverage against a precomputed correct set.
pub fn coverage_over(
    policy: &PolicyTable,
    prompt_id: u32,
    correct: &[Vec<TokenId>],
    prob_floor: f64,
) -> Result<SupportCoverage> {
    let mut covered = 0;
    let mut mass = 0.0;
    for seq in correct {
        let p = policy.trajectory_log_prob(prompt_id, seq)?.1.exp();
        mass += p;
        if p >= prob_floor {
            covered += 1;
        }
    }
    Ok(SupportCoverage {
        covered,
        total: correct.len(),
        mass_on_correct: mass,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyDrift {
    pub prompt_id: u32,
    pub greedy_logp_current: f64,
    pub greedy_logp_base: f64,
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyReport {
    pub per_task: Vec<GreedyDrift>,
    pub mean_drift: f64,
}

/// Each policy's own greedy trajectory, scored under itself.
pub fn greedy_logprob_report(policy: &PolicyTable, base: &PolicyTable, tasks: &[PathTask]) -> GreedyReport {
    let per_task: Vec<GreedyDrift> = tasks
        .iter()
        .map(|t| {
            let cur = policy.greedy_decode(t.prompt_id()).total_logp;
            let old = base.greedy_decode(t.prompt_id()).total_logp;
            GreedyDrift {
                prompt_id: t.prompt_id(),
                greedy_logp_current: cur,
                greedy_logp_base: old,
                drift: cur - old,
            }
        })
        .collect();
    let mean_drift = if per_task.is_empty() {
        0.0
    } else {
        per_task.iter().map(|d| d.drift).sum::<f64>() / per_task.len() as f64
    };
    GreedyReport { per_task, mean_drift }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    /// Samples per prompt.
    pub n: usize,
    pub k: Vec<usize>,
    pub prob_floor: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            n: 32,
            k: vec![1, 8, 32],
            prob_floor: 1e-4,
        }
    }
}

impl EvalParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidConfig("eval.n must be >= 2".into()));
        }
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(Error::InvalidConfig("eval.k must list values >= 1".into()));
        }
        if !(self.prob_floor.is_finite() && self.prob_floor >= 0.0 && self.prob_floor <= 1.0) {
            return Err(Error::InvalidConfig("eval.prob_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub covered: usize,
    pub total: usize,
    /// Mean over tasks of the probability mass on correct trajectories.
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub suite: String,
    pub n: usize,
    /// Largest requested k after clamping to n.
    pub k: usize,
    pub pass_at_k: f64,
    pub pass_at_k_by_k: BTreeMap<usize, f64>,
    pub avg_at_k: f64,
    pub histogram: AccuracyHistogram,
    pub similarity_bigram_jaccard: f64,
    pub greedy_drift_mean: f64,
    pub support: SupportSummary,
}

pub fn evaluate(
    policy: &PolicyTable,
    base: &PolicyTable,
    tasks: &[PathTask],
    suite: &str,
    params: &EvalParams,
    seed: u64,
) -> Result<EvaluationReport> {
    params.validate()?;
    let matrix = SampleMatrix::sample(policy, tasks, params.n, seed)?;
    let mut pass_at_k_by_k = BTreeMap::new();
    for &k in &params.k {
        let k = if k > params.n {
            eprintln!("warning: k={k} exceeds n={}; clamping", params.n);
            params.n
        } else {
            k
        };
        pass_at_k_by_k.insert(k, pass_at_k(&matrix, k)?);
    }
    let (&k, &pass) = pass_at_k_by_k.iter().next_back().expect("k list is nonempty");

    let mut sim = 0.0;
    for row in matrix.tokens() {
        sim += similarity(row)?;
    }
    if matrix.prompts() > 0 {
        sim /= matrix.prompts() as f64;
    }

    let coverages = tasks
        .par_iter()
        .map(|t| support_coverage(policy, t, params.prob_floor))
        .collect::<Result<Vec<_>>>()?;
    let support = SupportSummary {
        covered: coverages.iter().map(|c| c.covered).sum(),
        total: coverages.iter().map(|c| c.total).sum(),
        mass: if coverages.is_empty() {
            0.0
        } else {
            coverages.iter().map(|c| c.mass_on_correct).sum::<f64>() / coverages.len() as f64
        },
    };

    Ok(EvaluationReport {
        suite: suite.to_string(),
        n: params.n,
        k,
        pass_at_k: pass,
        pass_at_k_by_k,
        avg_at_k: avg_at_k(&matrix),
        histogram: accuracy_histogram(&matrix),
        similarity_bigram_jaccard: sim,
        greedy_drift_mean: greedy_logprob_report(policy, base, tasks).mean_drift,
        support,
    })
}
