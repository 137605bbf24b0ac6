//! Independent reference computations shared by the integration tests.
//! Nothing here calls into the library's own math: probabilities come from
//! the raw logit table, objectives are summed term by term.

#![allow(dead_code)]

use rand::Rng;
use squeezelab::objectives::RolloutGroup;
use squeezelab::{PolicyTable, Prefix, SparseGradient, TokenId, Vocab};

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn token_logps(policy: &PolicyTable, prompt_id: u32, tokens: &[TokenId]) -> Vec<f64> {
    (0..tokens.len())
        .map(|t| {
            let p = softmax(&policy.logits(&Prefix::new(prompt_id, tokens[..t].to_vec())));
            p[tokens[t]].ln()
        })
        .collect()
}

pub fn seq_prob(policy: &PolicyTable, prompt_id: u32, tokens: &[TokenId]) -> f64 {
    token_logps(policy, prompt_id, tokens).iter().sum::<f64>().exp()
}

/// Sequences that stop at the terminator or at `max_len`, in any order.
pub fn complete_sequences(vocab: Vocab, max_len: usize) -> Vec<Vec<TokenId>> {
    fn go(v: Vocab, max_len: usize, cur: &mut Vec<TokenId>, out: &mut Vec<Vec<TokenId>>) {
        if cur.len() == max_len {
            out.push(cur.clone());
            return;
        }
        for a in 0..v.size() {
            cur.push(a);
            if v.terminator() == Some(a) {
                out.push(cur.clone());
            } else {
                go(v, max_len, cur, out);
            }
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(vocab, max_len, &mut Vec::new(), &mut out);
    out
}

/// Every prefix that has a next-token distribution.
pub fn all_prefixes(vocab: Vocab, max_len: usize, prompt_id: u32) -> Vec<Prefix> {
    let mut out = vec![Prefix::root(prompt_id)];
    let mut frontier = vec![Vec::new()];
    for _ in 1..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for a in 0..vocab.size() {
                if vocab.terminator() == Some(a) {
                    continue;
                }
                let mut q: Vec<TokenId> = p.clone();
                q.push(a);
                out.push(Prefix::new(prompt_id, q.clone()));
                next.push(q);
            }
        }
        frontier = next;
    }
    out
}

pub fn random_policy(rng: &mut impl Rng, vocab: Vocab, max_len: usize, prompts: u32, scale: f64) -> PolicyTable {
    let mut p = PolicyTable::new(vocab, max_len).unwrap();
    for pid in 0..prompts {
        for prefix in all_prefixes(vocab, max_len, pid) {
            let z = (0..vocab.size()).map(|_| rng.gen_range(-scale..scale)).collect();
            p.set_logits(prefix, z).unwrap();
        }
    }
    p
}

pub fn perturb(policy: &PolicyTable, rng: &mut impl Rng, scale: f64, prompts: u32) -> PolicyTable {
    let mut q = policy.clone();
    for pid in 0..prompts {
        for prefix in all_prefixes(policy.vocab(), policy.max_len(), pid) {
            for z in q.logits_mut(&prefix).iter_mut() {
                *z += rng.gen_range(-scale..scale);
            }
        }
    }
    q
}

/// Population-std normalized advantages; `None` when all rewards agree.
pub fn advantages(rewards: &[u8]) -> Option<Vec<f64>> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|&r| r as f64).sum::<f64>() / n;
    let var = rewards
        .iter()
        .map(|&r| (r as f64 - mean) * (r as f64 - mean))
        .sum::<f64>()
        / n;
    if var == 0.0 {
        return None;
    }
    Some(rewards.iter().map(|&r| (r as f64 - mean) / var.sqrt()).collect())
}

fn surrogate(r: f64, a: f64, lo: f64, hi: f64) -> f64 {
    (r * a).min(r.max(lo).min(hi) * a)
}

pub fn grpo_value(
    groups: &[RolloutGroup],
    policy: &PolicyTable,
    reference: Option<&PolicyTable>,
    eps: f64,
    beta: f64,
) -> f64 {
    let mut total = 0.0;
    for g in groups {
        let Some(adv) = advantages(&g.rewards) else { continue };
        let mut group_sum = 0.0;
        for (i, traj) in g.trajectories.iter().enumerate() {
            if traj.tokens.is_empty() {
                continue;
            }
            let cur = token_logps(policy, g.prompt_id, &traj.tokens);
            let mut seq_sum = 0.0;
            for (t, &c) in cur.iter().enumerate() {
                let r = (c - g.old_logps[i][t]).exp();
                seq_sum += surrogate(r, adv[i], 1.0 - eps, 1.0 + eps);
                if let Some(reference) = reference {
                    let rl = token_logps(reference, g.prompt_id, &traj.tokens)[t];
                    let rho = (rl - c).exp();
                    seq_sum -= beta * (rho - (rl - c) - 1.0);
                }
            }
            group_sum += seq_sum / cur.len() as f64;
        }
        total += group_sum / g.trajectories.len() as f64;
    }
    total / groups.len() as f64
}

pub fn dapo_value(groups: &[RolloutGroup], policy: &PolicyTable, eps_low: f64, eps_high: f64) -> f64 {
    let mut sum = 0.0;
    let mut tokens = 0usize;
    for g in groups {
        let adv = advantages(&g.rewards).unwrap_or_else(|| vec![0.0; g.rewards.len()]);
        for (i, traj) in g.trajectories.iter().enumerate() {
            let cur = token_logps(policy, g.prompt_id, &traj.tokens);
            for (c, o) in cur.iter().zip(&g.old_logps[i]) {
                let r = (c - o).exp();
                sum += surrogate(r, adv[i], 1.0 - eps_low, 1.0 + eps_high);
                tokens += 1;
            }
        }
    }
    sum / tokens as f64
}

pub fn gspo_value(groups: &[RolloutGroup], policy: &PolicyTable, eps_low: f64, eps_high: f64) -> f64 {
    let mut total = 0.0;
    for g in groups {
        let Some(adv) = advantages(&g.rewards) else { continue };
        let mut group_sum = 0.0;
        for (i, traj) in g.trajectories.iter().enumerate() {
            let cur = token_logps(policy, g.prompt_id, &traj.tokens);
            let mean_log_ratio = cur.iter().zip(&g.old_logps[i]).map(|(c, o)| c - o).sum::<f64>() / cur.len() as f64;
            group_sum += surrogate(mean_log_ratio.exp(), adv[i], 1.0 - eps_low, 1.0 + eps_high);
        }
        total += group_sum / g.trajectories.len() as f64;
    }
    total / groups.len() as f64
}

/// Largest deviation between `analytic` and central differences of `f`
/// over every logit of `prefixes`, relative to the largest
/// finite-difference component. The denominator is floored at 1e-6 so a
/// gradient that cancels exactly is judged against difference roundoff
/// (about 1e-11 at this step) instead of blowing up.
pub fn finite_difference_error(
    policy: &PolicyTable,
    prefixes: &[Prefix],
    analytic: &SparseGradient,
    f: impl Fn(&PolicyTable) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for prefix in prefixes {
        for a in 0..policy.vocab().size() {
            let mut up = policy.clone();
            up.logits_mut(prefix)[a] += h;
            let mut down = policy.clone();
            down.logits_mut(prefix)[a] -= h;
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            worst = worst.max((fd - analytic.get(prefix, a)).abs());
            scale = scale.max(fd.abs());
        }
    }
    worst / scale.max(1e-6)
}

/// `G` rollouts per prompt from `behavior` with random binary rewards.
pub fn random_groups(rng: &mut impl Rng, behavior: &PolicyTable, prompts: u32, group_size: usize) -> Vec<RolloutGroup> {
    (0..prompts)
        .map(|pid| {
            let trajs: Vec<_> = (0..group_size)
                .map(|_| behavior.sample_trajectory(pid, 1.0, rng).unwrap())
                .collect();
            let rewards = (0..group_size).map(|_| rng.gen_range(0..2u8)).collect();
            RolloutGroup::on_policy(pid, trajs, rewards)
        })
        .collect()
}
