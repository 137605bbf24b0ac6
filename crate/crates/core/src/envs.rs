//! Path-finding tasks over token-labeled DAGs.
//!
//! A response is a token sequence; walking it edge by edge from the start
//! node yields the extracted answer, and the reward is 1 exactly when that
//! answer equals the task label. Correct sets are small enough to enumerate,
//! which gives ground truth for exploration measurements.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyTable, Prefix, TokenId, Vocab};
use crate::rng;

pub const MAX_NODES: usize = 64;
/// Limit on enumerated correct paths per task.
pub const PATH_BOUND: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct PathTask {
    prompt_id: u32,
    label: usize,
    node_count: usize,
    edges: Vec<(usize, usize, TokenId)>,
    start: usize,
    max_len: usize,
    vocab: Vocab,
    next: HashMap<(usize, TokenId), usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ValidatorResult {
    pub reward: u8,
    pub extracted: Option<usize>,
}

impl PathTask {
    /// Builds and validates a task. Rejects nondeterministic edges, a label
    /// equal to the start node, and unreachable labels.
    pub fn new(
        prompt_id: u32,
        label: usize,
        node_count: usize,
        edges: Vec<(usize, usize, TokenId)>,
        start: usize,
        max_len: usize,
        vocab: Vocab,
    ) -> Result<Self> {
        if node_count == 0 || node_count > MAX_NODES {
            return Err(Error::InvalidTask(format!(
                "node_count {node_count} outside 1..={MAX_NODES}"
            )));
        }
        if start >= node_count || label >= node_count {
            return Err(Error::InvalidTask("start or label out of range".into()));
        }
        if start == label {
            return Err(Error::InvalidTask("start equals target (trivial task)".into()));
        }
        if max_len == 0 {
            return Err(Error::InvalidTask("max_len must be positive".into()));
        }
        let mut next = HashMap::new();
        for &(u, v, tok) in &edges {
            if u >= node_count || v >= node_count {
                return Err(Error::InvalidTask(format!("edge ({u},{v}) out of range")));
            }
            if tok >= vocab.size() || vocab.is_terminator(tok) {
                return Err(Error::InvalidTask(format!("edge token {tok} not a move token")));
            }
            if next.insert((u, tok), v).is_some() {
                return Err(Error::InvalidTask(format!("node {u} has two edges labeled {tok}")));
            }
        }
        let task = Self {
            prompt_id,
            label,
            node_count,
            edges,
            start,
            max_len,
            vocab,
            next,
        };
        if task.enumerate_correct()?.is_empty() {
            return Err(Error::InvalidTask(format!(
                "label {label} unreachable within {max_len} tokens"
            )));
        }
        Ok(task)
    }

    pub fn prompt_id(&self) -> u32 {
        self.prompt_id
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize, TokenId)] {
        &self.edges
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    /// Walks `tokens` from the start node. Incomplete sequences (shorter than
    /// `max_len` without a final terminator), tokens after the terminator and
    /// missing edges all fail extraction.
    pub fn validate(&self, tokens: &[TokenId]) -> ValidatorResult {
        let extracted = self.extract(tokens);
        ValidatorResult {
            reward: u8::from(extracted == Some(self.label)),
            extracted,
        }
    }

    fn extract(&self, tokens: &[TokenId]) -> Option<usize> {
        if tokens.len() > self.max_len {
            return None;
        }
        let mut node = self.start;
        let mut terminated = false;
        for (i, &tok) in tokens.iter().enumerate() {
            if self.vocab.is_terminator(tok) {
                if i + 1 != tokens.len() {
                    return None;
                }
                terminated = true;
                break;
            }
            node = *self.next.get(&(node, tok))?;
        }
        if terminated || tokens.len() == self.max_len {
            Some(node)
        } else {
            None
        }
    }

    pub fn reward(&self, tokens: &[TokenId]) -> u8 {
        self.validate(tokens).reward
    }

    /// Every complete sequence with reward 1, sorted lexicographically.
    pub fn enumerate_correct(&self) -> Result<Vec<Vec<TokenId>>> {
        let mut adjacency: Vec<Vec<(TokenId, usize)>> = vec![Vec::new(); self.node_count];
        for &(u, v, tok) in &self.edges {
            adjacency[u].push((tok, v));
        }
        for out in &mut adjacency {
            out.sort_unstable();
        }
        let mut found = Vec::new();
        let mut path = Vec::new();
        self.walk(&adjacency, self.start, &mut path, &mut found)?;
        found.sort();
        Ok(found)
    }

    fn walk(
        &self,
        adjacency: &[Vec<(TokenId, usize)>],
        node: usize,
        path: &mut Vec<TokenId>,
        found: &mut Vec<Vec<TokenId>>,
    ) -> Result<()> {
        if found.len() > PATH_BOUND {
            return Err(Error::SpaceTooLarge {
                size: found.len() as u128,
                bound: PATH_BOUND as u128,
            });
        }
        if path.len() == self.max_len {
            if node == self.label {
                found.push(path.clone());
            }
            return Ok(());
        }
        if node == self.label {
            if let Some(t) = self.vocab.terminator() {
                let mut done = path.clone();
                done.push(t);
                found.push(done);
            }
        }
        for &(tok, v) in &adjacency[node] {
            path.push(tok);
            self.walk(adjacency, v, path, found)?;
            path.pop();
        }
        Ok(())
    }
}

/// JSON form of one task in a suite file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub prompt_id: u32,
    pub label: usize,
    pub nodes: usize,
    pub edges: Vec<[usize; 3]>,
    pub start: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub terminator: Option<TokenId>,
}

impl From<&PathTask> for TaskRecord {
    fn from(t: &PathTask) -> Self {
        Self {
            prompt_id: t.prompt_id,
            label: t.label,
            nodes: t.node_count,
            edges: t.edges.iter().map(|&(u, v, k)| [u, v, k]).collect(),
            start: t.start,
            max_len: t.max_len,
            vocab: t.vocab.size(),
            terminator: t.vocab.terminator(),
        }
    }
}

impl TryFrom<TaskRecord> for PathTask {
    type Error = Error;

    fn try_from(r: TaskRecord) -> Result<Self> {
        let vocab = match r.terminator {
            Some(t) => Vocab::with_terminator(r.vocab, t)?,
            None => Vocab::new(r.vocab)?,
        };
        PathTask::new(
            r.prompt_id,
            r.label,
            r.nodes,
            r.edges.into_iter().map(|[u, v, k]| (u, v, k)).collect(),
            r.start,
            r.max_len,
            vocab,
        )
    }
}

pub fn suite_to_json(tasks: &[PathTask]) -> Result<String> {
    let records: Vec<TaskRecord> = tasks.iter().map(TaskRecord::from).collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

pub fn suite_from_json(text: &str) -> Result<Vec<PathTask>> {
    let records: Vec<TaskRecord> = serde_json::from_str(text)?;
    records.into_iter().map(PathTask::try_from).collect()
}

/// Layered-DAG task family. Layer 0 is the start node, layers
/// `1..depth` hold `width` nodes each and the last layer holds `answers`
/// nodes, one of which is the label. Every non-final node gets `branching`
/// edges (at most the next layer's size) to distinct nodes of the next
/// layer, labeled with distinct move tokens. Move tokens are `0..move_tokens`; the terminator is `move_tokens`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteParams {
    pub num_tasks: usize,
    pub move_tokens: usize,
    pub depth: usize,
    pub width: usize,
    pub branching: usize,
    pub answers: usize,
    pub min_solutions: usize,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            num_tasks: 32,
            move_tokens: 4,
            depth: 4,
            width: 4,
            branching: 3,
            answers: 2,
            min_solutions: 10,
        }
    }
}

impl SuiteParams {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::with_terminator(self.move_tokens + 1, self.move_tokens)
    }

    pub fn node_count(&self) -> usize {
        1 + self.width * self.depth.saturating_sub(1) + self.answers
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::GenerationFailed(m));
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.move_tokens < 1 || self.answers < 1 || (self.depth > 1 && self.width < 1) {
            return bad("move_tokens, width and answers must be >= 1".into());
        }
        if self.branching < 1 || self.branching > self.move_tokens {
            return bad(format!(
                "branching {} must be in 1..={}",
                self.branching, self.move_tokens
            ));
        }
        if self.depth > 1 && self.branching > self.width {
            return bad(format!(
                "branching {} exceeds layer width {}",
                self.branching, self.width
            ));
        }
        if self.node_count() > MAX_NODES {
            return bad(format!("{} nodes exceed {MAX_NODES}", self.node_count()));
        }
        Ok(())
    }
}

fn random_layered_task(params: &SuiteParams, prompt_id: u32, rng: &mut impl Rng) -> Result<PathTask> {
    let vocab = params.vocab()?;
    let mut layers: Vec<Vec<usize>> = vec![vec![0]];
    let mut next_id = 1;
    for layer in 1..=params.depth {
        let n = if layer == params.depth {
            params.answers
        } else {
            params.width
        };
        layers.push((next_id..next_id + n).collect());
        next_id += n;
    }
    let tokens: Vec<TokenId> = (0..params.move_tokens).collect();
    let mut edges = Vec::new();
    for pair in layers.windows(2) {
        // fan-out into the answer layer is capped by its size
        let fan_out = params.branching.min(pair[1].len());
        for &u in &pair[0] {
            let targets: Vec<usize> = pair[1].choose_multiple(rng, fan_out).cloned().collect();
            let labels: Vec<TokenId> = tokens.choose_multiple(rng, fan_out).cloned().collect();
            edges.extend(targets.into_iter().zip(labels).map(|(v, tok)| (u, v, tok)));
        }
    }
    let label = *layers[params.depth].choose(rng).expect("answers >= 1");
    PathTask::new(prompt_id, label, next_id, edges, 0, params.depth, vocab)
}

/// Deterministic suite from `seed`; each task is regenerated until it has
/// at least `min_solutions` correct sequences.
pub fn make_benchmark_suite(seed: u64, params: &SuiteParams) -> Result<Vec<PathTask>> {
    params.validate()?;
    (0..params.num_tasks)
        .map(|i| {
            let prompt_id = i as u32;
            let mut rng = rng::stream(seed, &[rng::TAG_SUITE, i as u64]);
            for _ in 0..1000 {
                match random_layered_task(params, prompt_id, &mut rng) {
                    Ok(task) if task.enumerate_correct()?.len() >= params.min_solutions => return Ok(task),
                    Ok(_) | Err(Error::InvalidTask(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::GenerationFailed(format!(
                "task {i}: no graph with >= {} solutions after 1000 attempts",
                params.min_solutions
            )))
        })
        .collect()
}

/// Peaky base policy: one randomly chosen correct trajectory gets `+skew`
/// on its token at each of its prefixes; everything else stays at zero.
pub fn skewed_base_policy(task: &PathTask, skew: f64, seed: u64) -> Result<PolicyTable> {
    let mut policy = PolicyTable::new(task.vocab, task.max_len)?;
    boost_one_solution(&mut policy, task, skew, seed)?;
    Ok(policy)
}

/// [`skewed_base_policy`] for every task of a suite, in one table.
pub fn skewed_suite_policy(tasks: &[PathTask], skew: f64, seed: u64) -> Result<PolicyTable> {
    let first = tasks.first().ok_or_else(|| Error::InvalidTask("empty suite".into()))?;
    let mut policy = PolicyTable::new(first.vocab, first.max_len)?;
    for task in tasks {
        if task.vocab != first.vocab || task.max_len != first.max_len {
            return Err(Error::InvalidTask("suite tasks disagree on vocab/max_len".into()));
        }
        boost_one_solution(&mut policy, task, skew, seed)?;
    }
    Ok(policy)
}

/// The trajectory that [`skewed_base_policy`] boosts.
pub fn boosted_solution(task: &PathTask, seed: u64) -> Result<Vec<TokenId>> {
    let correct = task.enumerate_correct()?;
    let mut rng = rng::stream(seed, &[rng::TAG_SKEW, task.prompt_id as u64]);
    Ok(correct[rng.gen_range(0..correct.len())].clone())
}

fn boost_one_solution(policy: &mut PolicyTable, task: &PathTask, skew: f64, seed: u64) -> Result<()> {
    if !skew.is_finite() || skew < 0.0 {
        return Err(Error::InvalidConfig(format!("skew {skew} must be finite and >= 0")));
    }
    if skew == 0.0 {
        return Ok(());
    }
    let path = boosted_solution(task, seed)?;
    for t in 0..path.len() {
        let prefix = Prefix::new(task.prompt_id, path[..t].to_vec());
        policy.logits_mut(&prefix)[path[t]] += skew;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diamond(max_len: usize) -> PathTask {
        // 0 -a-> 1 -c-> 3, 0 -b-> 2 -c-> 3
        let vocab = Vocab::with_terminator(4, 3).unwrap();
        PathTask::new(
            7,
            3,
            4,
            vec![(0, 1, 0), (0, 2, 1), (1, 3, 2), (2, 3, 2)],
            0,
            max_len,
            vocab,
        )
        .unwrap()
    }

    #[test]
    fn validator_cases() {
        let t = diamond(2);
        assert_eq!(
            t.validate(&[0, 2]),
            ValidatorResult {
                reward: 1,
                extracted: Some(3)
            }
        );
        assert_eq!(t.validate(&[]).reward, 0);
        assert_eq!(
            t.validate(&[2, 2]),
            ValidatorResult {
                reward: 0,
                extracted: None
            }
        );
        assert_eq!(
            t.validate(&[0, 3]),
            ValidatorResult {
                reward: 0,
                extracted: Some(1)
            }
        );
        let long = diamond(3);
        assert_eq!(long.validate(&[0, 2]).reward, 0, "unterminated short answer");
        assert_eq!(long.validate(&[0, 2, 3]).reward, 1);
        assert_eq!(long.validate(&[3, 0]).extracted, None);
    }

    #[test]
    fn diamond_has_two_solutions() {
        assert_eq!(diamond(2).enumerate_correct().unwrap(), vec![vec![0, 2], vec![1, 2]]);
        assert_eq!(
            diamond(3).enumerate_correct().unwrap(),
            vec![vec![0, 2, 3], vec![1, 2, 3]]
        );
    }

    #[test]
    fn ladder_of_ten_routes() {
        let vocab = Vocab::new(11).unwrap();
        let target = 11;
        let edges: Vec<_> = (0..10).flat_map(|i| [(0, i + 1, i), (i + 1, target, 10)]).collect();
        let task = PathTask::new(0, target, 12, edges, 0, 2, vocab).unwrap();
        let correct = task.enumerate_correct().unwrap();
        assert_eq!(correct.len(), 10);
        // exhaustive walk oracle over all 11^2 sequences
        let brute = (0..11)
            .flat_map(|a| (0..11).map(move |b| vec![a, b]))
            .filter(|s| task.reward(s) == 1)
            .count();
        assert_eq!(brute, 10);
    }

    #[test]
    fn rejects_degenerate_tasks() {
        let v = Vocab::new(2).unwrap();
        assert!(PathTask::new(0, 0, 1, vec![], 0, 1, v).is_err());
        assert!(PathTask::new(0, 1, 2, vec![], 0, 1, v).is_err(), "unreachable");
        assert!(PathTask::new(0, 1, 2, vec![(0, 1, 0), (0, 0, 0)], 0, 1, v).is_err());
    }

    #[test]
    fn oracle_consistency_by_full_enumeration() {
        let suite = make_benchmark_suite(
            3,
            &SuiteParams {
                num_tasks: 4,
                move_tokens: 3,
                depth: 3,
                width: 3,
                branching: 2,
                answers: 2,
                min_solutions: 2,
            },
        )
        .unwrap();
        for task in &suite {
            let correct = task.enumerate_correct().unwrap();
            let v = task.vocab().size();
            // every sequence of length 0..=max_len
            let mut all = vec![vec![]];
            let mut frontier = vec![vec![]];
            for _ in 0..task.max_len() {
                frontier = frontier
                    .iter()
                    .flat_map(|s: &Vec<usize>| {
                        (0..v).map(move |t| {
                            let mut n = s.clone();
                            n.push(t);
                            n
                        })
                    })
                    .collect();
                all.extend(frontier.iter().cloned());
            }
            for s in all {
                assert_eq!(task.reward(&s) == 1, correct.contains(&s), "{s:?}");
            }
        }
    }

    #[test]
    fn suite_is_deterministic_and_meets_min_solutions() {
        let params = SuiteParams::default();
        let a = make_benchmark_suite(11, &params).unwrap();
        let b = make_benchmark_suite(11, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        for t in &a {
            assert!(t.enumerate_correct().unwrap().len() >= 10);
        }
        assert_ne!(a, make_benchmark_suite(12, &params).unwrap());
    }

    #[test]
    fn impossible_params_fail() {
        let params = SuiteParams {
            min_solutions: 10_000,
            num_tasks: 1,
            ..SuiteParams::default()
        };
        assert!(matches!(
            make_benchmark_suite(0, &params),
            Err(Error::GenerationFailed(_))
        ));
        let params = SuiteParams {
            depth: 0,
            ..SuiteParams::default()
        };
        assert!(make_benchmark_suite(0, &params).is_err());
    }

    #[test]
    fn suite_json_round_trip() {
        let suite = make_benchmark_suite(
            5,
            &SuiteParams {
                num_tasks: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let text = suite_to_json(&suite).unwrap();
        assert_eq!(suite_from_json(&text).unwrap(), suite);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<_> = value[0].as_object().unwrap().keys().cloned().collect();
        for k in ["prompt_id", "label", "nodes", "edges", "start", "max_len"] {
            assert!(keys.contains(&k.to_string()));
        }
    }

    #[test]
    fn skew_controls_peakedness() {
        let task = &make_benchmark_suite(
            2,
            &SuiteParams {
                num_tasks: 1,
                ..Default::default()
            },
        )
        .unwrap()[0];
        let flat = skewed_base_policy(task, 0.0, 9).unwrap();
        assert_eq!(flat.stored_prefixes(), 0);
        let peaked = skewed_base_policy(task, 5.0, 9).unwrap();
        assert_eq!(
            peaked.greedy_decode(task.prompt_id()).tokens,
            boosted_solution(task, 9).unwrap()
        );
        let mut last = f64::INFINITY;
        for skew in [0.0, 1.0, 2.0, 4.0] {
            let p = skewed_base_policy(task, skew, 9).unwrap();
            let h = p.token_distribution(&Prefix::root(task.prompt_id())).unwrap().entropy();
            assert!(h < last);
            last = h;
        }
    }
}
