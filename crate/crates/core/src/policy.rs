//! Tabular autoregressive softmax sequence policies.
//!
//! A [`PolicyTable`] maps every prefix (prompt id plus the tokens emitted so
//! far) to a logit vector over the vocabulary. Prefixes without a stored
//! entry behave as an all-zero logit vector, i.e. the uniform distribution.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Token index set, optionally with a terminator that ends a sequence early.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
    terminator: Option<TokenId>,
}

impl Vocab {
    /// Vocabulary without a terminator: every complete sequence has length `max_len`.
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidVocab(format!("size {size} < 2")));
        }
        Ok(Self { size, terminator: None })
    }

    pub fn with_terminator(size: usize, terminator: TokenId) -> Result<Self> {
        let mut v = Self::new(size)?;
        if terminator >= size {
            return Err(Error::InvalidVocab(format!("terminator {terminator} >= size {size}")));
        }
        v.terminator = Some(terminator);
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn terminator(&self) -> Option<TokenId> {
        self.terminator
    }

    pub fn is_terminator(&self, token: TokenId) -> bool {
        self.terminator == Some(token)
    }

    fn check(&self, token: TokenId) -> Result<()> {
        if token >= self.size {
            Err(Error::InvalidToken {
                token,
                vocab: self.size,
            })
        } else {
            Ok(())
        }
    }
}

/// Conditioning context `(prompt, y_<t)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Prefix {
    pub prompt_id: u32,
    pub tokens: Vec<TokenId>,
}

impl Prefix {
    pub fn new(prompt_id: u32, tokens: Vec<TokenId>) -> Self {
        Self { prompt_id, tokens }
    }

    pub fn root(prompt_id: u32) -> Self {
        Self::new(prompt_id, Vec::new())
    }
}

/// A strictly positive probability vector produced by [`softmax`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        entropy(&self.probs)
    }
}

/// `-Σ p ln p` over a probability vector.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Max-shifted softmax. Rejects non-finite logits.
pub fn softmax(logits: &[f64]) -> Result<TokenDistribution> {
    if logits.is_empty() {
        return Err(Error::InvalidLogits("empty logit vector".into()));
    }
    if let Some(bad) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::InvalidLogits(format!("non-finite logit {bad}")));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(TokenDistribution {
        probs: exps.into_iter().map(|e| e / z).collect(),
    })
}

/// Log-softmax of a single entry, computed with the same max shift.
fn log_softmax_at(logits: &[f64], token: TokenId) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits[token] - lse
}

/// A sampled or decoded sequence together with its log-probabilities under
/// the policy that produced it (temperature 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub prompt_id: u32,
    pub tokens: Vec<TokenId>,
    pub per_token_logp: Vec<f64>,
    pub total_logp: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Per-token log-probability; 0 for the empty sequence.
    pub fn normalized_logp(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.total_logp / self.tokens.len() as f64
        }
    }
}

/// Gradient with respect to the logit table, dense per touched prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseGradient {
    entries: BTreeMap<Prefix, Vec<f64>>,
}

impl SparseGradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn block_mut(&mut self, prefix: &Prefix, vocab_size: usize) -> &mut Vec<f64> {
        if !self.entries.contains_key(prefix) {
            self.entries.insert(prefix.clone(), vec![0.0; vocab_size]);
        }
        self.entries.get_mut(prefix).expect("inserted above")
    }

    pub fn block(&self, prefix: &Prefix) -> Option<&[f64]> {
        self.entries.get(prefix).map(Vec::as_slice)
    }

    pub fn get(&self, prefix: &Prefix, token: TokenId) -> f64 {
        self.entries
            .get(prefix)
            .and_then(|b| b.get(token).copied())
            .unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Prefix, &[f64])> {
        self.entries.iter().map(|(p, b)| (p, b.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `self += weight * other`
    pub fn add_scaled(&mut self, other: &SparseGradient, weight: f64) {
        for (prefix, block) in &other.entries {
            let dst = self.block_mut(prefix, block.len());
            for (d, s) in dst.iter_mut().zip(block) {
                *d += weight * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.entries.values_mut() {
            for g in block.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Prefix-indexed logit table defining `π(y_t | x, y_<t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    vocab: Vocab,
    max_len: usize,
    logits: BTreeMap<Prefix, Vec<f64>>,
}

impl PolicyTable {
    /// Fresh policy: every conditional is uniform.
    pub fn new(vocab: Vocab, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::InvalidVocab("max_len must be positive".into()));
        }
        Ok(Self {
            vocab,
            max_len,
            logits: BTreeMap::new(),
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn stored_prefixes(&self) -> usize {
        self.logits.len()
    }

    pub fn iter_stored(&self) -> impl Iterator<Item = (&Prefix, &[f64])> {
        self.logits.iter().map(|(p, l)| (p, l.as_slice()))
    }

    /// Stored logits, or `None` for the implicit zero vector.
    pub fn stored_logits(&self, prefix: &Prefix) -> Option<&[f64]> {
        self.logits.get(prefix).map(Vec::as_slice)
    }

    pub fn logits(&self, prefix: &Prefix) -> Vec<f64> {
        self.logits
            .get(prefix)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab.size])
    }

    pub fn set_logits(&mut self, prefix: Prefix, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab.size {
            return Err(Error::InvalidLogits(format!(
                "expected {} logits, got {}",
                self.vocab.size,
                logits.len()
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidLogits("non-finite logit".into()));
        }
        self.check_prefix(&prefix)?;
        self.logits.insert(prefix, logits);
        Ok(())
    }

    /// Mutable access to one prefix's logits, allocating zeros if absent.
    pub fn logits_mut(&mut self, prefix: &Prefix) -> &mut Vec<f64> {
        let v = self.vocab.size;
        if !self.logits.contains_key(prefix) {
            self.logits.insert(prefix.clone(), vec![0.0; v]);
        }
        self.logits.get_mut(prefix).expect("inserted above")
    }

    fn check_prefix(&self, prefix: &Prefix) -> Result<()> {
        if prefix.tokens.len() >= self.max_len {
            return Err(Error::PrefixExhausted {
                len: prefix.tokens.len(),
                max_len: self.max_len,
            });
        }
        for &t in &prefix.tokens {
            self.vocab.check(t)?;
            if self.vocab.is_terminator(t) {
                return Err(Error::InvalidToken {
                    token: t,
                    vocab: self.vocab.size,
                });
            }
        }
        Ok(())
    }

    /// Next-token distribution after `prefix`.
    pub fn token_distribution(&self, prefix: &Prefix) -> Result<TokenDistribution> {
        if prefix.tokens.len() >= self.max_len {
            return Err(Error::PrefixExhausted {
                len: prefix.tokens.len(),
                max_len: self.max_len,
            });
        }
        match self.logits.get(prefix) {
            Some(l) => softmax(l),
            None => Ok(TokenDistribution {
                probs: vec![1.0 / self.vocab.size as f64; self.vocab.size],
            }),
        }
    }

    fn logp_at(&self, prefix: &Prefix, token: TokenId) -> f64 {
        match self.logits.get(prefix) {
            Some(l) => log_softmax_at(l, token),
            None => -(self.vocab.size as f64).ln(),
        }
    }

    /// Per-token and total log-probability of `tokens` after prompt `prompt_id`.
    pub fn trajectory_log_prob(&self, prompt_id: u32, tokens: &[TokenId]) -> Result<(Vec<f64>, f64)> {
        if tokens.len() > self.max_len {
            return Err(Error::PrefixExhausted {
                len: tokens.len() - 1,
                max_len: self.max_len,
            });
        }
        let mut prefix = Prefix::root(prompt_id);
        let mut per_token = Vec::with_capacity(tokens.len());
        for (i, &tok) in tokens.iter().enumerate() {
            self.vocab.check(tok)?;
            if self.vocab.is_terminator(tok) && i + 1 != tokens.len() {
                return Err(Error::InvalidToken {
                    token: tokens[i + 1],
                    vocab: self.vocab.size,
                });
            }
            per_token.push(self.logp_at(&prefix, tok));
            prefix.tokens.push(tok);
        }
        let total = per_token.iter().sum();
        Ok((per_token, total))
    }

    /// Builds a [`Trajectory`] for `tokens`, evaluating its log-probabilities.
    pub fn score(&self, prompt_id: u32, tokens: Vec<TokenId>) -> Result<Trajectory> {
        let (per_token_logp, total_logp) = self.trajectory_log_prob(prompt_id, &tokens)?;
        Ok(Trajectory {
            prompt_id,
            tokens,
            per_token_logp,
            total_logp,
        })
    }

    /// Ancestral sampling from `softmax(logits / temperature)`, stopping at
    /// the terminator or `max_len`. Reported log-probs are at temperature 1.
    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        prompt_id: u32,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Trajectory> {
        if !temperature.is_finite() || temperature < 1e-6 {
            return Err(Error::TemperatureTooLow(temperature));
        }
        let mut prefix = Prefix::root(prompt_id);
        let mut per_token = Vec::new();
        while prefix.tokens.len() < self.max_len {
            let logits = self.logits(&prefix);
            let dist = if temperature == 1.0 {
                softmax(&logits)?
            } else {
                let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
                softmax(&scaled)?
            };
            let u: f64 = rng.gen();
            let tok = inverse_cdf(dist.probs(), u);
            per_token.push(log_softmax_at(&logits, tok));
            prefix.tokens.push(tok);
            if self.vocab.is_terminator(tok) {
                break;
            }
        }
        let total_logp = per_token.iter().sum();
        Ok(Trajectory {
            prompt_id,
            tokens: prefix.tokens,
            per_token_logp: per_token,
            total_logp,
        })
    }

    /// Argmax decoding with lowest-id tie-breaking.
    pub fn greedy_decode(&self, prompt_id: u32) -> Trajectory {
        let mut prefix = Prefix::root(prompt_id);
        let mut per_token = Vec::new();
        while prefix.tokens.len() < self.max_len {
            let tok = match self.logits.get(&prefix) {
                Some(l) => {
                    let mut best = 0;
                    for (i, &z) in l.iter().enumerate().skip(1) {
                        if z > l[best] {
                            best = i;
                        }
                    }
                    best
                }
                None => 0,
            };
            per_token.push(self.logp_at(&prefix, tok));
            prefix.tokens.push(tok);
            if self.vocab.is_terminator(tok) {
                break;
            }
        }
        let total_logp = per_token.iter().sum();
        Trajectory {
            prompt_id,
            tokens: prefix.tokens,
            per_token_logp: per_token,
            total_logp,
        }
    }

    /// `∂ log π(y) / ∂ z[prefix_t][a] = 1[a = y_t] - π(a | prefix_t)`.
    pub fn grad_log_prob(&self, trajectory: &Trajectory) -> Result<SparseGradient> {
        let mut grad = SparseGradient::new();
        self.accumulate_grad_log_prob(trajectory.prompt_id, &trajectory.tokens, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// `grad += weight * ∇ log π(tokens)`.
    pub fn accumulate_grad_log_prob(
        &self,
        prompt_id: u32,
        tokens: &[TokenId],
        weight: f64,
        grad: &mut SparseGradient,
    ) -> Result<()> {
        let mut prefix = Prefix::root(prompt_id);
        for &tok in tokens {
            self.accumulate_token_score(&prefix, tok, weight, grad)?;
            prefix.tokens.push(tok);
        }
        Ok(())
    }

    /// `grad[prefix] += weight * (onehot(token) - π(· | prefix))`.
    pub fn accumulate_token_score(
        &self,
        prefix: &Prefix,
        token: TokenId,
        weight: f64,
        grad: &mut SparseGradient,
    ) -> Result<()> {
        self.vocab.check(token)?;
        let dist = self.token_distribution(prefix)?;
        let block = grad.block_mut(prefix, self.vocab.size);
        for (a, g) in block.iter_mut().enumerate() {
            let indicator = if a == token { 1.0 } else { 0.0 };
            *g += weight * (indicator - dist.probs[a]);
        }
        Ok(())
    }

    /// `logits[prefix][a] += step_size * gradient[prefix][a]`. Leaves the
    /// policy untouched if any updated logit would be non-finite.
    pub fn apply_update(&mut self, gradient: &SparseGradient, step_size: f64) -> Result<()> {
        if !step_size.is_finite() {
            return Err(Error::NumericOverflow);
        }
        for (prefix, block) in gradient.iter() {
            let current = self.logits.get(prefix);
            for (a, g) in block.iter().enumerate() {
                let z = current.map_or(0.0, |l| l[a]);
                if !(z + step_size * g).is_finite() {
                    return Err(Error::NumericOverflow);
                }
            }
            if block.len() != self.vocab.size {
                return Err(Error::InvalidLogits(format!(
                    "gradient block of length {} for vocab {}",
                    block.len(),
                    self.vocab.size
                )));
            }
        }
        if step_size == 0.0 {
            return Ok(());
        }
        for (prefix, block) in gradient.iter() {
            let logits = self.logits_mut(prefix);
            for (z, g) in logits.iter_mut().zip(block) {
                *z += step_size * g;
            }
        }
        Ok(())
    }

    /// All complete sequences for one prompt: those ending at the terminator
    /// or reaching `max_len`. Errors if `size^max_len` exceeds `bound`.
    pub fn complete_sequences(&self, bound: u128) -> Result<Vec<Vec<TokenId>>> {
        complete_sequences(self.vocab, self.max_len, bound)
    }
}

/// Enumerates complete sequences in lexicographic order.
pub fn complete_sequences(vocab: Vocab, max_len: usize, bound: u128) -> Result<Vec<Vec<TokenId>>> {
    let size = (vocab.size as u128).checked_pow(max_len as u32).unwrap_or(u128::MAX);
    if size > bound {
        return Err(Error::SpaceTooLarge { size, bound });
    }
    let mut out = Vec::new();
    let mut stack = vec![Vec::new()];
    while let Some(seq) = stack.pop() {
        let done = seq.len() == max_len || seq.last().is_some_and(|&t| vocab.is_terminator(t));
        if done {
            out.push(seq);
            continue;
        }
        for tok in (0..vocab.size).rev() {
            let mut next = seq.clone();
            next.push(tok);
            stack.push(next);
        }
    }
    Ok(out)
}

fn inverse_cdf(probs: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last partial sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
