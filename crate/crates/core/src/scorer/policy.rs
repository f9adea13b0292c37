//! A small log-linear autoregressive policy with exact gradients.
//!
//! At each step the next-token logits are
//!
//! ```text
//! z = bias + transition[prev] + Σ_h φ_h(prompt) · prompt_weights[h]
//! ```
//!
//! where `prev` is the previous completion token (or a start state), and
//! `φ(prompt)` is a normalized bag of hashed prompt words. The step
//! distribution is `softmax(z)`, so `∂ log p(tok) / ∂z = onehot(tok) − p`.
//!
//! Completions are whitespace-separated tokens that must be in the
//! vocabulary; prompts are unrestricted. Scores sum the given tokens only.
//! Sampling stops when the end token is drawn, which is not included in the
//! returned text.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Capabilities, SamplingParams, Scorer, ScorerError};
use crate::scalar::Scalar;

pub const END_TOKEN: &str = "</s>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary; the end token is appended if missing.
    pub fn new<I, S>(tokens: I) -> Result<Self, String>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(format!("invalid token {t:?}"));
            }
            if out.index.insert(t.clone(), out.tokens.len()).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
            out.tokens.push(t);
        }
        if !out.index.contains_key(END_TOKEN) {
            out.index.insert(END_TOKEN.to_string(), out.tokens.len());
            out.tokens.push(END_TOKEN.to_string());
        }
        Ok(out)
    }

    /// Sorted set of whitespace tokens appearing in `texts`, plus the end token.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: std::collections::BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        Vocab::new(set).expect("whitespace-split tokens are valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn end(&self) -> usize {
        self.index[END_TOKEN]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, ScorerError> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().ok_or_else(|| ScorerError::OutOfVocab(w.to_string())))
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Vocab::new(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

fn bucket_of(word: &str, buckets: usize) -> usize {
    let d = Sha256::digest(word.to_lowercase().as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    (u64::from_le_bytes(b) % buckets as u64) as usize
}

/// Sparse prompt features: (bucket, weight) with weights summing to 1.
type Features<T> = Vec<(usize, T)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainablePolicy<T> {
    vocab: Vocab,
    buckets: usize,
    params: Vec<T>,
}

impl<T: Scalar> TrainablePolicy<T> {
    fn param_count(v: usize, buckets: usize) -> usize {
        v + (v + 1) * v + buckets * v
    }

    /// All parameters zero: every step is uniform over the vocabulary.
    pub fn uniform(vocab: Vocab, buckets: usize) -> Self {
        let n = Self::param_count(vocab.len(), buckets);
        TrainablePolicy {
            vocab,
            buckets,
            params: vec![T::zero(); n],
        }
    }

    /// Parameters drawn uniformly from `[-scale, scale]`.
    pub fn random(vocab: Vocab, buckets: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::uniform(vocab, buckets);
        for x in &mut p.params {
            *x = T::of(rng.random_range(-scale..=scale));
        }
        p
    }

    pub fn from_params(vocab: Vocab, buckets: usize, params: Vec<T>) -> Result<Self, String> {
        let want = Self::param_count(vocab.len(), buckets);
        if params.len() != want {
            return Err(format!("expected {want} parameters, got {}", params.len()));
        }
        Ok(TrainablePolicy { vocab, buckets, params })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn v(&self) -> usize {
        self.vocab.len()
    }

    fn transition_offset(&self, prev: usize) -> usize {
        self.v() + prev * self.v()
    }

    fn prompt_offset(&self, bucket: usize) -> usize {
        self.v() + (self.v() + 1) * self.v() + bucket * self.v()
    }

    fn start_state(&self) -> usize {
        self.v()
    }

    fn features(&self, prompt: &str) -> Features<T> {
        if self.buckets == 0 {
            return Vec::new();
        }
        let mut counts: HashMap<usize, usize> = HashMap::new();
        let mut total = 0usize;
        for w in prompt.split_whitespace() {
            *counts.entry(bucket_of(w, self.buckets)).or_default() += 1;
            total += 1;
        }
        let mut feats: Features<T> = counts
            .into_iter()
            .map(|(b, c)| (b, T::of(c as f64 / total as f64)))
            .collect();
        feats.sort_by_key(|&(b, _)| b);
        feats
    }

    fn logits(&self, feats: &Features<T>, prev: usize) -> Vec<T> {
        let v = self.v();
        let t = self.transition_offset(prev);
        let mut z: Vec<T> = (0..v).map(|i| self.params[i] + self.params[t + i]).collect();
        for &(b, w) in feats {
            let o = self.prompt_offset(b);
            for (i, zi) in z.iter_mut().enumerate() {
                *zi = *zi + w * self.params[o + i];
            }
        }
        z
    }

    fn log_softmax(z: &[T]) -> Vec<T> {
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + z.iter().map(|&x| (x - m).exp()).fold(T::zero(), |a, b| a + b).ln();
        z.iter().map(|&x| x - lse).collect()
    }

    /// Per-step log-distributions along `completion`.
    pub fn step_log_probs(&self, prompt: &str, completion: &str) -> Result<Vec<Vec<T>>, ScorerError> {
        let tokens = self.vocab.tokenize(completion)?;
        let feats = self.features(prompt);
        let mut prev = self.start_state();
        let mut out = Vec::with_capacity(tokens.len());
        for tok in tokens {
            out.push(Self::log_softmax(&self.logits(&feats, prev)));
            prev = tok;
        }
        Ok(out)
    }

    pub fn score(&self, prompt: &str, completion: &str) -> Result<T, ScorerError> {
        let tokens = self.vocab.tokenize(completion)?;
        let feats = self.features(prompt);
        let mut prev = self.start_state();
        let mut total = T::zero();
        for tok in tokens {
            total = total + Self::log_softmax(&self.logits(&feats, prev))[tok];
            prev = tok;
        }
        Ok(total)
    }

    /// Adds `scale · ∇score` into `grad` and returns the score.
    pub fn accumulate_grad_score(
        &self,
        prompt: &str,
        completion: &str,
        scale: T,
        grad: &mut [T],
    ) -> Result<T, ScorerError> {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        let tokens = self.vocab.tokenize(completion)?;
        let feats = self.features(prompt);
        let v = self.v();
        let mut prev = self.start_state();
        let mut total = T::zero();
        for tok in tokens {
            let lp = Self::log_softmax(&self.logits(&feats, prev));
            total = total + lp[tok];
            let t = self.transition_offset(prev);
            for i in 0..v {
                let indicator = if i == tok { T::one() } else { T::zero() };
                let d = scale * (indicator - lp[i].exp());
                grad[i] = grad[i] + d;
                grad[t + i] = grad[t + i] + d;
                for &(b, w) in &feats {
                    let o = self.prompt_offset(b);
                    grad[o + i] = grad[o + i] + w * d;
                }
            }
            prev = tok;
        }
        Ok(total)
    }

    /// Score and its exact gradient with respect to the parameters.
    pub fn grad_score(&self, prompt: &str, completion: &str) -> Result<(T, Vec<T>), ScorerError> {
        let mut grad = vec![T::zero(); self.params.len()];
        let s = self.accumulate_grad_score(prompt, completion, T::one(), &mut grad)?;
        Ok((s, grad))
    }

    /// Draws `params.n` completions. Temperature scales the logits, then
    /// top-p keeps the smallest high-probability prefix and renormalizes.
    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        prompt: &str,
        params: &SamplingParams,
        rng: &mut R,
    ) -> Result<Vec<String>, ScorerError> {
        params.validate()?;
        let feats = self.features(prompt);
        let end = self.vocab.end();
        let mut out = Vec::with_capacity(params.n);
        for _ in 0..params.n {
            let mut prev = self.start_state();
            let mut words = Vec::new();
            for _ in 0..params.max_output_length {
                let z: Vec<f64> = self
                    .logits(&feats, prev)
                    .into_iter()
                    .map(|x| x.to_f64_lossy() / params.temperature)
                    .collect();
                let probs: Vec<f64> = Self::log_softmax_f64(&z).into_iter().map(f64::exp).collect();
                let tok = draw_top_p(&probs, params.top_p, rng);
                if tok == end {
                    break;
                }
                words.push(self.vocab.tokens[tok].as_str());
                prev = tok;
            }
            out.push(words.join(" "));
        }
        Ok(out)
    }

    fn log_softmax_f64(z: &[f64]) -> Vec<f64> {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        z.iter().map(|&x| x - lse).collect()
    }
}

/// Nucleus draw: sort by probability (ties by index), keep the shortest
/// prefix reaching `top_p`, renormalize, then invert the CDF.
fn draw_top_p<R: Rng + ?Sized>(probs: &[f64], top_p: f64, rng: &mut R) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    let u: f64 = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &kept {
        acc += probs[i];
        if u < acc {
            return i;
        }
    }
    *kept.last().expect("non-empty vocabulary")
}

/// `L = -(1/N) Σ score(prompt, target)` and its gradient.
pub fn policy_nll_loss<T: Scalar>(
    policy: &TrainablePolicy<T>,
    pairs: &[(String, String)],
) -> Result<(T, Vec<T>), ScorerError> {
    if pairs.is_empty() {
        return Err(ScorerError::InvalidParams("empty batch".into()));
    }
    let n = T::of(pairs.len() as f64);
    let mut grad = vec![T::zero(); policy.num_params()];
    let mut total = T::zero();
    for (prompt, target) in pairs {
        total = total + policy.accumulate_grad_score(prompt, target, -T::one() / n, &mut grad)?;
    }
    Ok((-total / n, grad))
}

/// A policy exposed through the [`Scorer`] contract, with a seeded sampler.
#[derive(Debug)]
pub struct PolicyScorer<T> {
    policy: TrainablePolicy<T>,
    rng: Mutex<ChaCha8Rng>,
}

impl<T: Scalar> PolicyScorer<T> {
    pub fn new(policy: TrainablePolicy<T>, seed: u64) -> Self {
        PolicyScorer {
            policy,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn policy(&self) -> &TrainablePolicy<T> {
        &self.policy
    }
}

impl<T: Scalar> Scorer for PolicyScorer<T> {
    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    fn sample(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>, ScorerError> {
        let mut rng = self.rng.lock().expect("rng lock poisoned");
        self.policy.sample_with(prompt, params, &mut *rng)
    }

    fn score(&self, prompt: &str, completion: &str) -> Result<f64, ScorerError> {
        self.policy.score(prompt, completion).map(Scalar::to_f64_lossy)
    }
}
