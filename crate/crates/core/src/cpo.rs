//! Contribution-weighted preference optimization over a [`TrainablePolicy`].
//!
//! For a pair with preferred `u+`, dispreferred `u-` and contribution gap `g`:
//!
//! ```text
//! f    = eta * [(lp+ - lp+_ref) - (lp- - lp-_ref)]
//! w    = sigmoid(mu * g)
//! loss = -[w ln sigmoid(f) + (1 - w) ln sigmoid(-f)]
//! ```
//!
//! `w` is a constant per pair, so `d loss / d f = sigmoid(f) - w`. Setting
//! `weight_override = Some(1.0)` recovers the plain DPO objective.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::preference::PreferencePair;
use crate::scalar::{log_sigmoid, sigmoid, Scalar};
use crate::scorer::{ScorerError, TrainablePolicy};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CpoError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("policy and reference have different shapes")]
    ShapeMismatch,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpoConfig {
    pub eta: f64,
    pub mu: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Replaces `sigmoid(mu * g)` for every pair when set.
    pub weight_override: Option<f64>,
    pub seed: u64,
    /// Also log the loss over the whole pair set after every step.
    pub track_full_loss: bool,
}

impl Default for CpoConfig {
    fn default() -> Self {
        CpoConfig {
            eta: 0.1,
            mu: 0.7,
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 1,
            momentum: 0.0,
            weight_override: None,
            seed: 0,
            track_full_loss: false,
        }
    }
}

impl CpoConfig {
    pub fn validate(&self) -> Result<(), CpoError> {
        let bad = |m: &str| Err(CpoError::InvalidConfig(m.to_string()));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu must be non-negative");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if let Some(w) = self.weight_override {
            if !(0.0..=1.0).contains(&w) {
                return bad("weight_override must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Pair weight for contribution gap `g`.
    pub fn weight<T: Scalar>(&self, g: T) -> T {
        match self.weight_override {
            Some(w) => T::of(w),
            None => pair_weight(g, T::of(self.mu)),
        }
    }
}

/// Log-probabilities of both sides under the trained and reference policies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores<T> {
    pub lp_plus_trained: T,
    pub lp_plus_ref: T,
    pub lp_minus_trained: T,
    pub lp_minus_ref: T,
}

pub fn margin<T: Scalar>(s: &PairScores<T>, eta: T) -> T {
    eta * ((s.lp_plus_trained - s.lp_plus_ref) - (s.lp_minus_trained - s.lp_minus_ref))
}

pub fn pair_weight<T: Scalar>(g: T, mu: T) -> T {
    sigmoid(mu * g)
}

pub fn weighted_pair_loss<T: Scalar>(f: T, w: T) -> T {
    -(w * log_sigmoid(f) + (T::one() - w) * log_sigmoid(-f))
}

pub fn pair_loss<T: Scalar>(f: T, g: T, mu: T) -> T {
    weighted_pair_loss(f, pair_weight(g, mu))
}

/// Derivative of [`weighted_pair_loss`] with respect to `f`.
pub fn pair_loss_grad_f<T: Scalar>(f: T, w: T) -> T {
    sigmoid(f) - w
}

/// Mean loss over precomputed `(scores, g)` items.
pub fn mean_loss<T: Scalar>(items: &[(PairScores<T>, T)], cfg: &CpoConfig) -> Result<T, CpoError> {
    if items.is_empty() {
        return Err(CpoError::EmptyBatch);
    }
    let eta = T::of(cfg.eta);
    let total = items
        .iter()
        .fold(T::zero(), |acc, (s, g)| acc + weighted_pair_loss(margin(s, eta), cfg.weight(*g)));
    Ok(total / T::of(items.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchEval<T> {
    pub loss: T,
    pub grad: Vec<T>,
    pub mean_weight: T,
    /// Fraction of pairs with `f > 0`.
    pub accuracy: f64,
}

fn check_shapes<T: Scalar>(policy: &TrainablePolicy<T>, reference: &TrainablePolicy<T>) -> Result<(), CpoError> {
    if policy.num_params() != reference.num_params()
        || policy.buckets() != reference.buckets()
        || policy.vocab().tokens() != reference.vocab().tokens()
    {
        return Err(CpoError::ShapeMismatch);
    }
    Ok(())
}

fn reference_scores<T: Scalar>(reference: &TrainablePolicy<T>, pairs: &[PreferencePair]) -> Result<Vec<(T, T)>, CpoError> {
    pairs
        .iter()
        .map(|p| Ok((reference.score(&p.prompt, &p.u_plus)?, reference.score(&p.prompt, &p.u_minus)?)))
        .collect()
}

fn eval_batch<T: Scalar>(
    policy: &TrainablePolicy<T>,
    pairs: &[&PreferencePair],
    refs: &[(T, T)],
    cfg: &CpoConfig,
    with_grad: bool,
) -> Result<BatchEval<T>, CpoError> {
    if pairs.is_empty() {
        return Err(CpoError::EmptyBatch);
    }
    let n = T::of(pairs.len() as f64);
    let eta = T::of(cfg.eta);
    let mut grad = vec![T::zero(); if with_grad { policy.num_params() } else { 0 }];
    let mut loss = T::zero();
    let mut weight_sum = T::zero();
    let mut wins = 0usize;
    for (p, &(ref_plus, ref_minus)) in pairs.iter().zip(refs) {
        let scores = PairScores {
            lp_plus_trained: policy.score(&p.prompt, &p.u_plus)?,
            lp_plus_ref: ref_plus,
            lp_minus_trained: policy.score(&p.prompt, &p.u_minus)?,
            lp_minus_ref: ref_minus,
        };
        let f = margin(&scores, eta);
        let w = cfg.weight(T::of(p.g));
        loss = loss + weighted_pair_loss(f, w);
        weight_sum = weight_sum + w;
        if f > T::zero() {
            wins += 1;
        }
        if with_grad {
            // d loss / d theta = (sigmoid(f) - w) * eta * (grad lp+ - grad lp-), averaged
            let scale = pair_loss_grad_f(f, w) * eta / n;
            policy.accumulate_grad_score(&p.prompt, &p.u_plus, scale, &mut grad)?;
            policy.accumulate_grad_score(&p.prompt, &p.u_minus, -scale, &mut grad)?;
        }
    }
    Ok(BatchEval {
        loss: loss / n,
        grad,
        mean_weight: weight_sum / n,
        accuracy: wins as f64 / pairs.len() as f64,
    })
}

/// Mean pair loss over `pairs` and its exact gradient.
pub fn batch_loss_and_grad<T: Scalar>(
    policy: &TrainablePolicy<T>,
    reference: &TrainablePolicy<T>,
    pairs: &[PreferencePair],
    cfg: &CpoConfig,
) -> Result<BatchEval<T>, CpoError> {
    check_shapes(policy, reference)?;
    let refs = reference_scores(reference, pairs)?;
    let batch: Vec<&PreferencePair> = pairs.iter().collect();
    eval_batch(policy, &batch, &refs, cfg, true)
}

/// Loss, mean weight and preference accuracy without the gradient.
pub fn evaluate_pairs<T: Scalar>(
    policy: &TrainablePolicy<T>,
    reference: &TrainablePolicy<T>,
    pairs: &[PreferencePair],
    cfg: &CpoConfig,
) -> Result<BatchEval<T>, CpoError> {
    check_shapes(policy, reference)?;
    let refs = reference_scores(reference, pairs)?;
    let batch: Vec<&PreferencePair> = pairs.iter().collect();
    eval_batch(policy, &batch, &refs, cfg, false)
}

/// Largest relative gap between the analytic gradient and central
/// differences with step `h`, over every parameter.
pub fn max_gradient_error(
    policy: &TrainablePolicy<f64>,
    reference: &TrainablePolicy<f64>,
    pairs: &[PreferencePair],
    cfg: &CpoConfig,
    h: f64,
) -> Result<f64, CpoError> {
    let analytic = batch_loss_and_grad(policy, reference, pairs, cfg)?.grad;
    let mut probe = policy.clone();
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let x = probe.params()[i];
        probe.params_mut()[i] = x + h;
        let up = evaluate_pairs(&probe, reference, pairs, cfg)?.loss;
        probe.params_mut()[i] = x - h;
        let down = evaluate_pairs(&probe, reference, pairs, cfg)?.loss;
        probe.params_mut()[i] = x;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub mean_weight: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub policy: TrainablePolicy<T>,
    pub log: Vec<TrainLogEntry>,
}

/// Minibatch gradient descent (optionally with momentum) on the mean pair
/// loss. The reference policy is only read.
pub fn train_cpo<T: Scalar>(
    mut policy: TrainablePolicy<T>,
    reference: &TrainablePolicy<T>,
    pairs: &[PreferencePair],
    cfg: &CpoConfig,
) -> Result<TrainOutcome<T>, CpoError> {
    cfg.validate()?;
    check_shapes(&policy, reference)?;
    if pairs.is_empty() {
        return Err(CpoError::EmptyBatch);
    }
    let refs = reference_scores(reference, pairs)?;
    let all: Vec<&PreferencePair> = pairs.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut velocity = vec![T::zero(); policy.num_params()];
    let lr = T::of(cfg.learning_rate);
    let momentum = T::of(cfg.momentum);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let batch_refs: Vec<(T, T)> = chunk.iter().map(|&i| refs[i]).collect();
            let eval = eval_batch(&policy, &batch, &batch_refs, cfg, true)?;
            let loss = eval.loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(CpoError::Diverged { step, loss });
            }
            for ((p, v), &g) in policy.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&eval.grad) {
                *v = momentum * *v + g;
                *p = *p - lr * *v;
            }
            if policy.params().iter().any(|p| !p.is_finite()) {
                return Err(CpoError::Diverged { step, loss });
            }
            let full_loss = if cfg.track_full_loss {
                Some(eval_batch(&policy, &all, &refs, cfg, false)?.loss.to_f64_lossy())
            } else {
                None
            };
            debug!("step {step}: loss {loss:.6} accuracy {:.3}", eval.accuracy);
            log.push(TrainLogEntry {
                step,
                epoch,
                loss,
                mean_weight: eval.mean_weight.to_f64_lossy(),
                accuracy: eval.accuracy,
                full_loss,
            });
        }
    }
    info!("trained {step} steps over {} pairs", pairs.len());
    Ok(TrainOutcome { policy, log })
}
