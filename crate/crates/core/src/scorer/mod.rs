//! The generative scoring contract shared by the parser, the teacher and the
//! clarification model, with remote, scripted and trainable implementations.
//!
//! `score` returns the total log-probability of a completion, summed over its
//! tokens with no length normalization.

mod mock;
mod policy;
mod remote;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use mock::{MockScorer, MockScript, ScriptEntry, ScriptedScore};
pub use policy::{policy_nll_loss, PolicyScorer, TrainablePolicy, Vocab, END_TOKEN};
pub use remote::{RemoteConfig, RemoteScorer};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScorerError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("scorer lacks capability: {0}")]
    Capability(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("no script entry for prompt key {0}")]
    Unscripted(String),
    #[error("script for prompt key {key} has no score for completion {completion:?}")]
    UnscriptedCompletion { key: String, completion: String },
    #[error("script for prompt key {0} ran out of samples")]
    Exhausted(String),
    #[error("token {0:?} is not in the vocabulary")]
    OutOfVocab(String),
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub can_sample: bool,
    pub can_score: bool,
}

impl Capabilities {
    pub const ALL: Capabilities = Capabilities {
        can_sample: true,
        can_score: true,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_length: usize,
    pub n: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.6,
            top_p: 0.9,
            max_output_length: 512,
            n: 1,
        }
    }
}

impl SamplingParams {
    /// Single near-deterministic draw.
    pub fn greedy() -> Self {
        SamplingParams {
            temperature: 1e-3,
            top_p: 1.0,
            n: 1,
            ..Default::default()
        }
    }

    pub fn with_n(&self, n: usize) -> Self {
        SamplingParams { n, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ScorerError::InvalidParams(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ScorerError::InvalidParams(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.n == 0 {
            return Err(ScorerError::InvalidParams("n must be at least 1".into()));
        }
        Ok(())
    }
}

pub trait Scorer: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Exactly `params.n` completions.
    fn sample(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>, ScorerError>;

    /// Total log-probability of `completion` given `prompt`.
    fn score(&self, prompt: &str, completion: &str) -> Result<f64, ScorerError>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn sample(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>, ScorerError> {
        (**self).sample(prompt, params)
    }
    fn score(&self, prompt: &str, completion: &str) -> Result<f64, ScorerError> {
        (**self).score(prompt, completion)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn sample(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>, ScorerError> {
        (**self).sample(prompt, params)
    }
    fn score(&self, prompt: &str, completion: &str) -> Result<f64, ScorerError> {
        (**self).score(prompt, completion)
    }
}

/// Stable key for a prompt: first 16 hex digits of its SHA-256.
pub fn prompt_key(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    hex::encode(&digest[..8])
}
