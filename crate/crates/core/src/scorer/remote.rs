//! HTTP client for the two-endpoint scoring service:
//!
//! ```text
//! POST /v1/sample {prompt, n, temperature, top_p, max_tokens} -> {samples: [text]}
//! POST /v1/score  {prompt, completion}                         -> {logprob: number}
//! ```
//!
//! Requests carry `Authorization: Bearer <token>` when a token variable is
//! configured. Connection failures, timeouts, 429 and 5xx are retried with
//! exponential backoff; 404/501 mean the server lacks the endpoint.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::{debug, warn};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Capabilities, SamplingParams, Scorer, ScorerError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8000`.
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub timeout_ms: u64,
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            token_env: None,
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 250,
            max_in_flight: 8,
        }
    }
}

/// Counting gate bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate lock poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct SampleRequest<'a> {
    prompt: &'a str,
    n: usize,
    temperature: f64,
    top_p: f64,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct SampleResponse {
    samples: Vec<String>,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    prompt: &'a str,
    completion: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    logprob: f64,
}

enum Failure {
    Retryable(String),
    Fatal(ScorerError),
}

#[derive(Debug)]
pub struct RemoteScorer {
    client: Client,
    config: RemoteConfig,
    token: Option<String>,
    gate: Gate,
}

impl RemoteScorer {
    pub fn new(config: RemoteConfig) -> Result<Self, ScorerError> {
        let token = match &config.token_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| ScorerError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ScorerError::Config(e.to_string()))?;
        Ok(RemoteScorer {
            client,
            gate: Gate::new(config.max_in_flight),
            config,
            token,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.endpoint.trim_end_matches('/'))
    }

    fn attempt<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, Failure> {
        let _permit = self.gate.acquire();
        let mut req = self.client.post(self.url(path)).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status();
        if status.is_success() {
            return resp
                .json::<R>()
                .map_err(|e| Failure::Fatal(ScorerError::InvalidResponse(e.to_string())));
        }
        let body = resp.text().unwrap_or_default();
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() && status != StatusCode::NOT_IMPLEMENTED {
            return Err(Failure::Retryable(format!("status {status}: {body}")));
        }
        if status == StatusCode::NOT_FOUND || status == StatusCode::NOT_IMPLEMENTED {
            return Err(Failure::Fatal(ScorerError::Capability(format!("{path} unavailable ({status})"))));
        }
        Err(Failure::Fatal(ScorerError::Rejected {
            status: status.as_u16(),
            body,
        }))
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, ScorerError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(path, body) {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(message)) => {
                    if attempts > self.config.max_retries {
                        return Err(ScorerError::Transport { attempts, message });
                    }
                    let delay = self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                    warn!("{path} attempt {attempts} failed ({message}); retrying in {delay} ms");
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }
}

impl Scorer for RemoteScorer {
    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    fn sample(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>, ScorerError> {
        params.validate()?;
        let req = SampleRequest {
            prompt,
            n: params.n,
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_output_length,
        };
        let resp: SampleResponse = self.post("/v1/sample", &req)?;
        if resp.samples.len() != params.n {
            return Err(ScorerError::InvalidResponse(format!(
                "asked for {} samples, got {}",
                params.n,
                resp.samples.len()
            )));
        }
        debug!("sampled {} completions", params.n);
        Ok(resp.samples)
    }

    fn score(&self, prompt: &str, completion: &str) -> Result<f64, ScorerError> {
        let resp: ScoreResponse = self.post("/v1/score", &ScoreRequest { prompt, completion })?;
        if !resp.logprob.is_finite() || resp.logprob > 0.0 {
            return Err(ScorerError::InvalidResponse(format!(
                "logprob must be finite and <= 0, got {}",
                resp.logprob
            )));
        }
        Ok(resp.logprob)
    }
}
