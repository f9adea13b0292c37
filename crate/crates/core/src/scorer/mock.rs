use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{prompt_key, Capabilities, SamplingParams, Scorer, ScorerError};

/// A scripted score, given either as a probability or directly as a log-prob.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedScore {
    LogProb { logprob: f64 },
    Prob { p: f64 },
}

impl ScriptedScore {
    pub fn logprob(self) -> f64 {
        match self {
            ScriptedScore::LogProb { logprob } => logprob,
            ScriptedScore::Prob { p } => p.ln(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Handed out in order across `sample` calls.
    #[serde(default)]
    pub samples: Vec<String>,
    #[serde(default)]
    pub scores: BTreeMap<String, ScriptedScore>,
}

/// Prompt-key → canned behavior. Keys come from [`prompt_key`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub entries: BTreeMap<String, ScriptEntry>,
    /// Answers prompts with no entry. Its samples repeat cyclically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<ScriptEntry>,
}

impl MockScript {
    pub fn entry(&mut self, prompt: &str) -> &mut ScriptEntry {
        self.entries.entry(prompt_key(prompt)).or_default()
    }

    pub fn push_samples<I, S>(&mut self, prompt: &str, samples: I) -> &mut Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.entry(prompt).samples.extend(samples.into_iter().map(Into::into));
        self
    }

    pub fn set_prob(&mut self, prompt: &str, completion: &str, p: f64) -> &mut Self {
        self.entry(prompt).scores.insert(completion.to_string(), ScriptedScore::Prob { p });
        self
    }

    pub fn set_logprob(&mut self, prompt: &str, completion: &str, logprob: f64) -> &mut Self {
        self.entry(prompt)
            .scores
            .insert(completion.to_string(), ScriptedScore::LogProb { logprob });
        self
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScorerError::Config(format!("reading script {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ScorerError::Config(format!("parsing script {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)
    }
}

/// Deterministic scorer driven by a [`MockScript`]. Counts its calls.
#[derive(Debug)]
pub struct MockScorer {
    script: MockScript,
    cursors: Mutex<HashMap<String, usize>>,
    sample_calls: AtomicUsize,
    score_calls: AtomicUsize,
}

impl MockScorer {
    pub fn from_script(script: MockScript) -> Self {
        MockScorer {
            script,
            cursors: Mutex::new(HashMap::new()),
            sample_calls: AtomicUsize::new(0),
            score_calls: AtomicUsize::new(0),
        }
    }

    pub fn sample_calls(&self) -> usize {
        self.sample_calls.load(Ordering::SeqCst)
    }

    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        self.sample_calls() + self.score_calls()
    }
}

impl Scorer for MockScorer {
    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    fn sample(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>, ScorerError> {
        self.sample_calls.fetch_add(1, Ordering::SeqCst);
        params.validate()?;
        let key = prompt_key(prompt);
        if let Some(entry) = self.script.entries.get(&key) {
            let mut cursors = self.cursors.lock().expect("cursor lock poisoned");
            let cursor = cursors.entry(key.clone()).or_insert(0);
            let end = *cursor + params.n;
            if end > entry.samples.len() {
                return Err(ScorerError::Exhausted(key));
            }
            let out = entry.samples[*cursor..end].to_vec();
            *cursor = end;
            return Ok(out);
        }
        let fallback = self
            .script
            .fallback
            .as_ref()
            .filter(|f| !f.samples.is_empty())
            .ok_or(ScorerError::Unscripted(key))?;
        let mut cursors = self.cursors.lock().expect("cursor lock poisoned");
        let cursor = cursors.entry(String::new()).or_insert(0);
        let out = (0..params.n)
            .map(|i| fallback.samples[(*cursor + i) % fallback.samples.len()].clone())
            .collect();
        *cursor += params.n;
        Ok(out)
    }

    fn score(&self, prompt: &str, completion: &str) -> Result<f64, ScorerError> {
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        let key = prompt_key(prompt);
        let entry = self
            .script
            .entries
            .get(&key)
            .or(self.script.fallback.as_ref())
            .ok_or_else(|| ScorerError::Unscripted(key.clone()))?;
        entry
            .scores
            .get(completion)
            .map(|s| s.logprob())
            .ok_or(ScorerError::UnscriptedCompletion {
                key,
                completion: completion.to_string(),
            })
    }
}
