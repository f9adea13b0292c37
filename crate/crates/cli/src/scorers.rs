//! Scorer specs: `mock:<script.json>`, `remote:<url>`, `policy:<checkpoint.json>`.

use std::path::{Path, PathBuf};

use clarify_core::cpo::CpoConfig;
use clarify_core::protocol::{format_dcm_target, ClarificationRecord};
use clarify_core::scorer::{
    Capabilities, MockScorer, MockScript, RemoteScorer, SamplingParams, Scorer, ScorerError, TrainablePolicy,
};
use clarify_core::{Policy, PolicyScorer};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::settings::Settings;

#[derive(Clone, Debug, PartialEq)]
pub enum ScorerSpec {
    Mock(PathBuf),
    Remote(String),
    Policy(PathBuf),
}

impl ScorerSpec {
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        match spec.split_once(':') {
            Some(("mock", p)) => Ok(ScorerSpec::Mock(p.into())),
            Some(("remote", url)) => Ok(ScorerSpec::Remote(url.to_string())),
            Some(("policy", p)) => Ok(ScorerSpec::Policy(p.into())),
            _ => Err(CliError::config(format!(
                "scorer spec {spec:?} must be mock:<file>, remote:<url> or policy:<file>"
            ))),
        }
    }

    /// Local files the scorer reads.
    pub fn input(&self) -> Option<&Path> {
        match self {
            ScorerSpec::Mock(p) | ScorerSpec::Policy(p) => Some(p),
            ScorerSpec::Remote(_) => None,
        }
    }
}

/// What a scorer is used for. A policy checkpoint generates bare clarified
/// utterances, so in the clarifier role its samples are wrapped in the
/// clarification-model output layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Parser,
    Clarifier,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub seed: u64,
    pub config: CpoConfig,
    pub policy: Policy,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::missing_input(format!("{}: {e}", path.display())))?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| CliError::invalid_input(format!("{}: {e}", path.display())))?;
    // Deserialization skips the size check; redo it.
    let p = ck.policy.clone();
    TrainablePolicy::from_params(p.vocab().clone(), p.buckets(), p.params().to_vec())
        .map_err(|e| CliError::invalid_input(format!("{}: {e}", path.display())))?;
    Ok(ck)
}

struct ClarifierAdapter<S>(S);

impl<S: Scorer> Scorer for ClarifierAdapter<S> {
    fn capabilities(&self) -> Capabilities {
        self.0.capabilities()
    }

    fn sample(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<String>, ScorerError> {
        Ok(self
            .0
            .sample(prompt, params)?
            .into_iter()
            .map(|text| match ClarificationRecord::new("", "", text.clone()) {
                Ok(rec) => format_dcm_target(&rec),
                Err(_) => text,
            })
            .collect())
    }

    fn score(&self, prompt: &str, completion: &str) -> Result<f64, ScorerError> {
        self.0.score(prompt, completion)
    }
}

pub fn open_scorer(spec: &ScorerSpec, role: Role, settings: &Settings) -> Result<Box<dyn Scorer>, CliError> {
    Ok(match spec {
        ScorerSpec::Mock(path) => Box::new(MockScorer::from_script(MockScript::load(path)?)),
        ScorerSpec::Remote(url) => Box::new(RemoteScorer::new(settings.remote(url))?),
        ScorerSpec::Policy(path) => {
            let ck = load_checkpoint(path)?;
            let scorer = PolicyScorer::new(ck.policy, settings.seed());
            match role {
                Role::Clarifier => Box::new(ClarifierAdapter(scorer)),
                Role::Parser | Role::Teacher => Box::new(scorer),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clarify_core::protocol::parse_dcm_output;
    use clarify_core::scorer::Vocab;

    #[test]
    fn spec_parsing() {
        assert_eq!(ScorerSpec::parse("mock:a.json").unwrap(), ScorerSpec::Mock("a.json".into()));
        assert_eq!(
            ScorerSpec::parse("remote:http://h:1").unwrap(),
            ScorerSpec::Remote("http://h:1".into())
        );
        assert!(ScorerSpec::parse("a.json").is_err());
        assert!(ScorerSpec::parse("file:a.json").is_err());
    }

    #[test]
    fn clarifier_role_wraps_policy_samples() {
        let policy = Policy::uniform(Vocab::new(["sorry", "again"]).unwrap(), 2);
        let s = ClarifierAdapter(PolicyScorer::new(policy, 1));
        let p = SamplingParams::default().with_n(20);
        for text in s.sample("x", &p).unwrap() {
            // an empty draw stays unparseable and is dropped downstream
            if let Ok(rec) = parse_dcm_output(&text) {
                assert!(!rec.clarified.trim().is_empty());
            }
        }
    }
}
