//! Run settings: a flat TOML file merged with command-line flags.
//!
//! String values in the file may reference environment variables as
//! `${NAME}`. Artifacts record the settings as written, never the expanded
//! values, so secrets passed this way stay off disk.

use std::path::{Path, PathBuf};

use clap::Args;
use clarify_core::cpo::CpoConfig;
use clarify_core::scorer::{RemoteConfig, SamplingParams};
use clarify_core::PipelineConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Every field is optional; flags override the config file, which overrides
/// built-in defaults.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Corpus file used when a command's --corpus is omitted.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Parser scorer: mock:<script.json>, remote:<url> or policy:<checkpoint.json>.
    #[arg(long, global = true)]
    pub parser: Option<String>,
    /// Clarification-model scorer spec.
    #[arg(long, global = true)]
    pub dcm: Option<String>,
    /// Teacher scorer spec.
    #[arg(long, global = true)]
    pub teacher: Option<String>,
    /// Environment variable holding the bearer token for remote scorers.
    #[arg(long, global = true)]
    pub token_env: Option<String>,
    #[arg(long, global = true)]
    pub timeout_ms: Option<u64>,
    #[arg(long, global = true)]
    pub max_retries: Option<u32>,
    #[arg(long, global = true)]
    pub max_in_flight: Option<usize>,
    /// Seed-set fraction for `split`.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Parser samples per voting round.
    #[arg(long, global = true)]
    pub o: Option<usize>,
    /// Clarifications sampled per instance.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub window: Option<usize>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub top_p: Option<f64>,
    #[arg(long, global = true)]
    pub max_output_length: Option<usize>,
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    #[arg(long, global = true)]
    pub mu: Option<f64>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub momentum: Option<f64>,
    /// Constant pair weight; 1.0 trains with the plain DPO loss.
    #[arg(long, global = true)]
    pub weight_override: Option<f64>,
    /// Log the loss over all pairs after every training step.
    #[arg(long, global = true)]
    pub track_full_loss: Option<bool>,
    /// Hash buckets for prompt features of a fresh policy.
    #[arg(long, global = true)]
    pub buckets: Option<usize>,
    /// Initial parameter range of a fresh policy.
    #[arg(long, global = true)]
    pub init_scale: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

macro_rules! merge_fields {
    ($hi:expr, $lo:expr, $($f:ident),*) => {
        Settings { $($f: $hi.$f.clone().or_else(|| $lo.$f.clone()),)* }
    };
}

impl Settings {
    /// Fields set in `self` win over those in `other`.
    pub fn over(&self, other: &Settings) -> Settings {
        merge_fields!(
            self, other, corpus, out_dir, parser, dcm, teacher, token_env, timeout_ms, max_retries,
            max_in_flight, alpha, o, n, window, temperature, top_p, max_output_length, eta, mu,
            learning_rate, epochs, batch_size, momentum, weight_override, track_full_loss, buckets,
            init_scale, seed, workers
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn sampling(&self) -> SamplingParams {
        let d = SamplingParams::default();
        SamplingParams {
            temperature: self.temperature.unwrap_or(d.temperature),
            top_p: self.top_p.unwrap_or(d.top_p),
            max_output_length: self.max_output_length.unwrap_or(d.max_output_length),
            n: 1,
        }
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let d = PipelineConfig::default();
        let cfg = PipelineConfig {
            window: self.window.unwrap_or(d.window),
            sampling: self.sampling(),
            clarifications: self.n.unwrap_or(d.clarifications),
            trials: self.o.unwrap_or(d.trials),
            workers: self.workers.unwrap_or(d.workers),
        };
        cfg.sampling
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        if cfg.trials == 0 || cfg.clarifications == 0 {
            return Err(CliError::config("o and n must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn cpo(&self) -> Result<CpoConfig, CliError> {
        let d = CpoConfig::default();
        let cfg = CpoConfig {
            eta: self.eta.unwrap_or(d.eta),
            mu: self.mu.unwrap_or(d.mu),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            momentum: self.momentum.unwrap_or(d.momentum),
            weight_override: self.weight_override.or(d.weight_override),
            seed: self.seed(),
            track_full_loss: self.track_full_loss.unwrap_or(d.track_full_loss),
        };
        cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn remote(&self, endpoint: &str) -> RemoteConfig {
        let mut cfg = RemoteConfig::new(endpoint);
        cfg.token_env = self.token_env.clone();
        cfg.timeout_ms = self.timeout_ms.unwrap_or(cfg.timeout_ms);
        cfg.max_retries = self.max_retries.unwrap_or(cfg.max_retries);
        cfg.max_in_flight = self.max_in_flight.unwrap_or(cfg.max_in_flight);
        cfg
    }
}

/// Replaces each `${NAME}` with the value of the environment variable.
pub fn interpolate(text: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<String, CliError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| CliError::config(format!("unterminated ${{ in {text:?}")))?;
        let name = &after[..end];
        let value = lookup(name).ok_or_else(|| CliError::config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(v: &mut toml::Value, lookup: &dyn Fn(&str) -> Option<String>) -> Result<(), CliError> {
    match v {
        toml::Value::String(s) => *s = interpolate(s, lookup)?,
        toml::Value::Array(items) => {
            for item in items {
                interpolate_value(item, lookup)?;
            }
        }
        toml::Value::Table(t) => {
            for (_, item) in t.iter_mut() {
                interpolate_value(item, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// The file as written and with variables expanded.
pub struct LoadedSettings {
    pub raw: Settings,
    pub resolved: Settings,
}

pub fn parse_settings(text: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<LoadedSettings, CliError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
    let raw: Settings = toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
    let mut expanded = toml::Value::Table(table);
    interpolate_value(&mut expanded, lookup)?;
    let resolved: Settings = expanded
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
    Ok(LoadedSettings { raw, resolved })
}

pub fn load_settings(path: &Path) -> Result<LoadedSettings, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::missing_input(format!("config {}: {e}", path.display())))?;
    parse_settings(&text, &|name| std::env::var(name).ok())
}

/// Short digest of the command, recorded settings and input contents.
pub fn fingerprint(command: &str, recorded: &Settings, inputs: &[(String, String)]) -> String {
    let doc = serde_json::json!({
        "command": command,
        "settings": recorded,
        "inputs": inputs,
    });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    hex::encode(&digest[..8])
}
