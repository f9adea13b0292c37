//! Output bookkeeping: overwrite protection, provenance sidecars and the
//! timestamped run log.
//!
//! JSONL artifacts keep one record per line; their provenance goes to
//! `<file>.meta.json`. JSON artifacts carry it inline. Neither contains a
//! timestamp, so identical runs produce identical bytes.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clarify_core::jsonl;
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, ErrorKind};
use crate::settings::{fingerprint, Settings};

pub const RUN_LOG: &str = "clarify-runs.log";

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::missing_input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

#[derive(Debug)]
pub struct Run {
    command: &'static str,
    recorded: Settings,
    inputs: Vec<(String, String)>,
    fingerprint: String,
    seed: u64,
    force: bool,
    written: Vec<PathBuf>,
}

impl Run {
    /// Checks inputs exist and outputs are free (unless `force`) before any
    /// work starts.
    pub fn start(
        command: &'static str,
        recorded: &Settings,
        inputs: &[&Path],
        outputs: &[&Path],
        force: bool,
    ) -> Result<Run, CliError> {
        let mut digests = Vec::with_capacity(inputs.len());
        for p in inputs {
            if !p.is_file() {
                return Err(CliError::missing_input(format!("input {} does not exist", p.display())));
            }
            digests.push((p.display().to_string(), file_digest(p)?));
        }
        for p in outputs {
            for candidate in [p.to_path_buf(), meta_path(p)] {
                if candidate.exists() && !force {
                    return Err(CliError::new(
                        ErrorKind::OutputExists,
                        format!("{} exists; pass --force to overwrite", candidate.display()),
                    ));
                }
            }
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
        }
        // Outputs named on the command line do not affect the fingerprint.
        let fingerprint = fingerprint(command, recorded, &digests);
        Ok(Run {
            command,
            seed: recorded.seed(),
            recorded: recorded.clone(),
            inputs: digests,
            fingerprint,
            force,
            written: Vec::new(),
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn provenance(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("command".into(), json!(self.command));
        m.insert("fingerprint".into(), json!(self.fingerprint));
        m.insert("seed".into(), json!(self.seed));
        m.insert("settings".into(), json!(self.recorded));
        m.insert("inputs".into(), json!(self.inputs));
        m
    }

    fn guard(&self, path: &Path) -> Result<(), CliError> {
        if path.exists() && !self.force && !self.written.iter().any(|w| w == path) {
            return Err(CliError::new(
                ErrorKind::OutputExists,
                format!("{} exists; pass --force to overwrite", path.display()),
            ));
        }
        Ok(())
    }

    /// Writes one record per line plus a `.meta.json` sidecar holding the
    /// provenance and `summary`.
    pub fn write_jsonl<T: Serialize>(&mut self, path: &Path, records: &[T], summary: Value) -> Result<(), CliError> {
        self.write_lines(path, records.len(), summary, |w| jsonl::write_records(w, records))
    }

    /// Like [`Run::write_jsonl`] with the lines produced by `write`.
    pub fn write_lines<F>(&mut self, path: &Path, count: usize, summary: Value, write: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
    {
        self.guard(path)?;
        let mp = meta_path(path);
        self.guard(&mp)?;
        let mut w = BufWriter::new(fs::File::create(path)?);
        write(&mut w)?;
        w.flush()?;
        let mut meta = self.provenance();
        meta.insert("records".into(), json!(count));
        meta.insert("summary".into(), summary);
        fs::write(&mp, pretty(&Value::Object(meta))?)?;
        self.written.push(path.to_path_buf());
        self.written.push(mp);
        Ok(())
    }

    /// Writes `body` (a JSON object) with provenance fields added.
    pub fn write_json<T: Serialize>(&mut self, path: &Path, body: &T) -> Result<(), CliError> {
        self.guard(path)?;
        let Value::Object(fields) = serde_json::to_value(body).map_err(|e| CliError::io(e.to_string()))? else {
            return Err(CliError::io("JSON artifact must be an object"));
        };
        let mut doc = self.provenance();
        doc.extend(fields);
        fs::write(path, pretty(&Value::Object(doc))?)?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    /// Appends a timestamped line to the run log beside the first output.
    pub fn finish(self) -> Result<(), CliError> {
        let Some(first) = self.written.first() else {
            return Ok(());
        };
        let dir = first.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let time = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let line = json!({
            "unix_time": time,
            "command": self.command,
            "fingerprint": self.fingerprint,
            "outputs": self.written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        });
        let mut log = OpenOptions::new().create(true).append(true).open(dir.join(RUN_LOG))?;
        writeln!(log, "{line}")?;
        Ok(())
    }
}

fn pretty(v: &Value) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_to_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a.jsonl");
        fs::write(&out, "x").unwrap();
        let err = Run::start("t", &Settings::default(), &[], &[&out], false).unwrap_err();
        assert_eq!(err.kind, ErrorKind::OutputExists);
        assert!(Run::start("t", &Settings::default(), &[], &[&out], true).is_ok());
    }

    #[test]
    fn missing_input_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = Run::start("t", &Settings::default(), &[&dir.path().join("nope")], &[], false).unwrap_err();
        assert_eq!(err.kind, ErrorKind::MissingInput);
    }

    #[test]
    fn artifacts_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sub/a.jsonl");
        let json_out = dir.path().join("sub/b.json");
        let write = |force| {
            let mut run = Run::start("t", &Settings::default(), &[], &[&out, &json_out], force).unwrap();
            run.write_jsonl(&out, &[json!({"a": 1}), json!({"a": 2})], json!({"n": 2})).unwrap();
            run.write_json(&json_out, &json!({"x": 0.5})).unwrap();
            run.finish().unwrap();
            (
                fs::read(&out).unwrap(),
                fs::read(meta_path(&out)).unwrap(),
                fs::read(&json_out).unwrap(),
            )
        };
        let first = write(false);
        assert_eq!(first, write(true));
        assert_eq!(String::from_utf8(first.0).unwrap().lines().count(), 2);
        let doc: Value = serde_json::from_slice(&first.2).unwrap();
        assert_eq!(doc["seed"], json!(0));
        assert!(doc["fingerprint"].is_string());
        let log = fs::read_to_string(dir.path().join("sub").join(RUN_LOG)).unwrap();
        assert_eq!(log.lines().count(), 2);
    }
}
