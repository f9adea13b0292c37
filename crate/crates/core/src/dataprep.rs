//! Ambiguous-relation derivation and the clarification-model SFT set.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::corpus::{AnnotatedInstance, Corpus, RelationType};
use crate::jsonl::{self, JsonlError};
use crate::protocol::{
    format_dcm_target, parse_dcm_output, parse_parse_output, parse_teacher_output, render_dcm_prompt,
    render_dp_prompt, render_teacher_prompt, ParseOutput, ProtocolError, TeacherRequest,
};
use crate::scorer::{SamplingParams, Scorer, ScorerError};

#[derive(Debug, thiserror::Error)]
pub enum DataprepError {
    #[error("instance {0} has no gold relation")]
    NoGold(String),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("refusing to export an empty SFT set")]
    EmptyExport,
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The relation the clarification should steer away from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ambiguity {
    pub output: ParseOutput,
    /// True when the parser was right and the relation was altered at random.
    pub pseudo: bool,
}

/// Returns the parser's prediction when it disagrees with gold; otherwise
/// keeps the gold parent and draws one of the 15 other relation types.
pub fn derive_ambiguous<R: Rng + ?Sized>(
    instance: &AnnotatedInstance,
    prediction: ParseOutput,
    rng: &mut R,
) -> Result<Ambiguity, DataprepError> {
    let gold = instance.gold().ok_or_else(|| DataprepError::NoGold(instance.id().to_string()))?;
    if prediction != ParseOutput::from(gold) {
        return Ok(Ambiguity {
            output: prediction,
            pseudo: false,
        });
    }
    let others: Vec<RelationType> = RelationType::ALL.iter().copied().filter(|&r| r != gold.rel).collect();
    let rel = others[rng.random_range(0..others.len())];
    Ok(Ambiguity {
        output: ParseOutput::Link {
            child: gold.child,
            parent: gold.parent,
            rel,
        },
        pseudo: true,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftProvenance {
    pub dialogue_id: String,
    pub k: usize,
    pub intended: ParseOutput,
    pub ambiguous: ParseOutput,
    pub pseudo: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub target: String,
    pub provenance: SftProvenance,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedInstance {
    pub dialogue_id: String,
    pub k: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SftDataset {
    pub records: Vec<SftRecord>,
    pub skipped: Vec<SkippedInstance>,
}

fn sft_for_instance(
    inst: &AnnotatedInstance,
    parser: &dyn Scorer,
    teacher: &dyn Scorer,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<SftRecord, DataprepError> {
    let gold = inst.gold().ok_or_else(|| DataprepError::NoGold(inst.id().to_string()))?;
    let context = cfg.window(inst.context());
    let greedy = parser.sample(&render_dp_prompt(context), &SamplingParams::greedy())?;
    let prediction = greedy
        .first()
        .map(|t| parse_parse_output(t, inst.k()))
        .ok_or_else(|| ScorerError::InvalidResponse("parser returned no sample".into()))?
        .or_no_link();
    let ambiguity = derive_ambiguous(inst, prediction, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let request = TeacherRequest::new(context, gold, ambiguity.output)?;
    let reply = teacher.sample(&render_teacher_prompt(&request), &cfg.sampling.with_n(1))?;
    let record = parse_teacher_output(reply.first().map(String::as_str).unwrap_or_default())?;
    let target = format_dcm_target(&record);
    debug_assert!(parse_dcm_output(&target).is_ok());
    Ok(SftRecord {
        prompt: render_dcm_prompt(context),
        target,
        provenance: SftProvenance {
            dialogue_id: inst.dialogue_id().to_string(),
            k: inst.k(),
            intended: gold.into(),
            ambiguous: ambiguity.output,
            pseudo: ambiguity.pseudo,
        },
    })
}

/// Builds one SFT record per seed-set instance. Instances without gold, or
/// whose scorer calls or teacher output fail, are skipped with a reason.
pub fn build_clarification_sft<R: Rng + ?Sized>(
    seed_set: &Corpus,
    parser: &dyn Scorer,
    teacher: &dyn Scorer,
    rng: &mut R,
    cfg: &PipelineConfig,
) -> SftDataset {
    // One draw per instance up front keeps results independent of `workers`.
    let jobs: Vec<(&AnnotatedInstance, u64)> = seed_set.instances().iter().map(|i| (i, rng.random())).collect();
    let results = cfg.map_ordered(&jobs, |&(inst, seed)| sft_for_instance(inst, parser, teacher, seed, cfg));
    let mut out = SftDataset::default();
    for ((inst, _), r) in jobs.iter().zip(results) {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(e) => {
                warn!("{}: skipped: {e}", inst.id());
                out.skipped.push(SkippedInstance {
                    dialogue_id: inst.dialogue_id().to_string(),
                    k: inst.k(),
                    reason: e.to_string(),
                });
            }
        }
    }
    info!("sft: {} records, {} skipped", out.records.len(), out.skipped.len());
    out
}

pub fn export_sft(records: &[SftRecord], path: &Path) -> Result<(), DataprepError> {
    if records.is_empty() {
        return Err(DataprepError::EmptyExport);
    }
    let io = |source| DataprepError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    jsonl::write_records(&mut w, records).map_err(io)?;
    w.flush().map_err(io)
}

pub fn import_sft(path: &Path) -> Result<Vec<SftRecord>, DataprepError> {
    let file = File::open(path).map_err(|source| DataprepError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(jsonl::read_records(BufReader::new(file))?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}
