//! Vote-gated parsing with a single clarification fallback.
//!
//! Round 1 samples `o` parser outputs and accepts the most frequent one if
//! it appears more than `o/2` times. Otherwise the clarification model
//! rewrites the current turn and a second round of `o` samples decides by
//! plurality.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::corpus::{AnnotatedInstance, Corpus, InstanceId, Utterance};
use crate::protocol::{
    parse_dcm_output, parse_parse_output, render_dcm_prompt, render_dp_prompt, substitute_clarification,
    ParseOutput, Prediction, ProtocolError,
};
use crate::scorer::{Scorer, ScorerError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error("at least one prediction trial is required")]
    NoTrials,
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteResult {
    pub winner: ParseOutput,
    pub count: usize,
    pub total: usize,
    pub histogram: BTreeMap<ParseOutput, usize>,
    pub abstentions: usize,
}

impl VoteResult {
    /// Strictly more than half of all trials, abstentions included.
    pub fn is_majority(&self) -> bool {
        self.count * 2 > self.total
    }
}

fn tie_key(out: &ParseOutput) -> (usize, Reverse<usize>) {
    match out {
        ParseOutput::NoLink => (0, Reverse(usize::MAX)),
        ParseOutput::Link { parent, rel, .. } => (*parent, Reverse(rel.ordinal())),
    }
}

/// Most frequent valid output; ties prefer the higher parent index, then the
/// earlier relation in canonical order.
pub fn vote(predictions: &[Prediction]) -> VoteResult {
    let mut histogram = BTreeMap::new();
    let mut abstentions = 0;
    for p in predictions {
        match p {
            Prediction::Valid(out) => *histogram.entry(*out).or_insert(0) += 1,
            Prediction::Invalid => abstentions += 1,
        }
    }
    let (winner, count) = histogram
        .iter()
        .max_by_key(|&(out, &n)| (n, tie_key(out)))
        .map(|(out, &n)| (*out, n))
        .unwrap_or((ParseOutput::NoLink, 0));
    VoteResult {
        winner,
        count,
        total: predictions.len(),
        histogram,
        abstentions,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Confident,
    Clarified,
    /// The clarification model gave nothing usable; round 1 stands.
    ClarificationFailed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub dialogue_id: String,
    pub k: usize,
    pub round1: VoteResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clarified: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub round2: Option<VoteResult>,
    #[serde(rename = "final")]
    pub final_output: ParseOutput,
    pub gate: GateDecision,
}

impl InferenceTrace {
    pub fn id(&self) -> InstanceId {
        InstanceId::new(self.dialogue_id.clone(), self.k)
    }
}

fn voting_round(parser: &dyn Scorer, context: &[Utterance], k: usize, cfg: &PipelineConfig) -> Result<VoteResult, InferenceError> {
    let samples = parser.sample(&render_dp_prompt(cfg.window(context)), &cfg.sampling.with_n(cfg.trials))?;
    let preds: Vec<Prediction> = samples.iter().map(|s| parse_parse_output(s, k)).collect();
    Ok(vote(&preds))
}

/// First parseable clarification among `cfg.clarifications` samples.
fn clarify(dcm: &dyn Scorer, context: &[Utterance], cfg: &PipelineConfig) -> Result<Option<String>, InferenceError> {
    let samples = dcm.sample(
        &render_dcm_prompt(cfg.window(context)),
        &cfg.sampling.with_n(cfg.clarifications.max(1)),
    )?;
    Ok(samples
        .iter()
        .filter_map(|s| parse_dcm_output(s).ok())
        .map(|r| r.clarified.trim().to_string())
        .find(|c| !c.is_empty()))
}

pub fn gated_parse(
    parser: &dyn Scorer,
    dcm: &dyn Scorer,
    instance: &AnnotatedInstance,
    cfg: &PipelineConfig,
) -> Result<InferenceTrace, InferenceError> {
    if cfg.trials == 0 {
        return Err(InferenceError::NoTrials);
    }
    let context = instance.context();
    let round1 = voting_round(parser, context, instance.k(), cfg)?;
    let mut trace = InferenceTrace {
        dialogue_id: instance.dialogue_id().to_string(),
        k: instance.k(),
        final_output: round1.winner,
        round1,
        clarified: None,
        round2: None,
        gate: GateDecision::Confident,
    };
    if trace.round1.is_majority() {
        return Ok(trace);
    }
    let Some(clarified) = clarify(dcm, context, cfg)? else {
        debug!("{}: no usable clarification, keeping round 1", instance.id());
        trace.gate = GateDecision::ClarificationFailed;
        return Ok(trace);
    };
    let clarified_ctx = substitute_clarification(context, &clarified)?;
    let round2 = voting_round(parser, &clarified_ctx, instance.k(), cfg)?;
    trace.final_output = round2.winner;
    trace.round2 = Some(round2);
    trace.clarified = Some(clarified);
    trace.gate = GateDecision::Clarified;
    Ok(trace)
}

/// Round-1 versus final correctness counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionStats {
    pub total: usize,
    pub clarified: usize,
    pub correct_to_correct: usize,
    pub correct_to_incorrect: usize,
    pub incorrect_to_correct: usize,
    pub incorrect_to_incorrect: usize,
}

impl TransitionStats {
    pub fn record(&mut self, round1_correct: bool, final_correct: bool, clarified: bool) {
        self.total += 1;
        self.clarified += clarified as usize;
        match (round1_correct, final_correct) {
            (true, true) => self.correct_to_correct += 1,
            (true, false) => self.correct_to_incorrect += 1,
            (false, true) => self.incorrect_to_correct += 1,
            (false, false) => self.incorrect_to_incorrect += 1,
        }
    }

    /// The four cells as fractions of `total` (zero when empty), in the order
    /// C→C, C→I, I→C, I→I.
    pub fn fractions(&self) -> [f64; 4] {
        let d = self.total.max(1) as f64;
        [
            self.correct_to_correct as f64 / d,
            self.correct_to_incorrect as f64 / d,
            self.incorrect_to_correct as f64 / d,
            self.incorrect_to_incorrect as f64 / d,
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchInference {
    pub predictions: BTreeMap<InstanceId, ParseOutput>,
    pub traces: Vec<InferenceTrace>,
    pub failures: Vec<(InstanceId, String)>,
    pub transitions: TransitionStats,
}

/// Runs [`gated_parse`] over every instance. Failures are collected and the
/// failing instance gets no prediction.
pub fn batch_infer(corpus: &Corpus, parser: &dyn Scorer, dcm: &dyn Scorer, cfg: &PipelineConfig) -> BatchInference {
    let results = cfg.map_ordered(corpus.instances(), |inst| gated_parse(parser, dcm, inst, cfg));
    let mut out = BatchInference::default();
    for (inst, r) in corpus.instances().iter().zip(results) {
        match r {
            Ok(trace) => {
                let gold = inst.gold();
                out.transitions.record(
                    trace.round1.winner.matches(gold),
                    trace.final_output.matches(gold),
                    trace.gate == GateDecision::Clarified,
                );
                out.predictions.insert(inst.id(), trace.final_output);
                out.traces.push(trace);
            }
            Err(e) => {
                warn!("{}: inference failed: {e}", inst.id());
                out.failures.push((inst.id(), e.to_string()));
            }
        }
    }
    out
}
