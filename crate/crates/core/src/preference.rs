//! Clarification sampling, contribution scoring and preference-pair
//! construction.
//!
//! For each instance the clarification model proposes `n` rewrites of the
//! current turn. The parser scores the gold answer given each rewrite
//! (`e_c`) and given the original turn (`e_base`). Rewrites scoring above
//! the baseline are candidates for the preferred side, those below for the
//! dispreferred side; the pair takes the extreme of each set.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::corpus::{AnnotatedInstance, Corpus, GoldRelation, Utterance};
use crate::protocol::{
    format_parse_output, parse_dcm_output, render_dcm_prompt, render_dp_prompt, substitute_clarification,
    ParseOutput, ProtocolError,
};
use crate::scorer::{Scorer, ScorerError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreferenceError {
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// One sampled clarification and its contribution score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub e: f64,
}

/// Preferred and dispreferred clarification for one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub dialogue_id: String,
    pub k: usize,
    /// Clarification-model prompt the two utterances answer.
    pub prompt: String,
    pub u_plus: String,
    pub u_minus: String,
    pub e_plus: f64,
    pub e_minus: f64,
    pub e_base: f64,
    /// Contribution gap `e_plus - e_minus`.
    pub g: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairConstruction {
    Pair { plus: usize, minus: usize, gap: f64 },
    Discarded,
}

/// Picks the highest-scoring candidate strictly above `e_base` and the
/// lowest strictly below it; ties go to the earliest candidate. Discarded
/// when either side is empty.
pub fn construct_pair(candidates: &[Candidate], e_base: f64) -> PairConstruction {
    let mut plus: Option<usize> = None;
    let mut minus: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if c.e > e_base && plus.is_none_or(|p| c.e > candidates[p].e) {
            plus = Some(i);
        }
        if c.e < e_base && minus.is_none_or(|m| c.e < candidates[m].e) {
            minus = Some(i);
        }
    }
    match (plus, minus) {
        (Some(plus), Some(minus)) => PairConstruction::Pair {
            plus,
            minus,
            gap: candidates[plus].e - candidates[minus].e,
        },
        _ => PairConstruction::Discarded,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SampledClarifications {
    pub texts: Vec<String>,
    pub dropped: usize,
}

/// Samples `n` clarification-model outputs for `context` and keeps the
/// clarified utterance of each parseable one.
pub fn sample_clarifications(
    dcm: &dyn Scorer,
    context: &[Utterance],
    n: usize,
    cfg: &PipelineConfig,
) -> Result<SampledClarifications, ScorerError> {
    let prompt = render_dcm_prompt(cfg.window(context));
    let raw = dcm.sample(&prompt, &cfg.sampling.with_n(n))?;
    let mut out = SampledClarifications::default();
    for text in raw {
        match parse_dcm_output(&text) {
            Ok(rec) => out.texts.push(rec.clarified.trim().to_string()),
            Err(e) => {
                out.dropped += 1;
                log::debug!("dropping clarification sample: {e}");
            }
        }
    }
    Ok(out)
}

/// Parser log-probability of `gold` once the current turn reads `clarified`.
pub fn contribution_score(
    parser: &dyn Scorer,
    context: &[Utterance],
    clarified: &str,
    gold: GoldRelation,
    cfg: &PipelineConfig,
) -> Result<f64, PreferenceError> {
    let clarified_ctx = substitute_clarification(context, clarified)?;
    baseline_score(parser, &clarified_ctx, gold, cfg)
}

/// Parser log-probability of `gold` on the unmodified context (`e_base`).
pub fn baseline_score(
    parser: &dyn Scorer,
    context: &[Utterance],
    gold: GoldRelation,
    cfg: &PipelineConfig,
) -> Result<f64, PreferenceError> {
    let prompt = render_dp_prompt(cfg.window(context));
    Ok(parser.score(&prompt, &format_parse_output(ParseOutput::from(gold)))?)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceStats {
    pub instances: usize,
    pub pairs: usize,
    pub no_gold: usize,
    pub discarded: usize,
    pub failed: usize,
    pub dropped_samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub stats: PreferenceStats,
}

enum InstanceOutcome {
    Pair(PreferencePair, usize),
    Discarded(usize),
    NoGold,
    Failed,
}

fn pair_for_instance(
    inst: &AnnotatedInstance,
    dcm: &dyn Scorer,
    parser: &dyn Scorer,
    cfg: &PipelineConfig,
) -> Result<InstanceOutcome, PreferenceError> {
    let Some(gold) = inst.gold() else {
        return Ok(InstanceOutcome::NoGold);
    };
    let context = inst.context();
    let sampled = sample_clarifications(dcm, context, cfg.clarifications, cfg)?;
    let e_base = baseline_score(parser, context, gold, cfg)?;
    let candidates = sampled
        .texts
        .into_iter()
        .map(|text| {
            let e = contribution_score(parser, context, &text, gold, cfg)?;
            Ok(Candidate { text, e })
        })
        .collect::<Result<Vec<_>, PreferenceError>>()?;
    Ok(match construct_pair(&candidates, e_base) {
        PairConstruction::Pair { plus, minus, gap } => InstanceOutcome::Pair(
            PreferencePair {
                dialogue_id: inst.dialogue_id().to_string(),
                k: inst.k(),
                prompt: render_dcm_prompt(cfg.window(context)),
                u_plus: candidates[plus].text.clone(),
                u_minus: candidates[minus].text.clone(),
                e_plus: candidates[plus].e,
                e_minus: candidates[minus].e,
                e_base,
                g: gap,
            },
            sampled.dropped,
        ),
        PairConstruction::Discarded => InstanceOutcome::Discarded(sampled.dropped),
    })
}

/// Runs sampling, scoring and pair construction over every instance.
/// Failing instances are logged and counted, not fatal.
pub fn build_preference_dataset(
    rest: &Corpus,
    dcm: &dyn Scorer,
    parser: &dyn Scorer,
    cfg: &PipelineConfig,
) -> PreferenceDataset {
    let outcomes = cfg.map_ordered(rest.instances(), |inst| {
        pair_for_instance(inst, dcm, parser, cfg).unwrap_or_else(|e| {
            warn!("{}: preference construction failed: {e}", inst.id());
            InstanceOutcome::Failed
        })
    });
    let mut out = PreferenceDataset::default();
    out.stats.instances = rest.len();
    for o in outcomes {
        match o {
            InstanceOutcome::Pair(p, dropped) => {
                out.stats.dropped_samples += dropped;
                out.pairs.push(p);
            }
            InstanceOutcome::Discarded(dropped) => {
                out.stats.dropped_samples += dropped;
                out.stats.discarded += 1;
            }
            InstanceOutcome::NoGold => out.stats.no_gold += 1,
            InstanceOutcome::Failed => out.stats.failed += 1,
        }
    }
    out.stats.pairs = out.pairs.len();
    info!("preference pairs: {:?}", out.stats);
    out
}
