//! Discourse dependency parsing with clarification-aware preference training.
//!
//! The pipeline: load a corpus of multi-party dialogues ([`corpus`]), render
//! and parse model text ([`protocol`]), query language models through the
//! [`scorer::Scorer`] trait, build clarification training data
//! ([`dataprep`], [`preference`]), train the clarifier with the weighted
//! preference loss ([`cpo`]), and parse with vote gating ([`inference`]).
//! [`metrics`] scores predictions against gold arcs.

pub mod config;
pub mod corpus;
pub mod cpo;
pub mod dataprep;
pub mod inference;
pub mod jsonl;
pub mod metrics;
pub mod preference;
pub mod protocol;
pub mod scalar;
pub mod scorer;

pub use config::PipelineConfig;
pub use corpus::{AnnotatedInstance, Corpus, Dialogue, GoldRelation, InstanceId, RelationType, Utterance};
pub use protocol::{ParseOutput, Prediction};
pub use scalar::{Fraction, Scalar};

/// Double-precision policy used by the command-line tools.
pub type Policy = scorer::TrainablePolicy<f64>;
pub type PolicyScorer = scorer::PolicyScorer<f64>;
pub type EvalReport = metrics::Report<f64>;
pub type PairScores = cpo::PairScores<f64>;
