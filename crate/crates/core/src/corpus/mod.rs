//! Dialogues, gold dependency arcs, and the normalized corpus format.
//!
//! A normalized corpus file holds one dialogue per line:
//!
//! ```text
//! {"id":"d1","turns":[{"speaker":"a","text":"hi"},...],"relations":[{"child":2,"parent":1,"type":"comment"}]}
//! ```
//!
//! Turn indices are implicit (1-based position in `turns`). Every turn
//! becomes one [`AnnotatedInstance`]; turns without an incoming arc keep
//! `gold = None`.

mod relation;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use relation::{RelationType, UnknownRelation};

use crate::jsonl::{self, JsonlError};

/// Number of most recent turns kept when rendering prompts.
pub const DEFAULT_WINDOW: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    AlphaOutOfRange(f64),
    #[error("cannot split an empty corpus")]
    Empty,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    /// 1-based turn position within the full dialogue.
    pub index: usize,
    pub speaker: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    id: String,
    turns: Vec<Utterance>,
}

impl Dialogue {
    /// Builds a dialogue from `(speaker, text)` pairs, assigning indices 1..=n.
    pub fn new<S, I>(id: impl Into<String>, turns: I) -> Result<Self, String>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let turns: Vec<Utterance> = turns
            .into_iter()
            .enumerate()
            .map(|(i, (speaker, text))| Utterance {
                index: i + 1,
                speaker: speaker.into(),
                text: text.into(),
            })
            .collect();
        if turns.is_empty() {
            return Err("dialogue must have at least one turn".into());
        }
        if let Some(u) = turns.iter().find(|u| u.speaker.trim().is_empty()) {
            return Err(format!("turn {} has an empty speaker", u.index));
        }
        Ok(Dialogue { id: id.into(), turns })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn turns(&self) -> &[Utterance] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// The first `k` turns.
    pub fn prefix(&self, k: usize) -> &[Utterance] {
        &self.turns[..k]
    }
}

/// Gold arc `(child, parent, rel)`: turn `child` depends on turn `parent`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoldRelation {
    pub child: usize,
    pub parent: usize,
    #[serde(rename = "type")]
    pub rel: RelationType,
}

impl GoldRelation {
    pub fn new(child: usize, parent: usize, rel: RelationType) -> Result<Self, String> {
        if parent == 0 {
            return Err("turn indices are 1-based".into());
        }
        if parent >= child {
            return Err(format!("parent must precede child (child {child}, parent {parent})"));
        }
        Ok(GoldRelation { child, parent, rel })
    }
}

/// Stable identity of an instance: dialogue id plus current turn index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceId {
    pub dialogue_id: String,
    pub k: usize,
}

impl InstanceId {
    pub fn new(dialogue_id: impl Into<String>, k: usize) -> Self {
        InstanceId {
            dialogue_id: dialogue_id.into(),
            k,
        }
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.dialogue_id, self.k)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedInstance {
    dialogue: Arc<Dialogue>,
    k: usize,
    gold: Option<GoldRelation>,
}

impl AnnotatedInstance {
    pub fn new(dialogue: Arc<Dialogue>, k: usize, gold: Option<GoldRelation>) -> Result<Self, String> {
        if k == 0 || k > dialogue.len() {
            return Err(format!("instance index {k} outside dialogue of length {}", dialogue.len()));
        }
        if let Some(g) = gold {
            if g.child != k {
                return Err(format!("gold child {} does not match instance index {k}", g.child));
            }
        }
        Ok(AnnotatedInstance { dialogue, k, gold })
    }

    pub fn dialogue_id(&self) -> &str {
        self.dialogue.id()
    }

    pub fn id(&self) -> InstanceId {
        InstanceId::new(self.dialogue.id(), self.k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn gold(&self) -> Option<GoldRelation> {
        self.gold
    }

    /// Turns `1..=k`; the last one is the utterance being parsed.
    pub fn context(&self) -> &[Utterance] {
        self.dialogue.prefix(self.k)
    }

    pub fn dialogue(&self) -> &Arc<Dialogue> {
        &self.dialogue
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    dialogues: Vec<Arc<Dialogue>>,
    instances: Vec<AnnotatedInstance>,
}

impl Corpus {
    /// Builds a corpus with one instance per turn. Arcs are validated.
    pub fn from_dialogues(
        name: impl Into<String>,
        items: impl IntoIterator<Item = (Dialogue, Vec<GoldRelation>)>,
    ) -> Result<Self, String> {
        let mut dialogues = Vec::new();
        let mut instances = Vec::new();
        let mut seen = HashSet::new();
        for (dialogue, relations) in items {
            if !seen.insert(dialogue.id().to_string()) {
                return Err(format!("duplicate dialogue id {:?}", dialogue.id()));
            }
            let dialogue = Arc::new(dialogue);
            let mut by_child: BTreeMap<usize, GoldRelation> = BTreeMap::new();
            for rel in relations {
                GoldRelation::new(rel.child, rel.parent, rel.rel)?;
                if rel.child > dialogue.len() {
                    return Err(format!(
                        "relation child {} exceeds dialogue length {}",
                        rel.child,
                        dialogue.len()
                    ));
                }
                if by_child.insert(rel.child, rel).is_some() {
                    return Err(format!("multiple parents for child {}", rel.child));
                }
            }
            for k in 1..=dialogue.len() {
                instances.push(AnnotatedInstance::new(dialogue.clone(), k, by_child.get(&k).copied())?);
            }
            dialogues.push(dialogue);
        }
        Ok(Corpus {
            name: name.into(),
            dialogues,
            instances,
        })
    }

    pub fn dialogues(&self) -> &[Arc<Dialogue>] {
        &self.dialogues
    }

    pub fn instances(&self) -> &[AnnotatedInstance] {
        &self.instances
    }

    /// N, the number of instances.
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn gold_arcs(&self) -> usize {
        self.instances.iter().filter(|i| i.gold.is_some()).count()
    }

    pub fn golds(&self) -> BTreeMap<InstanceId, Option<GoldRelation>> {
        self.instances.iter().map(|i| (i.id(), i.gold)).collect()
    }

    fn subset(&self, name: String, keep: &HashSet<&str>) -> Corpus {
        Corpus {
            name,
            dialogues: self
                .dialogues
                .iter()
                .filter(|d| keep.contains(d.id()))
                .cloned()
                .collect(),
            instances: self
                .instances
                .iter()
                .filter(|i| keep.contains(i.dialogue_id()))
                .cloned()
                .collect(),
        }
    }

    fn relations_of(&self, dialogue_id: &str) -> Vec<GoldRelation> {
        self.instances
            .iter()
            .filter(|i| i.dialogue_id() == dialogue_id)
            .filter_map(|i| i.gold)
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    speaker: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct RelationRecord {
    child: usize,
    parent: usize,
    #[serde(rename = "type")]
    rel: String,
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    turns: Vec<TurnRecord>,
    #[serde(default)]
    relations: Vec<RelationRecord>,
}

pub fn read_corpus<R: BufRead>(name: &str, reader: R) -> Result<Corpus, CorpusError> {
    let records: Vec<(usize, DialogueRecord)> = jsonl::read_records(reader)?;
    let mut items = Vec::with_capacity(records.len());
    let mut ids = HashSet::new();
    for (line, rec) in records {
        let invalid = |message: String| CorpusError::Invalid { line, message };
        if !ids.insert(rec.id.clone()) {
            return Err(invalid(format!("duplicate dialogue id {:?}", rec.id)));
        }
        let dialogue = Dialogue::new(rec.id, rec.turns.into_iter().map(|t| (t.speaker, t.text))).map_err(invalid)?;
        let mut relations = Vec::with_capacity(rec.relations.len());
        for r in rec.relations {
            let rel: RelationType = r.rel.parse().map_err(|e: UnknownRelation| invalid(e.to_string()))?;
            relations.push(GoldRelation::new(r.child, r.parent, rel).map_err(invalid)?);
        }
        // Validate per line so errors carry the line number.
        Corpus::from_dialogues("", [(dialogue.clone(), relations.clone())]).map_err(invalid)?;
        items.push((dialogue, relations));
    }
    Corpus::from_dialogues(name, items).map_err(|message| CorpusError::Invalid { line: 0, message })
}

/// Loads a normalized corpus file. The corpus is named after the file stem.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_corpus(&name, BufReader::new(file))
}

pub fn write_corpus_to<W: Write>(corpus: &Corpus, writer: W) -> std::io::Result<()> {
    let records: Vec<DialogueRecord> = corpus
        .dialogues
        .iter()
        .map(|d| DialogueRecord {
            id: d.id().to_string(),
            turns: d
                .turns()
                .iter()
                .map(|u| TurnRecord {
                    speaker: u.speaker.clone(),
                    text: u.text.clone(),
                })
                .collect(),
            relations: corpus
                .relations_of(d.id())
                .into_iter()
                .map(|g| RelationRecord {
                    child: g.child,
                    parent: g.parent,
                    rel: g.rel.to_string(),
                })
                .collect(),
        })
        .collect();
    jsonl::write_records(writer, &records)
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path)?;
    write_corpus_to(corpus, BufWriter::new(file))?;
    Ok(())
}

/// Splits whole dialogues into a seed set of `round(alpha * dialogues)` and
/// the rest. Deterministic for a fixed `seed`; both halves keep corpus order.
pub fn split_seed(corpus: &Corpus, alpha: f64, seed: u64) -> Result<(Corpus, Corpus), CorpusError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CorpusError::AlphaOutOfRange(alpha));
    }
    if corpus.dialogues.is_empty() {
        return Err(CorpusError::Empty);
    }
    let total = corpus.dialogues.len();
    let take = (alpha * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let seed_ids: HashSet<&str> = order[..take].iter().map(|&i| corpus.dialogues[i].id()).collect();
    let rest_ids: HashSet<&str> = order[take..].iter().map(|&i| corpus.dialogues[i].id()).collect();
    Ok((
        corpus.subset(format!("{}.seed", corpus.name), &seed_ids),
        corpus.subset(format!("{}.rest", corpus.name), &rest_ids),
    ))
}

/// Keeps the last `min(window, k)` turns. Turns keep their original
/// indices, so rendered labels still read `u6`, `u25`, etc. A window of 0
/// is treated as 1.
pub fn truncate_context(context: &[Utterance], window: usize) -> &[Utterance] {
    let window = window.max(1);
    &context[context.len().saturating_sub(window)..]
}
