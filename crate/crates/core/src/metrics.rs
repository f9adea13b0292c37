//! Micro-averaged link (L) and link+relation (LR) F1 over dependency arcs.
//!
//! Only `Link` predictions count as predicted arcs; `NoLink` and invalid
//! outputs add nothing. Gold instances without an arc are likewise absent
//! from the recall denominator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{GoldRelation, InstanceId, RelationType};
use crate::protocol::{ParseOutput, Prediction};
use crate::scalar::Fraction;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction for unknown instance {0}")]
    UnknownInstance(InstanceId),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArcCounts {
    pub gold_arcs: u64,
    pub predicted_arcs: u64,
    pub link_correct: u64,
    pub lr_correct: u64,
}

/// Precision, recall and F1 for both metrics, plus the underlying counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub link_precision: T,
    pub link_recall: T,
    pub link_f1: T,
    pub lr_precision: T,
    pub lr_recall: T,
    pub lr_f1: T,
    pub counts: ArcCounts,
    /// Gold arcs and LR-correct predictions per relation type; diagnostic only.
    pub per_relation: BTreeMap<RelationType, (u64, u64)>,
}

fn ratio<T: Fraction>(num: u64, den: u64) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::from_ratio(num, den)
    }
}

impl<T: Fraction> Report<T> {
    pub fn from_counts(counts: ArcCounts) -> Self {
        let ArcCounts {
            gold_arcs,
            predicted_arcs,
            link_correct,
            lr_correct,
        } = counts;
        // F1 = 2PR/(P+R) = 2c/(predicted+gold), exact for rationals.
        Report {
            link_precision: ratio(link_correct, predicted_arcs),
            link_recall: ratio(link_correct, gold_arcs),
            link_f1: ratio(2 * link_correct, predicted_arcs + gold_arcs),
            lr_precision: ratio(lr_correct, predicted_arcs),
            lr_recall: ratio(lr_correct, gold_arcs),
            lr_f1: ratio(2 * lr_correct, predicted_arcs + gold_arcs),
            counts,
            per_relation: BTreeMap::new(),
        }
    }
}

/// Scores predictions against gold arcs. Every prediction key must have a
/// gold entry; gold entries without a prediction still count toward recall.
pub fn evaluate<T: Fraction>(
    predictions: &BTreeMap<InstanceId, Prediction>,
    golds: &BTreeMap<InstanceId, Option<GoldRelation>>,
) -> Result<Report<T>, MetricsError> {
    let mut counts = ArcCounts::default();
    let mut per_relation: BTreeMap<RelationType, (u64, u64)> = BTreeMap::new();
    for gold in golds.values().flatten() {
        counts.gold_arcs += 1;
        per_relation.entry(gold.rel).or_default().0 += 1;
    }
    for (id, pred) in predictions {
        let gold = golds.get(id).ok_or_else(|| MetricsError::UnknownInstance(id.clone()))?;
        let ParseOutput::Link { child, parent, rel } = pred.or_no_link() else {
            continue;
        };
        counts.predicted_arcs += 1;
        if let Some(g) = gold {
            if g.child == child && g.parent == parent {
                counts.link_correct += 1;
                if g.rel == rel {
                    counts.lr_correct += 1;
                    per_relation.entry(rel).or_default().1 += 1;
                }
            }
        }
    }
    let mut report = Report::from_counts(counts);
    report.per_relation = per_relation;
    Ok(report)
}
