//! Labeling of a predicted triple set under the closed-world assumption (CWA)
//! or the relation-similarity partial-open-world assumption (RS-POWA), and the
//! four evaluation metrics computed from the labels.
//!
//! Under RS-POWA a predicted triple outside the test set is labeled negative
//! only when some other relation already links its head to its tail in
//! train ∪ test and that relation is dissimilar (similarity below θ);
//! otherwise its truth value is unknown and it is left out of the
//! recognizable set.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{DatasetSplit, EntityId, RelationId, Triple};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("relation id {id} out of range (vocabulary has {len})")]
    UnknownRelation { id: RelationId, len: usize },
    #[error("test set is empty; recall is undefined")]
    EmptyTestSet,
    #[error("similarity threshold {0} outside [0, 1]")]
    BadThreshold(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assumption {
    #[serde(rename = "cwa")]
    Cwa,
    #[serde(rename = "rs-powa")]
    RsPowa,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConfig {
    pub mode: Assumption,
    pub theta: f64,
}

impl AssumptionConfig {
    pub const DEFAULT_THETA: f64 = 0.8;

    pub fn new(mode: Assumption, theta: f64) -> Result<Self, MetricsError> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(MetricsError::BadThreshold(theta));
        }
        Ok(Self { mode, theta })
    }

    pub fn cwa() -> Self {
        Self { mode: Assumption::Cwa, theta: Self::DEFAULT_THETA }
    }

    pub fn rs_powa() -> Self {
        Self { mode: Assumption::RsPowa, theta: Self::DEFAULT_THETA }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
    Unknown,
}

/// Entity-pair sets per relation over train ∪ test, with the pairwise
/// similarity matrix precomputed.
#[derive(Clone, Debug)]
pub struct RelationPairIndex {
    n_relations: usize,
    pair_counts: Vec<usize>,
    /// `|P_r ∩ P_r'|`, row-major `n_r × n_r`.
    overlap: Vec<usize>,
    by_pair: HashMap<(EntityId, EntityId), Vec<RelationId>>,
}

impl RelationPairIndex {
    pub fn new<'a, I>(n_relations: usize, triples: I) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = &'a Triple>,
    {
        let mut by_pair: HashMap<(EntityId, EntityId), Vec<RelationId>> = HashMap::new();
        for t in triples {
            if t.relation >= n_relations {
                return Err(MetricsError::UnknownRelation { id: t.relation, len: n_relations });
            }
            by_pair.entry(t.pair()).or_default().push(t.relation);
        }
        let mut pair_counts = vec![0; n_relations];
        let mut overlap = vec![0; n_relations * n_relations];
        for rels in by_pair.values_mut() {
            rels.sort_unstable();
            rels.dedup();
            for &a in rels.iter() {
                pair_counts[a] += 1;
                for &b in rels.iter() {
                    overlap[a * n_relations + b] += 1;
                }
            }
        }
        Ok(Self { n_relations, pair_counts, overlap, by_pair })
    }

    /// Index over the split's train and test triples.
    pub fn from_split(split: &DatasetSplit) -> Self {
        Self::new(split.train.n_relations(), split.train.triples().iter().chain(&split.test))
            .expect("split ids validated at construction")
    }

    pub fn pair_count(&self, r: RelationId) -> usize {
        self.pair_counts[r]
    }

    /// Relations linking `h` to `t` in train ∪ test.
    pub fn relations_between(&self, h: EntityId, t: EntityId) -> &[RelationId] {
        self.by_pair.get(&(h, t)).map_or(&[], Vec::as_slice)
    }

    fn similarity_unchecked(&self, r: RelationId, r2: RelationId) -> f64 {
        let (a, b) = (self.pair_counts[r], self.pair_counts[r2]);
        if a == 0 || b == 0 {
            return 0.0;
        }
        let inter = self.overlap[r * self.n_relations + r2] as f64;
        (inter / a as f64).max(inter / b as f64)
    }
}

/// max(|P_r ∩ P_r'| / |P_r|, |P_r ∩ P_r'| / |P_r'|), or 0 when either set is
/// empty.
pub fn relation_similarity(index: &RelationPairIndex, r: RelationId, r2: RelationId) -> Result<f64, MetricsError> {
    for id in [r, r2] {
        if id >= index.n_relations {
            return Err(MetricsError::UnknownRelation { id, len: index.n_relations });
        }
    }
    Ok(index.similarity_unchecked(r, r2))
}

/// Partition of a predicted set into positive, negative and unknown triples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabeledPrediction {
    pub positives: HashSet<Triple>,
    pub negatives: HashSet<Triple>,
    pub unknowns: HashSet<Triple>,
}

impl LabeledPrediction {
    pub fn label(&self, t: &Triple) -> Label {
        if self.positives.contains(t) {
            Label::Positive
        } else if self.negatives.contains(t) {
            Label::Negative
        } else {
            Label::Unknown
        }
    }

    /// |T_predict|.
    pub fn n_predict(&self) -> usize {
        self.positives.len() + self.negatives.len() + self.unknowns.len()
    }

    /// |T^{WA}|, the recognizable triples.
    pub fn n_recognized(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn n_positive(&self) -> usize {
        self.positives.len()
    }
}

/// Labels every predicted triple; duplicates in `predict` are counted once.
pub fn label_predictions(predict: &[Triple], split: &DatasetSplit, cfg: &AssumptionConfig) -> LabeledPrediction {
    let index = match cfg.mode {
        Assumption::Cwa => None,
        Assumption::RsPowa => Some(RelationPairIndex::from_split(split)),
    };
    label_with_index(predict, &split.test_set(), index.as_ref(), cfg.theta)
}

/// As [`label_predictions`] with a prebuilt test set and pair index; `index`
/// `None` means CWA.
pub fn label_with_index(
    predict: &[Triple],
    test: &HashSet<Triple>,
    index: Option<&RelationPairIndex>,
    theta: f64,
) -> LabeledPrediction {
    let mut out = LabeledPrediction::default();
    for t in predict {
        if test.contains(t) {
            out.positives.insert(*t);
            continue;
        }
        let negative = match index {
            None => true,
            Some(ix) => ix
                .relations_between(t.head, t.tail)
                .iter()
                .any(|&r2| r2 != t.relation && t.relation < ix.n_relations && ix.similarity_unchecked(t.relation, r2) < theta),
        };
        if negative {
            out.negatives.insert(*t);
        } else {
            out.unknowns.insert(*t);
        }
    }
    out
}

/// ½(|T⁺|/|T^{WA}| + |T⁺|/|T_predict|); 0 when either denominator is 0.
pub fn jprecision(label: &LabeledPrediction) -> f64 {
    let (pos, wa, all) = (label.n_positive(), label.n_recognized(), label.n_predict());
    if wa == 0 || all == 0 {
        return 0.0;
    }
    0.5 * (pos as f64 / wa as f64 + pos as f64 / all as f64)
}

/// sqrt(|T⁺| / |T_test|).
pub fn strecall(label: &LabeledPrediction, test_size: usize) -> Result<f64, MetricsError> {
    if test_size == 0 {
        return Err(MetricsError::EmptyTestSet);
    }
    Ok((label.n_positive() as f64 / test_size as f64).sqrt())
}

/// Harmonic mean of JPrecision and STRecall; 0 when both are 0.
pub fn f_tsp(jp: f64, sr: f64) -> f64 {
    if jp + sr == 0.0 {
        0.0
    } else {
        2.0 * jp * sr / (jp + sr)
    }
}

/// Σ ±1/i over a score-descending list; unknown triples add nothing but keep
/// their rank.
pub fn rs_tsp(ordered_predict: &[Triple], label: &LabeledPrediction) -> f64 {
    ordered_predict
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let w = 1.0 / (i + 1) as f64;
            match label.label(t) {
                Label::Positive => w,
                Label::Negative => -w,
                Label::Unknown => 0.0,
            }
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_predict: usize,
    pub n_wa: usize,
    pub n_wa_pos: usize,
    pub jprecision: f64,
    pub strecall: f64,
    pub f_tsp: f64,
    pub rs_tsp: f64,
    pub assumption: Assumption,
    pub theta: f64,
}

/// Labels `ordered_predict` (score-descending) and computes every metric.
pub fn evaluate(
    ordered_predict: &[Triple],
    split: &DatasetSplit,
    cfg: &AssumptionConfig,
) -> Result<EvaluationReport, MetricsError> {
    let label = label_predictions(ordered_predict, split, cfg);
    report_from_label(ordered_predict, &label, split.test.len(), cfg)
}

pub fn report_from_label(
    ordered_predict: &[Triple],
    label: &LabeledPrediction,
    test_size: usize,
    cfg: &AssumptionConfig,
) -> Result<EvaluationReport, MetricsError> {
    let jp = jprecision(label);
    let sr = strecall(label, test_size)?;
    let (jp, sr, f, rs) = if label.n_predict() == 0 {
        (0.0, 0.0, 0.0, 0.0)
    } else {
        (jp, sr, f_tsp(jp, sr), rs_tsp(ordered_predict, label))
    };
    Ok(EvaluationReport {
        n_predict: label.n_predict(),
        n_wa: label.n_recognized(),
        n_wa_pos: label.n_positive(),
        jprecision: jp,
        strecall: sr,
        f_tsp: f,
        rs_tsp: rs,
        assumption: cfg.mode,
        theta: cfg.theta,
    })
}
