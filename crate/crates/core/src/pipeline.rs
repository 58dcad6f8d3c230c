//! GPHT prediction: partition → head-tail pair prediction → relation scoring
//! with softmax thresholding.
//!
//! Prediction files hold one line per triple,
//! `head<TAB>relation<TAB>tail<TAB>score`, score-descending, scores printed
//! with 9 significant digits.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::htem::HtemModel;
use crate::kg::{EntityId, KnowledgeGraph, Triple};
use crate::kge::KgeModel;
use crate::partition::PartitionResult;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
}

/// Where a predicted triple came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Subgraph giving the pair its highest y_ht (first on ties).
    pub subgraph: usize,
    pub pair_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedEntry {
    pub triple: Triple,
    pub score: f64,
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictedTripleSet {
    pub entries: Vec<PredictedEntry>,
    pub theta_ht: Option<f64>,
    pub theta_hrt: Option<f64>,
}

fn by_score_then_triple(a: &PredictedEntry, b: &PredictedEntry) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.triple.cmp(&b.triple))
}

impl PredictedTripleSet {
    /// Sorts score-descending, ties by triple id order.
    pub fn from_entries(mut entries: Vec<PredictedEntry>) -> Self {
        entries.par_sort_unstable_by(by_score_then_triple);
        Self { entries, theta_ht: None, theta_hrt: None }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn triples(&self) -> Vec<Triple> {
        self.entries.iter().map(|e| e.triple).collect()
    }

    pub fn is_sorted(&self) -> bool {
        self.entries.windows(2).all(|w| by_score_then_triple(&w[0], &w[1]) != Ordering::Greater)
    }

    pub fn write_tsv(&self, path: &Path, kg: &KnowledgeGraph) -> Result<(), PipelineError> {
        let io = |source| PipelineError::Io { path: path.to_owned(), source };
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        for e in &self.entries {
            writeln!(w, "{}\t{}", kg.format_triple(&e.triple), format_sig(e.score, 9)).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a prediction file against `kg`'s vocabularies. Three-column
    /// lines are accepted with score 1 and keep file order.
    pub fn read_tsv(path: &Path, kg: &KnowledgeGraph) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.to_owned(), source })?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let parse = |msg: String| PipelineError::Parse { path: path.to_owned(), line: i + 1, msg };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 && f.len() != 4 {
                return Err(parse(format!("expected 3 or 4 fields, found {}", f.len())));
            }
            let h = kg.entity_id(f[0]).map_err(|e| parse(e.to_string()))?;
            let r = kg.relation_id(f[1]).map_err(|e| parse(e.to_string()))?;
            let t = kg.entity_id(f[2]).map_err(|e| parse(e.to_string()))?;
            let score = match f.get(3) {
                Some(s) => s.parse::<f64>().map_err(|_| parse(format!("bad score {s:?}")))?,
                None => 1.0,
            };
            let triple = Triple::new(h, r, t);
            if seen.insert(triple) {
                entries.push(PredictedEntry { triple, score, provenance: None });
            }
        }
        // stable: equal scores keep file order
        entries.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
        Ok(Self { entries, theta_ht: None, theta_hrt: None })
    }
}

/// Decimal rendering with `sig` significant digits.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i64;
    let decimals = (sig as i64 - 1 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

/// How the relation softmax is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationNormalization {
    /// Softmax over the n_r candidates of each pair.
    #[default]
    PerPair,
    /// One softmax over every candidate triple of every pair.
    Global,
}

/// Numerically stable softmax in f64.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / z).collect()
}

/// Candidates (h, r_i, t) for every relation, softmax over the pair's
/// candidates, kept when s_hrt > θ_hrt / n_r.
pub fn score_pair_relations<T: Scalar>(kge: &KgeModel<T>, h: EntityId, t: EntityId, theta_hrt: f64) -> Vec<(Triple, f64)> {
    let raw: Vec<f64> = kge.score_all_relations(h, t).into_iter().map(Scalar::as_f64).collect();
    let cut = theta_hrt / raw.len() as f64;
    softmax(&raw)
        .into_iter()
        .enumerate()
        .filter(|&(_, s)| s > cut)
        .map(|(r, s)| (Triple::new(h, r, t), s))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GphtParams {
    pub theta_ht: f64,
    pub theta_hrt: f64,
    pub normalization: RelationNormalization,
}

impl Default for GphtParams {
    fn default() -> Self {
        Self { theta_ht: 0.3, theta_hrt: 1.0, normalization: RelationNormalization::PerPair }
    }
}

/// Candidate triple counts after each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    /// n_e · n_r · n_e
    pub full: u128,
    /// Distinct in-subgraph ordered pairs · n_r.
    pub post_partition: u128,
    /// Distinct predicted pairs · n_r.
    pub post_htem: u128,
    pub final_: u128,
}

impl StageCounts {
    pub fn fractions(&self) -> [f64; 3] {
        let f = self.full.max(1) as f64;
        [self.post_partition as f64 / f, self.post_htem as f64 / f, self.final_ as f64 / f]
    }

    pub fn non_increasing(&self) -> bool {
        self.full >= self.post_partition && self.post_partition >= self.post_htem && self.post_htem >= self.final_
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.full > self.post_partition && self.post_partition > self.post_htem && self.post_htem > self.final_
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub pair_seconds: f64,
    pub relation_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GphtOutput {
    pub predicted: PredictedTripleSet,
    pub stages: StageCounts,
    pub n_pairs: usize,
    pub timings: Timings,
}

/// Runs pair prediction over every subgraph, deduplicates pairs (keeping the
/// max y_ht), scores relations, and drops training triples.
pub fn gpht_predict<T: Scalar>(
    kg: &KnowledgeGraph,
    part: &PartitionResult,
    htem: &HtemModel<T>,
    kge: &KgeModel<T>,
    params: &GphtParams,
) -> GphtOutput {
    let t0 = Instant::now();
    let per_sub = htem.predict_all(part, params.theta_ht);
    let mut pairs: HashMap<(EntityId, EntityId), Provenance> = HashMap::new();
    for (si, preds) in per_sub.iter().enumerate() {
        for &(h, t, y) in preds {
            let y = y.as_f64();
            let p = pairs.entry((h, t)).or_insert(Provenance { subgraph: si, pair_score: y });
            if y > p.pair_score {
                *p = Provenance { subgraph: si, pair_score: y };
            }
        }
    }
    let mut pair_list: Vec<((EntityId, EntityId), Provenance)> = pairs.into_iter().collect();
    pair_list.sort_unstable_by_key(|&(k, _)| k);
    let pair_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let n_r = kg.n_relations();
    let train = kg.triple_set();
    let entries: Vec<PredictedEntry> = match params.normalization {
        RelationNormalization::PerPair => pair_list
            .par_iter()
            .flat_map_iter(|&((h, t), prov)| {
                score_pair_relations(kge, h, t, params.theta_hrt)
                    .into_iter()
                    .filter(|(tr, _)| !train.contains(tr))
                    .map(move |(triple, score)| PredictedEntry { triple, score, provenance: Some(prov) })
            })
            .collect(),
        RelationNormalization::Global => {
            let raw: Vec<Vec<f64>> = pair_list
                .par_iter()
                .map(|&((h, t), _)| kge.score_all_relations(h, t).into_iter().map(Scalar::as_f64).collect())
                .collect();
            let mx = raw.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = raw.iter().flatten().map(|&s| (s - mx).exp()).sum();
            let cut = params.theta_hrt / (pair_list.len() * n_r).max(1) as f64;
            pair_list
                .iter()
                .zip(&raw)
                .flat_map(|(&((h, t), prov), row)| {
                    row.iter().enumerate().filter_map(move |(r, &s)| {
                        let p = (s - mx).exp() / z;
                        (p > cut).then_some(PredictedEntry { triple: Triple::new(h, r, t), score: p, provenance: Some(prov) })
                    })
                })
                .filter(|e| !train.contains(&e.triple))
                .collect()
        }
    };
    let relation_seconds = t1.elapsed().as_secs_f64();

    if pair_list.is_empty() {
        log::warn!("no head-tail pair passed θ_ht = {}; the prediction is empty", params.theta_ht);
    }
    let mut predicted = PredictedTripleSet::from_entries(entries);
    predicted.theta_ht = Some(params.theta_ht);
    predicted.theta_hrt = Some(params.theta_hrt);
    let stages = StageCounts {
        full: part.summary.full_candidate_space,
        post_partition: part.summary.distinct_pair_candidates,
        post_htem: pair_list.len() as u128 * n_r as u128,
        final_: predicted.len() as u128,
    };
    GphtOutput { predicted, stages, n_pairs: pair_list.len(), timings: Timings { pair_seconds, relation_seconds } }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kge::KgeKind;
    use crate::seed;
    use rand::Rng as _;

    fn model(n_e: usize, n_r: usize, seed_: u64) -> KgeModel<f64> {
        KgeModel::init(KgeKind::Hake, 4, n_e, n_r, 0.5, 1.0, &mut seed::rng(seed_))
    }

    #[test]
    fn single_relation_softmax_is_one() {
        let m = model(3, 1, 1);
        let out = score_pair_relations(&m, 0, 1, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1, 1.0);
        assert!(score_pair_relations(&m, 0, 1, 1.0).is_empty());
    }

    #[test]
    fn uniform_scores_give_one_over_n() {
        let mut m = model(3, 4, 2);
        for r in 0..4 {
            let row = m.relation_row(0).to_vec();
            m.relation_row_mut(r).copy_from_slice(&row);
        }
        let out = score_pair_relations(&m, 0, 2, 0.99);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|&(_, s)| (s - 0.25).abs() < 1e-15));
        assert!(score_pair_relations(&m, 0, 2, 1.0).is_empty());
    }

    #[test]
    fn softmax_matches_direct_computation() {
        let mut rng = seed::rng(3);
        for _ in 0..50 {
            let m = model(4, 5, rng.gen());
            let raw = m.score_all_relations(1, 3);
            let z: f64 = raw.iter().map(|s| s.exp()).sum();
            let out = score_pair_relations(&m, 1, 3, 1e-12);
            assert_eq!(out.len(), 5);
            for (tr, s) in out {
                assert!((s - raw[tr.relation].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sig_format() {
        assert_eq!(format_sig(0.123456789123, 9), "0.123456789");
        assert_eq!(format_sig(12.5, 9), "12.5000000");
        assert_eq!(format_sig(0.000123, 3), "0.000123");
        assert_eq!(format_sig(123456.0, 3), "123456");
        assert_eq!(format_sig(0.0, 9), "0");
    }

    #[test]
    fn predicted_set_sorting_and_round_trip() {
        let kg = crate::partition::tests::random_kg(6, 2, 10, 4);
        let e = |h, r, t, s| PredictedEntry { triple: Triple::new(h, r, t), score: s, provenance: None };
        let set = PredictedTripleSet::from_entries(vec![e(0, 1, 2, 0.2), e(3, 0, 1, 0.7), e(1, 0, 2, 0.2), e(5, 1, 4, 0.9)]);
        assert!(set.is_sorted());
        assert_eq!(set.triples()[2], Triple::new(0, 1, 2));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.tsv");
        set.write_tsv(&p, &kg).unwrap();
        let back = PredictedTripleSet::read_tsv(&p, &kg).unwrap();
        assert_eq!(back.triples(), set.triples());
        assert!(back.entries.iter().zip(&set.entries).all(|(a, b)| (a.score - b.score).abs() < 1e-9));
    }

    #[test]
    fn gpht_invariants_with_untrained_models() {
        use crate::htem::HtemConfig;
        use crate::partition::{partition, PartitionParams};
        let kg = crate::partition::tests::random_kg(60, 3, 150, 5);
        let part = partition(&kg, &PartitionParams { n_min: 5, n_max: 20, ..PartitionParams::default() }).unwrap();
        let hc = HtemConfig { dim: 8, kge_dim: 2, hidden: vec![4], ..HtemConfig::default() };
        let htem = HtemModel::<f64>::new(&hc, 60, 3, &mut seed::rng(6)).unwrap();
        let kge = model(60, 3, 7);
        let run = |ht, hrt| gpht_predict(&kg, &part, &htem, &kge, &GphtParams { theta_ht: ht, theta_hrt: hrt, ..GphtParams::default() });
        assert!(run(1.0, 0.5).predicted.is_empty());
        let mut prev = usize::MAX;
        for hrt in [0.1, 0.5, 1.0, 1.5, 2.5] {
            let out = run(0.3, hrt);
            assert!(out.stages.non_increasing());
            assert!(out.predicted.is_sorted());
            assert!(out.predicted.triples().iter().all(|t| !kg.contains(t)));
            assert!(out.predicted.len() <= prev);
            prev = out.predicted.len();
        }
        let mut prev = usize::MAX;
        for ht in [0.0, 0.3, 0.5, 0.7, 0.9] {
            let n = run(ht, 0.5).predicted.len();
            assert!(n <= prev);
            prev = n;
        }
        assert_eq!(run(0.4, 0.5).predicted, run(0.4, 0.5).predicted);
        let g = gpht_predict(&kg, &part, &htem, &kge, &GphtParams { theta_ht: 0.3, theta_hrt: 1.0, normalization: RelationNormalization::Global });
        assert!(g.stages.non_increasing());
        assert!(g.predicted.entries.iter().map(|e| e.score).sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn stage_checks() {
        let s = StageCounts { full: 100, post_partition: 80, post_htem: 10, final_: 2 };
        assert!(s.strictly_decreasing() && s.non_increasing());
        assert_eq!(s.fractions(), [0.8, 0.1, 0.02]);
        let s = StageCounts { full: 100, post_partition: 80, post_htem: 10, final_: 10 };
        assert!(!s.strictly_decreasing() && s.non_increasing());
    }
}
