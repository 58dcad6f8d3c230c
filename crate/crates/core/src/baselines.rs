//! Baseline TSP predictors: rule mining with sparse boolean matrix inference
//! (RuleTensor-TSP) and exhaustive KGE scoring with a streamed softmax
//! (KGE-TSP).
//!
//! Rule files hold one rule per line:
//! `head<TAB>body_1,body_2,…<TAB>support<TAB>conf<TAB>hc`, where an inverse
//! body relation carries the suffix [`INVERSE_MARKER`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::kge::KgeModel;
use crate::pipeline::{PredictedEntry, PredictedTripleSet};
use crate::scalar::Scalar;
use crate::seed;

pub const INVERSE_MARKER: &str = "^-1";

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("rule file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// One body atom: a relation, possibly traversed backwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BodyRel {
    pub relation: RelationId,
    pub inverse: bool,
}

impl BodyRel {
    pub fn fwd(relation: RelationId) -> Self {
        Self { relation, inverse: false }
    }

    pub fn inv(relation: RelationId) -> Self {
        Self { relation, inverse: true }
    }

    pub fn flipped(self) -> Self {
        Self { relation: self.relation, inverse: !self.inverse }
    }
}

/// Path rule head(X, Y) ← b_1(X, Z_1) ∧ … ∧ b_k(Z_{k-1}, Y).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PathRule {
    pub head: RelationId,
    pub body: Vec<BodyRel>,
}

impl PathRule {
    pub fn new(head: RelationId, body: Vec<BodyRel>) -> Self {
        Self { head, body }
    }

    /// r ← r, which every walk closes on its first step.
    pub fn is_tautology(&self) -> bool {
        self.body.len() == 1 && self.body[0] == BodyRel::fwd(self.head)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub rule: PathRule,
    pub support: u64,
    /// ⊕M^body
    pub body_count: u64,
    /// ⊕M^head
    pub head_count: u64,
    pub confidence: f64,
    pub head_coverage: f64,
}

impl Rule {
    pub fn conf_ratio(&self) -> Ratio<u64> {
        Ratio::new(self.support, self.body_count)
    }

    pub fn hc_ratio(&self) -> Ratio<u64> {
        Ratio::new(self.support, self.head_count)
    }
}

/// Sparse n × n boolean matrix as sorted column lists per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseBool {
    rows: Vec<Vec<u32>>,
}

impl SparseBool {
    pub fn empty(n: usize) -> Self {
        Self { rows: vec![Vec::new(); n] }
    }

    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut m = Self::empty(n);
        for (i, j) in pairs {
            m.rows[i].push(j as u32);
        }
        m.normalize();
        m
    }

    fn normalize(&mut self) {
        for r in &mut self.rows {
            r.sort_unstable();
            r.dedup();
        }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&(j as u32)).is_ok()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::empty(self.n());
        for (i, r) in self.rows.iter().enumerate() {
            for &j in r {
                t.rows[j as usize].push(i as u32);
            }
        }
        t
    }

    /// binarize(self · other)
    pub fn bool_product(&self, other: &Self) -> Self {
        let n = self.n();
        let rows = (0..n)
            .into_par_iter()
            .map_init(
                || vec![false; n],
                |mark, i| {
                    let mut out = Vec::new();
                    for &k in &self.rows[i] {
                        for &j in &other.rows[k as usize] {
                            if !mark[j as usize] {
                                mark[j as usize] = true;
                                out.push(j);
                            }
                        }
                    }
                    for &j in &out {
                        mark[j as usize] = false;
                    }
                    out.sort_unstable();
                    out
                },
            )
            .collect();
        Self { rows }
    }

    /// |self ∘ other|
    pub fn overlap(&self, other: &Self) -> usize {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| {
                let (mut i, mut j, mut c) = (0, 0, 0);
                while i < a.len() && j < b.len() {
                    match a[i].cmp(&b[j]) {
                        std::cmp::Ordering::Less => i += 1,
                        std::cmp::Ordering::Greater => j += 1,
                        std::cmp::Ordering::Equal => {
                            c += 1;
                            i += 1;
                            j += 1;
                        }
                    }
                }
                c
            })
            .sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().enumerate().flat_map(|(i, r)| r.iter().map(move |&j| (i, j as usize)))
    }
}

/// M^r and its transpose for every relation.
#[derive(Clone, Debug)]
pub struct RelationMatrices {
    pub forward: Vec<SparseBool>,
    pub backward: Vec<SparseBool>,
}

impl RelationMatrices {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let n = kg.n_entities();
        let mut pairs = vec![Vec::new(); kg.n_relations()];
        for t in kg.triples() {
            pairs[t.relation].push((t.head, t.tail));
        }
        Self::from_pairs(n, pairs)
    }

    fn from_pairs(n: usize, pairs: Vec<Vec<(usize, usize)>>) -> Self {
        let forward: Vec<SparseBool> = pairs.into_iter().map(|p| SparseBool::from_pairs(n, p)).collect();
        let backward = forward.iter().map(SparseBool::transpose).collect();
        Self { forward, backward }
    }

    pub fn get(&self, b: BodyRel) -> &SparseBool {
        if b.inverse {
            &self.backward[b.relation]
        } else {
            &self.forward[b.relation]
        }
    }

    /// binarize(Π M^{b_j}); `None` for an empty body.
    pub fn body(&self, body: &[BodyRel]) -> Option<SparseBool> {
        let (first, rest) = body.split_first()?;
        let mut m = self.get(*first).clone();
        for b in rest {
            m = m.bool_product(self.get(*b));
        }
        Some(m)
    }
}

/// Random-walk candidate rules. Walks follow simple paths (no entity
/// revisited) and close at the first step whose end entity is linked to the
/// start entity by a triple other than the walked one. Deduplicated by
/// ordered body, returned sorted.
pub fn sample_rules(kg: &KnowledgeGraph, max_len: usize, n_walks: usize, rng: &mut seed::Rng) -> Vec<PathRule> {
    let n_e = kg.n_entities();
    let mut out = BTreeSet::new();
    if n_e == 0 {
        return Vec::new();
    }
    // augmented adjacency: per entity, outgoing steps grouped by body relation
    let mut steps: Vec<Vec<(BodyRel, Vec<EntityId>)>> = vec![Vec::new(); n_e];
    {
        let mut by: Vec<HashMap<BodyRel, Vec<EntityId>>> = vec![HashMap::new(); n_e];
        for t in kg.triples() {
            by[t.head].entry(BodyRel::fwd(t.relation)).or_default().push(t.tail);
            by[t.tail].entry(BodyRel::inv(t.relation)).or_default().push(t.head);
        }
        for (e, m) in by.into_iter().enumerate() {
            let mut v: Vec<(BodyRel, Vec<EntityId>)> = m.into_iter().collect();
            v.sort_unstable();
            steps[e] = v;
        }
    }
    for _ in 0..n_walks {
        let e0 = rng.gen_range(0..n_e);
        let mut cur = e0;
        let mut body = Vec::with_capacity(max_len);
        let mut visited = vec![e0];
        for _ in 0..max_len {
            let open: Vec<(BodyRel, Vec<EntityId>)> = steps[cur]
                .iter()
                .map(|(rel, tails)| (*rel, tails.iter().copied().filter(|e| !visited.contains(e)).collect::<Vec<_>>()))
                .filter(|(_, tails)| !tails.is_empty())
                .collect();
            let Some((rel, tails)) = open.choose(rng) else { break };
            let next = *tails.choose(rng).expect("non-empty step list");
            visited.push(next);
            body.push(*rel);
            cur = next;
            let mut closed = false;
            for &r in kg.relations_between(e0, cur) {
                let rule = PathRule::new(r, body.clone());
                if !rule.is_tautology() {
                    out.insert(rule);
                    closed = true;
                }
            }
            for &r in kg.relations_between(cur, e0) {
                let rev: Vec<BodyRel> = body.iter().rev().map(|b| b.flipped()).collect();
                let rule = PathRule::new(r, rev);
                if !rule.is_tautology() {
                    out.insert(rule);
                    closed = true;
                }
            }
            if closed {
                break;
            }
        }
    }
    out.into_iter().collect()
}

/// support, ⊕M^body and ⊕M^head of a rule; `None` when the body never
/// fires.
pub fn rule_quality(mats: &RelationMatrices, rule: &PathRule) -> Option<Rule> {
    let body = mats.body(&rule.body)?;
    let body_count = body.nnz() as u64;
    if body_count == 0 {
        return None;
    }
    let head = &mats.forward[rule.head];
    let support = head.overlap(&body) as u64;
    let head_count = head.nnz() as u64;
    Some(Rule {
        rule: rule.clone(),
        support,
        body_count,
        head_count,
        confidence: support as f64 / body_count as f64,
        head_coverage: if head_count == 0 { 0.0 } else { support as f64 / head_count as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleMiningConfig {
    pub max_len: usize,
    pub n_walks: usize,
    pub theta_conf: f64,
    pub theta_hc: f64,
    pub seed: u64,
}

impl Default for RuleMiningConfig {
    fn default() -> Self {
        Self { max_len: 3, n_walks: 200_000, theta_conf: 0.85, theta_hc: 0.05, seed: 0 }
    }
}

/// Samples candidates, scores them in parallel, and keeps rules with
/// confidence and head coverage strictly above the thresholds.
pub fn mine_rules(kg: &KnowledgeGraph, cfg: &RuleMiningConfig) -> Vec<Rule> {
    let mut rng = seed::module_rng(cfg.seed, "rules");
    let candidates = sample_rules(kg, cfg.max_len, cfg.n_walks, &mut rng);
    let mats = RelationMatrices::new(kg);
    let mut rules: Vec<Rule> = candidates
        .par_iter()
        .filter_map(|r| rule_quality(&mats, r))
        .filter(|q| q.confidence > cfg.theta_conf && q.head_coverage > cfg.theta_hc)
        .collect();
    rules.sort_by(|a, b| a.rule.cmp(&b.rule));
    log::info!("{} candidate rules, {} kept", candidates.len(), rules.len());
    rules
}

fn body_token(b: &BodyRel, kg: &KnowledgeGraph) -> String {
    let name = kg.relations().name(b.relation);
    if b.inverse {
        format!("{name}{INVERSE_MARKER}")
    } else {
        name.to_string()
    }
}

pub fn write_rules(path: &Path, kg: &KnowledgeGraph, rules: &[Rule]) -> Result<(), BaselineError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rules {
        let body: Vec<String> = r.rule.body.iter().map(|b| body_token(b, kg)).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            kg.relations().name(r.rule.head),
            body.join(","),
            r.support,
            r.confidence,
            r.head_coverage
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rules written by [`write_rules`]; counts are recomputed against `kg`.
pub fn read_rules(path: &Path, kg: &KnowledgeGraph) -> Result<Vec<Rule>, BaselineError> {
    let text = fs::read_to_string(path)?;
    let mats = RelationMatrices::new(kg);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| BaselineError::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", f.len())));
        }
        let rel = |s: &str| kg.relation_id(s).map_err(|e| bad(e.to_string()));
        let head = rel(f[0])?;
        let body = f[1]
            .split(',')
            .map(|tok| match tok.strip_suffix(INVERSE_MARKER) {
                Some(name) => rel(name).map(BodyRel::inv),
                None => rel(tok).map(BodyRel::fwd),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let rule = PathRule::new(head, body);
        if let Some(q) = rule_quality(&mats, &rule) {
            out.push(q);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub max_iter: usize,
    pub stop_ratio: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { max_iter: 40, stop_ratio: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    pub predicted: PredictedTripleSet,
    pub iterations: usize,
    /// New triples added per iteration.
    pub added: Vec<usize>,
    pub converged: bool,
}

/// Iterated rule application: each iteration evaluates every rule against
/// the matrices of the previous iteration, adds cells absent from M^r with
/// score conf (max over rules inferring the cell), and stops on a fixpoint,
/// when additions fall below `stop_ratio` × the previous additions, or at
/// `max_iter`.
pub fn rule_inference(kg: &KnowledgeGraph, rules: &[Rule], cfg: &InferenceConfig) -> InferenceOutput {
    let n = kg.n_entities();
    let mut pairs: Vec<HashSet<(usize, usize)>> = vec![HashSet::new(); kg.n_relations()];
    for t in kg.triples() {
        pairs[t.relation].insert((t.head, t.tail));
    }
    let mut mats = RelationMatrices::new(kg);
    let mut scores: HashMap<Triple, f64> = HashMap::new();
    let mut added = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.max_iter {
        let found: Vec<Vec<(usize, usize, f64)>> = rules
            .par_iter()
            .map(|rule| {
                let Some(body) = mats.body(&rule.rule.body) else { return Vec::new() };
                let head = &mats.forward[rule.rule.head];
                body.entries().filter(|&(i, j)| !head.contains(i, j)).map(|(i, j)| (i, j, rule.confidence)).collect()
            })
            .collect();
        let mut new_cells: HashMap<Triple, f64> = HashMap::new();
        for (rule, cells) in rules.iter().zip(found) {
            for (i, j, c) in cells {
                let e = new_cells.entry(Triple::new(i, rule.rule.head, j)).or_insert(c);
                *e = e.max(c);
            }
        }
        let n_new = new_cells.len();
        added.push(n_new);
        if n_new == 0 {
            converged = true;
            break;
        }
        let mut touched = BTreeSet::new();
        for (t, c) in new_cells {
            pairs[t.relation].insert((t.head, t.tail));
            scores.insert(t, c);
            touched.insert(t.relation);
        }
        for r in touched {
            mats.forward[r] = SparseBool::from_pairs(n, pairs[r].iter().copied());
            mats.backward[r] = mats.forward[r].transpose();
        }
        if added.len() >= 2 && (n_new as f64) < cfg.stop_ratio * added[added.len() - 2] as f64 {
            break;
        }
    }
    let entries = scores.into_iter().map(|(triple, score)| PredictedEntry { triple, score, provenance: None }).collect();
    InferenceOutput { predicted: PredictedTripleSet::from_entries(entries), iterations: added.len(), added, converged }
}

/// Running softmax normalizer: max score seen and Σ exp(f − max).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamingNormalizer {
    pub max: f64,
    pub sum: f64,
    pub count: u64,
}

impl Default for StreamingNormalizer {
    fn default() -> Self {
        Self { max: f64::NEG_INFINITY, sum: 0.0, count: 0 }
    }
}

impl StreamingNormalizer {
    pub fn push(&mut self, f: f64) {
        if f > self.max {
            self.sum = self.sum * (self.max - f).exp() + 1.0;
            self.max = f;
        } else {
            self.sum += (f - self.max).exp();
        }
        self.count += 1;
    }

    pub fn merge(self, other: Self) -> Self {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other;
        }
        let max = self.max.max(other.max);
        Self { max, sum: self.sum * (self.max - max).exp() + other.sum * (other.max - max).exp(), count: self.count + other.count }
    }

    pub fn prob(&self, f: f64) -> f64 {
        (f - self.max).exp() / self.sum
    }
}

/// KGE-TSP: two passes over ℰ×ℛ×ℰ. Pass 1 accumulates the softmax
/// normalizer per head entity and merges; pass 2 emits non-training triples
/// with probability > θ_kge / |𝒯_all|.
pub fn kge_tsp_predict<T: Scalar>(kg: &KnowledgeGraph, kge: &KgeModel<T>, theta_kge: f64) -> PredictedTripleSet {
    kge_tsp_sweep(kg, kge, &[theta_kge]).pop().unwrap()
}

/// KGE-TSP at several thresholds for the price of one: pass 2 keeps
/// everything above the smallest cut and each set is filtered from that.
pub fn kge_tsp_sweep<T: Scalar>(kg: &KnowledgeGraph, kge: &KgeModel<T>, thetas: &[f64]) -> Vec<PredictedTripleSet> {
    let (n_e, n_r) = (kg.n_entities(), kg.n_relations());
    let norm = (0..n_e)
        .into_par_iter()
        .map(|h| {
            let mut s = StreamingNormalizer::default();
            for t in 0..n_e {
                for f in kge.score_all_relations(h, t) {
                    s.push(f.as_f64());
                }
            }
            s
        })
        .reduce(StreamingNormalizer::default, StreamingNormalizer::merge);
    let n_all = (n_e * n_e * n_r).max(1) as f64;
    let lowest = thetas.iter().copied().fold(f64::INFINITY, f64::min) / n_all;
    let train = kg.triple_set();
    let entries: Vec<PredictedEntry> = (0..n_e)
        .into_par_iter()
        .flat_map_iter(|h| {
            let norm = &norm;
            (0..n_e).flat_map(move |t| {
                kge.score_all_relations(h, t).into_iter().enumerate().filter_map(move |(r, f)| {
                    let p = norm.prob(f.as_f64());
                    let triple = Triple::new(h, r, t);
                    (p > lowest && !train.contains(&triple)).then_some(PredictedEntry { triple, score: p, provenance: None })
                })
            })
        })
        .collect();
    thetas
        .iter()
        .map(|&theta| {
            let cut = theta / n_all;
            PredictedTripleSet::from_entries(entries.iter().filter(|e| e.score > cut).cloned().collect())
        })
        .collect()
}

impl fmt::Display for BodyRel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.inverse {
            write!(f, "{}{INVERSE_MARKER}", self.relation)
        } else {
            write!(f, "{}", self.relation)
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::kg::Vocab;
    use crate::kge::KgeKind;
    use proptest::prelude::*;
    use std::sync::Arc;

    pub(crate) fn named_kg(triples: &[(&str, &str, &str)]) -> KnowledgeGraph {
        KnowledgeGraph::from_named(triples.iter().copied())
    }

    fn family() -> KnowledgeGraph {
        named_kg(&[
            ("a", "husbandOf", "b"),
            ("b", "motherOf", "c"),
            ("a", "fatherOf", "c"),
            ("d", "husbandOf", "e"),
            ("e", "motherOf", "f"),
        ])
    }

    fn rel(kg: &KnowledgeGraph, s: &str) -> RelationId {
        kg.relation_id(s).unwrap()
    }

    /// Enumerates body groundings by explicit path search.
    fn brute_force(kg: &KnowledgeGraph, rule: &PathRule) -> (u64, u64, u64) {
        let n = kg.n_entities();
        let step = |e: usize, b: BodyRel| -> Vec<usize> {
            kg.triples()
                .iter()
                .filter(|t| t.relation == b.relation && if b.inverse { t.tail == e } else { t.head == e })
                .map(|t| if b.inverse { t.head } else { t.tail })
                .collect()
        };
        let mut body_pairs = HashSet::new();
        for x in 0..n {
            let mut frontier = vec![x];
            for &b in &rule.body {
                frontier = frontier.iter().flat_map(|&e| step(e, b)).collect();
            }
            for y in frontier {
                body_pairs.insert((x, y));
            }
        }
        let heads: HashSet<(usize, usize)> = kg.triples().iter().filter(|t| t.relation == rule.head).map(|t| (t.head, t.tail)).collect();
        (body_pairs.intersection(&heads).count() as u64, body_pairs.len() as u64, heads.len() as u64)
    }

    #[test]
    fn quality_spot_value() {
        let kg = family();
        let rule = PathRule::new(rel(&kg, "fatherOf"), vec![BodyRel::fwd(rel(&kg, "husbandOf")), BodyRel::fwd(rel(&kg, "motherOf"))]);
        let q = rule_quality(&RelationMatrices::new(&kg), &rule).unwrap();
        assert_eq!((q.support, q.body_count, q.head_count), (1, 2, 1));
        assert_eq!(q.conf_ratio(), Ratio::new(1, 2));
        assert_eq!(q.hc_ratio(), Ratio::new(1, 1));
    }

    #[test]
    fn quality_trivial_cases() {
        let kg = family();
        let mats = RelationMatrices::new(&kg);
        let taut = rule_quality(&mats, &PathRule::new(rel(&kg, "motherOf"), vec![BodyRel::fwd(rel(&kg, "motherOf"))])).unwrap();
        assert_eq!((taut.confidence, taut.head_coverage), (1.0, 1.0));
        // motherOf then husbandOf never chains
        let dead = PathRule::new(rel(&kg, "fatherOf"), vec![BodyRel::fwd(rel(&kg, "motherOf")), BodyRel::fwd(rel(&kg, "husbandOf"))]);
        assert!(rule_quality(&mats, &dead).is_none());
    }

    #[test]
    fn inference_spot_value() {
        let kg = family();
        let rule = PathRule::new(rel(&kg, "fatherOf"), vec![BodyRel::fwd(rel(&kg, "husbandOf")), BodyRel::fwd(rel(&kg, "motherOf"))]);
        let q = rule_quality(&RelationMatrices::new(&kg), &rule).unwrap();
        let out = rule_inference(&kg, &[q], &InferenceConfig::default());
        let want = Triple::new(kg.entity_id("d").unwrap(), rel(&kg, "fatherOf"), kg.entity_id("f").unwrap());
        assert_eq!(out.predicted.triples(), vec![want]);
        assert_eq!(out.predicted.entries[0].score, 0.5);
        assert_eq!(out.added, vec![1, 0]);
        assert!(out.converged);

        // closed graph: converges immediately with nothing new
        let closed = kg.with_triples(kg.triples().iter().copied().chain([want])).unwrap();
        let q = rule_quality(&RelationMatrices::new(&closed), &rule).unwrap();
        let out = rule_inference(&closed, &[q], &InferenceConfig::default());
        assert!(out.predicted.is_empty());
        assert_eq!(out.iterations, 1);
        assert!(rule_inference(&kg, &[], &InferenceConfig::default()).predicted.is_empty());
    }

    #[test]
    fn inference_chains_and_is_deterministic() {
        // a chain 0→1→…→9 and rule r ← r∧r closes transitively
        let ts: Vec<(String, String, String)> = (0..9).map(|i| (format!("n{i}"), "r".into(), format!("n{}", i + 1))).collect();
        let kg = KnowledgeGraph::from_named(ts.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())));
        let rule = PathRule::new(0, vec![BodyRel::fwd(0), BodyRel::fwd(0)]);
        let q = rule_quality(&RelationMatrices::new(&kg), &rule).unwrap();
        let cfg = InferenceConfig { max_iter: 40, stop_ratio: 0.0 };
        let a = rule_inference(&kg, std::slice::from_ref(&q), &cfg);
        assert!(a.converged);
        assert_eq!(a.predicted.len(), 45 - 9);
        assert_eq!(a, rule_inference(&kg, &[q.clone()], &cfg));
        let capped = rule_inference(&kg, &[q.clone()], &InferenceConfig { max_iter: 1, stop_ratio: 0.0 });
        assert_eq!(capped.iterations, 1);
        assert_eq!(capped.predicted.len(), 8);
        // path lengths 2, 3–4, 5–8, 9 arrive in successive iterations
        assert_eq!(a.added, vec![8, 13, 14, 1, 0]);
        let ratio = rule_inference(&kg, &[q], &InferenceConfig { max_iter: 40, stop_ratio: 1.5 });
        assert_eq!(ratio.added, vec![8, 13, 14]);
    }

    #[test]
    fn star_yields_no_rules_and_triangle_is_found() {
        let star = named_kg(&[("a", "r", "b1"), ("a", "r", "b2"), ("a", "r", "b3")]);
        assert!(sample_rules(&star, 3, 2000, &mut seed::rng(1)).is_empty());
        let tri = named_kg(&[("a", "r1", "b"), ("b", "r2", "c"), ("a", "r3", "c")]);
        let rules = sample_rules(&tri, 2, 5000, &mut seed::rng(2));
        let (r1, r2, r3) = (rel(&tri, "r1"), rel(&tri, "r2"), rel(&tri, "r3"));
        assert!(rules.contains(&PathRule::new(r3, vec![BodyRel::fwd(r1), BodyRel::fwd(r2)])));
        assert!(rules.iter().all(|r| r.body.len() <= 2 && !r.is_tautology()));
        // every closing length-2 walk from the triangle, enumerated by hand
        let expected = [
            PathRule::new(r3, vec![BodyRel::fwd(r1), BodyRel::fwd(r2)]),
            PathRule::new(r1, vec![BodyRel::fwd(r3), BodyRel::inv(r2)]),
            PathRule::new(r2, vec![BodyRel::inv(r1), BodyRel::fwd(r3)]),
        ];
        for e in &expected {
            assert!(rules.contains(e), "{e:?} missing from {rules:?}");
        }
    }

    #[test]
    fn dead_end_walks_are_abandoned() {
        let ents = Vocab::from_names(["a", "b", "x", "y"]).unwrap();
        let rels = Vocab::from_names(["r"]).unwrap();
        let kg = KnowledgeGraph::new(Arc::new(ents), Arc::new(rels), [Triple::new(0, 0, 1)]).unwrap();
        // walks from the isolated x and y stop at once; from a or b the
        // only step leads to an entity already on the path
        assert!(sample_rules(&kg, 3, 200, &mut seed::rng(3)).is_empty());
    }

    #[test]
    fn binarize_product_matches_dense() {
        let mut rng = seed::rng(4);
        for _ in 0..20 {
            let n = 12;
            let mk = |rng: &mut seed::Rng| SparseBool::from_pairs(n, (0..30).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))));
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let p = a.bool_product(&b);
            for i in 0..n {
                for j in 0..n {
                    let dense = (0..n).any(|k| a.contains(i, k) && b.contains(k, j));
                    assert_eq!(p.contains(i, j), dense);
                }
            }
            // idempotent binarization: product with identity is unchanged
            let id = SparseBool::from_pairs(n, (0..n).map(|i| (i, i)));
            assert_eq!(p.bool_product(&id), p);
            assert_eq!(p.transpose().transpose(), p);
        }
    }

    #[test]
    fn streaming_normalizer_matches_direct() {
        let mut rng = seed::rng(5);
        for range in [1.0, 10.0, 50.0] {
            let xs: Vec<f64> = (0..1000).map(|_| rng.gen_range(-range..range)).collect();
            let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = xs.iter().map(|x| (x - mx).exp()).sum();
            let mut s = StreamingNormalizer::default();
            xs.iter().for_each(|&x| s.push(x));
            let mut a = StreamingNormalizer::default();
            let mut b = StreamingNormalizer::default();
            xs[..300].iter().for_each(|&x| a.push(x));
            xs[300..].iter().for_each(|&x| b.push(x));
            let m = b.merge(a);
            for &x in &xs {
                let want = (x - mx).exp() / z;
                assert!((s.prob(x) - want).abs() < 1e-12);
                assert!((m.prob(x) - want).abs() < 1e-12);
            }
        }
    }

    fn tiny_kge_kg() -> (KnowledgeGraph, KgeModel<f64>) {
        let ents = Vocab::from_names((0..10).map(|i| format!("e{i}"))).unwrap();
        let rels = Vocab::from_names((0..10).map(|i| format!("r{i}"))).unwrap();
        let kg = KnowledgeGraph::new(Arc::new(ents), Arc::new(rels), [Triple::new(0, 0, 1), Triple::new(2, 3, 4)]).unwrap();
        let m = KgeModel::init(KgeKind::Hake, 4, 10, 10, 0.5, 1.0, &mut seed::rng(6));
        (kg, m)
    }

    #[test]
    fn kge_tsp_matches_in_memory_softmax() {
        let (kg, m) = tiny_kge_kg();
        let all: Vec<(Triple, f64)> = (0..10)
            .flat_map(|h| (0..10).flat_map(move |r| (0..10).map(move |t| Triple::new(h, r, t))))
            .map(|t| (t, m.score(&t)))
            .collect();
        assert_eq!(all.len(), 1000);
        let z: f64 = all.iter().map(|(_, f)| f.exp()).sum();
        let out = kge_tsp_predict(&kg, &m, 1e-9);
        assert_eq!(out.len(), 998);
        for e in &out.entries {
            assert!((e.score - m.score(&e.triple).exp() / z).abs() < 1e-9);
            assert!(e.score > 0.0 && e.score < 1.0);
        }
        assert!(out.entries.iter().map(|e| e.score).sum::<f64>() < 1.0);
        assert!(kge_tsp_predict(&kg, &m, 1000.0).is_empty());
    }

    #[test]
    fn kge_tsp_sweep_matches_single_runs() {
        let kg = crate::partition::tests::random_kg(9, 3, 30, 4);
        let mut m: KgeModel<f64> = KgeModel::init(KgeKind::PairRe, 3, 9, 3, 0.5, 1.0, &mut seed::rng(5));
        m.entity.iter_mut().for_each(|x| *x *= 4.0);
        let thetas = [0.5, 2.0, 1.0];
        let sweep = kge_tsp_sweep(&kg, &m, &thetas);
        for (set, &theta) in sweep.iter().zip(&thetas) {
            assert_eq!(set, &kge_tsp_predict(&kg, &m, theta));
        }
        assert!(sweep[0].len() >= sweep[2].len() && sweep[2].len() >= sweep[1].len());
        assert!(sweep[1].len() < sweep[0].len());
    }

    #[test]
    fn kge_tsp_two_entity_space() {
        let kg = named_kg(&[("a", "r", "b")]);
        let m: KgeModel<f64> = KgeModel::init(KgeKind::PairRe, 4, 2, 1, 0.5, 1.0, &mut seed::rng(7));
        let out = kge_tsp_predict(&kg, &m, 1e-9);
        assert_eq!(out.len(), 3);
        let z: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)].iter().map(|&(h, t)| m.score(&Triple::new(h, 0, t)).exp()).sum();
        for e in &out.entries {
            assert!((e.score - m.score(&e.triple).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn rules_round_trip_through_file() {
        let kg = family();
        let rule = PathRule::new(rel(&kg, "husbandOf"), vec![BodyRel::fwd(rel(&kg, "fatherOf")), BodyRel::inv(rel(&kg, "motherOf"))]);
        let rule2 = PathRule::new(rel(&kg, "fatherOf"), vec![BodyRel::fwd(rel(&kg, "husbandOf")), BodyRel::fwd(rel(&kg, "motherOf"))]);
        let mats = RelationMatrices::new(&kg);
        let rules: Vec<Rule> = [rule, rule2].iter().filter_map(|r| rule_quality(&mats, r)).collect();
        assert_eq!(rules.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rules.tsv");
        write_rules(&p, &kg, &rules).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains(&format!("motherOf{INVERSE_MARKER}")));
        assert_eq!(read_rules(&p, &kg).unwrap(), rules);
    }

    fn arb_kg() -> impl Strategy<Value = KnowledgeGraph> {
        (2usize..=50, 1usize..=8, 0usize..120, any::<u64>())
            .prop_map(|(n_e, n_r, n_t, s)| crate::partition::tests::random_kg(n_e, n_r, n_t, s))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn quality_matches_grounding_oracle(kg in arb_kg(), s in any::<u64>()) {
            let mats = RelationMatrices::new(&kg);
            let mut rng = seed::rng(s);
            for _ in 0..10 {
                let len = rng.gen_range(1..=3);
                let body = (0..len).map(|_| BodyRel { relation: rng.gen_range(0..kg.n_relations()), inverse: rng.gen() }).collect();
                let rule = PathRule::new(rng.gen_range(0..kg.n_relations()), body);
                let (sup, bc, hc) = brute_force(&kg, &rule);
                match rule_quality(&mats, &rule) {
                    None => prop_assert_eq!(bc, 0),
                    Some(q) => prop_assert_eq!((q.support, q.body_count, q.head_count), (sup, bc, hc)),
                }
            }
        }

        #[test]
        fn inference_never_removes(kg in arb_kg(), s in any::<u64>()) {
            let rules = mine_rules(&kg, &RuleMiningConfig { n_walks: 300, theta_conf: 0.0, theta_hc: 0.0, seed: s, ..RuleMiningConfig::default() });
            let out = rule_inference(&kg, &rules, &InferenceConfig { max_iter: 3, stop_ratio: 0.0 });
            let predicted = out.predicted.triples();
            prop_assert!(predicted.iter().all(|t| !kg.contains(t)));
            prop_assert_eq!(predicted.iter().collect::<HashSet<_>>().len(), predicted.len());
            prop_assert!(out.predicted.entries.iter().all(|e| e.score > 0.0 && e.score <= 1.0));
        }

        #[test]
        fn binarize_monotone(pairs in proptest::collection::vec((0usize..8, 0usize..8), 0..30), extra in proptest::collection::vec((0usize..8, 0usize..8), 0..10), other in proptest::collection::vec((0usize..8, 0usize..8), 0..30)) {
            let a = SparseBool::from_pairs(8, pairs.clone());
            let a2 = SparseBool::from_pairs(8, pairs.into_iter().chain(extra));
            let b = SparseBool::from_pairs(8, other);
            let (p, p2) = (a.bool_product(&b), a2.bool_product(&b));
            prop_assert!(p.entries().all(|(i, j)| p2.contains(i, j)));
        }
    }
}
