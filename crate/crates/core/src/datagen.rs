//! Synthetic closed family knowledge graphs and deterministic dataset splits.
//!
//! Base facts are marriages (`husbandOf`) and one gendered child link per
//! child (`sonOf`/`daughterOf` to a random parent). Path rules then close
//! the graph; no derived triple is a self loop.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{BodyRel, PathRule, RelationMatrices};
use crate::kg::{DatasetSplit, KgError, KnowledgeGraph, RelationId, Triple, Vocab};
use crate::seed;

pub const FAMILY_RELATIONS: [&str; 12] = [
    "fatherOf",
    "motherOf",
    "husbandOf",
    "wifeOf",
    "sonOf",
    "daughterOf",
    "brotherOf",
    "sisterOf",
    "grandfatherOf",
    "grandmotherOf",
    "uncleOf",
    "auntOf",
];

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("need at least 4 people and 1 family, got {n_people} and {n_families}")]
    TooSmall { n_people: usize, n_families: usize },
    #[error("split ratios {0:?} must be non-negative, sum to 1 and give train a positive share")]
    BadRatios([f64; 3]),
    #[error(transparent)]
    Kg(#[from] KgError),
}

/// The 12-relation vocabulary and its closure rules.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilySchema {
    pub relations: Vec<&'static str>,
    pub rules: Vec<PathRule>,
}

impl Default for FamilySchema {
    fn default() -> Self {
        Self::new()
    }
}

impl FamilySchema {
    pub fn new() -> Self {
        let id = |name: &str| FAMILY_RELATIONS.iter().position(|r| *r == name).expect("schema relation");
        let f = |name: &str| BodyRel::fwd(id(name));
        let i = |name: &str| BodyRel::inv(id(name));
        let rule = |head: &str, body: Vec<BodyRel>| PathRule::new(id(head), body);
        let rules = vec![
            rule("husbandOf", vec![i("wifeOf")]),
            rule("wifeOf", vec![i("husbandOf")]),
            rule("sonOf", vec![f("sonOf"), f("husbandOf")]),
            rule("sonOf", vec![f("sonOf"), f("wifeOf")]),
            rule("daughterOf", vec![f("daughterOf"), f("husbandOf")]),
            rule("daughterOf", vec![f("daughterOf"), f("wifeOf")]),
            rule("fatherOf", vec![f("husbandOf"), f("motherOf")]),
            rule("motherOf", vec![f("wifeOf"), f("fatherOf")]),
            rule("fatherOf", vec![f("husbandOf"), i("sonOf")]),
            rule("fatherOf", vec![f("husbandOf"), i("daughterOf")]),
            rule("motherOf", vec![f("wifeOf"), i("sonOf")]),
            rule("motherOf", vec![f("wifeOf"), i("daughterOf")]),
            rule("brotherOf", vec![f("sonOf"), f("fatherOf")]),
            rule("sisterOf", vec![f("daughterOf"), f("fatherOf")]),
            rule("grandfatherOf", vec![f("fatherOf"), f("fatherOf")]),
            rule("grandfatherOf", vec![f("fatherOf"), f("motherOf")]),
            rule("grandmotherOf", vec![f("motherOf"), f("fatherOf")]),
            rule("grandmotherOf", vec![f("motherOf"), f("motherOf")]),
            rule("uncleOf", vec![f("brotherOf"), f("fatherOf")]),
            rule("uncleOf", vec![f("brotherOf"), f("motherOf")]),
            rule("auntOf", vec![f("sisterOf"), f("fatherOf")]),
            rule("auntOf", vec![f("sisterOf"), f("motherOf")]),
        ];
        Self { relations: FAMILY_RELATIONS.to_vec(), rules }
    }

    pub fn relation(&self, name: &str) -> RelationId {
        self.relations.iter().position(|r| *r == name).expect("schema relation")
    }

    /// `head <- b1 ^ b2` with inverse atoms suffixed by `^-1`.
    pub fn rule_strings(&self) -> Vec<String> {
        self.rules
            .iter()
            .map(|r| {
                let body: Vec<String> = r
                    .body
                    .iter()
                    .map(|b| {
                        let name = self.relations[b.relation];
                        if b.inverse {
                            format!("{name}{}", crate::baselines::INVERSE_MARKER)
                        } else {
                            name.to_string()
                        }
                    })
                    .collect();
                format!("{} <- {}", self.relations[r.head], body.join(" ^ "))
            })
            .collect()
    }

    /// Applies every rule to a fixpoint. Each round evaluates all rules on
    /// the previous round's graph; derived self loops are dropped.
    pub fn close(&self, kg: &KnowledgeGraph) -> KnowledgeGraph {
        let mut set: HashSet<Triple> = kg.triples().iter().copied().collect();
        let mut current = kg.clone();
        loop {
            let mats = RelationMatrices::new(&current);
            let mut fresh = Vec::new();
            for rule in &self.rules {
                let Some(body) = mats.body(&rule.body) else { continue };
                for (h, t) in body.entries() {
                    let tr = Triple::new(h, rule.head, t);
                    if h != t && !set.contains(&tr) {
                        fresh.push(tr);
                    }
                }
            }
            fresh.retain(|t| set.insert(*t));
            if fresh.is_empty() {
                return current;
            }
            current = current.with_triples(set.iter().copied()).expect("ids from the same graph");
        }
    }

    pub fn is_closed(&self, kg: &KnowledgeGraph) -> bool {
        self.close(kg).len() == kg.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub n_people: usize,
    pub n_families: usize,
    pub max_children: usize,
    pub marriage_prob: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self { n_people: 2378, n_families: 20, max_children: 8, marriage_prob: 0.6 }
    }
}

/// Grows each family breadth-first from a founding couple until its share of
/// `n_people` is reached, then closes the base facts under the schema.
pub fn generate_family_kg(cfg: &FamilyConfig, rng: &mut seed::Rng) -> Result<KnowledgeGraph, DatagenError> {
    if cfg.n_people < 4 || cfg.n_families == 0 {
        return Err(DatagenError::TooSmall { n_people: cfg.n_people, n_families: cfg.n_families });
    }
    let schema = FamilySchema::new();
    let (husband, son, daughter) = (schema.relation("husbandOf"), schema.relation("sonOf"), schema.relation("daughterOf"));
    let n_families = cfg.n_families.min(cfg.n_people / 2);
    let mut male: Vec<bool> = Vec::with_capacity(cfg.n_people);
    let mut base = Vec::new();
    fn new_person(is_male: bool, male: &mut Vec<bool>) -> usize {
        male.push(is_male);
        male.len() - 1
    }

    for f in 0..n_families {
        let budget = cfg.n_people / n_families + usize::from(f < cfg.n_people % n_families);
        let start = male.len();
        let h = new_person(true, &mut male);
        let w = new_person(false, &mut male);
        base.push(Triple::new(h, husband, w));
        let mut couples = VecDeque::from([(h, w)]);
        let mut single: Vec<usize> = Vec::new();
        while male.len() - start < budget {
            let Some((h, w)) = couples.pop_front().or_else(|| {
                // keep the family growing: marry off the youngest single child
                let c = single.pop()?;
                let spouse = new_person(!male[c], &mut male);
                let pair = if male[c] { (c, spouse) } else { (spouse, c) };
                base.push(Triple::new(pair.0, husband, pair.1));
                Some(pair)
            }) else {
                break;
            };
            let k = rng.gen_range(1..=cfg.max_children.max(1));
            for _ in 0..k {
                if male.len() - start >= budget {
                    break;
                }
                let is_male = rng.gen_bool(0.5);
                let c = new_person(is_male, &mut male);
                let parent = if rng.gen_bool(0.5) { h } else { w };
                base.push(Triple::new(c, if is_male { son } else { daughter }, parent));
                if male.len() - start + 1 < budget && rng.gen_bool(cfg.marriage_prob) {
                    let s = new_person(!is_male, &mut male);
                    let pair = if is_male { (c, s) } else { (s, c) };
                    base.push(Triple::new(pair.0, husband, pair.1));
                    couples.push_back(pair);
                } else {
                    single.push(c);
                }
            }
        }
    }

    let ents = Vocab::from_names((0..male.len()).map(|i| format!("p{i}")))?;
    let rels = Vocab::from_names(FAMILY_RELATIONS)?;
    let kg = KnowledgeGraph::new(Arc::new(ents), Arc::new(rels), base)?;
    Ok(schema.close(&kg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.72, valid: 0.08, test: 0.20 }
    }
}

impl SplitRatios {
    pub fn new(train: f64, valid: f64, test: f64) -> Result<Self, DatagenError> {
        let r = Self { train, valid, test };
        let ok = [train, valid, test].iter().all(|x| (0.0..=1.0).contains(x)) && train > 0.0 && (train + valid + test - 1.0).abs() <= 1e-9;
        if ok {
            Ok(r)
        } else {
            Err(DatagenError::BadRatios([train, valid, test]))
        }
    }
}

/// Uniform random split: floor(n·valid) valid and floor(n·test) test
/// triples, the remainder to train. Held-out triples whose entity or
/// relation would be missing from train are swapped with a train triple
/// whose removal loses no coverage; if no such swap exists the triple is
/// pinned to train.
pub fn split_dataset(kg: &KnowledgeGraph, ratios: &SplitRatios, rng: &mut seed::Rng) -> Result<DatasetSplit, DatagenError> {
    let ratios = SplitRatios::new(ratios.train, ratios.valid, ratios.test)?;
    let n = kg.len();
    let n_valid = (n as f64 * ratios.valid).floor() as usize;
    let n_test = (n as f64 * ratios.test).floor() as usize;
    let mut order: Vec<Triple> = kg.triples().to_vec();
    order.shuffle(rng);
    let mut held: Vec<Triple> = order.split_off(n - n_valid - n_test);
    let mut train = order;

    let mut ent_count: HashMap<usize, usize> = HashMap::new();
    let mut rel_count: HashMap<usize, usize> = HashMap::new();
    for t in &train {
        *ent_count.entry(t.head).or_default() += 1;
        *ent_count.entry(t.tail).or_default() += 1;
        *rel_count.entry(t.relation).or_default() += 1;
    }
    let covered = |t: &Triple, e: &HashMap<usize, usize>, r: &HashMap<usize, usize>| {
        e.get(&t.head).copied().unwrap_or(0) > 0 && e.get(&t.tail).copied().unwrap_or(0) > 0 && r.get(&t.relation).copied().unwrap_or(0) > 0
    };
    let mut pinned = Vec::new();
    let mut i = 0;
    while i < held.len() {
        let t = held[i];
        if covered(&t, &ent_count, &rel_count) {
            i += 1;
            continue;
        }
        // a train triple that can leave without uncovering anything
        let removable = |u: &Triple| {
            let keeps = |e: usize| ent_count[&e] > usize::from(u.head == e) + usize::from(u.tail == e);
            keeps(u.head) && keeps(u.tail) && rel_count[&u.relation] > 1
        };
        let start = rng.gen_range(0..train.len().max(1));
        let pick = (0..train.len()).map(|k| (start + k) % train.len()).find(|&k| removable(&train[k]));
        *ent_count.entry(t.head).or_default() += 1;
        *ent_count.entry(t.tail).or_default() += 1;
        *rel_count.entry(t.relation).or_default() += 1;
        match pick {
            Some(k) => {
                let u = train[k];
                *ent_count.get_mut(&u.head).expect("counted") -= 1;
                *ent_count.get_mut(&u.tail).expect("counted") -= 1;
                *rel_count.get_mut(&u.relation).expect("counted") -= 1;
                train[k] = t;
                held[i] = u;
            }
            None => {
                pinned.push(t);
                held.swap_remove(i);
                continue;
            }
        }
        i += 1;
    }
    if !pinned.is_empty() {
        log::warn!("{} triple(s) pinned to train to keep entity and relation coverage", pinned.len());
    }
    train.extend(pinned.iter().copied());
    let test = held.split_off(held.len().min(n_valid));
    let valid = held;
    let mut split = DatasetSplit::new(kg.with_triples(train)?, valid, test)?;
    split.notes.pinned_to_train = pinned.len();
    Ok(split)
}

/// Record written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub seed: u64,
    pub family: FamilyConfig,
    pub ratios: SplitRatios,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triples: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub rules: Vec<String>,
}

/// Generates and splits a family dataset; each stage draws from its own
/// seed stream.
pub fn generate_dataset(family: &FamilyConfig, ratios: &SplitRatios, seed_: u64) -> Result<(DatasetSplit, GenerationManifest), DatagenError> {
    let kg = generate_family_kg(family, &mut seed::module_rng(seed_, "datagen"))?;
    let split = split_dataset(&kg, ratios, &mut seed::module_rng(seed_, "split"))?;
    let manifest = GenerationManifest {
        seed: seed_,
        family: family.clone(),
        ratios: *ratios,
        n_entities: kg.n_entities(),
        n_relations: kg.n_relations(),
        n_triples: kg.len(),
        n_train: split.train.len(),
        n_valid: split.valid.len(),
        n_test: split.test.len(),
        rules: FamilySchema::new().rule_strings(),
    };
    Ok((split, manifest))
}
