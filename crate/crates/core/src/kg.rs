//! Interned knowledge graph, dataset ingestion and topology helpers.
//!
//! Identifier strings are mapped to dense integer ids at load time. Ids are
//! assigned in first-seen order while reading train, valid and test (in that
//! order), so the same files always produce the same ids.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type EntityId = usize;
pub type RelationId = usize;

/// Marker appended to a relation name to name its inverse.
pub const INVERSE_SUFFIX: &str = "^-1";
/// Name of the self-loop relation added by [`add_inverse_and_selfloop`].
pub const SELFLOOP_RELATION: &str = "__selfloop__";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub const fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self { head, relation, tail }
    }

    pub fn pair(&self) -> (EntityId, EntityId) {
        (self.head, self.tail)
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected 3 tab-separated fields, found {found}")]
    Parse { path: PathBuf, line: usize, found: usize },
    #[error("entity id {id} out of range (vocabulary has {len})")]
    EntityOutOfRange { id: EntityId, len: usize },
    #[error("relation id {id} out of range (vocabulary has {len})")]
    RelationOutOfRange { id: RelationId, len: usize },
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateName(String),
    #[error("unknown {kind} {name:?}")]
    UnknownName { kind: &'static str, name: String },
    #[error("graph already carries inverse and self-loop relations")]
    AlreadyAugmented,
}

/// Bijection between identifier strings and `0..len`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Result<Self, KgError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for n in names {
            let n = n.into();
            if v.index.contains_key(&n) {
                return Err(KgError::DuplicateName(n));
            }
            v.intern(&n);
        }
        Ok(v)
    }

    /// Id of `name`, inserting it at the end if unseen.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Entity/relation vocabularies plus an indexed, duplicate-free triple set.
///
/// Immutable after construction.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Arc<Vocab>,
    relations: Arc<Vocab>,
    triples: Vec<Triple>,
    set: HashSet<Triple>,
    by_head: Vec<Vec<usize>>,
    by_tail: Vec<Vec<usize>>,
    by_pair: HashMap<(EntityId, EntityId), Vec<RelationId>>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
            && self.relations == other.relations
            && self.triples == other.triples
    }
}

impl KnowledgeGraph {
    /// Builds the graph; duplicates are dropped and triples are stored sorted.
    pub fn new<I>(entities: Arc<Vocab>, relations: Arc<Vocab>, triples: I) -> Result<Self, KgError>
    where
        I: IntoIterator<Item = Triple>,
    {
        let n_e = entities.len();
        let n_r = relations.len();
        let mut ts: Vec<Triple> = Vec::new();
        for t in triples {
            if t.head >= n_e {
                return Err(KgError::EntityOutOfRange { id: t.head, len: n_e });
            }
            if t.tail >= n_e {
                return Err(KgError::EntityOutOfRange { id: t.tail, len: n_e });
            }
            if t.relation >= n_r {
                return Err(KgError::RelationOutOfRange { id: t.relation, len: n_r });
            }
            ts.push(t);
        }
        ts.sort_unstable();
        ts.dedup();
        Ok(Self::from_sorted_unchecked(entities, relations, ts))
    }

    fn from_sorted_unchecked(entities: Arc<Vocab>, relations: Arc<Vocab>, triples: Vec<Triple>) -> Self {
        let n_e = entities.len();
        let mut by_head = vec![Vec::new(); n_e];
        let mut by_tail = vec![Vec::new(); n_e];
        let mut by_pair: HashMap<(EntityId, EntityId), Vec<RelationId>> = HashMap::new();
        for (i, t) in triples.iter().enumerate() {
            by_head[t.head].push(i);
            by_tail[t.tail].push(i);
            by_pair.entry(t.pair()).or_default().push(t.relation);
        }
        let set = triples.iter().copied().collect();
        Self { entities, relations, triples, set, by_head, by_tail, by_pair }
    }

    /// Same vocabularies, different triples.
    pub fn with_triples<I>(&self, triples: I) -> Result<Self, KgError>
    where
        I: IntoIterator<Item = Triple>,
    {
        Self::new(self.entities.clone(), self.relations.clone(), triples)
    }

    /// Builds vocabularies and triples from string triples in first-seen order.
    pub fn from_named<'a, I>(triples: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut ents = Vocab::new();
        let mut rels = Vocab::new();
        let ts: Vec<Triple> = triples
            .into_iter()
            .map(|(h, r, t)| {
                let h = ents.intern(h);
                let r = rels.intern(r);
                let t = ents.intern(t);
                Triple::new(h, r, t)
            })
            .collect();
        Self::new(Arc::new(ents), Arc::new(rels), ts).expect("ids interned from the same vocabulary")
    }

    pub fn entities(&self) -> &Arc<Vocab> {
        &self.entities
    }

    pub fn relations(&self) -> &Arc<Vocab> {
        &self.relations
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    /// Sorted, duplicate-free.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.set.contains(t)
    }

    pub fn triple_set(&self) -> &HashSet<Triple> {
        &self.set
    }

    /// Whether any triple links `h` to `t` (in that direction).
    pub fn has_pair(&self, h: EntityId, t: EntityId) -> bool {
        self.by_pair.contains_key(&(h, t))
    }

    pub fn relations_between(&self, h: EntityId, t: EntityId) -> &[RelationId] {
        self.by_pair.get(&(h, t)).map_or(&[], Vec::as_slice)
    }

    pub fn outgoing(&self, h: EntityId) -> impl Iterator<Item = &Triple> + '_ {
        self.by_head[h].iter().map(move |&i| &self.triples[i])
    }

    pub fn incoming(&self, t: EntityId) -> impl Iterator<Item = &Triple> + '_ {
        self.by_tail[t].iter().map(move |&i| &self.triples[i])
    }

    /// Undirected neighbours of `e`, sorted and deduplicated, excluding `e`.
    pub fn neighbors(&self, e: EntityId) -> Vec<EntityId> {
        let mut n: Vec<EntityId> = self
            .outgoing(e)
            .map(|t| t.tail)
            .chain(self.incoming(e).map(|t| t.head))
            .filter(|&x| x != e)
            .collect();
        n.sort_unstable();
        n.dedup();
        n
    }

    /// Rebuilds every index from the triple list and compares.
    pub fn indices_consistent(&self) -> bool {
        let rebuilt = Self::from_sorted_unchecked(self.entities.clone(), self.relations.clone(), self.triples.clone());
        rebuilt.by_head == self.by_head
            && rebuilt.by_tail == self.by_tail
            && rebuilt.by_pair == self.by_pair
            && rebuilt.set == self.set
    }

    pub fn entity_id(&self, name: &str) -> Result<EntityId, KgError> {
        self.entities
            .get(name)
            .ok_or_else(|| KgError::UnknownName { kind: "entity", name: name.to_owned() })
    }

    pub fn relation_id(&self, name: &str) -> Result<RelationId, KgError> {
        self.relations
            .get(name)
            .ok_or_else(|| KgError::UnknownName { kind: "relation", name: name.to_owned() })
    }

    /// `head\trelation\ttail` for one triple.
    pub fn format_triple(&self, t: &Triple) -> String {
        format!(
            "{}\t{}\t{}",
            self.entities.name(t.head),
            self.relations.name(t.relation),
            self.entities.name(t.tail)
        )
    }
}

/// Duplicate and overlap counts observed while building a split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitNotes {
    /// Repeated lines dropped within a single file.
    pub duplicates: usize,
    /// Valid/test triples dropped because an earlier file already holds them.
    pub cross_split_overlaps: usize,
    /// Triples forced into train to keep every entity and relation covered.
    pub pinned_to_train: usize,
}

/// Train graph plus held-out valid and test triples over one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: KnowledgeGraph,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub notes: SplitNotes,
}

impl DatasetSplit {
    /// Sorts and deduplicates the held-out sets and removes any triple already
    /// present in an earlier set (train before valid before test).
    pub fn new(train: KnowledgeGraph, mut valid: Vec<Triple>, mut test: Vec<Triple>) -> Result<Self, KgError> {
        let mut notes = SplitNotes::default();
        for set in [&mut valid, &mut test] {
            let before = set.len();
            set.sort_unstable();
            set.dedup();
            notes.duplicates += before - set.len();
        }
        let valid_set: HashSet<Triple> = valid.iter().copied().collect();
        let before = valid.len() + test.len();
        valid.retain(|t| !train.contains(t));
        test.retain(|t| !train.contains(t) && !valid_set.contains(t));
        notes.cross_split_overlaps = before - valid.len() - test.len();
        // validate ids against the shared vocabulary
        train.with_triples(valid.iter().chain(test.iter()).copied())?;
        Ok(Self { train, valid, test, notes })
    }

    pub fn entities(&self) -> &Arc<Vocab> {
        self.train.entities()
    }

    pub fn relations(&self) -> &Arc<Vocab> {
        self.train.relations()
    }

    pub fn test_set(&self) -> HashSet<Triple> {
        self.test.iter().copied().collect()
    }

    /// Graph over train ∪ valid, used when valid triples join training.
    pub fn train_with_valid(&self) -> KnowledgeGraph {
        self.train
            .with_triples(self.train.triples().iter().chain(&self.valid).copied())
            .expect("valid ids checked at construction")
    }

    /// Writes `train.txt`, `valid.txt` and `test.txt` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), KgError> {
        fs::create_dir_all(dir).map_err(|source| KgError::Io { path: dir.to_owned(), source })?;
        write_triples(&dir.join("train.txt"), &self.train, self.train.triples())?;
        write_triples(&dir.join("valid.txt"), &self.train, &self.valid)?;
        write_triples(&dir.join("test.txt"), &self.train, &self.test)?;
        Ok(())
    }
}

/// Loads `train.txt`, `valid.txt` and `test.txt` from a dataset directory.
pub fn load_dir(dir: &Path) -> Result<DatasetSplit, KgError> {
    load_kg(&dir.join("train.txt"), &dir.join("valid.txt"), &dir.join("test.txt"))
}

/// Reads three triple files into one split sharing a vocabulary built from
/// their union.
pub fn load_kg(train_path: &Path, valid_path: &Path, test_path: &Path) -> Result<DatasetSplit, KgError> {
    let mut ents = Vocab::new();
    let mut rels = Vocab::new();
    let mut files = Vec::with_capacity(3);
    let mut duplicates = 0;
    for path in [train_path, valid_path, test_path] {
        let rows = read_triple_file(path)?;
        let mut seen = HashSet::with_capacity(rows.len());
        let mut ts = Vec::with_capacity(rows.len());
        for (h, r, t) in &rows {
            let tr = Triple::new(ents.intern(h), rels.intern(r), ents.intern(t));
            if seen.insert(tr) {
                ts.push(tr);
            } else {
                duplicates += 1;
            }
        }
        files.push(ts);
    }
    if duplicates > 0 {
        log::warn!("dropped {duplicates} duplicate triple line(s)");
    }
    let test = files.pop().unwrap_or_default();
    let valid = files.pop().unwrap_or_default();
    let train = files.pop().unwrap_or_default();
    let train = KnowledgeGraph::new(Arc::new(ents), Arc::new(rels), train)?;
    let mut split = DatasetSplit::new(train, valid, test)?;
    split.notes.duplicates += duplicates;
    if split.notes.cross_split_overlaps > 0 {
        log::warn!(
            "dropped {} held-out triple(s) already present in an earlier file",
            split.notes.cross_split_overlaps
        );
    }
    Ok(split)
}

/// Parses a tab-separated triple file. Blank lines are skipped; any other
/// line must have exactly three fields.
pub fn read_triple_file(path: &Path) -> Result<Vec<(String, String, String)>, KgError> {
    let text = fs::read_to_string(path).map_err(|source| KgError::Io { path: path.to_owned(), source })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::Parse { path: path.to_owned(), line: i + 1, found: fields.len() });
        }
        out.push((fields[0].to_owned(), fields[1].to_owned(), fields[2].to_owned()));
    }
    Ok(out)
}

/// Writes triples by name, one per line, using the vocabularies of `kg`.
pub fn write_triples(path: &Path, kg: &KnowledgeGraph, triples: &[Triple]) -> Result<(), KgError> {
    let io = |source| KgError::Io { path: path.to_owned(), source };
    let f = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(f);
    for t in triples {
        writeln!(w, "{}", kg.format_triple(t)).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Connected components of the undirected triple graph, covering every
/// vocabulary entity. Members are sorted; components are ordered by size,
/// then by smallest member.
pub fn connected_components(kg: &KnowledgeGraph) -> Vec<Vec<EntityId>> {
    let n = kg.n_entities();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for t in kg.triples() {
        let a = find(&mut parent, t.head);
        let b = find(&mut parent, t.tail);
        if a != b {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            parent[hi] = lo;
        }
    }
    let mut groups: HashMap<usize, Vec<EntityId>> = HashMap::new();
    for e in 0..n {
        let root = find(&mut parent, e);
        groups.entry(root).or_default().push(e);
    }
    let mut comps: Vec<Vec<EntityId>> = groups.into_values().collect();
    comps.sort_by_key(|c| (c.len(), c[0]));
    comps
}

/// A graph extended with one inverse relation per relation and a self-loop
/// triple on every entity.
///
/// Relation ids: `0..n` are the originals, `n..2n` their inverses (`r + n`),
/// and `2n` is the self-loop relation.
#[derive(Clone, Debug)]
pub struct AugmentedKg {
    base: KnowledgeGraph,
    graph: KnowledgeGraph,
    n_base_relations: usize,
}

impl AugmentedKg {
    pub fn base(&self) -> &KnowledgeGraph {
        &self.base
    }

    /// The augmented triple set.
    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    pub fn n_base_relations(&self) -> usize {
        self.n_base_relations
    }

    pub fn inverse(&self, r: RelationId) -> RelationId {
        let n = self.n_base_relations;
        assert!(r < 2 * n, "self-loop relation has no inverse");
        if r < n {
            r + n
        } else {
            r - n
        }
    }

    pub fn is_inverse(&self, r: RelationId) -> bool {
        r >= self.n_base_relations && r < 2 * self.n_base_relations
    }

    pub fn selfloop(&self) -> RelationId {
        2 * self.n_base_relations
    }
}

/// Adds `(t, r⁻¹, h)` for every triple and `(e, selfloop, e)` for every entity.
pub fn add_inverse_and_selfloop(kg: &KnowledgeGraph) -> Result<AugmentedKg, KgError> {
    if kg.relations().get(SELFLOOP_RELATION).is_some() {
        return Err(KgError::AlreadyAugmented);
    }
    let n = kg.n_relations();
    let names = kg.relations().names();
    let inverse_names = names.iter().map(|r| format!("{r}{INVERSE_SUFFIX}"));
    let vocab = Vocab::from_names(
        names
            .iter()
            .cloned()
            .chain(inverse_names)
            .chain(std::iter::once(SELFLOOP_RELATION.to_owned())),
    )?;
    let mut triples = Vec::with_capacity(2 * kg.len() + kg.n_entities());
    for t in kg.triples() {
        triples.push(*t);
        triples.push(Triple::new(t.tail, t.relation + n, t.head));
    }
    triples.extend((0..kg.n_entities()).map(|e| Triple::new(e, 2 * n, e)));
    let graph = KnowledgeGraph::new(kg.entities().clone(), Arc::new(vocab), triples)?;
    Ok(AugmentedKg { base: kg.clone(), graph, n_base_relations: n })
}
