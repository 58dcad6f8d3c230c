//! Soft vertex-cut partition: primary entity grouping, group fine-tuning and
//! subgraph construction.
//!
//! Boundary entities reached at the last hop of a neighborhood draw stay
//! ungrouped, so they may end up in several groups.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{connected_components, write_triples, EntityId, KgError, KnowledgeGraph, Triple};
use crate::seed;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("need 0 < n_min < n_max, got n_min={n_min}, n_max={n_max}")]
    BadSizes { n_min: usize, n_max: usize },
    #[error("hop depth must be at least 1")]
    BadHops,
    #[error("candidates_per_draw must be at least 1")]
    BadCandidates,
    #[error("group {group} is not connected and is not a union of whole components")]
    Disconnected { group: usize },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionParams {
    pub hops: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub candidates_per_draw: usize,
    pub seed: u64,
    /// Test hook: use this probability for every hop instead of p_i.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hop_probability_override: Option<f64>,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self { hops: 2, n_min: 30, n_max: 150, candidates_per_draw: 20, seed: 0, hop_probability_override: None }
    }
}

impl PartitionParams {
    pub fn validate(&self) -> Result<(), PartitionError> {
        if self.n_min == 0 || self.n_min >= self.n_max {
            return Err(PartitionError::BadSizes { n_min: self.n_min, n_max: self.n_max });
        }
        if self.hops == 0 {
            return Err(PartitionError::BadHops);
        }
        if self.candidates_per_draw == 0 {
            return Err(PartitionError::BadCandidates);
        }
        Ok(())
    }

    fn target_size(&self) -> f64 {
        (self.n_min + self.n_max) as f64 / 2.0
    }
}

/// How a group came to exist; merged small components are the only groups
/// allowed to be disconnected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupOrigin {
    SmallComponents,
    Neighborhood,
    Fallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityGroup {
    pub entities: Vec<EntityId>,
    pub origin: GroupOrigin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodDraw {
    pub center: EntityId,
    /// `hops[i]` holds 𝒩^{i+1}.
    pub hops: Vec<Vec<EntityId>>,
    pub probabilities: Vec<f64>,
    pub d_avg: f64,
}

impl NeighborhoodDraw {
    pub fn size(&self) -> usize {
        1 + self.hops.iter().map(Vec::len).sum::<usize>()
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        std::iter::once(self.center).chain(self.hops.iter().flatten().copied())
    }

    /// Center and hops 1..L-1; these leave the ungrouped set.
    pub fn interior(&self) -> impl Iterator<Item = EntityId> + '_ {
        let inner = self.hops.len().saturating_sub(1);
        std::iter::once(self.center).chain(self.hops[..inner].iter().flatten().copied())
    }
}

/// Undirected adjacency lists plus the average degree 2|𝒯|/|ℰ|.
#[derive(Clone, Debug)]
pub struct Topology {
    pub adj: Vec<Vec<EntityId>>,
    pub d_avg: f64,
}

impl Topology {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let adj: Vec<Vec<EntityId>> = (0..kg.n_entities()).map(|e| kg.neighbors(e)).collect();
        let d_avg = if kg.n_entities() == 0 { 0.0 } else { 2.0 * kg.len() as f64 / kg.n_entities() as f64 };
        Self { adj, d_avg }
    }
}

/// sqrt(d_avg / (2 |𝒩^{i-1}|)) clamped to [0, 1].
pub fn hop_probability(d_avg: f64, previous_hop_size: usize) -> f64 {
    if previous_hop_size == 0 {
        return 1.0;
    }
    (d_avg / (2.0 * previous_hop_size as f64)).sqrt().clamp(0.0, 1.0)
}

pub fn sample_neighborhood(
    topo: &Topology,
    e: EntityId,
    ungrouped: &[bool],
    params: &PartitionParams,
    rng: &mut seed::Rng,
) -> NeighborhoodDraw {
    let mut seen: HashSet<EntityId> = HashSet::from([e]);
    let mut hops: Vec<Vec<EntityId>> = Vec::with_capacity(params.hops);
    let mut probabilities = Vec::with_capacity(params.hops);
    let mut frontier = vec![e];
    for i in 1..=params.hops {
        let p = params.hop_probability_override.unwrap_or_else(|| {
            if i == 1 {
                1.0
            } else {
                hop_probability(topo.d_avg, frontier.len())
            }
        });
        probabilities.push(p);
        let mut next = Vec::new();
        for &f in &frontier {
            let x: f64 = rng.gen();
            if x > p {
                continue;
            }
            for &n in &topo.adj[f] {
                if ungrouped[n] && seen.insert(n) {
                    next.push(n);
                }
            }
        }
        hops.push(next.clone());
        frontier = next;
    }
    NeighborhoodDraw { center: e, hops, probabilities, d_avg: topo.d_avg }
}

/// Index of the size closest to `target`; ties go to the earliest.
pub fn most_balanced(sizes: &[usize], target: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in sizes.iter().enumerate() {
        let d = (s as f64 - target).abs();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Small-component merging followed by neighborhood grouping. Returns the
/// groups and the ungrouped mask.
pub fn primary_entity_grouping(
    kg: &KnowledgeGraph,
    topo: &Topology,
    params: &PartitionParams,
    rng: &mut seed::Rng,
) -> Result<(Vec<EntityGroup>, Vec<bool>), PartitionError> {
    params.validate()?;
    let mut ungrouped = vec![true; kg.n_entities()];
    let mut groups = Vec::new();
    let mut small: Vec<Vec<EntityId>> = Vec::new();

    for comp in connected_components(kg) {
        if comp.len() >= params.n_min {
            continue;
        }
        match small.last_mut() {
            Some(last) if comp.len() + last.len() < params.n_max => {
                last.extend_from_slice(&comp);
                if last.len() > params.n_min {
                    let mut set = small.pop().expect("non-empty");
                    set.sort_unstable();
                    for &e in &set {
                        ungrouped[e] = false;
                    }
                    groups.push(EntityGroup { entities: set, origin: GroupOrigin::SmallComponents });
                }
            }
            _ => small.push(comp),
        }
    }
    // residual small sets would otherwise never be covered
    for mut set in small {
        set.sort_unstable();
        for &e in &set {
            ungrouped[e] = false;
        }
        groups.push(EntityGroup { entities: set, origin: GroupOrigin::SmallComponents });
    }

    let mut centers: Vec<EntityId> = (0..kg.n_entities()).filter(|&e| ungrouped[e]).collect();
    let target = params.target_size();
    while !centers.is_empty() {
        let e = centers.swap_remove(rng.gen_range(0..centers.len()));
        if !ungrouped[e] {
            continue;
        }
        let draws: Vec<NeighborhoodDraw> = (0..params.candidates_per_draw)
            .map(|_| sample_neighborhood(topo, e, &ungrouped, params, rng))
            .collect();
        let sizes: Vec<usize> = draws.iter().map(NeighborhoodDraw::size).collect();
        let draw = &draws[most_balanced(&sizes, target).expect("at least one draw")];
        if draw.size() > params.n_min {
            let mut set: Vec<EntityId> = draw.entities().collect();
            set.sort_unstable();
            for x in draw.interior() {
                ungrouped[x] = false;
            }
            groups.push(EntityGroup { entities: set, origin: GroupOrigin::Neighborhood });
        }
    }
    Ok((groups, ungrouped))
}

/// Places every remaining ungrouped entity, scanning groups from smallest to
/// largest.
pub fn entity_group_finetune(
    topo: &Topology,
    mut groups: Vec<EntityGroup>,
    mut ungrouped: Vec<bool>,
    rng: &mut seed::Rng,
) -> Vec<EntityGroup> {
    let n = ungrouped.len();
    let mut member: Vec<HashSet<EntityId>> =
        groups.iter().map(|g| g.entities.iter().copied().collect()).collect();
    let mut groups_of: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (gi, g) in groups.iter().enumerate() {
        for &e in &g.entities {
            groups_of[e].push(gi);
        }
    }
    let mut pending: Vec<EntityId> = (0..n).filter(|&e| ungrouped[e]).collect();

    let smallest = |cands: &mut dyn Iterator<Item = usize>, member: &[HashSet<EntityId>]| {
        cands.min_by_key(|&g| (member[g].len(), g))
    };

    while !pending.is_empty() {
        let e = pending.swap_remove(rng.gen_range(0..pending.len()));
        if !ungrouped[e] {
            continue;
        }
        ungrouped[e] = false;
        let target = smallest(&mut groups_of[e].iter().copied(), &member);
        let (gi, new_members): (usize, Vec<EntityId>) = match target {
            Some(g) => (g, topo.adj[e].clone()),
            None => {
                let neighbor_groups = topo.adj[e].iter().flat_map(|&x| groups_of[x].iter().copied());
                let mut add = vec![e];
                add.extend_from_slice(&topo.adj[e]);
                match smallest(&mut neighbor_groups.collect::<Vec<_>>().into_iter(), &member) {
                    Some(g) => (g, add),
                    None => {
                        groups.push(EntityGroup { entities: Vec::new(), origin: GroupOrigin::Fallback });
                        member.push(HashSet::new());
                        (groups.len() - 1, add)
                    }
                }
            }
        };
        for x in new_members {
            if member[gi].insert(x) {
                groups[gi].entities.push(x);
                groups_of[x].push(gi);
            }
        }
    }
    for g in &mut groups {
        g.entities.sort_unstable();
    }
    groups
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgraphStats {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triples: usize,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    pub entities: Vec<EntityId>,
    pub triples: Vec<Triple>,
    pub origin: GroupOrigin,
}

impl Subgraph {
    pub fn stats(&self) -> SubgraphStats {
        let rels: HashSet<_> = self.triples.iter().map(|t| t.relation).collect();
        let n = self.entities.len();
        SubgraphStats {
            n_entities: n,
            n_relations: rels.len(),
            n_triples: self.triples.len(),
            density: if n == 0 { 0.0 } else { self.triples.len() as f64 / (n * n) as f64 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub n_groups: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triples: usize,
    /// n_e · n_r · n_e.
    pub full_candidate_space: u128,
    /// Σ_i n_i² · n_r.
    pub partition_candidate_space: u128,
    /// Distinct ordered co-grouped pairs (h ≠ t) times n_r.
    pub distinct_pair_candidates: u128,
    /// Fraction of the KG's triples whose endpoints share a group.
    pub kept_triple_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionResult {
    pub params: PartitionParams,
    pub subgraphs: Vec<Subgraph>,
    pub summary: PartitionSummary,
}

/// Induced subgraph of every group, built in parallel.
pub fn construct_subgraphs(kg: &KnowledgeGraph, groups: &[EntityGroup], params: &PartitionParams) -> PartitionResult {
    let subgraphs: Vec<Subgraph> = groups
        .par_iter()
        .map(|g| {
            let inside: HashSet<EntityId> = g.entities.iter().copied().collect();
            let mut triples: Vec<Triple> = g
                .entities
                .iter()
                .flat_map(|&h| kg.outgoing(h).filter(|t| inside.contains(&t.tail)).copied())
                .collect();
            triples.sort_unstable();
            Subgraph { entities: g.entities.clone(), triples, origin: g.origin }
        })
        .collect();

    let n_r = kg.n_relations() as u128;
    let n_e = kg.n_entities() as u128;
    let mut pairs: HashSet<(EntityId, EntityId)> = HashSet::new();
    let mut kept: HashSet<Triple> = HashSet::new();
    for s in &subgraphs {
        for &h in &s.entities {
            for &t in &s.entities {
                if h != t {
                    pairs.insert((h, t));
                }
            }
        }
        kept.extend(s.triples.iter().copied());
    }
    let summary = PartitionSummary {
        n_groups: subgraphs.len(),
        n_entities: kg.n_entities(),
        n_relations: kg.n_relations(),
        n_triples: kg.len(),
        full_candidate_space: n_e * n_r * n_e,
        partition_candidate_space: subgraphs.iter().map(|s| (s.entities.len() as u128).pow(2) * n_r).sum(),
        distinct_pair_candidates: pairs.len() as u128 * n_r,
        kept_triple_fraction: if kg.is_empty() { 1.0 } else { kept.len() as f64 / kg.len() as f64 },
    };
    PartitionResult { params: params.clone(), subgraphs, summary }
}

/// Full partition: grouping with best-of-k draws, fine-tuning, subgraphs.
pub fn partition(kg: &KnowledgeGraph, params: &PartitionParams) -> Result<PartitionResult, PartitionError> {
    params.validate()?;
    let topo = Topology::new(kg);
    let mut rng = seed::module_rng(params.seed, "partition");
    let (groups, ungrouped) = primary_entity_grouping(kg, &topo, params, &mut rng)?;
    let n_primary = groups.len();
    let groups = entity_group_finetune(&topo, groups, ungrouped, &mut rng);
    log::info!("partition: {} primary groups, {} after fine-tuning", n_primary, groups.len());
    Ok(construct_subgraphs(kg, &groups, params))
}

/// True when the subgraph's undirected view is connected, or (for merged
/// small components) each of its pieces is a whole component of `kg`.
pub fn subgraph_is_connected(topo: &Topology, s: &Subgraph) -> bool {
    let pieces = induced_components(topo, &s.entities);
    if pieces.len() <= 1 {
        return true;
    }
    if s.origin != GroupOrigin::SmallComponents {
        return false;
    }
    pieces.iter().all(|piece| piece.iter().all(|&e| topo.adj[e].iter().all(|n| piece.binary_search(n).is_ok())))
}

fn induced_components(topo: &Topology, entities: &[EntityId]) -> Vec<Vec<EntityId>> {
    let inside: HashSet<EntityId> = entities.iter().copied().collect();
    let mut seen: HashSet<EntityId> = HashSet::new();
    let mut out = Vec::new();
    for &start in entities {
        if !seen.insert(start) {
            continue;
        }
        let mut piece = vec![start];
        let mut stack = vec![start];
        while let Some(x) = stack.pop() {
            for &n in &topo.adj[x] {
                if inside.contains(&n) && seen.insert(n) {
                    piece.push(n);
                    stack.push(n);
                }
            }
        }
        piece.sort_unstable();
        out.push(piece);
    }
    out
}

impl PartitionResult {
    pub fn check_connected(&self, kg: &KnowledgeGraph) -> Result<(), PartitionError> {
        let topo = Topology::new(kg);
        for (i, s) in self.subgraphs.iter().enumerate() {
            if !subgraph_is_connected(&topo, s) {
                return Err(PartitionError::Disconnected { group: i });
            }
        }
        Ok(())
    }

    pub fn covers(&self, n_entities: usize) -> bool {
        let mut hit = vec![false; n_entities];
        for s in &self.subgraphs {
            for &e in &s.entities {
                hit[e] = true;
            }
        }
        hit.into_iter().all(|b| b)
    }

    pub fn manifest(&self, kg: &KnowledgeGraph) -> Manifest {
        Manifest {
            params: self.params.clone(),
            summary: self.summary.clone(),
            groups: self
                .subgraphs
                .iter()
                .enumerate()
                .map(|(i, s)| ManifestGroup {
                    file: format!("subgraph_{i:05}.txt"),
                    origin: s.origin,
                    stats: s.stats(),
                    entities: s.entities.iter().map(|&e| kg.entities().name(e).to_string()).collect(),
                })
                .collect(),
        }
    }

    /// `manifest.json` plus one triple file per subgraph.
    pub fn write_dir(&self, kg: &KnowledgeGraph, dir: &Path) -> Result<(), PartitionError> {
        fs::create_dir_all(dir)?;
        let manifest = self.manifest(kg);
        for (g, s) in manifest.groups.iter().zip(&self.subgraphs) {
            write_triples(&dir.join(&g.file), kg, &s.triples)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Rebuilds a partition from a manifest written by [`Self::write_dir`].
    pub fn read_dir(kg: &KnowledgeGraph, dir: &Path) -> Result<Self, PartitionError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let groups = manifest
            .groups
            .iter()
            .map(|g| {
                let mut entities =
                    g.entities.iter().map(|n| kg.entity_id(n)).collect::<Result<Vec<_>, _>>()?;
                entities.sort_unstable();
                Ok(EntityGroup { entities, origin: g.origin })
            })
            .collect::<Result<Vec<_>, KgError>>()?;
        Ok(construct_subgraphs(kg, &groups, &manifest.params))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestGroup {
    pub file: String,
    pub origin: GroupOrigin,
    pub stats: SubgraphStats,
    pub entities: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: PartitionParams,
    pub summary: PartitionSummary,
    pub groups: Vec<ManifestGroup>,
}
