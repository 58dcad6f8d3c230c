//! Head-tail entity modeling: a CompGCN-style encoder over a subgraph's
//! support triples and a pair decoder with entity attention and relation
//! attention, trained episodically over the partition.
//!
//! All parameters live in one flat vector described by a [`Layout`] of
//! named tensors; gradients are derived by hand and checked against finite
//! differences.
//!
//! Conventions: matrices are row-major `out × in` and act on column vectors.
//! Relations are augmented to `2 n_r + 1` rows (originals, inverses,
//! self-loop). For HAKE the first `3 d_k` components of an encoder relation
//! vector are read as `r^p ‖ r^m ‖ r^b`, for PairRE the first `2 d_k` as
//! `r^H ‖ r^T`; entity elements are `W^e h_e`.
//!
//! Checkpoint: a header line
//! `htem kind dim kge_dim n_entities n_relations n_bases n_layers hidden lambda slope dropout entity_attn relation_attn composition`
//! (`hidden` comma-separated, `-` when empty), then one section per tensor:
//! a line `# name rows cols` followed by `rows` lines of `cols` decimal floats.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::kge::{relation_attention_one, relation_attention_one_backward, score_rows, score_rows_backward, KgeKind};
use crate::optim::{AdamConfig, Optimizer, OptimizerKind, PlateauDecay};
use crate::partition::{PartitionResult, Subgraph};
use crate::scalar::{log_sigmoid, sigmoid, Scalar};
use crate::seed;

#[derive(Debug, Error)]
pub enum HtemError {
    #[error("kge slice of width {need} does not fit encoder width {dim}")]
    SliceTooWide { need: usize, dim: usize },
    #[error("training diverged at pass {pass}: loss is {loss}")]
    Diverged { pass: usize, loss: f64 },
    #[error("no subgraph yields a training episode")]
    NoEpisodes,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// φ(h, r) = h − r
    Sub,
    /// φ(h, r) = h ∘ r
    Mult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HtemConfig {
    pub kind: KgeKind,
    pub dim: usize,
    pub kge_dim: usize,
    pub n_bases: usize,
    pub n_layers: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub lambda: f64,
    pub kge_weight: f64,
    pub composition: Composition,
    pub entity_attention: bool,
    pub relation_attention: bool,
    pub query_fraction: f64,
    pub negative_ratio: usize,
    pub lr: f64,
    pub passes: usize,
    pub eval_every: usize,
    pub decay_factor: f64,
    pub decay_patience: usize,
    pub seed: u64,
}

impl Default for HtemConfig {
    fn default() -> Self {
        Self {
            kind: KgeKind::Hake,
            dim: 48,
            kge_dim: 16,
            n_bases: 4,
            n_layers: 1,
            hidden: vec![32],
            dropout: 0.1,
            leaky_slope: 0.01,
            lambda: 0.5,
            kge_weight: 1.0,
            composition: Composition::Sub,
            entity_attention: true,
            relation_attention: true,
            query_fraction: 0.2,
            negative_ratio: 1,
            lr: 3e-5,
            passes: 100,
            eval_every: 10,
            decay_factor: 0.8,
            decay_patience: 5,
            seed: 0,
        }
    }
}

/// Named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tensors: Vec<Tensor>,
    pub entity: usize,
    pub bases: usize,
    pub mix: usize,
    /// Per layer: out, in, self, rel.
    pub layers: Vec<[usize; 4]>,
    pub w_q: usize,
    pub w_k: usize,
    pub w_e: usize,
    /// Per MLP layer: weight, bias.
    pub mlp: Vec<(usize, usize)>,
    pub total: usize,
}

impl Layout {
    fn build(dims: &Dims) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, rows: usize, cols: usize| {
            tensors.push(Tensor { name, offset, rows, cols });
            offset += rows * cols;
            tensors.len() - 1
        };
        let d = dims.d;
        let entity = add("entity".into(), dims.n_entities, d);
        let bases = add("bases".into(), dims.n_bases, d);
        let mix = add("mix".into(), dims.n_aug(), dims.n_bases);
        let layers = (0..dims.n_layers)
            .map(|l| {
                [
                    add(format!("w_out.{l}"), d, d),
                    add(format!("w_in.{l}"), d, d),
                    add(format!("w_self.{l}"), d, d),
                    add(format!("w_rel.{l}"), d, d),
                ]
            })
            .collect();
        let w_q = add("w_q".into(), d, d);
        let w_k = add("w_k".into(), d, d);
        let w_e = add("w_e".into(), dims.ew(), d);
        let mut widths = vec![dims.input_width()];
        widths.extend_from_slice(&dims.hidden);
        widths.push(1);
        let mlp = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| (add(format!("mlp.{i}.w"), w[1], w[0]), add(format!("mlp.{i}.b"), w[1], 1)))
            .collect();
        Self { tensors, entity, bases, mix, layers, w_q, w_k, w_e, mlp, total: offset }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Shape-determining hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Dims {
    pub kind: KgeKind,
    pub d: usize,
    pub dk: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_bases: usize,
    pub n_layers: usize,
    pub hidden: Vec<usize>,
    pub entity_attention: bool,
    pub relation_attention: bool,
}

impl Dims {
    pub fn n_aug(&self) -> usize {
        2 * self.n_relations + 1
    }

    pub fn ew(&self) -> usize {
        self.kind.entity_width(self.dk)
    }

    pub fn rw(&self) -> usize {
        self.kind.relation_width(self.dk)
    }

    /// Width of h_h ‖ h_t ‖ a_ht ‖ s_ht after ablations.
    pub fn input_width(&self) -> usize {
        2 * self.d + usize::from(self.entity_attention) + if self.relation_attention { self.n_relations } else { 0 }
    }

    /// Source index in an encoder relation vector of KGE relation row entry `j`.
    fn rel_source(&self, j: usize) -> usize {
        match self.kind {
            KgeKind::Hake if j < self.dk => self.dk + j,
            KgeKind::Hake if j < 2 * self.dk => j - self.dk,
            _ => j,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HtemModel<T> {
    pub dims: Dims,
    pub layout: Layout,
    pub theta: Vec<T>,
    pub lambda: T,
    pub leaky_slope: T,
    pub dropout: f64,
    pub composition: Composition,
}

/// A subgraph sample with local entity indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Global id of each local entity.
    pub entities: Vec<EntityId>,
    /// (head, relation, tail), local entity ids.
    pub support: Vec<(usize, RelationId, usize)>,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

struct Encoded<T> {
    /// H^0..H^n, each m × d.
    h: Vec<Vec<T>>,
    /// R^0..R^n, each n_aug × d.
    r: Vec<Vec<T>>,
    /// Per layer: per-direction neighbor sums S_O, S_I, S_S (m × d each).
    sums: Vec<[Vec<T>; 3]>,
    deg: Vec<T>,
    /// (entity, relation, neighbor, direction) edges.
    edges: Vec<(usize, usize, usize, usize)>,
}

struct Decoded<T> {
    q: Vec<T>,
    k: Vec<T>,
    /// Row-wise softmax of the attention logits, m × m.
    attn: Vec<T>,
    p: Vec<T>,
    /// KGE relation rows for original relations, n_r × rw.
    rr: Vec<T>,
}

struct PairCache<T> {
    h: usize,
    t: usize,
    xs: Vec<Vec<T>>,
    zs: Vec<Vec<T>>,
    masks: Vec<Vec<T>>,
    y: T,
}

fn matvec<T: Scalar>(w: &[T], rows: usize, cols: usize, x: &[T], out: &mut [T]) {
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        out[i] = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
    }
}

/// out += Wᵀ g
fn matvec_t_acc<T: Scalar>(w: &[T], rows: usize, cols: usize, g: &[T], out: &mut [T]) {
    for i in 0..rows {
        if g[i] == T::zero() {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for j in 0..cols {
            out[j] += row[j] * g[i];
        }
    }
}

/// dW += g xᵀ
fn outer_acc<T: Scalar>(dw: &mut [T], rows: usize, cols: usize, g: &[T], x: &[T]) {
    for i in 0..rows {
        if g[i] == T::zero() {
            continue;
        }
        let row = &mut dw[i * cols..(i + 1) * cols];
        for j in 0..cols {
            row[j] += g[i] * x[j];
        }
    }
}

impl<T: Scalar> HtemModel<T> {
    pub fn new(cfg: &HtemConfig, n_entities: usize, n_relations: usize, rng: &mut seed::Rng) -> Result<Self, HtemError> {
        let dims = Dims {
            kind: cfg.kind,
            d: cfg.dim,
            dk: cfg.kge_dim,
            n_entities,
            n_relations,
            n_bases: cfg.n_bases,
            n_layers: cfg.n_layers,
            hidden: cfg.hidden.clone(),
            entity_attention: cfg.entity_attention,
            relation_attention: cfg.relation_attention,
        };
        if dims.rw() > dims.d || dims.ew() == 0 {
            return Err(HtemError::SliceTooWide { need: dims.rw(), dim: dims.d });
        }
        let layout = Layout::build(&dims);
        let mut theta = vec![T::zero(); layout.total];
        for t in &layout.tensors {
            if t.name.ends_with(".b") {
                continue;
            }
            let bound = (6.0 / (t.rows + t.cols) as f64).sqrt();
            for x in &mut theta[t.range()] {
                *x = T::of(rng.gen_range(-bound..bound));
            }
        }
        Ok(Self {
            dims,
            layout,
            theta,
            lambda: T::of(cfg.lambda),
            leaky_slope: T::of(cfg.leaky_slope),
            dropout: cfg.dropout,
            composition: cfg.composition,
        })
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn tensor(&self, idx: usize) -> &[T] {
        &self.theta[self.layout.tensors[idx].range()]
    }

    fn compose(&self, h: T, r: T) -> T {
        match self.composition {
            Composition::Sub => h - r,
            Composition::Mult => h * r,
        }
    }

    fn encode(&self, ep: &Episode) -> Encoded<T> {
        let (d, m, n_aug, n_r) = (self.dims.d, ep.entities.len(), self.dims.n_aug(), self.dims.n_relations);
        let ent = self.tensor(self.layout.entity);
        let mut h0 = vec![T::zero(); m * d];
        for (i, &g) in ep.entities.iter().enumerate() {
            h0[i * d..(i + 1) * d].copy_from_slice(&ent[g * d..(g + 1) * d]);
        }
        let (bases, mix, nb) = (self.tensor(self.layout.bases), self.tensor(self.layout.mix), self.dims.n_bases);
        let mut r0 = vec![T::zero(); n_aug * d];
        for rho in 0..n_aug {
            for b in 0..nb {
                let a = mix[rho * nb + b];
                for j in 0..d {
                    r0[rho * d + j] += a * bases[b * d + j];
                }
            }
        }
        let mut edges = Vec::with_capacity(2 * ep.support.len() + m);
        for &(h, r, t) in &ep.support {
            edges.push((h, r, t, 0));
            edges.push((t, n_r + r, h, 1));
        }
        for e in 0..m {
            edges.push((e, 2 * n_r, e, 2));
        }
        let mut deg = vec![T::zero(); m];
        for &(e, ..) in &edges {
            deg[e] += T::one();
        }

        let mut hs = vec![h0];
        let mut rs = vec![r0];
        let mut all_sums = Vec::with_capacity(self.dims.n_layers);
        for l in 0..self.dims.n_layers {
            let (hp, rp) = (&hs[l], &rs[l]);
            let mut sums = [vec![T::zero(); m * d], vec![T::zero(); m * d], vec![T::zero(); m * d]];
            for &(e, rho, nb_, dir) in &edges {
                for j in 0..d {
                    sums[dir][e * d + j] += self.compose(hp[nb_ * d + j], rp[rho * d + j]);
                }
            }
            let mut hn = vec![T::zero(); m * d];
            let mut tmp = vec![T::zero(); d];
            for e in 0..m {
                let out = &mut hn[e * d..(e + 1) * d];
                for dir in 0..3 {
                    let w = self.tensor(self.layout.layers[l][dir]);
                    matvec(w, d, d, &sums[dir][e * d..(e + 1) * d], &mut tmp);
                    for j in 0..d {
                        out[j] += tmp[j];
                    }
                }
                for x in out.iter_mut() {
                    *x = (*x / deg[e]).tanh();
                }
            }
            let w_rel = self.tensor(self.layout.layers[l][3]);
            let mut rn = vec![T::zero(); n_aug * d];
            for rho in 0..n_aug {
                matvec(w_rel, d, d, &rp[rho * d..(rho + 1) * d], &mut rn[rho * d..(rho + 1) * d]);
            }
            hs.push(hn);
            rs.push(rn);
            all_sums.push(sums);
        }
        Encoded { h: hs, r: rs, sums: all_sums, deg, edges }
    }

    /// Final-layer entity and relation representations (m × d, n_aug × d).
    pub fn encode_reps(&self, ep: &Episode) -> (Vec<T>, Vec<T>) {
        let mut enc = self.encode(ep);
        (enc.h.pop().expect("layer 0"), enc.r.pop().expect("layer 0"))
    }

    fn decode_prep(&self, enc: &Encoded<T>) -> Decoded<T> {
        let d = self.dims.d;
        let hn = enc.h.last().expect("layer 0");
        let rn = enc.r.last().expect("layer 0");
        let m = hn.len() / d;
        let (ew, rw, n_r) = (self.dims.ew(), self.dims.rw(), self.dims.n_relations);
        let (wq, wk, we) = (self.tensor(self.layout.w_q), self.tensor(self.layout.w_k), self.tensor(self.layout.w_e));
        let mut q = vec![T::zero(); m * d];
        let mut k = vec![T::zero(); m * d];
        let mut p = vec![T::zero(); m * ew];
        for e in 0..m {
            let x = &hn[e * d..(e + 1) * d];
            matvec(wq, d, d, x, &mut q[e * d..(e + 1) * d]);
            matvec(wk, d, d, x, &mut k[e * d..(e + 1) * d]);
            matvec(we, ew, d, x, &mut p[e * ew..(e + 1) * ew]);
        }
        let attn = if self.dims.entity_attention { attention_matrix(&q, &k, m, d) } else { Vec::new() };
        let mut rr = vec![T::zero(); n_r * rw];
        for r in 0..n_r {
            for j in 0..rw {
                rr[r * rw + j] = rn[r * d + self.dims.rel_source(j)];
            }
        }
        Decoded { q, k, attn, p, rr }
    }

    fn relation_vector(&self, dec: &Decoded<T>, h: usize, t: usize) -> Vec<T> {
        let (ew, rw) = (self.dims.ew(), self.dims.rw());
        let (ph, pt) = (&dec.p[h * ew..(h + 1) * ew], &dec.p[t * ew..(t + 1) * ew]);
        (0..self.dims.n_relations).map(|r| relation_attention_one(self.dims.kind, ph, pt, &dec.rr[r * rw..(r + 1) * rw])).collect()
    }

    fn pair_forward(&self, enc: &Encoded<T>, dec: &Decoded<T>, h: usize, t: usize, rng: Option<&mut seed::Rng>) -> PairCache<T> {
        let d = self.dims.d;
        let hn = enc.h.last().expect("layer 0");
        let m = hn.len() / d;
        let mut x0 = Vec::with_capacity(self.dims.input_width());
        x0.extend_from_slice(&hn[h * d..(h + 1) * d]);
        x0.extend_from_slice(&hn[t * d..(t + 1) * d]);
        if self.dims.entity_attention {
            x0.push(dec.attn[h * m + t]);
        }
        let s = if self.dims.relation_attention { self.relation_vector(dec, h, t) } else { Vec::new() };
        x0.extend_from_slice(&s);
        self.mlp_forward(x0, h, t, rng)
    }

    fn mlp_forward(&self, x0: Vec<T>, h: usize, t: usize, mut rng: Option<&mut seed::Rng>) -> PairCache<T> {
        let n_layers = self.layout.mlp.len();
        let mut xs = vec![x0];
        let mut zs = Vec::with_capacity(n_layers);
        let mut masks = Vec::new();
        let keep = 1.0 - self.dropout;
        for (li, &(wi, bi)) in self.layout.mlp.iter().enumerate() {
            let tw = &self.layout.tensors[wi];
            let b = self.tensor(bi);
            let mut z = vec![T::zero(); tw.rows];
            matvec(self.tensor(wi), tw.rows, tw.cols, xs.last().expect("input"), &mut z);
            for (zi, &bb) in z.iter_mut().zip(b) {
                *zi += bb;
            }
            if li + 1 == n_layers {
                zs.push(z);
                break;
            }
            let mut x: Vec<T> = z.iter().map(|&v| if v > T::zero() { v } else { self.leaky_slope * v }).collect();
            if let Some(r) = rng.as_deref_mut() {
                if self.dropout > 0.0 {
                    let mask: Vec<T> = (0..x.len())
                        .map(|_| if r.gen::<f64>() < keep { T::of(1.0 / keep) } else { T::zero() })
                        .collect();
                    for (xi, &mi) in x.iter_mut().zip(&mask) {
                        *xi *= mi;
                    }
                    masks.push(mask);
                }
            }
            zs.push(z);
            xs.push(x);
        }
        let y = sigmoid(zs.last().expect("output")[0]);
        PairCache { h, t, xs, zs, masks, y }
    }

    /// Backward through the MLP and the pair inputs; accumulates into the
    /// decoder-level gradient buffers.
    fn pair_backward(&self, enc: &Encoded<T>, dec: &Decoded<T>, c: &PairCache<T>, dy: T, grad: &mut [T], acc: &mut DecoderGrads<T>) {
        let d = self.dims.d;
        let m = enc.h.last().expect("layer 0").len() / d;
        let n_layers = self.layout.mlp.len();
        let mut g = vec![dy * c.y * (T::one() - c.y)];
        for li in (0..n_layers).rev() {
            let (wi, bi) = self.layout.mlp[li];
            let tw = self.layout.tensors[wi].clone();
            let tb = self.layout.tensors[bi].clone();
            if li + 1 != n_layers {
                // through dropout and leaky activation of layer li
                if !c.masks.is_empty() {
                    for (gi, &mi) in g.iter_mut().zip(&c.masks[li]) {
                        *gi *= mi;
                    }
                }
                for (gi, &zi) in g.iter_mut().zip(&c.zs[li]) {
                    if zi <= T::zero() {
                        *gi *= self.leaky_slope;
                    }
                }
            }
            outer_acc(&mut grad[tw.range()], tw.rows, tw.cols, &g, &c.xs[li]);
            for (gb, &gi) in grad[tb.range()].iter_mut().zip(&g) {
                *gb += gi;
            }
            let mut gx = vec![T::zero(); tw.cols];
            matvec_t_acc(self.tensor(wi), tw.rows, tw.cols, &g, &mut gx);
            g = gx;
        }
        // g is now ∂/∂X^0
        let (h, t) = (c.h, c.t);
        for j in 0..d {
            acc.dh[h * d + j] += g[j];
            acc.dh[t * d + j] += g[d + j];
        }
        let mut off = 2 * d;
        if self.dims.entity_attention {
            let da = g[off];
            off += 1;
            let a_t = dec.attn[h * m + t];
            let scale = T::one() / T::of(d as f64).sqrt();
            for e in 0..m {
                let a_e = dec.attn[h * m + e];
                let delta = if e == t { T::one() } else { T::zero() };
                let dl = da * a_t * (delta - a_e) * scale;
                if dl == T::zero() {
                    continue;
                }
                for j in 0..d {
                    acc.dq[h * d + j] += dl * dec.k[e * d + j];
                    acc.dk[e * d + j] += dl * dec.q[h * d + j];
                }
            }
        }
        if self.dims.relation_attention {
            let (ew, rw) = (self.dims.ew(), self.dims.rw());
            let (ph, pt) = (&dec.p[h * ew..(h + 1) * ew], &dec.p[t * ew..(t + 1) * ew]);
            let mut gph = vec![T::zero(); ew];
            let mut gpt = vec![T::zero(); ew];
            for r in 0..self.dims.n_relations {
                let gs = g[off + r];
                if gs == T::zero() {
                    continue;
                }
                let (lo, hi) = (r * rw, (r + 1) * rw);
                relation_attention_one_backward(
                    self.dims.kind,
                    ph,
                    pt,
                    &dec.rr[lo..hi],
                    gs,
                    &mut gph,
                    &mut gpt,
                    &mut acc.drr[lo..hi],
                );
            }
            for j in 0..ew {
                acc.dp[h * ew + j] += gph[j];
                acc.dp[t * ew + j] += gpt[j];
            }
        }
    }

    /// Episode loss: mean(1 − y) over positives + mean(y) over negatives +
    /// kge_weight · mean(−log σ(f)) over support triples. Adds gradients into
    /// `grad` when given. `rng` enables dropout.
    pub fn episode_loss(&self, ep: &Episode, kge_weight: T, mut grad: Option<&mut [T]>, mut rng: Option<&mut seed::Rng>) -> EpisodeLoss<T> {
        let enc = self.encode(ep);
        let dec = self.decode_prep(&enc);
        let (d, m) = (self.dims.d, ep.entities.len());
        let mut acc = DecoderGrads::new(m, d, self.dims.ew(), self.dims.n_relations * self.dims.rw());
        let mut out = EpisodeLoss::default();

        for (pairs, positive) in [(&ep.positives, true), (&ep.negatives, false)] {
            if pairs.is_empty() {
                continue;
            }
            let w = T::one() / T::of(pairs.len() as f64);
            for &(h, t) in pairs {
                let c = self.pair_forward(&enc, &dec, h, t, rng.as_deref_mut());
                let (loss, dy) = if positive { (w * (T::one() - c.y), -w) } else { (w * c.y, w) };
                if positive {
                    out.positive += loss;
                } else {
                    out.negative += loss;
                }
                if let Some(g) = grad.as_deref_mut() {
                    self.pair_backward(&enc, &dec, &c, dy, g, &mut acc);
                }
            }
        }

        if kge_weight != T::zero() && !ep.support.is_empty() {
            let (ew, rw) = (self.dims.ew(), self.dims.rw());
            let w = kge_weight / T::of(ep.support.len() as f64);
            for &(h, r, t) in &ep.support {
                let (ph, pt) = (&dec.p[h * ew..(h + 1) * ew], &dec.p[t * ew..(t + 1) * ew]);
                let rr = &dec.rr[r * rw..(r + 1) * rw];
                let f = score_rows(self.dims.kind, ph, rr, pt, self.lambda);
                out.kge -= w * log_sigmoid(f);
                if grad.is_some() {
                    let gf = -w * sigmoid(-f);
                    let mut gph = vec![T::zero(); ew];
                    let mut gpt = vec![T::zero(); ew];
                    score_rows_backward(self.dims.kind, ph, rr, pt, self.lambda, gf, &mut gph, &mut acc.drr[r * rw..(r + 1) * rw], &mut gpt);
                    for j in 0..ew {
                        acc.dp[h * ew + j] += gph[j];
                        acc.dp[t * ew + j] += gpt[j];
                    }
                }
            }
        }

        if let Some(g) = grad {
            self.backward_decoder_and_encoder(ep, &enc, acc, g);
        }
        out
    }

    fn backward_decoder_and_encoder(&self, ep: &Episode, enc: &Encoded<T>, mut acc: DecoderGrads<T>, grad: &mut [T]) {
        let (d, m, n_aug, n_r) = (self.dims.d, ep.entities.len(), self.dims.n_aug(), self.dims.n_relations);
        let (ew, rw) = (self.dims.ew(), self.dims.rw());
        let hn = enc.h.last().expect("layer 0");
        let tq = self.layout.tensors[self.layout.w_q].clone();
        let tk = self.layout.tensors[self.layout.w_k].clone();
        let te = self.layout.tensors[self.layout.w_e].clone();
        for e in 0..m {
            let x = &hn[e * d..(e + 1) * d];
            let dh = &mut acc.dh[e * d..(e + 1) * d];
            outer_acc(&mut grad[tq.range()], d, d, &acc.dq[e * d..(e + 1) * d], x);
            matvec_t_acc(self.tensor(self.layout.w_q), d, d, &acc.dq[e * d..(e + 1) * d], dh);
            outer_acc(&mut grad[tk.range()], d, d, &acc.dk[e * d..(e + 1) * d], x);
            matvec_t_acc(self.tensor(self.layout.w_k), d, d, &acc.dk[e * d..(e + 1) * d], dh);
            outer_acc(&mut grad[te.range()], ew, d, &acc.dp[e * ew..(e + 1) * ew], x);
            matvec_t_acc(self.tensor(self.layout.w_e), ew, d, &acc.dp[e * ew..(e + 1) * ew], dh);
        }
        let mut dr = vec![T::zero(); n_aug * d];
        for r in 0..n_r {
            for j in 0..rw {
                dr[r * d + self.dims.rel_source(j)] += acc.drr[r * rw + j];
            }
        }
        let mut dh = acc.dh;

        for l in (0..self.dims.n_layers).rev() {
            let (hp, rp, hcur) = (&enc.h[l], &enc.r[l], &enc.h[l + 1]);
            let mut dh_prev = vec![T::zero(); m * d];
            let mut dr_prev = vec![T::zero(); n_aug * d];
            // relation transform
            let trel = self.layout.tensors[self.layout.layers[l][3]].clone();
            for rho in 0..n_aug {
                let g = &dr[rho * d..(rho + 1) * d];
                outer_acc(&mut grad[trel.range()], d, d, g, &rp[rho * d..(rho + 1) * d]);
                matvec_t_acc(self.tensor(self.layout.layers[l][3]), d, d, g, &mut dr_prev[rho * d..(rho + 1) * d]);
            }
            // entity update: H = tanh((Σ_dir W_dir S_dir) / deg)
            let mut dsums = [vec![T::zero(); m * d], vec![T::zero(); m * d], vec![T::zero(); m * d]];
            for e in 0..m {
                let g: Vec<T> = (0..d)
                    .map(|j| {
                        let y = hcur[e * d + j];
                        dh[e * d + j] * (T::one() - y * y) / enc.deg[e]
                    })
                    .collect();
                for dir in 0..3 {
                    let tw = self.layout.tensors[self.layout.layers[l][dir]].clone();
                    outer_acc(&mut grad[tw.range()], d, d, &g, &enc.sums[l][dir][e * d..(e + 1) * d]);
                    matvec_t_acc(self.tensor(self.layout.layers[l][dir]), d, d, &g, &mut dsums[dir][e * d..(e + 1) * d]);
                }
            }
            for &(e, rho, nb, dir) in &enc.edges {
                for j in 0..d {
                    let gs = dsums[dir][e * d + j];
                    match self.composition {
                        Composition::Sub => {
                            dh_prev[nb * d + j] += gs;
                            dr_prev[rho * d + j] -= gs;
                        }
                        Composition::Mult => {
                            dh_prev[nb * d + j] += gs * rp[rho * d + j];
                            dr_prev[rho * d + j] += gs * hp[nb * d + j];
                        }
                    }
                }
            }
            dh = dh_prev;
            dr = dr_prev;
        }

        let tent = self.layout.tensors[self.layout.entity].clone();
        for (i, &g) in ep.entities.iter().enumerate() {
            for j in 0..d {
                grad[tent.offset + g * d + j] += dh[i * d + j];
            }
        }
        let nb = self.dims.n_bases;
        let (tb, tm) = (self.layout.tensors[self.layout.bases].clone(), self.layout.tensors[self.layout.mix].clone());
        let bases = self.tensor(self.layout.bases).to_vec();
        let mix = self.tensor(self.layout.mix).to_vec();
        for rho in 0..n_aug {
            for b in 0..nb {
                let mut dm = T::zero();
                for j in 0..d {
                    dm += dr[rho * d + j] * bases[b * d + j];
                    grad[tb.offset + b * d + j] += mix[rho * nb + b] * dr[rho * d + j];
                }
                grad[tm.offset + rho * nb + b] += dm;
            }
        }
    }

    /// Entity attention a_ht = softmax_e(att(h, e))[t] from raw final-layer
    /// representations of the subgraph.
    pub fn entity_attention(&self, reps: &[T], h: usize, t: usize) -> T {
        let d = self.dims.d;
        let m = reps.len() / d;
        let (wq, wk) = (self.tensor(self.layout.w_q), self.tensor(self.layout.w_k));
        let mut q = vec![T::zero(); d];
        matvec(wq, d, d, &reps[h * d..(h + 1) * d], &mut q);
        let mut k = vec![T::zero(); m * d];
        for e in 0..m {
            matvec(wk, d, d, &reps[e * d..(e + 1) * d], &mut k[e * d..(e + 1) * d]);
        }
        attention_matrix(&q, &k, m, d)[t]
    }

    /// y_ht from explicit decoder inputs, dropout off.
    pub fn pair_score(&self, h_rep: &[T], t_rep: &[T], a_ht: T, s_ht: &[T]) -> T {
        let mut x0 = Vec::with_capacity(self.dims.input_width());
        x0.extend_from_slice(h_rep);
        x0.extend_from_slice(t_rep);
        if self.dims.entity_attention {
            x0.push(a_ht);
        }
        if self.dims.relation_attention {
            x0.extend_from_slice(s_ht);
        }
        self.mlp_forward(x0, 0, 0, None).y
    }

    /// Scores every ordered pair (h, t), h ≠ t, of the subgraph with no
    /// triple h → t, and keeps those with y > θ_ht. Global ids.
    pub fn predict_pairs(&self, sub: &Subgraph, theta_ht: f64) -> Vec<(EntityId, EntityId, T)> {
        let ep = Episode::full(sub);
        let enc = self.encode(&ep);
        let dec = self.decode_prep(&enc);
        let connected: HashSet<(usize, usize)> = ep.support.iter().map(|&(h, _, t)| (h, t)).collect();
        let m = ep.entities.len();
        let theta = T::of(theta_ht);
        let mut out = Vec::new();
        for h in 0..m {
            for t in 0..m {
                if h == t || connected.contains(&(h, t)) {
                    continue;
                }
                let y = self.pair_forward(&enc, &dec, h, t, None).y;
                if y > theta {
                    out.push((ep.entities[h], ep.entities[t], y));
                }
            }
        }
        out
    }

    /// Same as [`Self::predict_pairs`] for every subgraph, in parallel;
    /// results in subgraph order.
    pub fn predict_all(&self, part: &PartitionResult, theta_ht: f64) -> Vec<Vec<(EntityId, EntityId, T)>> {
        part.subgraphs.par_iter().map(|s| self.predict_pairs(s, theta_ht)).collect()
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<(), HtemError> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        let dm = &self.dims;
        let hidden = if dm.hidden.is_empty() {
            "-".to_string()
        } else {
            dm.hidden.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
        };
        let comp = match self.composition {
            Composition::Sub => "sub",
            Composition::Mult => "mult",
        };
        writeln!(
            out,
            "htem {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            dm.kind,
            dm.d,
            dm.dk,
            dm.n_entities,
            dm.n_relations,
            dm.n_bases,
            dm.n_layers,
            hidden,
            self.lambda,
            self.leaky_slope,
            self.dropout,
            u8::from(dm.entity_attention),
            u8::from(dm.relation_attention),
            comp
        )?;
        for t in &self.layout.tensors {
            writeln!(out, "# {} {} {}", t.name, t.rows, t.cols)?;
            for row in self.theta[t.range()].chunks(t.cols.max(1)) {
                let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                writeln!(out, "{}", cells.join(" "))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self, HtemError> {
        let bad = |m: String| HtemError::Checkpoint(m);
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split_whitespace().collect();
        if header.len() != 15 || header[0] != "htem" {
            return Err(bad("malformed header".into()));
        }
        let us = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer {s:?}")));
        let fl = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad float {s:?}")));
        let hidden = if header[8] == "-" { Vec::new() } else { header[8].split(',').map(us).collect::<Result<Vec<_>, _>>()? };
        let cfg = HtemConfig {
            kind: header[1].parse().map_err(|e: crate::kge::KgeError| bad(e.to_string()))?,
            dim: us(header[2])?,
            kge_dim: us(header[3])?,
            n_bases: us(header[6])?,
            n_layers: us(header[7])?,
            hidden,
            lambda: fl(header[9])?,
            leaky_slope: fl(header[10])?,
            dropout: fl(header[11])?,
            entity_attention: header[12] == "1",
            relation_attention: header[13] == "1",
            composition: match header[14] {
                "sub" => Composition::Sub,
                "mult" => Composition::Mult,
                other => return Err(bad(format!("unknown composition {other:?}"))),
            },
            ..HtemConfig::default()
        };
        let mut model = Self::new(&cfg, us(header[4])?, us(header[5])?, &mut seed::rng(0))?;
        model.lambda = T::of(cfg.lambda);
        model.leaky_slope = T::of(cfg.leaky_slope);
        for t in model.layout.tensors.clone() {
            let sec: Vec<&str> = lines.next().ok_or_else(|| bad("truncated".into()))?.split_whitespace().collect();
            if sec.len() != 4 || sec[0] != "#" || sec[1] != t.name || us(sec[2])? != t.rows || us(sec[3])? != t.cols {
                return Err(bad(format!("expected section {} {}x{}", t.name, t.rows, t.cols)));
            }
            let dst = &mut model.theta[t.range()];
            for row in dst.chunks_mut(t.cols.max(1)) {
                let cells: Vec<&str> = lines.next().ok_or_else(|| bad("truncated".into()))?.split_whitespace().collect();
                if cells.len() != row.len() {
                    return Err(bad(format!("row of {} values in {}", cells.len(), t.name)));
                }
                for (x, c) in row.iter_mut().zip(cells) {
                    *x = c.parse::<T>().map_err(|_| bad(format!("bad float {c:?}")))?;
                }
            }
        }
        Ok(model)
    }
}

fn attention_logits<T: Scalar>(q: &[T], k: &[T], m: usize, d: usize) -> Vec<T> {
    let scale = T::one() / T::of(d as f64).sqrt();
    (0..m).map(|e| q.iter().zip(&k[e * d..(e + 1) * d]).map(|(&a, &b)| a * b).sum::<T>() * scale).collect()
}

/// Row-wise softmax of Q Kᵀ / √d over `m` keys, one row per query.
fn attention_matrix<T: Scalar>(q: &[T], k: &[T], m: usize, d: usize) -> Vec<T> {
    let rows = q.len() / d;
    let mut out = Vec::with_capacity(rows * m);
    for h in 0..rows {
        let logits = attention_logits(&q[h * d..(h + 1) * d], k, m, d);
        let mx = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let ex: Vec<T> = logits.iter().map(|&l| (l - mx).exp()).collect();
        let z: T = ex.iter().copied().sum();
        out.extend(ex.into_iter().map(|e| e / z));
    }
    out
}

struct DecoderGrads<T> {
    dh: Vec<T>,
    dq: Vec<T>,
    dk: Vec<T>,
    dp: Vec<T>,
    drr: Vec<T>,
}

impl<T: Scalar> DecoderGrads<T> {
    fn new(m: usize, d: usize, ew: usize, rr_len: usize) -> Self {
        Self {
            dh: vec![T::zero(); m * d],
            dq: vec![T::zero(); m * d],
            dk: vec![T::zero(); m * d],
            dp: vec![T::zero(); m * ew],
            drr: vec![T::zero(); rr_len],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeLoss<T> {
    pub positive: T,
    pub negative: T,
    pub kge: T,
}

impl<T: Scalar> EpisodeLoss<T> {
    pub fn total(&self) -> T {
        self.positive + self.negative + self.kge
    }

    pub fn pair_part(&self) -> T {
        self.positive + self.negative
    }
}

impl Episode {
    /// Every triple of the subgraph as support; no pairs.
    pub fn full(sub: &Subgraph) -> Self {
        let local: HashMap<EntityId, usize> = sub.entities.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        Self {
            entities: sub.entities.clone(),
            support: sub.triples.iter().map(|t| (local[&t.head], t.relation, local[&t.tail])).collect(),
            positives: Vec::new(),
            negatives: Vec::new(),
        }
    }

    /// Random support/query split; positives are the distinct query pairs,
    /// negatives are sampled unconnected ordered pairs.
    pub fn sample(sub: &Subgraph, query_fraction: f64, negative_ratio: usize, rng: &mut seed::Rng) -> Option<Self> {
        let mut ep = Self::full(sub);
        if ep.support.len() < 2 {
            return None;
        }
        ep.support.shuffle(rng);
        let n_query = ((ep.support.len() as f64 * query_fraction).round() as usize).clamp(1, ep.support.len() - 1);
        let query = ep.support.split_off(ep.support.len() - n_query);
        let mut seen = HashSet::new();
        ep.positives = query.iter().map(|&(h, _, t)| (h, t)).filter(|&(h, t)| h != t && seen.insert((h, t))).collect();
        if ep.positives.is_empty() {
            return None;
        }
        let connected: HashSet<(usize, usize)> = Self::full(sub).support.iter().map(|&(h, _, t)| (h, t)).collect();
        ep.negatives = sample_unconnected(ep.entities.len(), &connected, negative_ratio * ep.positives.len(), rng);
        Some(ep)
    }
}

/// Up to `n` distinct ordered pairs (h ≠ t) absent from `connected`.
pub fn sample_unconnected(m: usize, connected: &HashSet<(usize, usize)>, n: usize, rng: &mut seed::Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n);
    if m < 2 {
        return out;
    }
    let mut seen = HashSet::new();
    let mut tries = 0;
    while out.len() < n && tries < 50 * n.max(1) {
        tries += 1;
        let h = rng.gen_range(0..m);
        let t = rng.gen_range(0..m);
        if h != t && !connected.contains(&(h, t)) && seen.insert((h, t)) {
            out.push((h, t));
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HtemReport {
    pub pass_losses: Vec<f64>,
    /// (pass, validation pair loss).
    pub validations: Vec<(usize, f64)>,
    pub best_pass: usize,
    pub skipped_episodes: usize,
}

/// Validation episodes: all subgraph triples as support, valid pairs inside
/// the subgraph as positives, fixed sampled negatives.
pub fn validation_episodes(part: &PartitionResult, valid: &[Triple], seed_: u64) -> Vec<Episode> {
    let mut rng = seed::module_rng(seed_, "htem-valid");
    let mut out = Vec::new();
    for sub in &part.subgraphs {
        let mut ep = Episode::full(sub);
        let local: HashMap<EntityId, usize> = sub.entities.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let connected: HashSet<(usize, usize)> = ep.support.iter().map(|&(h, _, t)| (h, t)).collect();
        let mut seen = HashSet::new();
        for t in valid {
            if let (Some(&h), Some(&tl)) = (local.get(&t.head), local.get(&t.tail)) {
                if h != tl && !connected.contains(&(h, tl)) && seen.insert((h, tl)) {
                    ep.positives.push((h, tl));
                }
            }
        }
        if ep.positives.is_empty() {
            continue;
        }
        let mut blocked = connected.clone();
        blocked.extend(ep.positives.iter().copied());
        ep.negatives = sample_unconnected(ep.entities.len(), &blocked, ep.positives.len(), &mut rng);
        out.push(ep);
    }
    out
}

/// Episodic training over the partition's subgraphs with per-episode Adam
/// updates. Keeps the parameters with the lowest validation pair loss.
pub fn train_htem<T: Scalar>(kg: &KnowledgeGraph, part: &PartitionResult, valid: &[Triple], cfg: &HtemConfig) -> Result<(HtemModel<T>, HtemReport), HtemError> {
    let mut rng = seed::module_rng(cfg.seed, "htem");
    let mut model = HtemModel::<T>::new(cfg, kg.n_entities(), kg.n_relations(), &mut rng)?;
    let mut opt = Optimizer::<T>::new(OptimizerKind::Adam, AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, model.n_params());
    let mut decay = PlateauDecay::new(cfg.decay_factor, cfg.decay_patience);
    let valid_eps = validation_episodes(part, valid, cfg.seed);
    let kge_w = T::of(cfg.kge_weight);
    let ent = model.layout.tensors[model.layout.entity].clone();
    let dense: Vec<usize> = (ent.offset + ent.len()..model.n_params()).chain(0..ent.offset).collect();
    let d = model.dims.d;

    let mut report = HtemReport::default();
    let mut best: Option<(f64, Vec<T>)> = None;
    let mut order: Vec<usize> = (0..part.subgraphs.len()).collect();
    let mut grad = vec![T::zero(); model.n_params()];
    let mut any = false;

    for pass in 1..=cfg.passes {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &si in &order {
            let sub = &part.subgraphs[si];
            let Some(ep) = Episode::sample(sub, cfg.query_fraction, cfg.negative_ratio, &mut rng) else {
                report.skipped_episodes += 1;
                continue;
            };
            any = true;
            grad.iter_mut().for_each(|g| *g = T::zero());
            let loss = model.episode_loss(&ep, kge_w, Some(&mut grad), Some(&mut rng)).total().as_f64();
            if !loss.is_finite() {
                return Err(HtemError::Diverged { pass, loss });
            }
            total += loss;
            count += 1;
            let mut idx = dense.clone();
            for &g in &ep.entities {
                idx.extend(ent.offset + g * d..ent.offset + (g + 1) * d);
            }
            opt.step_sparse(&mut model.theta, &grad, &idx);
        }
        if !any {
            return Err(HtemError::NoEpisodes);
        }
        let avg = if count == 0 { 0.0 } else { total / count as f64 };
        report.pass_losses.push(avg);
        decay.observe(-avg, &mut opt);
        log::debug!("htem pass {pass}: loss {avg:.6}");

        if pass % cfg.eval_every.max(1) == 0 || pass == cfg.passes {
            let metric = if valid_eps.is_empty() {
                avg
            } else {
                valid_eps.iter().map(|e| model.episode_loss(e, T::zero(), None, None).pair_part().as_f64()).sum::<f64>() / valid_eps.len() as f64
            };
            report.validations.push((pass, metric));
            log::info!("htem pass {pass}: validation pair loss {metric:.4}");
            if best.as_ref().map_or(true, |(b, _)| metric < *b) {
                best = Some((metric, model.theta.clone()));
                report.best_pass = pass;
            }
        }
    }
    if report.skipped_episodes > 0 {
        log::warn!("htem: skipped {} episodes with an empty query set", report.skipped_episodes);
    }
    if let Some((_, theta)) = best {
        model.theta = theta;
    }
    Ok((model, report))
}
