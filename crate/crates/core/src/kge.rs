//! HAKE and PairRE embeddings: score functions with closed-form gradients,
//! relation inference, relation attention, negative sampling and
//! self-adversarial training.
//!
//! Row layouts (width `d`):
//!
//! | kind   | entity row      | relation row          |
//! |--------|-----------------|-----------------------|
//! | HAKE   | `m (d) ‖ p (d)` | `m (d) ‖ p (d) ‖ b (d)` |
//! | PairRE | `e (d)`         | `H (d) ‖ T (d)`       |
//!
//! HAKE modulus entries are stored raw and read through `|·|`, so the
//! effective modulus is never negative.
//!
//! Checkpoints are plain text. The first line is
//! `kind dim n_entities n_relations lambda alpha` with `kind` one of `hake`,
//! `pairre`, `pairre_l2`. Then follow `n_entities` entity rows and
//! `n_relations` relation rows, each a single line of space-separated
//! decimal floats in the layout above (raw stored values, shortest
//! round-trip formatting).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::optim::{AdamConfig, Optimizer, OptimizerKind, PlateauDecay};
use crate::scalar::{log_sigmoid, sigmoid, sign, Scalar};
use crate::seed;

/// Floor on modulus divisors in relation inference.
pub const MODULUS_EPS: f64 = 1e-6;
/// Upper clamp on the HAKE bias inside r^mm.
pub const BIAS_CLAMP: f64 = 1.0 - 1e-6;

#[derive(Debug, Error)]
pub enum KgeError {
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown model kind {0:?} (expected hake, pairre or pairre_l2)")]
    UnknownKind(String),
    #[error("training set is empty")]
    EmptyTraining,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KgeKind {
    Hake,
    /// PairRE with the L1 distance.
    PairRe,
    PairReL2,
}

impl KgeKind {
    pub fn entity_width(self, d: usize) -> usize {
        match self {
            KgeKind::Hake => 2 * d,
            KgeKind::PairRe | KgeKind::PairReL2 => d,
        }
    }

    pub fn relation_width(self, d: usize) -> usize {
        match self {
            KgeKind::Hake => 3 * d,
            KgeKind::PairRe | KgeKind::PairReL2 => 2 * d,
        }
    }

    pub fn is_pairre(self) -> bool {
        matches!(self, KgeKind::PairRe | KgeKind::PairReL2)
    }
}

impl fmt::Display for KgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KgeKind::Hake => "hake",
            KgeKind::PairRe => "pairre",
            KgeKind::PairReL2 => "pairre_l2",
        })
    }
}

impl FromStr for KgeKind {
    type Err = KgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hake" => Ok(KgeKind::Hake),
            "pairre" => Ok(KgeKind::PairRe),
            "pairre_l2" => Ok(KgeKind::PairReL2),
            _ => Err(KgeError::UnknownKind(s.to_string())),
        }
    }
}

// ---------------------------------------------------------------------------
// slice-level scores and gradients, shared with the head-tail model

/// HAKE score on raw rows:
/// −‖|h^m|∘(|r^m| + r^b) − |t^m|∘(1 − r^b)‖₂ − λ‖sin((h^p + r^p − t^p)/2)‖₁.
/// With r^b = 0 the modulus term is ‖h^m∘r^m − t^m‖₂.
pub fn hake_score<T: Scalar>(h: &[T], r: &[T], t: &[T], lambda: T) -> T {
    let d = h.len() / 2;
    let (hm, hp) = h.split_at(d);
    let (tm, tp) = t.split_at(d);
    let (rm, rest) = r.split_at(d);
    let (rp, rb) = rest.split_at(d);
    let two = T::of(2.0);
    let mut sq = T::zero();
    let mut ph = T::zero();
    for k in 0..d {
        let v = hm[k].abs() * (rm[k].abs() + rb[k]) - tm[k].abs() * (T::one() - rb[k]);
        sq += v * v;
        ph += ((hp[k] + rp[k] - tp[k]) / two).sin().abs();
    }
    -sq.sqrt() - lambda * ph
}

/// Adds `g · ∂hake_score/∂θ` into the three gradient rows.
#[allow(clippy::too_many_arguments)]
pub fn hake_score_backward<T: Scalar>(
    h: &[T],
    r: &[T],
    t: &[T],
    lambda: T,
    g: T,
    gh: &mut [T],
    gr: &mut [T],
    gt: &mut [T],
) {
    let d = h.len() / 2;
    let two = T::of(2.0);
    let mut v = vec![T::zero(); d];
    let mut norm = T::zero();
    for k in 0..d {
        v[k] = h[k].abs() * (r[k].abs() + r[2 * d + k]) - t[k].abs() * (T::one() - r[2 * d + k]);
        norm += v[k] * v[k];
    }
    let norm = norm.sqrt();
    for k in 0..d {
        let (hm, tm, rm, rb) = (h[k], t[k], r[k], r[2 * d + k]);
        // ∂(−‖v‖)/∂v_k
        let dv = if norm > T::zero() { -v[k] / norm } else { T::zero() };
        gh[k] += g * dv * sign(hm) * (rm.abs() + rb);
        gr[k] += g * dv * hm.abs() * sign(rm);
        gr[2 * d + k] += g * dv * (hm.abs() + tm.abs());
        gt[k] -= g * dv * sign(tm) * (T::one() - rb);

        let u = (h[d + k] + r[d + k] - t[d + k]) / two;
        let du = -lambda * sign(u.sin()) * u.cos() / two;
        gh[d + k] += g * du;
        gr[d + k] += g * du;
        gt[d + k] -= g * du;
    }
}

/// PairRE score −‖h∘r^H − t∘r^T‖ (L1, or L2 when `l2`).
pub fn pairre_score<T: Scalar>(h: &[T], r: &[T], t: &[T], l2: bool) -> T {
    let d = h.len();
    let (rh, rt) = r.split_at(d);
    let mut acc = T::zero();
    for k in 0..d {
        let v = h[k] * rh[k] - t[k] * rt[k];
        acc += if l2 { v * v } else { v.abs() };
    }
    if l2 {
        -acc.sqrt()
    } else {
        -acc
    }
}

#[allow(clippy::too_many_arguments)]
pub fn pairre_score_backward<T: Scalar>(
    h: &[T],
    r: &[T],
    t: &[T],
    l2: bool,
    g: T,
    gh: &mut [T],
    gr: &mut [T],
    gt: &mut [T],
) {
    let d = h.len();
    let v: Vec<T> = (0..d).map(|k| h[k] * r[k] - t[k] * r[d + k]).collect();
    let norm = if l2 { v.iter().map(|&x| x * x).sum::<T>().sqrt() } else { T::zero() };
    for k in 0..d {
        let dv = if l2 {
            if norm > T::zero() {
                -v[k] / norm
            } else {
                T::zero()
            }
        } else {
            -sign(v[k])
        };
        gh[k] += g * dv * r[k];
        gr[k] += g * dv * h[k];
        gt[k] -= g * dv * r[d + k];
        gr[d + k] -= g * dv * t[k];
    }
}

pub fn score_rows<T: Scalar>(kind: KgeKind, h: &[T], r: &[T], t: &[T], lambda: T) -> T {
    match kind {
        KgeKind::Hake => hake_score(h, r, t, lambda),
        KgeKind::PairRe => pairre_score(h, r, t, false),
        KgeKind::PairReL2 => pairre_score(h, r, t, true),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn score_rows_backward<T: Scalar>(
    kind: KgeKind,
    h: &[T],
    r: &[T],
    t: &[T],
    lambda: T,
    g: T,
    gh: &mut [T],
    gr: &mut [T],
    gt: &mut [T],
) {
    match kind {
        KgeKind::Hake => hake_score_backward(h, r, t, lambda, g, gh, gr, gt),
        KgeKind::PairRe => pairre_score_backward(h, r, t, false, g, gh, gr, gt),
        KgeKind::PairReL2 => pairre_score_backward(h, r, t, true, g, gh, gr, gt),
    }
}

/// HAKE relation inferred from a head/tail pair:
/// (r^m = |t^m| / max(|h^m|, ε), r^p = t^p − h^p).
pub fn infer_relation_hake<T: Scalar>(h: &[T], t: &[T]) -> (Vec<T>, Vec<T>) {
    let d = h.len() / 2;
    let eps = T::of(MODULUS_EPS);
    let m = (0..d).map(|k| t[k].abs() / h[k].abs().max(eps)).collect();
    let p = (0..d).map(|k| t[d + k] - h[d + k]).collect();
    (m, p)
}

/// r^mm = (|r^m| + r^b) / (1 − min(r^b, 1 − 10⁻⁶)).
pub fn hake_rmm<T: Scalar>(rm: T, rb: T) -> T {
    (rm.abs() + rb) / (T::one() - rb.min(T::of(BIAS_CLAMP)))
}

/// One component of the relation-attention vector.
/// HAKE: r_ht^m · r^mm + r_ht^p · r^p. PairRE: h · r^H − t · r^T.
pub fn relation_attention_one<T: Scalar>(kind: KgeKind, h: &[T], t: &[T], r: &[T]) -> T {
    match kind {
        KgeKind::Hake => {
            let d = h.len() / 2;
            let eps = T::of(MODULUS_EPS);
            let mut s = T::zero();
            for k in 0..d {
                let m = t[k].abs() / h[k].abs().max(eps);
                s += m * hake_rmm(r[k], r[2 * d + k]) + (t[d + k] - h[d + k]) * r[d + k];
            }
            s
        }
        KgeKind::PairRe | KgeKind::PairReL2 => {
            let d = h.len();
            (0..d).map(|k| h[k] * r[k] - t[k] * r[d + k]).sum()
        }
    }
}

/// Adds `g · ∂relation_attention_one/∂θ` into the rows.
#[allow(clippy::too_many_arguments)]
pub fn relation_attention_one_backward<T: Scalar>(
    kind: KgeKind,
    h: &[T],
    t: &[T],
    r: &[T],
    g: T,
    gh: &mut [T],
    gt: &mut [T],
    gr: &mut [T],
) {
    match kind {
        KgeKind::Hake => {
            let d = h.len() / 2;
            let eps = T::of(MODULUS_EPS);
            let clamp = T::of(BIAS_CLAMP);
            for k in 0..d {
                let (hm, tm, rm, rp, rb) = (h[k], t[k], r[k], r[d + k], r[2 * d + k]);
                let den = hm.abs().max(eps);
                let m = tm.abs() / den;
                let rmm = hake_rmm(rm, rb);
                let c = T::one() - rb.min(clamp);
                gt[k] += g * sign(tm) / den * rmm;
                if hm.abs() > eps {
                    gh[k] -= g * tm.abs() / (den * den) * sign(hm) * rmm;
                }
                gr[k] += g * m * sign(rm) / c;
                let drb = if rb < clamp { (T::one() + rm.abs()) / (c * c) } else { T::one() / c };
                gr[2 * d + k] += g * m * drb;
                gt[d + k] += g * rp;
                gh[d + k] -= g * rp;
                gr[d + k] += g * (t[d + k] - h[d + k]);
            }
        }
        KgeKind::PairRe | KgeKind::PairReL2 => {
            let d = h.len();
            for k in 0..d {
                gh[k] += g * r[k];
                gr[k] += g * h[k];
                gt[k] -= g * r[d + k];
                gr[d + k] -= g * t[k];
            }
        }
    }
}

/// Self-adversarial weights softmax(α f) over one positive's negatives.
pub fn adversarial_weights<T: Scalar>(neg_scores: &[T], alpha: T) -> Vec<T> {
    if neg_scores.is_empty() {
        return Vec::new();
    }
    let mx = neg_scores.iter().fold(T::neg_infinity(), |a, &b| a.max(alpha * b));
    let ex: Vec<T> = neg_scores.iter().map(|&s| (alpha * s - mx).exp()).collect();
    let z: T = ex.iter().copied().sum();
    ex.into_iter().map(|e| e / z).collect()
}

/// Loss of one positive with its negatives and the derivatives of that loss
/// with respect to each score:
/// −log σ(γ + f) − Σ_i p_i log σ(−γ − f_i).
///
/// With `detach` the weights are constants; otherwise the derivative also
/// flows through the softmax.
pub fn adversarial_term<T: Scalar>(pos: T, negs: &[T], alpha: T, margin: T, detach: bool) -> (T, T, Vec<T>) {
    let p = adversarial_weights(negs, alpha);
    let mut loss = -log_sigmoid(margin + pos);
    let dpos = -sigmoid(-(margin + pos));
    let ell: Vec<T> = negs.iter().map(|&f| log_sigmoid(-margin - f)).collect();
    let mean_ell: T = p.iter().zip(&ell).map(|(&a, &b)| a * b).sum();
    loss -= mean_ell;
    let dneg = negs
        .iter()
        .enumerate()
        .map(|(j, &f)| {
            let direct = p[j] * sigmoid(margin + f);
            if detach {
                direct
            } else {
                direct - alpha * p[j] * (ell[j] - mean_ell)
            }
        })
        .collect();
    (loss, dpos, dneg)
}

// ---------------------------------------------------------------------------
// model

#[derive(Clone, Debug, PartialEq)]
pub struct KgeModel<T> {
    pub kind: KgeKind,
    pub dim: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    pub lambda: T,
    pub alpha: T,
    pub entity: Vec<T>,
    pub relation: Vec<T>,
}

impl<T: Scalar> KgeModel<T> {
    pub fn zeros(kind: KgeKind, dim: usize, n_entities: usize, n_relations: usize, lambda: T, alpha: T) -> Self {
        Self {
            kind,
            dim,
            n_entities,
            n_relations,
            lambda,
            alpha,
            entity: vec![T::zero(); n_entities * kind.entity_width(dim)],
            relation: vec![T::zero(); n_relations * kind.relation_width(dim)],
        }
    }

    /// Random initialization: HAKE moduli in [0, 1], phases in [−π, π],
    /// relation moduli 1 and biases 0; PairRE unit entities and relation
    /// entries in [−1, 1].
    pub fn init(kind: KgeKind, dim: usize, n_entities: usize, n_relations: usize, lambda: T, alpha: T, rng: &mut seed::Rng) -> Self {
        let mut m = Self::zeros(kind, dim, n_entities, n_relations, lambda, alpha);
        let pi = std::f64::consts::PI;
        match kind {
            KgeKind::Hake => {
                for e in 0..n_entities {
                    let row = m.entity_row_mut(e);
                    for k in 0..dim {
                        row[k] = T::of(rng.gen_range(0.0..1.0));
                        row[dim + k] = T::of(rng.gen_range(-pi..pi));
                    }
                }
                for r in 0..n_relations {
                    let row = m.relation_row_mut(r);
                    for k in 0..dim {
                        row[k] = T::one();
                        row[dim + k] = T::of(rng.gen_range(-pi..pi));
                    }
                }
            }
            KgeKind::PairRe | KgeKind::PairReL2 => {
                for x in m.entity.iter_mut() {
                    *x = T::of(rng.gen_range(-1.0..1.0));
                }
                for x in m.relation.iter_mut() {
                    *x = T::of(rng.gen_range(-1.0..1.0));
                }
                m.normalize_entities(0..n_entities);
            }
        }
        m
    }

    pub fn entity_width(&self) -> usize {
        self.kind.entity_width(self.dim)
    }

    pub fn relation_width(&self) -> usize {
        self.kind.relation_width(self.dim)
    }

    pub fn entity_row(&self, e: EntityId) -> &[T] {
        let w = self.entity_width();
        &self.entity[e * w..(e + 1) * w]
    }

    pub fn entity_row_mut(&mut self, e: EntityId) -> &mut [T] {
        let w = self.entity_width();
        &mut self.entity[e * w..(e + 1) * w]
    }

    pub fn relation_row(&self, r: RelationId) -> &[T] {
        let w = self.relation_width();
        &self.relation[r * w..(r + 1) * w]
    }

    pub fn relation_row_mut(&mut self, r: RelationId) -> &mut [T] {
        let w = self.relation_width();
        &mut self.relation[r * w..(r + 1) * w]
    }

    pub fn score(&self, t: &Triple) -> T {
        score_rows(self.kind, self.entity_row(t.head), self.relation_row(t.relation), self.entity_row(t.tail), self.lambda)
    }

    /// Scores of (h, r, t) for every relation r.
    pub fn score_all_relations(&self, h: EntityId, t: EntityId) -> Vec<T> {
        (0..self.n_relations).map(|r| self.score(&Triple::new(h, r, t))).collect()
    }

    /// Relation inferred from the pair: HAKE (r^m, r^p); PairRE passes
    /// (h, t) through.
    pub fn infer_relation(&self, h: &[T], t: &[T]) -> (Vec<T>, Vec<T>) {
        match self.kind {
            KgeKind::Hake => infer_relation_hake(h, t),
            KgeKind::PairRe | KgeKind::PairReL2 => (h.to_vec(), t.to_vec()),
        }
    }

    /// s_ht over all relations of the model.
    pub fn relation_attention_vector(&self, h: &[T], t: &[T]) -> Vec<T> {
        (0..self.n_relations).map(|r| relation_attention_one(self.kind, h, t, self.relation_row(r))).collect()
    }

    /// Renormalizes PairRE entity rows to unit L2 norm; no-op for HAKE.
    pub fn normalize_entities(&mut self, rows: impl IntoIterator<Item = EntityId>) {
        if !self.kind.is_pairre() {
            return;
        }
        for e in rows {
            let row = self.entity_row_mut(e);
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if n > T::zero() {
                for x in row.iter_mut() {
                    *x /= n;
                }
            }
        }
    }

    /// Adds `g · ∂f(t)/∂θ` into `grads`.
    pub fn score_backward(&self, t: &Triple, g: T, grads: &mut Grads<T>) {
        let (ew, rw) = (self.entity_width(), self.relation_width());
        grads.touch(t.head, t.tail, t.relation);
        let Grads { entity, relation, .. } = grads;
        let (gh, gt) = two_rows(entity, t.head, t.tail, ew);
        let gr = &mut relation[t.relation * rw..(t.relation + 1) * rw];
        let h = self.entity_row(t.head);
        let r = self.relation_row(t.relation);
        let tt = self.entity_row(t.tail);
        match gt {
            Some(gt) => score_rows_backward(self.kind, h, r, tt, self.lambda, g, gh, gr, gt),
            None => {
                // head == tail: accumulate into one row
                let mut tmp = vec![T::zero(); ew];
                score_rows_backward(self.kind, h, r, tt, self.lambda, g, gh, gr, &mut tmp);
                for (a, b) in gh.iter_mut().zip(tmp) {
                    *a += b;
                }
            }
        }
    }

    /// Self-adversarial loss summed over a batch, with gradients.
    pub fn self_adversarial_loss(&self, batch: &TrainBatch, margin: T, detach: bool, grads: &mut Grads<T>) -> T {
        let mut total = T::zero();
        for (pos, negs) in batch.positives.iter().zip(&batch.negatives) {
            let fp = self.score(pos);
            let fn_: Vec<T> = negs.iter().map(|t| self.score(t)).collect();
            let (loss, dpos, dneg) = adversarial_term(fp, &fn_, self.alpha, margin, detach);
            total += loss;
            self.score_backward(pos, dpos, grads);
            for (t, &g) in negs.iter().zip(&dneg) {
                self.score_backward(t, g, grads);
            }
        }
        total
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<(), KgeError> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{} {} {} {} {} {}", self.kind, self.dim, self.n_entities, self.n_relations, self.lambda, self.alpha)?;
        write_rows(&mut out, &self.entity, self.entity_width())?;
        write_rows(&mut out, &self.relation, self.relation_width())?;
        out.flush()?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self, KgeError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| KgeError::Checkpoint("empty file".into()))?.split_whitespace().collect();
        if header.len() != 6 {
            return Err(KgeError::Checkpoint(format!("header has {} fields, expected 6", header.len())));
        }
        let kind: KgeKind = header[0].parse()?;
        let num = |s: &str| s.parse::<usize>().map_err(|_| KgeError::Checkpoint(format!("bad integer {s:?}")));
        let flt = |s: &str| s.parse::<T>().map_err(|_| KgeError::Checkpoint(format!("bad float {s:?}")));
        let (dim, n_e, n_r) = (num(header[1])?, num(header[2])?, num(header[3])?);
        let mut m = Self::zeros(kind, dim, n_e, n_r, flt(header[4])?, flt(header[5])?);
        let (ew, rw) = (m.entity_width(), m.relation_width());
        read_rows(&mut lines, &mut m.entity, ew, &flt)?;
        read_rows(&mut lines, &mut m.relation, rw, &flt)?;
        Ok(m)
    }
}

fn write_rows<T: Scalar>(out: &mut impl std::io::Write, data: &[T], width: usize) -> std::io::Result<()> {
    for row in data.chunks(width.max(1)) {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{}", cells.join(" "))?;
    }
    Ok(())
}

fn read_rows<'a, T: Scalar>(
    lines: &mut impl Iterator<Item = &'a str>,
    data: &mut [T],
    width: usize,
    flt: &impl Fn(&str) -> Result<T, KgeError>,
) -> Result<(), KgeError> {
    for row in data.chunks_mut(width.max(1)) {
        let line = lines.next().ok_or_else(|| KgeError::Checkpoint("truncated".into()))?;
        let cells: Vec<&str> = line.split_whitespace().collect();
        if cells.len() != row.len() {
            return Err(KgeError::Checkpoint(format!("row has {} values, expected {}", cells.len(), row.len())));
        }
        for (x, c) in row.iter_mut().zip(cells) {
            *x = flt(c)?;
        }
    }
    Ok(())
}

/// Disjoint mutable rows `a` and `b` of a row-major table; `None` for the
/// second when they coincide.
fn two_rows<T>(data: &mut [T], a: usize, b: usize, w: usize) -> (&mut [T], Option<&mut [T]>) {
    if a == b {
        return (&mut data[a * w..(a + 1) * w], None);
    }
    let (lo, hi) = (a.min(b), a.max(b));
    let (x, y) = data.split_at_mut(hi * w);
    let lo_row = &mut x[lo * w..(lo + 1) * w];
    let hi_row = &mut y[..w];
    if a < b {
        (lo_row, Some(hi_row))
    } else {
        (hi_row, Some(lo_row))
    }
}

/// Dense gradient buffers with touched-row tracking.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub entity: Vec<T>,
    pub relation: Vec<T>,
    entity_rows: Vec<EntityId>,
    relation_rows: Vec<RelationId>,
    entity_mark: Vec<bool>,
    relation_mark: Vec<bool>,
}

impl<T: Scalar> Grads<T> {
    pub fn for_model(m: &KgeModel<T>) -> Self {
        Self {
            entity: vec![T::zero(); m.entity.len()],
            relation: vec![T::zero(); m.relation.len()],
            entity_rows: Vec::new(),
            relation_rows: Vec::new(),
            entity_mark: vec![false; m.n_entities],
            relation_mark: vec![false; m.n_relations],
        }
    }

    fn touch(&mut self, h: EntityId, t: EntityId, r: RelationId) {
        for e in [h, t] {
            if !self.entity_mark[e] {
                self.entity_mark[e] = true;
                self.entity_rows.push(e);
            }
        }
        if !self.relation_mark[r] {
            self.relation_mark[r] = true;
            self.relation_rows.push(r);
        }
    }

    pub fn touched_entities(&self) -> &[EntityId] {
        &self.entity_rows
    }

    pub fn touched_relations(&self) -> &[RelationId] {
        &self.relation_rows
    }

    /// Zeros touched rows only.
    pub fn clear(&mut self, ew: usize, rw: usize) {
        for &e in &self.entity_rows {
            self.entity[e * ew..(e + 1) * ew].fill(T::zero());
            self.entity_mark[e] = false;
        }
        for &r in &self.relation_rows {
            self.relation[r * rw..(r + 1) * rw].fill(T::zero());
            self.relation_mark[r] = false;
        }
        self.entity_rows.clear();
        self.relation_rows.clear();
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainBatch {
    pub positives: Vec<Triple>,
    /// `negatives[i]` corrupts `positives[i]`.
    pub negatives: Vec<Vec<Triple>>,
}

/// Up to `k` corruptions of `triple` (head or tail replaced by a uniform
/// entity, coin flip) that are absent from `known`. Each slot gets
/// `max_retries` attempts; exhausted slots are dropped with a warning.
pub fn negative_sample(
    known: &HashSet<Triple>,
    n_entities: usize,
    triple: &Triple,
    k: usize,
    max_retries: usize,
    rng: &mut seed::Rng,
) -> Vec<Triple> {
    let mut out = Vec::with_capacity(k);
    let mut saturated = 0;
    for _ in 0..k {
        let mut found = None;
        for _ in 0..max_retries {
            let e = rng.gen_range(0..n_entities);
            let c = if rng.gen_bool(0.5) {
                Triple::new(e, triple.relation, triple.tail)
            } else {
                Triple::new(triple.head, triple.relation, e)
            };
            if !known.contains(&c) {
                found = Some(c);
                break;
            }
        }
        match found {
            Some(c) => out.push(c),
            None => saturated += 1,
        }
    }
    if saturated > 0 {
        log::warn!("negative sampling saturated for {:?}: {} of {} slots empty", triple, saturated, k);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgeConfig {
    pub kind: KgeKind,
    pub dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub alpha: f64,
    pub lambda: f64,
    /// γ in σ(γ + f); 0 gives the plain σ(f) likelihood.
    pub margin: f64,
    pub eval_every: usize,
    pub decay_factor: f64,
    pub decay_patience: usize,
    pub detach_weights: bool,
    /// Draw fresh negatives every epoch; when false they are drawn once.
    pub resample_negatives: bool,
    pub sgd: bool,
    pub seed: u64,
}

impl Default for KgeConfig {
    fn default() -> Self {
        Self {
            kind: KgeKind::Hake,
            dim: 500,
            lr: 1e-3,
            epochs: 100,
            batch_size: 512,
            negatives: 16,
            alpha: 1.0,
            lambda: 0.5,
            margin: 0.0,
            eval_every: 10,
            decay_factor: 0.8,
            decay_patience: 5,
            detach_weights: true,
            resample_negatives: true,
            sgd: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// (epoch, relation-prediction MRR on the validation triples).
    pub validations: Vec<(usize, f64)>,
    pub best_epoch: usize,
}

/// Mean reciprocal rank of the true relation among all relations for each
/// (h, t) of `triples`; ties count pessimistically.
pub fn relation_mrr<T: Scalar>(model: &KgeModel<T>, triples: &[Triple]) -> f64 {
    if triples.is_empty() {
        return 0.0;
    }
    let total: f64 = triples
        .iter()
        .map(|t| {
            let s = model.score_all_relations(t.head, t.tail);
            let own = s[t.relation];
            let rank = 1 + s.iter().enumerate().filter(|&(r, &x)| r != t.relation && x >= own).count();
            1.0 / rank as f64
        })
        .sum();
    total / triples.len() as f64
}

/// Trains on `kg` with Adam (or SGD) and self-adversarial negatives. Keeps
/// the parameters with the best validation MRR, or the last ones when
/// `valid` is empty.
pub fn train_kge<T: Scalar>(kg: &KnowledgeGraph, valid: &[Triple], cfg: &KgeConfig) -> Result<(KgeModel<T>, TrainReport), KgeError> {
    if kg.is_empty() {
        return Err(KgeError::EmptyTraining);
    }
    let mut rng = seed::module_rng(cfg.seed, "kge");
    let mut model = KgeModel::<T>::init(cfg.kind, cfg.dim, kg.n_entities(), kg.n_relations(), T::of(cfg.lambda), T::of(cfg.alpha), &mut rng);
    let kind = if cfg.sgd { OptimizerKind::Sgd } else { OptimizerKind::Adam };
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut opt_e = Optimizer::<T>::new(kind, adam, model.entity.len());
    let mut opt_r = Optimizer::<T>::new(kind, adam, model.relation.len());
    let mut decay = PlateauDecay::new(cfg.decay_factor, cfg.decay_patience);
    let mut grads = Grads::for_model(&model);
    let (ew, rw) = (model.entity_width(), model.relation_width());
    let margin = T::of(cfg.margin);
    let known = kg.triple_set();

    let mut order: Vec<Triple> = kg.triples().to_vec();
    let mut fixed: std::collections::HashMap<Triple, Vec<Triple>> = std::collections::HashMap::new();
    if !cfg.resample_negatives {
        for t in kg.triples() {
            fixed.insert(*t, negative_sample(known, kg.n_entities(), t, cfg.negatives, 100, &mut rng));
        }
    }
    let mut report = TrainReport::default();
    let mut best: Option<(f64, KgeModel<T>)> = None;
    let mut idx_e = Vec::new();
    let mut idx_r = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = TrainBatch {
                positives: chunk.to_vec(),
                negatives: chunk
                    .iter()
                    .map(|t| match fixed.get(t) {
                        Some(n) => n.clone(),
                        None => negative_sample(known, kg.n_entities(), t, cfg.negatives, 100, &mut rng),
                    })
                    .collect(),
            };
            let loss = model.self_adversarial_loss(&batch, margin, cfg.detach_weights, &mut grads).as_f64();
            if !loss.is_finite() {
                return Err(KgeError::Diverged { epoch, loss });
            }
            epoch_loss += loss;

            idx_e.clear();
            for &e in grads.touched_entities() {
                idx_e.extend(e * ew..(e + 1) * ew);
            }
            idx_r.clear();
            for &r in grads.touched_relations() {
                idx_r.extend(r * rw..(r + 1) * rw);
            }
            opt_e.step_sparse(&mut model.entity, &grads.entity, &idx_e);
            opt_r.step_sparse(&mut model.relation, &grads.relation, &idx_r);
            let touched: Vec<EntityId> = grads.touched_entities().to_vec();
            model.normalize_entities(touched);
            grads.clear(ew, rw);
        }
        let avg = epoch_loss / order.len() as f64;
        report.epoch_losses.push(avg);
        decay.observe(-avg, &mut opt_e);
        opt_r.cfg.lr = opt_e.cfg.lr;
        log::debug!("kge epoch {epoch}: loss {avg:.6} lr {:.2e}", opt_e.lr());

        if !valid.is_empty() && (epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.epochs) {
            let mrr = relation_mrr(&model, valid);
            report.validations.push((epoch, mrr));
            log::info!("kge epoch {epoch}: valid relation MRR {mrr:.4}");
            if best.as_ref().map_or(true, |(b, _)| mrr > *b) {
                best = Some((mrr, model.clone()));
                report.best_epoch = epoch;
            }
        }
    }
    match best {
        Some((_, m)) => Ok((m, report)),
        None => {
            report.best_epoch = cfg.epochs;
            Ok((model, report))
        }
    }
}
