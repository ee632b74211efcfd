//! The token-sharded forward pass.
//!
//! One layer runs in three phases. CompNodes project their own rows to
//! q, k, v (pre-pass); each AttnNode computes partial attention of one S
//! shard against another and emits `(m, e, u)` per row (attention pass);
//! CompNodes recombine the partials with a subtract-max rescale and finish
//! the layer (post-pass). The free functions here are the per-node
//! computations; [`Cluster`] wires them through the router.

mod cluster;
mod generate;

pub use cluster::{Capture, Cluster, ForwardOutput, ShardLogits};
pub use generate::{cascade_generate, cascade_generate_uncached, generation_plan, GenerationOutput, StepRecord};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError, Qkv};
use crate::sharding::{slot, IndexSet, NodeId, PlanError};
use crate::tensor::{dot, HeadRows, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Network(#[from] crate::netsim::NetsimError),
    #[error("plan covers {plan_n} tokens but {tokens} were supplied")]
    LengthMismatch { plan_n: usize, tokens: usize },
    #[error("{node}: no partial for key shard {key_shard}")]
    MissingSlice { node: NodeId, key_shard: usize },
    #[error("all-zero recombination weight for token {index}")]
    ZeroWeight { index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("routing: {0}")]
    Routing(String),
    #[error("cache: {0}")]
    Cache(String),
}

/// Sufficient statistics of one attention block for exact recombination.
///
/// `m` and `e` are `heads × rows`, head-major. A row whose keys are all
/// causally masked is a sentinel: `m = -inf`, `e = 0`, `u = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnPartial {
    pub key_shard: usize,
    pub rows: IndexSet,
    pub m: Vec<f64>,
    pub e: Vec<f64>,
    pub u: HeadRows,
}

impl AttnPartial {
    pub fn heads(&self) -> usize {
        self.u.heads()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn at(&self, head: usize, row: usize) -> usize {
        head * self.rows.len() + row
    }

    pub fn max(&self, head: usize, row: usize) -> f64 {
        self.m[self.at(head, row)]
    }

    pub fn expsum(&self, head: usize, row: usize) -> f64 {
        self.e[self.at(head, row)]
    }

    pub fn is_sentinel(&self, head: usize, row: usize) -> bool {
        self.max(head, row) == f64::NEG_INFINITY
    }

    /// Wire size: `(d + 2)·H` per row.
    pub fn elements(&self) -> u64 {
        (self.rows.len() * self.heads() * (self.u.dim() + 2)) as u64
    }

    /// Restriction to the rows in `keep` (which must be a subset).
    pub fn restrict(&self, keep: &IndexSet) -> AttnPartial {
        let positions: Vec<usize> =
            self.rows.iter().enumerate().filter(|&(_, idx)| keep.contains(idx)).map(|(p, _)| p).collect();
        self.pick(&positions)
    }

    fn pick(&self, positions: &[usize]) -> AttnPartial {
        let heads = self.heads();
        let rows = IndexSet::from_unsorted(positions.iter().map(|&p| self.rows.as_slice()[p]));
        let mut m = Vec::with_capacity(heads * positions.len());
        let mut e = Vec::with_capacity(heads * positions.len());
        for h in 0..heads {
            for &p in positions {
                m.push(self.max(h, p));
                e.push(self.expsum(h, p));
            }
        }
        AttnPartial { key_shard: self.key_shard, rows, m, e, u: self.u.select_rows(positions) }
    }

    /// Joins row-disjoint partials for the same key shard, sorted by index.
    pub fn merge(
        key_shard: usize,
        heads: usize,
        dim: usize,
        parts: &[AttnPartial],
    ) -> Result<AttnPartial, ProtocolError> {
        let mut order: Vec<(usize, usize, usize)> = Vec::new();
        for (pi, p) in parts.iter().enumerate() {
            if p.key_shard != key_shard || p.heads() != heads || p.u.dim() != dim {
                return Err(ProtocolError::ShapeMismatch(format!(
                    "partial for key shard {} ({}x{}) merged into shard {key_shard} ({heads}x{dim})",
                    p.key_shard,
                    p.heads(),
                    p.u.dim()
                )));
            }
            order.extend(p.rows.iter().enumerate().map(|(r, idx)| (idx, pi, r)));
        }
        order.sort_unstable();
        if order.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(ProtocolError::Routing(format!("duplicate rows for key shard {key_shard}")));
        }
        let n = order.len();
        let mut m = vec![0.0; heads * n];
        let mut e = vec![0.0; heads * n];
        let mut u = HeadRows::zeros(heads, n, dim);
        for (dst, &(_, pi, r)) in order.iter().enumerate() {
            let p = &parts[pi];
            for h in 0..heads {
                m[h * n + dst] = p.max(h, r);
                e[h * n + dst] = p.expsum(h, r);
                u.get_mut(h, dst).copy_from_slice(p.u.get(h, r));
            }
        }
        let rows = IndexSet::new(order.iter().map(|o| o.0).collect())?;
        Ok(AttnPartial { key_shard, rows, m, e, u })
    }
}

/// Norm, projection and rotary embedding of a node's own rows at their
/// absolute positions.
pub fn pre_pass(model: &Model, layer: usize, hidden: &Matrix, indices: &IndexSet) -> Result<Qkv, ProtocolError> {
    let positions: Vec<usize> = indices.iter().map(slot).collect();
    Ok(model.project_qkv(layer, hidden, &positions)?)
}

/// Partial attention of queries `q` (rows labelled `q_rows`) against keys
/// and values labelled `k_rows`, under the causal mask implied by the labels.
pub fn attn_pass(
    q: &HeadRows,
    q_rows: &IndexSet,
    k: &HeadRows,
    v: &HeadRows,
    k_rows: &IndexSet,
    key_shard: usize,
) -> Result<AttnPartial, ProtocolError> {
    if q.rows() != q_rows.len() || k.rows() != k_rows.len() || v.rows() != k_rows.len() {
        return Err(ProtocolError::ShapeMismatch("row labels do not match tensors".into()));
    }
    if k.heads() == 0 || !q.heads().is_multiple_of(k.heads()) || k.heads() != v.heads() || q.dim() != k.dim() {
        return Err(ProtocolError::ShapeMismatch(format!("{} query heads against {} key heads", q.heads(), k.heads())));
    }
    let heads = q.heads();
    let group = heads / k.heads();
    let n = q_rows.len();
    let mut m = vec![f64::NEG_INFINITY; heads * n];
    let mut e = vec![0.0; heads * n];
    let mut u = HeadRows::zeros(heads, n, v.dim());
    let mut logits = Vec::with_capacity(k_rows.len());
    for (r, qi) in q_rows.iter().enumerate() {
        // Keys are sorted, so the visible ones form a prefix.
        let visible = k_rows.as_slice().partition_point(|&ki| ki <= qi);
        if visible == 0 {
            continue;
        }
        for h in 0..heads {
            let kv = h / group;
            logits.clear();
            logits.extend((0..visible).map(|c| dot(q.get(h, r), k.get(kv, c))));
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let out = u.get_mut(h, r);
            for (c, &l) in logits.iter().enumerate() {
                let p = (l - max).exp();
                sum += p;
                for (o, x) in out.iter_mut().zip(v.get(kv, c)) {
                    *o += p * x;
                }
            }
            out.iter_mut().for_each(|o| *o /= sum);
            m[h * n + r] = max;
            e[h * n + r] = sum;
        }
    }
    Ok(AttnPartial { key_shard, rows: q_rows.clone(), m, e, u })
}

/// Worst-case stability figures seen while recombining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostStats {
    /// Largest `m - n` over non-sentinel entries; never positive.
    pub max_shift: f64,
    /// Smallest accumulated weight `w`.
    pub min_weight: f64,
}

impl PostStats {
    pub const EMPTY: PostStats = PostStats { max_shift: f64::NEG_INFINITY, min_weight: f64::INFINITY };

    pub fn combine(self, other: PostStats) -> PostStats {
        PostStats { max_shift: self.max_shift.max(other.max_shift), min_weight: self.min_weight.min(other.min_weight) }
    }
}

/// Subtract-max recombination of one partial per key shard `1..=beta`, each
/// covering exactly `rows`. Returns per-head attention outputs.
pub fn recombine(
    node: NodeId,
    rows: &IndexSet,
    partials: &[AttnPartial],
    beta: usize,
) -> Result<(HeadRows, PostStats), ProtocolError> {
    let mut by_shard: Vec<Option<&AttnPartial>> = vec![None; beta];
    for p in partials {
        let slot = p
            .key_shard
            .checked_sub(1)
            .filter(|&s| s < beta)
            .ok_or_else(|| ProtocolError::Routing(format!("{node}: key shard {} out of range", p.key_shard)))?;
        if by_shard[slot].is_some() {
            return Err(ProtocolError::Routing(format!("{node}: two partials for key shard {}", p.key_shard)));
        }
        if p.rows != *rows {
            return Err(ProtocolError::Routing(format!(
                "{node}: partial for key shard {} covers {} instead of {}",
                p.key_shard, p.rows, rows
            )));
        }
        by_shard[slot] = Some(p);
    }
    let parts: Vec<&AttnPartial> = by_shard
        .iter()
        .enumerate()
        .map(|(s, p)| p.ok_or(ProtocolError::MissingSlice { node, key_shard: s + 1 }))
        .collect::<Result<_, _>>()?;
    let (heads, dim) = match parts.first() {
        Some(p) => (p.heads(), p.u.dim()),
        None => return Err(ProtocolError::MissingSlice { node, key_shard: 1 }),
    };

    let mut stats = PostStats::EMPTY;
    let mut out = HeadRows::zeros(heads, rows.len(), dim);
    for (r, index) in rows.iter().enumerate() {
        for h in 0..heads {
            let n =
                parts.iter().filter(|p| !p.is_sentinel(h, r)).map(|p| p.max(h, r)).fold(f64::NEG_INFINITY, f64::max);
            if n == f64::NEG_INFINITY {
                return Err(ProtocolError::ZeroWeight { index });
            }
            let mut w = 0.0;
            let o = out.get_mut(h, r);
            for p in &parts {
                if p.is_sentinel(h, r) {
                    continue;
                }
                let shift = p.max(h, r) - n;
                stats.max_shift = stats.max_shift.max(shift);
                let scale = shift.exp() * p.expsum(h, r);
                w += scale;
                for (oi, ui) in o.iter_mut().zip(p.u.get(h, r)) {
                    *oi += scale * ui;
                }
            }
            if !(w > 0.0) {
                return Err(ProtocolError::ZeroWeight { index });
            }
            stats.min_weight = stats.min_weight.min(w);
            o.iter_mut().for_each(|x| *x /= w);
        }
    }
    Ok((out, stats))
}

/// Recombination followed by the O-projection.
pub fn post_pass(
    model: &Model,
    layer: usize,
    node: NodeId,
    rows: &IndexSet,
    partials: &[AttnPartial],
    beta: usize,
) -> Result<(Matrix, PostStats), ProtocolError> {
    let (o, stats) = recombine(node, rows, partials, beta)?;
    Ok((model.output_projection(layer, &o)?, stats))
}

/// Softmax of `x` computed blockwise: each block contributes its own max,
/// subtract-max expsum and local softmax, and the blocks are rescaled onto a
/// common max. Blocks that are entirely `-inf` contribute nothing.
pub fn blockwise_softmax(x: &[f64], blocks: &[Vec<usize>]) -> Vec<f64> {
    let stats: Vec<(f64, f64)> = blocks
        .iter()
        .map(|b| {
            let m = b.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                (m, 0.0)
            } else {
                (m, b.iter().map(|&i| (x[i] - m).exp()).sum())
            }
        })
        .collect();
    let n = stats.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = stats.iter().filter(|s| s.0 != f64::NEG_INFINITY).map(|&(m, e)| (m - n).exp() * e).sum();
    let mut out = vec![0.0; x.len()];
    for (b, &(m, e)) in blocks.iter().zip(&stats) {
        if m == f64::NEG_INFINITY {
            continue;
        }
        let block_weight = (m - n).exp() * e / total;
        for &i in b {
            out[i] = block_weight * (x[i] - m).exp() / e;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_masked_row_is_sentinel() {
        let q = HeadRows::from_vec(1, 1, 2, vec![1.0, 0.0]);
        let k = HeadRows::from_vec(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let p = attn_pass(&q, &IndexSet::full(1), &k, &k, &IndexSet::new(vec![2, 3]).unwrap(), 2).unwrap();
        assert!(p.is_sentinel(0, 0));
        assert_eq!(p.expsum(0, 0), 0.0);
        assert_eq!(p.u.get(0, 0), &[0.0, 0.0]);
    }

    #[test]
    fn recombine_requires_every_key_shard() {
        let q = HeadRows::from_vec(1, 1, 2, vec![1.0, 0.0]);
        let rows = IndexSet::full(1);
        let p = attn_pass(&q, &rows, &q, &q, &rows, 1).unwrap();
        let err = recombine(NodeId::Comp(1), &rows, &[p], 2).unwrap_err();
        assert_eq!(err, ProtocolError::MissingSlice { node: NodeId::Comp(1), key_shard: 2 });
    }

    #[test]
    fn all_sentinel_row_is_an_error() {
        let q = HeadRows::from_vec(1, 1, 2, vec![1.0, 0.0]);
        let k = HeadRows::from_vec(1, 1, 2, vec![1.0, 0.0]);
        let rows = IndexSet::full(1);
        let p = attn_pass(&q, &rows, &k, &k, &IndexSet::new(vec![2]).unwrap(), 1).unwrap();
        let err = recombine(NodeId::Comp(1), &rows, &[p], 1).unwrap_err();
        assert_eq!(err, ProtocolError::ZeroWeight { index: 1 });
    }

    #[test]
    fn merge_sorts_rows() {
        let u = HeadRows::from_vec(1, 1, 1, vec![5.0]);
        let a = AttnPartial {
            key_shard: 1,
            rows: IndexSet::new(vec![4]).unwrap(),
            m: vec![0.0],
            e: vec![1.0],
            u: u.clone(),
        };
        let b = AttnPartial { key_shard: 1, rows: IndexSet::new(vec![2]).unwrap(), m: vec![1.0], e: vec![2.0], u };
        let merged = AttnPartial::merge(1, 1, 1, &[a, b]).unwrap();
        assert_eq!(merged.rows.as_slice(), &[2, 4]);
        assert_eq!(merged.m, vec![1.0, 0.0]);
    }
}
