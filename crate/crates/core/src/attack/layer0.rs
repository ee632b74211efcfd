//! The CompNode attack on layer-0 partials.
//!
//! At layer 0, q, k and v of a token depend only on the token and its
//! position. A CompNode that knows its own tokens can therefore undo the
//! subtract-max normalization of each partial to obtain
//! `f(r, S) = Σ_{s ∈ S, s ≤ r} exp(q_r·k_s) v_s` (and the matching expsum),
//! and solve for the unknown tokens of `S` by enumeration whenever few of
//! them precede `r`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    candidate_count, for_each_tuple, l1, AttackBudget, AttackError, AttackResult, AttackStatus, Best,
    CollisionCertificate, CompNodeView, GapOutcome, RecoveredToken,
};
use crate::model::{Model, TokenId};
use crate::sharding::{slot, IndexSet};
use crate::tensor::{dot, HeadRows};

const MATCH_TOLERANCE: f64 = 1e-6;

/// Un-normalized attention sums of one CompNode against one key shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FValues {
    pub key_shard: usize,
    pub rows: IndexSet,
    /// `e ⊙ exp(m)`, `heads × rows`.
    pub expsum: Vec<f64>,
    /// `u ⊙ e ⊙ exp(m)`.
    pub f: HeadRows,
}

impl FValues {
    /// `[expsum_h, f_h...]` for each head, concatenated.
    pub fn row_vector(&self, row: usize) -> Vec<f64> {
        let heads = self.f.heads();
        let mut out = Vec::with_capacity(heads * (self.f.dim() + 1));
        for h in 0..heads {
            out.push(self.expsum[h * self.rows.len() + row]);
            out.extend_from_slice(self.f.get(h, row));
        }
        out
    }
}

/// `f` and expsum for every row of the view against every key shard.
/// Sentinel rows (empty causal prefix) give zeros.
pub fn layer0_f_values(view: &CompNodeView) -> Result<Vec<FValues>, AttackError> {
    if view.partials.len() != view.s.len() {
        return Err(AttackError::ShapeMismatch(format!(
            "{} partials for {} key shards",
            view.partials.len(),
            view.s.len()
        )));
    }
    view.partials
        .iter()
        .enumerate()
        .map(|(k, p)| {
            if p.key_shard != k + 1 || p.rows != view.r {
                return Err(AttackError::ShapeMismatch(format!(
                    "partial {} covers shard {} rows {}",
                    k + 1,
                    p.key_shard,
                    p.rows
                )));
            }
            let n = p.rows.len();
            let mut expsum = vec![0.0; p.heads() * n];
            let mut f = HeadRows::zeros(p.heads(), n, p.u.dim());
            for h in 0..p.heads() {
                for r in 0..n {
                    if p.is_sentinel(h, r) {
                        continue;
                    }
                    let scale = p.expsum(h, r) * p.max(h, r).exp();
                    expsum[h * n + r] = scale;
                    for (o, u) in f.get_mut(h, r).iter_mut().zip(p.u.get(h, r)) {
                        *o = u * scale;
                    }
                }
            }
            Ok(FValues { key_shard: p.key_shard, rows: p.rows.clone(), expsum, f })
        })
        .collect()
}

/// Layer-0 keys and values of every vocabulary token at one position.
pub(crate) struct PositionTable {
    pub k: HeadRows,
    pub v: HeadRows,
}

impl PositionTable {
    pub fn build(model: &Model, index: usize) -> Result<Self, AttackError> {
        let vocab: Vec<TokenId> = (0..model.config().vocab_size as TokenId).collect();
        let qkv = model.project_qkv(0, &model.embed(&vocab), &vec![slot(index); vocab.len()])?;
        Ok(Self { k: qkv.k, v: qkv.v })
    }

    /// `[exp(q_h·k_h), exp(q_h·k_h) v_h]` per head for `token`, with `q`
    /// the query (all heads) of the attending row.
    pub fn term(&self, q: &HeadRows, q_row: usize, token: TokenId, out: &mut [f64]) {
        let heads = q.heads();
        let group = heads / self.k.heads();
        let dim = self.v.dim();
        let t = token as usize;
        for h in 0..heads {
            let kv = h / group;
            let w = dot(q.get(h, q_row), self.k.get(kv, t)).exp();
            let base = h * (dim + 1);
            out[base] = w;
            for (o, x) in out[base + 1..base + 1 + dim].iter_mut().zip(self.v.get(kv, t)) {
                *o = w * x;
            }
        }
    }
}

/// Enumerates fillings of every attackable gap, in order within each key
/// shard. A gap is the set of unknown indices of `S_k` strictly between two
/// consecutive rows of `R_i`; it is attackable when it is non-empty, smaller
/// than `rho`, and every earlier gap of the same shard has been solved.
pub fn layer0_meu_attack(
    model: &Model,
    view: &CompNodeView,
    budget: &AttackBudget,
    truth: Option<&[TokenId]>,
) -> Result<AttackResult, AttackError> {
    budget.validate()?;
    if view.layer != 0 {
        return Err(AttackError::ShapeMismatch(format!("view is from layer {}, not 0", view.layer)));
    }
    if view.tokens.len() != view.r.len() {
        return Err(AttackError::ShapeMismatch("one token per row of R_i required".into()));
    }
    model.check_tokens(&view.tokens)?;
    let fvals = layer0_f_values(view)?;
    let cfg = model.config();
    let width = cfg.n_heads * (cfg.head_dim + 1);
    let positions: Vec<usize> = view.r.iter().map(slot).collect();
    let q = model.project_qkv(0, &model.embed(&view.tokens), &positions)?.q;

    let mut known: BTreeMap<usize, TokenId> = view.r.iter().zip(view.tokens.iter().copied()).collect();
    let mut tables: BTreeMap<usize, PositionTable> = BTreeMap::new();
    let mut result = AttackResult::empty();
    let mut any_gap = false;
    let mut term = vec![0.0; width];

    for (k, s_k) in view.s.iter().enumerate() {
        let mut lo = 0;
        for (row, hi) in view.r.iter().enumerate() {
            let gap: Vec<usize> = s_k.iter().filter(|&s| s > lo && s < hi).collect();
            lo = hi;
            if gap.is_empty() {
                continue;
            }
            any_gap = true;
            if gap.len() > budget.t_max {
                if result.limiting_gap.is_none() {
                    result.limiting_gap = Some((gap[0], gap.len()));
                }
                break;
            }
            let count = candidate_count(cfg.vocab_size, gap.len());
            if result.forward_pass_count.saturating_add(count) > budget.pass_cap {
                return Err(AttackError::PassCapExhausted { cap: budget.pass_cap, partial: Box::new(result) });
            }

            // Subtract every known contribution to f(hi, S_k).
            let mut target = fvals[k].row_vector(row);
            for s in s_k.iter().take_while(|&s| s <= hi).filter(|s| !gap.contains(s)) {
                let token = known[&s];
                tables_entry(&mut tables, model, s)?.term(&q, row, token, &mut term);
                target.iter_mut().zip(&term).for_each(|(t, x)| *t -= x);
            }
            for &s in &gap {
                tables_entry(&mut tables, model, s)?;
            }

            let scale = target.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
            let tolerance = MATCH_TOLERANCE * width as f64 * scale;
            let true_tuple: Option<Vec<TokenId>> =
                truth.map(|t| gap.iter().map(|&s| t.get(slot(s)).copied().unwrap_or(TokenId::MAX)).collect());
            let mut best = Best::new();
            let mut sum = vec![0.0; width];
            for_each_tuple(cfg.vocab_size, gap.len(), |tuple| {
                sum.iter_mut().for_each(|x| *x = 0.0);
                for (&s, &token) in gap.iter().zip(tuple) {
                    tables[&s].term(&q, row, token, &mut term);
                    sum.iter_mut().zip(&term).for_each(|(a, b)| *a += b);
                }
                best.offer(tuple, l1(&sum, &target), tolerance, true_tuple.as_deref());
            });
            result.forward_pass_count += count;
            result.gaps.push(GapOutcome {
                indices: gap.clone(),
                anchor: hi,
                tokens: best.tuple.clone(),
                best_distance: best.distance,
                runner_up_distance: best.runner_up.is_finite().then_some(best.runner_up),
                tolerance,
                matches: best.matches,
                passes: count,
            });

            if best.distance > tolerance {
                result.status = AttackStatus::NoMatch;
                return Ok(finish(result));
            }
            if let Some(t) = &true_tuple {
                if *t != best.tuple {
                    result.status = AttackStatus::CollisionSuspected;
                    result.collision = Some(CollisionCertificate {
                        anchor: hi,
                        recovered: best.tuple.clone(),
                        truth: t.clone(),
                        recovered_distance: best.distance,
                        true_distance: best.truth_distance.unwrap_or(f64::INFINITY),
                    });
                    return Ok(finish(result));
                }
            }
            if best.matches > 1 {
                result.status = AttackStatus::CollisionSuspected;
                return Ok(finish(result));
            }
            for (&s, &token) in gap.iter().zip(&best.tuple) {
                known.insert(s, token);
                result.recovered.push(RecoveredToken { index: s, token });
            }
        }
    }

    result.status =
        if result.recovered.is_empty() && any_gap { AttackStatus::InfeasibleBudget } else { AttackStatus::Recovered };
    Ok(finish(result))
}

fn tables_entry<'a>(
    tables: &'a mut BTreeMap<usize, PositionTable>,
    model: &Model,
    index: usize,
) -> Result<&'a PositionTable, AttackError> {
    if let std::collections::btree_map::Entry::Vacant(e) = tables.entry(index) {
        e.insert(PositionTable::build(model, index)?);
    }
    Ok(&tables[&index])
}

fn finish(mut result: AttackResult) -> AttackResult {
    result.recovered.sort_by_key(|r| r.index);
    result
}
