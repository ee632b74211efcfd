//! Structural check: each layer-0 `b` row a CompNode holds is a sum of one
//! entry from each of a few vocabulary-sized lists.

use serde::{Deserialize, Serialize};

use super::layer0::{layer0_f_values, PositionTable};
use super::{AttackError, CompNodeView, RecoveredToken};
use crate::model::{Model, TokenId};
use crate::netsim::NetworkParams;
use crate::protocol::{Capture, Cluster};
use crate::sharding::{slot, IndexSet, ShardPlan};

/// Largest vocabulary for which the lists are materialized.
pub const MAX_LIST_VOCAB: usize = 64;

const IDENTITY_TOLERANCE: f64 = 1e-9;

/// For CompNode `i` and key shard `k`: the `b` rows (expsum and f per
/// head) and, per row `r`, one list per key index `x ≤ r` holding the
/// contribution `x` would make for every vocabulary token.
#[derive(Debug, Clone)]
pub struct DecompositionLists {
    pub comp: usize,
    pub key_shard: usize,
    pub rows: IndexSet,
    pub b: Vec<Vec<f64>>,
    /// `lists[row]` = `(x, entries)` with `entries[token]` a `b`-shaped vector.
    pub lists: Vec<Vec<(usize, Vec<Vec<f64>>)>>,
}

impl DecompositionLists {
    pub fn build(model: &Model, view: &CompNodeView, key_shard: usize) -> Result<Self, AttackError> {
        let cfg = model.config();
        if cfg.vocab_size > MAX_LIST_VOCAB {
            return Err(AttackError::VocabTooLarge { vocab: cfg.vocab_size, limit: MAX_LIST_VOCAB });
        }
        let s_k = key_shard
            .checked_sub(1)
            .and_then(|k| view.s.get(k))
            .ok_or_else(|| AttackError::ShapeMismatch(format!("no key shard {key_shard}")))?;
        let fvals = layer0_f_values(view)?;
        let f = &fvals[key_shard - 1];
        let positions: Vec<usize> = view.r.iter().map(slot).collect();
        let q = model.project_qkv(0, &model.embed(&view.tokens), &positions)?.q;
        let width = cfg.n_heads * (cfg.head_dim + 1);

        let tables: Vec<(usize, PositionTable)> =
            s_k.iter().map(|x| PositionTable::build(model, x).map(|t| (x, t))).collect::<Result<_, _>>()?;
        let mut b = Vec::with_capacity(view.r.len());
        let mut lists = Vec::with_capacity(view.r.len());
        for (row, r) in view.r.iter().enumerate() {
            b.push(f.row_vector(row));
            let row_lists = tables
                .iter()
                .take_while(|(x, _)| *x <= r)
                .map(|(x, table)| {
                    let entries = (0..cfg.vocab_size as TokenId)
                        .map(|token| {
                            let mut term = vec![0.0; width];
                            table.term(&q, row, token, &mut term);
                            term
                        })
                        .collect();
                    (*x, entries)
                })
                .collect();
            lists.push(row_lists);
        }
        Ok(Self { comp: view.comp, key_shard, rows: view.r.clone(), b, lists })
    }

    /// Largest row-wise relative error between `b` and the sums picked by
    /// `selection` (token id per 1-based index).
    pub fn residual(&self, selection: impl Fn(usize) -> TokenId) -> f64 {
        let mut worst = 0.0_f64;
        for (b, row_lists) in self.b.iter().zip(&self.lists) {
            let mut sum = vec![0.0; b.len()];
            for (x, entries) in row_lists {
                let pick = &entries[selection(*x) as usize];
                sum.iter_mut().zip(pick).for_each(|(a, p)| *a += p);
            }
            let scale = b.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            let err = b.iter().zip(&sum).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
            worst = worst.max(err / scale);
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub comp: usize,
    pub key_shard: usize,
    pub pass: bool,
    pub max_error: f64,
    /// The selection that reproduces `b`: the true token at each index of `S_k`.
    pub witness: Vec<RecoveredToken>,
}

/// Runs layer 0 of the protocol on `prompt` and checks that CompNode
/// `comp`'s partials against key shard `key_shard` decompose into the list
/// entries selected by the true tokens.
pub fn subset_decomposition_check(
    model: &Model,
    plan: &ShardPlan,
    prompt: &[TokenId],
    comp: usize,
    key_shard: usize,
) -> Result<DecompositionReport, AttackError> {
    let cfg = model.config();
    if cfg.vocab_size > MAX_LIST_VOCAB {
        return Err(AttackError::VocabTooLarge { vocab: cfg.vocab_size, limit: MAX_LIST_VOCAB });
    }
    let cluster = Cluster::new(model, plan.clone(), NetworkParams::default())?;
    let out = cluster.forward_capturing(prompt, Capture { views_at_layer: Some(0), keep_kv: false })?;
    let view = out
        .views
        .iter()
        .find(|v| v.comp == comp)
        .ok_or_else(|| AttackError::ShapeMismatch(format!("no CompNode {comp} with rows")))?;
    let lists = DecompositionLists::build(model, view, key_shard)?;
    let max_error = lists.residual(|x| prompt[slot(x)]);
    let witness = plan.s[key_shard - 1].iter().map(|x| RecoveredToken { index: x, token: prompt[slot(x)] }).collect();
    Ok(DecompositionReport { comp, key_shard, pass: max_error <= IDENTITY_TOLERANCE, max_error, witness })
}
