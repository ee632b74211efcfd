use std::collections::BTreeMap;

use super::{attn_pass, post_pass, pre_pass, AttnPartial, PostStats, ProtocolError};
use crate::attack::CompNodeView;
use crate::model::{Model, Qkv, TokenId};
use crate::netsim::{MessageRecord, NetworkParams, Router, Stage};
use crate::sharding::{slot, validate_plan, IndexSet, NodeId, PlanError, ShardPlan};
use crate::tensor::{HeadRows, Matrix};

/// A full set of CompNodes and merged AttnNodes for one plan.
#[derive(Debug, Clone)]
pub struct Cluster<'m> {
    model: &'m Model,
    plan: ShardPlan,
    params: NetworkParams,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Capture {
    /// Record every CompNode's received partials at this layer.
    pub views_at_layer: Option<usize>,
    /// Keep each AttnNode's assembled keys and values for later decoding.
    pub keep_kv: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardLogits {
    pub comp: usize,
    pub indices: IndexSet,
    pub rows: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<ShardLogits>,
    /// Reassembled `N × d_emb` hidden states; entry `l` is after `l` layers.
    pub hidden: Vec<Matrix>,
    pub trace: Vec<MessageRecord>,
    /// Worst post-pass statistics per layer.
    pub stats: Vec<PostStats>,
    pub views: Vec<CompNodeView>,
    pub(crate) kv: Vec<AttnNodeKv>,
}

impl ForwardOutput {
    /// Logits in token order.
    pub fn reassembled_logits(&self) -> Matrix {
        reassemble(self.logits.iter().map(|s| (&s.indices, &s.rows)))
    }
}

/// Keys and values an AttnNode has assembled, per layer.
#[derive(Debug, Clone)]
pub(crate) struct AttnNodeKv {
    pub pair: (usize, usize),
    pub layers: Vec<KvRows>,
}

#[derive(Debug, Clone)]
pub(crate) struct KvRows {
    pub indices: IndexSet,
    pub k: HeadRows,
    pub v: HeadRows,
}

pub(crate) enum Payload {
    Qkv { rows: IndexSet, qkv: Qkv },
    Partials(Vec<AttnPartial>),
}

pub(crate) fn qkv_elements(qkv: &Qkv) -> u64 {
    (qkv.q.len() + qkv.k.len() + qkv.v.len()) as u64
}

pub(crate) fn reassemble<'a>(parts: impl Iterator<Item = (&'a IndexSet, &'a Matrix)>) -> Matrix {
    let mut rows: Vec<(usize, &[f64])> = Vec::new();
    let mut cols = 0;
    for (indices, m) in parts {
        cols = m.cols();
        rows.extend(indices.iter().enumerate().map(|(r, idx)| (idx, m.row(r))));
    }
    rows.sort_by_key(|r| r.0);
    let mut out = Matrix::zeros(0, cols);
    for (_, row) in rows {
        out.push_row(row);
    }
    out
}

/// Positions of `subset` within `set`. Both sorted; `subset ⊆ set`.
pub(crate) fn positions_in(set: &IndexSet, subset: &IndexSet) -> Vec<usize> {
    subset.iter().map(|i| set.as_slice().binary_search(&i).expect("subset of assembled rows")).collect()
}

pub(crate) fn select_qkv(qkv: &Qkv, positions: &[usize]) -> Qkv {
    Qkv { q: qkv.q.select_rows(positions), k: qkv.k.select_rows(positions), v: qkv.v.select_rows(positions) }
}

/// Concatenates row blocks from several senders and sorts them by index.
pub(crate) fn assemble(
    parts: &[(&IndexSet, &Qkv)],
    heads: usize,
    kv_heads: usize,
    dim: usize,
) -> Result<(IndexSet, Qkv), ProtocolError> {
    let labels: Vec<usize> = parts.iter().flat_map(|(rows, _)| rows.iter()).collect();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&p| labels[p]);
    let indices = IndexSet::new(order.iter().map(|&p| labels[p]).collect())
        .map_err(|_| ProtocolError::Routing("duplicate rows delivered to an AttnNode".into()))?;
    let q = HeadRows::concat_rows(heads, dim, &parts.iter().map(|(_, x)| &x.q).collect::<Vec<_>>());
    let k = HeadRows::concat_rows(kv_heads, dim, &parts.iter().map(|(_, x)| &x.k).collect::<Vec<_>>());
    let v = HeadRows::concat_rows(kv_heads, dim, &parts.iter().map(|(_, x)| &x.v).collect::<Vec<_>>());
    Ok((indices, select_qkv(&Qkv { q, k, v }, &order)))
}

impl<'m> Cluster<'m> {
    pub fn new(model: &'m Model, plan: ShardPlan, params: NetworkParams) -> Result<Self, ProtocolError> {
        params.validate()?;
        let violations = validate_plan(&plan);
        if !violations.is_empty() {
            return Err(PlanError::Invalid(violations).into());
        }
        Ok(Self { model, plan, params })
    }

    pub fn plan(&self) -> &ShardPlan {
        &self.plan
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn forward(&self, tokens: &[TokenId]) -> Result<ForwardOutput, ProtocolError> {
        self.forward_capturing(tokens, Capture::default())
    }

    pub fn forward_capturing(&self, tokens: &[TokenId], capture: Capture) -> Result<ForwardOutput, ProtocolError> {
        let plan = &self.plan;
        let model = self.model;
        let cfg = *model.config();
        if tokens.len() != plan.n {
            return Err(ProtocolError::LengthMismatch { plan_n: plan.n, tokens: tokens.len() });
        }
        model.check_tokens(tokens)?;

        // Each CompNode starts from the embeddings of its own tokens.
        let mut hidden: Vec<Matrix> =
            plan.r.iter().map(|r| model.embed(&r.iter().map(|i| tokens[slot(i)]).collect::<Vec<_>>())).collect();
        let mut all_hidden = vec![reassemble(plan.r.iter().zip(&hidden))];
        let mut router: Router<Payload> = Router::new(&self.params);
        let mut stats = Vec::with_capacity(cfg.num_layers);
        let mut views = Vec::new();
        let mut kv: Vec<AttnNodeKv> =
            plan.attn_pairs.iter().map(|&pair| AttnNodeKv { pair, layers: Vec::new() }).collect();

        for layer in 0..cfg.num_layers {
            // Pre-pass and scatter.
            for (i, r) in plan.r.iter().enumerate() {
                let src = NodeId::Comp(i + 1);
                let qkv = pre_pass(model, layer, &hidden[i], r)?;
                for &(j, k) in &plan.attn_pairs {
                    let held = plan.s[j - 1].union(&plan.s[k - 1]);
                    let rows = r.intersection(&held);
                    if rows.is_empty() {
                        continue;
                    }
                    let part = select_qkv(&qkv, &positions_in(r, &rows));
                    router.send(
                        layer,
                        Stage::Qkv,
                        src,
                        NodeId::attn(j, k),
                        qkv_elements(&part),
                        Payload::Qkv { rows, qkv: part },
                    );
                }
            }

            // Attention pass.
            let mut inbox: BTreeMap<NodeId, Vec<(IndexSet, Qkv)>> = BTreeMap::new();
            for env in router.deliver() {
                match env.payload {
                    Payload::Qkv { rows, qkv } => inbox.entry(env.dst).or_default().push((rows, qkv)),
                    Payload::Partials(_) => return Err(ProtocolError::Routing("partials in the qkv stage".into())),
                }
            }
            for (slot_id, &(j, k)) in plan.attn_pairs.iter().enumerate() {
                let node = NodeId::attn(j, k);
                let received = inbox.remove(&node).unwrap_or_default();
                let refs: Vec<(&IndexSet, &Qkv)> = received.iter().map(|(r, q)| (r, q)).collect();
                let (held, qkv) = assemble(&refs, cfg.n_heads, cfg.n_kv_heads, cfg.head_dim)?;
                let expected = plan.s[j - 1].union(&plan.s[k - 1]);
                if held != expected {
                    return Err(ProtocolError::Routing(format!("{node} assembled {held}, expected {expected}")));
                }
                let blocks = attn_blocks(&held, &qkv, plan, j, k)?;
                for (i, r) in plan.r.iter().enumerate() {
                    let parts: Vec<AttnPartial> = blocks
                        .iter()
                        .map(|(q_shard, p)| p.restrict(&r.intersection(&plan.s[q_shard - 1])))
                        .filter(|p| !p.is_empty())
                        .collect();
                    if parts.is_empty() {
                        continue;
                    }
                    let elements = parts.iter().map(AttnPartial::elements).sum();
                    router.send(layer, Stage::Partials, node, NodeId::Comp(i + 1), elements, Payload::Partials(parts));
                }
                if capture.keep_kv {
                    kv[slot_id].layers.push(KvRows { indices: held, k: qkv.k, v: qkv.v });
                }
            }

            // Post-pass, residual and MLP.
            let mut received: BTreeMap<NodeId, Vec<AttnPartial>> = BTreeMap::new();
            for env in router.deliver() {
                match env.payload {
                    Payload::Partials(parts) => received.entry(env.dst).or_default().extend(parts),
                    Payload::Qkv { .. } => return Err(ProtocolError::Routing("qkv in the partials stage".into())),
                }
            }
            let mut layer_stats = PostStats::EMPTY;
            for (i, r) in plan.r.iter().enumerate() {
                let node = NodeId::Comp(i + 1);
                if r.is_empty() {
                    continue;
                }
                let parts = received.remove(&node).unwrap_or_default();
                let merged = merge_by_key_shard(&parts, plan.beta, cfg.n_heads, cfg.head_dim)?;
                let (o, st) = post_pass(model, layer, node, r, &merged, plan.beta)?;
                layer_stats = layer_stats.combine(st);
                if capture.views_at_layer == Some(layer) {
                    views.push(CompNodeView {
                        comp: i + 1,
                        layer,
                        r: r.clone(),
                        tokens: r.iter().map(|x| tokens[slot(x)]).collect(),
                        s: plan.s.clone(),
                        partials: merged,
                    });
                }
                hidden[i] = model.residual_mlp(layer, &hidden[i], &o)?;
            }
            stats.push(layer_stats);
            all_hidden.push(reassemble(plan.r.iter().zip(&hidden)));
        }

        let logits = plan
            .r
            .iter()
            .zip(&hidden)
            .enumerate()
            .map(|(i, (r, h))| ShardLogits { comp: i + 1, indices: r.clone(), rows: model.lm_head(h) })
            .collect();
        Ok(ForwardOutput {
            logits,
            hidden: all_hidden,
            trace: router.into_trace(),
            stats,
            views,
            kv: if capture.keep_kv { kv } else { Vec::new() },
        })
    }
}

/// The one or two blocks a merged AttnNode computes, tagged with their query shard.
fn attn_blocks(
    held: &IndexSet,
    qkv: &Qkv,
    plan: &ShardPlan,
    j: usize,
    k: usize,
) -> Result<Vec<(usize, AttnPartial)>, ProtocolError> {
    let mut dirs = vec![(j, k)];
    if j != k {
        dirs.push((k, j));
    }
    dirs.into_iter()
        .map(|(a, b)| {
            let (sa, sb) = (&plan.s[a - 1], &plan.s[b - 1]);
            let qa = qkv.q.select_rows(&positions_in(held, sa));
            let kb = positions_in(held, sb);
            let p = attn_pass(&qa, sa, &qkv.k.select_rows(&kb), &qkv.v.select_rows(&kb), sb, b)?;
            Ok((a, p))
        })
        .collect()
}

pub(crate) fn merge_by_key_shard(
    parts: &[AttnPartial],
    beta: usize,
    heads: usize,
    dim: usize,
) -> Result<Vec<AttnPartial>, ProtocolError> {
    let mut groups: Vec<Vec<AttnPartial>> = vec![Vec::new(); beta];
    for p in parts {
        let g = p
            .key_shard
            .checked_sub(1)
            .and_then(|s| groups.get_mut(s))
            .ok_or_else(|| ProtocolError::Routing(format!("key shard {} out of range", p.key_shard)))?;
        g.push(p.clone());
    }
    groups
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(s, g)| AttnPartial::merge(s + 1, heads, dim, g))
        .collect()
}
