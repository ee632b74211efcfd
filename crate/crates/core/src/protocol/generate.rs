//! Token-sharded KV-cached decoding.
//!
//! After the prompt pass, each new token touches one CompNode (its owner)
//! and the β AttnNodes whose pair contains the token's S shard. Earlier rows
//! never attend to a later token, so nothing else changes.

use serde::{Deserialize, Serialize};

use super::cluster::{positions_in, qkv_elements, Capture, Cluster, Payload};
use super::{attn_pass, post_pass, pre_pass, AttnPartial, ProtocolError};
use crate::model::{argmax, Model, ModelError, TokenId};
use crate::netsim::{MessageRecord, NetworkParams, Router, Stage};
use crate::sharding::{build_plan, IndexSet, NodeId, PlanError, ShardPlan, SplitFactor};
use crate::tensor::{HeadRows, Matrix};

/// A plan for at least `total` tokens, extended periodically so that every
/// appended index follows the same `(c, delta)` pattern as the prompt.
pub fn generation_plan(total: usize, c: usize, alpha: usize, split: SplitFactor) -> Result<ShardPlan, PlanError> {
    let delta = c.max(1) * alpha.max(1);
    let n = total.max(1).div_ceil(delta) * delta;
    build_plan(n, c, alpha, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the token fed in this step.
    pub index: usize,
    pub token: TokenId,
    pub comp: NodeId,
    pub active_attn: Vec<NodeId>,
    pub trace: Vec<MessageRecord>,
}

impl StepRecord {
    pub fn active_nodes(&self) -> usize {
        1 + self.active_attn.len()
    }
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub tokens: Vec<TokenId>,
    pub prefill_trace: Vec<MessageRecord>,
    pub steps: Vec<StepRecord>,
    /// Hidden rows of every processed token; entry `l` is after `l` layers.
    pub hidden: Vec<Matrix>,
}

fn last_row_token(logits: &[super::ShardLogits], index: usize) -> Result<TokenId, ProtocolError> {
    for s in logits {
        if let Ok(pos) = s.indices.as_slice().binary_search(&index) {
            return Ok(argmax(s.rows.row(pos)));
        }
    }
    Err(ProtocolError::Routing(format!("no CompNode holds logits for token {index}")))
}

fn check_lengths(model: &Model, plan: &ShardPlan, prompt: &[TokenId], n_new: usize) -> Result<(), ProtocolError> {
    model.check_tokens(prompt)?;
    let total = prompt.len() + n_new;
    if total > model.config().max_seq {
        return Err(ModelError::SequenceTooLong { len: total, max_seq: model.config().max_seq }.into());
    }
    let processed = prompt.len() + n_new.saturating_sub(1);
    if plan.n < processed {
        return Err(ProtocolError::LengthMismatch { plan_n: plan.n, tokens: processed });
    }
    Ok(())
}

/// Greedy decoding through the cluster with token-sharded KV caches.
///
/// `plan` must cover every index that gets fed back, i.e. at least
/// `prompt.len() + n_new - 1`; see [`generation_plan`].
pub fn cascade_generate(
    model: &Model,
    plan: &ShardPlan,
    params: &NetworkParams,
    prompt: &[TokenId],
    n_new: usize,
) -> Result<GenerationOutput, ProtocolError> {
    check_lengths(model, plan, prompt, n_new)?;
    let cfg = *model.config();
    let p = prompt.len();
    let cluster = Cluster::new(model, plan.truncated(p), *params)?;
    let prefill = cluster.forward_capturing(prompt, Capture { views_at_layer: None, keep_kv: true })?;
    let mut tokens = prompt.to_vec();
    let mut out = GenerationOutput {
        tokens: Vec::new(),
        prefill_trace: prefill.trace,
        steps: Vec::new(),
        hidden: prefill.hidden,
    };
    if n_new == 0 {
        out.tokens = tokens;
        return Ok(out);
    }
    tokens.push(last_row_token(&prefill.logits, p)?);
    let mut kv = prefill.kv;

    while tokens.len() < p + n_new {
        let index = tokens.len();
        let token = tokens[index - 1];
        let comp_id =
            plan.comp_owner(index).ok_or_else(|| ProtocolError::Cache(format!("no CompNode owns {index}")))?;
        let shard = plan.s_owner(index).ok_or_else(|| ProtocolError::Cache(format!("no S shard owns {index}")))?;
        let comp = NodeId::Comp(comp_id);
        let rows = IndexSet::new(vec![index])?;
        let active: Vec<usize> = (0..kv.len()).filter(|&n| kv[n].pair.0 == shard || kv[n].pair.1 == shard).collect();
        let mut router: Router<Payload> = Router::new(params);
        let mut h = model.embed(&[token]);
        out.hidden[0].push_row(h.row(0));

        for layer in 0..cfg.num_layers {
            let qkv = pre_pass(model, layer, &h, &rows)?;
            for &n in &active {
                let (a, b) = kv[n].pair;
                router.send(
                    layer,
                    Stage::Qkv,
                    comp,
                    NodeId::attn(a, b),
                    qkv_elements(&qkv),
                    Payload::Qkv { rows: rows.clone(), qkv: qkv.clone() },
                );
            }
            for env in router.deliver() {
                let Payload::Qkv { rows: new_rows, qkv: new } = env.payload else {
                    return Err(ProtocolError::Routing("partials in the qkv stage".into()));
                };
                let NodeId::Attn(a, b) = env.dst else {
                    return Err(ProtocolError::Routing(format!("qkv sent to {}", env.dst)));
                };
                let node = kv
                    .iter_mut()
                    .find(|n| n.pair == (a, b))
                    .ok_or_else(|| ProtocolError::Routing(format!("unknown AttnNode {}", env.dst)))?;
                let cache = node
                    .layers
                    .get_mut(layer)
                    .ok_or_else(|| ProtocolError::Cache(format!("{} has no layer {layer} cache", env.dst)))?;
                if cache.indices.last().is_some_and(|last| last >= index) {
                    return Err(ProtocolError::Cache(format!("{} already holds index {index}", env.dst)));
                }
                cache.indices = cache.indices.union(&new_rows);
                cache.k = HeadRows::concat_rows(cfg.n_kv_heads, cfg.head_dim, &[&cache.k, &new.k]);
                cache.v = HeadRows::concat_rows(cfg.n_kv_heads, cfg.head_dim, &[&cache.v, &new.v]);

                let key_shard = if a == shard { b } else { a };
                let key_rows = cache.indices.intersection(&plan.s[key_shard - 1]);
                let pos = positions_in(&cache.indices, &key_rows);
                let partial = attn_pass(
                    &new.q,
                    &new_rows,
                    &cache.k.select_rows(&pos),
                    &cache.v.select_rows(&pos),
                    &key_rows,
                    key_shard,
                )?;
                let elements = partial.elements();
                router.send(layer, Stage::Partials, env.dst, comp, elements, Payload::Partials(vec![partial]));
            }
            let mut partials: Vec<AttnPartial> = Vec::new();
            for env in router.deliver() {
                match env.payload {
                    Payload::Partials(p) => partials.extend(p),
                    Payload::Qkv { .. } => return Err(ProtocolError::Routing("qkv in the partials stage".into())),
                }
            }
            let (o, _) = post_pass(model, layer, comp, &rows, &partials, plan.beta)?;
            h = model.residual_mlp(layer, &h, &o)?;
            out.hidden[layer + 1].push_row(h.row(0));
        }

        let next = argmax(model.lm_head(&h).row(0));
        out.steps.push(StepRecord {
            index,
            token,
            comp,
            active_attn: active.iter().map(|&n| NodeId::attn(kv[n].pair.0, kv[n].pair.1)).collect(),
            trace: router.into_trace(),
        });
        tokens.push(next);
    }
    out.tokens = tokens;
    Ok(out)
}

/// Reference decoding that reruns the whole cluster on every prefix.
pub fn cascade_generate_uncached(
    model: &Model,
    plan: &ShardPlan,
    params: &NetworkParams,
    prompt: &[TokenId],
    n_new: usize,
) -> Result<Vec<TokenId>, ProtocolError> {
    check_lengths(model, plan, prompt, n_new)?;
    let mut tokens = prompt.to_vec();
    for _ in 0..n_new {
        let cluster = Cluster::new(model, plan.truncated(tokens.len()), *params)?;
        let out = cluster.forward(&tokens)?;
        tokens.push(last_row_token(&out.logits, tokens.len())?);
    }
    Ok(tokens)
}
