//! Byte accounting for protocol runs and the analytic communication model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::sharding::{NodeId, ShardPlan};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetsimError {
    #[error("network parameter {0} must be positive")]
    NonPositive(&'static str),
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    /// Bytes per second, per node.
    pub bandwidth: f64,
    /// Seconds per stage.
    pub latency: f64,
    pub bytes_per_element: u64,
}

impl Default for NetworkParams {
    /// 2 Gbit/s, 0.38 ms, half precision.
    fn default() -> Self {
        Self { bandwidth: 2.5e8, latency: 0.38e-3, bytes_per_element: 2 }
    }
}

impl NetworkParams {
    pub fn validate(&self) -> Result<(), NetsimError> {
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(NetsimError::NonPositive("bandwidth"));
        }
        if !(self.latency > 0.0) || !self.latency.is_finite() {
            return Err(NetsimError::NonPositive("latency"));
        }
        if self.bytes_per_element == 0 {
            return Err(NetsimError::NonPositive("bytes_per_element"));
        }
        Ok(())
    }
}

/// The two communication stages of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// CompNodes → AttnNodes: projected q, k, v rows.
    Qkv,
    /// AttnNodes → CompNodes: (m, e, u) partials.
    Partials,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub layer: usize,
    pub stage: Stage,
    pub src: NodeId,
    pub dst: NodeId,
    /// Payload tensor elements; index labels are not counted.
    pub elements: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct Envelope<P> {
    pub src: NodeId,
    pub dst: NodeId,
    pub payload: P,
}

/// Collects messages for one stage and releases them in `(src, dst)` order.
/// Every send is appended to the trace.
#[derive(Debug)]
pub struct Router<P> {
    bytes_per_element: u64,
    pending: Vec<Envelope<P>>,
    trace: Vec<MessageRecord>,
}

impl<P> Router<P> {
    pub fn new(params: &NetworkParams) -> Self {
        Self { bytes_per_element: params.bytes_per_element, pending: Vec::new(), trace: Vec::new() }
    }

    pub fn send(&mut self, layer: usize, stage: Stage, src: NodeId, dst: NodeId, elements: u64, payload: P) {
        self.trace.push(MessageRecord { layer, stage, src, dst, elements, bytes: elements * self.bytes_per_element });
        self.pending.push(Envelope { src, dst, payload });
    }

    /// Barrier: hands out everything sent since the last call.
    pub fn deliver(&mut self) -> Vec<Envelope<P>> {
        let mut out = std::mem::take(&mut self.pending);
        out.sort_by_key(|e| (e.src, e.dst));
        out
    }

    pub fn trace(&self) -> &[MessageRecord] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<MessageRecord> {
        self.trace
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedBytes {
    pub qkv_per_layer: u64,
    pub partials_per_layer: u64,
    pub per_layer: u64,
    pub total: u64,
}

/// `beta·F·(2dH + 2dH_KV + 2H)·N` per layer, split into its two stages.
pub fn predicted_comm_bytes(config: &ModelConfig, plan: &ShardPlan, params: &NetworkParams) -> PredictedBytes {
    let beta = plan.beta as u64;
    let f = params.bytes_per_element;
    let n = plan.n as u64;
    let (d, h, hkv) = (config.head_dim as u64, config.n_heads as u64, config.n_kv_heads as u64);
    let qkv = beta * f * d * (h + 2 * hkv) * n;
    let partials = beta * f * (d + 2) * h * n;
    let per_layer = qkv + partials;
    debug_assert_eq!(per_layer, beta * f * (2 * d * h + 2 * d * hkv + 2 * h) * n);
    PredictedBytes {
        qkv_per_layer: qkv,
        partials_per_layer: partials,
        per_layer,
        total: per_layer * config.num_layers as u64,
    }
}

/// Per-layer time: `2·tau + beta·F·d(H+2H_KV)·max|R_i|/B + F(d+2)H·max|S_j|/B`.
pub fn predicted_comm_time(config: &ModelConfig, plan: &ShardPlan, params: &NetworkParams) -> f64 {
    let f = params.bytes_per_element as f64;
    let (d, h, hkv) = (config.head_dim as f64, config.n_heads as f64, config.n_kv_heads as f64);
    let beta = plan.beta as f64;
    2.0 * params.latency
        + beta * f * d * (h + 2.0 * hkv) * plan.max_r_len() as f64 / params.bandwidth
        + f * (d + 2.0) * h * plan.max_s_len() as f64 / params.bandwidth
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageBytes {
    pub qkv: u64,
    pub partials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub bytes_per_element: u64,
    pub per_layer_bytes: Vec<u64>,
    pub per_layer_stage_bytes: Vec<StageBytes>,
    pub total_bytes: u64,
    pub total_gb: f64,
    /// Directed transfers, summed over layers and stages.
    pub rounds: usize,
    pub per_layer_rounds: Vec<usize>,
    pub per_node_sent_bytes: BTreeMap<NodeId, u64>,
    /// Per stage: `tau + max over senders of bytes/B`.
    pub measured_time_s: f64,
    pub predicted_bytes: u64,
    pub predicted_per_layer_bytes: u64,
    pub predicted_gb: f64,
    pub predicted_time_s: f64,
    /// `total_bytes / predicted_bytes - 1`.
    pub excess_ratio: f64,
}

pub const BYTES_PER_GB: f64 = 1e9;

/// Sums a single-run trace and reconciles it against the analytic model.
pub fn measure_run(
    trace: &[MessageRecord],
    params: &NetworkParams,
    config: &ModelConfig,
    plan: &ShardPlan,
) -> Result<CommReport, NetsimError> {
    params.validate()?;
    let layers = config.num_layers;
    let mut per_layer_stage = vec![StageBytes::default(); layers];
    let mut per_layer_rounds = vec![0usize; layers];
    let mut per_node: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut per_sender: BTreeMap<(usize, Stage, NodeId), u64> = BTreeMap::new();
    let mut pairs = std::collections::BTreeSet::new();

    for rec in trace {
        if rec.layer >= layers {
            return Err(NetsimError::MalformedTrace(format!("record for layer {} but model has {layers}", rec.layer)));
        }
        if rec.bytes != rec.elements * params.bytes_per_element {
            return Err(NetsimError::MalformedTrace(format!(
                "{} -> {}: {} bytes for {} elements at F = {}",
                rec.src, rec.dst, rec.bytes, rec.elements, params.bytes_per_element
            )));
        }
        let expected_src_is_comp = rec.stage == Stage::Qkv;
        if matches!(rec.src, NodeId::Comp(_)) != expected_src_is_comp {
            return Err(NetsimError::MalformedTrace(format!(
                "{:?} message from {} to {}",
                rec.stage, rec.src, rec.dst
            )));
        }
        match rec.stage {
            Stage::Qkv => per_layer_stage[rec.layer].qkv += rec.bytes,
            Stage::Partials => per_layer_stage[rec.layer].partials += rec.bytes,
        }
        if pairs.insert((rec.layer, rec.stage, rec.src, rec.dst)) {
            per_layer_rounds[rec.layer] += 1;
        }
        *per_node.entry(rec.src).or_default() += rec.bytes;
        *per_sender.entry((rec.layer, rec.stage, rec.src)).or_default() += rec.bytes;
    }

    let mut stage_max: BTreeMap<(usize, Stage), u64> = BTreeMap::new();
    for ((layer, stage, _), bytes) in per_sender {
        let slot = stage_max.entry((layer, stage)).or_default();
        *slot = (*slot).max(bytes);
    }
    let measured_time_s = stage_max.values().map(|&b| params.latency + b as f64 / params.bandwidth).sum();

    let per_layer_bytes: Vec<u64> = per_layer_stage.iter().map(|s| s.qkv + s.partials).collect();
    let total_bytes = per_layer_bytes.iter().sum();
    let predicted = predicted_comm_bytes(config, plan, params);
    let predicted_time_s = predicted_comm_time(config, plan, params) * layers as f64;
    let excess_ratio = if predicted.total == 0 { 0.0 } else { total_bytes as f64 / predicted.total as f64 - 1.0 };
    Ok(CommReport {
        bytes_per_element: params.bytes_per_element,
        per_layer_bytes,
        per_layer_stage_bytes: per_layer_stage,
        total_bytes,
        total_gb: total_bytes as f64 / BYTES_PER_GB,
        rounds: per_layer_rounds.iter().sum(),
        per_layer_rounds,
        per_node_sent_bytes: per_node,
        measured_time_s,
        predicted_bytes: predicted.total,
        predicted_per_layer_bytes: predicted.per_layer,
        predicted_gb: predicted.total as f64 / BYTES_PER_GB,
        predicted_time_s,
        excess_ratio,
    })
}
