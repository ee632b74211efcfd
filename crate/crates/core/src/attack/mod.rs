//! Adversaries against sharded inference.
//!
//! [`vocab_match`] inverts observed hidden rows by brute-force enumeration
//! of the unknown tokens between observations. [`layer0_meu_attack`] is the
//! CompNode attack on the `(m, e, u)` partials it receives at layer 0.
//! [`subset_decomposition_check`] verifies that those partials are sums of
//! per-token vocabulary lists.

mod decomposition;
mod layer0;
mod vocab;

pub use decomposition::{subset_decomposition_check, DecompositionLists, DecompositionReport};
pub use layer0::{layer0_f_values, layer0_meu_attack, FValues};
pub use vocab::vocab_match;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TokenId};
use crate::protocol::{AttnPartial, ProtocolError};
use crate::sharding::{feasibility, vocab_matching_cost, BigCost, Feasibility, IndexSet, PlanError};
use crate::tensor::Matrix;

pub const DEFAULT_PASS_CAP: u64 = 10_000_000;

/// Adversary compute budget: `V^t_max` forward passes, threshold `rho = t_max + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub t_max: usize,
    pub rho: usize,
    pub pass_cap: u64,
}

impl AttackBudget {
    pub fn from_rho(rho: usize) -> Result<Self, AttackError> {
        if rho == 0 {
            return Err(AttackError::InvalidBudget("rho must be at least 1".into()));
        }
        Ok(Self { t_max: rho - 1, rho, pass_cap: DEFAULT_PASS_CAP })
    }

    pub fn with_pass_cap(mut self, pass_cap: u64) -> Self {
        self.pass_cap = pass_cap;
        self
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.rho != self.t_max + 1 {
            return Err(AttackError::InvalidBudget(format!("rho = {} but t_max = {}", self.rho, self.t_max)));
        }
        if self.pass_cap == 0 {
            return Err(AttackError::InvalidBudget("pass_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hidden rows of one layer at known token indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardObservation {
    pub layer: usize,
    pub indices: IndexSet,
    pub rows: Matrix,
}

impl ShardObservation {
    /// Picks `indices` out of a full `N × d_emb` hidden matrix.
    pub fn from_hidden(layer: usize, hidden: &Matrix, indices: IndexSet) -> Self {
        let slots: Vec<usize> = indices.iter().map(crate::sharding::slot).collect();
        Self { layer, indices, rows: hidden.select_rows(&slots) }
    }
}

/// What CompNode `i` holds after a layer: its own tokens and the partials
/// for its rows against every key shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompNodeView {
    pub comp: usize,
    pub layer: usize,
    pub r: IndexSet,
    pub tokens: Vec<TokenId>,
    pub s: Vec<IndexSet>,
    /// One per key shard, ordered by shard, rows = `r`.
    pub partials: Vec<AttnPartial>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStatus {
    Recovered,
    InfeasibleBudget,
    CollisionSuspected,
    /// The best candidate missed the match tolerance.
    NoMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveredToken {
    pub index: usize,
    pub token: TokenId,
}

/// Outcome of enumerating one gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapOutcome {
    /// Unknown indices filled by this gap.
    pub indices: Vec<usize>,
    /// Observed index the match was scored against.
    pub anchor: usize,
    pub tokens: Vec<TokenId>,
    pub best_distance: f64,
    /// Second-best distance; the gap between the two is the match margin.
    pub runner_up_distance: Option<f64>,
    pub tolerance: f64,
    /// Candidates within tolerance.
    pub matches: usize,
    pub passes: u64,
}

/// The wrong tuple scored no worse than the true one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionCertificate {
    pub anchor: usize,
    pub recovered: Vec<TokenId>,
    pub truth: Vec<TokenId>,
    pub recovered_distance: f64,
    pub true_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub status: AttackStatus,
    pub recovered: Vec<RecoveredToken>,
    pub forward_pass_count: u64,
    pub gaps: Vec<GapOutcome>,
    /// First gap the budget refused, as `(first unknown index, size)`.
    pub limiting_gap: Option<(usize, usize)>,
    pub collision: Option<CollisionCertificate>,
}

impl AttackResult {
    pub(crate) fn empty() -> Self {
        Self {
            status: AttackStatus::Recovered,
            recovered: Vec::new(),
            forward_pass_count: 0,
            gaps: Vec::new(),
            limiting_gap: None,
            collision: None,
        }
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.recovered.iter().map(|r| r.token).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("pass cap of {cap} exhausted after {} passes", .partial.forward_pass_count)]
    PassCapExhausted { cap: u64, partial: Box<AttackResult> },
    #[error("vocabulary of {vocab} too large to materialize (limit {limit})")]
    VocabTooLarge { vocab: usize, limit: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// `V^gap` as a pass count, saturating.
pub(crate) fn candidate_count(vocab: usize, gap: usize) -> u64 {
    (vocab as u64).checked_pow(gap as u32).unwrap_or(u64::MAX)
}

/// Calls `f` on every tuple in `[0, vocab)^len` in lexicographic order.
pub(crate) fn for_each_tuple(vocab: usize, len: usize, mut f: impl FnMut(&[TokenId])) {
    let mut tuple = vec![0 as TokenId; len];
    loop {
        f(&tuple);
        let mut pos = len;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            tuple[pos] += 1;
            if (tuple[pos] as usize) < vocab {
                break;
            }
            tuple[pos] = 0;
        }
    }
}

pub(crate) fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Running argmin over an enumeration: first strict minimizer wins.
#[derive(Debug, Clone)]
pub(crate) struct Best {
    pub tuple: Vec<TokenId>,
    pub distance: f64,
    pub runner_up: f64,
    pub matches: usize,
    pub truth_distance: Option<f64>,
}

impl Best {
    pub fn new() -> Self {
        Self { tuple: Vec::new(), distance: f64::INFINITY, runner_up: f64::INFINITY, matches: 0, truth_distance: None }
    }

    pub fn offer(&mut self, tuple: &[TokenId], distance: f64, tolerance: f64, truth: Option<&[TokenId]>) {
        if distance <= tolerance {
            self.matches += 1;
        }
        if truth == Some(tuple) {
            self.truth_distance = Some(distance);
        }
        if distance < self.distance {
            self.runner_up = self.distance;
            self.distance = distance;
            self.tuple = tuple.to_vec();
        } else if distance < self.runner_up {
            self.runner_up = distance;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub cost: BigCost,
    /// Cost with the vocabulary restricted to a prior set of size `V0`.
    pub restricted: Option<BigCost>,
    pub feasibility: Feasibility,
}

/// Vocab-matching cost of observing `set`, its feasibility under `budget`,
/// and optionally the cost over a restricted vocabulary of size `v0`.
pub fn estimate_cost(
    set: &IndexSet,
    vocab: u64,
    budget: &AttackBudget,
    v0: Option<u64>,
) -> Result<CostEstimate, AttackError> {
    budget.validate()?;
    Ok(CostEstimate {
        cost: vocab_matching_cost(set, vocab)?,
        restricted: v0.map(|v0| vocab_matching_cost(set, v0)).transpose()?,
        feasibility: feasibility(set, budget)?,
    })
}
