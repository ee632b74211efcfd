//! Token-sharded multi-party transformer inference.
//!
//! A prompt's token indices are split across CompNodes (`R_i`) and, more
//! finely, S shards (`S_j`). AttnNodes see pairs of S shards and compute
//! partial attention; CompNodes recombine the partials exactly. The crate
//! provides the reference model, plan construction and analysis, the
//! protocol itself, byte-exact communication accounting, and the attacks
//! used to evaluate how much each party can learn.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod model;
pub mod netsim;
pub mod protocol;
pub mod sharding;
pub mod tensor;

pub use model::{Model, ModelConfig, TokenId};
pub use netsim::NetworkParams;
pub use sharding::{build_plan, IndexSet, NodeId, ShardPlan, SplitFactor};
