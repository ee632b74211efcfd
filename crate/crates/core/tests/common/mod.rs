#![allow(dead_code)]

use cascade_core::model::{Model, ModelConfig, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tiny config with `max_seq = 64`; `gqa` halves the key-value heads.
pub fn tiny(gqa: bool) -> ModelConfig {
    let base = ModelConfig::tiny();
    ModelConfig { n_kv_heads: if gqa { base.n_heads / 2 } else { base.n_heads }, ..base }
}

pub fn model(config: ModelConfig, seed: u64) -> Model {
    Model::new(config, seed).expect("valid config")
}

pub fn prompt(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.random_range(0..vocab as TokenId)).collect()
}

/// `|a - b|_max / |b|_max`, computed independently of the crate's helper.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0_f64;
    let mut scale = 0.0_f64;
    for (x, y) in a.iter().zip(b) {
        diff = diff.max((x - y).abs());
        scale = scale.max(y.abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
