//! Models whose attention mass sits entirely on planted anchor tokens.
//!
//! Two hidden coordinates are reserved: an *anchor* coordinate set only in the
//! anchor token's embedding, and a *common* coordinate set in every
//! embedding. Residual writes to both coordinates are zeroed, so they survive
//! every layer unchanged. The last (unrotated) dimension of every query head
//! reads the common coordinate and the last dimension of every key head reads
//! the anchor coordinate, both scaled by `strength`. Anchor logits then sit
//! roughly two thousand nats above everything else, `exp` underflows to an
//! exact zero for non-anchor positions, and any sparse forward whose critical
//! set contains every anchor is bit-identical to full attention.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{ModelConfig, Token, ToyModel};
use crate::error::{config_err, Result};

const ANCHOR_COORD: usize = 0;
const COMMON_COORD: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub anchor: Token,
    pub strength: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            anchor: 0,
            strength: 16.0,
        }
    }
}

impl PlantedSpec {
    /// [`ModelConfig::tiny`] with the last two dimensions of each head left
    /// unrotated.
    pub fn config(seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::tiny(seed);
        cfg.rope_dims = Some(cfg.head_dim - 2);
        cfg
    }
}

impl ToyModel {
    pub fn planted(config: ModelConfig, spec: &PlantedSpec) -> Result<Self> {
        config.validate()?;
        if config.rope_dims() >= config.head_dim {
            return Err(config_err("planted models need an unrotated head dimension"));
        }
        if config.hidden_dim() < 3 {
            return Err(config_err("planted models need a hidden dimension of at least 3"));
        }
        if spec.anchor as usize >= config.vocab_size {
            return Err(config_err("anchor token outside vocabulary"));
        }
        let hd = config.head_dim;
        let mut model = ToyModel::init(config)?;

        for t in 0..model.embedding.rows {
            let row = model.embedding.row_mut(t);
            if t == spec.anchor as usize {
                row[ANCHOR_COORD] = 1.0;
                row[COMMON_COORD] = 1.0;
            } else {
                row[ANCHOR_COORD] = 0.0;
                row[COMMON_COORD] = 2.0;
            }
        }

        for layer in &mut model.layers {
            for coord in [ANCHOR_COORD, COMMON_COORD] {
                layer.attn_o.row_mut(coord).fill(0.0);
                layer.mlp_down.row_mut(coord).fill(0.0);
                for m in [
                    &mut layer.attn_q,
                    &mut layer.attn_k,
                    &mut layer.attn_v,
                    &mut layer.mlp_up,
                ] {
                    m.set_col(coord, 0.0);
                }
            }
            for head in 0..layer.attn_q.rows / hd {
                let row = layer.attn_q.row_mut(head * hd + hd - 1);
                row.fill(0.0);
                row[COMMON_COORD] = spec.strength;
            }
            for head in 0..layer.attn_k.rows / hd {
                let row = layer.attn_k.row_mut(head * hd + hd - 1);
                row.fill(0.0);
                row[ANCHOR_COORD] = spec.strength;
            }
        }
        Ok(model)
    }
}

/// A prompt of `len` tokens holding exactly `anchors` anchor tokens, one of
/// them at position 0 so every query sees at least one anchor.
pub fn planted_prompt(
    spec: &PlantedSpec,
    config: &ModelConfig,
    len: usize,
    anchors: usize,
    seed: u64,
) -> Vec<Token> {
    assert!(anchors >= 1 && anchors <= len, "need 1 <= anchors <= len");
    assert!(config.vocab_size >= 2, "need a non-anchor token");
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut prompt: Vec<Token> = (0..len)
        .map(|_| loop {
            let t = rng.random_range(0..config.vocab_size as Token);
            if t != spec.anchor {
                break t;
            }
        })
        .collect();
    prompt[0] = spec.anchor;
    if len > 1 {
        for i in sample(&mut rng, len - 1, anchors - 1) {
            prompt[i + 1] = spec.anchor;
        }
    }
    prompt
}
