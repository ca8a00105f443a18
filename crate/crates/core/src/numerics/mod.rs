//! Dense f64 numerics and a small grouped-query-attention transformer.
//!
//! The same [`ToyModel`] acts as draft and target: drafts run
//! [`ToyModel::forward_sparse`] over a subset of the committed KV cache,
//! verification runs [`ToyModel::forward_full`] and records the attention
//! logits that the next critical-token selection is built from.
//!
//! Evaluation order is fixed (positions ascending, then layers, then heads,
//! then KV positions ascending) so a multi-token forward is bit-identical to
//! the same tokens fed one at a time, and a sparse forward whose critical set
//! covers every committed position is bit-identical to a full one.

mod kv;
mod planted;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::pillar::{AttentionScoreLog, CriticalTokenSet, ScoreRow};

pub use kv::{KvCache, KvEntry};
pub use planted::{planted_prompt, PlantedSpec};

/// Token id.
pub type Token = u32;

/// Standard deviation of every initial weight.
pub const INIT_STD: f64 = 0.08;

const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    /// Leading dimensions of each head that receive rotary position mixing.
    /// Defaults to `head_dim` rounded down to even; the remaining dimensions
    /// are position-independent.
    #[serde(default)]
    pub rope_dims: Option<usize>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(
        num_layers: usize,
        num_q_heads: usize,
        num_kv_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Self {
        Self {
            num_layers,
            num_q_heads,
            num_kv_heads,
            head_dim,
            vocab_size,
            rope_dims: None,
            seed,
        }
    }

    /// A config small enough for exhaustive property tests.
    pub fn tiny(seed: u64) -> Self {
        Self::new(2, 4, 2, 8, 64, seed)
    }

    pub fn hidden_dim(&self) -> usize {
        self.num_q_heads * self.head_dim
    }

    pub fn mlp_dim(&self) -> usize {
        2 * self.hidden_dim()
    }

    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    /// Width of one layer's keys (or values) for one token.
    pub fn kv_width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn rope_dims(&self) -> usize {
        self.rope_dims.unwrap_or(self.head_dim & !1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(config_err(format!("{name} must be at least 1")));
            }
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(config_err(format!(
                "num_q_heads ({}) is not a multiple of num_kv_heads ({})",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        let rope = self.rope_dims();
        if !rope.is_multiple_of(2) || rope > self.head_dim {
            return Err(config_err(format!(
                "rope_dims ({rope}) must be even and at most head_dim ({})",
                self.head_dim
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(config_err("vocab_size does not fit a token id"));
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Matrix {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) data: Vec<f64>,
}

impl Matrix {
    fn sampled(rows: usize, cols: usize, rng: &mut Xoshiro256PlusPlus, dist: &Normal<f64>) -> Self {
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub(crate) fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn set_col(&mut self, c: usize, v: f64) {
        for r in 0..self.rows {
            self.data[r * self.cols + c] = v;
        }
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Per-layer weights. Field order is the fill order at init.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerWeights {
    pub(crate) attn_k: Matrix,
    pub(crate) attn_o: Matrix,
    pub(crate) attn_q: Matrix,
    pub(crate) attn_v: Matrix,
    pub(crate) mlp_down: Matrix,
    pub(crate) mlp_up: Matrix,
}

/// Logits over the vocabulary for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn greedy_token(logits: &Logits) -> Token {
    let mut best = 0usize;
    for (i, &v) in logits.values().iter().enumerate().skip(1) {
        if v > logits.values()[best] {
            best = i;
        }
    }
    best as Token
}

/// Output of [`ToyModel::forward_full`].
#[derive(Debug, Clone)]
pub struct FullForward {
    /// One entry per new token; entry `i` predicts the token after `new_tokens[i]`.
    pub logits: Vec<Logits>,
    /// KV entries for the new tokens, in order.
    pub entries: Vec<KvEntry>,
    pub scores: AttentionScoreLog,
}

/// Which committed positions a query may attend to. Positions past the
/// committed cache (fresh or in-flight tokens) are always visible.
enum Visible<'a> {
    All,
    Subset(&'a [usize]),
}

/// The deterministic toy transformer shared by draft and target.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    pub(crate) embedding: Matrix,
    pub(crate) layers: Vec<LayerWeights>,
    inv_freq: Vec<f64>,
}

impl ToyModel {
    /// Builds a model from `config.seed`.
    ///
    /// Weights are drawn from N(0, 0.08²) with a xoshiro256++ generator seeded
    /// by the config seed. Fill order: the token embedding first, then each
    /// layer in order with its matrices in name order (`attn_k`, `attn_o`,
    /// `attn_q`, `attn_v`, `mlp_down`, `mlp_up`), every matrix row-major.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
        let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
        let hidden = config.hidden_dim();
        let kv = config.kv_width();
        let mlp = config.mlp_dim();

        let embedding = Matrix::sampled(config.vocab_size, hidden, &mut rng, &dist);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_k: Matrix::sampled(kv, hidden, &mut rng, &dist),
                attn_o: Matrix::sampled(hidden, hidden, &mut rng, &dist),
                attn_q: Matrix::sampled(hidden, hidden, &mut rng, &dist),
                attn_v: Matrix::sampled(kv, hidden, &mut rng, &dist),
                mlp_down: Matrix::sampled(hidden, mlp, &mut rng, &dist),
                mlp_up: Matrix::sampled(mlp, hidden, &mut rng, &dist),
            })
            .collect();

        let rope = config.rope_dims();
        let inv_freq = (0..rope / 2)
            .map(|i| ROPE_BASE.powf(-(2.0 * i as f64) / rope as f64))
            .collect();

        Ok(Self {
            config,
            embedding,
            layers,
            inv_freq,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn empty_cache(&self) -> KvCache {
        KvCache::new(self.config.num_layers, self.config.kv_width())
    }

    /// Maps each query head to its KV head.
    pub fn group_map(&self) -> Vec<usize> {
        let g = self.config.group_size();
        (0..self.config.num_q_heads).map(|h| h / g).collect()
    }

    /// Causal full attention for `new_tokens` appended after `committed`.
    pub fn forward_full(&self, committed: &KvCache, new_tokens: &[Token]) -> Result<FullForward> {
        if new_tokens.is_empty() {
            return Err(contract_err("forward_full needs at least one new token"));
        }
        self.check_cache(committed)?;
        let base = committed.len();
        let mut local = self.empty_cache();
        let mut logits = Vec::with_capacity(new_tokens.len());
        let mut entries = Vec::with_capacity(new_tokens.len());
        let mut rows = Vec::new();
        for &token in new_tokens {
            self.check_token(token)?;
            let (l, entry) =
                self.decode_position(token, committed, &local, &Visible::All, Some(&mut rows));
            local.push(&entry)?;
            logits.push(l);
            entries.push(entry);
        }
        Ok(FullForward {
            logits,
            entries,
            scores: AttentionScoreLog {
                kv_len: base + new_tokens.len(),
                rows,
            },
        })
    }

    /// One decoding step attending only to `critical` committed positions,
    /// every entry in `fresh` (positions following the committed cache) and
    /// the new token itself.
    pub fn forward_sparse(
        &self,
        committed: &KvCache,
        critical: &CriticalTokenSet,
        fresh: &KvCache,
        token: Token,
    ) -> Result<(Logits, KvEntry)> {
        self.check_cache(committed)?;
        self.check_cache(fresh)?;
        self.check_token(token)?;
        let positions = critical.positions();
        if let Some(&last) = positions.last() {
            if last >= committed.len() {
                return Err(contract_err(format!(
                    "critical position {last} outside committed cache of length {}",
                    committed.len()
                )));
            }
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(contract_err("critical positions must be strictly ascending"));
        }
        Ok(self.decode_position(token, committed, fresh, &Visible::Subset(positions), None))
    }

    fn check_cache(&self, cache: &KvCache) -> Result<()> {
        if cache.num_layers() != self.config.num_layers || cache.width() != self.config.kv_width() {
            return Err(contract_err(format!(
                "cache shape ({} layers, width {}) does not match model ({} layers, width {})",
                cache.num_layers(),
                cache.width(),
                self.config.num_layers,
                self.config.kv_width()
            )));
        }
        Ok(())
    }

    fn check_token(&self, token: Token) -> Result<()> {
        if token as usize >= self.config.vocab_size {
            return Err(contract_err(format!(
                "token {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn apply_rope(&self, x: &mut [f64], pos: usize) {
        for (i, &f) in self.inv_freq.iter().enumerate() {
            let angle = pos as f64 * f;
            let (sin, cos) = angle.sin_cos();
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * cos - b * sin;
            x[2 * i + 1] = a * sin + b * cos;
        }
    }

    /// Runs every layer for one token at position `committed.len() + extra.len()`.
    fn decode_position(
        &self,
        token: Token,
        committed: &KvCache,
        extra: &KvCache,
        visible: &Visible<'_>,
        mut log: Option<&mut Vec<ScoreRow>>,
    ) -> (Logits, KvEntry) {
        let cfg = &self.config;
        let hd = cfg.head_dim;
        let group = cfg.group_size();
        let width = cfg.kv_width();
        let base = committed.len();
        let pos = base + extra.len();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = self.embedding.row(token as usize).to_vec();
        let mut entry = KvEntry::zeroed(cfg.num_layers, width);

        // Visible committed positions in ascending order.
        let all_committed: Vec<usize>;
        let committed_positions: &[usize] = match visible {
            Visible::All => {
                all_committed = (0..base).collect();
                &all_committed
            }
            Visible::Subset(p) => p,
        };
        let n_ctx = committed_positions.len() + extra.len() + 1;
        let mut scores = vec![0.0; n_ctx];

        for (layer, w) in self.layers.iter().enumerate() {
            let h = rms_norm(&x);
            let mut q = w.attn_q.matvec(&h);
            let mut k = w.attn_k.matvec(&h);
            let v = w.attn_v.matvec(&h);
            for head in 0..cfg.num_q_heads {
                self.apply_rope(&mut q[head * hd..(head + 1) * hd], pos);
            }
            for head in 0..cfg.num_kv_heads {
                self.apply_rope(&mut k[head * hd..(head + 1) * hd], pos);
            }
            entry.keys_mut(layer).copy_from_slice(&k);
            entry.values_mut(layer).copy_from_slice(&v);

            let mut attn = vec![0.0; cfg.hidden_dim()];
            for qh in 0..cfg.num_q_heads {
                let kvh = qh / group;
                let qv = &q[qh * hd..(qh + 1) * hd];
                let head_slice = |buf: &[f64]| -> Vec<f64> { buf[kvh * hd..(kvh + 1) * hd].to_vec() };
                let self_key = head_slice(&k);
                let self_val = head_slice(&v);

                let mut idx = 0;
                for &p in committed_positions {
                    scores[idx] = dot(qv, committed.key(layer, p, kvh, hd)) * scale;
                    idx += 1;
                }
                for p in 0..extra.len() {
                    scores[idx] = dot(qv, extra.key(layer, p, kvh, hd)) * scale;
                    idx += 1;
                }
                scores[idx] = dot(qv, &self_key) * scale;

                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                let mut acc = vec![0.0; hd];
                let mut accumulate = |s: f64, val: &[f64], sum: &mut f64| {
                    let wgt = (s - max).exp();
                    *sum += wgt;
                    for (a, vv) in acc.iter_mut().zip(val) {
                        *a += wgt * vv;
                    }
                };
                let mut idx = 0;
                for &p in committed_positions {
                    accumulate(scores[idx], committed.value(layer, p, kvh, hd), &mut sum);
                    idx += 1;
                }
                for p in 0..extra.len() {
                    accumulate(scores[idx], extra.value(layer, p, kvh, hd), &mut sum);
                    idx += 1;
                }
                accumulate(scores[idx], &self_val, &mut sum);

                for (o, a) in attn[qh * hd..(qh + 1) * hd].iter_mut().zip(&acc) {
                    *o = a / sum;
                }
                if let Some(rows) = log.as_deref_mut() {
                    rows.push(ScoreRow {
                        layer,
                        q_head: qh,
                        query_pos: pos,
                        logits: scores.clone(),
                        lse: max + sum.ln(),
                    });
                }
            }

            let o = w.attn_o.matvec(&attn);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            let h2 = rms_norm(&x);
            let up: Vec<f64> = w.mlp_up.matvec(&h2).into_iter().map(silu).collect();
            let down = w.mlp_down.matvec(&up);
            for (xi, di) in x.iter_mut().zip(&down) {
                *xi += di;
            }
        }

        let h = rms_norm(&x);
        (Logits(self.embedding.matvec(&h)), entry)
    }
}
