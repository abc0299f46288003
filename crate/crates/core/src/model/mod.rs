//! Deterministic toy decoder-only transformer.
//!
//! Pre-norm blocks (RMS norm, causal multi-head attention, GELU MLP) over a
//! residual stream that starts as token embedding plus learned absolute
//! positional embedding. The LM head is tied to the token embedding.
//! Hidden states are tapped at block outputs, layers numbered from 1.

mod forward;
mod stip;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

pub use forward::{
    final_logits, forward_candidates, forward_embeddings, forward_to_layer, logits_for_row,
    next_token_order, ranking_from_logits, CandidateScratch, PrefixCache,
};
pub use stip::{exposed_head, stip_inputs, stip_transform, StipKeys};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_layers: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::d_ff")]
    pub d_ff: usize,
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "defaults::max_ctx")]
    pub max_ctx: usize,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "defaults::init_std")]
    pub init_std: f32,
}

mod defaults {
    pub fn d_model() -> usize {
        64
    }
    pub fn n_layers() -> usize {
        4
    }
    pub fn n_heads() -> usize {
        4
    }
    pub fn d_ff() -> usize {
        128
    }
    pub fn vocab_size() -> usize {
        256
    }
    pub fn max_ctx() -> usize {
        128
    }
    pub fn init_std() -> f32 {
        0.02
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: defaults::d_model(),
            n_layers: defaults::n_layers(),
            n_heads: defaults::n_heads(),
            d_ff: defaults::d_ff(),
            vocab_size: defaults::vocab_size(),
            max_ctx: defaults::max_ctx(),
            init_seed: 0,
            init_std: defaults::init_std(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_ctx", self.max_ctx),
        ];
        if let Some((name, _)) = nonzero.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.n_layers {
            return Err(Error::Layer {
                layer,
                max: self.n_layers,
            });
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ff + 2 * d;
        self.vocab_size * d + self.max_ctx * d + self.n_layers * per_layer + d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    /// `V x d`; also the transposed LM head.
    embed: Arc<Matrix>,
    pos: Matrix,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f32>,
    fingerprint: u64,
}

pub fn init_model(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let (d, f, std) = (config.d_model, config.d_ff, config.init_std);
    let root = SeededRng::new(config.init_seed).substream("model-init");
    let gauss =
        |label: &str, rows, cols| Matrix::gaussian(rows, cols, std, &mut root.substream(label));
    let layers = (0..config.n_layers)
        .map(|i| LayerWeights {
            attn_norm: vec![1.0; d],
            wq: gauss(&format!("layer{i}.wq"), d, d),
            wk: gauss(&format!("layer{i}.wk"), d, d),
            wv: gauss(&format!("layer{i}.wv"), d, d),
            wo: gauss(&format!("layer{i}.wo"), d, d),
            mlp_norm: vec![1.0; d],
            w_up: gauss(&format!("layer{i}.w_up"), d, f),
            w_down: gauss(&format!("layer{i}.w_down"), f, d),
        })
        .collect();
    Ok(ModelWeights::from_parts(
        config.clone(),
        gauss("embed", config.vocab_size, d),
        gauss("pos", config.max_ctx, d),
        layers,
        vec![1.0; d],
    ))
}

impl ModelWeights {
    pub fn from_parts(
        config: ModelConfig,
        embed: Matrix,
        pos: Matrix,
        layers: Vec<LayerWeights>,
        final_norm: Vec<f32>,
    ) -> Self {
        let mut w = Self {
            config,
            embed: Arc::new(embed),
            pos,
            layers,
            final_norm,
            fingerprint: 0,
        };
        w.fingerprint = w.compute_fingerprint();
        w
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embed(&self) -> &Matrix {
        &self.embed
    }

    pub fn embed_shared(&self) -> Arc<Matrix> {
        Arc::clone(&self.embed)
    }

    /// The tied LM head, `W^T`, as the same storage viewed row-wise.
    pub fn lm_head(&self) -> &Matrix {
        &self.embed
    }

    pub fn pos(&self) -> &Matrix {
        &self.pos
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn final_norm(&self) -> &[f32] {
        &self.final_norm
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Same weights with the token-embedding table replaced.
    pub fn with_embedding(&self, embed: Matrix) -> Result<ModelWeights> {
        if embed.shape() != self.embed.shape() {
            return Err(Error::Dimension(format!(
                "embedding {:?}, model expects {:?}",
                embed.shape(),
                self.embed.shape()
            )));
        }
        Ok(Self::from_parts(
            self.config.clone(),
            embed,
            self.pos.clone(),
            self.layers.clone(),
            self.final_norm.clone(),
        ))
    }

    /// Applies `f` to every weight tensor (matrices and gain vectors).
    pub fn map_tensors(&self, mut f: impl FnMut(&mut [f32])) -> ModelWeights {
        let mut embed = (*self.embed).clone();
        let mut pos = self.pos.clone();
        let mut layers = self.layers.clone();
        let mut final_norm = self.final_norm.clone();
        f(embed.data_mut());
        f(pos.data_mut());
        for l in &mut layers {
            f(&mut l.attn_norm);
            f(l.wq.data_mut());
            f(l.wk.data_mut());
            f(l.wv.data_mut());
            f(l.wo.data_mut());
            f(&mut l.mlp_norm);
            f(l.w_up.data_mut());
            f(l.w_down.data_mut());
        }
        f(&mut final_norm);
        Self::from_parts(self.config.clone(), embed, pos, layers, final_norm)
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |vals: &[f32]| {
            for v in vals {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        feed(self.embed.data());
        feed(self.pos.data());
        for l in &self.layers {
            feed(&l.attn_norm);
            feed(l.wq.data());
            feed(l.wk.data());
            feed(l.wv.data());
            feed(l.wo.data());
            feed(&l.mlp_norm);
            feed(l.w_up.data());
            feed(l.w_down.data());
        }
        feed(&self.final_norm);
        h ^ (self.config.n_layers as u64).rotate_left(32)
    }
}

/// True when no two rows of `m` are equal after sorting each row.
pub fn sorted_rows_distinct(m: &Matrix) -> bool {
    let mut sorted: Vec<Vec<u32>> = m
        .iter_rows()
        .map(|r| {
            crate::numerics::sorted_copy(r)
                .into_iter()
                .map(f32::to_bits)
                .collect()
        })
        .collect();
    sorted.sort();
    sorted.windows(2).all(|w| w[0] != w[1])
}
