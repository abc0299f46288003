//! Weight permutation for permuted-hidden-state private inference.
//!
//! The transformed model runs on a residual stream whose hidden dimension
//! is gathered by `pi` at every layer. Attention projections are also
//! shuffled on their inner dimension by a head-block-structured
//! permutation, MLP weights on the feed-forward dimension, and the tied
//! embedding/head on the vocabulary by `pi_v`. Applying `pi_c = pi_v^-1`
//! to the logits of the transformed model recovers the vanilla logits.

use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::permutation::{sample_perm, Permutation};

use super::{LayerWeights, ModelWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StipKeys {
    /// Hidden-dimension key on the residual stream.
    pub pi: Permutation,
    /// Output key on the vocabulary; must equal `pi_v.inverse()`.
    pub pi_c: Permutation,
    /// Hidden-dimension key of the head as exposed to the server.
    pub pi_d: Permutation,
    pub pi_v: Permutation,
    /// Inner attention dimension; maps whole head blocks to head blocks.
    pub attn: Permutation,
    pub ffn: Permutation,
}

impl StipKeys {
    pub fn identity(d: usize, d_ff: usize, vocab: usize) -> Self {
        Self {
            pi: Permutation::identity(d),
            pi_c: Permutation::identity(vocab),
            pi_d: Permutation::identity(d),
            pi_v: Permutation::identity(vocab),
            attn: Permutation::identity(d),
            ffn: Permutation::identity(d_ff),
        }
    }

    pub fn sample(weights: &ModelWeights, rng: &SeededRng) -> Result<Self> {
        let cfg = weights.config();
        let (d, hd) = (cfg.d_model, cfg.head_dim());
        let heads = sample_perm(cfg.n_heads, &mut rng.substream("stip.heads"))?;
        let mut within = rng.substream("stip.within");
        let mut attn = Vec::with_capacity(d);
        for h in 0..cfg.n_heads {
            let inner = sample_perm(hd, &mut within)?;
            attn.extend(inner.indices().iter().map(|&j| heads.at(h) * hd + j));
        }
        let pi_v = sample_perm(cfg.vocab_size, &mut rng.substream("stip.pi_v"))?;
        Ok(Self {
            pi: sample_perm(d, &mut rng.substream("stip.pi"))?,
            pi_c: pi_v.inverse(),
            pi_d: sample_perm(d, &mut rng.substream("stip.pi_d"))?,
            pi_v,
            attn: Permutation::new(attn)?,
            ffn: sample_perm(cfg.d_ff, &mut rng.substream("stip.ffn"))?,
        })
    }

    fn validate(&self, weights: &ModelWeights) -> Result<()> {
        let cfg = weights.config();
        let checks = [
            ("pi", self.pi.len(), cfg.d_model),
            ("pi_d", self.pi_d.len(), cfg.d_model),
            ("attn", self.attn.len(), cfg.d_model),
            ("ffn", self.ffn.len(), cfg.d_ff),
            ("pi_v", self.pi_v.len(), cfg.vocab_size),
            ("pi_c", self.pi_c.len(), cfg.vocab_size),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Key(format!(
                    "{name} has size {got}, expected {want}"
                )));
            }
        }
        if self.pi_c != self.pi_v.inverse() {
            return Err(Error::Key("pi_c is not the inverse of pi_v".into()));
        }
        let hd = cfg.head_dim();
        for block in self.attn.indices().chunks(hd) {
            let head = block[0] / hd;
            if block.iter().any(|&j| j / hd != head) {
                return Err(Error::Key("attention key splits a head".into()));
            }
        }
        Ok(())
    }
}

/// `out[i][j] = m[rows[i]][cols[j]]`.
fn gather(m: &Matrix, rows: Option<&Permutation>, cols: Option<&Permutation>) -> Matrix {
    let (r, c) = m.shape();
    let mut out = Matrix::zeros(r, c);
    for i in 0..r {
        let src = m.row(rows.map_or(i, |p| p.at(i)));
        let dst = out.row_mut(i);
        match cols {
            Some(p) => p.apply_into(src, dst),
            None => dst.copy_from_slice(src),
        }
    }
    out
}

pub fn stip_transform(weights: &ModelWeights, keys: &StipKeys) -> Result<ModelWeights> {
    keys.validate(weights)?;
    let (pi, attn, ffn) = (&keys.pi, &keys.attn, &keys.ffn);
    let layers = weights
        .layers()
        .iter()
        .map(|l| LayerWeights {
            attn_norm: pi.apply(&l.attn_norm),
            wq: gather(&l.wq, Some(pi), Some(attn)),
            wk: gather(&l.wk, Some(pi), Some(attn)),
            wv: gather(&l.wv, Some(pi), Some(attn)),
            wo: gather(&l.wo, Some(attn), Some(pi)),
            mlp_norm: pi.apply(&l.mlp_norm),
            w_up: gather(&l.w_up, Some(pi), Some(ffn)),
            w_down: gather(&l.w_down, Some(ffn), Some(pi)),
        })
        .collect();
    Ok(ModelWeights::from_parts(
        weights.config().clone(),
        gather(weights.embed(), Some(&keys.pi_v), Some(pi)),
        gather(weights.pos(), None, Some(pi)),
        layers,
        pi.apply(weights.final_norm()),
    ))
}

/// What the user sends for `tokens`: each embedding row gathered by `pi`.
pub fn stip_inputs(weights: &ModelWeights, keys: &StipKeys, tokens: &[TokenId]) -> Result<Matrix> {
    let d = weights.config().d_model;
    if keys.pi.len() != d {
        return Err(Error::Key(format!(
            "pi has size {}, expected {d}",
            keys.pi.len()
        )));
    }
    let mut out = Matrix::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        if t as usize >= weights.config().vocab_size {
            return Err(Error::Domain(format!("token {t} outside vocabulary")));
        }
        keys.pi
            .apply_into(weights.embed().row(t as usize), out.row_mut(i));
    }
    Ok(out)
}

/// The `d x V` LM head as the server holds it: column `u` is embedding row
/// `pi_v[u]` gathered by `pi_d`.
pub fn exposed_head(weights: &ModelWeights, keys: &StipKeys) -> Result<Matrix> {
    let cfg = weights.config();
    if keys.pi_d.len() != cfg.d_model || keys.pi_v.len() != cfg.vocab_size {
        return Err(Error::Key("head keys do not fit the model".into()));
    }
    Ok(gather(weights.embed(), Some(&keys.pi_v), Some(&keys.pi_d)).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::final_logits;
    use crate::model::{forward_embeddings, forward_to_layer, init_model, ModelConfig};

    fn model() -> ModelWeights {
        init_model(&ModelConfig {
            d_model: 32,
            n_layers: 3,
            n_heads: 4,
            d_ff: 48,
            vocab_size: 256,
            max_ctx: 32,
            init_seed: 4,
            init_std: 0.02,
        })
        .unwrap()
    }

    #[test]
    fn identity_keys_leave_weights_unchanged() {
        let w = model();
        let keys = StipKeys::identity(32, 48, 256);
        assert_eq!(stip_transform(&w, &keys).unwrap(), w);
    }

    #[test]
    fn equivariant_hiddens_and_logits() {
        let w = model();
        let keys = StipKeys::sample(&w, &SeededRng::new(8)).unwrap();
        let wp = stip_transform(&w, &keys).unwrap();
        let toks: Vec<u32> = b"permuted inference".iter().map(|&b| b.into()).collect();
        let inputs = stip_inputs(&w, &keys, &toks).unwrap();
        for layer in 1..=3 {
            let vanilla = forward_to_layer(&w, &toks, layer).unwrap().matrix;
            let expect = crate::permutation::PermutationSpec {
                kind: crate::permutation::PermKind::Hidden,
                seq: None,
                hidden: Some(vec![keys.pi.clone(); toks.len()]),
                seed: 0,
            }
            .apply_matrix(&vanilla)
            .unwrap();
            let got = forward_embeddings(&wp, &inputs, layer).unwrap();
            assert!(got.max_abs_diff(&expect).unwrap() < 1e-5);
        }
        // the user's input rows are exactly the transformed table's rows
        let relabeled: Vec<u32> = toks
            .iter()
            .map(|&t| keys.pi_c.at(t as usize) as u32)
            .collect();
        for (i, &u) in relabeled.iter().enumerate() {
            assert_eq!(inputs.row(i), wp.embed().row(u as usize));
        }
        let vanilla = final_logits(&w, &toks).unwrap();
        let permuted = final_logits(&wp, &relabeled).unwrap();
        for i in 0..toks.len() {
            let restored = keys.pi_c.apply(permuted.row(i));
            let diff = restored
                .iter()
                .zip(vanilla.row(i))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(diff < 1e-5, "row {i}: {diff}");
        }
    }

    #[test]
    fn bad_keys_rejected() {
        let w = model();
        let mut keys = StipKeys::sample(&w, &SeededRng::new(1)).unwrap();
        keys.pi_c = Permutation::identity(256);
        assert!(matches!(stip_transform(&w, &keys), Err(Error::Key(_))));
        let mut keys = StipKeys::identity(32, 48, 256);
        keys.attn = Permutation::new((0..32).rev().collect()).unwrap();
        assert!(stip_transform(&w, &keys).is_ok());
        let mut split = (0..32).collect::<Vec<_>>();
        split.swap(7, 8);
        keys.attn = Permutation::new(split).unwrap();
        assert!(matches!(stip_transform(&w, &keys), Err(Error::Key(_))));
        let mut keys = StipKeys::identity(32, 48, 256);
        keys.pi = Permutation::identity(31);
        assert!(stip_transform(&w, &keys).is_err());
    }
}
