use crate::capture::HiddenCapture;
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::numerics::{dot, gelu, rmsnorm_into, softmax_in_place, vec_mat_into, Matrix};
use crate::permutation::PermKind;

use super::{ModelConfig, ModelWeights};

/// Scratch buffers for one row pushed through the blocks.
#[derive(Clone, Debug)]
pub struct CandidateScratch {
    x: Vec<f32>,
    normed: Vec<f32>,
    q: Vec<f32>,
    attn: Vec<f32>,
    proj: Vec<f32>,
    scores: Vec<f32>,
    ff: Vec<f32>,
    ff_out: Vec<f32>,
    // per-layer keys/values of the row, `depth x d` each
    k_rows: Vec<f32>,
    v_rows: Vec<f32>,
}

impl CandidateScratch {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            x: vec![0.0; d],
            normed: vec![0.0; d],
            q: vec![0.0; d],
            attn: vec![0.0; d],
            proj: vec![0.0; d],
            scores: vec![0.0; config.max_ctx],
            ff: vec![0.0; config.d_ff],
            ff_out: vec![0.0; d],
            k_rows: vec![0.0; config.n_layers * d],
            v_rows: vec![0.0; config.n_layers * d],
        }
    }
}

/// Keys and values of an already-decoded prefix, for every layer up to
/// `depth`, plus the prefix's own hidden rows at `depth`.
///
/// The same cache serves every single-token extension of the prefix, so a
/// full vocabulary sweep costs one row per candidate instead of a whole
/// sequence.
#[derive(Clone, Debug)]
pub struct PrefixCache {
    depth: usize,
    d: usize,
    fingerprint: u64,
    tokens: Vec<Option<TokenId>>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    hidden: Vec<f32>,
}

impl PrefixCache {
    pub fn new(weights: &ModelWeights, depth: usize) -> Result<Self> {
        weights.config().check_layer(depth)?;
        Ok(Self {
            depth,
            d: weights.config().d_model,
            fingerprint: weights.fingerprint(),
            tokens: Vec::new(),
            keys: vec![Vec::new(); depth],
            values: vec![Vec::new(); depth],
            hidden: Vec::new(),
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn model_fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Token ids of the prefix; `None` where a raw embedding was pushed.
    pub fn tokens(&self) -> &[Option<TokenId>] {
        &self.tokens
    }

    pub fn matches_prefix(&self, prefix: &[TokenId]) -> bool {
        self.tokens.len() == prefix.len()
            && self.tokens.iter().zip(prefix).all(|(a, b)| *a == Some(*b))
    }

    pub fn hidden_row(&self, i: usize) -> &[f32] {
        &self.hidden[i * self.d..(i + 1) * self.d]
    }

    pub fn hidden_matrix(&self) -> Matrix {
        Matrix::from_vec(self.len(), self.d, self.hidden.clone()).expect("cache rows are finite")
    }

    fn check(&self, weights: &ModelWeights) -> Result<()> {
        if weights.fingerprint() != self.fingerprint {
            return Err(Error::StaleCache(format!(
                "built for model {:016x}, used with {:016x}",
                self.fingerprint,
                weights.fingerprint()
            )));
        }
        let max_ctx = weights.config().max_ctx;
        if self.len() >= max_ctx {
            return Err(Error::ContextOverflow {
                len: self.len() + 1,
                max_ctx,
            });
        }
        Ok(())
    }

    pub fn push_token(&mut self, weights: &ModelWeights, token: TokenId) -> Result<()> {
        check_token(weights, token)?;
        let mut scratch = CandidateScratch::new(weights.config());
        self.push_row(
            weights,
            weights.embed().row(token as usize),
            Some(token),
            &mut scratch,
        )
    }

    pub fn push_embedding(&mut self, weights: &ModelWeights, embedding: &[f32]) -> Result<()> {
        if embedding.len() != self.d {
            return Err(Error::Dimension(format!(
                "embedding of length {}, model width {}",
                embedding.len(),
                self.d
            )));
        }
        let mut scratch = CandidateScratch::new(weights.config());
        self.push_row(weights, embedding, None, &mut scratch)
    }

    fn push_row(
        &mut self,
        weights: &ModelWeights,
        embedding: &[f32],
        token: Option<TokenId>,
        s: &mut CandidateScratch,
    ) -> Result<()> {
        self.check(weights)?;
        self.run(weights, embedding, s);
        let d = self.d;
        for l in 0..self.depth {
            self.keys[l].extend_from_slice(&s.k_rows[l * d..(l + 1) * d]);
            self.values[l].extend_from_slice(&s.v_rows[l * d..(l + 1) * d]);
        }
        self.hidden.extend_from_slice(&s.x);
        self.tokens.push(token);
        Ok(())
    }

    /// Layer-`depth` state of the last row of `prefix ‖ token` into `out`.
    pub fn candidate_state_into(
        &self,
        weights: &ModelWeights,
        token: TokenId,
        scratch: &mut CandidateScratch,
        out: &mut [f32],
    ) -> Result<()> {
        self.check(weights)?;
        check_token(weights, token)?;
        self.run(weights, weights.embed().row(token as usize), scratch);
        out.copy_from_slice(&scratch.x);
        Ok(())
    }

    /// Pushes one row through layers `1..=depth` attending over the cached
    /// prefix and itself. Leaves the output in `s.x` and the row's
    /// per-layer keys/values in `s.k_rows` / `s.v_rows`.
    fn run(&self, weights: &ModelWeights, embedding: &[f32], s: &mut CandidateScratch) {
        let cfg = weights.config();
        let (d, hd) = (cfg.d_model, cfg.head_dim());
        let n = self.len();
        let scale = 1.0 / (hd as f32).sqrt();
        for ((x, &e), &p) in s.x.iter_mut().zip(embedding).zip(weights.pos().row(n)) {
            *x = e + p;
        }
        for (l, layer) in weights.layers().iter().take(self.depth).enumerate() {
            let k_self = &mut s.k_rows[l * d..(l + 1) * d];
            let v_self = &mut s.v_rows[l * d..(l + 1) * d];
            rmsnorm_into(&s.x, &layer.attn_norm, &mut s.normed);
            vec_mat_into(&s.normed, &layer.wq, &mut s.q);
            vec_mat_into(&s.normed, &layer.wk, k_self);
            vec_mat_into(&s.normed, &layer.wv, v_self);

            let (keys, values) = (&self.keys[l], &self.values[l]);
            for h in 0..cfg.n_heads {
                let span = h * hd..(h + 1) * hd;
                let qh = &s.q[span.clone()];
                let scores = &mut s.scores[..=n];
                for (j, sc) in scores[..n].iter_mut().enumerate() {
                    *sc = dot(qh, &keys[j * d + h * hd..j * d + h * hd + hd]) * scale;
                }
                scores[n] = dot(qh, &k_self[span.clone()]) * scale;
                softmax_in_place(scores);
                let out = &mut s.attn[span.clone()];
                out.fill(0.0);
                for (j, &p) in scores[..n].iter().enumerate() {
                    let vj = &values[j * d + h * hd..j * d + h * hd + hd];
                    for (o, &v) in out.iter_mut().zip(vj) {
                        *o += p * v;
                    }
                }
                let p = scores[n];
                for (o, &v) in out.iter_mut().zip(&v_self[span]) {
                    *o += p * v;
                }
            }
            vec_mat_into(&s.attn, &layer.wo, &mut s.proj);
            for (x, &p) in s.x.iter_mut().zip(&s.proj) {
                *x += p;
            }

            rmsnorm_into(&s.x, &layer.mlp_norm, &mut s.normed);
            vec_mat_into(&s.normed, &layer.w_up, &mut s.ff);
            for v in s.ff.iter_mut() {
                *v = gelu(*v);
            }
            vec_mat_into(&s.ff, &layer.w_down, &mut s.ff_out);
            for (x, &f) in s.x.iter_mut().zip(&s.ff_out) {
                *x += f;
            }
        }
    }
}

fn check_token(weights: &ModelWeights, token: TokenId) -> Result<()> {
    let v = weights.config().vocab_size;
    if token as usize >= v {
        return Err(Error::Domain(format!(
            "token {token} outside vocabulary of {v}"
        )));
    }
    Ok(())
}

fn check_length(weights: &ModelWeights, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::EmptyInput);
    }
    let max_ctx = weights.config().max_ctx;
    if len > max_ctx {
        return Err(Error::ContextOverflow { len, max_ctx });
    }
    Ok(())
}

/// Layer-`layer` hidden states of `tokens` under causal attention.
pub fn forward_to_layer(
    weights: &ModelWeights,
    tokens: &[TokenId],
    layer: usize,
) -> Result<HiddenCapture> {
    weights.config().check_layer(layer)?;
    check_length(weights, tokens.len())?;
    let mut cache = PrefixCache::new(weights, layer)?;
    let mut scratch = CandidateScratch::new(weights.config());
    for &t in tokens {
        check_token(weights, t)?;
        cache.push_row(
            weights,
            weights.embed().row(t as usize),
            Some(t),
            &mut scratch,
        )?;
    }
    Ok(HiddenCapture {
        matrix: cache.hidden_matrix(),
        layer,
        model_fingerprint: Some(weights.fingerprint()),
        noise_scale: 0.0,
        perm_tag: PermKind::None,
    })
}

/// Forward pass from raw input embeddings (one row per position, before
/// the positional embedding is added).
pub fn forward_embeddings(
    weights: &ModelWeights,
    embeddings: &Matrix,
    layer: usize,
) -> Result<Matrix> {
    weights.config().check_layer(layer)?;
    check_length(weights, embeddings.rows())?;
    if embeddings.cols() != weights.config().d_model {
        return Err(Error::Dimension(format!(
            "embeddings of width {}, model width {}",
            embeddings.cols(),
            weights.config().d_model
        )));
    }
    let mut cache = PrefixCache::new(weights, layer)?;
    let mut scratch = CandidateScratch::new(weights.config());
    for row in embeddings.iter_rows() {
        cache.push_row(weights, row, None, &mut scratch)?;
    }
    Ok(cache.hidden_matrix())
}

/// Last-row layer state of `prefix ‖ v` for each candidate `v`.
pub fn forward_candidates(
    weights: &ModelWeights,
    cache: &PrefixCache,
    candidates: &[TokenId],
) -> Result<Vec<Vec<f32>>> {
    let mut scratch = CandidateScratch::new(weights.config());
    let d = weights.config().d_model;
    candidates
        .iter()
        .map(|&v| {
            let mut out = vec![0.0; d];
            cache.candidate_state_into(weights, v, &mut scratch, &mut out)?;
            Ok(out)
        })
        .collect()
}

/// Tied-head logits for one final-layer hidden row.
pub fn logits_for_row(weights: &ModelWeights, hidden: &[f32]) -> Vec<f32> {
    let mut normed = vec![0.0; hidden.len()];
    rmsnorm_into(hidden, weights.final_norm(), &mut normed);
    weights
        .lm_head()
        .iter_rows()
        .map(|w| dot(w, &normed))
        .collect()
}

/// Per-position next-token logits (`N x V`).
pub fn final_logits(weights: &ModelWeights, tokens: &[TokenId]) -> Result<Matrix> {
    let h = forward_to_layer(weights, tokens, weights.config().n_layers)?;
    let rows: Vec<Vec<f32>> = h
        .matrix
        .iter_rows()
        .map(|r| logits_for_row(weights, r))
        .collect();
    Matrix::from_rows(&rows)
}

/// Vocabulary sorted by descending logit, ties by ascending id.
pub fn ranking_from_logits(logits: &[f32]) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..logits.len() as TokenId).collect();
    ids.sort_by(|&a, &b| {
        logits[b as usize]
            .total_cmp(&logits[a as usize])
            .then(a.cmp(&b))
    });
    ids
}

/// Next-token proposal order from the model's own logits. An empty prefix
/// has no logits; it yields ascending id order.
pub fn next_token_order(weights: &ModelWeights, prefix: &[TokenId]) -> Result<Vec<TokenId>> {
    if prefix.is_empty() {
        return Ok((0..weights.config().vocab_size as TokenId).collect());
    }
    if prefix.len() >= weights.config().max_ctx {
        return Err(Error::ContextOverflow {
            len: prefix.len() + 1,
            max_ctx: weights.config().max_ctx,
        });
    }
    let h = forward_to_layer(weights, prefix, weights.config().n_layers)?;
    let last = h.matrix.row(prefix.len() - 1);
    Ok(ranking_from_logits(&logits_for_row(weights, last)))
}
