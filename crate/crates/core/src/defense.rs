//! Server-side noise channels: compute non-determinism on captured states,
//! Gaussian noise on input embeddings, a random embedding prefix, and
//! simulated weight quantization.

use serde::{Deserialize, Serialize};

use crate::capture::HiddenCapture;
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::model::{forward_embeddings, forward_to_layer, ModelWeights};
use crate::numerics::{Matrix, SeededRng};
use crate::permutation::PermKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    #[serde(default)]
    pub gaussian_sigma: f64,
    #[serde(default)]
    pub prefix: bool,
    #[serde(default)]
    pub prefix_seed: u64,
    #[serde(default)]
    pub quant_bits: Option<u8>,
    /// Under quantization, whether the attacker runs the quantized weights
    /// (the server-side setting) or the original ones.
    #[serde(default = "yes")]
    pub attacker_has_quantized: bool,
}

fn yes() -> bool {
    true
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: 0.0,
            prefix: false,
            prefix_seed: 0,
            quant_bits: None,
            attacker_has_quantized: true,
        }
    }
}

/// Server-side jitter `eta` plus the defenses applied before capture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub eta: f64,
    pub defense: DefenseConfig,
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::Config(
                "defense.gaussian_sigma must be non-negative".into(),
            ));
        }
        if let Some(b) = self.quant_bits {
            check_bits(b)?;
        }
        Ok(())
    }

    pub fn is_none(&self) -> bool {
        self.gaussian_sigma == 0.0 && !self.prefix && self.quant_bits.is_none()
    }

    /// Short label used in report tables.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.gaussian_sigma > 0.0 {
            parts.push(format!("gauss{}", self.gaussian_sigma));
        }
        if self.prefix {
            parts.push("prefix".to_string());
        }
        if let Some(b) = self.quant_bits {
            parts.push(format!("int{b}"));
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config("noise.eta must be non-negative".into()));
        }
        self.defense.validate()
    }
}

fn check_bits(bits: u8) -> Result<()> {
    match bits {
        4 | 8 => Ok(()),
        _ => Err(Error::Config(format!(
            "quant_bits must be 4 or 8, got {bits}"
        ))),
    }
}

/// Adds i.i.d. `N(0, eta^2)` to every entry; `eta = 0` leaves the capture
/// bitwise unchanged.
pub fn apply_nondeterminism(
    capture: &HiddenCapture,
    eta: f64,
    rng: &mut SeededRng,
) -> Result<HiddenCapture> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Domain(format!(
            "eta must be non-negative, got {eta}"
        )));
    }
    let mut out = capture.clone();
    if eta > 0.0 {
        for v in out.matrix.data_mut() {
            *v += (eta * rng.normal()) as f32;
        }
        out.noise_scale = capture.noise_scale.hypot(eta);
    }
    Ok(out)
}

fn token_embeddings(weights: &ModelWeights, tokens: &[TokenId]) -> Result<Matrix> {
    let v = weights.config().vocab_size;
    let rows = tokens
        .iter()
        .map(|&t| {
            if t as usize >= v {
                Err(Error::Domain(format!(
                    "token {t} outside vocabulary of {v}"
                )))
            } else {
                Ok(weights.embed().row(t as usize).to_vec())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

fn tagged(matrix: Matrix, weights: &ModelWeights, layer: usize) -> HiddenCapture {
    HiddenCapture {
        matrix,
        layer,
        model_fingerprint: Some(weights.fingerprint()),
        noise_scale: 0.0,
        perm_tag: PermKind::None,
    }
}

/// Capture of `tokens` after adding `N(0, sigma^2)` to every input
/// embedding entry.
pub fn gaussian_embedding_noise(
    weights: &ModelWeights,
    tokens: &[TokenId],
    layer: usize,
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<HiddenCapture> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!(
            "sigma must be non-negative, got {sigma}"
        )));
    }
    let mut emb = token_embeddings(weights, tokens)?;
    if sigma > 0.0 {
        for v in emb.data_mut() {
            *v += (sigma * rng.normal()) as f32;
        }
    }
    Ok(tagged(
        forward_embeddings(weights, &emb, layer)?,
        weights,
        layer,
    ))
}

/// Per-dimension mean and standard deviation of the embedding table.
pub fn embedding_moments(weights: &ModelWeights) -> (Vec<f64>, Vec<f64>) {
    let e = weights.embed();
    let (v, d) = e.shape();
    let mut mean = vec![0.0f64; d];
    for row in e.iter_rows() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= v as f64);
    let mut var = vec![0.0f64; d];
    for row in e.iter_rows() {
        for ((s, &m), &x) in var.iter_mut().zip(&mean).zip(row) {
            *s += (f64::from(x) - m).powi(2);
        }
    }
    let std = var.into_iter().map(|s| (s / v as f64).sqrt()).collect();
    (mean, std)
}

pub fn sample_prefix(weights: &ModelWeights, rng: &mut SeededRng) -> Vec<f32> {
    let (mean, std) = embedding_moments(weights);
    mean.iter()
        .zip(&std)
        .map(|(m, s)| (m + s * rng.normal()) as f32)
        .collect()
}

/// Capture of `tokens` run behind one random prefix embedding; the prefix
/// row is dropped, so row `i` is still the state of token `i`.
pub fn random_prefix(
    weights: &ModelWeights,
    tokens: &[TokenId],
    layer: usize,
    rng: &mut SeededRng,
) -> Result<HiddenCapture> {
    let max_ctx = weights.config().max_ctx;
    if tokens.len() + 1 > max_ctx {
        return Err(Error::ContextOverflow {
            len: tokens.len() + 1,
            max_ctx,
        });
    }
    let mut rows = vec![sample_prefix(weights, rng)];
    rows.extend(
        token_embeddings(weights, tokens)?
            .iter_rows()
            .map(<[f32]>::to_vec),
    );
    let full = forward_embeddings(weights, &Matrix::from_rows(&rows)?, layer)?;
    let d = full.cols();
    let kept = Matrix::from_vec(tokens.len(), d, full.data()[d..].to_vec())?;
    Ok(tagged(kept, weights, layer))
}

/// Per-tensor symmetric absmax quantization, dequantized back to f32.
pub fn quantize_tensor(values: &mut [f32], bits: u8) {
    let qmax = ((1u32 << (bits - 1)) - 1) as f32;
    let absmax = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if absmax == 0.0 {
        return;
    }
    let scale = absmax / qmax;
    for v in values {
        *v = (*v / scale).round().clamp(-qmax, qmax) * scale;
    }
}

pub fn quantize_model(weights: &ModelWeights, bits: u8) -> Result<ModelWeights> {
    check_bits(bits)?;
    Ok(weights.map_tensors(|t| quantize_tensor(t, bits)))
}

/// The attacker's and the server's model under `defense`.
pub fn defended_models(
    weights: &ModelWeights,
    defense: &DefenseConfig,
) -> Result<(ModelWeights, ModelWeights)> {
    match defense.quant_bits {
        Some(bits) => {
            let q = quantize_model(weights, bits)?;
            let attacker = if defense.attacker_has_quantized {
                q.clone()
            } else {
                weights.clone()
            };
            Ok((attacker, q))
        }
        None => Ok((weights.clone(), weights.clone())),
    }
}

/// What the server exposes for `tokens` at `layer` under `noise`, before
/// any permutation. Quantization is expected to be already applied to
/// `server`.
pub fn server_capture(
    server: &ModelWeights,
    tokens: &[TokenId],
    layer: usize,
    noise: &NoiseConfig,
    rng: &mut SeededRng,
) -> Result<HiddenCapture> {
    let d = &noise.defense;
    let base = if d.prefix {
        if d.gaussian_sigma > 0.0 {
            return Err(Error::Config(
                "prefix and gaussian noise cannot be combined".into(),
            ));
        }
        random_prefix(
            server,
            tokens,
            layer,
            &mut rng.substream_indexed("prefix", d.prefix_seed),
        )?
    } else if d.gaussian_sigma > 0.0 {
        gaussian_embedding_noise(server, tokens, layer, d.gaussian_sigma, rng)?
    } else {
        forward_to_layer(server, tokens, layer)?
    };
    apply_nondeterminism(&base, noise.eta, rng)
}
