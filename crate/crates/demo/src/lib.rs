//! WebAssembly entry points for the static demo page in `www/`.
//!
//! Every function returns a JSON string so the page needs no bindings
//! beyond `JSON.parse`.

use serde_json::json;
use wasm_bindgen::prelude::*;

use vocabmatch::attack::{decode, AttackConfig, FullScan};
use vocabmatch::data::{detokenize, tokenize};
use vocabmatch::defense::apply_nondeterminism;
use vocabmatch::model::{forward_to_layer, init_model, ModelConfig, ModelWeights};
use vocabmatch::numerics::SeededRng;
use vocabmatch::permutation::{apply, PermKind, PermutationSpec};
use vocabmatch::theory::{
    build_discorr_counterexample, mc_projection_separation_multi, separation_bound,
};

fn to_js(e: vocabmatch::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Analytic bound and a Monte Carlo estimate of the projection
/// separation probability.
#[wasm_bindgen]
pub fn separation(
    d: usize,
    sigma_w: f64,
    k: f64,
    trials: usize,
    seed: u64,
) -> Result<String, JsError> {
    let mut rng = SeededRng::new(seed);
    let est = mc_projection_separation_multi(d, sigma_w, &[k], trials, &mut rng).map_err(to_js)?;
    Ok(json!({
        "analytic": separation_bound(d, sigma_w, k),
        "estimate": est[0],
    })
    .to_string())
}

/// Distance correlations and estimator success rates of the
/// counterexample pair, without the raw samples.
#[wasm_bindgen]
pub fn discorr(rho: f64, delta: f64, n: usize, seed: u64) -> Result<String, JsError> {
    let mut rng = SeededRng::new(seed);
    let ce = build_discorr_counterexample(rho, delta, n, &mut rng).map_err(to_js)?;
    serde_json::to_string(&ce.report).map_err(|e| JsError::new(&e.to_string()))
}

pub const DEMO_LAYERS: usize = 2;

pub fn demo_model() -> vocabmatch::Result<ModelWeights> {
    init_model(&ModelConfig {
        d_model: 32,
        n_layers: DEMO_LAYERS,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 256,
        max_ctx: 64,
        init_seed: 0,
        init_std: 0.02,
    })
}

/// Runs `text` through a small seeded model, optionally permutes and
/// jitters the captured states, then decodes them by vocabulary matching.
pub fn run_inversion(
    text: &str,
    layer: usize,
    kind: &str,
    eta: f64,
    seed: u64,
) -> vocabmatch::Result<serde_json::Value> {
    let kind: PermKind = kind.parse()?;
    let w = demo_model()?;
    let tokens = tokenize(text)?;
    let rng = SeededRng::new(seed);
    let clean = forward_to_layer(&w, tokens.as_slice(), layer)?;
    let noisy = apply_nondeterminism(&clean, eta, &mut rng.substream("noise"))?;
    let spec = PermutationSpec::sample(
        kind,
        tokens.len(),
        w.config().d_model,
        rng.substream("perm").seed(),
    )?;
    let cap = apply(&spec, &noisy)?;
    let cfg = AttackConfig::new(layer, kind);
    let out = decode(&w, &cap, &cfg, &mut FullScan::new(w.config().vocab_size))?;
    let scanned: Vec<usize> = out.steps.iter().map(|s| s.scanned_count).collect();
    Ok(json!({
        "recovered": detokenize(&out.tokens),
        "exact": out.tokens.as_slice() == tokens.as_slice(),
        "scanned": scanned,
        "rows": out.matched_rows(),
    }))
}

#[wasm_bindgen]
pub fn invert(
    text: &str,
    layer: usize,
    kind: &str,
    eta: f64,
    seed: u64,
) -> Result<String, JsError> {
    run_inversion(text, layer, kind, eta, seed)
        .map(|v| v.to_string())
        .map_err(to_js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inversion_is_exact_without_noise() {
        for kind in ["none", "seq", "hidden", "factorized"] {
            let v = run_inversion("hello, world", 2, kind, 0.0, 3).unwrap();
            assert_eq!(v["recovered"], "hello, world", "{kind}");
            assert_eq!(v["exact"], true);
        }
    }

    #[test]
    fn bad_kind_is_an_error() {
        assert!(run_inversion("hi", 1, "diagonal", 0.0, 0).is_err());
        assert!(run_inversion("hi", 3, "none", 0.0, 0).is_err());
    }
}
