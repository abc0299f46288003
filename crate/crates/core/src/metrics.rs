//! Decode scoring, collision margins, timing tables and CSV/JSON output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{DecodeResult, Matcher};
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::model::{forward_to_layer, CandidateScratch, ModelWeights, PrefixCache};
use crate::numerics::l1_unchecked;

pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure on token ids.
pub fn rouge_l(pred: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    if pred.is_empty() || reference.is_empty() {
        return Err(Error::Score("ROUGE-L needs non-empty sequences".into()));
    }
    let lcs = lcs_len(pred, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / pred.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub perfect: bool,
    pub rouge_l: f64,
    pub lcs_len: usize,
    pub wall_ms: f64,
}

pub fn score(result: &DecodeResult, reference: &[TokenId]) -> Result<ScoreCard> {
    let perfect = result.tokens == reference;
    Ok(ScoreCard {
        perfect,
        rouge_l: if perfect {
            1.0
        } else {
            rouge_l(&result.tokens, reference)?
        },
        lcs_len: lcs_len(&result.tokens, reference),
        wall_ms: result.wall_ms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub prompts: usize,
    pub perfect_rate: f64,
    pub mean_rouge_l: f64,
}

pub fn summarize(cards: &[ScoreCard]) -> ScoreSummary {
    let n = cards.len().max(1) as f64;
    ScoreSummary {
        prompts: cards.len(),
        perfect_rate: cards.iter().filter(|c| c.perfect).count() as f64 / n,
        mean_rouge_l: cards.iter().map(|c| c.rouge_l).sum::<f64>() / n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub matcher: Matcher,
    pub layer: usize,
    pub include_positions: bool,
    pub states: usize,
    pub min_margin: f32,
    pub median_margin: f32,
    /// One margin per (prompt, position), in order.
    pub margins: Vec<f32>,
}

/// For every true state, the smallest matcher distance to the candidate
/// state of any wrong token under the true prefix and, with
/// `include_positions`, to the true token's state compared against rows
/// of other positions.
pub fn collision_report(
    weights: &ModelWeights,
    prompts: &[Vec<TokenId>],
    layer: usize,
    matcher: Matcher,
    include_positions: bool,
) -> Result<CollisionReport> {
    if prompts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let v = weights.config().vocab_size as TokenId;
    let mut scratch = CandidateScratch::new(weights.config());
    let mut state = vec![0.0f32; weights.config().d_model];
    let prep = |row: &[f32]| {
        let mut r = row.to_vec();
        if matcher == Matcher::SortedL1 {
            r.sort_unstable_by(f32::total_cmp);
        }
        r
    };
    let mut margins = Vec::new();
    for tokens in prompts {
        let truth = forward_to_layer(weights, tokens, layer)?;
        let rows: Vec<Vec<f32>> = truth.matrix.iter_rows().map(prep).collect();
        let mut cache = PrefixCache::new(weights, layer)?;
        for (i, &t) in tokens.iter().enumerate() {
            let mut margin = f32::INFINITY;
            for cand in 0..v {
                cache.candidate_state_into(weights, cand, &mut scratch, &mut state)?;
                let s = prep(&state);
                if cand != t {
                    margin = margin.min(l1_unchecked(&s, &rows[i]));
                } else if include_positions {
                    for (j, r) in rows.iter().enumerate() {
                        if j != i {
                            margin = margin.min(l1_unchecked(&s, r));
                        }
                    }
                }
            }
            margins.push(margin);
            cache.push_token(weights, t)?;
        }
    }
    let mut sorted = margins.clone();
    sorted.sort_by(f32::total_cmp);
    Ok(CollisionReport {
        matcher,
        layer,
        include_positions,
        states: margins.len(),
        min_margin: sorted[0],
        median_margin: sorted[sorted.len() / 2],
        margins,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub label: String,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub prompts: usize,
    pub mean_ms: f64,
}

pub struct TimingGroup<'a> {
    pub label: String,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub results: &'a [DecodeResult],
}

pub fn timing_report(groups: &[TimingGroup<'_>]) -> Result<Vec<TimingRow>> {
    let mut vocabs: Vec<usize> = groups.iter().map(|g| g.vocab_size).collect();
    vocabs.sort_unstable();
    vocabs.dedup();
    if vocabs.len() < 2 {
        return Err(Error::Domain(
            "timing report needs at least two vocabulary sizes".into(),
        ));
    }
    Ok(groups
        .iter()
        .map(|g| TimingRow {
            label: g.label.clone(),
            vocab_size: g.vocab_size,
            d_model: g.d_model,
            n_layers: g.n_layers,
            prompts: g.results.len(),
            mean_ms: g.results.iter().map(|r| r.wall_ms).sum::<f64>()
                / g.results.len().max(1) as f64,
        })
        .collect())
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
