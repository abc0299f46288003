//! Vocabulary-matching decoders for unpermuted, sequence-permuted,
//! hidden-permuted and factorized-2D-permuted hidden states, and the
//! threshold tuner.
//!
//! All four decoders share one loop. Step `i` extends the decoded prefix
//! by every candidate token in proposal order, computes the candidate's
//! layer state from the prefix KV cache, and compares it with the target
//! row (unpermuted / hidden) or with every row not yet consumed (seq /
//! factorized). The first comparison under the threshold wins. If none
//! is under it, the overall minimum is taken, ties going to the lower
//! token id and then to the lower row index.

use crate::clock::Stopwatch;

use serde::{Deserialize, Serialize};

use crate::capture::HiddenCapture;
use crate::data::{ProposalTable, TokenId};
use crate::error::{Error, Result};
use crate::model::{
    logits_for_row, ranking_from_logits, CandidateScratch, ModelWeights, PrefixCache,
};
use crate::numerics::l1_unchecked;
use crate::permutation::{PermKind, PermutationSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matcher {
    L1,
    SortedL1,
}

impl Matcher {
    pub fn for_kind(kind: PermKind) -> Matcher {
        if kind.permutes_hidden() {
            Matcher::SortedL1
        } else {
            Matcher::L1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalMode {
    ModelLogits,
    Ngram,
    FullScan,
}

impl ProposalMode {
    pub fn name(self) -> &'static str {
        match self {
            ProposalMode::ModelLogits => "model-logits",
            ProposalMode::Ngram => "ngram",
            ProposalMode::FullScan => "full-scan",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub proposal: ProposalMode,
    /// Candidates scanned per step; `None` scans the whole vocabulary.
    pub max_proposal_depth: Option<usize>,
    pub matcher: Matcher,
    pub layer: usize,
}

impl AttackConfig {
    pub fn new(layer: usize, kind: PermKind) -> Self {
        Self {
            epsilon: f32::MIN_POSITIVE,
            proposal: ProposalMode::FullScan,
            max_proposal_depth: None,
            matcher: Matcher::for_kind(kind),
            layer,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f32) -> Self {
        self.epsilon = epsilon;
        self
    }

    fn depth(&self, vocab: usize) -> usize {
        self.max_proposal_depth.map_or(vocab, |d| d.clamp(1, vocab))
    }
}

/// Supplies the candidate order for the next token.
pub trait ProposalSource {
    fn rank(&mut self, prefix: &[TokenId]) -> Result<Vec<TokenId>>;
}

/// Ascending token ids.
#[derive(Clone, Debug)]
pub struct FullScan {
    vocab_size: usize,
}

impl FullScan {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size }
    }
}

impl ProposalSource for FullScan {
    fn rank(&mut self, _prefix: &[TokenId]) -> Result<Vec<TokenId>> {
        Ok((0..self.vocab_size as TokenId).collect())
    }
}

impl ProposalSource for ProposalTable {
    fn rank(&mut self, prefix: &[TokenId]) -> Result<Vec<TokenId>> {
        Ok(self.ranked(prefix))
    }
}

impl<P: ProposalSource + ?Sized> ProposalSource for &mut P {
    fn rank(&mut self, prefix: &[TokenId]) -> Result<Vec<TokenId>> {
        (**self).rank(prefix)
    }
}

/// The attacked model's own next-token logits, kept incremental with a
/// full-depth prefix cache.
pub struct ModelProposal<'a> {
    weights: &'a ModelWeights,
    cache: PrefixCache,
}

impl<'a> ModelProposal<'a> {
    pub fn new(weights: &'a ModelWeights) -> Result<Self> {
        Ok(Self {
            weights,
            cache: PrefixCache::new(weights, weights.config().n_layers)?,
        })
    }
}

impl ProposalSource for ModelProposal<'_> {
    fn rank(&mut self, prefix: &[TokenId]) -> Result<Vec<TokenId>> {
        if prefix.is_empty() {
            return Ok((0..self.weights.config().vocab_size as TokenId).collect());
        }
        let n = self.cache.len();
        let extends = n <= prefix.len()
            && self
                .cache
                .tokens()
                .iter()
                .zip(prefix)
                .all(|(a, b)| *a == Some(*b));
        if !extends {
            self.cache = PrefixCache::new(self.weights, self.weights.config().n_layers)?;
        }
        for &t in &prefix[self.cache.len()..] {
            self.cache.push_token(self.weights, t)?;
        }
        let last = self.cache.hidden_row(prefix.len() - 1);
        Ok(ranking_from_logits(&logits_for_row(self.weights, last)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcceptedBy {
    Threshold,
    MinFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: TokenId,
    pub scanned_count: usize,
    pub accepted_by: AcceptedBy,
    pub min_dist: f32,
    pub matched_row: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
    pub wall_ms: f64,
}

impl DecodeResult {
    pub fn matched_rows(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.matched_row).collect()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RowMode {
    /// Step `i` compares against row `i` only.
    Fixed,
    /// Step `i` compares against every row not yet matched.
    Remaining,
}

fn check_capture(
    weights: &ModelWeights,
    capture: &HiddenCapture,
    cfg: &AttackConfig,
    expected: PermKind,
) -> Result<()> {
    if capture.perm_tag != expected {
        return Err(Error::CaptureMismatch(format!(
            "capture is tagged {}, decoder expects {expected}",
            capture.perm_tag
        )));
    }
    if capture.layer != cfg.layer {
        return Err(Error::CaptureMismatch(format!(
            "capture from layer {}, attack configured for layer {}",
            capture.layer, cfg.layer
        )));
    }
    weights.config().check_layer(cfg.layer)?;
    if capture.dim() != weights.config().d_model {
        return Err(Error::Dimension(format!(
            "capture width {}, model width {}",
            capture.dim(),
            weights.config().d_model
        )));
    }
    if capture.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if capture.rows() > weights.config().max_ctx {
        return Err(Error::ContextOverflow {
            len: capture.rows(),
            max_ctx: weights.config().max_ctx,
        });
    }
    if expected.permutes_hidden() && cfg.matcher != Matcher::SortedL1 {
        return Err(Error::CaptureMismatch(
            "hidden-dimension permutations need the sorted-L1 matcher".into(),
        ));
    }
    if !(cfg.epsilon >= 0.0) {
        return Err(Error::Domain("epsilon must be non-negative".into()));
    }
    Ok(())
}

fn targets(capture: &HiddenCapture, matcher: Matcher) -> Vec<Vec<f32>> {
    capture
        .matrix
        .iter_rows()
        .map(|r| {
            let mut r = r.to_vec();
            if matcher == Matcher::SortedL1 {
                r.sort_unstable_by(f32::total_cmp);
            }
            r
        })
        .collect()
}

/// Lexicographic `(dist, token, row)` minimum.
#[derive(Clone, Copy)]
struct Best {
    dist: f32,
    token: TokenId,
    row: usize,
}

impl Best {
    fn none() -> Self {
        Self {
            dist: f32::INFINITY,
            token: TokenId::MAX,
            row: usize::MAX,
        }
    }

    #[inline]
    fn offer(&mut self, dist: f32, token: TokenId, row: usize) {
        if dist < self.dist || (dist == self.dist && (token, row) < (self.token, self.row)) {
            *self = Best { dist, token, row };
        }
    }
}

fn decode_rows(
    weights: &ModelWeights,
    capture: &HiddenCapture,
    cfg: &AttackConfig,
    proposal: &mut dyn ProposalSource,
    mode: RowMode,
) -> Result<DecodeResult> {
    let start = Stopwatch::start();
    let n = capture.rows();
    let d = weights.config().d_model;
    let depth = cfg.depth(weights.config().vocab_size);
    let targets = targets(capture, cfg.matcher);
    let mut cache = PrefixCache::new(weights, cfg.layer)?;
    let mut scratch = CandidateScratch::new(weights.config());
    let mut state = vec![0.0f32; d];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut tokens = Vec::with_capacity(n);
    let mut steps = Vec::with_capacity(n);

    for i in 0..n {
        let order = proposal.rank(&tokens)?;
        let fixed = [i];
        let rows: &[usize] = match mode {
            RowMode::Fixed => &fixed,
            RowMode::Remaining => &remaining,
        };
        let mut best = Best::none();
        let mut accepted = None;
        let mut scanned = 0;
        for &v in order.iter().take(depth) {
            cache.candidate_state_into(weights, v, &mut scratch, &mut state)?;
            if cfg.matcher == Matcher::SortedL1 {
                state.sort_unstable_by(f32::total_cmp);
            }
            scanned += 1;
            for &r in rows {
                let dist = l1_unchecked(&state, &targets[r]);
                best.offer(dist, v, r);
                if dist < cfg.epsilon {
                    accepted = Some((v, r));
                    break;
                }
            }
            if accepted.is_some() {
                break;
            }
        }
        let (token, row, by) = match accepted {
            Some((v, r)) => (v, r, AcceptedBy::Threshold),
            None => (best.token, best.row, AcceptedBy::MinFallback),
        };
        steps.push(StepRecord {
            token,
            scanned_count: scanned,
            accepted_by: by,
            min_dist: best.dist,
            matched_row: row,
        });
        tokens.push(token);
        if mode == RowMode::Remaining {
            remaining.retain(|&r| r != row);
        }
        if i + 1 < n {
            cache.push_token(weights, token)?;
        }
    }
    Ok(DecodeResult {
        tokens,
        steps,
        wall_ms: start.ms(),
    })
}

pub fn decode_unpermuted(
    weights: &ModelWeights,
    capture: &HiddenCapture,
    cfg: &AttackConfig,
    proposal: &mut dyn ProposalSource,
) -> Result<DecodeResult> {
    check_capture(weights, capture, cfg, PermKind::None)?;
    decode_rows(weights, capture, cfg, proposal, RowMode::Fixed)
}

pub fn decode_seq_perm(
    weights: &ModelWeights,
    capture: &HiddenCapture,
    cfg: &AttackConfig,
    proposal: &mut dyn ProposalSource,
) -> Result<DecodeResult> {
    check_capture(weights, capture, cfg, PermKind::Seq)?;
    decode_rows(weights, capture, cfg, proposal, RowMode::Remaining)
}

pub fn decode_hidden_perm(
    weights: &ModelWeights,
    capture: &HiddenCapture,
    cfg: &AttackConfig,
    proposal: &mut dyn ProposalSource,
) -> Result<DecodeResult> {
    check_capture(weights, capture, cfg, PermKind::Hidden)?;
    decode_rows(weights, capture, cfg, proposal, RowMode::Fixed)
}

pub fn decode_factorized(
    weights: &ModelWeights,
    capture: &HiddenCapture,
    cfg: &AttackConfig,
    proposal: &mut dyn ProposalSource,
) -> Result<DecodeResult> {
    check_capture(weights, capture, cfg, PermKind::Factorized)?;
    decode_rows(weights, capture, cfg, proposal, RowMode::Remaining)
}

/// Dispatches on the capture's permutation tag.
pub fn decode(
    weights: &ModelWeights,
    capture: &HiddenCapture,
    cfg: &AttackConfig,
    proposal: &mut dyn ProposalSource,
) -> Result<DecodeResult> {
    match capture.perm_tag {
        PermKind::None => decode_unpermuted(weights, capture, cfg, proposal),
        PermKind::Seq => decode_seq_perm(weights, capture, cfg, proposal),
        PermKind::Hidden => decode_hidden_perm(weights, capture, cfg, proposal),
        PermKind::Factorized => decode_factorized(weights, capture, cfg, proposal),
    }
}

/// A tuning prompt with its capture and the permutation that produced it.
#[derive(Clone, Debug)]
pub struct LabeledCapture {
    pub tokens: Vec<TokenId>,
    pub capture: HiddenCapture,
    pub spec: PermutationSpec,
}

impl LabeledCapture {
    /// Capture row holding the state of true position `pos`.
    fn row_of_position(&self, pos: usize) -> usize {
        match &self.spec.seq {
            Some(sigma) => sigma.inverse().at(pos),
            None => pos,
        }
    }
}

/// Per-step statistics along the ground-truth decoding path, enough to
/// decide for any threshold whether the decoder stays on that path.
#[derive(Clone, Debug, PartialEq)]
struct StepTrace {
    /// Distance of the true candidate to the true row.
    true_dist: f32,
    /// Minimum distance of any candidate ranked before the true token.
    before_min: f32,
    /// Minimum distance of the true candidate to rows preceding the true
    /// row in scan order.
    row_before_min: f32,
    /// Whether the lexicographic overall minimum is (true token, true row).
    argmin_true: bool,
    global_min: f32,
    in_depth: bool,
}

impl StepTrace {
    fn stays_on_path(&self, eps: f32) -> bool {
        if !self.in_depth {
            return false;
        }
        let threshold_hit =
            self.true_dist < eps && eps <= self.before_min && eps <= self.row_before_min;
        let fallback_hit = eps <= self.global_min && self.argmin_true;
        threshold_hit || fallback_hit
    }
}

/// Ground-truth traces of a tuning set, reusable across thresholds.
#[derive(Clone, Debug)]
pub struct TuneTraces {
    prompts: Vec<Vec<StepTrace>>,
}

impl TuneTraces {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Number of prompts the decoder reproduces exactly at `eps`.
    pub fn perfect_count(&self, eps: f32) -> usize {
        self.prompts
            .iter()
            .filter(|steps| steps.iter().all(|s| s.stays_on_path(eps)))
            .count()
    }

    pub fn true_distances(&self) -> Vec<f32> {
        self.prompts.iter().flatten().map(|s| s.true_dist).collect()
    }

    /// Smallest distance from any true state to a wrong (token, row) pair.
    pub fn min_margin(&self) -> f32 {
        self.prompts
            .iter()
            .flatten()
            .map(|s| s.before_min.min(s.row_before_min))
            .fold(f32::INFINITY, f32::min)
    }
}

pub fn trace_ground_truth(
    weights: &ModelWeights,
    cases: &[LabeledCapture],
    cfg: &AttackConfig,
    proposal: &mut dyn ProposalSource,
) -> Result<TuneTraces> {
    let d = weights.config().d_model;
    let depth = cfg.depth(weights.config().vocab_size);
    let mut scratch = CandidateScratch::new(weights.config());
    let mut state = vec![0.0f32; d];
    let mut prompts = Vec::with_capacity(cases.len());
    for case in cases {
        let kind = case.capture.perm_tag;
        check_capture(weights, &case.capture, cfg, kind)?;
        if case.tokens.len() != case.capture.rows() {
            return Err(Error::Dimension("tokens and capture rows differ".into()));
        }
        let targets = targets(&case.capture, cfg.matcher);
        let n = case.tokens.len();
        let row_mode = kind.permutes_rows();
        let mut cache = PrefixCache::new(weights, cfg.layer)?;
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            let truth = case.tokens[i];
            let true_row = case.row_of_position(i);
            let rows: Vec<usize> = if row_mode {
                (0..n)
                    .filter(|&r| case.row_of_position_inv(r) >= i)
                    .collect()
            } else {
                vec![i]
            };
            let order = proposal.rank(&case.tokens[..i])?;
            let mut trace = StepTrace {
                true_dist: f32::INFINITY,
                before_min: f32::INFINITY,
                row_before_min: f32::INFINITY,
                argmin_true: false,
                global_min: f32::INFINITY,
                in_depth: false,
            };
            let mut best = Best::none();
            for &v in order.iter().take(depth) {
                cache.candidate_state_into(weights, v, &mut scratch, &mut state)?;
                if cfg.matcher == Matcher::SortedL1 {
                    state.sort_unstable_by(f32::total_cmp);
                }
                let mut cand_min = f32::INFINITY;
                for &r in &rows {
                    let dist = l1_unchecked(&state, &targets[r]);
                    best.offer(dist, v, r);
                    if v == truth {
                        if r == true_row {
                            trace.true_dist = dist;
                        } else if r < true_row {
                            trace.row_before_min = trace.row_before_min.min(dist);
                        }
                    } else {
                        cand_min = cand_min.min(dist);
                    }
                }
                if v == truth {
                    trace.in_depth = true;
                } else if !trace.in_depth {
                    trace.before_min = trace.before_min.min(cand_min);
                }
            }
            trace.global_min = best.dist;
            trace.argmin_true = best.token == truth && best.row == true_row;
            steps.push(trace);
            if i + 1 < n {
                cache.push_token(weights, truth)?;
            }
        }
        prompts.push(steps);
    }
    Ok(TuneTraces { prompts })
}

impl LabeledCapture {
    /// True position whose state sits in capture row `row`.
    fn row_of_position_inv(&self, row: usize) -> usize {
        match &self.spec.seq {
            Some(sigma) => sigma.at(row),
            None => row,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub epsilon: f32,
    pub perfect: usize,
    pub prompts: usize,
    pub epsilon_hi: f32,
    /// Every threshold evaluated, with its perfect-decode count.
    pub evaluated: Vec<(f32, usize)>,
}

/// Upper end of the search interval: four times the 99th percentile of
/// true-match distances, or a tiny positive value when those are all 0.
pub fn epsilon_upper_bound(true_distances: &[f32]) -> f32 {
    let mut d: Vec<f32> = true_distances
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    if d.is_empty() {
        return 1e-6;
    }
    d.sort_by(f32::total_cmp);
    let idx = ((d.len() as f64 * 0.99).ceil() as usize).clamp(1, d.len()) - 1;
    let hi = 4.0 * d[idx];
    if hi > 0.0 {
        hi
    } else {
        1e-6
    }
}

/// Ternary search for the threshold maximizing perfect decodes on the
/// tuning traces. The best point seen (ties to the smaller threshold) is
/// returned, so the result never scores below either endpoint.
pub fn ternary_search(traces: &TuneTraces) -> TuneOutcome {
    let hi0 = epsilon_upper_bound(&traces.true_distances());
    let mut evaluated = Vec::new();
    let mut eval = |eps: f32| {
        let c = traces.perfect_count(eps);
        evaluated.push((eps, c));
        c
    };
    eval(0.0);
    eval(hi0);
    let (mut lo, mut hi) = (0.0f32, hi0);
    let stop = 1e-3 * hi0;
    while hi - lo >= stop {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if eval(m1) < eval(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    eval(0.5 * (lo + hi));
    let (epsilon, perfect) = evaluated
        .iter()
        .copied()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.total_cmp(&a.0)))
        .expect("at least two evaluations");
    TuneOutcome {
        epsilon,
        perfect,
        prompts: traces.len(),
        epsilon_hi: hi0,
        evaluated,
    }
}

pub fn tune_epsilon(
    weights: &ModelWeights,
    cases: &[LabeledCapture],
    cfg: &AttackConfig,
    proposal: &mut dyn ProposalSource,
) -> Result<TuneOutcome> {
    if cases.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let traces = trace_ground_truth(weights, cases, cfg, proposal)?;
    Ok(ternary_search(&traces))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanDepthSummary {
    pub label: String,
    pub steps: usize,
    pub mean: f64,
    pub p50: usize,
    pub p90: usize,
    pub max: usize,
}

pub fn scan_depth_report(label: &str, results: &[DecodeResult]) -> Result<ScanDepthSummary> {
    let mut counts: Vec<usize> = results
        .iter()
        .flat_map(|r| r.steps.iter().map(|s| s.scanned_count))
        .collect();
    if counts.is_empty() {
        return Err(Error::Domain(
            "scan depth report needs at least one step".into(),
        ));
    }
    counts.sort_unstable();
    let pct =
        |p: f64| counts[((counts.len() as f64 * p).ceil() as usize).clamp(1, counts.len()) - 1];
    Ok(ScanDepthSummary {
        label: label.to_string(),
        steps: counts.len(),
        mean: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
        p50: pct(0.5),
        p90: pct(0.9),
        max: *counts.last().expect("non-empty"),
    })
}
