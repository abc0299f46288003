//! End-to-end acceptance checks, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so every line is printed and the
//! criteria run one after another on a quiet machine. Pass criterion
//! numbers as arguments to run a subset: `cargo test --test acceptance -- 3 7`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use vocabmatch::attack::{decode_unpermuted, AttackConfig, FullScan, Matcher};
use vocabmatch::capture::HiddenCapture;
use vocabmatch::data::TokenId;
use vocabmatch::defense::apply_nondeterminism;
use vocabmatch::embedrec::{attack_without_embedding_table, recover_relative_perm, unmap_tokens};
use vocabmatch::experiment::{prepare, run_prepared, ExperimentConfig, ExperimentReport};
use vocabmatch::metrics::{collision_report, rouge_l};
use vocabmatch::model::{
    exposed_head, final_logits, forward_embeddings, forward_to_layer, init_model, logits_for_row,
    stip_inputs, stip_transform, CandidateScratch, ModelConfig, ModelWeights, PrefixCache,
    StipKeys,
};
use vocabmatch::numerics::{
    dot, gelu, l1_distance, rmsnorm_into, softmax_in_place, sorted_l1_distance, vec_mat_into,
    Matrix, SeededRng,
};
use vocabmatch::permutation::{apply, invert, sample_perm, PermKind, PermutationSpec};
use vocabmatch::theory::{analytic_c, build_discorr_counterexample, verify_separation};

type Check = Result<(bool, String), vocabmatch::Error>;
type Criterion = (u32, &'static str, fn() -> Check);

fn corpus_path() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/prompts.txt")
        .to_string_lossy()
        .into_owned()
}

fn config(extra: &str) -> ExperimentConfig {
    let text = format!("[corpus]\npath = {:?}\n{extra}", corpus_path());
    ExperimentConfig::from_toml(&text).expect("acceptance config parses")
}

fn run_config(cfg: &ExperimentConfig) -> Result<ExperimentReport, vocabmatch::Error> {
    run_prepared(&prepare(cfg)?)
}

fn rate_table(report: &ExperimentReport, defense: &str) -> String {
    let mut s = String::new();
    for c in report.cells.iter().filter(|c| c.defense == defense) {
        s.push_str(&format!(
            " L{}/{}={:.1}%",
            c.layer,
            c.perm.name(),
            c.eval.perfect_rate * 100.0
        ));
    }
    s
}

fn zero_noise_completeness() -> Check {
    let mut cfg = config("[noise]\neta = 0.0\n");
    cfg.attack.epsilon = Some(f32::MIN_POSITIVE);
    let start = Instant::now();
    let prep = prepare(&cfg)?;
    let lengths_ok =
        prep.corpus.eval.len() == 200 && prep.corpus.eval.iter().all(|p| p.tokens.len() <= 50);
    let report = run_prepared(&prep)?;
    let secs = start.elapsed().as_secs_f64();
    let all = report.cells.len() == 16 && report.cells.iter().all(|c| c.eval.perfect_rate == 1.0);
    Ok((
        lengths_ok && all && secs < 600.0,
        format!("{}; {secs:.0}s (limit 600s)", rate_table(&report, "none")),
    ))
}

fn noisy_decoding() -> Check {
    let cfg = config("[noise]\neta = 1e-4\n");
    let start = Instant::now();
    let report = run_config(&cfg)?;
    let secs = start.elapsed().as_secs_f64();
    let mut ok = report.cells.len() == 16
        && report
            .cells
            .iter()
            .all(|c| c.epsilon_tuned && c.tune_prompts == 50);
    for layer in 1..=4 {
        let rate = |k| {
            report
                .cell(layer, k, "none")
                .map_or(0.0, |c| c.eval.perfect_rate)
        };
        let (none, seq, hidden, fact) = (
            rate(PermKind::None),
            rate(PermKind::Seq),
            rate(PermKind::Hidden),
            rate(PermKind::Factorized),
        );
        ok &= none >= 0.99 && seq >= 0.99 && hidden >= 0.95 && fact >= 0.95;
        ok &= fact <= hidden && hidden <= seq + 0.01;
    }
    let eps: Vec<String> = report
        .cells
        .iter()
        .filter(|c| c.perm == PermKind::None)
        .map(|c| format!("{:.2e}", c.epsilon))
        .collect();
    Ok((
        ok && secs < 1800.0,
        format!(
            "{}; tuned eps (unpermuted) [{}]; {secs:.0}s (limit 1800s)",
            rate_table(&report, "none"),
            eps.join(", ")
        ),
    ))
}

/// Full-sequence forward pass written out with whole-matrix stages and no
/// cache, as an independent reference for the incremental path.
fn reference_forward(w: &ModelWeights, tokens: &[TokenId], depth: usize) -> Matrix {
    let cfg = w.config();
    let (n, d, hd) = (tokens.len(), cfg.d_model, cfg.head_dim());
    let scale = 1.0 / (hd as f32).sqrt();
    let mut x: Vec<Vec<f32>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            w.embed()
                .row(t as usize)
                .iter()
                .zip(w.pos().row(i))
                .map(|(e, p)| e + p)
                .collect()
        })
        .collect();
    let project = |rows: &[Vec<f32>], m: &Matrix| -> Vec<Vec<f32>> {
        rows.iter()
            .map(|r| {
                let mut out = vec![0.0; m.cols()];
                vec_mat_into(r, m, &mut out);
                out
            })
            .collect()
    };
    let norm = |rows: &[Vec<f32>], gain: &[f32]| -> Vec<Vec<f32>> {
        rows.iter()
            .map(|r| {
                let mut out = vec![0.0; r.len()];
                rmsnorm_into(r, gain, &mut out);
                out
            })
            .collect()
    };
    for layer in w.layers().iter().take(depth) {
        let h = norm(&x, &layer.attn_norm);
        let (q, k, v) = (
            project(&h, &layer.wq),
            project(&h, &layer.wk),
            project(&h, &layer.wv),
        );
        let mut attn = vec![vec![0.0f32; d]; n];
        for i in 0..n {
            for head in 0..cfg.n_heads {
                let s = head * hd..(head + 1) * hd;
                let mut scores: Vec<f32> = (0..=i)
                    .map(|j| dot(&q[i][s.clone()], &k[j][s.clone()]) * scale)
                    .collect();
                softmax_in_place(&mut scores);
                for (j, &p) in scores.iter().enumerate() {
                    for (o, &vj) in attn[i][s.clone()].iter_mut().zip(&v[j][s.clone()]) {
                        *o += p * vj;
                    }
                }
            }
        }
        for (xi, pi) in x.iter_mut().zip(project(&attn, &layer.wo)) {
            for (a, b) in xi.iter_mut().zip(pi) {
                *a += b;
            }
        }
        let h = norm(&x, &layer.mlp_norm);
        let mut ff = project(&h, &layer.w_up);
        for r in &mut ff {
            for v in r.iter_mut() {
                *v = gelu(*v);
            }
        }
        for (xi, fi) in x.iter_mut().zip(project(&ff, &layer.w_down)) {
            for (a, b) in xi.iter_mut().zip(fi) {
                *a += b;
            }
        }
    }
    Matrix::from_rows(&x).expect("finite states")
}

fn cache_equivalence() -> Check {
    let w = init_model(&ModelConfig::default())?;
    let mut rng = SeededRng::new(41);
    let mut scratch = CandidateScratch::new(w.config());
    let mut state = vec![0.0f32; 64];
    let mut bitwise = true;
    for _ in 0..100 {
        let n = rng.random_range(1..=50);
        let depth = rng.random_range(1..=4);
        let prefix: Vec<TokenId> = (0..n).map(|_| rng.random_range(0..256)).collect();
        let mut cache = PrefixCache::new(&w, depth)?;
        for &t in &prefix {
            cache.push_token(&w, t)?;
        }
        bitwise &= cache.hidden_matrix() == reference_forward(&w, &prefix, depth);
        for _ in 0..4 {
            let v = rng.random_range(0..256);
            cache.candidate_state_into(&w, v, &mut scratch, &mut state)?;
            let mut full = prefix.clone();
            full.push(v);
            bitwise &= reference_forward(&w, &full, depth).row(n) == state.as_slice();
        }
    }

    let prefix: Vec<TokenId> = (0..63).map(|_| rng.random_range(0..256)).collect();
    let mut cache = PrefixCache::new(&w, 4)?;
    for &t in &prefix {
        cache.push_token(&w, t)?;
    }
    let start = Instant::now();
    for v in 0..256 {
        cache.candidate_state_into(&w, v, &mut scratch, &mut state)?;
    }
    let cached = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let mut full = prefix.clone();
    full.push(0);
    for v in 0..256 {
        full[63] = v;
        let h = forward_to_layer(&w, &full, 4)?;
        state.copy_from_slice(h.matrix.row(63));
    }
    let uncached = start.elapsed().as_secs_f64();
    let speedup = uncached / cached;
    Ok((
        bitwise && speedup >= 2.0,
        format!("bitwise on 100 prompts: {bitwise}; speedup at N=64: {speedup:.1}x (floor 2x)"),
    ))
}

fn proposal_ordering() -> Check {
    let mut cfg =
        config("[noise]\neta = 0.0\n[perm]\nkinds = [\"none\"]\n[attack]\nproposal = \"ngram\"\n");
    cfg.attack.epsilon = Some(f32::MIN_POSITIVE);
    cfg.layers = vec![1];
    let report = run_config(&cfg)?;
    let ngram = &report.cells[0];
    let ngram_ok = ngram.eval.perfect_rate == 1.0 && ngram.scan.mean < 128.0;

    let w = init_model(&ModelConfig::default())?;
    let mut rng = SeededRng::new(44);
    let attack = AttackConfig::new(1, PermKind::None);
    let (mut total, mut steps) = (0usize, 0usize);
    for _ in 0..100 {
        let tokens: Vec<TokenId> = (0..30).map(|_| rng.random_range(0..256)).collect();
        let cap = forward_to_layer(&w, &tokens, 1)?;
        let out = decode_unpermuted(&w, &cap, &attack, &mut FullScan::new(256))?;
        total += out.steps.iter().map(|s| s.scanned_count).sum::<usize>();
        steps += out.steps.len();
    }
    let full = total as f64 / steps as f64;
    let full_ok = (full - 128.0).abs() <= 12.8;
    Ok((
        ngram_ok && full_ok,
        format!(
            "n-gram mean scan {:.1} on held-out prompts (< 128); full scan {full:.1} on uniform tokens (128 +/- 12.8)",
            ngram.scan.mean
        ),
    ))
}

fn stip_equivariance() -> Check {
    let cfg = config("");
    let prep = prepare(&cfg)?;
    let w = &prep.weights;
    let keys = StipKeys::sample(w, &SeededRng::new(45))?;
    let wp = stip_transform(w, &keys)?;
    let (mut hidden_diff, mut logit_diff) = (0.0f32, 0.0f32);
    for p in prep.corpus.eval.iter().take(50) {
        let tokens = p.tokens.as_slice();
        let inputs = stip_inputs(w, &keys, tokens)?;
        for layer in 1..=4 {
            let vanilla = forward_to_layer(w, tokens, layer)?.matrix;
            let permuted = forward_embeddings(&wp, &inputs, layer)?;
            for (a, b) in vanilla.iter_rows().zip(permuted.iter_rows()) {
                let expect = keys.pi.apply(a);
                hidden_diff = hidden_diff.max(
                    expect
                        .iter()
                        .zip(b)
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f32::max),
                );
            }
            if layer == 4 {
                let logits = final_logits(w, tokens)?;
                for (i, row) in permuted.iter_rows().enumerate() {
                    let back = keys.pi_c.apply(&logits_for_row(&wp, row));
                    let diff = back
                        .iter()
                        .zip(logits.row(i))
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f32::max);
                    logit_diff = logit_diff.max(diff);
                }
            }
        }
    }
    Ok((
        hidden_diff < 1e-5 && logit_diff < 1e-5,
        format!("max hidden diff {hidden_diff:.2e}, max logit diff {logit_diff:.2e} over 50 prompts (< 1e-5)"),
    ))
}

fn private_embedding_recovery() -> Check {
    let cfg = config("");
    let prep = prepare(&cfg)?;
    let w = &prep.weights;
    let root = SeededRng::new(46);
    let keys = StipKeys::sample(w, &root.substream("keys"))?;
    let distinct = !keys.pi.is_identity()
        && !keys.pi_d.is_identity()
        && !keys.pi_v.is_identity()
        && keys.pi != keys.pi_d;
    let wp = stip_transform(w, &keys)?;
    let head = exposed_head(w, &keys)?;
    let eval: Vec<_> = prep
        .corpus
        .eval
        .iter()
        .take(50)
        .map(|p| p.tokens.as_slice().to_vec())
        .collect();
    let first5: Vec<TokenId> = eval[0].iter().copied().take(5).collect();
    let observed = stip_inputs(w, &keys, &first5)?;
    let observed: Vec<Vec<f32>> = observed.iter_rows().map(<[f32]>::to_vec).collect();
    let recovered = recover_relative_perm(&head, &observed, 0.0)?;
    let exact = &recovered.table == wp.embed();

    let mut detail = format!("table exact from 5 inputs: {exact};");
    let mut rates_ok = true;
    for layer in [1, 4] {
        let attack = AttackConfig::new(layer, PermKind::None);
        let mut perfect = 0;
        for (j, tokens) in eval.iter().enumerate() {
            let inputs = stip_inputs(w, &keys, tokens)?;
            let clean = HiddenCapture::from_matrix(forward_embeddings(&wp, &inputs, layer)?, layer);
            let cap =
                apply_nondeterminism(&clean, 1e-4, &mut root.substream_indexed("noise", j as u64))?;
            let out = attack_without_embedding_table(
                &wp,
                &recovered,
                &cap,
                &attack,
                &mut FullScan::new(256),
            )?;
            if unmap_tokens(&out.tokens, &keys.pi_v) == *tokens {
                perfect += 1;
            }
        }
        let rate = perfect as f64 / eval.len() as f64;
        rates_ok &= rate >= 0.95;
        detail.push_str(&format!(" layer {layer} perfect {:.1}%", rate * 100.0));
    }
    Ok((
        distinct && exact && rates_ok,
        format!("{detail} at eta=1e-4 (>= 95%)"),
    ))
}

fn separation_theorem() -> Check {
    let start = Instant::now();
    let report = verify_separation(100_000, 0)?;
    let secs = start.elapsed().as_secs_f64();
    let printed: Vec<String> = report
        .checks
        .iter()
        .map(|c| format!("{:.4}", c.analytic))
        .collect();
    let values_ok = printed == ["0.3173", "0.0455"];
    let detail = report
        .checks
        .iter()
        .map(|c| {
            format!(
                "{}: empirical {:.4} vs analytic {:.4}",
                c.label, c.empirical, c.analytic
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Ok((
        report.pass && values_ok && secs < 120.0,
        format!("{detail}; {secs:.0}s (limit 120s)"),
    ))
}

fn discorr_theorem() -> Check {
    let (rho, delta, n) = (0.99, 0.1, 5000);
    let c = analytic_c(rho, delta);
    let root = SeededRng::new(48);
    let (mut ordered, mut zero_ok, mut worst, mut gap_sum) = (0, true, 0.0f64, 0.0);
    for s in 0..20 {
        let ce =
            build_discorr_counterexample(rho, delta, n, &mut root.substream_indexed("seed", s))?;
        let r = &ce.report;
        let gap = r.dcor_wx - r.dcor_yz;
        gap_sum += gap;
        if gap > 0.02 {
            ordered += 1;
        }
        zero_ok &= ce.y.iter().all(|y| y.abs() <= delta);
        worst = worst.max((r.linear_estimator_success - c).abs());
    }
    Ok((
        ordered >= 19 && zero_ok && worst <= 0.03 && (c - 0.522).abs() < 5e-4,
        format!(
            "dcor gap > 0.02 on {ordered}/20 seeds (mean gap {:.3}); zero estimator exact: {zero_ok}; c = {c:.4}, worst |P - c| = {worst:.4} (<= 0.03)",
            gap_sum / 20.0
        ),
    ))
}

fn defense_sweep() -> Check {
    let layer = 1;
    let w = init_model(&ModelConfig::default())?;
    let base = config("");
    let prep = prepare(&base)?;
    let sample: Vec<Vec<TokenId>> = prep
        .corpus
        .tune
        .iter()
        .take(10)
        .map(|p| p.tokens.as_slice().to_vec())
        .collect();
    let margins = collision_report(&w, &sample, layer, Matcher::SortedL1, false)?;
    // std whose expected L1 noise norm, d * s * sqrt(2/pi), is the median sorted margin
    let d = w.config().d_model as f64;
    let s = f64::from(margins.median_margin) / (d * (2.0 / std::f64::consts::PI).sqrt());
    let sigmas = [s, 10.0 * s];

    let mut cfg = config(&format!(
        "[noise]\neta = 0.0\n[sweep]\ngaussian_sigmas = [{s:e}, {:e}]\nquant_bits = [8]\n",
        10.0 * s
    ));
    cfg.corpus.eval_count = 50;
    cfg.layers = vec![layer];
    cfg.attack.epsilon = Some(f32::MIN_POSITIVE);
    let report = run_config(&cfg)?;
    let rouge = |kind, defense: &str| {
        report
            .cell(layer, kind, defense)
            .map_or(-1.0, |c| c.eval.mean_rouge_l)
    };
    let labels: Vec<String> = std::iter::once("none".to_string())
        .chain(sigmas.iter().map(|&g| {
            vocabmatch::defense::DefenseConfig {
                gaussian_sigma: g,
                ..Default::default()
            }
            .label()
        }))
        .collect();
    let mut detail = format!("s = {s:.2e};");
    let mut monotone = true;
    for kind in [PermKind::Hidden, PermKind::Factorized] {
        let curve: Vec<f64> = labels.iter().map(|l| rouge(kind, l)).collect();
        monotone &= curve.windows(2).all(|p| p[1] <= p[0]);
        detail.push_str(&format!(" {} ROUGE-L {:.2?};", kind.name(), curve));
    }
    let top = labels.last().expect("three sigma levels");
    let gap = rouge(PermKind::None, top)
        - rouge(PermKind::Hidden, top).max(rouge(PermKind::Factorized, top));
    let quant = rouge(PermKind::Seq, "int8");
    detail.push_str(&format!(
        " at 10s unpermuted {:.2} (gap {gap:.2} >= 0.3); int8 seq ROUGE-L {quant:.2} (>= 0.5)",
        rouge(PermKind::None, top)
    ));
    Ok((monotone && gap >= 0.3 && quant >= 0.5, detail))
}

fn invariant_suites() -> Check {
    let start = Instant::now();
    let w = init_model(&ModelConfig::default())?;
    let mut rng = SeededRng::new(50);
    let mut causal = true;
    let mut roundtrip = true;
    for _ in 0..20 {
        let n = rng.random_range(2..40);
        let a: Vec<TokenId> = (0..n).map(|_| rng.random_range(0..256)).collect();
        let j = rng.random_range(1..n);
        let mut b = a.clone();
        for t in &mut b[j..] {
            *t = rng.random_range(0..256);
        }
        let (ha, hb) = (forward_to_layer(&w, &a, 4)?, forward_to_layer(&w, &b, 4)?);
        causal &= (0..j).all(|i| ha.matrix.row(i) == hb.matrix.row(i));
        for kind in PermKind::ALL {
            let spec = PermutationSpec::sample(kind, n, 64, rng.random())?;
            roundtrip &= invert(&spec, &apply(&spec, &ha)?)? == ha;
        }
    }
    let mut sorted_inv = true;
    for _ in 0..100 {
        let x: Vec<f32> = (0..64).map(|_| rng.normal() as f32).collect();
        let y: Vec<f32> = (0..64).map(|_| rng.normal() as f32).collect();
        let p = sample_perm(64, &mut rng)?;
        sorted_inv &= sorted_l1_distance(&p.apply(&x), &y)? == sorted_l1_distance(&x, &y)?;
        sorted_inv &= sorted_l1_distance(&x, &y)? <= l1_distance(&x, &y)?;
    }
    let prompts: Vec<Vec<TokenId>> = (0..3)
        .map(|i| (0..12).map(|t| (i * 31 + t * 7) % 256).collect())
        .collect();
    let mut margins_ok = true;
    for matcher in [Matcher::L1, Matcher::SortedL1] {
        margins_ok &= collision_report(&w, &prompts, 2, matcher, true)?.min_margin > 0.0;
    }
    let rouge_ok = rouge_l(&[1, 2, 3], &[1, 2, 3])? == 1.0
        && rouge_l(&[1, 2], &[3, 4])? == 0.0
        && (rouge_l(&[1, 2, 3], &[1, 3])? - 0.8).abs() < 1e-12
        && rouge_l(&[], &[1]).is_err();
    let secs = start.elapsed().as_secs_f64();
    Ok((
        causal && roundtrip && sorted_inv && margins_ok && rouge_ok && secs < 300.0,
        format!(
            "causality {causal}, permutation round trip {roundtrip}, sorted-L1 invariance {sorted_inv}, \
             positive margins {margins_ok}, ROUGE-L cases {rouge_ok}; {secs:.1}s"
        ),
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "zero-noise completeness", zero_noise_completeness),
        (2, "noisy decoding with tuned threshold", noisy_decoding),
        (3, "prefix cache equivalence and speedup", cache_equivalence),
        (4, "proposal ordering scan depth", proposal_ordering),
        (5, "weight-permutation equivariance", stip_equivariance),
        (6, "private-embedding recovery", private_embedding_recovery),
        (7, "projection separation bound", separation_theorem),
        (8, "distance-correlation counterexample", discorr_theorem),
        (9, "defense sweep pattern", defense_sweep),
        (10, "invariant suites", invariant_suites),
    ];
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    let out = std::io::stdout();
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        let line = format!(
            "criterion {id:>2} {name}: {} ({:.1}s) {detail}\n",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        let mut lock = out.lock();
        lock.write_all(line.as_bytes()).ok();
        lock.flush().ok();
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
