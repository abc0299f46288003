//! Config-driven pipeline: model, corpus, server capture, permutation,
//! defense, tuning, decoding and scoring, with JSON/CSV reports.

use crate::clock::Stopwatch;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attack::{
    decode, scan_depth_report, ternary_search, trace_ground_truth, AttackConfig, FullScan,
    LabeledCapture, Matcher, ModelProposal, ProposalMode, ProposalSource, ScanDepthSummary,
};
use crate::data::{
    build_ngram_proposal, load_corpus_with, parse_prompts, Corpus, ProposalTable, TokenSequence,
    Tokenizer,
};
use crate::defense::{defended_models, server_capture, DefenseConfig, NoiseConfig};
use crate::error::{Error, Result};
use crate::metrics::{score, summarize, write_csv, write_json, ScoreSummary};
use crate::model::{init_model, ModelConfig, ModelWeights};
use crate::numerics::SeededRng;
use crate::permutation::{apply, PermKind, PermutationSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedOverrides {
    pub model: Option<u64>,
    pub data: Option<u64>,
    pub exp: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub exp: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    #[default]
    Bytes,
    Words,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermSection {
    #[serde(default = "all_kinds")]
    pub kinds: Vec<PermKind>,
}

fn all_kinds() -> Vec<PermKind> {
    PermKind::ALL.to_vec()
}

impl Default for PermSection {
    fn default() -> Self {
        Self { kinds: all_kinds() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// Fixed threshold; tuned on the tune split when absent.
    #[serde(default)]
    pub epsilon: Option<f32>,
    #[serde(default = "default_proposal")]
    pub proposal: ProposalMode,
    #[serde(default)]
    pub max_proposal_depth: Option<usize>,
    #[serde(default = "default_ngram_order")]
    pub ngram_order: usize,
}

fn default_proposal() -> ProposalMode {
    ProposalMode::FullScan
}

fn default_ngram_order() -> usize {
    2
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            epsilon: None,
            proposal: default_proposal(),
            max_proposal_depth: None,
            ngram_order: default_ngram_order(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub gaussian_sigmas: Vec<f64>,
    #[serde(default)]
    pub prefix: bool,
    #[serde(default)]
    pub quant_bits: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub corpus: crate::data::CorpusConfig,
    #[serde(default)]
    pub tokenizer: TokenizerKind,
    #[serde(default)]
    pub seeds: SeedOverrides,
    #[serde(default)]
    pub perm: PermSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub defense: DefenseConfig,
    /// Extra defense settings evaluated after `defense`.
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub attack: AttackSection,
    /// Layers to attack; empty means all.
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses TOML, naming the offending field on schema errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner().message().trim()))
        })
    }

    /// Reads a config file; a relative corpus path is taken relative to
    /// the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let corpus = Path::new(&cfg.corpus.path);
        if corpus.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.corpus.path = dir.join(corpus).to_string_lossy().into_owned();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            model: self.seeds.model.unwrap_or(self.model.init_seed),
            data: self.seeds.data.unwrap_or(self.corpus.seed),
            exp: self.seeds.exp.unwrap_or(0),
        }
    }

    /// Folds seed overrides into the model and corpus sections.
    pub fn resolved(&self) -> Self {
        let seeds = self.seeds();
        let mut out = self.clone();
        out.model.init_seed = seeds.model;
        out.corpus.seed = seeds.data;
        out.seeds = SeedOverrides {
            model: Some(seeds.model),
            data: Some(seeds.data),
            exp: Some(seeds.exp),
        };
        out
    }

    pub fn layers(&self) -> Vec<usize> {
        if self.layers.is_empty() {
            (1..=self.model.n_layers).collect()
        } else {
            self.layers.clone()
        }
    }

    pub fn noise(&self, defense: &DefenseConfig) -> NoiseConfig {
        NoiseConfig {
            eta: self.noise.eta,
            defense: defense.clone(),
        }
    }

    pub fn defenses(&self) -> Vec<DefenseConfig> {
        let mut out = vec![self.defense.clone()];
        if let Some(s) = &self.sweep {
            for &sigma in &s.gaussian_sigmas {
                out.push(DefenseConfig {
                    gaussian_sigma: sigma,
                    ..DefenseConfig::default()
                });
            }
            if s.prefix {
                out.push(DefenseConfig {
                    prefix: true,
                    ..DefenseConfig::default()
                });
            }
            for &bits in &s.quant_bits {
                out.push(DefenseConfig {
                    quant_bits: Some(bits),
                    attacker_has_quantized: self.defense.attacker_has_quantized,
                    ..DefenseConfig::default()
                });
            }
        }
        let mut seen = Vec::new();
        out.retain(|d| {
            let fresh = !seen.contains(d);
            seen.push(d.clone());
            fresh
        });
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for &l in &self.layers {
            self.model
                .check_layer(l)
                .map_err(|e| Error::Config(format!("at `layers`: {e}")))?;
        }
        if self.perm.kinds.is_empty() {
            return Err(Error::Config(
                "at `perm.kinds`: at least one permutation kind".into(),
            ));
        }
        if let Some(eps) = self.attack.epsilon {
            if !(eps >= 0.0) {
                return Err(Error::Config(
                    "at `attack.epsilon`: must be non-negative".into(),
                ));
            }
        }
        if !(1..=3).contains(&self.attack.ngram_order) {
            return Err(Error::Config(
                "at `attack.ngram_order`: must be 1, 2 or 3".into(),
            ));
        }
        if self.corpus.max_len == 0 || self.corpus.max_len > self.model.max_ctx {
            return Err(Error::Config(format!(
                "at `corpus.max_len`: must lie in 1..={}",
                self.model.max_ctx
            )));
        }
        if self.tokenizer == TokenizerKind::Bytes
            && self.model.vocab_size != crate::data::BYTE_VOCAB
        {
            return Err(Error::Config(
                "at `model.vocab_size`: byte tokenizer needs 256".into(),
            ));
        }
        for d in self.defenses() {
            self.noise(&d).validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub layer: usize,
    pub perm: PermKind,
    pub defense: String,
    pub eta: f64,
    pub proposal: ProposalMode,
    pub epsilon: f32,
    pub epsilon_tuned: bool,
    pub tune_perfect: usize,
    pub tune_prompts: usize,
    /// Tune-split perfect counts at every threshold the search evaluated.
    pub epsilon_curve: Vec<(f32, usize)>,
    pub eval: ScoreSummary,
    pub scan: ScanDepthSummary,
    pub seeds: Seeds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub layer: usize,
    pub perm: PermKind,
    pub defense: String,
    pub tune_ms: f64,
    pub eval_ms: f64,
    pub mean_decode_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub layer: usize,
    pub perm: PermKind,
    pub defense: String,
    pub index: usize,
    pub perfect: bool,
    pub rouge_l: f64,
    pub scan_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub seeds: Seeds,
    pub model_fingerprint: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellReport>,
    pub prompts: Vec<PromptRow>,
    /// Wall-clock fields, kept apart so the rest is reproducible.
    pub timing: Vec<CellTiming>,
}

impl ExperimentReport {
    pub fn cell(&self, layer: usize, perm: PermKind, defense: &str) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.layer == layer && c.perm == perm && c.defense == defense)
    }

    /// JSON of the report with the timing section removed.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.timing.clear();
        Ok(serde_json::to_string_pretty(&copy)?)
    }
}

/// Everything a cell needs that does not depend on the cell.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub weights: ModelWeights,
    pub corpus: Corpus,
    pub ngram: ProposalTable,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let config = config.resolved();
    config.validate()?;
    let weights = init_model(&config.model)?;
    let tokenizer = match config.tokenizer {
        TokenizerKind::Bytes => Tokenizer::Bytes,
        TokenizerKind::Words => {
            let path = Path::new(&config.corpus.path);
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Tokenizer::fit_words(&parse_prompts(&text)?, config.model.vocab_size)?
        }
    };
    let corpus = load_corpus_with(&config.corpus, &tokenizer)?;
    if corpus.tune.is_empty() || corpus.eval.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let ngram = build_ngram_proposal(
        &corpus.tune_tokens(),
        config.attack.ngram_order,
        config.model.vocab_size,
    )?;
    Ok(Prepared {
        config,
        weights,
        corpus,
        ngram,
    })
}

/// Builds the server-side captures of `prompts` for one cell.
pub fn make_captures(
    server: &ModelWeights,
    prompts: &[TokenSequence],
    layer: usize,
    kind: PermKind,
    noise: &NoiseConfig,
    noise_rng: &SeededRng,
    perm_rng: &SeededRng,
) -> Result<Vec<LabeledCapture>> {
    prompts
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let tokens = p.as_slice().to_vec();
            let mut rng = noise_rng.substream_indexed("prompt", j as u64);
            let cap = server_capture(server, &tokens, layer, noise, &mut rng)?;
            let seed = perm_rng.substream_indexed("prompt", j as u64).next_u64();
            let spec = if kind == PermKind::None {
                PermutationSpec::none(seed)
            } else {
                PermutationSpec::sample(kind, tokens.len(), server.config().d_model, seed)?
            };
            Ok(LabeledCapture {
                capture: apply(&spec, &cap)?,
                tokens,
                spec,
            })
        })
        .collect()
}

pub fn make_proposal<'a>(
    mode: ProposalMode,
    attacker: &'a ModelWeights,
    ngram: &ProposalTable,
) -> Result<Box<dyn ProposalSource + 'a>> {
    Ok(match mode {
        ProposalMode::FullScan => Box::new(FullScan::new(attacker.config().vocab_size)),
        ProposalMode::Ngram => Box::new(ngram.clone()),
        ProposalMode::ModelLogits => Box::new(ModelProposal::new(attacker)?),
    })
}

pub struct CellOutcome {
    pub report: CellReport,
    pub timing: CellTiming,
    pub prompts: Vec<PromptRow>,
}

pub fn run_cell(
    prep: &Prepared,
    layer: usize,
    kind: PermKind,
    defense: &DefenseConfig,
    models: &(ModelWeights, ModelWeights),
) -> Result<CellOutcome> {
    let cfg = &prep.config;
    let seeds = cfg.seeds();
    let (attacker, server) = models;
    let noise = cfg.noise(defense);
    let root = SeededRng::new(seeds.exp);
    let label = defense.label();
    // noise draws are shared by every permutation kind of a (layer, defense)
    let noise_rng = root.substream(&format!("noise/{layer}/{label}"));
    let perm_rng = root.substream(&format!("perm/{layer}/{label}/{kind}"));
    let attack = AttackConfig {
        epsilon: 0.0,
        proposal: cfg.attack.proposal,
        max_proposal_depth: cfg.attack.max_proposal_depth,
        matcher: Matcher::for_kind(kind),
        layer,
    };

    let tune_start = Stopwatch::start();
    let (epsilon, tuned, tune_perfect, curve) = match cfg.attack.epsilon {
        Some(eps) => (eps, false, 0, Vec::new()),
        None => {
            let cases = make_captures(
                server,
                &prep.corpus.tune_tokens(),
                layer,
                kind,
                &noise,
                &noise_rng.substream("tune"),
                &perm_rng.substream("tune"),
            )?;
            let mut proposal = make_proposal(attack.proposal, attacker, &prep.ngram)?;
            let traces = trace_ground_truth(attacker, &cases, &attack, proposal.as_mut())?;
            let outcome = ternary_search(&traces);
            (outcome.epsilon, true, outcome.perfect, outcome.evaluated)
        }
    };
    let tune_ms = tune_start.ms();

    let eval_start = Stopwatch::start();
    let cases = make_captures(
        server,
        &prep.corpus.eval_tokens(),
        layer,
        kind,
        &noise,
        &noise_rng.substream("eval"),
        &perm_rng.substream("eval"),
    )?;
    let attack = attack.with_epsilon(epsilon);
    let mut proposal = make_proposal(attack.proposal, attacker, &prep.ngram)?;
    let mut results = Vec::with_capacity(cases.len());
    let mut cards = Vec::with_capacity(cases.len());
    let mut prompts = Vec::with_capacity(cases.len());
    for (index, case) in cases.iter().enumerate() {
        let out = decode(attacker, &case.capture, &attack, proposal.as_mut())?;
        let card = score(&out, &case.tokens)?;
        prompts.push(PromptRow {
            layer,
            perm: kind,
            defense: label.clone(),
            index,
            perfect: card.perfect,
            rouge_l: card.rouge_l,
            scan_mean: out.steps.iter().map(|s| s.scanned_count).sum::<usize>() as f64
                / out.steps.len() as f64,
        });
        cards.push(card);
        results.push(out);
    }
    let eval_ms = eval_start.ms();
    let scan = scan_depth_report(attack.proposal.name(), &results)?;
    log::info!(
        "layer {layer} {kind} {label}: eps {epsilon:.4e}, perfect {}/{}",
        cards.iter().filter(|c| c.perfect).count(),
        cards.len()
    );
    Ok(CellOutcome {
        report: CellReport {
            layer,
            perm: kind,
            defense: label.clone(),
            eta: cfg.noise.eta,
            proposal: attack.proposal,
            epsilon,
            epsilon_tuned: tuned,
            tune_perfect,
            tune_prompts: prep.corpus.tune.len(),
            epsilon_curve: curve,
            eval: summarize(&cards),
            scan,
            seeds,
        },
        timing: CellTiming {
            layer,
            perm: kind,
            defense: label,
            tune_ms,
            eval_ms,
            mean_decode_ms: results.iter().map(|r| r.wall_ms).sum::<f64>() / results.len() as f64,
        },
        prompts,
    })
}

pub fn run_prepared(prep: &Prepared) -> Result<ExperimentReport> {
    let cfg = &prep.config;
    let mut cells = Vec::new();
    let mut timing = Vec::new();
    let mut prompts = Vec::new();
    for defense in cfg.defenses() {
        let models = defended_models(&prep.weights, &defense)?;
        for layer in cfg.layers() {
            for &kind in &cfg.perm.kinds {
                let out = run_cell(prep, layer, kind, &defense, &models)?;
                cells.push(out.report);
                timing.push(out.timing);
                prompts.extend(out.prompts);
            }
        }
    }
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        seeds: cfg.seeds(),
        model_fingerprint: format!("{:016x}", prep.weights.fingerprint()),
        config: cfg.clone(),
        cells,
        prompts,
        timing,
    })
}

pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_prepared(&prepare(config)?)
}

#[derive(Serialize)]
struct CellCsv<'a> {
    layer: usize,
    perm: PermKind,
    defense: &'a str,
    eta: f64,
    proposal: &'static str,
    epsilon: f32,
    epsilon_tuned: bool,
    tune_perfect: usize,
    tune_prompts: usize,
    prompts: usize,
    perfect_rate: f64,
    mean_rouge_l: f64,
    scan_mean: f64,
    scan_p50: usize,
    scan_p90: usize,
    scan_max: usize,
    seed_model: u64,
    seed_data: u64,
    seed_exp: u64,
}

/// Writes `report.json` and `tables/{cells,prompts,timing}.csv` under `dir`.
pub fn write_report(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let tables = dir.join("tables");
    std::fs::create_dir_all(&tables).map_err(|e| Error::io(&tables, e))?;
    write_json(dir.join("report.json"), report)?;
    let rows: Vec<CellCsv<'_>> = report
        .cells
        .iter()
        .map(|c| CellCsv {
            layer: c.layer,
            perm: c.perm,
            defense: &c.defense,
            eta: c.eta,
            proposal: c.proposal.name(),
            epsilon: c.epsilon,
            epsilon_tuned: c.epsilon_tuned,
            tune_perfect: c.tune_perfect,
            tune_prompts: c.tune_prompts,
            prompts: c.eval.prompts,
            perfect_rate: c.eval.perfect_rate,
            mean_rouge_l: c.eval.mean_rouge_l,
            scan_mean: c.scan.mean,
            scan_p50: c.scan.p50,
            scan_p90: c.scan.p90,
            scan_max: c.scan.max,
            seed_model: c.seeds.model,
            seed_data: c.seeds.data,
            seed_exp: c.seeds.exp,
        })
        .collect();
    write_csv(tables.join("cells.csv"), &rows)?;
    write_csv(tables.join("prompts.csv"), &report.prompts)?;
    write_csv(tables.join("timing.csv"), &report.timing)?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ExperimentReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Plain-text tables: perfect-decode rate and mean ROUGE-L by layer and
/// permutation kind, one block per defense setting.
pub fn render(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let s = report.seeds;
    let _ = writeln!(
        out,
        "seeds: model={} data={} exp={}  eta={}",
        s.model, s.data, s.exp, report.config.noise.eta
    );
    let mut by_defense: BTreeMap<&str, Vec<&CellReport>> = BTreeMap::new();
    let mut order = Vec::new();
    for c in &report.cells {
        if !by_defense.contains_key(c.defense.as_str()) {
            order.push(c.defense.as_str());
        }
        by_defense.entry(&c.defense).or_default().push(c);
    }
    for defense in order {
        let cells = &by_defense[defense];
        let mut kinds: Vec<PermKind> = cells.iter().map(|c| c.perm).collect();
        kinds.sort();
        kinds.dedup();
        let mut layers: Vec<usize> = cells.iter().map(|c| c.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        for (title, pick) in [
            (
                "perfect decode",
                (|c: &CellReport| c.eval.perfect_rate * 100.0) as fn(&CellReport) -> f64,
            ),
            ("ROUGE-L", |c: &CellReport| c.eval.mean_rouge_l),
        ] {
            let _ = writeln!(out, "\ndefense: {defense}  ({title})");
            let _ = write!(out, "{:>6}", "layer");
            for k in &kinds {
                let _ = write!(out, " {:>11}", k.name());
            }
            out.push('\n');
            for &l in &layers {
                let _ = write!(out, "{l:>6}");
                for &k in &kinds {
                    match cells.iter().find(|c| c.layer == l && c.perm == k) {
                        Some(c) if title == "ROUGE-L" => {
                            let _ = write!(out, " {:>11.3}", pick(c));
                        }
                        Some(c) => {
                            let _ = write!(out, " {:>10.1}%", pick(c));
                        }
                        None => {
                            let _ = write!(out, " {:>11}", "-");
                        }
                    }
                }
                out.push('\n');
            }
        }
        let _ = writeln!(
            out,
            "\n{:>6} {:>11} {:>12} {:>10}",
            "layer", "perm", "epsilon", "scan mean"
        );
        for c in cells {
            let _ = writeln!(
                out,
                "{:>6} {:>11} {:>12.4e} {:>10.1}",
                c.layer,
                c.perm.name(),
                c.epsilon,
                c.scan.mean
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
layers = [1]

[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_ctx = 32

[corpus]
path = "prompts.txt"
max_len = 12
tune_count = 3
eval_count = 4
"#;

    fn write_corpus(dir: &Path) {
        let lines: Vec<String> = (0..10)
            .map(|i| format!("prompt number {i} is short"))
            .collect();
        std::fs::write(dir.join("prompts.txt"), lines.join("\n")).unwrap();
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = ExperimentConfig::from_toml(&format!("{BASE}\n[attack]\nepsilonn = 1.0\n"))
            .unwrap_err();
        assert!(
            matches!(&err, Error::Config(m) if m.contains("attack")),
            "{err}"
        );
        let err = ExperimentConfig::from_toml(&BASE.replace("d_model = 16", "d_model = \"x\""))
            .unwrap_err();
        assert!(
            matches!(&err, Error::Config(m) if m.contains("model.d_model")),
            "{err}"
        );
    }

    #[test]
    fn relative_corpus_and_seed_overrides() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path());
        let path = dir.path().join("exp.cfg");
        std::fs::write(&path, format!("{BASE}\n[seeds]\nmodel = 7\n")).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert!(Path::new(&cfg.corpus.path).starts_with(dir.path()));
        let seeds = cfg.seeds();
        assert_eq!((seeds.model, seeds.data, seeds.exp), (7, 1, 0));
        assert_eq!(cfg.resolved().model.init_seed, 7);
    }

    #[test]
    fn invalid_layers_rejected() {
        let cfg =
            ExperimentConfig::from_toml(&BASE.replace("layers = [1]", "layers = [2]")).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_run_is_exact_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path());
        let path = dir.path().join("exp.cfg");
        std::fs::write(&path, BASE).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(
            a.deterministic_json().unwrap(),
            b.deterministic_json().unwrap()
        );
        assert_eq!(a.cells.len(), 4);
        assert!(a.cells.iter().all(|c| c.eval.perfect_rate == 1.0));
        let text = render(&a);
        assert!(text.contains("factorized") && text.contains("100.0%"));
        write_report(&a, dir.path().join("out")).unwrap();
        let back = read_report(dir.path().join("out/report.json")).unwrap();
        assert_eq!(back, a);
        assert!(dir.path().join("out/tables/cells.csv").exists());
    }

    #[test]
    fn sweep_expands_defenses() {
        let cfg = ExperimentConfig::from_toml(&format!(
            "{BASE}\n[sweep]\ngaussian_sigmas = [0.0, 0.01]\nquant_bits = [8]\nprefix = true\n"
        ))
        .unwrap();
        let labels: Vec<String> = cfg.defenses().iter().map(DefenseConfig::label).collect();
        assert_eq!(labels, ["none", "gauss0.01", "prefix", "int8"]);
    }
}
