use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vocabmatch::attack::{
    decode, AttackConfig, FullScan, Matcher, ModelProposal, ProposalMode, ProposalSource,
};
use vocabmatch::capture::HiddenCapture;
use vocabmatch::data::{detokenize, tokenize};
use vocabmatch::defense::{defended_models, server_capture};
use vocabmatch::embedrec::{attack_without_embedding_table, recover_relative_perm, unmap_tokens};
use vocabmatch::experiment::{
    make_proposal, prepare, read_report, render, run_prepared, write_report, ExperimentConfig,
    SweepSection,
};
use vocabmatch::metrics::{score, summarize, write_json};
use vocabmatch::model::{
    exposed_head, forward_embeddings, init_model, stip_inputs, stip_transform, ModelConfig,
    StipKeys,
};
use vocabmatch::numerics::SeededRng;
use vocabmatch::permutation::{apply, PermKind, PermutationSpec};
use vocabmatch::theory::{verify_preset, Preset};
use vocabmatch::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vocabmatch",
    version,
    about = "Invert transformer hidden states by vocabulary matching"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Global {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long = "seed.model", global = true)]
    seed_model: Option<u64>,
    #[arg(long = "seed.data", global = true)]
    seed_data: Option<u64>,
    #[arg(long = "seed.exp", global = true)]
    seed_exp: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated layer list.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Comma-separated permutation kinds: none, seq, hidden, factorized.
    #[arg(long, global = true, value_delimiter = ',')]
    perm: Option<Vec<PermKind>>,
    /// Server-side hidden-state jitter.
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Create or describe the toy model.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Run a prompt on the server side and write an HSR1 capture.
    Capture(CaptureArgs),
    /// Decode an HSR1 capture.
    Attack(AttackArgs),
    /// Tune the matching threshold on the tune split.
    Tune,
    /// Evaluate a grid of defenses.
    #[command(subcommand)]
    Defense(DefenseCmd),
    /// Numerical checks of the two theorems.
    #[command(subcommand)]
    Theory(TheoryCmd),
    /// Decode with a private embedding table and tied head.
    #[command(subcommand)]
    Embedrec(EmbedrecCmd),
    /// Render a report as text tables.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Run the full experiment from the config.
    Run,
}

#[derive(Subcommand)]
enum ModelCmd {
    Init,
    Inspect,
}

#[derive(Args)]
struct CaptureArgs {
    /// Prompt text (byte tokens).
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 1)]
    layer: usize,
    /// Where to write the permutation spec as JSON.
    #[arg(long)]
    spec_out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// HSR1 capture file.
    capture: PathBuf,
    #[arg(long, default_value_t = f32::MIN_POSITIVE)]
    epsilon: f32,
    #[arg(long, value_enum, default_value = "full-scan")]
    proposal: ProposalArg,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProposalArg {
    FullScan,
    ModelLogits,
    Ngram,
}

impl From<ProposalArg> for ProposalMode {
    fn from(p: ProposalArg) -> Self {
        match p {
            ProposalArg::FullScan => ProposalMode::FullScan,
            ProposalArg::ModelLogits => ProposalMode::ModelLogits,
            ProposalArg::Ngram => ProposalMode::Ngram,
        }
    }
}

#[derive(Subcommand)]
enum DefenseCmd {
    Sweep {
        /// Gaussian embedding-noise levels.
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        quant: Vec<u8>,
        #[arg(long)]
        prefix: bool,
    },
}

#[derive(Subcommand)]
enum TheoryCmd {
    Verify {
        #[arg(long)]
        preset: Preset,
    },
}

#[derive(Subcommand)]
enum EmbedrecCmd {
    Run {
        /// Observed permuted input rows used for recovery.
        #[arg(long, default_value_t = 5)]
        observed: usize,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        /// Eval prompts to decode.
        #[arg(long, default_value_t = 50)]
        prompts: usize,
    },
}

#[derive(Subcommand)]
enum ReportCmd {
    Render {
        /// report.json, or the directory holding it.
        report: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Config(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if g.seed_model.is_some() {
        cfg.seeds.model = g.seed_model;
    }
    if g.seed_data.is_some() {
        cfg.seeds.data = g.seed_data;
    }
    if g.seed_exp.is_some() {
        cfg.seeds.exp = g.seed_exp;
    }
    if let Some(l) = &g.layers {
        cfg.layers = l.clone();
    }
    if let Some(p) = &g.perm {
        cfg.perm.kinds = p.clone();
    }
    if let Some(eta) = g.eta {
        cfg.noise.eta = eta;
    }
    if let Some(out) = &g.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Model config from `--config` when given, defaults otherwise.
fn model_config(g: &Global) -> Result<ModelConfig> {
    let mut m = match &g.config {
        Some(_) => load_config(g)?.resolved().model,
        None => ModelConfig::default(),
    };
    if let Some(s) = g.seed_model {
        m.init_seed = s;
    }
    m.validate()?;
    Ok(m)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Model(cmd) => {
            let cfg = model_config(g)?;
            let w = init_model(&cfg)?;
            let info = serde_json::json!({
                "config": cfg,
                "param_count": cfg.param_count(),
                "fingerprint": format!("{:016x}", w.fingerprint()),
            });
            match cmd {
                ModelCmd::Init => {
                    let path = g.out.clone().unwrap_or_else(|| PathBuf::from("model.json"));
                    write_json(&path, &info)?;
                    println!("wrote {}", path.display());
                }
                ModelCmd::Inspect => {
                    println!(
                        "d={} L={} V={} heads={} d_ff={} max_ctx={}",
                        cfg.d_model,
                        cfg.n_layers,
                        cfg.vocab_size,
                        cfg.n_heads,
                        cfg.d_ff,
                        cfg.max_ctx
                    );
                    println!(
                        "params={} fingerprint={:016x}",
                        cfg.param_count(),
                        w.fingerprint()
                    );
                }
            }
            Ok(())
        }
        Command::Capture(args) => capture(g, args),
        Command::Attack(args) => attack(g, args),
        Command::Tune => {
            let mut cfg = load_config(g)?;
            cfg.attack.epsilon = None;
            let prep = prepare(&cfg)?;
            let models = defended_models(&prep.weights, &prep.config.defense)?;
            let mut rows = Vec::new();
            for layer in prep.config.layers() {
                for &kind in &prep.config.perm.kinds {
                    let out = vocabmatch::experiment::run_cell(
                        &prep,
                        layer,
                        kind,
                        &prep.config.defense,
                        &models,
                    )?;
                    println!(
                        "layer {layer} {kind:>10}: epsilon {:.6e} ({}/{} tune prompts exact)",
                        out.report.epsilon, out.report.tune_perfect, out.report.tune_prompts
                    );
                    rows.push(out.report);
                }
            }
            if let Some(path) = &g.out {
                write_json(path, &rows)?;
            }
            Ok(())
        }
        Command::Defense(DefenseCmd::Sweep {
            sigmas,
            quant,
            prefix,
        }) => {
            let mut cfg = load_config(g)?;
            cfg.sweep = Some(SweepSection {
                gaussian_sigmas: sigmas.clone(),
                prefix: *prefix,
                quant_bits: quant.clone(),
            });
            cfg.validate()?;
            run_and_write(&cfg)
        }
        Command::Theory(TheoryCmd::Verify { preset }) => {
            let report = verify_preset(*preset, g.seed_exp.unwrap_or(0))?;
            for c in &report.checks {
                println!(
                    "{:<50} empirical {:.4}  analytic {:.4}  n={}  {}",
                    c.label,
                    c.empirical,
                    c.analytic,
                    c.n,
                    if c.pass { "PASS" } else { "FAIL" }
                );
            }
            println!(
                "{}: {}",
                report.preset,
                if report.pass { "PASS" } else { "FAIL" }
            );
            if let Some(path) = &g.out {
                write_json(path, &report)?;
            }
            if report.pass {
                Ok(())
            } else {
                Err(Error::Domain("theory check failed".into()))
            }
        }
        Command::Embedrec(EmbedrecCmd::Run {
            observed,
            layer,
            prompts,
        }) => embedrec(g, *observed, *layer, *prompts),
        Command::Report(ReportCmd::Render { report }) => {
            let path = if report.is_dir() {
                report.join("report.json")
            } else {
                report.clone()
            };
            print!("{}", render(&read_report(&path)?));
            Ok(())
        }
        Command::Run => run_and_write(&load_config(g)?),
    }
}

fn run_and_write(cfg: &ExperimentConfig) -> Result<()> {
    let prep = prepare(cfg)?;
    let report = run_prepared(&prep)?;
    let dir = out_dir(&prep.config);
    write_report(&report, &dir)?;
    print!("{}", render(&report));
    println!("\nwrote {}", dir.join("report.json").display());
    Ok(())
}

fn capture(g: &Global, args: &CaptureArgs) -> Result<()> {
    let model = model_config(g)?;
    let weights = init_model(&model)?;
    let (noise, defense) = match &g.config {
        Some(_) => {
            let cfg = load_config(g)?;
            (cfg.noise(&cfg.defense), cfg.defense.clone())
        }
        None => Default::default(),
    };
    let noise = vocabmatch::defense::NoiseConfig {
        eta: g.eta.unwrap_or(noise.eta),
        defense: noise.defense,
    };
    let (_, server) = defended_models(&weights, &defense)?;
    let tokens = tokenize(&args.text)?;
    let kind = match g.perm.as_deref() {
        None | Some([]) => PermKind::None,
        Some([k]) => *k,
        Some(_) => return Err(Error::Config("capture takes a single --perm kind".into())),
    };
    let root = SeededRng::new(g.seed_exp.unwrap_or(0));
    let mut rng = root.substream("capture");
    let cap = server_capture(&server, tokens.as_slice(), args.layer, &noise, &mut rng)?;
    let spec = if kind == PermKind::None {
        PermutationSpec::none(0)
    } else {
        PermutationSpec::sample(
            kind,
            tokens.len(),
            model.d_model,
            root.substream("capture-perm").seed(),
        )?
    };
    let cap = apply(&spec, &cap)?;
    let path = g
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("capture.hsr"));
    cap.save(&path)?;
    if let Some(p) = &args.spec_out {
        std::fs::write(p, spec.to_json()?)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
    }
    println!(
        "wrote {} ({} x {}, layer {}, {kind})",
        path.display(),
        cap.rows(),
        cap.dim(),
        cap.layer
    );
    Ok(())
}

fn attack(g: &Global, args: &AttackArgs) -> Result<()> {
    let cap = HiddenCapture::load(&args.capture)?;
    let model = model_config(g)?;
    let weights = init_model(&model)?;
    let mode: ProposalMode = args.proposal.into();
    let cfg = AttackConfig {
        epsilon: args.epsilon,
        proposal: mode,
        max_proposal_depth: args.depth,
        matcher: Matcher::for_kind(cap.perm_tag),
        layer: cap.layer,
    };
    let mut proposal: Box<dyn ProposalSource + '_> = match mode {
        ProposalMode::FullScan => Box::new(FullScan::new(model.vocab_size)),
        ProposalMode::ModelLogits => Box::new(ModelProposal::new(&weights)?),
        ProposalMode::Ngram => Box::new(prepare(&load_config(g)?)?.ngram),
    };
    let out = decode(&weights, &cap, &cfg, proposal.as_mut())?;
    println!("{}", detokenize(&out.tokens));
    if let Some(path) = &g.out {
        write_json(path, &out)?;
    }
    Ok(())
}

fn embedrec(g: &Global, observed: usize, layer: usize, prompts: usize) -> Result<()> {
    let cfg = load_config(g)?;
    let prep = prepare(&cfg)?;
    let w = &prep.weights;
    let seeds = prep.config.seeds();
    let root = SeededRng::new(seeds.exp).substream("embedrec");
    let keys = StipKeys::sample(w, &root.substream("keys"))?;
    let wp = stip_transform(w, &keys)?;
    let head = exposed_head(w, &keys)?;
    let eval: Vec<_> = prep
        .corpus
        .eval_tokens()
        .into_iter()
        .take(prompts)
        .collect();
    let first: Vec<u32> = eval
        .iter()
        .flat_map(|p| p.as_slice().iter().copied())
        .take(observed.max(1))
        .collect();
    let obs_rows = stip_inputs(w, &keys, &first)?;
    let obs: Vec<Vec<f32>> = obs_rows.iter_rows().map(<[f32]>::to_vec).collect();
    let recovered = recover_relative_perm(&head, &obs, 0.0)?;
    let exact = &recovered.table == wp.embed();
    println!(
        "relative permutation recovered from {} rows; table exact: {exact}",
        obs.len()
    );
    let attack = AttackConfig::new(layer, PermKind::None);
    let mut proposal = make_proposal(ProposalMode::FullScan, &wp, &prep.ngram)?;
    let noise = prep
        .config
        .noise(&vocabmatch::defense::DefenseConfig::default());
    let mut cards = Vec::new();
    for (j, p) in eval.iter().enumerate() {
        let inputs = stip_inputs(w, &keys, p.as_slice())?;
        let clean = HiddenCapture::from_matrix(forward_embeddings(&wp, &inputs, layer)?, layer);
        let cap = vocabmatch::defense::apply_nondeterminism(
            &clean,
            noise.eta,
            &mut root.substream_indexed("noise", j as u64),
        )?;
        let mut out =
            attack_without_embedding_table(&wp, &recovered, &cap, &attack, proposal.as_mut())?;
        out.tokens = unmap_tokens(&out.tokens, &keys.pi_v);
        cards.push(score(&out, p.as_slice())?);
    }
    let s = summarize(&cards);
    println!(
        "layer {layer}: {:.1}% perfect, ROUGE-L {:.3} over {} prompts",
        s.perfect_rate * 100.0,
        s.mean_rouge_l,
        s.prompts
    );
    if let Some(path) = &g.out {
        write_json(
            path,
            &serde_json::json!({ "table_exact": exact, "layer": layer, "eta": noise.eta, "summary": s }),
        )?;
    }
    Ok(())
}
