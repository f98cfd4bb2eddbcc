use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use spm_core::concept::{parse_vocabulary, AnchorPool, WordTokenizer};
use spm_core::error::ErrorCategory;
use spm_core::eval::evaluate;
use spm_core::gating::gate;
use spm_core::registry::{self, check_compatibility, Compatibility};
use spm_core::toy::data::to_ppm;
use spm_core::toy::vocab::default_anchor_vocabulary;
use spm_core::toy::{build_testbed, Testbed, ToyTextEncoder, ToyVocabulary};
use spm_core::trainer::train_membrane_with;
use spm_core::{compose, ConceptEncoding, GateConfig, Membrane, SpmError, TextEncoder, Tokenizer, TrainConfig};

#[derive(Parser)]
#[command(name = "spm", version, about = "Train, gate, compose and evaluate concept-erasing membranes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or derive toy testbeds.
    Testbed {
        #[command(subcommand)]
        action: TestbedAction,
    },
    /// Train a membrane that erases one or more target concepts.
    Train(TrainArgs),
    /// Print the permeability of a membrane for a prompt.
    Gate(GateArgs),
    /// Generate images through a model with membranes applied.
    Compose(ComposeArgs),
    /// Score concepts through a model with membranes applied.
    Eval(EvalArgs),
    /// Print a membrane file's manifest without loading its tensors.
    Inspect {
        file: PathBuf,
    },
    /// Check that a membrane can be applied to a model unchanged.
    TransferCheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spm: PathBuf,
    },
}

#[derive(Subcommand)]
enum TestbedAction {
    /// Pre-train a toy denoiser and classifier.
    Build {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue pre-training an existing testbed on shifted data.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1500)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Concept to erase; repeat for a multi-concept membrane.
    #[arg(long = "target", required = true, num_args = 1..)]
    targets: Vec<String>,
    /// Concept the target is steered toward; empty for the unconditional prompt.
    #[arg(long, default_value = "")]
    surrogate: String,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 1e3)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    anchor_samples: usize,
    /// Newline-delimited candidate anchor concepts.
    #[arg(long)]
    anchor_vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable latent anchoring.
    #[arg(long)]
    no_la: bool,
    /// Print a JSON progress line every N steps (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Save the membrane to the output path every N steps (0 disables).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderKind {
    Toy,
    Plugin,
}

#[derive(Args)]
struct GateArgs {
    #[arg(long)]
    spm: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, value_enum, default_value_t = EncoderKind::Toy)]
    encoder: EncoderKind,
    /// Testbed whose encoder to use (toy encoder only).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Vocabulary seed of the toy encoder when no testbed is given.
    #[arg(long, default_value_t = 0)]
    vocab_seed: u64,
    /// JSON word table for the plugin encoder: {"dim": n, "words": {"word": [..]}}.
    #[arg(long)]
    encoder_table: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    gamma_scale: f64,
    #[arg(long)]
    no_ft: bool,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "spm", num_args = 0..)]
    spms: Vec<PathBuf>,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma_scale: f64,
    /// Bypass gating: every membrane runs at the γ-scale.
    #[arg(long)]
    no_ft: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    sampler_steps: usize,
    /// Pixel upscaling of the written images.
    #[arg(long, default_value_t = 16)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "spm", num_args = 0..)]
    spms: Vec<PathBuf>,
    /// Newline-delimited concepts; every toy concept when omitted.
    #[arg(long)]
    concepts: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    sampler_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma_scale: f64,
    #[arg(long)]
    no_ft: bool,
    #[arg(long)]
    report: PathBuf,
}

/// Mean-pooled word vectors read from a JSON table.
struct TableEncoder {
    dim: usize,
    words: HashMap<String, Vec<f64>>,
}

impl TableEncoder {
    fn load(path: &Path) -> anyhow::Result<Self> {
        #[derive(serde::Deserialize)]
        struct Table {
            dim: usize,
            words: HashMap<String, Vec<f64>>,
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let t: Table = serde_json::from_str(&text).map_err(|e| SpmError::Config(format!("encoder table {}: {e}", path.display())))?;
        if let Some((w, v)) = t.words.iter().find(|(_, v)| v.len() != t.dim) {
            return Err(SpmError::Config(format!("encoder table word {w:?} has width {}, expected {}", v.len(), t.dim)).into());
        }
        Ok(TableEncoder { dim: t.dim, words: t.words.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect() })
    }
}

impl TextEncoder for TableEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> spm_core::Result<ConceptEncoding> {
        let mut acc = ndarray::Array1::zeros(self.dim);
        for tok in WordTokenizer.tokenize(text) {
            if let Some(v) = self.words.get(&tok) {
                acc += &ndarray::Array1::from(v.clone());
            }
        }
        Ok(ConceptEncoding::new(text, acc))
    }
}

fn load_membranes(paths: &[PathBuf]) -> anyhow::Result<Vec<Membrane>> {
    paths
        .iter()
        .map(|p| registry::load(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn gate_config(gamma_scale: f64, no_ft: bool) -> GateConfig {
    GateConfig { gamma_scale, facilitated_transport: !no_ft, ..GateConfig::default() }
}

fn testbed_build(seed: u64, out: &Path) -> anyhow::Result<()> {
    let tb = build_testbed(seed)?;
    tb.save(out)?;
    println!("{}", json!({ "testbed": out, "seed": seed, "frozen_accuracy": tb.frozen_accuracy, "signature_digest": tb.signature().digest() }));
    Ok(())
}

fn testbed_finetune(model: &Path, steps: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    let tb = Testbed::load(model)?.fine_tuned_variant(steps, seed)?;
    tb.save(out)?;
    println!("{}", json!({ "testbed": out, "parent": tb.parent_digest, "frozen_accuracy": tb.frozen_accuracy }));
    Ok(())
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let tb = Testbed::load(&args.model)?;
    let config = TrainConfig {
        eta: args.eta,
        lambda: args.lambda,
        alpha: args.alpha,
        steps: args.steps,
        anchor_samples: args.anchor_samples,
        learning_rate: args.lr,
        batch_size: args.batch,
        seed: args.seed,
        dim: args.dim,
        enable_la: !args.no_la,
        surrogate: args.surrogate.clone(),
        ..TrainConfig::toy()
    };
    let pool = if config.effective_lambda() > 0.0 {
        let vocab = match &args.anchor_vocab {
            Some(p) => parse_vocabulary(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => default_anchor_vocabulary(),
        };
        let cands = vocab.iter().map(|v| tb.encoder.encode(v)).collect::<spm_core::Result<Vec<_>>>()?;
        let targets = args.targets.iter().map(|t| tb.encoder.encode(t)).collect::<spm_core::Result<Vec<_>>>()?;
        Some(AnchorPool::for_targets(cands, &targets, config.alpha)?)
    } else {
        None
    };
    let mut stdout = std::io::stdout().lock();
    let membrane = train_membrane_with(&tb.denoiser, &tb.encoder, &args.targets, &config, pool.as_ref(), |rec, m| {
        let done = rec.step + 1;
        if args.log_every > 0 && (done % args.log_every == 0 || done == config.steps) {
            writeln!(stdout, "{}", serde_json::to_string(rec)?)?;
        }
        if args.checkpoint_every > 0 && done % args.checkpoint_every == 0 && done < config.steps {
            registry::save(m, &args.out)?;
        }
        Ok(())
    })?;
    let file = registry::save(&membrane, &args.out)?;
    writeln!(stdout, "{}", json!({ "saved": file.path, "name": membrane.name, "parameters": membrane.parameter_count() }))?;
    Ok(())
}

fn gate_cmd(args: &GateArgs) -> anyhow::Result<()> {
    let membrane = registry::load(&args.spm)?;
    let cfg = gate_config(args.gamma_scale, args.no_ft);
    let report = match args.encoder {
        EncoderKind::Toy => {
            let encoder = match &args.model {
                Some(dir) => Testbed::load(dir)?.encoder,
                None => ToyTextEncoder::new(ToyVocabulary::new(args.vocab_seed)),
            };
            gate(&membrane, &args.prompt, &encoder, &encoder, &cfg)?
        }
        EncoderKind::Plugin => {
            let path = args
                .encoder_table
                .as_ref()
                .ok_or_else(|| SpmError::Config("--encoder plugin needs --encoder-table FILE".into()))?;
            gate(&membrane, &args.prompt, &WordTokenizer, &TableEncoder::load(path)?, &cfg)?
        }
    };
    println!("{report}");
    Ok(())
}

fn compose_cmd(args: &ComposeArgs) -> anyhow::Result<()> {
    if args.samples == 0 || args.scale == 0 {
        return Err(SpmError::Config("--samples and --scale must be >= 1".into()).into());
    }
    let tb = Testbed::load(&args.model)?;
    let h = compose(load_membranes(&args.spms)?, &tb.denoiser, &tb.encoder, gate_config(args.gamma_scale, args.no_ft))?;
    let gates = h.gates(&args.prompt)?;
    for g in &gates {
        println!("{g}");
    }
    let prompts = vec![args.prompt.as_str(); args.samples];
    let x = h.generate(&prompts, args.sampler_steps, args.seed)?;
    fs::create_dir_all(&args.out)?;
    let labels = tb.classifier.predict(&x)?;
    for (i, row) in x.rows().into_iter().enumerate() {
        fs::write(args.out.join(format!("sample_{i:03}.ppm")), to_ppm(row.as_slice().expect("contiguous"), args.scale))?;
    }
    let samples: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let record = json!({
        "prompt": args.prompt,
        "seed": args.seed,
        "sampler_steps": args.sampler_steps,
        "membranes": h.membranes().iter().map(|m| &m.name).collect::<Vec<_>>(),
        "gamma": gates.iter().map(|g| g.gamma_scaled).collect::<Vec<_>>(),
        "classified_as": labels.iter().map(|&c| spm_core::toy::class_name(c)).collect::<Vec<_>>(),
        "samples": samples,
    });
    fs::write(args.out.join("samples.json"), serde_json::to_vec_pretty(&record)?)?;
    println!("wrote {} samples to {}", args.samples, args.out.display());
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> anyhow::Result<()> {
    let tb = Testbed::load(&args.model)?;
    let concepts = match &args.concepts {
        Some(p) => parse_vocabulary(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => ToyVocabulary::concepts(),
    };
    if concepts.is_empty() {
        return Err(SpmError::Config("concept list is empty".into()).into());
    }
    let h = compose(load_membranes(&args.spms)?, &tb.denoiser, &tb.encoder, gate_config(args.gamma_scale, args.no_ft))?;
    let report = evaluate(&h, &concepts, args.samples, &tb.classifier, args.sampler_steps, args.seed)?;
    fs::write(&args.report, report.to_json()?)?;
    println!("{:<16} {:>8} {:>8} {:>8} {:>9}", "concept", "score", "erased", "acc", "drift");
    for r in &report.rows {
        println!("{:<16} {:>8.4} {:>8.3} {:>8.3} {:>9.5}", r.concept, r.concept_score, r.erasure_rate, r.accuracy, r.drift);
    }
    Ok(())
}

fn transfer_check(model: &Path, spm: &Path) -> anyhow::Result<()> {
    let tb = Testbed::load(model)?;
    let m = registry::load(spm)?;
    match check_compatibility(&m, &tb.signature()) {
        Compatibility::Ok => {
            println!("compatible: `{}` applies to {} unchanged", m.name, model.display());
            Ok(())
        }
        Compatibility::Mismatch(report) => Err(SpmError::Incompatible { membrane: m.name, report }.into()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Testbed { action: TestbedAction::Build { seed, out } } => testbed_build(seed, &out),
        Command::Testbed { action: TestbedAction::Finetune { model, steps, seed, out } } => testbed_finetune(&model, steps, seed, &out),
        Command::Train(args) => train(&args),
        Command::Gate(args) => gate_cmd(&args),
        Command::Compose(args) => compose_cmd(&args),
        Command::Eval(args) => eval_cmd(&args),
        Command::Inspect { file } => {
            print!("{}", registry::inspect(&file)?);
            Ok(())
        }
        Command::TransferCheck { model, spm } => transfer_check(&model, &spm),
    }
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 3,
        ErrorCategory::Incompatible => 4,
        ErrorCategory::Testbed => 5,
        ErrorCategory::Registry => 6,
        ErrorCategory::Training => 7,
        ErrorCategory::Degenerate => 8,
        ErrorCategory::Contract => 9,
        ErrorCategory::Io => 10,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.chain().find_map(|c| c.downcast_ref::<SpmError>()).map(SpmError::category);
            let std_io = e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some());
            let (name, code) = match category {
                Some(c) => (c.name(), exit_code(c)),
                None if std_io => ("io", 10),
                None => ("error", 1),
            };
            eprintln!("error[{name}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
