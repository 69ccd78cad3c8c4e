#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use textkd::checkpoint;
use textkd::config::{Mode, TrainConfig};
use textkd::corpus::{build_vocab, read_corpus};
use textkd::diagnostics::{self, AuditConfig, AuditTarget, TwoWordConfig};
use textkd::eval::{self, BleuOptions, BleuWeights, EvalProtocol, Granularity, DEFAULT_EVAL_SEED};
use textkd::training::{TrainState, Trainer};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "textkd", version, about = "Character-level adversarial text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator, writing checkpoints and metrics into the run directory.
    Train(TrainArgs),
    /// Sample sentences from a checkpoint.
    Generate(GenerateArgs),
    /// BLEU-{2,3,4} and JSD-{1..4} of a checkpoint against a reference corpus.
    Eval(EvalArgs),
    /// Gradient audit and the two-word separability experiment.
    Diag {
        #[command(subcommand)]
        command: DiagCommand,
    },
    /// Print the default configuration.
    Config,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value configuration file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus, one sentence per line.
    #[arg(long)]
    data: PathBuf,
    /// Run directory.
    #[arg(long, env = "TEXTKD_RUN_DIR")]
    out: PathBuf,
    /// What the critic sees as real text (config key `mode`).
    #[arg(long)]
    mode: Option<ModeArg>,
    /// Config key `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Config key `iterations`. With --resume, the iteration to stop at.
    #[arg(long)]
    iterations: Option<u64>,
    /// Any config key, as key=value. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint directory instead of starting fresh.
    #[arg(long, conflicts_with_all = ["config", "mode", "seed", "overrides"])]
    resume: Option<PathBuf>,
    /// Suppress per-evaluation progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Textkd,
    Iwgan,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Textkd => Mode::TextKd,
            ModeArg::Iwgan => Mode::Iwgan,
        }
    }
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long, default_value_t = 10)]
    num_batches: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Noise seed; defaults to the evaluation seed mixed with the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Write sentences here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference corpus, one sentence per line.
    #[arg(long)]
    reference: PathBuf,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long, value_enum, default_value_t = GranularityArg::Word)]
    bleu_granularity: GranularityArg,
    #[arg(long, value_enum, default_value_t = WeightsArg::Uniform)]
    bleu_weights: WeightsArg,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the scored candidates, one per line.
    #[arg(long)]
    candidates: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Word,
    Char,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightsArg {
    Uniform,
    Inverse,
}

#[derive(Subcommand)]
enum DiagCommand {
    /// Compare analytic gradients with central differences; exit 0 iff every group passes.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Perturb one group's analytic gradient, as GROUP=SCALE, to check the audit itself.
        #[arg(long, value_name = "GROUP=SCALE")]
        fault: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Critic accuracy on one-hot, softened and identical two-word geometries.
    TwoWord {
        #[arg(long, default_value_t = 0.2)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// An error attributable to the invocation rather than the work.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist or is not a file", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist or is not a directory", path.display())))
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            require_file(p, "config file")?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    require_file(&args.data, "training corpus")?;
    let (state, until, sentences) = match &args.resume {
        Some(ckpt) => {
            require_dir(ckpt, "checkpoint")?;
            let state = checkpoint::load(ckpt)?;
            let sentences = read_corpus(&args.data, state.config.lowercase)?;
            let until = args.iterations.unwrap_or(state.config.iterations);
            if until < state.iteration {
                bail!(usage(format!(
                    "checkpoint is already at iteration {}, past --iterations {until}",
                    state.iteration
                )));
            }
            (state, until, sentences)
        }
        None => {
            let cfg = train_config(&args)?;
            let sentences = read_corpus(&args.data, cfg.lowercase)?;
            let vocab = build_vocab(&sentences, cfg.max_chars)?;
            let until = cfg.iterations;
            (TrainState::init(cfg, vocab)?, until, sentences)
        }
    };
    let data = sentences
        .iter()
        .map(|s| state.vocab.encode(s, state.config.seq_len))
        .collect();
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("config.txt"), state.config.to_text())
        .with_context(|| format!("writing {}", args.out.join("config.txt").display()))?;
    let mode = state.config.mode;
    let mut trainer = Trainer::new(state, data)?;
    let quiet = args.quiet;
    trainer.run(until, Some(&args.out), |r| {
        if let (Some(j), false) = (r.jsd1, quiet) {
            eprintln!(
                "[{mode}] iteration {:>7}  L_D {:>9.4}  L_G {:>9.4}  JSD-1 {j:.4}",
                r.iteration,
                r.l_d.unwrap_or(f64::NAN),
                r.l_g.unwrap_or(f64::NAN)
            );
        }
    })?;
    Ok(())
}

fn sampling_seed(s: &SamplingArgs, run_seed: u64) -> u64 {
    s.seed.unwrap_or(DEFAULT_EVAL_SEED ^ run_seed)
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    require_dir(&args.checkpoint, "checkpoint")?;
    let state = checkpoint::load(&args.checkpoint)?;
    let seed = sampling_seed(&args.sampling, state.config.seed);
    let samples = eval::generate_samples(
        &state.generator,
        &state.vocab,
        args.sampling.num_batches,
        args.sampling.batch_size,
        seed,
    )?;
    let mut text = samples.join("\n");
    text.push('\n');
    emit(args.out.as_deref(), &text)
}

fn evaluate(args: EvalArgs) -> anyhow::Result<()> {
    require_dir(&args.checkpoint, "checkpoint")?;
    require_file(&args.reference, "reference corpus")?;
    let state = checkpoint::load(&args.checkpoint)?;
    let references = read_corpus(&args.reference, state.config.lowercase)?;
    let protocol = EvalProtocol {
        num_batches: args.sampling.num_batches,
        batch_size: args.sampling.batch_size,
        seed: sampling_seed(&args.sampling, state.config.seed),
        bleu: BleuOptions {
            granularity: match args.bleu_granularity {
                GranularityArg::Word => Granularity::Word,
                GranularityArg::Char => Granularity::Char,
            },
            weights: match args.bleu_weights {
                WeightsArg::Uniform => BleuWeights::Uniform,
                WeightsArg::Inverse => BleuWeights::Inverse,
            },
        },
    };
    let (report, candidates) = eval::evaluate(
        &state.generator,
        &state.vocab,
        &references,
        &protocol,
        state.config.mode,
        state.iteration,
    )?;
    if let Some(p) = &args.candidates {
        let mut text = candidates.join("\n");
        text.push('\n');
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(args.out.as_deref(), &(report.to_json() + "\n"))
}

/// Returns whether the audit passed.
fn diag(command: DiagCommand) -> anyhow::Result<bool> {
    match command {
        DiagCommand::Gradcheck {
            seed,
            eps,
            tol,
            fault,
            out,
        } => {
            let fault = match fault {
                Some(f) => {
                    let (group, scale) = f
                        .split_once('=')
                        .ok_or_else(|| usage(format!("--fault expects GROUP=SCALE, got {f:?}")))?;
                    let scale: f64 = scale
                        .parse()
                        .map_err(|_| usage(format!("--fault scale {scale:?} is not a number")))?;
                    Some((group.to_owned(), scale))
                }
                None => None,
            };
            let cfg = AuditConfig {
                seed,
                eps,
                rel_tol: tol,
                fault,
                ..AuditConfig::default()
            };
            let report = diagnostics::grad_audit(&AuditTarget::ALL, &cfg)?;
            emit(out.as_deref(), &report.to_text())?;
            if !report.passed() {
                eprintln!("gradient audit failed for: {}", report.failing_groups().join(", "));
            }
            Ok(report.passed())
        }
        DiagCommand::TwoWord { radius, seed, out } => {
            let cfg = TwoWordConfig {
                radius,
                seed,
                ..TwoWordConfig::default()
            };
            let r = diagnostics::two_word_experiment(&cfg)?;
            let text = [&r.one_hot, &r.softened, &r.control]
                .iter()
                .map(|s| s.to_text())
                .collect::<Vec<_>>()
                .join("\n");
            emit(out.as_deref(), &text)?;
            Ok(true)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.is::<Usage>() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<textkd::Error>() {
        Some(err) if err.is_divergence() => EXIT_DIVERGED,
        Some(textkd::Error::Config { .. }) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => evaluate(a),
        Command::Diag { command } => diag(command).and_then(|ok| {
            if ok {
                Ok(())
            } else {
                Err(anyhow::anyhow!("diagnostic failed"))
            }
        }),
        Command::Config => emit(None, &TrainConfig::default().to_text()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
