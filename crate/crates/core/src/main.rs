use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use cotprompt::data::DataConfig;
use cotprompt::experiment::{run_experiment, CheckpointPolicy, ExperimentConfig, Suite};
use cotprompt::harness::{
    compare_reports, decode_one, exit, exit_code, generate_data, prepare_out_dir, read_report, resolve_config, train_run,
    write_resolved, RunConfig, TrainRequest, DEFAULT_RUN_DIR, RUN_DIR_ENV,
};
use cotprompt::lora::LoraSpec;
use cotprompt::training::{AsrSource, Trainable, TrainingMode};

#[derive(Parser)]
#[command(name = "cotprompt", version, about = "Two-pass chain-of-thought speech translation on toy languages")]
struct Cli {
    /// Root for outputs whose location is not given explicitly.
    #[arg(long, global = true, env = RUN_DIR_ENV, default_value = DEFAULT_RUN_DIR)]
    run_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `train.steps=100`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/dev/test manifests for every direction of every pair.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<run-dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Train one system on a generated corpus.
    Train(TrainArgs),
    /// Decode one utterance and print its transcript and translation.
    Decode {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Utterance id from a manifest.
        #[arg(long)]
        id: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// First-pass model for prompting systems.
        #[arg(long)]
        asr_checkpoint: Option<PathBuf>,
        /// Transcript to splice into the prompt instead of a first pass.
        #[arg(long)]
        transcript: Option<String>,
        #[arg(long, default_value_t = cotprompt::eval::DEFAULT_MAX_LEN)]
        max_len: usize,
    },
    /// Train and evaluate the systems of one or more suites.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// table2 … table6; repeatable or comma separated.
        #[arg(long = "suite", value_delimiter = ',')]
        suites: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_enum)]
        checkpoints: Option<PolicyArg>,
        /// Defaults to `<run-dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Compare the seed means of two `report.jsonl` files.
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus written by generate-data. Defaults to `<run-dir>/data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Defaults to `<run-dir>/train`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Transcript source; required with `--mode cot-prompting`.
    #[arg(long, value_enum)]
    asr_source: Option<SourceArg>,
    /// Substitution probability for `--asr-source corrupted`.
    #[arg(long)]
    sub_prob: Option<f64>,
    #[arg(long)]
    asr_checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    trainable: Option<TrainableArg>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train a text-only system.
    #[arg(long)]
    text_only: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, ValueEnum)]
enum ModeArg {
    Baseline,
    CotPrediction,
    CotPrompting,
}

#[derive(Copy, Clone, ValueEnum)]
enum SourceArg {
    GroundTruth,
    Hypothesis,
    Corrupted,
}

#[derive(Copy, Clone, ValueEnum)]
enum TrainableArg {
    Full,
    LoraOnly,
}

#[derive(Copy, Clone, ValueEnum)]
enum PolicyArg {
    Train,
    Reuse,
    LoadOnly,
}

/// Error that maps to the usage exit code without going through the library.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<Usage>().is_some() {
                exit::USAGE
            } else {
                e.chain()
                    .find_map(|c| c.downcast_ref::<cotprompt::Error>())
                    .map_or(exit::OTHER, exit_code)
            };
            ExitCode::from(code as u8)
        }
    }
}

fn logger() -> impl FnMut(&str) {
    let start = Instant::now();
    move |m: &str| eprintln!("[{:>7.1}s] {m}", start.elapsed().as_secs_f64())
}

fn or_default(p: Option<PathBuf>, run_dir: &Path, sub: &str) -> PathBuf {
    p.unwrap_or_else(|| run_dir.join(sub))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let run_dir = cli.run_dir;
    match cli.command {
        Command::GenerateData {
            cfg,
            out,
            seed,
            vocab_size,
            force,
        } => {
            let mut config: DataConfig = resolve_config(cfg.config.as_deref(), &cfg.overrides)?;
            config.seed = seed.unwrap_or(config.seed);
            config.vocab_size = vocab_size.unwrap_or(config.vocab_size);
            let out = or_default(out, &run_dir, "data");
            let paths = generate_data(&out, &config, force)?;
            println!("wrote {} manifests under {}", paths.len(), out.display());
        }
        Command::Train(args) => train(args, &run_dir)?,
        Command::Decode {
            data,
            id,
            checkpoint,
            asr_checkpoint,
            transcript,
            max_len,
        } => {
            let data = or_default(data, &run_dir, "data");
            let o = decode_one(&data, &id, &checkpoint, asr_checkpoint.as_deref(), transcript.as_deref(), max_len)?;
            println!("source:      {}", o.utterance.source_text);
            if let Some(t) = &o.transcript {
                println!("transcript:  {t}");
            }
            println!("translation: {}", o.translation);
            println!("reference:   {}", o.utterance.target_text);
        }
        Command::Evaluate {
            cfg,
            suites,
            seeds,
            checkpoints,
            out,
            force,
        } => {
            let mut config: ExperimentConfig = resolve_config(cfg.config.as_deref(), &cfg.overrides)?;
            if !suites.is_empty() {
                config.suites = suites.iter().map(|s| Suite::parse(s)).collect::<cotprompt::Result<_>>()?;
            }
            if !seeds.is_empty() {
                config.seeds = seeds;
            }
            if let Some(p) = checkpoints {
                config.checkpoints = match p {
                    PolicyArg::Train => CheckpointPolicy::Train,
                    PolicyArg::Reuse => CheckpointPolicy::Reuse,
                    PolicyArg::LoadOnly => CheckpointPolicy::LoadOnly,
                };
            }
            let out = or_default(out, &run_dir, "eval");
            if config.checkpoints == CheckpointPolicy::Train {
                prepare_out_dir(&out, force)?;
            }
            write_resolved(&out, &config)?;
            let mut log = logger();
            let report = run_experiment(&config, Some(&out), &mut log)?;
            report.write(&out)?;
            print!("{}", report.to_text());
        }
        Command::Compare { a, b } => {
            let ra = read_report(&a).with_context(|| format!("reading {}", a.display()))?;
            let rb = read_report(&b).with_context(|| format!("reading {}", b.display()))?;
            print!("{}", compare_reports(&ra, &rb));
        }
    }
    Ok(())
}

fn train(args: TrainArgs, run_dir: &Path) -> anyhow::Result<()> {
    let mut config: RunConfig = resolve_config(args.cfg.config.as_deref(), &args.cfg.overrides)?;
    let source = match (args.asr_source, args.sub_prob) {
        (Some(SourceArg::Corrupted), Some(p)) => Some(AsrSource::Corrupted(p)),
        (Some(SourceArg::Corrupted), None) => return Err(Usage("--asr-source corrupted needs --sub-prob".into()).into()),
        (Some(SourceArg::GroundTruth), _) => Some(AsrSource::GroundTruth),
        (Some(SourceArg::Hypothesis), _) => Some(AsrSource::Hypothesis),
        (None, Some(_)) => return Err(Usage("--sub-prob needs --asr-source corrupted".into()).into()),
        (None, None) => None,
    };
    config.mode = match (args.mode, source) {
        (Some(ModeArg::Baseline), None) => TrainingMode::Baseline,
        (Some(ModeArg::Baseline), Some(_)) => return Err(Usage("baseline training takes no transcript source".into()).into()),
        (Some(ModeArg::CotPrediction), s) => TrainingMode::cot_prediction(s.unwrap_or(AsrSource::GroundTruth))?,
        (Some(ModeArg::CotPrompting), Some(s)) => TrainingMode::CotPrompting { asr_source: s },
        (Some(ModeArg::CotPrompting), None) => {
            return Err(Usage("--mode cot-prompting needs --asr-source ground-truth|hypothesis|corrupted".into()).into())
        }
        (None, Some(s)) => match config.mode {
            TrainingMode::Baseline => return Err(Usage("--asr-source needs a chain-of-thought --mode".into()).into()),
            TrainingMode::CotPrediction { .. } => TrainingMode::cot_prediction(s)?,
            TrainingMode::CotPrompting { .. } => TrainingMode::CotPrompting { asr_source: s },
        },
        (None, None) => config.mode,
    };
    if let Some(r) = args.lora_rank {
        config.lora = Some(LoraSpec::uniform(r));
    }
    if let Some(t) = args.trainable {
        config.train.trainable = match t {
            TrainableArg::Full => Trainable::Full,
            TrainableArg::LoraOnly => Trainable::LoraOnly,
        };
    }
    if config.train.trainable == Trainable::LoraOnly && config.lora.is_none() {
        return Err(Usage("--trainable lora-only needs --lora-rank or a [lora] section".into()).into());
    }
    if let Some(s) = args.steps {
        config.train.steps = s;
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    if args.text_only {
        config.speech_input = false;
    }
    let data = or_default(args.data, run_dir, "data");
    let out = or_default(args.out, run_dir, "train");
    let mut log = logger();
    let summary = train_run(
        &TrainRequest {
            data_dir: &data,
            out: &out,
            config: &config,
            asr_checkpoint: args.asr_checkpoint.as_deref(),
            init_from: args.init_from.as_deref(),
            force: args.force,
        },
        &mut log,
    )?;
    println!("checkpoint: {}", summary.checkpoint.display());
    println!("examples: {}", summary.examples);
    println!("final loss: {:.4}", summary.final_loss);
    println!("trainable parameters: {}", summary.trainable_params);
    if let Some((added, expected)) = summary.lora_params {
        println!("lora parameters added: {added} (closed form {expected})");
    }
    Ok(())
}
