//! `svs`: data preparation, codec and model training, prompt-driven
//! synthesis and objective evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use svs_core::features::CorpusKind;
use svs_core::toy::ToyConfig;
use svs_core::Result;

use commands::{Ctx, SynthArgs};
use config::RunConfig;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("SVS_GIT_DESCRIBE"), ")");

#[derive(Parser)]
#[command(name = "svs", version = VERSION, about = "Prompt-controllable singing voice synthesis")]
struct Cli {
    /// TOML run configuration layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override applied after the config file, e.g. `model.hidden=96`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding this run's artifacts.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy corpus and evaluation requests.
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ToyConfig::default().melodies)]
        melodies: usize,
        /// Attribute combinations each melody is rendered in (1 to 12).
        #[arg(long, default_value_t = ToyConfig::default().renditions)]
        renditions: usize,
        #[arg(long, default_value_t = ToyConfig::default().eval_melodies)]
        eval_melodies: usize,
    },
    /// Validate a manifest and store the accepted rows in the run directory.
    PrepareData {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<CorpusKind>,
    },
    /// Train the codec and the evaluation gender classifier.
    TrainCodec,
    /// Encode a waveform into acoustic units.
    Encode {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode acoustic units into a waveform.
    Decode {
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the prompt encoder and train the transformer.
    TrainModel,
    /// Synthesize singing from a prompt, a melody and lyrics.
    Synthesize {
        #[arg(long)]
        prompt: String,
        /// F0 contour, one value in Hz per frame (0 = unvoiced).
        #[arg(long)]
        melody: PathBuf,
        /// One `phoneme seconds` pair per line.
        #[arg(long)]
        lyrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Intended labels for evaluation, e.g. `gender=female,volume=high`.
        /// Defaults to the prompt encoder's prediction.
        #[arg(long)]
        labels: Option<String>,
    },
    /// Score synthesized outputs (record files or directories of them).
    Evaluate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_kind(s: &str) -> std::result::Result<CorpusKind, String> {
    s.parse().map_err(|e: svs_core::Error| e.to_string())
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::ToyCorpus { .. } => "toy-corpus",
            Command::PrepareData { .. } => "prepare-data",
            Command::TrainCodec => "train-codec",
            Command::Encode { .. } => "encode",
            Command::Decode { .. } => "decode",
            Command::TrainModel => "train-model",
            Command::Synthesize { .. } => "synthesize",
            Command::Evaluate { .. } => "evaluate",
        }
    }

    /// Commands whose artifacts are worth a run record.
    fn records_run(&self) -> bool {
        !matches!(self, Command::ToyCorpus { .. } | Command::Encode { .. } | Command::Decode { .. })
    }
}

fn run(cli: Cli) -> Result<String> {
    let mut config = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(dir) = cli.run_dir {
        config.paths.run_dir = dir;
    }
    config.check_paths()?;
    config.model.validate()?;
    config.codec.validate()?;
    eprintln!("# resolved configuration\n{}", config.to_toml()?);

    let ctx = Ctx {
        config,
        argv: std::env::args().collect(),
        version: VERSION.to_string(),
        command: cli.command.name(),
    };
    let outcome = match &cli.command {
        Command::ToyCorpus {
            out,
            melodies,
            renditions,
            eval_melodies,
        } => {
            let toy = ToyConfig {
                melodies: *melodies,
                renditions: *renditions,
                eval_melodies: *eval_melodies,
                sample_rate: ctx.config.codec.sample_rate,
                hop: ctx.config.codec.hop,
                volume_bands: ctx.config.prompt.labels.volume_bands,
                seed: ctx.config.require_seed()?,
                ..ToyConfig::default()
            };
            commands::toy_corpus(out, &toy)?
        }
        Command::PrepareData { manifest, kind } => commands::prepare_data(&ctx, manifest.as_deref(), *kind)?,
        Command::TrainCodec => commands::train_codec_cmd(&ctx)?,
        Command::Encode { audio, out } => commands::encode_cmd(&ctx, audio, out)?,
        Command::Decode { units, out } => commands::decode_cmd(&ctx, units, out)?,
        Command::TrainModel => commands::train_model(&ctx)?,
        Command::Synthesize {
            prompt,
            melody,
            lyrics,
            out,
            labels,
        } => commands::synthesize_cmd(
            &ctx,
            &SynthArgs {
                prompt,
                melody,
                lyrics,
                out,
                labels: labels.as_deref(),
            },
        )?,
        Command::Evaluate { inputs, report } => commands::evaluate_cmd(&ctx, inputs, report)?,
    };
    if cli.command.records_run() {
        ctx.write_run_record(&outcome)?;
    }
    Ok(outcome)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .without_time()
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            println!("{outcome}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
