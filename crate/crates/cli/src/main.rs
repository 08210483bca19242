//! `sensorseq`: run the pipeline stage by stage or end to end over a work
//! directory of text artifacts.

mod artifacts;
mod error;
mod stages;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sensorseq::matrix::MatrixFormat;
use sensorseq::pipeline::PipelineConfig;

use crate::artifacts::sha256_hex;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Binary,
}

impl Format {
    pub fn as_str(&self) -> &'static str {
        match self {
            Format::Text => "text",
            Format::Binary => "binary",
        }
    }

    pub fn matrix(&self) -> MatrixFormat {
        match self {
            Format::Text => MatrixFormat::Text,
            Format::Binary => MatrixFormat::Binary,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sensorseq", version, about = "Notification engagement modelling from sparse sensor events")]
struct Cli {
    /// Pipeline config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Derive every seed from this one value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-user parallel work.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Encoding of sample matrices.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Directory holding every artifact.
    #[arg(long, global = true, default_value = "work")]
    work: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted signal.
    Synth,
    /// Check an event log against the schema.
    Validate {
        /// Event log (JSON lines); `events.jsonl` in the work dir by default.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Split users and derive notification labels.
    Label,
    /// Fit the encoder and build the sample matrix.
    Encode {
        /// User profiles (JSON lines); `profiles.jsonl` in the work dir when present.
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// Losslessly merge consecutive sample rows.
    Compress,
    /// Attach per-user class weights to training rows.
    Weigh,
    /// Lay out training sequences into batches.
    Batch,
    /// Train the recurrent model.
    Train,
    /// Score evaluation rows with the trained model.
    Predict,
    /// Score evaluation rows with the click-rate baseline.
    Baseline,
    /// Macro AUC of model and baseline per evaluation segment.
    Eval,
    /// Run every stage in order.
    Pipeline {
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Also produce the weight-strategy and compression comparison tables.
        #[arg(long)]
        tables: bool,
    },
}

/// Everything a stage needs besides its input files.
pub struct Context {
    pub cfg: PipelineConfig,
    pub hash: String,
    pub work: PathBuf,
    pub format: Format,
    pub threads: Option<usize>,
}

impl Context {
    pub fn check_hash(&self, found: &str, path: &Path) {
        if found != self.hash {
            eprintln!(
                "sensorseq: warning: {} was produced by config {found}, current config is {}",
                path.display(),
                self.hash
            );
        }
    }
}

pub fn apply_seed(cfg: &mut PipelineConfig, seed: u64) {
    cfg.synth.seed = seed;
    cfg.seeds.split = seed.wrapping_add(1);
    cfg.seeds.model = seed.wrapping_add(2);
    cfg.seeds.baseline = seed.wrapping_add(3);
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig, CliError> {
    let mut cfg = match path {
        None => PipelineConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            PipelineConfig::from_toml_str(&text)?
        }
    };
    if let Some(s) = seed {
        apply_seed(&mut cfg, s);
    }
    if let Some(schema) = &cfg.schema_path {
        if !schema.is_file() {
            return Err(CliError::Config(format!("schema file {} does not exist", schema.display())));
        }
    }
    cfg.check()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let effective = cfg.to_toml_string();
    fs::create_dir_all(&cli.work).map_err(|e| CliError::Io(format!("{}: {e}", cli.work.display())))?;
    let config_out = cli.work.join("config.toml");
    fs::write(&config_out, &effective).map_err(|e| CliError::Io(format!("{}: {e}", config_out.display())))?;
    let ctx = Context {
        hash: sha256_hex(effective.as_bytes()),
        cfg,
        work: cli.work,
        format: cli.format,
        threads: cli.threads,
    };
    match cli.command {
        Command::Synth => stages::synth(&ctx),
        Command::Validate { events } => stages::validate(&ctx, events.as_deref()),
        Command::Label => stages::label(&ctx),
        Command::Encode { profiles } => stages::encode(&ctx, profiles.as_deref()),
        Command::Compress => stages::compress(&ctx),
        Command::Weigh => stages::weigh(&ctx),
        Command::Batch => stages::batch(&ctx),
        Command::Train => stages::train(&ctx),
        Command::Predict => stages::predict(&ctx),
        Command::Baseline => stages::baseline(&ctx),
        Command::Eval => stages::eval(&ctx),
        Command::Pipeline { events, profiles, tables } => stages::pipeline(&ctx, events.as_deref(), profiles.as_deref(), tables),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
