use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use filmvox::trainer::TrainMode;
use filmvox_cli::config::{MaskPolicy, SaliencyInput};
use filmvox_cli::{
    cmd_eval, cmd_preprocess, cmd_report, cmd_saliency, cmd_synth, cmd_train, core_exit_code,
    load_config, CliError, Manifest, Overrides, PipelineConfig, SeedTarget,
};

/// Movie-to-fMRI encoding and decoding pipeline.
///
/// Every flag can also be set through the matching FILMVOX_* environment
/// variable; flags win over the environment, which wins over --config.
#[derive(Parser)]
#[command(name = "filmvox", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct Flags {
    /// JSON pipeline config (complete; see `filmvox config`)
    #[arg(long, env = "FILMVOX_CONFIG")]
    config: Option<PathBuf>,
    /// Seed of the section this command runs
    #[arg(long, env = "FILMVOX_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "FILMVOX_MODE", value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long, env = "FILMVOX_MASK", value_enum)]
    mask: Option<MaskPolicy>,
    #[arg(long, env = "FILMVOX_EPSILON")]
    epsilon: Option<f64>,
    #[arg(long, env = "FILMVOX_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "FILMVOX_DELAY_TR")]
    delay_tr: Option<usize>,
    #[arg(long, env = "FILMVOX_TOP_FRACTION")]
    top_fraction: Option<f64>,
    #[arg(long, env = "FILMVOX_SHUFFLES")]
    shuffles: Option<usize>,
    /// Decoder input for saliency
    #[arg(long, env = "FILMVOX_INPUT", value_enum)]
    input: Option<SaliencyInput>,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse::<TrainMode>().map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the default config as JSON
    Config,
    /// Generate a synthetic raw dataset with ground truth
    Synth {
        #[arg(long, env = "FILMVOX_OUT")]
        out: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Chunk stimuli, align fMRI, build the voxel mask and split
    Preprocess {
        raw: PathBuf,
        #[arg(long, env = "FILMVOX_OUT")]
        out: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Train a model on a preprocessed dataset
    Train {
        data: PathBuf,
        #[arg(long, env = "FILMVOX_OUT")]
        out: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Held-out metrics and shuffle nulls for a run
    Eval {
        run: PathBuf,
        /// Run name in reports (default: directory name)
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Decoder saliency for a run
    Saliency {
        run: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Compare evaluated runs
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, env = "FILMVOX_OUT")]
        out: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode,
            mask: self.mask,
            epsilon: self.epsilon,
            epochs: self.epochs,
            delay_tr: self.delay_tr,
            top_fraction: self.top_fraction,
            shuffles: self.shuffles,
            saliency_input: self.input,
        }
    }

    /// `--config`, else the run's own config.json when `run` is given, else defaults.
    fn resolve(&self, run: Option<&Path>, target: SeedTarget) -> Result<PipelineConfig, CliError> {
        let mut cfg = match (&self.config, run.map(|r| r.join("config.json"))) {
            (Some(p), _) => load_config(p)?,
            (None, Some(p)) if p.is_file() => load_config(&p)?,
            _ => PipelineConfig::default(),
        };
        cfg.apply(&self.overrides(), target);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(dir: &Path, m: &Manifest) -> anyhow::Result<()> {
    let hash = filmvox_cli::manifest_hash(dir)?;
    println!(
        "{}: {} files written to {}",
        m.command,
        m.files.len(),
        dir.display()
    );
    println!("manifest sha256 {hash}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Config => {
            println!(
                "{}",
                serde_json::to_string_pretty(&PipelineConfig::default())?
            );
        }
        Cmd::Synth { out, flags } => {
            let cfg = flags.resolve(None, SeedTarget::Synth)?;
            let m = cmd_synth(&cfg, &out).context("synth failed")?;
            report(&out, &m)?;
        }
        Cmd::Preprocess { raw, out, flags } => {
            let cfg = flags.resolve(None, SeedTarget::Split)?;
            let m = cmd_preprocess(&raw, &out, &cfg).context("preprocess failed")?;
            report(&out, &m)?;
        }
        Cmd::Train { data, out, flags } => {
            let cfg = flags.resolve(None, SeedTarget::Train)?;
            let m = cmd_train(&data, &out, &cfg).context("train failed")?;
            report(&out, &m)?;
        }
        Cmd::Eval { run, name, flags } => {
            let cfg = flags.resolve(Some(&run), SeedTarget::Eval)?;
            let name = name.unwrap_or_else(|| {
                run.canonicalize()
                    .unwrap_or_else(|_| run.clone())
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".into())
            });
            let m = cmd_eval(&run, &cfg, &name).context("eval failed")?;
            report(&run.join("eval"), &m)?;
        }
        Cmd::Saliency { run, flags } => {
            let cfg = flags.resolve(Some(&run), SeedTarget::None)?;
            let m = cmd_saliency(&run, &cfg).context("saliency failed")?;
            report(&run.join("saliency"), &m)?;
        }
        Cmd::Report { runs, out, flags } => {
            let cfg = flags.resolve(None, SeedTarget::None)?;
            let m = cmd_report(&runs, &out, &cfg).context("report failed")?;
            report(&out, &m)?;
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CliError>() {
            return c.exit_code() as u8;
        }
        if let Some(c) = cause.downcast_ref::<filmvox::Error>() {
            return core_exit_code(c) as u8;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
