use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wintr_core::dataset::{generate, save_dataset};
use wintr_core::experiment::{ablate, diagnose_checkpoint, run, DataSource, RunConfig, Variant};
use wintr_core::Error;

/// Two-token vision transformer for unsupervised domain adaptation.
#[derive(Parser)]
#[command(name = "wintr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain on source, then train the full method; writes report.csv,
    /// summary.json and checkpoints.
    Run(Common),
    /// Run the full method and the listed variants side by side.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Variant to compare against the full method (repeatable).
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
    },
    /// Token-similarity histogram and cross-head accuracy table for a
    /// checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate the configured synthetic task into `<out>/source` and
    /// `<out>/target`.
    GenData(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed (the data seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory holding `source/` and `target/`.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if let Some(dir) = &self.data {
            config.data = DataSource::Directory {
                source: dir.join("source"),
                target: dir.join("target"),
            };
        }
        config.validate()?;
        Ok(config)
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_data(common: &Common) -> Result<(), Error> {
    let config = common.resolve()?;
    let mut spec = match config.data {
        DataSource::Synthetic(spec) => spec,
        DataSource::Directory { .. } => {
            return Err(Error::Config("gen-data needs a synthetic data section".into()))
        }
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let (source, target) = generate(&spec)?;
    let out: &Path = &config.out_dir;
    save_dataset(&source, &out.join("source"))?;
    save_dataset(&target, &out.join("target"))?;
    println!("wrote {} source and {} target samples to {}", source.len(), target.len(), out.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(common) => print_json(&run(&common.resolve()?)?),
        Command::Ablate { common, variants } => {
            let config = common.resolve()?;
            let variants = variants
                .iter()
                .map(|v| v.parse::<Variant>())
                .collect::<Result<Vec<_>, _>>()?;
            print_json(&ablate(&config, &variants)?)
        }
        Command::Diagnose { common, checkpoint } => {
            print_json(&diagnose_checkpoint(&checkpoint, &common.resolve()?)?)
        }
        Command::GenData(common) => gen_data(&common),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Field { .. } | Error::Parameter { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("WINTR_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
