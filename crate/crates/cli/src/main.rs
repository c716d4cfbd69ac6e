use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualcontrast::trainer::Ablation;
use dualcontrast_cli::{commands, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "dualcontrast", version, about = "Content/transformation disentanglement with DualContrast")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as a DCSET1 container into --out.
    GenData(RunArgs),
    /// Train a model; the output directory becomes the run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the latest periodic checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Probe scores, SAP, optional clustering and a latent CSV for a run.
    Eval {
        /// Run directory holding run.toml and model.bin.
        #[arg(long)]
        run: PathBuf,
        /// Evaluate on the dataset of this config instead of the run's own.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write outputs here instead of the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Content/transformation transfer grid as PNG.
    Grid {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        /// PNG path; defaults to grid.png in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: dualcontrast::Error| e.to_string())
}

impl RunArgs {
    /// The config file with command-line overrides applied.
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(a) = self.ablation {
            cfg.train.ablation = a;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => {
            let path = commands::gen_data(&args.resolve()?)?;
            println!("{}", path.display());
        }
        Command::Train { run, resume } => {
            let path = commands::train(&run.resolve()?, resume)?;
            println!("{}", path.display());
        }
        Command::Eval { run, config, out } => {
            let data = config.map(RunConfig::load).transpose()?;
            let report = commands::eval(&run, data.as_ref(), out.as_deref())?;
            println!("{}", report.to_json()?);
        }
        Command::Grid { run, rows, cols, out } => {
            let path = commands::grid(&run, rows, cols, out.as_deref())?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
