use apcsim::cli::{self, RunOpts, SweepVariable};
use apcsim::config::ExperimentConfig;
use apcsim::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "apcsim", about = "Analog compute-in-memory noise simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Rayon thread count (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a reference model and save its manifest.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Calibrate quantization ranges on the train split.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate clean / quantized / noisy accuracy.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Energy allocation checkpoint (alloc.json) to evaluate under.
        #[arg(long)]
        alloc: Option<PathBuf>,
        /// Uniform energy per MAC (overrides the config budget).
        #[arg(long)]
        uniform_energy: Option<f64>,
    },
    /// Per-layer effective-bits report and low-bit equivalence check.
    NoiseBits {
        #[command(flatten)]
        common: Common,
    },
    /// Learn an energy allocation under the configured budget.
    Optimize {
        #[command(flatten)]
        common: Common,
    },
    /// Binary-search the minimum feasible energy per granularity.
    Search {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one variable over a grid and record noisy accuracy.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of: sigma_t, percentile, e_uniform.
        #[arg(long)]
        variable: SweepVariable,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common }
            | Command::Calibrate { common }
            | Command::NoiseBits { common }
            | Command::Optimize { common }
            | Command::Search { common } => common,
            Command::Eval { common, .. } | Command::Sweep { common, .. } => common,
        }
    }
}

fn run(cmd: &Command) -> apcsim::Result<bool> {
    let common = cmd.common();
    let mut cfg = ExperimentConfig::load(&common.config)?;
    cli::apply_overrides(
        &mut cfg,
        &RunOpts {
            seed: common.seed,
            threads: common.threads,
            out: common.out.clone(),
        },
    );
    match cmd {
        Command::Train { .. } => cli::cmd_train(&cfg)?,
        Command::Calibrate { .. } => cli::cmd_calibrate(&cfg)?,
        Command::Eval {
            alloc,
            uniform_energy,
            ..
        } => cli::cmd_eval(&cfg, alloc.as_deref(), *uniform_energy)?,
        Command::NoiseBits { .. } => cli::cmd_noise_bits(&cfg)?,
        Command::Optimize { .. } => cli::cmd_optimize(&cfg)?,
        Command::Search { .. } => return cli::cmd_search(&cfg),
        Command::Sweep { variable, grid, .. } => cli::cmd_sweep(&cfg, *variable, grid)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    // exit 2 is reserved for infeasible searches, so usage errors map to the
    // config-error code instead of clap's default
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            e.exit()
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(3);
        }
    };
    match run(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("search: no feasible energy budget for at least one arm");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 3,
                Error::Data(_) | Error::Io(_) | Error::Json(_) => 4,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
