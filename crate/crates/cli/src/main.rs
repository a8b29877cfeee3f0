use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use retina_xfer::trainer::InitMode;
use retina_xfer_cli::{commands, report, ConfigError, ExperimentConfig, RunDir};

#[derive(Parser)]
#[command(name = "retina-xfer", version, about = "Transfer-learning sweeps on synthetic fundus tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (overrides `out_dir` from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace the configured sweep seeds, e.g. `--seed-override 4` or `4,5`.
    #[arg(long, global = true, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Worker threads for the sweep (defaults to the available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the three datasets and their manifest.
    GenData,
    /// Pretrain source checkpoints, one per seed.
    Pretrain {
        /// Which pretrained mode to build; all configured ones if omitted.
        #[arg(long, value_enum)]
        mode: Option<PretrainMode>,
    },
    /// Run the grid and stream results.csv.
    Sweep,
    /// Write tables.csv and plots from a complete results.csv.
    Report,
    /// gen-data, pretrain, sweep and report.
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum PretrainMode {
    Source,
    Generic,
}

impl From<PretrainMode> for InitMode {
    fn from(m: PretrainMode) -> Self {
        match m {
            PretrainMode::Source => InitMode::SourcePretrained,
            PretrainMode::Generic => InitMode::GenericPretrained,
        }
    }
}

/// Log lines go to stderr and to the run directory's log file.
struct Tee {
    file: std::fs::File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()?;
        self.file.flush()
    }
}

fn init_logging(run: &RunDir) -> anyhow::Result<()> {
    std::fs::create_dir_all(run.root())?;
    let file = std::fs::OpenOptions::new().create(true).append(true).open(run.log())?;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee { file })))
        .init();
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut exp = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = cli.seed_override {
        exp.sweep.seeds = seeds;
        exp.sweep_config()?;
    }
    if let Some(out) = cli.out {
        exp.out_dir = out;
    }
    let jobs = match cli.jobs {
        Some(0) => return Err(ConfigError("--jobs must be positive".into()).into()),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let run = RunDir::new(&exp.out_dir);
    init_logging(&run)?;
    match cli.command {
        Command::GenData => {
            commands::gen_data(&exp, &run)?;
        }
        Command::Pretrain { mode } => {
            let modes = match mode {
                Some(m) => vec![m.into()],
                None => exp.sweep_config()?.pretrained_modes(),
            };
            commands::pretrain(&exp, &run, &modes)?;
        }
        Command::Sweep => {
            commands::sweep(&exp, &run, jobs)?;
        }
        Command::Report => {
            report::report(&run)?;
        }
        Command::All => {
            commands::all(&exp, &run, jobs)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
