use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smcs::config::{BuiltTarget, RunConfig};
use smcs::engine::FrozenSchedule;
use smcs::error::SmcError;
use smcs::experiments;

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTICLE_DEATH: u8 = 3;
const EXIT_IO: u8 = 4;

/// Sequential Monte Carlo samplers: tempering, partial posteriors and
/// genealogy-based error estimates.
#[derive(Parser)]
#[command(name = "smcs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One sampler run: trace.csv, summary.csv, frozen.json.
    Run(Common),
    /// Gaussian scaling study over dimensions and particle regimes.
    Scaling(Common),
    /// Sequential assimilation of logistic regression data in batches.
    Logistic(Common),
    /// Geometric versus partial-posterior path on one logistic target.
    ComparePaths(Common),
    /// Particle independent Metropolis-Hastings on a frozen schedule.
    Pimh(Common),
    /// Independent repeats combined by their normalizing-constant estimates.
    Combine(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, SmcError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        Ok(cfg)
    }
}

fn exit_code(err: &SmcError) -> u8 {
    match err {
        e if e.is_particle_death() => EXIT_PARTICLE_DEATH,
        SmcError::Io(_) | SmcError::Csv(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn execute(command: &Command) -> Result<PathBuf, SmcError> {
    let (name, common) = match command {
        Command::Run(c) => ("run", c),
        Command::Scaling(c) => ("scaling", c),
        Command::Logistic(c) => ("logistic", c),
        Command::ComparePaths(c) => ("compare-paths", c),
        Command::Pimh(c) => ("pimh", c),
        Command::Combine(c) => ("combine", c),
    };
    if let Some(threads) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .map_err(|e| SmcError::config(e.to_string()))?;
    }
    let cfg = common.load()?;
    let dir = common.out.join(name);
    match command {
        Command::Run(_) => {
            let output = match experiments::run_single(&cfg) {
                Ok(o) => o,
                Err(SmcError::ParticleDeath { step, trace }) => {
                    let partial = dir.join("trace.partial.csv");
                    fs::create_dir_all(&dir)?;
                    smcs::engine::write_trace(fs::File::create(&partial)?, &trace)?;
                    return Err(SmcError::ParticleDeath { step, trace });
                }
                Err(e) => return Err(e),
            };
            experiments::write_single(&dir, &output)?;
            log::info!("log Z = {} after {} steps", output.log_z(), output.steps());
        }
        Command::Scaling(_) => {
            let rows = experiments::run_scaling_study(&cfg.scaling, cfg.run.seed)?;
            experiments::write_scaling(&dir, &rows)?;
        }
        Command::Logistic(_) => {
            let rows = experiments::run_logistic_sequence(&cfg)?;
            experiments::write_logistic(&dir, &rows)?;
            if cfg.target.laplace {
                if let BuiltTarget::Logistic { model, .. } = cfg.build_target()? {
                    let (ess, log_z) = experiments::laplace_importance_sampling(&model, cfg.run.n, cfg.run.seed)?;
                    let mut f = fs::File::create(dir.join("laplace.csv"))?;
                    writeln!(f, "ess_fraction,log_z\n{ess},{log_z}")?;
                }
            }
        }
        Command::ComparePaths(_) => {
            let rows = experiments::run_path_comparison(&cfg)?;
            experiments::write_comparison(&dir, &rows)?;
        }
        Command::Pimh(_) => {
            let frozen = match &cfg.run.frozen {
                Some(path) => Some(FrozenSchedule::from_json(&read(path)?)?),
                None => None,
            };
            let (chain, frozen) = experiments::run_pimh(&cfg, frozen)?;
            experiments::write_pimh(&dir, &chain, &frozen)?;
            log::info!("acceptance rate {:.3}", chain.acceptance_rate());
        }
        Command::Combine(_) => {
            let result = experiments::run_combine(&cfg)?;
            experiments::write_combine(&dir, &result)?;
        }
    }
    Ok(dir)
}

fn read(path: &Path) -> Result<String, SmcError> {
    if !path.exists() {
        return Err(SmcError::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
