use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};
use superatom::fit::simulate_dataset;
use superatom::harness::{run, write_dataset, Command, OutputFormat, RunConfig};
use superatom::{ChainParams, Error};

#[derive(Parser)]
#[command(name = "superatom", version, about = "Photon subtraction by chains of Rydberg superatoms")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Master-equation transmission, populations and photon budget.
    Simulate(Common),
    /// Two-time correlation map of the transmitted light.
    G2(Common),
    /// Raman photon-count distribution.
    Count(Common),
    /// Rate model next to the master equation, single absorber.
    Adiabatic(Common),
    /// Ion detection statistics and Mandel Q.
    Ions(Common),
    /// Fit absorber rates to measured transmission traces.
    Fit(Common),
    /// Two-dimensional parameter sweep.
    Sweep(Common),
    /// Dark population against chain length.
    Chain(Common),
    /// Write a synthetic transmission dataset in the fit input format.
    Synth(Synth),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Overrides `solver.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct Synth {
    #[command(flatten)]
    common: Common,
    /// Mean input photon numbers, one trace each.
    #[arg(long, value_delimiter = ',', required = true)]
    photons: Vec<f64>,
    /// Relative Gaussian noise per sample.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;

fn load(common: &Common) -> Result<RunConfig, Error> {
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let mut cfg = RunConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.solver.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<bool, Error> {
    let (command, common) = match &cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::G2(c) => (Command::G2, c),
        Cmd::Count(c) => (Command::Count, c),
        Cmd::Adiabatic(c) => (Command::Adiabatic, c),
        Cmd::Ions(c) => (Command::Ions, c),
        Cmd::Fit(c) => (Command::Fit, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
        Cmd::Chain(c) => (Command::Chain, c),
        Cmd::Synth(s) => return synth(s).map(|_| true),
    };
    let cfg = load(common)?;
    let base = common.config.parent().unwrap_or(Path::new("."));
    let output = run(command, &cfg, base)?;
    for path in output.write(&common.out, common.format.into())? {
        info!("wrote {}", path.display());
    }
    println!("{}", serde_json::to_string(&output.summary).map_err(Error::from)?);
    Ok(output.converged)
}

fn synth(s: &Synth) -> Result<(), Error> {
    let cfg = load(&s.common)?;
    let chain = cfg.chain_config()?;
    let ChainParams::Shared(truth) = chain.params else {
        return Err(Error::Config("synth needs shared [absorber] rates".into()));
    };
    let data = simulate_dataset(truth, &chain, &s.photons, s.noise, cfg.solver.seed)?;
    let manifest = write_dataset(&data, &s.common.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            error!("fit did not converge");
            ExitCode::from(EXIT_NOT_CONVERGED)
        }
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_INPUT })
        }
    }
}
