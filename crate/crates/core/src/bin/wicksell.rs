use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wicksell::harness::{self, Command, ExperimentConfig, Format, Overrides};
use wicksell::Error;

#[derive(Parser)]
#[command(name = "wicksell", version, about = "Estimation in Wicksell's problem and its Monte Carlo checks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// IIE and naive estimates on a grid, from a file or simulated data.
    Estimate(Common),
    /// Draw observed squared circle radii from a model.
    Simulate(Common),
    /// Variance of the IIE and the naive estimator at x.
    McVariance(Common),
    /// Rate and limit law of the IIE where F is flat around x.
    FlatRate(Common),
    /// Gaussian-process limit: kernel, paths and L_x draws.
    GpLimit(Common),
    /// Local asymptotic normality along the perturbation path.
    LanCheck(Common),
}

#[derive(Args)]
struct Common {
    /// JSON file with the same keys as the long flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model spec, e.g. `uniform01`, `gamma:2:0.5`, `flat:default`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    x: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file, or directory for `gp-limit`; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv, json or svg.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// `lo:hi:step` or a comma-separated list.
    #[arg(long)]
    grid: Option<String>,
    /// Perturbation direction `h1,h2`.
    #[arg(long, allow_hyphen_values = true)]
    h: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    /// Input values are already squared radii.
    #[arg(long)]
    squared: bool,
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    gammax: Option<f64>,
    /// One-column CSV of observed radii (estimate).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Paths to write (gp-limit) or L_x draws (flat-rate).
    #[arg(long)]
    paths: Option<usize>,
    /// Comma-separated sample sizes.
    #[arg(long)]
    ladder: Option<String>,
    #[arg(long)]
    ks_n: Option<usize>,
    #[arg(long)]
    ks_reps: Option<usize>,
}

fn run(cli: Cli) -> Result<(), Error> {
    let (command, c) = match cli.command {
        Cmd::Estimate(c) => (Command::Estimate, c),
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::McVariance(c) => (Command::McVariance, c),
        Cmd::FlatRate(c) => (Command::FlatRate, c),
        Cmd::GpLimit(c) => (Command::GpLimit, c),
        Cmd::LanCheck(c) => (Command::LanCheck, c),
    };
    let format = c.format.as_deref().map(str::parse::<Format>).transpose()?;
    let flags = Overrides {
        command: Some(command),
        model: c.model,
        x: c.x,
        n: c.n,
        reps: c.reps,
        seed: c.seed,
        out: c.out,
        format,
        threads: c.threads,
        grid: c.grid,
        h: c.h,
        eta: c.eta,
        squared: c.squared.then_some(true),
        gamma0: c.gamma0,
        gammax: c.gammax,
        input: c.input,
        paths: c.paths,
        ladder: c.ladder,
        ks_n: c.ks_n,
        ks_reps: c.ks_reps,
    };
    let file = match &c.config {
        Some(p) => Overrides::from_file(p)?,
        None => Overrides::default(),
    };
    if file.command.is_some_and(|fc| fc != command) {
        return Err(Error::Config(format!("config file names a different command ({:?})", file.command.unwrap())));
    }
    let cfg = ExperimentConfig::resolve(flags.over(file))?;
    let artifacts = harness::execute(&cfg)?;
    harness::write_artifacts(&cfg, &artifacts)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
