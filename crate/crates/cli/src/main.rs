use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use otstab::certify::Mode;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "otstab", version, about = "Optimal-transport stability laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// experiment configuration (JSON)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// output directory (default: the config's "output", else ./out)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// grid size as NXxNY, e.g. 65x65
    #[arg(long, global = true, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the stability experiment and write the report
    #[command(alias = "run")]
    Stability,
    /// Solve the elliptic forward problem and export the boundary trace
    ForwardElliptic,
    /// Solve the parabolic forward problem and export the lateral trace
    ForwardParabolic,
    /// Solve an optimal transport problem between the configured measures
    Ot,
    /// Build the CGO interpolation basis at the configured points
    CgoBasis,
    /// Solve the boundary null-control problem for a seeded test function
    Control,
    /// Estimate C1 by a |rho| sweep and fit the control-norm constant
    CalibrateConstants,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "elliptic" => Ok(Mode::Elliptic),
        "parabolic" => Ok(Mode::Parabolic),
        "initial_data" | "initial-data" => Ok(Mode::InitialData),
        _ => Err(format!("unknown mode {s:?}; expected elliptic, parabolic or initial_data")),
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let norm = s.replace('×', "x").to_lowercase();
    let (a, b) = norm.split_once('x').ok_or_else(|| format!("grid {s:?} is not NXxNY"))?;
    let nx = a.trim().parse().map_err(|_| format!("bad NX in {s:?}"))?;
    let ny = b.trim().parse().map_err(|_| format!("bad NY in {s:?}"))?;
    Ok((nx, ny))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let res = match cli.command {
        Command::Stability => commands::stability(&cli.common),
        Command::ForwardElliptic => commands::forward_elliptic(&cli.common),
        Command::ForwardParabolic => commands::forward_parabolic(&cli.common),
        Command::Ot => commands::ot(&cli.common),
        Command::CgoBasis => commands::cgo_basis(&cli.common),
        Command::Control => commands::control(&cli.common),
        Command::CalibrateConstants => commands::calibrate_constants(&cli.common),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e @ otstab::Error::Config(_)) => {
            eprintln!("invalid config: {}", e.to_string().trim_start_matches("config error: "));
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
