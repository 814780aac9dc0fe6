use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scmpc::cli::{self, Overrides, RunManifest};
use scmpc::sim::Mode;
use scmpc::verify::run_verification;

#[derive(Parser)]
#[command(name = "scmpc", version, about = "Safety-critical MPC for a differential-drive robot")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the closed loop for a scenario file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Expand the sweep section of the config.
        #[arg(long)]
        sweep: bool,
    },
    /// Run the built-in property checks and print a report.
    Verify {
        /// Scenario whose parameters are checked; nominal if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: scmpc::Error| e.to_string())
}

fn main() -> ExitCode {
    match Args::parse().command {
        Command::Simulate { config, gamma, horizon, mode, seed, out, sweep } => {
            let manifest =
                RunManifest { config, out_dir: out, overrides: Overrides { gamma, horizon, mode, seed }, sweep };
            match cli::run(&manifest) {
                Ok(outcome) => {
                    for r in &outcome.summary.runs {
                        let status = match r.aborted_at {
                            Some(k) => format!("aborted at step {k}"),
                            None => "ok".to_string(),
                        };
                        println!(
                            "{} mode={} N={} gamma={} min_distance={:.4} final_error={:.4} p50={:.3}ms {}",
                            r.file,
                            r.mode.as_str(),
                            r.horizon,
                            r.gamma,
                            r.min_distance,
                            r.final_position_error,
                            r.solve_ms.p50,
                            status
                        );
                    }
                    println!("summary written to {}", outcome.summary_path.display());
                    ExitCode::from(outcome.exit_code as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(cli::exit_code_for(&e) as u8)
                }
            }
        }
        Command::Verify { config, seed } => {
            let scenario = match config.map(|p| cli::load_config(&p).and_then(|c| c.scenario())) {
                None => scmpc::sim::Scenario::nominal(),
                Some(Ok(s)) => s,
                Some(Err(e)) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(cli::exit_code_for(&e) as u8);
                }
            };
            let report = run_verification(&scenario, seed);
            println!("{report}");
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(cli::EXIT_FAILURE as u8)
            }
        }
    }
}
