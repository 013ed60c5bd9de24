use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use orbit_inertia_cli::{cmd_rank, cmd_run, cmd_sweep, CliError, EXIT_OK, EXIT_RUNTIME};

#[derive(Parser)]
#[command(name = "orbit-inertia", version, about = "Grasped-object inertia estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and estimate the target; writes a trace CSV and a JSON summary.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every (scenario, seed) pair of a manifest and aggregate final D_phi.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Report regressor rank and end-effector identifiability over random states.
    Rank {
        /// Model JSON path, or builtin:panda_fixed / builtin:panda_floating.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 40)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fail(e: CliError) -> i32 {
    eprintln!("error: {}", e.message());
    e.exit_code()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { scenario, seed, out } => match cmd_run(&scenario, seed, &out) {
            Ok(r) => {
                println!("{} seed {}: final D_phi {:.6e}, final RMS {:.6e}", r.scenario, r.seed, r.summary.final_d_phi, r.summary.final_rms);
                EXIT_OK
            }
            Err(e) => fail(e),
        },
        Command::Sweep { manifest } => match cmd_sweep(&manifest) {
            Ok(outcome) => {
                for r in &outcome.results {
                    match r {
                        Ok(r) => println!("{} seed {}: final D_phi {:.6e}", r.scenario, r.seed, r.summary.final_d_phi),
                        Err(e) => eprintln!("error: {e}"),
                    }
                }
                if outcome.failed > 0 {
                    eprintln!("error: {} run(s) failed", outcome.failed);
                    EXIT_RUNTIME
                } else {
                    EXIT_OK
                }
            }
            Err(e) => fail(e),
        },
        Command::Rank { model, samples, seed } => match cmd_rank(&mut std::io::stdout().lock(), &model, samples, seed) {
            Ok(_) => EXIT_OK,
            Err(e) => fail(e),
        },
    };
    ExitCode::from(code as u8)
}
