use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stacksim_cli::commands::{self, RunArgs};
use stacksim_cli::config::Format;
use stacksim_cli::verify::Faults;

#[derive(Parser)]
#[command(name = "stacksim", version, about = "Rotation, BVQ and speculative-decoding accelerator scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML); the bundled default is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report directory; overrides STACKSIM_OUT_DIR and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

impl From<Common> for RunArgs {
    fn from(c: Common) -> Self {
        RunArgs {
            config: c.config,
            out: c.out,
            seed: c.seed,
            format: c.format,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Plan local rotations, check GEMM invariance and compare W4A8 error.
    RotateEval(Common),
    /// Train a BVQ model and write it with a compression report.
    BvqTrain(Common),
    /// Decode the toy models under every policy and cost the ladder.
    Simulate(Common),
    /// Run the property suites.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Inject a defect to confirm the suites detect it.
        #[arg(long, hide = true, value_parser = ["hadamard-sign"])]
        inject_fault: Option<String>,
    },
    /// Simulate every point of the config's sweep grid.
    Sweep(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::RotateEval(c) => commands::rotate_eval(&c.into()),
        Command::BvqTrain(c) => commands::bvq_train(&c.into()),
        Command::Simulate(c) => commands::simulate(&c.into()),
        Command::Verify { common, inject_fault } => commands::verify(
            &common.into(),
            Faults {
                hadamard_sign_flip: inject_fault.is_some(),
            },
        ),
        Command::Sweep(c) => commands::sweep(&c.into()),
    };
    match result {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
