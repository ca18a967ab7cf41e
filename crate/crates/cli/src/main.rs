use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdeconv::{cmd_convergence, cmd_positivity, cmd_step_trace, load_spec};

/// Strong convergence studies for double implicit Milstein schemes.
#[derive(Parser)]
#[command(name = "sdeconv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a convergence study and write the error table as CSV.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Worker threads; never changes the output.
        #[arg(long)]
        workers: Option<usize>,
        /// CSV destination, overriding the spec's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one sample path step by step.
    Trace {
        #[arg(long)]
        spec: PathBuf,
        /// Number of steps to print (default: the whole horizon).
        #[arg(long)]
        steps: Option<usize>,
        /// Step size t_end * 2^-EXPONENT (default: the fine exponent).
        #[arg(long)]
        exponent: Option<u32>,
        #[arg(long, default_value_t = 0)]
        sample: u64,
    },
    /// Report the fraction of strictly positive states.
    Positivity {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = std::env::var("SDECONV_SEED").ok();
    let spec_path = match &cli.command {
        Command::Run { spec, .. } | Command::Trace { spec, .. } | Command::Positivity { spec, .. } => spec,
    };
    let spec = match load_spec(spec_path, seed.as_deref()) {
        Ok(s) => s,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(code as u8);
        }
    };
    let (mut out, mut err) = (io::stdout().lock(), io::stderr().lock());
    let code = match cli.command {
        Command::Run { workers, out: path, .. } => cmd_convergence(&spec, workers, path.as_deref(), &mut out, &mut err),
        Command::Trace {
            steps, exponent, sample, ..
        } => cmd_step_trace(&spec, exponent, steps, sample, &mut out, &mut err),
        Command::Positivity { workers, .. } => cmd_positivity(&spec, workers, &mut out, &mut err),
    };
    ExitCode::from(code as u8)
}
