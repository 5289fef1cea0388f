use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcomp_cli::commands::{self, SimulateOptions};
use dcomp_cli::CliError;

#[derive(Parser)]
#[command(name = "dcomp", version, about = "Distributed adaptive output consensus with dynamic compensators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print the metrics summary.
    Simulate {
        file: PathBuf,
        /// Integration step.
        #[arg(long)]
        h: Option<f64>,
        /// Horizon in seconds.
        #[arg(long = "T")]
        t_end: Option<f64>,
        /// Log every `stride` steps.
        #[arg(long)]
        stride: Option<usize>,
        /// Trajectory CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print P0, mu, K and the Hurwitz checks.
    VerifyGain { file: PathBuf },
    /// Report spanning-tree status and the spectra of H and the augmented H.
    GraphCheck {
        file: PathBuf,
        /// Write the augmented H as CSV.
        #[arg(long)]
        dump_haug: Option<PathBuf>,
    },
    /// Run the built-in five-agent experiment.
    PaperExample {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Simulate {
            file,
            h,
            t_end,
            stride,
            out: csv,
        } => {
            let opts = SimulateOptions { h, t_end, stride, out: csv };
            commands::simulate(&file, &opts, &mut out).map(|_| ())
        }
        Command::VerifyGain { file } => commands::verify_gain(&file, &mut out).map(|_| ()),
        Command::GraphCheck { file, dump_haug } => commands::graph_check(&file, dump_haug.as_deref(), &mut out),
        Command::PaperExample { out_dir } => commands::paper_example(&out_dir, &mut out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors count as validation failures; 2 is reserved for I/O.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
