use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use epsim::experiment::{
    compare, comparison_csv, comparison_table, parse_config, run_experiment, RunRequest,
    CALIBRATION_ENV,
};
use epsim::workload::export_trace;
use epsim::Error;

#[derive(Parser)]
#[command(
    name = "epsim",
    version,
    about = "MoE expert-parallel load-balancing simulator"
)]
#[command(after_help = format!("Set {CALIBRATION_ENV} to a calibration file to override the default cost model."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment config.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Replace an existing results directory.
        #[arg(long)]
        overwrite: bool,
        /// Cells simulated concurrently (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Override the seed of every cell.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare result directories against the first one.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Where to write the comparison CSV.
        #[arg(long, default_value = "comparison.csv")]
        csv: PathBuf,
    },
    /// Write the routing workload of one config cell as a trace file.
    TraceExport {
        config: PathBuf,
        /// Cell index in grid order.
        #[arg(long, default_value_t = 0)]
        cell: usize,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &PathBuf) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            out,
            overwrite,
            jobs,
            seed,
        } => {
            let text = read(&config)?;
            let req = RunRequest {
                out: out.clone(),
                overwrite,
                jobs,
                seed,
            };
            let results = run_experiment(&text, &req)?;
            eprintln!("{} cells written to {}", results.len(), out.display());
        }
        Command::Compare { dirs, csv } => {
            let rows = compare(&dirs)?;
            print!("{}", comparison_table(&rows));
            std::fs::write(&csv, comparison_csv(&rows)).map_err(|source| Error::Io {
                path: csv.clone(),
                source,
            })?;
        }
        Command::TraceExport { config, cell, out } => {
            let cells = parse_config(&read(&config)?)?;
            let chosen = cells.get(cell).ok_or_else(|| {
                Error::Argument(format!("cell {cell} out of range ({} cells)", cells.len()))
            })?;
            let batches = chosen.config.batches()?;
            let io_err = |path: PathBuf| move |source| Error::Io { path, source };
            match out {
                Some(path) => {
                    let file = std::fs::File::create(&path).map_err(io_err(path.clone()))?;
                    export_trace(&batches, std::io::BufWriter::new(file)).map_err(io_err(path))?;
                }
                None => export_trace(&batches, std::io::stdout().lock())
                    .map_err(io_err(PathBuf::from("<stdout>")))?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
