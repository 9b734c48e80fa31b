use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use betaprune::data;
use betaprune::experiment::{self, Epochs, RunConfig, TableFormat};
use betaprune::nn::{DatasetKind, ModelKind};
use betaprune::{verify, Error};

#[derive(Parser)]
#[command(name = "betaprune", version, about = "Train, prune and measure Beta-VAE classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training protocol for every seed and write result rows.
    Run {
        #[arg(long)]
        dataset: DatasetKind,
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        prune: bool,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "30,2,2")]
        epochs: Epochs,
        #[arg(long, env = "BETAPRUNE_DATA_DIR", default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Train on the first N training examples only.
        #[arg(long)]
        train_limit: Option<usize>,
    },
    /// Aggregate result rows into the accuracy/compression table.
    Table {
        /// A rows file or a directory of them.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "md")]
        format: TableFormat,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ParamCount { .. } => 1,
        Error::Data { .. } | Error::Io(_) | Error::Csv(_) | Error::ModelFormat(_) => 2,
        Error::Diverged { .. } | Error::NonFinite => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> betaprune::Result<ExitCode> {
    match command {
        Command::Run {
            dataset,
            model,
            beta,
            prune,
            seeds,
            epochs,
            data_dir,
            out,
            train_limit,
        } => {
            let mut config = RunConfig::new(dataset, model, beta, prune);
            config.seeds = seeds;
            config.epochs = epochs;
            config.train_limit = train_limit;
            config.out_dir = Some(out.clone());
            config.validate()?;
            let (train, test) = data::load(dataset, &data_dir)?;
            let rows = experiment::run_seeds(&config, &train, &test)?;
            for r in &rows {
                println!(
                    "{} seed {}: accuracy {:.2}%, compressed {} bytes{}",
                    if r.pruned { "pruned  " } else { "unpruned" },
                    r.seed,
                    r.accuracy,
                    r.compressed_bytes,
                    if r.collapsed { ", collapsed" } else { "" }
                );
            }
            let tag = config.tag(prune, 0);
            let path = out.join(format!("rows_{}.csv", tag.trim_end_matches("_seed0")));
            experiment::write_rows(&rows, &path)?;
            println!("rows written to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Table { input, format, out } => {
            let aggs = experiment::aggregate_all(&experiment::read_rows(&input)?)?;
            match out {
                Some(path) => experiment::emit_table(&aggs, format, &path)?,
                None => print!("{}", experiment::render_table(&aggs, format)?),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { seed } => {
            let reports = verify::run_all(seed)?;
            for r in &reports {
                println!("{r}");
            }
            Ok(if reports.iter().all(|r| r.passed()) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}
