//! Builds the accuracy/compression table.
//!
//!     cargo run --release --example results_table -- rows/       # aggregate existing rows files
//!     cargo run --release --example results_table -- --run 1,0,0 # train every MNIST configuration first
//!
//! `--run` trains each model (CNN and β ∈ {1, 3, 5, 10}) with pruning over
//! three seeds for the given epochs and writes `rows_*.csv` to `results/`.

use std::path::PathBuf;

use betaprune::data;
use betaprune::experiment::{self, RunConfig, TableFormat, BETAS};
use betaprune::nn::{DatasetKind, ModelKind};

fn main() -> betaprune::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let rows_dir = if args.first().map(String::as_str) == Some("--run") {
        let out = PathBuf::from("results");
        let (train, test) = data::load(DatasetKind::Mnist, data::default_data_dir())?;
        let configs = std::iter::once((ModelKind::CnnClassif, None))
            .chain(BETAS.iter().map(|&b| (ModelKind::BetaVaeClassif, Some(b))));
        for (kind, beta) in configs {
            let mut config = RunConfig::new(DatasetKind::Mnist, kind, beta, true);
            config.epochs = args.get(1).map_or("30,2,2", String::as_str).parse()?;
            let rows = experiment::run_seeds(&config, &train, &test)?;
            std::fs::create_dir_all(&out)?;
            let stem = config.tag(true, 0);
            experiment::write_rows(&rows, &out.join(format!("rows_{}.csv", stem.trim_end_matches("_pruned_seed0"))))?;
            eprintln!("finished {stem}");
        }
        out
    } else {
        PathBuf::from(args.first().map_or("results", String::as_str))
    };
    let aggs = experiment::aggregate_all(&experiment::read_rows(&rows_dir)?)?;
    print!("{}", experiment::render_table(&aggs, TableFormat::Markdown)?);
    Ok(())
}
