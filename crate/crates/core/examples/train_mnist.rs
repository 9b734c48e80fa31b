//! Runs the training protocol on MNIST for one model and seed.
//!
//!     cargo run --release --example train_mnist -- [cnn|bvae] [beta] [epochs e.g. 30,2,2] [train limit]
//!
//! MNIST is read from `$BETAPRUNE_DATA_DIR/mnist` (default `data/mnist`).

use betaprune::data;
use betaprune::experiment::{run_protocol, Epochs, RunConfig};
use betaprune::nn::{DatasetKind, ModelKind};

fn main() -> betaprune::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind: ModelKind = args.first().map_or("cnn", String::as_str).parse()?;
    let beta = kind.is_vae().then(|| args.get(1).and_then(|b| b.parse().ok()).unwrap_or(1.0));
    let epochs: Epochs = args.get(2).map_or("3,1,1", String::as_str).parse()?;

    let mut config = RunConfig::new(DatasetKind::Mnist, kind, beta, true);
    config.epochs = epochs;
    config.train_limit = args.get(3).and_then(|n| n.parse().ok());

    let (train, test) = data::load(DatasetKind::Mnist, data::default_data_dir())?;
    let run = run_protocol(&config, 1, &train, &test)?;
    for row in run.rows() {
        println!(
            "{:<9} accuracy {:6.2}%  raw {:>7} B  deflate {:>7} B  sparsity {:.3}",
            if row.pruned { "pruned" } else { "unpruned" },
            row.accuracy,
            row.raw_bytes,
            row.compressed_bytes,
            row.sparsity
        );
    }
    Ok(())
}
