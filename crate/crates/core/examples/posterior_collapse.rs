//! Trains the Beta-VAE classifier briefly at each β and reports the mean
//! per-dimension KL of the test posterior, flagging collapsed runs.
//!
//!     cargo run --release --example posterior_collapse -- [train limit] [epochs]

use betaprune::data;
use betaprune::experiment::{run_protocol, Epochs, RunConfig, BETAS, COLLAPSE_THRESHOLD};
use betaprune::nn::{DatasetKind, ModelKind};

fn main() -> betaprune::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let limit = args.first().and_then(|n| n.parse().ok()).unwrap_or(10_000);
    let epochs: Epochs = args.get(1).map_or("2,1,0", String::as_str).parse()?;
    let (train, test) = data::load(DatasetKind::Mnist, data::default_data_dir())?;

    println!("collapse threshold: mean KL < {COLLAPSE_THRESHOLD} nats per dimension");
    for beta in BETAS {
        let mut config = RunConfig::new(DatasetKind::Mnist, ModelKind::BetaVaeClassif, Some(beta), false);
        config.epochs = epochs;
        config.train_limit = Some(limit);
        let row = run_protocol(&config, 1, &train, &test)?.unpruned;
        let mean = row.per_dim_kl.iter().sum::<f64>() / row.per_dim_kl.len() as f64;
        let active = row.per_dim_kl.iter().filter(|&&k| k >= COLLAPSE_THRESHOLD).count();
        println!(
            "β={beta:<3} accuracy {:6.2}%  mean KL {mean:.4}  active dims {active}/{}  collapsed {}",
            row.accuracy,
            row.per_dim_kl.len(),
            row.collapsed
        );
    }
    Ok(())
}
