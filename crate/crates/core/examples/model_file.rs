//! Writes a model in the `BPRN` format, reads it back, and compares raw and
//! DEFLATE sizes before and after pruning.
//!
//!     cargo run --release --example model_file -- [out path]

use std::path::PathBuf;

use betaprune::classifier::build_model;
use betaprune::experiment::{load_model, measure_compression, serialize_model};
use betaprune::nn::{count_params, DatasetKind, ModelKind};
use betaprune::pruning::{apply_masks, compute_masks};

fn main() -> betaprune::Result<()> {
    let path = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "model.bprn".into()));
    let mut model = build_model(ModelKind::BetaVaeClassif, DatasetKind::Mnist, Some(1.0), 0)?;
    model.decapitate();

    let raw = serialize_model(&model.params, &path)?;
    let dense = measure_compression(&path)?;
    assert_eq!(load_model(&path)?, model.params);
    let header = &std::fs::read(&path)?[..10];
    println!("{} tensors, {} parameters", model.params.len(), count_params(&model.params));
    println!("header bytes {header:02x?}");
    println!("raw {raw} B, deflate {dense} B");

    let masks = compute_masks(&model.params, 0.5)?;
    apply_masks(&mut model.params, &masks)?;
    serialize_model(&model.params, &path)?;
    let sparse = measure_compression(&path)?;
    println!("pruned: deflate {sparse} B ({:.3} of dense)", sparse as f64 / dense as f64);
    Ok(())
}
