//! Prunes half of every kernel by magnitude, then takes masked Adam steps on
//! random gradients to show the pruned weights stay at zero and the file
//! compresses better.
//!
//!     cargo run --release --example prune_and_finetune

use betaprune::experiment::{compressed_len, encode_model};
use betaprune::nn::{init_params, AdamState, ArchSpec, ModelKind};
use betaprune::pruning::{apply_masks, compute_masks, masked_step, sparsity_report};
use betaprune::rng::{self, Gaussian, Stream};

fn main() -> betaprune::Result<()> {
    let mut params = init_params(&ArchSpec::mnist(), ModelKind::CnnClassif, 0)?;
    let dense = compressed_len(&encode_model(&params)?)?;

    let masks = compute_masks(&params, 0.5)?;
    apply_masks(&mut params, &masks)?;

    let mut adam = AdamState::default();
    let mut noise = Gaussian::new(rng::stream(0, Stream::Fixture));
    for _ in 0..50 {
        for (_, p) in params.iter_mut() {
            let g = (0..p.tensor.len()).map(|_| noise.sample() as f32 * 0.1).collect();
            p.tensor.set_grad(g)?;
        }
        masked_step(&mut params, &masks, &mut adam)?;
    }

    let report = sparsity_report(&params);
    for t in &report.tensors {
        println!("{:<24} {:>6}/{:<6} zero ({:.3})", t.name, t.zeros, t.total, t.fraction());
    }
    let sparse = compressed_len(&encode_model(&params)?)?;
    println!("prunable sparsity {:.4}", report.global);
    println!("deflate: dense {dense} B, pruned {sparse} B, ratio {:.3}", sparse as f64 / dense as f64);
    Ok(())
}
