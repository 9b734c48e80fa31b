//! One forward/backward pass of the Beta-VAE classifier on a random batch,
//! printing each term of the objective and the gradient norm per tensor.
//!
//!     cargo run --release --example beta_vae_objective -- [beta]

use betaprune::classifier::build_model;
use betaprune::nn::{DatasetKind, ModelKind};
use betaprune::rng::{self, Gaussian, Stream};
use betaprune::tensor::{Graph, Tensor};
use rand::Rng;

fn main() -> betaprune::Result<()> {
    let beta: f64 = std::env::args().nth(1).map_or(Ok(3.0), |b| b.parse()).unwrap_or(3.0);
    let mut model = build_model(ModelKind::BetaVaeClassif, DatasetKind::Mnist, Some(beta), 0)?;
    let latent = model.topology.arch.latent;

    let mut rng = rng::stream(1, Stream::Fixture);
    let x = Tensor::from_fn(vec![8, 1, 28, 28], |_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 });
    let labels: Vec<usize> = (0..8).collect();
    let eps = Gaussian::new(rng::stream(1, Stream::Eps)).tensor(vec![8, latent]);

    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let xv = g.constant(&x);
    let fwd = model.topology.forward(&mut g, &bound, xv, &labels, Some(&eps))?;
    let b = &fwd.objective.breakdown;
    println!("beta {beta}: total {:.4} = {beta}·{:.4} (kl) + {:.4} (recon) + {:.4} (ce)", b.total, b.kl, b.recon, b.ce);
    println!("per-dimension KL: {:?}", b.per_dim_kl.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());

    g.backward(fwd.objective.total)?;
    model.params.collect_grads(&g, &bound)?;
    for (name, p) in model.params.iter() {
        let norm = p.tensor.grad().unwrap_or(&[]).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        println!("  {name:<24} |grad| = {norm:.4e}");
    }
    Ok(())
}
