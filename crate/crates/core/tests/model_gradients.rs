//! Finite-difference check of the whole Beta-VAE classifier objective on a
//! four-image batch with an 8-dimensional latent.

use betaprune::classifier::build_model_with;
use betaprune::nn::{ArchSpec, ModelKind};
use betaprune::rng::{self, Gaussian, Stream};
use betaprune::tensor::{finite_difference_check_at, Graph, Tensor};
use rand::Rng;

#[test]
fn full_objective_gradients_match_central_differences() {
    let model = build_model_with(ArchSpec::mnist().with_latent(8), ModelKind::BetaVaeClassif, Some(3.0), 21).unwrap();
    let params = model.params.cast::<f64>();
    let topology = model.topology.clone();
    let mut rng = rng::stream(5, Stream::Fixture);
    let x: Tensor<f64> = Tensor::from_fn(vec![4, 1, 28, 28], |_| rng.gen_range(0.0..1.0));
    let labels = vec![3, 1, 4, 1];
    let eps: Tensor<f64> = Gaussian::new(rng::stream(6, Stream::Eps)).tensor(vec![4, topology.arch.latent]);

    for (name, p) in params.iter() {
        let n = p.tensor.len();
        let indices: Vec<usize> = (0..6).map(|_| rng.gen_range(0..n)).collect();
        let err = finite_difference_check_at(
            |g: &mut Graph<f64>, v| {
                let bound = params.bind(g, false).with_var(name, v)?;
                let xv = g.constant(&x);
                let fwd = topology.forward(g, &bound, xv, &labels, Some(&eps))?;
                Ok(fwd.objective.total)
            },
            &p.tensor,
            1e-6,
            &indices,
        )
        .unwrap();
        assert!(err < 1e-3, "{name}: {err:.3e}");
    }
}
