//! Classifier head, sparse cross-entropy, the combined objective, and model assembly.

use crate::betavae::{self, Decoded, Encoded, LatentSample, LossBreakdown};
use crate::nn::{init_params, ArchSpec, Bound, DatasetKind, ModelKind, ModelParams};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    pub logits: Var,
    pub log_probs: Var,
    /// Row-wise argmax of `logits`; ties go to the lowest index.
    pub predicted: Vec<usize>,
}

/// Index of the largest value, preferring the first on ties.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Two-layer head on an `N×L` latent input.
pub fn classify<T: Element>(g: &mut Graph<T>, params: &Bound, arch: &ArchSpec, input: Var) -> Result<ClassifierOutput> {
    let s = g.shape(input);
    if s.len() != 2 || s[1] != arch.latent {
        return Err(Error::shape("classify", s, &[s.first().copied().unwrap_or(1), arch.latent]));
    }
    let h = g.affine(input, params.get("classifier.fc1.kernel")?, params.get("classifier.fc1.bias")?)?;
    let h = g.relu(h);
    let logits = g.affine(h, params.get("classifier.fc2.kernel")?, params.get("classifier.fc2.bias")?)?;
    let log_probs = g.log_softmax(logits, 1)?;
    let k = g.shape(logits)[1];
    let predicted = g.value(logits).chunks(k).map(argmax).collect();
    Ok(ClassifierOutput {
        logits,
        log_probs,
        predicted,
    })
}

/// Mean over the batch of `−log_probs[i, labels[i]]`.
pub fn cross_entropy<T: Element>(g: &mut Graph<T>, labels: &[usize], log_probs: Var) -> Result<Var> {
    let s = g.shape(log_probs);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("cross_entropy", s, &[labels.len()]));
    }
    let k = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid("cross_entropy", format!("label {bad} out of range 0..{k}")));
    }
    let picked = g.gather(log_probs, labels)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// The scalar being minimized and its reported breakdown.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `β·kl + recon + ce`, where the VAE terms are present only when their
/// inputs are: `latent` brings the KL term, `decoded` the reconstruction term.
pub fn combined_loss<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    latent: Option<&LatentSample>,
    decoded: Option<&Decoded>,
    labels: &[usize],
    log_probs: Var,
    beta: f64,
) -> Result<Objective> {
    betavae::check_beta(beta)?;
    let ce = cross_entropy(g, labels, log_probs)?;
    let mut total = ce;
    let mut per_dim = Vec::new();
    let mut recon_value = 0.0;
    if let Some(latent) = latent {
        let kl = betavae::kl_divergence(g, latent.mu(), latent.logvar())?;
        let weighted = g.scale(kl.kl, beta);
        total = g.add(weighted, total)?;
        per_dim = kl.per_dim;
    }
    if let Some(decoded) = decoded {
        let recon = betavae::reconstruction_loss(g, x, decoded)?;
        recon_value = g.scalar(recon);
        total = g.add(total, recon)?;
    }
    let breakdown = LossBreakdown::new(if latent.is_some() { beta } else { 0.0 }, per_dim, recon_value, g.scalar(ce));
    Ok(Objective { total, breakdown })
}

/// Static description of a model: its architecture, kind, and KL weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub arch: ArchSpec,
    pub kind: ModelKind,
    pub beta: f64,
}

/// Everything one training forward pass produces.
#[derive(Debug, Clone)]
pub struct Forward {
    pub encoded: Encoded,
    pub latent: Option<LatentSample>,
    pub decoded: Option<Decoded>,
    pub output: ClassifierOutput,
    pub objective: Objective,
}

impl Topology {
    /// Training forward pass.
    ///
    /// The Beta-VAE classifier feeds the sampled `z` to its head and needs
    /// `eps` (`N×latent`); the reconstruction term is included only while
    /// decoder parameters are bound. The CNN classifier feeds `mu` and
    /// optimizes cross-entropy alone.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &Bound,
        x: Var,
        labels: &[usize],
        eps: Option<&Tensor<T>>,
    ) -> Result<Forward> {
        let encoded = betavae::encode(g, params, &self.arch, x)?;
        match self.kind {
            ModelKind::CnnClassif => {
                let output = classify(g, params, &self.arch, encoded.mu)?;
                let objective = combined_loss(g, x, None, None, labels, output.log_probs, 0.0)?;
                Ok(Forward {
                    encoded,
                    latent: None,
                    decoded: None,
                    output,
                    objective,
                })
            }
            ModelKind::BetaVaeClassif => {
                let logvar = encoded
                    .logvar
                    .ok_or_else(|| Error::UnknownParam { name: "encoder.logvar.kernel".into() })?;
                let eps = eps.ok_or_else(|| Error::invalid("forward", "Beta-VAE forward pass needs eps"))?;
                let eps = g.constant(eps);
                let latent = betavae::reparameterize(g, encoded.mu, logvar, eps)?;
                let decoded = if params.contains("decoder.fc.kernel") {
                    Some(betavae::decode(g, params, &self.arch, latent.z())?)
                } else {
                    None
                };
                let output = classify(g, params, &self.arch, latent.z())?;
                let objective =
                    combined_loss(g, x, Some(&latent), decoded.as_ref(), labels, output.log_probs, self.beta)?;
                Ok(Forward {
                    encoded,
                    latent: Some(latent),
                    decoded,
                    output,
                    objective,
                })
            }
        }
    }

    /// Deterministic inference through `mu`; returns the encoder output too.
    pub fn predict<T: Element>(&self, g: &mut Graph<T>, params: &Bound, x: Var) -> Result<(Encoded, ClassifierOutput)> {
        let encoded = betavae::encode(g, params, &self.arch, x)?;
        let output = classify(g, params, &self.arch, encoded.mu)?;
        Ok((encoded, output))
    }
}

/// A topology with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub topology: Topology,
    pub params: ModelParams,
}

impl Model {
    pub fn has_decoder(&self) -> bool {
        self.params.names().any(|n| n.starts_with("decoder."))
    }

    /// Removes the reconstruction head, returning the dropped parameter names.
    pub fn decapitate(&mut self) -> Vec<String> {
        self.params.remove_prefix("decoder.")
    }
}

/// Assembles a freshly initialized model on the dataset's reference architecture.
///
/// `beta` is required for the Beta-VAE classifier and rejected for the CNN.
pub fn build_model(kind: ModelKind, dataset: DatasetKind, beta: Option<f64>, seed: u64) -> Result<Model> {
    build_model_with(ArchSpec::for_dataset(dataset), kind, beta, seed)
}

pub fn build_model_with(arch: ArchSpec, kind: ModelKind, beta: Option<f64>, seed: u64) -> Result<Model> {
    let beta = match (kind, beta) {
        (ModelKind::BetaVaeClassif, Some(b)) => {
            betavae::check_beta(b).map_err(|e| Error::Config(e.to_string()))?;
            b
        }
        (ModelKind::BetaVaeClassif, None) => return Err(Error::Config("beta_vae_classif requires beta".into())),
        (ModelKind::CnnClassif, None) => 0.0,
        (ModelKind::CnnClassif, Some(_)) => return Err(Error::Config("cnn_classif takes no beta".into())),
    };
    let params = init_params(&arch, kind, seed)?;
    Ok(Model {
        topology: Topology { arch, kind, beta },
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::count_params;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn zeroed_head_is_uniform() {
        let mut model = build_model(ModelKind::CnnClassif, DatasetKind::Mnist, None, 0).unwrap();
        for name in ["classifier.fc2.kernel", "classifier.fc2.bias"] {
            model.params.tensor_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, false);
        let z = g.constant(&Tensor::from_fn(vec![3, 16], |i| i as f32 * 0.05));
        let out = classify(&mut g, &b, &model.topology.arch, z).unwrap();
        for &v in g.value(out.log_probs) {
            assert!((v as f64 + 10f64.ln()).abs() < 1e-6);
        }
        assert_eq!(out.predicted, vec![0, 0, 0]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::<f64>::new();
        let lp = g.constant(&Tensor::full(vec![4, 10], -(10f64.ln())));
        let ce = cross_entropy(&mut g, &[0, 3, 9, 5], lp).unwrap();
        assert!((g.scalar(ce) - 10f64.ln()).abs() < 1e-12);

        let mut perfect = vec![-50.0; 20];
        perfect[2] = 0.0;
        perfect[10 + 7] = 0.0;
        let lp = g.constant(&t64(&[2, 10], &perfect));
        let ce = cross_entropy(&mut g, &[2, 7], lp).unwrap();
        assert_eq!(g.scalar(ce), 0.0);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::<f32>::new();
        let lp = g.constant(&Tensor::zeros(vec![2, 10]));
        assert!(cross_entropy(&mut g, &[1, 10], lp).is_err());
    }

    #[test]
    fn build_model_contracts() {
        let cnn = build_model(ModelKind::CnnClassif, DatasetKind::Mnist, None, 1).unwrap();
        let vae = build_model(ModelKind::BetaVaeClassif, DatasetKind::Mnist, Some(3.0), 1).unwrap();
        assert!(!cnn.has_decoder());
        assert!(cnn.params.names().all(|n| !n.contains("decoder.")));
        assert!(cnn.params.names().all(|n| vae.params.contains(n)));
        for m in [&cnn, &vae] {
            let n = count_params(&m.params);
            assert!((58_650..=79_350).contains(&n), "{n}");
        }
        assert!(build_model(ModelKind::BetaVaeClassif, DatasetKind::Mnist, None, 1).is_err());
        assert!(build_model(ModelKind::CnnClassif, DatasetKind::Mnist, Some(1.0), 1).is_err());
    }

    #[test]
    fn decapitation_drops_decoder_only() {
        let mut vae = build_model(ModelKind::BetaVaeClassif, DatasetKind::Mnist, Some(1.0), 1).unwrap();
        let before = vae.params.len();
        let dropped = vae.decapitate();
        assert_eq!(dropped.len(), 6);
        assert_eq!(vae.params.len(), before - 6);
        assert!(!vae.has_decoder());
        assert!(vae.params.contains("encoder.logvar.kernel"));
    }

    #[test]
    fn cnn_objective_is_ce() {
        let model = build_model(ModelKind::CnnClassif, DatasetKind::Mnist, None, 2).unwrap();
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, true);
        let x = g.constant(&Tensor::from_fn(vec![2, 1, 28, 28], |i| (i % 7) as f32 / 7.0));
        let f = model.topology.forward(&mut g, &b, x, &[3, 4], None).unwrap();
        let bd = &f.objective.breakdown;
        assert_eq!(bd.kl, 0.0);
        assert_eq!(bd.recon, 0.0);
        assert_eq!(bd.total, bd.ce);
        assert_eq!(g.scalar(f.objective.total), bd.ce);
    }
}
