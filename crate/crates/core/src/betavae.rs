//! Encoder, reparameterized sampling, decoder, and the β-weighted VAE terms.
//!
//! Everything here is minimized: the VAE part of the objective is
//! `β·KL(q(z|x) ‖ N(0, I)) + NLL_Bernoulli(x | z)`, each term summed over
//! latent dimensions or pixels and averaged over the batch.

use crate::nn::{ArchSpec, Bound};
use crate::tensor::{Element, Graph, Var};
use crate::{Error, Result};

/// Posterior parameters produced by the encoder.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub mu: Var,
    /// Absent for the plain CNN classifier, which has no variance head.
    pub logvar: Option<Var>,
}

/// A single reparameterized draw `z = mu + exp(½·logvar) ∘ eps`.
#[derive(Debug, Clone, Copy)]
pub struct LatentSample {
    mu: Var,
    logvar: Var,
    eps: Var,
    z: Var,
}

impl LatentSample {
    pub fn mu(&self) -> Var {
        self.mu
    }
    pub fn logvar(&self) -> Var {
        self.logvar
    }
    pub fn eps(&self) -> Var {
        self.eps
    }
    pub fn z(&self) -> Var {
        self.z
    }
}

/// Decoder output: pre-sigmoid logits and the Bernoulli means `x_hat`.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    pub logits: Var,
    pub x_hat: Var,
}

/// KL term plus its per-dimension, batch-averaged breakdown.
#[derive(Debug, Clone)]
pub struct KlTerm {
    pub kl: Var,
    pub per_dim: Vec<f64>,
}

/// The two VAE terms of one forward pass and the weight applied to KL.
#[derive(Debug, Clone)]
pub struct VaeTerms {
    pub kl: KlTerm,
    pub recon: Var,
    pub beta: f64,
}

impl VaeTerms {
    /// `β·kl + recon` on the tape.
    pub fn contribution<T: Element>(&self, g: &mut Graph<T>) -> Result<Var> {
        let weighted = g.scale(self.kl.kl, self.beta);
        g.add(weighted, self.recon)
    }
}

/// Scalar summary of the full objective for one batch.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub recon: f64,
    pub ce: f64,
    pub beta: f64,
    pub total: f64,
    pub per_dim_kl: Vec<f64>,
}

impl LossBreakdown {
    /// `kl` is the sum of `per_dim_kl`, `total` is `beta·kl + recon + ce`.
    pub fn new(beta: f64, per_dim_kl: Vec<f64>, recon: f64, ce: f64) -> Self {
        let kl = per_dim_kl.iter().fold(0.0, |a, b| a + b);
        LossBreakdown {
            kl,
            recon,
            ce,
            beta,
            total: beta * kl + recon + ce,
            per_dim_kl,
        }
    }

    /// Element-wise mean over batches, weighting each equally.
    pub fn mean_of(parts: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = parts.first()?;
        let n = parts.len() as f64;
        let dims = first.per_dim_kl.len();
        let mut per_dim = vec![0.0; dims];
        let (mut recon, mut ce) = (0.0, 0.0);
        for p in parts {
            for (acc, v) in per_dim.iter_mut().zip(&p.per_dim_kl) {
                *acc += v;
            }
            recon += p.recon;
            ce += p.ce;
        }
        per_dim.iter_mut().for_each(|v| *v /= n);
        Some(LossBreakdown::new(first.beta, per_dim, recon / n, ce / n))
    }
}

fn check_input<T: Element>(g: &Graph<T>, arch: &ArchSpec, x: Var) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 4 || s[1..] != arch.input {
        let mut want = vec![s.first().copied().unwrap_or(1)];
        want.extend_from_slice(&arch.input);
        return Err(Error::shape("encode", s, &want));
    }
    Ok(s[0])
}

/// Shared convolutional trunk plus the mu (and, when bound, logvar) heads.
pub fn encode<T: Element>(g: &mut Graph<T>, params: &Bound, arch: &ArchSpec, x: Var) -> Result<Encoded> {
    let n = check_input(g, arch, x)?;
    let mut h = x;
    for (i, layer) in arch.encoder_convs.iter().enumerate() {
        let k = params.get(&format!("encoder.conv{}.kernel", i + 1))?;
        let b = params.get(&format!("encoder.conv{}.bias", i + 1))?;
        let c = g.conv2d(h, k, b, layer.stride, layer.padding)?;
        h = g.relu(c);
    }
    let flat = g.reshape(h, vec![n, arch.encoder_flat()?])?;
    let fc = g.affine(flat, params.get("encoder.fc.kernel")?, params.get("encoder.fc.bias")?)?;
    let trunk = g.relu(fc);
    let mu = g.affine(trunk, params.get("encoder.mu.kernel")?, params.get("encoder.mu.bias")?)?;
    let logvar = if params.contains("encoder.logvar.kernel") {
        Some(g.affine(
            trunk,
            params.get("encoder.logvar.kernel")?,
            params.get("encoder.logvar.bias")?,
        )?)
    } else {
        None
    };
    Ok(Encoded { mu, logvar })
}

pub fn reparameterize<T: Element>(g: &mut Graph<T>, mu: Var, logvar: Var, eps: Var) -> Result<LatentSample> {
    if g.shape(mu) != g.shape(logvar) || g.shape(mu) != g.shape(eps) {
        return Err(Error::shape("reparameterize", g.shape(mu), g.shape(logvar)));
    }
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let noise = g.mul(sigma, eps)?;
    let z = g.add(mu, noise)?;
    Ok(LatentSample { mu, logvar, eps, z })
}

/// `KL(N(mu, diag(exp(logvar))) ‖ N(0, I))`, summed over latent dimensions
/// and averaged over the batch.
pub fn kl_divergence<T: Element>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<KlTerm> {
    let shape = g.shape(mu).to_vec();
    if shape.len() != 2 || g.shape(logvar) != shape.as_slice() {
        return Err(Error::shape("kl_divergence", &shape, g.shape(logvar)));
    }
    let (n, dims) = (shape[0], shape[1]);

    let mut per_dim = vec![0.0f64; dims];
    for (i, (m, lv)) in g.value(mu).iter().zip(g.value(logvar)).enumerate() {
        let (m, lv) = (m.widen(), lv.widen());
        per_dim[i % dims] += 0.5 * (m * m + (lv.exp_m1() - lv));
    }
    per_dim.iter_mut().for_each(|v| *v = (*v / n as f64).max(0.0));

    let mu_sq = g.mul(mu, mu)?;
    let var = g.exp(logvar);
    let a = g.add(mu_sq, var)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0);
    let total = g.sum(c);
    let kl = g.scale(total, 0.5 / n as f64);
    Ok(KlTerm { kl, per_dim })
}

/// Dense layer, reshape, then transposed convolutions ending in a sigmoid.
pub fn decode<T: Element>(g: &mut Graph<T>, params: &Bound, arch: &ArchSpec, z: Var) -> Result<Decoded> {
    let s = g.shape(z);
    if s.len() != 2 || s[1] != arch.latent {
        return Err(Error::shape("decode", s, &[s.first().copied().unwrap_or(1), arch.latent]));
    }
    let n = s[0];
    let fc = g.affine(z, params.get("decoder.fc.kernel")?, params.get("decoder.fc.bias")?)?;
    let act = g.relu(fc);
    let [c, h, w] = arch.decoder_seed;
    let mut x = g.reshape(act, vec![n, c, h, w])?;
    let last = arch.decoder_deconvs.len();
    for (i, layer) in arch.decoder_deconvs.iter().enumerate() {
        let k = params.get(&format!("decoder.deconv{}.kernel", i + 1))?;
        let b = params.get(&format!("decoder.deconv{}.bias", i + 1))?;
        let y = g.conv2d_transpose(x, k, b, layer.stride, layer.padding)?;
        x = if i + 1 < last { g.relu(y) } else { y };
    }
    let x_hat = g.sigmoid(x);
    Ok(Decoded { logits: x, x_hat })
}

/// Bernoulli negative log-likelihood `−Σ[x·ln x̂ + (1−x)·ln(1−x̂)]`, summed
/// per image and averaged over the batch.
///
/// Evaluated from the decoder logits as `Σ[softplus(l) − x·l]`, which is the
/// same quantity without the `0·ln 0` hazard of saturated sigmoids.
pub fn reconstruction_loss<T: Element>(g: &mut Graph<T>, x: Var, decoded: &Decoded) -> Result<Var> {
    if g.shape(x) != g.shape(decoded.logits) {
        return Err(Error::shape("reconstruction_loss", g.shape(x), g.shape(decoded.logits)));
    }
    if let Some(bad) = g.value(x).iter().find(|v| !(v.widen() >= 0.0 && v.widen() <= 1.0)) {
        return Err(Error::invalid(
            "reconstruction_loss",
            format!("target pixel {:?} outside [0, 1]", bad),
        ));
    }
    let n = g.shape(x)[0];
    let sp = g.softplus(decoded.logits);
    let xl = g.mul(x, decoded.logits)?;
    let d = g.sub(sp, xl)?;
    let s = g.sum(d);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// KL and reconstruction terms for one forward pass.
pub fn beta_vae_loss<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    latent: &LatentSample,
    decoded: &Decoded,
    beta: f64,
) -> Result<VaeTerms> {
    check_beta(beta)?;
    let kl = kl_divergence(g, latent.mu, latent.logvar)?;
    let recon = reconstruction_loss(g, x, decoded)?;
    Ok(VaeTerms { kl, recon, beta })
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta_vae_loss", format!("beta must be a finite non-negative number, got {beta}")));
    }
    Ok(())
}
