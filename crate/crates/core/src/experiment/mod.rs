//! Three-phase training protocol, evaluation, and result aggregation.
//!
//! Phase 1 trains the full objective. Phase 2 removes the decoder and its
//! loss term and keeps training on `β·kl + ce`. Phase 3, when pruning,
//! fixes per-tensor masks and fine-tunes with masked updates. Adam moments
//! persist across phases; moments of removed tensors are dropped.

mod model_file;
mod table;

use std::path::PathBuf;
use std::time::Instant;

use crate::betavae::LossBreakdown;
use crate::classifier::{build_model_with, Model};
use crate::data::{batches, BatchPlan, Dataset};
use crate::nn::{adam_step, AdamConfig, AdamState, ArchSpec, DatasetKind, ModelKind};
use crate::pruning::{apply_masks, compute_masks, masked_step, sparsity_report, SparsityMask};
use crate::rng::{self, Gaussian, Stream};
use crate::tensor::Graph;
use crate::{Error, Result};

pub use model_file::{
    compressed_len, decode_model, encode_model, load_model, measure_compression, serialize_model, write_atomic,
};
pub use table::{
    aggregate, aggregate_all, emit_table, read_rows, render_table, write_rows, AggregateRow, TableFormat,
};

/// KL weights evaluated in the reference table.
pub const BETAS: [f64; 4] = [1.0, 3.0, 5.0, 10.0];
/// Mean per-dimension KL (nats) below which a run counts as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 0.01;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Epochs {
    pub train: usize,
    pub decapitated: usize,
    pub finetune: usize,
}

impl Default for Epochs {
    fn default() -> Self {
        Epochs {
            train: 30,
            decapitated: 2,
            finetune: 2,
        }
    }
}

impl std::str::FromStr for Epochs {
    type Err = Error;

    /// `"30,2,2"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("epochs `{s}`: {e}")))?;
        match parts[..] {
            [train, decapitated, finetune] => Ok(Epochs {
                train,
                decapitated,
                finetune,
            }),
            _ => Err(Error::Config(format!("epochs `{s}`: expected three comma-separated counts"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub kind: ModelKind,
    pub beta: Option<f64>,
    pub prune: bool,
    pub seeds: Vec<u64>,
    pub epochs: Epochs,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub sparsity: f64,
    /// Model files are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Train on only the first `n` training examples.
    pub train_limit: Option<usize>,
    /// Evaluate on only the first `n` test examples.
    pub test_limit: Option<usize>,
    /// Overrides the dataset's reference architecture.
    pub arch: Option<ArchSpec>,
}

impl RunConfig {
    pub fn new(dataset: DatasetKind, kind: ModelKind, beta: Option<f64>, prune: bool) -> Self {
        RunConfig {
            dataset,
            kind,
            beta,
            prune,
            seeds: vec![1, 2, 3],
            epochs: Epochs::default(),
            adam: AdamConfig::default(),
            batch_size: 64,
            sparsity: 0.5,
            out_dir: None,
            train_limit: None,
            test_limit: None,
            arch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.beta) {
            (ModelKind::BetaVaeClassif, Some(b)) if BETAS.contains(&b) => {}
            (ModelKind::BetaVaeClassif, Some(b)) => {
                return Err(Error::Config(format!("beta {b} is not one of {BETAS:?}")));
            }
            (ModelKind::BetaVaeClassif, None) => return Err(Error::Config("bvae requires --beta".into())),
            (ModelKind::CnnClassif, Some(_)) => return Err(Error::Config("cnn takes no --beta".into())),
            (ModelKind::CnnClassif, None) => {}
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity {} outside [0, 1)", self.sparsity)));
        }
        if let Some(arch) = &self.arch {
            if arch.input != ArchSpec::for_dataset(self.dataset).input {
                return Err(Error::Config("architecture input does not match the dataset".into()));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchSpec {
        self.arch.clone().unwrap_or_else(|| ArchSpec::for_dataset(self.dataset))
    }

    /// Stable file-name stem, e.g. `mnist_beta_vae_classif_b3_pruned_seed2`.
    pub fn tag(&self, pruned: bool, seed: u64) -> String {
        let beta = self.beta.map(|b| format!("_b{b}")).unwrap_or_default();
        let state = if pruned { "pruned" } else { "unpruned" };
        format!("{}_{}{beta}_{state}_seed{seed}", self.dataset.as_str(), self.kind.as_str())
    }
}

/// One table cell's worth of measurements for a single seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub dataset: DatasetKind,
    pub kind: ModelKind,
    pub beta: Option<f64>,
    pub pruned: bool,
    pub seed: u64,
    /// Test accuracy in percent.
    pub accuracy: f64,
    pub raw_bytes: u64,
    pub compressed_bytes: u64,
    /// Mean over the last training epoch's batches.
    pub loss: LossBreakdown,
    /// Mean test-set KL per latent dimension; empty for the CNN.
    pub per_dim_kl: Vec<f64>,
    pub collapsed: bool,
    /// Exact zero fraction over prunable tensors.
    pub sparsity: f64,
}

/// The rows one protocol run yields: the unpruned model at the end of phase
/// 2 and, when pruning, the fine-tuned pruned model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRun {
    pub unpruned: ResultRow,
    pub pruned: Option<ResultRow>,
    pub masks: Option<SparsityMask>,
    pub model: Model,
}

impl ProtocolRun {
    pub fn rows(&self) -> impl Iterator<Item = &ResultRow> {
        std::iter::once(&self.unpruned).chain(self.pruned.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<usize>,
    pub per_dim_kl: Vec<f64>,
}

impl Evaluation {
    pub fn mean_kl(&self) -> Option<f64> {
        (!self.per_dim_kl.is_empty()).then(|| self.per_dim_kl.iter().sum::<f64>() / self.per_dim_kl.len() as f64)
    }

    pub fn collapsed(&self) -> bool {
        self.mean_kl().is_some_and(|k| k < COLLAPSE_THRESHOLD)
    }
}

/// Deterministic mu-path pass over `test`. Also reports the per-dimension KL
/// of the posterior when the model has a logvar head.
pub fn evaluate(model: &Model, test: &Dataset) -> Result<Evaluation> {
    let latent = model.topology.arch.latent;
    let mut predictions = Vec::with_capacity(test.len());
    let mut per_dim = vec![0.0f64; latent];
    let mut has_logvar = false;
    let plan = BatchPlan::sequential(test.len(), EVAL_BATCH);
    for batch in batches(test, &plan) {
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, false);
        let x = g.constant(&batch.x);
        let (encoded, out) = model.topology.predict(&mut g, &bound, x)?;
        predictions.extend_from_slice(&out.predicted);
        if let Some(lv) = encoded.logvar {
            has_logvar = true;
            for (i, (m, v)) in g.value(encoded.mu).iter().zip(g.value(lv)).enumerate() {
                let (m, v) = (*m as f64, *v as f64);
                per_dim[i % latent] += 0.5 * (m * m + (v.exp_m1() - v));
            }
        }
    }
    let correct = predictions
        .iter()
        .zip(test.labels())
        .filter(|(p, &l)| **p == l as usize)
        .count();
    let per_dim_kl = if has_logvar {
        per_dim.iter().map(|v| (v / test.len() as f64).max(0.0)).collect()
    } else {
        Vec::new()
    };
    Ok(Evaluation {
        accuracy: 100.0 * correct as f64 / test.len() as f64,
        correct,
        total: test.len(),
        predictions,
        per_dim_kl,
    })
}

/// Per-run mutable training state.
struct Trainer<'a> {
    config: &'a RunConfig,
    seed: u64,
    model: Model,
    adam: AdamState,
    eps: Gaussian<rand_chacha::ChaCha8Rng>,
    epoch: u64,
    steps: usize,
}

impl Trainer<'_> {
    fn epoch(&mut self, train: &Dataset, phase: &'static str, masks: Option<&SparsityMask>) -> Result<LossBreakdown> {
        let started = Instant::now();
        let plan = BatchPlan::for_epoch(train.len(), self.seed, self.epoch, self.config.batch_size);
        let vae = self.model.topology.kind.is_vae();
        let latent = self.model.topology.arch.latent;
        let mut parts = Vec::with_capacity(plan.num_batches());
        for batch in batches(train, &plan) {
            let mut g = Graph::new();
            let bound = self.model.params.bind(&mut g, true);
            let x = g.constant(&batch.x);
            let eps = vae.then(|| self.eps.tensor(vec![batch.labels.len(), latent]));
            let fwd = self.model.topology.forward(&mut g, &bound, x, &batch.labels, eps.as_ref())?;
            let total = fwd.objective.breakdown.total;
            if !total.is_finite() || !g.scalar(fwd.objective.total).is_finite() {
                return Err(Error::Diverged {
                    phase,
                    step: self.steps,
                });
            }
            g.backward(fwd.objective.total)?;
            self.model.params.collect_grads(&g, &bound)?;
            match masks {
                Some(m) => masked_step(&mut self.model.params, m, &mut self.adam)?,
                None => adam_step(&mut self.model.params, &mut self.adam)?,
            }
            self.steps += 1;
            parts.push(fwd.objective.breakdown);
        }
        self.model.params.clear_grads();
        let mean = LossBreakdown::mean_of(&parts).unwrap_or_default();
        log::info!(
            "seed {} {phase} epoch {}: loss {:.4} (ce {:.4}, kl {:.4}, recon {:.2}) in {:.1}s",
            self.seed,
            self.epoch,
            mean.total,
            mean.ce,
            mean.kl,
            mean.recon,
            started.elapsed().as_secs_f64()
        );
        self.epoch += 1;
        Ok(mean)
    }

    fn phase(
        &mut self,
        train: &Dataset,
        epochs: usize,
        phase: &'static str,
        masks: Option<&SparsityMask>,
        last: LossBreakdown,
    ) -> Result<LossBreakdown> {
        (0..epochs).try_fold(last, |_, _| self.epoch(train, phase, masks))
    }

    fn row(&self, test: &Dataset, pruned: bool, loss: LossBreakdown) -> Result<ResultRow> {
        let eval = evaluate(&self.model, test)?;
        let bytes = encode_model(&self.model.params)?;
        if let Some(dir) = &self.config.out_dir {
            std::fs::create_dir_all(dir)?;
            write_atomic(&dir.join(format!("{}.bprn", self.config.tag(pruned, self.seed))), &bytes)?;
        }
        Ok(ResultRow {
            dataset: self.config.dataset,
            kind: self.config.kind,
            beta: self.config.beta,
            pruned,
            seed: self.seed,
            accuracy: eval.accuracy,
            raw_bytes: bytes.len() as u64,
            compressed_bytes: compressed_len(&bytes)?,
            loss,
            collapsed: eval.collapsed(),
            per_dim_kl: eval.per_dim_kl,
            sparsity: sparsity_report(&self.model.params).global,
        })
    }
}

fn limited(ds: &Dataset, limit: Option<usize>) -> std::borrow::Cow<'_, Dataset> {
    match limit {
        Some(n) if n < ds.len() => std::borrow::Cow::Owned(ds.take(n)),
        _ => std::borrow::Cow::Borrowed(ds),
    }
}

/// Runs all phases for one seed.
///
/// The unpruned row is measured at the end of phase 2; since the pruning
/// phase starts from exactly that state, a pruned run also reproduces the
/// unpruned run of the same seed.
pub fn run_protocol(config: &RunConfig, seed: u64, train: &Dataset, test: &Dataset) -> Result<ProtocolRun> {
    config.validate()?;
    if train.name != config.dataset || test.name != config.dataset {
        return Err(Error::Config(format!(
            "datasets are {}/{}, config wants {}",
            train.name, test.name, config.dataset
        )));
    }
    let train = limited(train, config.train_limit);
    let test = limited(test, config.test_limit);
    let model = build_model_with(config.arch(), config.kind, config.beta, seed)?;
    let mut t = Trainer {
        config,
        seed,
        model,
        adam: AdamState::new(config.adam),
        eps: Gaussian::new(rng::stream(seed, Stream::Eps)),
        epoch: 0,
        steps: 0,
    };

    let loss = t.phase(&train, config.epochs.train, "train", None, LossBreakdown::default())?;
    t.model.decapitate();
    t.adam.retain_params(&t.model.params);
    let loss = t.phase(&train, config.epochs.decapitated, "decapitated", None, loss)?;
    let unpruned = t.row(&test, false, loss.clone())?;

    let (pruned, masks) = if config.prune {
        let masks = compute_masks(&t.model.params, config.sparsity)?;
        apply_masks(&mut t.model.params, &masks)?;
        let loss = t.phase(&train, config.epochs.finetune, "finetune", Some(&masks), loss)?;
        (Some(t.row(&test, true, loss)?), Some(masks))
    } else {
        (None, None)
    };
    Ok(ProtocolRun {
        unpruned,
        pruned,
        masks,
        model: t.model,
    })
}

/// Runs every seed of `config` in order and collects all rows.
pub fn run_seeds(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let run = run_protocol(config, seed, train, test)?;
        rows.push(run.unpruned);
        rows.extend(run.pruned);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::tensor::Tensor;

    fn toy(n: usize, split: Split, salt: usize) -> Dataset {
        let labels: Vec<u8> = (0..n).map(|i| ((i + salt) % 10) as u8).collect();
        let images = Tensor::from_fn(vec![n, 1, 28, 28], |i| {
            let (img, px) = (i / 784, i % 784);
            let class = labels[img] as usize;
            if px / 78 == class {
                0.9
            } else {
                ((px * 7 + img) % 13) as f32 / 40.0
            }
        });
        Dataset::new(DatasetKind::Mnist, split, images, labels).unwrap()
    }

    fn quick(kind: ModelKind, beta: Option<f64>, prune: bool) -> RunConfig {
        let mut c = RunConfig::new(DatasetKind::Mnist, kind, beta, prune);
        c.epochs = Epochs {
            train: 1,
            decapitated: 1,
            finetune: 1,
        };
        c.seeds = vec![7];
        c
    }

    #[test]
    fn epochs_parse() {
        assert_eq!("30,2,2".parse::<Epochs>().unwrap(), Epochs::default());
        assert!("30,2".parse::<Epochs>().is_err());
        assert!("a,b,c".parse::<Epochs>().is_err());
    }

    #[test]
    fn config_contracts() {
        assert!(quick(ModelKind::BetaVaeClassif, Some(3.0), false).validate().is_ok());
        assert!(quick(ModelKind::BetaVaeClassif, Some(2.0), false).validate().is_err());
        assert!(quick(ModelKind::BetaVaeClassif, None, false).validate().is_err());
        assert!(quick(ModelKind::CnnClassif, Some(1.0), false).validate().is_err());
        let c = quick(ModelKind::BetaVaeClassif, Some(5.0), true);
        assert_eq!(c.tag(true, 2), "mnist_beta_vae_classif_b5_pruned_seed2");
    }

    #[test]
    fn protocol_runs_all_phases() {
        let (train, test) = (toy(96, Split::Train, 0), toy(40, Split::Test, 3));
        let run = run_protocol(&quick(ModelKind::BetaVaeClassif, Some(1.0), true), 7, &train, &test).unwrap();
        assert!(!run.model.has_decoder());
        let pruned = run.pruned.as_ref().unwrap();
        assert!(pruned.compressed_bytes < run.unpruned.compressed_bytes);
        assert_eq!(pruned.raw_bytes, run.unpruned.raw_bytes);
        assert!((pruned.sparsity - 0.5).abs() < 1e-3);
        assert_eq!(run.unpruned.per_dim_kl.len(), 16);
        assert_eq!(run.unpruned.loss.recon, 0.0);
        let params = decode_model(&encode_model(&run.model.params).unwrap()).unwrap();
        assert!(params.names().all(|n| !n.starts_with("decoder.")));
    }

    #[test]
    fn untrained_model_near_chance() {
        let test = toy(1000, Split::Test, 0);
        let model = build_model_with(ArchSpec::mnist(), ModelKind::CnnClassif, None, 3).unwrap();
        let eval = evaluate(&model, &test).unwrap();
        assert_eq!(eval.total, 1000);
        assert!(eval.accuracy >= 0.0 && eval.accuracy <= 100.0);
        assert!(eval.per_dim_kl.is_empty() && !eval.collapsed());
    }

    #[test]
    fn dataset_mismatch_is_config_error() {
        let train = toy(10, Split::Train, 0);
        let cifar = RunConfig::new(DatasetKind::Cifar10, ModelKind::CnnClassif, None, false);
        assert!(matches!(run_protocol(&cifar, 1, &train, &train), Err(Error::Config(_))));
    }
}
