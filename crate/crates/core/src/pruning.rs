//! Local, unstructured, low-magnitude pruning under a constant sparsity target.
//!
//! Masks are computed once per tensor and never change. During fine-tuning
//! the masked gradients are zeroed before each Adam update and the masked
//! weights are re-zeroed after it, so stale moments cannot revive them.

use std::cmp::Ordering;

use indexmap::IndexMap;

use crate::nn::{adam_step, AdamState, ModelParams};
use crate::tensor::Element;
use crate::{Error, Result};

/// Keep-mask for one parameter tensor (`true` = keep).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl TensorMask {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }
}

/// Immutable per-tensor masks over every prunable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    masks: IndexMap<String, TensorMask>,
    target_sparsity: f64,
}

impl SparsityMask {
    pub fn target_sparsity(&self) -> f64 {
        self.target_sparsity
    }

    pub fn get(&self, name: &str) -> Option<&TensorMask> {
        self.masks.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorMask)> {
        self.masks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Number of elements a tensor of `n` loses at `sparsity`: `⌊n·sparsity⌋`.
pub fn pruned_count(n: usize, sparsity: f64) -> usize {
    ((n as f64) * sparsity).floor() as usize
}

fn by_magnitude<T: Element>(data: &[T]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        data[a]
            .widen()
            .abs()
            .total_cmp(&data[b].widen().abs())
            .then(a.cmp(&b))
    }
}

/// Masks the `⌊n·sparsity⌋` smallest-magnitude entries of each prunable
/// tensor independently; equal magnitudes lose the lowest flat index first.
pub fn compute_masks<T: Element>(params: &ModelParams<T>, sparsity: f64) -> Result<SparsityMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::invalid("compute_masks", format!("sparsity {sparsity} outside [0, 1)")));
    }
    let mut masks = IndexMap::new();
    for (name, p) in params.iter().filter(|(_, p)| p.prunable) {
        let data = p.tensor.data();
        let k = pruned_count(data.len(), sparsity);
        let mut keep = vec![true; data.len()];
        if k > 0 {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.select_nth_unstable_by(k - 1, by_magnitude(data));
            for &i in &order[..k] {
                keep[i] = false;
            }
        }
        masks.insert(
            name.to_string(),
            TensorMask {
                shape: p.tensor.shape().to_vec(),
                keep,
            },
        );
    }
    if masks.is_empty() {
        return Err(Error::NothingToPrune);
    }
    Ok(SparsityMask {
        masks,
        target_sparsity: sparsity,
    })
}

fn check_alignment<T: Element>(params: &ModelParams<T>, masks: &SparsityMask) -> Result<()> {
    for (name, m) in masks.iter() {
        let t = params.tensor(name)?;
        if t.shape() != m.shape() {
            return Err(Error::shape("apply_masks", t.shape(), m.shape()));
        }
    }
    Ok(())
}

/// Sets every masked weight to exactly zero; other values are untouched.
pub fn apply_masks<T: Element>(params: &mut ModelParams<T>, masks: &SparsityMask) -> Result<()> {
    check_alignment(params, masks)?;
    for (name, m) in masks.iter() {
        let data = params.tensor_mut(name)?.data_mut();
        for (v, &keep) in data.iter_mut().zip(m.keep()) {
            if !keep {
                *v = T::zero();
            }
        }
    }
    Ok(())
}

/// Adam step that leaves masked weights at zero.
pub fn masked_step<T: Element>(
    params: &mut ModelParams<T>,
    masks: &SparsityMask,
    state: &mut AdamState<T>,
) -> Result<()> {
    check_alignment(params, masks)?;
    for (name, m) in masks.iter() {
        let t = params.tensor_mut(name)?;
        let grad = t.grad_mut().ok_or_else(|| Error::MissingGrad { name: name.to_string() })?;
        for (g, &keep) in grad.iter_mut().zip(m.keep()) {
            if !keep {
                *g = T::zero();
            }
        }
    }
    adam_step(params, state)?;
    apply_masks(params, masks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSparsity {
    pub name: String,
    pub prunable: bool,
    pub zeros: usize,
    pub total: usize,
}

impl TensorSparsity {
    pub fn fraction(&self) -> f64 {
        self.zeros as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub tensors: Vec<TensorSparsity>,
    /// Zero fraction over prunable tensors only.
    pub global: f64,
}

/// Exact zero counts for every tensor.
pub fn sparsity_report<T: Element>(params: &ModelParams<T>) -> SparsityReport {
    let tensors: Vec<TensorSparsity> = params
        .iter()
        .map(|(name, p)| TensorSparsity {
            name: name.to_string(),
            prunable: p.prunable,
            zeros: p.tensor.data().iter().filter(|v| **v == T::zero()).count(),
            total: p.tensor.len(),
        })
        .collect();
    let (z, n) = tensors
        .iter()
        .filter(|t| t.prunable)
        .fold((0usize, 0usize), |(z, n), t| (z + t.zeros, n + t.total));
    SparsityReport {
        tensors,
        global: if n == 0 { 0.0 } else { z as f64 / n as f64 },
    }
}
