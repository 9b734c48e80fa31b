use indexmap::IndexMap;

use super::ModelParams;
use crate::tensor::Element;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// First and second moment estimates, created lazily per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub config: AdamConfig,
    t: u64,
    moments: IndexMap<String, Moments<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            moments: IndexMap::new(),
        }
    }

    /// Number of completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.moments.get(name).map(|m| m.m.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.moments.get(name).map(|m| m.v.as_slice())
    }

    /// Drops moments for parameters no longer present in `params`.
    pub fn retain_params(&mut self, params: &ModelParams<T>) {
        self.moments.retain(|name, _| params.contains(name));
    }
}

impl<T: Element> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(AdamConfig::default())
    }
}

/// One bias-corrected Adam update of every parameter from its `grad`.
///
/// Fails before touching anything if any parameter lacks a gradient.
pub fn adam_step<T: Element>(params: &mut ModelParams<T>, state: &mut AdamState<T>) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.tensor.grad().is_none()) {
        return Err(Error::MissingGrad { name: name.into() });
    }
    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let n = p.tensor.len();
        let mo = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let data = p.tensor.data_mut();
        for i in 0..n {
            let g = grad[i].widen();
            let m = beta1 * mo.m[i].widen() + (1.0 - beta1) * g;
            let v = beta2 * mo.v[i].widen() + (1.0 - beta2) * g * g;
            mo.m[i] = T::narrow(m);
            mo.v[i] = T::narrow(v);
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + epsilon);
            data[i] = T::narrow(data[i].widen() - update);
        }
    }
    Ok(())
}
