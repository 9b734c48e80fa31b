use indexmap::IndexMap;

use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Element = f32> {
    pub tensor: Tensor<T>,
    pub prunable: bool,
}

/// Named parameter tensors in insertion order.
///
/// Names encode the layer path, e.g. `encoder.conv1.kernel`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T: Element = f32> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Element> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, prunable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid("ModelParams::insert", format!("duplicate parameter {name:?}")));
        }
        self.entries.insert(name, Param { tensor, prunable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam { name: name.into() })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParam { name: name.into() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Removes every parameter whose name starts with `prefix`, returning their names.
    pub fn remove_prefix(&mut self, prefix: &str) -> Vec<String> {
        let doomed: Vec<String> = self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        for name in &doomed {
            self.entries.shift_remove(name);
        }
        doomed
    }

    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.clear_grad();
        }
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            prunable: p.prunable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, track_grads: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| {
                let v = if track_grads { g.param(&p.tensor) } else { g.constant(&p.tensor) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Copies gradients from the tape into each parameter's `grad` buffer.
    /// Parameters the loss does not depend on receive zeros.
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &Bound) -> Result<()> {
        for (name, p) in self.entries.iter_mut() {
            let var = bound.get(name)?;
            let grad = match g.grad(var) {
                Some(gr) => gr.to_vec(),
                None => vec![T::zero(); p.tensor.len()],
            };
            p.tensor.set_grad(grad)?;
        }
        Ok(())
    }
}

/// Tape handles for a [`ModelParams`] bound to one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam { name: name.into() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Rebinds `name` to `var`, e.g. to probe one tensor with finite differences.
    pub fn with_var(mut self, name: &str, var: Var) -> Result<Self> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam { name: name.into() })?;
        *slot = var;
        Ok(self)
    }
}

/// Total number of scalar parameters.
pub fn count_params<T: Element>(params: &ModelParams<T>) -> usize {
    params.iter().map(|(_, p)| p.tensor.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let mut p = ModelParams::<f32>::new();
        assert_eq!(count_params(&p), 0);
        p.insert("k", Tensor::zeros(vec![3, 3]), true).unwrap();
        p.insert("b", Tensor::zeros(vec![1]), false).unwrap();
        assert_eq!(count_params(&p), 10);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ModelParams::<f32>::new();
        p.insert("a", Tensor::zeros(vec![1]), false).unwrap();
        assert!(p.insert("a", Tensor::zeros(vec![1]), false).is_err());
    }

    #[test]
    fn remove_prefix_keeps_order() {
        let mut p = ModelParams::<f32>::new();
        for n in ["encoder.a", "decoder.b", "classifier.c", "decoder.d"] {
            p.insert(n, Tensor::zeros(vec![1]), false).unwrap();
        }
        assert_eq!(p.remove_prefix("decoder."), vec!["decoder.b", "decoder.d"]);
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["encoder.a", "classifier.c"]);
    }
}
