use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters of a model, kept in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        self.params[id.0].grad.add_assign(grad);
    }

    /// Copies of every value, in store order.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites values from a snapshot; names and shapes must match exactly.
    pub fn restore(&mut self, snapshot: &[(String, Tensor)]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::Compatibility(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                snapshot.len()
            )));
        }
        for (name, value) in snapshot {
            let idx = *self
                .by_name
                .get(name)
                .ok_or_else(|| Error::Compatibility(format!("unknown parameter {name:?}")))?;
            let p = &mut self.params[idx];
            if p.value.shape() != value.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter {name:?} has shape {:?}, snapshot has {:?}",
                    p.value.shape(),
                    value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_resets() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::ones(&[2, 2])).unwrap();
        store.accumulate(id, &Tensor::ones(&[2, 2]));
        assert_eq!(store.get(id).grad.sum(), 4.0);
        store.zero_grad();
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(store.get(id).grad.shape(), store.get(id).value.shape());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(store.add("w", Tensor::scalar(2.0)).is_err());
    }
}
