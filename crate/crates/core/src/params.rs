use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Named parameter set, ordered lexicographically by dot-separated path.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for LayerParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> LayerParams<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        match self.entries.binary_search_by(|(n, _)| n.as_str().cmp(&name)) {
            Ok(_) => Err(Error::Config(alloc::format!("duplicate parameter `{name}`"))),
            Err(pos) => {
                self.entries.insert(pos, (name, value));
                Ok(())
            }
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn get_index(&self, idx: usize) -> &Tensor<T> {
        &self.entries[idx].1
    }

    pub fn get_index_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.entries[idx].1
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        LayerParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible<U: Real>(&self, other: &LayerParams<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(dim_err!(
                "parameter sets differ in size: {} vs {}",
                self.len(),
                other.len()
            ));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(dim_err!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    na,
                    ta.shape(),
                    nb,
                    tb.shape()
                ));
            }
        }
        Ok(())
    }
}
