use super::Tensor;
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered, uniquely named network parameters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterVector<T> {
    entries: Vec<NamedTensor<T>>,
}

impl<T: Scalar> ParameterVector<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.entries.push(NamedTensor { name, tensor });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor<T>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterVector<U> {
        ParameterVector {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: Tensor::zeros(e.tensor.shape()),
                })
                .collect(),
        }
    }

    /// Errors unless `other` has identical names and shapes in the same order.
    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} vs {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Bitwise equality of every value, stricter than `==` on floats.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.check_layout(other).is_ok()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.tensor
                    .data()
                    .iter()
                    .zip(b.tensor.data())
                    .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
