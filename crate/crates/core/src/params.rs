use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{fingerprint, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Refiner,
    Discriminator,
    Predictor,
    Other,
}

/// Named parameter tensors of one network, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T: Scalar = f32> {
    kind: NetKind,
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> NetParams<T> {
    pub fn new(kind: NetKind) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetParams<U> {
        NetParams {
            kind: self.kind,
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.clear_grad();
        }
    }
}

impl NetParams<f32> {
    /// Order-sensitive hash of names, shapes and values.
    pub fn fingerprint(&self) -> u64 {
        let names = self
            .entries
            .iter()
            .flat_map(|(n, _)| n.bytes())
            .fold(0u64, |h, b| h.rotate_left(5) ^ b as u64);
        names ^ fingerprint(self.entries.iter().map(|(_, t)| t))
    }

    /// Bitwise equality of names, shapes and values (`NaN`-safe).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape() && a.bits().eq(b.bits()))
    }
}
