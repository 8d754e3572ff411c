use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Running normalization statistics are state, not trainable weights.
    pub trainable: bool,
}

/// Ordered, name-addressed parameter tensors with their gradients.
///
/// Names are dotted paths such as `encoder.stage2.conv1.weight`; insertion
/// order is fixed by the architecture.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::BadConfig(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(
            name,
            Param {
                value,
                grad,
                trainable,
            },
        );
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

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingTensor(vec![name.to_string()]))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn at(&self, index: usize) -> (&str, &Param) {
        let (k, v) = self.entries.get_index(index).expect("parameter index in range");
        (k.as_str(), v)
    }

    pub fn at_mut(&mut self, index: usize) -> (&str, &mut Param) {
        let (k, v) = self
            .entries
            .get_index_mut(index)
            .expect("parameter index in range");
        (k.as_str(), v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Rounds values to `f32` so the store survives checkpointing unchanged.
    pub fn round_to_f32(&mut self) {
        for p in self.entries.values_mut() {
            p.value.round_to_f32();
        }
    }

    /// Copy of the entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies into `self` every value whose name also exists in `other`; returns the count.
    pub fn copy_matching_values(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (name, p) in self.entries.iter_mut() {
            if let Some(src) = other.get(name) {
                if src.value.shape() != p.value.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "{name}: {:?} vs {:?}",
                        p.value.shape(),
                        src.value.shape()
                    )));
                }
                p.value = src.value.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_duplicates() {
        let mut s = ParamStore::new();
        s.insert("b.weight", Tensor::zeros(&[2]), true).unwrap();
        s.insert("a.weight", Tensor::zeros(&[3]), true).unwrap();
        assert!(s.insert("a.weight", Tensor::zeros(&[3]), true).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["b.weight", "a.weight"]);
        assert_eq!(s.get("a.weight").unwrap().grad.shape(), &[3]);
        assert!(matches!(s.value("c"), Err(Error::MissingTensor(_))));
    }
}
