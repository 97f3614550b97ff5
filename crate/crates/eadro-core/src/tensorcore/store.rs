use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensorcore::scalar::Scalar;
use crate::tensorcore::tensor::Tensor;

/// Names that hold state rather than learnable weights: batch-norm running
/// statistics and input-normalization constants. The optimizer skips them
/// and checkpoints restore them as non-trainable.
pub fn is_state_name(name: &str) -> bool {
    name.contains(".running_") || name.starts_with("norm.")
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Entry<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named, shaped parameter arrays. Iteration order is sorted by name, which
/// keeps initialization, optimizer sweeps and checkpoints deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore<T = f32> {
    pub(crate) entries: BTreeMap<String, Entry<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) {
        self.entries.insert(
            name.to_string(),
            Entry {
                tensor,
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::data(format!("missing parameter {name:?}")))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(e) => {
                e.tensor = tensor;
                Ok(())
            }
            None => Err(Error::data(format!("missing parameter {name:?}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted (name, tensor) pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), &v.tensor))
    }

    /// Sorted names of trainable entries only.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.cast::<U>(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Total number of scalar values across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }
}
