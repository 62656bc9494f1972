//! Named parameter storage and initializers.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::BatchStats;
use crate::tensor::{Element, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight.
    Param,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Ordered map from parameter name to tensor. Insertion order is the
/// serialization order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                tensor,
                kind: ParamKind::Param,
                trainable: true,
            },
        );
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                tensor,
                kind: ParamKind::Buffer,
                trainable: false,
            },
        );
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::invalid("param", format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces the value of an existing entry; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::invalid("param", format!("unknown parameter `{name}`")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(TensorError::dim(
                "param",
                format!("`{name}`: {:?} vs {:?}", entry.tensor.shape(), tensor.shape()),
            ));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| TensorError::invalid("param", format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, e) in self.entries.iter_mut() {
            if e.kind == ParamKind::Param && name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    /// Number of learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Param && e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            kind: e.kind,
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Folds observed batch statistics into `{key}.running_mean` and
    /// `{key}.running_var` with the given momentum, in the given order.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>], momentum: f64) -> Result<()> {
        let m = T::from_f64(momentum);
        for s in stats {
            for (suffix, observed) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let t = self.tensor_mut(&format!("{}.{suffix}", s.key))?;
                if t.numel() != observed.len() {
                    return Err(TensorError::dim("batch_norm", format!("running stats for `{}`", s.key)));
                }
                for (r, &o) in t.data_mut().iter_mut().zip(observed) {
                    *r = (T::one() - m) * *r + m * o;
                }
            }
        }
        Ok(())
    }
}

/// Deterministic initializer drawing from a seeded stream.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::from_f64(dist.sample(self.rng)))
    }

    pub fn uniform<T: Element>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(self.rng.random_range(-bound..bound)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::<f32>::new();
        s.insert_param("w", Tensor::zeros(&[2, 2]));
        assert!(s.set("w", Tensor::zeros(&[4])).is_err());
        assert!(s.set("w", Tensor::full(&[2, 2], 1.0)).is_ok());
        assert!(s.get("missing").is_err());
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut s = ParamStore::<f64>::new();
        s.insert_buffer("bn.running_mean", Tensor::zeros(&[1]));
        s.insert_buffer("bn.running_var", Tensor::full(&[1], 1.0));
        let stats = BatchStats {
            key: "bn".into(),
            mean: vec![1.0],
            var: vec![2.0],
        };
        s.apply_batch_stats(&[stats], 0.1).unwrap();
        assert!((s.get("bn.running_mean").unwrap().data()[0] - 0.1).abs() < 1e-12);
        assert!((s.get("bn.running_var").unwrap().data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn freezing_by_prefix() {
        let mut s = ParamStore::<f32>::new();
        s.insert_param("lm.a", Tensor::zeros(&[3]));
        s.insert_param("enc.b", Tensor::zeros(&[2]));
        s.set_trainable_prefix("lm.", false);
        assert_eq!(s.trainable_count(), 2);
    }
}
