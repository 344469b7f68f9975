use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`]. Stable across
/// [`ParamStore::cast`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub tensor: Tensor<T>,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// Named, insertion-ordered parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let (idx, _) = self
            .params
            .insert_full(name.to_string(), Param { tensor, trainable });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.params
            .get_index_of(name)
            .map(ParamId)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("?")
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param<T>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut Param<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Sets the trainable flag on every parameter whose name starts with
    /// one of `prefixes`, and clears it elsewhere when `exclusive`.
    pub fn set_trainable(&mut self, prefixes: &[&str], exclusive: bool) {
        for (name, p) in self.params.iter_mut() {
            let hit = prefixes.iter().any(|pre| name.starts_with(pre));
            if hit {
                p.trainable = !is_buffer_name(name);
            } else if exclusive {
                p.trainable = false;
            }
        }
    }

    /// Copies values of every parameter present in `other` (same name and
    /// shape) into `self`. Returns how many were copied.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for (name, p) in self.params.iter_mut() {
            if let Some(src) = other.params.get(name) {
                if src.tensor.shape() != p.tensor.shape() {
                    return Err(Error::Format(format!(
                        "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                        p.tensor.shape(),
                        src.tensor.shape()
                    )));
                }
                p.tensor.data_mut().copy_from_slice(src.tensor.data());
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Like [`copy_from`](Self::copy_from) but every parameter of `self`
    /// must be present in `other`.
    pub fn restore_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if let Some(name) = self.params.keys().find(|k| !other.params.contains_key(*k)) {
            return Err(Error::MissingParameter(name.clone()));
        }
        self.copy_from(other).map_err(|e| Error::ModelMismatch(e.to_string()))?;
        Ok(())
    }

    /// Converts all parameters to another precision, keeping ids.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Sub-store of every parameter whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }
}

fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean")
        || name.ends_with(".running_var")
        || name.ends_with(".latent_scale")
        || name.starts_with("meta.")
}

/// Weight initialisation rule.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f32),
    /// Uniform in `±gain·sqrt(3 / fan_in)`.
    Uniform { fan_in: usize, gain: f32 },
}

/// Registers parameters under a dotted name prefix with seeded init.
pub struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Uniform { fan_in, gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f32).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
            }
        };
        let full = self.full_name(name);
        self.store.insert(&full, Tensor::new(shape, data)?, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(&full, Tensor::full(shape, value), false)
    }
}
