use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by an optimizer.
    Trainable,
    /// Running state such as batch-norm statistics or power-iteration vectors.
    Buffer,
}

struct ParamInner {
    name: String,
    kind: ParamKind,
    value: RwLock<Tensor>,
}

/// Shared handle to one named tensor in a [`ParamStore`].
#[derive(Clone)]
pub struct Param(Arc<ParamInner>);

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.0.name, self.shape())
    }
}

impl Param {
    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn kind(&self) -> ParamKind {
        self.0.kind
    }

    /// Current value. Trainable values are graph leaves, so the same tensor handed
    /// to a forward pass can be passed to `grad`.
    pub fn get(&self) -> Tensor {
        self.0.value.read().expect("param lock poisoned").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.get().shape().to_vec()
    }

    pub fn set(&self, t: Tensor) -> Result<()> {
        let mut slot = self.0.value.write().expect("param lock poisoned");
        if slot.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "{}: cannot assign shape {:?} over {:?}",
                self.0.name,
                t.shape(),
                slot.shape()
            )));
        }
        *slot = match self.0.kind {
            ParamKind::Trainable => t.detach().into_var(),
            ParamKind::Buffer => t.detach(),
        };
        Ok(())
    }
}

struct StoreInner {
    params: BTreeMap<String, Param>,
    rng: ChaCha8Rng,
}

/// Ordered collection of named parameters and buffers with a seeded initializer.
#[derive(Clone)]
pub struct ParamStore(Arc<Mutex<StoreInner>>);

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ParamStore({} entries)", self.all().len())
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore(Arc::new(Mutex::new(StoreInner {
            params: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })))
    }

    pub fn root(&self) -> Builder {
        Builder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn insert(&self, name: String, kind: ParamKind, t: Tensor) -> Result<Param> {
        let mut inner = self.0.lock().expect("store lock poisoned");
        if inner.params.contains_key(&name) {
            return Err(config_err!("duplicate parameter name {name}"));
        }
        let value = match kind {
            ParamKind::Trainable => t.detach().into_var(),
            ParamKind::Buffer => t.detach(),
        };
        let p = Param(Arc::new(ParamInner {
            name: name.clone(),
            kind,
            value: RwLock::new(value),
        }));
        inner.params.insert(name, p.clone());
        Ok(p)
    }

    fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        f(&mut self.0.lock().expect("store lock poisoned").rng)
    }

    /// Every entry, sorted by name.
    pub fn all(&self) -> Vec<Param> {
        self.0.lock().expect("store lock poisoned").params.values().cloned().collect()
    }

    pub fn trainable(&self) -> Vec<Param> {
        self.all().into_iter().filter(|p| p.kind() == ParamKind::Trainable).collect()
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.0.lock().expect("store lock poisoned").params.get(name).cloned()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|p| p.get().numel()).sum()
    }
}

/// Scoped view of a store that prefixes every name it creates.
#[derive(Clone)]
pub struct Builder {
    store: ParamStore,
    prefix: String,
}

impl Builder {
    pub fn pp(&self, name: &str) -> Builder {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store.clone(),
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param(&self, name: &str, init: Tensor) -> Result<Param> {
        self.store.insert(self.full_name(name), ParamKind::Trainable, init)
    }

    pub fn buffer(&self, name: &str, init: Tensor) -> Result<Param> {
        self.store.insert(self.full_name(name), ParamKind::Buffer, init)
    }

    /// Trainable parameter drawn from U(-bound, bound).
    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Param> {
        let t = self
            .store
            .with_rng(|rng| Tensor::rand_uniform(shape, -bound, bound, rng));
        self.param(name, t)
    }

    pub fn randn_buffer(&self, name: &str, shape: &[usize]) -> Result<Param> {
        let t = self.store.with_rng(|rng| Tensor::randn(shape, rng));
        self.buffer(name, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_prefixed_and_unique() {
        let store = ParamStore::new(1);
        let b = store.root().pp("enc").pp("conv");
        b.uniform("weight", &[2, 3], 0.5).unwrap();
        assert!(store.get("enc.conv.weight").is_some());
        assert!(b.uniform("weight", &[2, 3], 0.5).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let draw = || {
            let s = ParamStore::new(9);
            s.root().uniform("w", &[4], 1.0).unwrap().get().to_vec()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn set_rejects_shape_change_and_keeps_leaf() {
        let s = ParamStore::new(0);
        let p = s.root().uniform("w", &[2], 1.0).unwrap();
        assert!(p.set(Tensor::zeros(&[3])).is_err());
        p.set(Tensor::ones(&[2])).unwrap();
        assert!(p.get().requires_grad());
        assert_eq!(p.get().to_vec(), vec![1.0, 1.0]);
    }
}
