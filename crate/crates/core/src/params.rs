//! Named parameter storage with matching gradient slots.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::io;
use crate::real::Real;
use crate::tensor::Tensor;

/// Parameters keyed by name. Iteration order is lexicographic and therefore
/// stable across save/load and across runs.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    grads: BTreeMap<String, Tensor<T>>,
    frozen: bool,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            grads: BTreeMap::new(),
            frozen: false,
        }
    }

    /// Inserts or replaces a parameter and resets its gradient slot.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        self.grads.insert(name.clone(), Tensor::zeros(value.shape().to_vec()));
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// A frozen store binds into graphs as constants, so no gradient flows to it.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds the parameter gradients of one backward pass into the slots.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        if self.frozen {
            return Err(Error::Invariant("gradient accumulation into a frozen parameter store".into()));
        }
        for (name, g) in grads.params() {
            let Some(g) = g else { continue };
            let slot = self
                .grads
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name:?}")))?;
            slot.same_shape(g, name)?;
            for (s, v) in slot.data_mut().iter_mut().zip(g.data()) {
                *s += *v;
            }
        }
        Ok(())
    }

    pub fn grads(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Mutable access to each `(param, grad)` pair in name order.
    pub fn pairs_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &Tensor<T>)> {
        self.params
            .iter_mut()
            .zip(self.grads.values())
            .map(|((k, p), g)| (k.as_str(), p, g))
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Writes one tensor file per parameter into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in &self.params {
            io::save_tensor(&dir.join(format!("{name}.rten")), t)?;
        }
        Ok(())
    }

    /// Loads the parameters named in `names` from `dir`.
    pub fn load_dir<'a>(dir: &Path, names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut store = ParamStore::new();
        for name in names {
            let t = io::load_tensor(&dir.join(format!("{name}.rten")))?;
            store.insert(name, t);
        }
        Ok(store)
    }

    /// Replaces every parameter value with the one stored in `dir`, checking shapes.
    pub fn load_values_from(&mut self, dir: &Path) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let t: Tensor<T> = io::load_tensor(&dir.join(format!("{name}.rten")))?;
            p.same_shape(&t, name)?;
            *p = t;
        }
        Ok(())
    }
}
