use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    frozen: bool,
}

/// Named learnable tensors. Frozen parameters enter graphs as constants and
/// are skipped by the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            frozen: false,
        });
        Ok(ParamId(id))
    }

    /// Uniform in `±sqrt(1 / fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    frozen: e.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// `(name, tensor)` pairs in registration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be
    /// present with a matching shape.
    pub fn load_named<'a>(
        &mut self,
        tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in tensors {
            let Some(&i) = self.by_name.get(name) else {
                continue;
            };
            if self.entries[i].value.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter `{name}`: expected {:?}, found {:?}",
                    self.entries[i].value.shape(),
                    t.shape()
                )));
            }
            self.entries[i].value = t.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "checkpoint is missing parameter `{}`",
                self.entries[i].name
            )));
        }
        Ok(())
    }
}

/// Gradients keyed by parameter, summed over however many backward passes
/// were accumulated into it.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Gradients {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor<T>) {
        self.grads.insert(id, g);
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        let s = T::from_f64(s);
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}
