use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::{Real, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::State(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Adds a `shape` parameter drawn from uniform(-scale, scale).
    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], scale: f64, rng: &mut R) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-scale..scale))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| TensorError::State(format!("missing parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Zeroes every parameter; used for degenerate-case tests.
    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// SHA-256 over names, shapes and values (as f64 little-endian bytes).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in value.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Lazily places parameters on a tape, at most once per tape.
#[derive(Debug)]
pub struct Binding {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binding {
    /// `trainable = false` binds parameters as constants (evaluation mode).
    pub fn new<T: Real>(store: &ParamStore<T>, trainable: bool) -> Self {
        Binding {
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn var<T: Real>(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = store.get(id).clone();
        let v = if self.trainable {
            tape.param(value)
        } else {
            tape.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Gradients per parameter after `tape.backward`. Parameters never bound
    /// or unreachable from the loss get `None`.
    pub fn collect_grads<T: Real>(&self, tape: &mut Tape<T>) -> Vec<Option<Vec<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| tape.take_grad(v)))
            .collect()
    }
}
