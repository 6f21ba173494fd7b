//! Named parameter storage and binding onto a tape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Float = f32> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(Arc::new(t.with_requires_grad(false)));
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast::<U>())).collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every tensor of `other` whose name exists here with the same
    /// shape; returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut n = 0;
        for (name, t) in other.iter() {
            if let Some(id) = self.id(name) {
                if self.get(id).shape() == t.shape() {
                    self.tensors[id.0] = Arc::new(t.clone());
                    n += 1;
                }
            }
        }
        n
    }

    /// Records every parameter on the tape, as gradient-tracked leaves when
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.shared(Arc::clone(t), trainable))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Binds parameters as consecutive slices of one flat vector laid out
    /// in store order (see [`ParamStore::flatten`]).
    pub fn bind_flat(&self, tape: &mut Tape<T>, flat: Var) -> Result<Bound> {
        let mut offset = 0;
        let mut vars = Vec::with_capacity(self.len());
        for t in &self.tensors {
            vars.push(tape.slice(flat, offset, t.shape())?);
            offset += t.numel();
        }
        Ok(Bound { vars })
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Tape variables of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Creates parameters (with fresh random values) or looks them up by name
/// in an existing store, so one layout function serves both.
pub(crate) enum Builder<'a> {
    Init {
        store: &'a mut ParamStore<f32>,
        rng: &'a mut ChaCha8Rng,
    },
    Load {
        store: &'a ParamStore<f32>,
        used: usize,
    },
}

pub(crate) enum Fill {
    /// `U(−1/√fan_in, 1/√fan_in)` with `fan_in` the first dimension.
    FanIn,
    /// `U(−a, a)`.
    Uniform(f32),
    Const(f32),
}

impl<'a> Builder<'a> {
    pub(crate) fn load(store: &'a ParamStore<f32>) -> Self {
        Builder::Load { store, used: 0 }
    }

    /// Fails unless the layout consumed every stored parameter.
    pub(crate) fn finish(self) -> Result<()> {
        if let Builder::Load { store, used } = self {
            if used != store.len() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{} parameters stored, layout uses {used}", store.len()),
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn param(&mut self, name: &str, shape: &[usize], fill: Fill) -> Result<ParamId> {
        match self {
            Builder::Init { store, rng } => {
                let n: usize = shape.iter().product();
                let data = match fill {
                    Fill::Const(c) => vec![c; n],
                    Fill::FanIn => {
                        let a = 1.0 / (shape[0] as f32).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                    Fill::Uniform(a) => (0..n).map(|_| rng.random_range(-a..a)).collect(),
                };
                store.insert(name, Tensor::new(shape, data)?)
            }
            Builder::Load { store, used } => {
                *used += 1;
                let id = store
                    .id(name)
                    .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {name}")))?;
                if store.get(id).shape() != shape {
                    return Err(Error::format(
                        "checkpoint",
                        format!("{name} has shape {:?}, expected {shape:?}", store.get(id).shape()),
                    ));
                }
                Ok(id)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_flat_matches_bind() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        s.insert("b", Tensor::new(&[3], vec![5.0, 6.0, 7.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let flat = tape.constant(Tensor::new(&[7], s.flatten()).unwrap()).unwrap();
        let b1 = s.bind_flat(&mut tape, flat).unwrap();
        let b2 = s.bind(&mut tape, false).unwrap();
        for id in s.ids() {
            assert_eq!(tape.value(b1.var(id)), tape.value(b2.var(id)));
        }
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
    }
}
