//! Named parameter tensors with a fixed, config-determined order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::tape::{Tape, Tensor, Var};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`, the usual default for conv and linear layers.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered `(name, tensor)` pairs. Order is part of the format: two stores built
/// from the same config line up index by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn from_specs(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> ParamStore {
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let mut t = Tensor::zeros(s.shape.clone());
            match s.init {
                Init::Uniform { fan_in } => {
                    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                    t.data.iter_mut().for_each(|v| *v = rng.random_range(-b..b));
                }
                Init::Zeros => {}
                Init::Ones => t.data.fill(1.0),
            }
            names.push(s.name.clone());
            tensors.push(t);
        }
        ParamStore { names, tensors }
    }

    /// Build from explicit pairs (checkpoint loading); names must be unique.
    pub fn from_pairs(pairs: Vec<(String, Tensor)>) -> Result<ParamStore> {
        let mut seen = std::collections::HashSet::new();
        for (n, _) in &pairs {
            if !seen.insert(n.as_str()) {
                return Err(NnError::Checkpoint(format!("duplicate tensor name {n:?}")));
            }
        }
        let (names, tensors) = pairs.into_iter().unzip();
        Ok(ParamStore { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape)
    }

    pub fn check_layout(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.len() != specs.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.len()
            )));
        }
        for (s, (n, t)) in specs.iter().zip(self.iter()) {
            if s.name != n || s.shape != t.shape {
                return Err(NnError::Checkpoint(format!(
                    "parameter {n:?} {:?} does not match expected {:?} {:?}",
                    t.shape, s.name, s.shape
                )));
            }
        }
        Ok(())
    }

    /// Put every tensor on the tape, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            names: self.names.clone(),
            vars,
        }
    }
}

/// Parameter tensors placed on a tape.
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub(crate) fn from_parts(names: Vec<String>, vars: Vec<Var>) -> Bound {
        Bound { names, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| NnError::Config(format!("no parameter named {name:?}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
