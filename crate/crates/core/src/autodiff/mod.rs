//! Reverse-mode automatic differentiation over dense real tensors.
//!
//! Graphs are recorded on a [`Tape`] as they are evaluated; [`Tape::backward`]
//! walks the record once in reverse. Trainable tensors live in a
//! [`ParamStore`] and enter a tape through [`ParamStore::attach`].

use alloc::string::String;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("loss of shape {0:?} is not a scalar")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any parameter")]
    DisconnectedLoss,
    #[error("two evaluations of the same inputs differ: {0} vs {1}")]
    NonDeterministicFunction(f64, f64),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
}

/// Named trainable tensors; a parameter's id is its insertion index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> Result<usize, AutodiffError> {
        if self.names.iter().any(|n| n == name) {
            return Err(AutodiffError::DuplicateName(name.into()));
        }
        self.names.push(name.into());
        self.tensors.push(t);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Records every parameter on `tape`; the returned vars are indexed by id.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(t.clone(), i))
            .collect()
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn uniform_fan_in<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

#[cfg(test)]
mod tests;
