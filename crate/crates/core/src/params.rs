//! Named parameter tensors.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Matrix<T>,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// How a freshly allocated tensor is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let value = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, T::one()),
            Init::Uniform(bound) => {
                let data = (0..rows * cols)
                    .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
                    .collect();
                Matrix::from_vec(rows, cols, data)
            }
        };
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Binds a tensor onto a tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param(id.0, self.get(id))
    }

    /// Collects the gradient of each parameter (zero when unused).
    pub fn gradients(
        &self,
        tape: &Tape<T>,
        grads: &crate::tape::Gradients<T>,
    ) -> Vec<Matrix<T>> {
        let mut out: Vec<Matrix<T>> = self
            .params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        for (id, var) in tape.param_vars() {
            if let Some(g) = grads.get(var) {
                out[id] = g.clone();
            }
        }
        out
    }
}
