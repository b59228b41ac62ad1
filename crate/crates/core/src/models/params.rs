use rand::Rng;

use crate::engine::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Whether the optimizer may touch a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Trainable,
    Frozen,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub role: ParamRole,
}

/// Ordered, named parameter list owned by one network.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

/// Handle of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Tape handles of every parameter of one network, in set order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, role: ParamRole) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            role,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform(±bound) initialization.
    pub fn push_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)));
        self.push(name, value, ParamRole::Trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn set_role(&mut self, id: ParamId, role: ParamRole) {
        self.params[id.0].role = role;
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role == ParamRole::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Place every parameter on `tape`; frozen ones enter as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| match p.role {
                    ParamRole::Trainable => tape.param(p.value.clone()),
                    ParamRole::Frozen => tape.constant(p.value.clone()),
                })
                .collect(),
        )
    }

    /// Mutable views of the trainable parameters with their tape gradients,
    /// in set order.
    pub fn trainable_with_grads<'a>(
        &'a mut self,
        tape: &'a Tape<T>,
        bound: &Bound,
    ) -> (Vec<&'a mut Tensor<T>>, Vec<Option<&'a Tensor<T>>>) {
        let mut values = Vec::new();
        let mut grads = Vec::new();
        for (p, &v) in self.params.iter_mut().zip(bound.vars()) {
            if p.role == ParamRole::Trainable {
                values.push(&mut p.value);
                grads.push(tape.grad(v));
            }
        }
        (values, grads)
    }

    /// Copy values from a structurally identical set.
    pub fn copy_from(&mut self, other: &Self) -> Result<()> {
        self.check_aligned(other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub(crate) fn check_aligned(&self, other: &Self) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape(
                "parameter set",
                format!("{} vs {} parameters", self.params.len(), other.params.len()),
            ));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::shape(
                    "parameter set",
                    format!("{} {:?} vs {} {:?}", a.name, a.value.shape(), b.name, b.value.shape()),
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }
}
