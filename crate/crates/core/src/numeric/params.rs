use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients keyed by `"<group>/<tensor>"`.
pub type GradMap = BTreeMap<String, Tensor>;

pub fn param_key(group: &str, tensor: &str) -> String {
    format!("{group}/{tensor}")
}

/// A named set of tensors that is either trained or frozen as a unit.
///
/// The `frozen` flag only gates optimizer updates; forward passes and
/// gradient computation ignore it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub tensors: BTreeMap<String, Tensor>,
    pub frozen: bool,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            tensors: BTreeMap::new(),
            frozen: false,
        }
    }

    pub fn with(mut self, tensor: impl Into<String>, value: Tensor) -> Self {
        self.tensors.insert(tensor.into(), value);
        self
    }
}

/// Ordered collection of parameter groups with unique names.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    groups: Vec<ParamGroup>,
}

impl ModelParams {
    pub fn new(groups: Vec<ParamGroup>) -> Result<Self> {
        for (i, g) in groups.iter().enumerate() {
            if groups[..i].iter().any(|o| o.name == g.name) {
                return Err(Error::Config(format!("duplicate parameter group `{}`", g.name)));
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn get(&self, group: &str, tensor: &str) -> Option<&Tensor> {
        self.group(group)?.tensors.get(tensor)
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) -> Result<()> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.name == group)
            .ok_or_else(|| Error::UnknownParam(group.to_string()))?;
        g.frozen = frozen;
        Ok(())
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.group(group).is_some_and(|g| g.frozen)
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(|(_, _, t)| t.numel()).sum()
    }

    /// `(group, tensor name, value)` in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &Tensor)> {
        self.groups
            .iter()
            .flat_map(|g| g.tensors.iter().map(move |(n, t)| (g.name.as_str(), n.as_str(), t)))
    }

    pub(crate) fn tensor_mut(&mut self, group: &str, tensor: &str) -> Option<&mut Tensor> {
        self.groups.iter_mut().find(|g| g.name == group)?.tensors.get_mut(tensor)
    }

    /// Records every tensor as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.bind_groups(tape, |_| true)
    }

    /// Like [`bind`](Self::bind), restricted to groups accepted by `keep`.
    pub fn bind_groups(&self, tape: &mut Tape, keep: impl Fn(&str) -> bool) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (g, n, t) in self.iter() {
            if keep(g) {
                vars.insert(param_key(g, n), tape.param(t.clone()));
            }
        }
        BoundParams { vars }
    }

    /// True when both hold the same groups, names and bit patterns.
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.groups.len() == other.groups.len() && self.groups.iter().zip(&other.groups).all(|(a, b)| group_bit_eq(a, b))
    }

    /// True when group `name` is bitwise identical in both.
    pub fn group_bit_eq(&self, other: &ModelParams, name: &str) -> bool {
        match (self.group(name), other.group(name)) {
            (Some(a), Some(b)) => group_bit_eq(a, b),
            _ => false,
        }
    }

    /// Checks that `self` has exactly the tensors and shapes of `template`.
    pub fn check_layout(&self, template: &ModelParams) -> Result<()> {
        for (g, n, t) in template.iter() {
            match self.get(g, n) {
                None => return Err(Error::UnknownParam(format!("missing tensor {}", param_key(g, n)))),
                Some(mine) if mine.shape() != t.shape() => {
                    return Err(Error::Shape {
                        op: "check_layout",
                        lhs: mine.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some((g, n, _)) = self.iter().find(|(g, n, _)| template.get(g, n).is_none()) {
            return Err(Error::UnknownParam(format!("unexpected tensor {}", param_key(g, n))));
        }
        Ok(())
    }
}

fn group_bit_eq(a: &ParamGroup, b: &ParamGroup) -> bool {
    a.name == b.name
        && a.frozen == b.frozen
        && a.tensors.len() == b.tensors.len()
        && a.tensors
            .iter()
            .zip(&b.tensors)
            .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
}

/// Tape handles for the tensors of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, group: &str, tensor: &str) -> Result<Var> {
        let key = param_key(group, tensor);
        self.vars.get(&key).copied().ok_or(Error::UnknownParam(key))
    }

    /// Extracts the named gradient map for every bound tensor.
    pub fn gradients(&self, grads: &Gradients) -> GradMap {
        self.vars.iter().map(|(k, &v)| (k.clone(), grads.wrt(v))).collect()
    }
}
