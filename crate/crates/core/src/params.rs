//! Named parameter collections and their binding into a graph.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{grad_check, GradCheckReport, Gradients, Graph, Tensor, Var};

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Param(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Param(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Copies every entry into `self` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let p = format!("{prefix}.");
        let mut out = ParamSet::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(&p) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bindings {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable)))
            .collect();
        Bindings { vars }
    }

    /// Registers only the named parameters.
    pub fn bind_some(&self, g: &mut Graph, names: &[&str], trainable: bool) -> Result<Bindings> {
        let mut vars = BTreeMap::new();
        for &n in names {
            vars.insert(n.to_string(), g.leaf(self.get(n)?.clone(), trainable));
        }
        Ok(Bindings { vars })
    }
}

/// Gradient check of a scalar function of a whole parameter set.
///
/// Parameters are passed to [`grad_check`] in name order and rebound under
/// their names inside `f`.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamSet,
    eps: f64,
    tol: f64,
) -> Result<(Vec<String>, GradCheckReport)>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let names: Vec<String> = params.map.keys().cloned().collect();
    let tensors: Vec<Tensor> = params.map.values().cloned().collect();
    let wrapped = |g: &mut Graph, vars: &[Var]| {
        let b = Bindings {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        };
        f(g, &b)
    };
    let report = grad_check(wrapped, &tensors, eps, tol)?;
    Ok((names, report))
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Param(format!("parameter {name:?} is not bound")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients for every bound parameter, as a parameter set.
    pub fn gradients(&self, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, &v) in &self.vars {
            out.insert(k.clone(), grads.get(v));
        }
        out
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
