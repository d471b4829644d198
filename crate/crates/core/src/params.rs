//! Named parameter tensors shared by the network components.

use mqf2_autodiff::{Bindings, Graph, NodeId, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => *v = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub(crate) fn expect(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn extend(&mut self, other: ParamSet) {
        for (n, v) in other.entries {
            self.insert(n, v);
        }
    }

    /// Declares every parameter as a differentiable leaf of `graph`.
    pub fn declare(&self, graph: &mut Graph) -> ParamNodes {
        ParamNodes {
            nodes: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), graph.parameter(n, v.nrows(), v.ncols())))
                .collect(),
        }
    }

    pub fn bind(&self, graph: &Graph, bindings: &mut Bindings) -> Result<()> {
        for (n, v) in &self.entries {
            bindings.set(graph, n, v.clone())?;
        }
        Ok(())
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, v) in &self.entries {
            let o = other
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing")))?;
            if o.dim() != v.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    o.dim(),
                    v.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Graph leaves for a [`ParamSet`], keyed by the same names.
#[derive(Clone, Debug, Default)]
pub struct ParamNodes {
    nodes: Vec<(String, NodeId)>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> NodeId {
        self.nodes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("parameter `{name}` not declared"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|(_, id)| *id).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.nodes.iter().map(|(n, _)| n.as_str()).collect()
    }
}

pub(crate) fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}
