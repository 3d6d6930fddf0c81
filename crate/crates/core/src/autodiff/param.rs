use std::cell::RefCell;

use rand::Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable array with its accumulated gradient.
#[derive(Debug)]
pub struct ParamNode {
    pub name: String,
    pub value: Tensor,
    pub grad: RefCell<Tensor>,
    /// Frozen parameters are skipped by the optimizer.
    pub frozen: bool,
}

impl ParamNode {
    fn new(name: String, value: Tensor) -> Self {
        let grad = RefCell::new(Tensor::zeros(value.shape()));
        Self {
            name,
            value,
            grad,
            frozen: false,
        }
    }
}

/// Ordered collection of parameters. Order is registration order and is the
/// order used for checkpoint serialization.
#[derive(Debug, Default)]
pub struct ParamSet {
    nodes: Vec<ParamNode>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.nodes.push(ParamNode::new(name, value));
        Ok(ParamId(self.nodes.len() - 1))
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, v))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamNode {
        &self.nodes[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamNode {
        &mut self.nodes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Tensor {
        self.nodes[id.0].grad.borrow().clone()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.nodes.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamNode> {
        self.nodes.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamNode> {
        self.nodes.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.nodes.iter().position(|n| n.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.get_mut().data_mut().fill(0.0);
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.nodes[id.0].frozen = frozen;
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    /// Snapshot of all values, in registration order.
    pub fn values(&self) -> Vec<Tensor> {
        self.nodes.iter().map(|n| n.value.clone()).collect()
    }

    /// Restores values from a snapshot taken with [`ParamSet::values`].
    pub fn load_values(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.nodes.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, got {}",
                self.nodes.len(),
                values.len()
            )));
        }
        for (node, v) in self.nodes.iter_mut().zip(values) {
            if node.value.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "load_values",
                    lhs: node.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            node.value.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }
}
