//! Tape-based reverse-mode differentiation over real and complex tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node keeps its
//! value and a backward rule mapping the output cotangent to contributions for
//! its parents. Backward rules act on the (re, im) real pairs directly, and a
//! complex leaf receives `∂L/∂u + j ∂L/∂v`, which is the steepest-ascent
//! direction of the real loss. Optimizers can therefore step
//! `μ ← μ - lr·grad` for real and complex parameters alike.

mod gradcheck;
mod ops;
mod params;
mod value;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

pub use gradcheck::{gradcheck, GradcheckReport, GradcheckRow};
pub use params::{ParamId, ParamStore, Parameter};
pub use value::Tensor;

use crate::error::{Error, Result};

/// Maps an output cotangent to `(parent index, contribution)` pairs.
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Result<Vec<(usize, Tensor)>>>;

struct Node {
    value: Arc<Tensor>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: impl Into<Tensor>) -> Var<'_> {
        self.push(Node {
            value: Arc::new(value.into()),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A leaf bound to a stored parameter. Frozen parameters become constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let p = store.get(id);
        self.push(Node {
            value: p.shared(),
            backward: None,
            requires_grad: p.requires_grad,
            param: p.requires_grad.then_some(id),
        })
    }

    /// Records a custom operation. `backward` is only invoked when at least
    /// one parent requires a gradient, and may skip parents that do not.
    pub fn custom<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        backward: BackwardFn,
    ) -> Var<'t> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        self.push(Node {
            value: Arc::new(value),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        })
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a real single-element node.
    pub fn scalar(&self) -> Result<f64> {
        let v = self.value();
        let r = v.as_real()?;
        if r.len() != 1 {
            return Err(Error::Autograd(format!(
                "expected a scalar, found shape {:?}",
                r.shape()
            )));
        }
        Ok(r.data()[0])
    }

    /// Reverse pass from a real scalar loss.
    pub fn backward(&self) -> Result<Gradients> {
        backward(*self)
    }
}

/// Gradients of a loss, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.by_param.insert(id, grad);
    }

    /// ℓ2 norm over every real component of every gradient.
    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.by_param.values_mut().for_each(|g| g.scale_in_place(s));
    }
}

/// Runs the reverse pass. The loss must be a real single-element node.
pub fn backward(loss: Var<'_>) -> Result<Gradients> {
    let value = loss.value();
    match &*value {
        Tensor::Complex(_) => {
            return Err(Error::Autograd(
                "backward needs a real-valued loss, found complex".into(),
            ))
        }
        Tensor::Real(r) if r.len() != 1 => {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, found shape {:?}",
                r.shape()
            )))
        }
        _ => {}
    }
    let nodes = loss.tape.nodes.borrow();
    let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
    grads[loss.id] = Some(Tensor::Real(crate::ctensor::RTensor::full(
        value.shape().to_vec(),
        1.0,
    )));
    let mut out = Gradients::default();
    for id in (0..=loss.id).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &nodes[id];
        if let Some(pid) = node.param {
            match out.by_param.get_mut(&pid) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    out.by_param.insert(pid, g);
                }
            }
            continue;
        }
        let Some(bw) = &node.backward else { continue };
        for (parent, contrib) in bw(&g)? {
            if !nodes[parent].requires_grad {
                continue;
            }
            match &mut grads[parent] {
                Some(acc) => acc.add_assign(&contrib)?,
                slot @ None => *slot = Some(contrib),
            }
        }
    }
    Ok(out)
}
