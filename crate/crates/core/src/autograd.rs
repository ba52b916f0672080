//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Tape`] holding its value and a
//! closure mapping the output gradient to one gradient per parent. Node ids
//! are assigned in creation order, which is already a topological order, so
//! the backward sweep is a single reverse pass.
//!
//! Nodes whose parents are all constants are recorded without a backward
//! closure; gradients never flow into frozen weights or detached targets.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients of a scalar with respect to every leaf that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like its value when nothing reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
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

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: true,
            backward: None,
        })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    /// Record the result of an operation. `backward` maps the output gradient
    /// to one gradient per entry of `parents`, in order.
    pub fn op<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push_node(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.id] = Some(Tensor::ones(root_value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&grad_out);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, g) in node.parents.iter().zip(parent_grads) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    nodes[pid].value.shape(),
                    "grad shape for node {pid}"
                );
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn scalar_value(&self) -> f64 {
        self.value().data()[0]
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<()> {
        self.value().expect_same_shape(&other.value(), what)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let value = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self
            .tape
            .op(value, &[*self, *other], |g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let value = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self
            .tape
            .op(value, &[*self, *other], |g| vec![g.clone(), g.scaled(-1.0)]))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let a = self.value();
        let b = other.value();
        let value = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.op(value, &[*self, *other], move |g| {
            vec![
                g.zip_map(&b, |gi, bi| gi * bi).expect("shape"),
                g.zip_map(&a, |gi, ai| gi * ai).expect("shape"),
            ]
        }))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let value = self.value().scaled(s);
        self.tape.op(value, &[*self], move |g| vec![g.scaled(s)])
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let value = self.value().map(|x| x + s);
        self.tape.op(value, &[*self], |g| vec![g.clone()])
    }

    pub fn relu(&self) -> Var<'t> {
        let x = self.value();
        let value = x.map(|v| v.max(0.0));
        self.tape.op(value, &[*self], move |g| {
            vec![g
                .zip_map(&x, |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                .expect("shape")]
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let x = self.value();
        let value = x.map(|v| if v > 0.0 { v } else { slope * v });
        self.tape.op(value, &[*self], move |g| {
            vec![g
                .zip_map(&x, |gi, xi| if xi > 0.0 { gi } else { slope * gi })
                .expect("shape")]
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let value = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        let y = Rc::new(value.clone());
        self.tape.op(value, &[*self], move |g| {
            vec![g.zip_map(&y, |gi, yi| gi * yi * (1.0 - yi)).expect("shape")]
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let n = x.numel() as f64;
        let shape = x.shape().to_vec();
        self.tape.op(Tensor::scalar(x.mean()), &[*self], move |g| {
            vec![Tensor::full(&shape, g.data()[0] / n)]
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.op(Tensor::scalar(x.sum()), &[*self], move |g| {
            vec![Tensor::full(&shape, g.data()[0])]
        })
    }

    /// Mean of absolute values; the subgradient at zero is zero.
    pub fn abs_mean(&self) -> Var<'t> {
        let x = self.value();
        let n = x.numel() as f64;
        let value = x.data().iter().map(|v| v.abs()).sum::<f64>() / n;
        self.tape.op(Tensor::scalar(value), &[*self], move |g| {
            let s = g.data()[0] / n;
            vec![x.map(|v| s * sign(v))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let value = (*x).clone().reshape(shape)?;
        Ok(self.tape.op(value, &[*self], move |g| {
            vec![g.clone().reshape(&old).expect("reshape back")]
        }))
    }

    /// Channels `[start, start + len)` of a rank-4 tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} of {c}",
                start + len
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            out.extend_from_slice(&x.data()[base..base + len * plane]);
        }
        let value = Tensor::from_vec(&[n, len, h, w], out)?;
        Ok(self.tape.op(value, &[*self], move |g| {
            let mut gi = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                let dst = (b * c + start) * plane;
                let src = b * len * plane;
                gi.data_mut()[dst..dst + len * plane]
                    .copy_from_slice(&g.data()[src..src + len * plane]);
            }
            vec![gi]
        }))
    }

    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4()?;
        let mut chans = Vec::with_capacity(values.len());
        for v in &values {
            let (vn, vc, vh, vw) = v.dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} vs {:?}",
                    values[0].shape(),
                    v.shape()
                )));
            }
            chans.push(vc);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (v, &c) in values.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::from_vec(&[n, total, h, w], out)?;
        Ok(tape.op(value, parts, move |g| {
            let mut grads: Vec<Vec<f64>> = chans
                .iter()
                .map(|&c| Vec::with_capacity(n * c * plane))
                .collect();
            let mut offset = 0;
            for b in 0..n {
                for (gv, &c) in grads.iter_mut().zip(&chans) {
                    gv.extend_from_slice(&g.data()[offset..offset + c * plane]);
                    offset += c * plane;
                }
                debug_assert_eq!(offset, (b + 1) * total * plane);
            }
            grads
                .into_iter()
                .zip(&chans)
                .map(|(d, &c)| Tensor::from_vec(&[n, c, h, w], d).expect("shape"))
                .collect()
        }))
    }
}

#[inline]
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
