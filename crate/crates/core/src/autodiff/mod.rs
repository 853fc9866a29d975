//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass as a
//! node holding its output value. Nodes are appended in execution order, so
//! the node list is always topologically sorted and [`Graph::backward`] is a
//! single reverse sweep that visits each node once.

mod conv;
pub mod gradcheck;
mod loss;
mod norm;
mod sampling;
mod softmax;

use std::sync::Arc;

pub use norm::{BatchNormMode, RunningStats};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: norm::BnSaved,
    },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    SoftmaxFlat {
        x: Var,
        groups: Arc<Vec<Vec<usize>>>,
    },
    JointFlatten {
        inputs: Vec<Var>,
    },
    GroupedNll {
        x: Var,
        group_of: Arc<Vec<usize>>,
        targets: Vec<usize>,
    },
    HingeMaxGap {
        x: Var,
        picks: Vec<Option<(usize, usize)>>,
    },
    SqDevRef {
        x: Var,
        reference: Vec<f64>,
    },
    AffineGrid {
        theta: Var,
        k: usize,
    },
    BilinearSample {
        fmap: Var,
        grid: Var,
    },
    TapContract {
        taps: Var,
        w: Var,
        b: Option<Var>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Relu(a)
            | Op::Upsample2x(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SoftmaxFlat { x, .. }
            | Op::GroupedNll { x, .. }
            | Op::HingeMaxGap { x, .. }
            | Op::SqDevRef { x, .. } => vec![*x],
            Op::JointFlatten { inputs } => inputs.clone(),
            Op::AffineGrid { theta, .. } => vec![*theta],
            Op::BilinearSample { fmap, grid } => vec![*fmap, *grid],
            Op::TapContract { taps, w, b } => {
                [Some(*taps), Some(*w), *b].into_iter().flatten().collect()
            }
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation. Build one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    corrupt_backward: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            corrupt_backward: false,
        }
    }

    /// Negative control for gradient checking: every backward rule scales its
    /// contribution by a wrong factor.
    #[doc(hidden)]
    pub fn corrupt_backward_rules(&mut self) {
        self.corrupt_backward = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, true, Op::Leaf)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if `v` requires
    /// one and was reached from the root.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Input handles of the node, in recording order.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, requires_grad, op)
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v * k).collect())
            .expect("same shape");
        self.push(out, Op::Scale(a, k))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `max(0, x)` with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect())
            .expect("same shape");
        self.push(out, Op::Relu(a))
    }

    /// Sum of `Σ coeff_i · term_i` over scalar terms, skipping zero weights.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, t) in terms {
            if w == 0.0 {
                continue;
            }
            let term = if w == 1.0 { t } else { self.scale(t, w) };
            acc = Some(match acc {
                None => term,
                Some(a) => self.add(a, term)?,
            });
        }
        match acc {
            Some(v) => Ok(v),
            None => Ok(self.constant(Tensor::scalar(0.0))),
        }
    }

    /// Populates gradients of every tracked node reachable from `root`.
    ///
    /// Gradients from earlier calls are cleared first. Contributions from
    /// multiple consumers of a node are summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_node(i, &gout);
            self.nodes[i].grad = Some(gout);
            for (var, mut g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                if self.corrupt_backward {
                    g.iter_mut().for_each(|v| *v *= 1.1);
                }
                debug_assert!(g.iter().all(|v| v.is_finite()), "non-finite gradient");
                match &mut self.nodes[var.0].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs.
    fn backward_node(&self, i: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|g| -g).collect())],
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, gout.iter().zip(y).map(|(g, v)| g * v).collect()));
                }
                if wants(*b) {
                    out.push((*b, gout.iter().zip(x).map(|(g, v)| g * v).collect()));
                }
                out
            }
            Op::Scale(a, k) => vec![(*a, gout.iter().map(|g| g * k).collect())],
            Op::Sum(a) => vec![(*a, vec![gout[0]; self.value(*a).numel()])],
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let g = gout
                    .iter()
                    .zip(x)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, g)]
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => conv::conv2d_backward(self, *x, *w, *b, *stride, *padding, gout, &wants),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => norm::batchnorm_backward(self, *x, *gamma, *beta, saved, gout),
            Op::Upsample2x(a) => vec![(*a, conv::upsample2x_backward(self.value(*a), gout))],
            Op::GlobalAvgPool(a) => vec![(*a, conv::gap_backward(self.value(*a), gout))],
            Op::SoftmaxFlat { x, groups } => {
                vec![(*x, softmax::softmax_backward(&node.value, groups, gout))]
            }
            Op::JointFlatten { inputs } => loss::joint_flatten_backward(self, inputs, gout),
            Op::GroupedNll {
                x,
                group_of,
                targets,
            } => vec![(
                *x,
                loss::grouped_nll_backward(self.value(*x), group_of, targets, gout[0]),
            )],
            Op::HingeMaxGap { x, picks } => vec![(
                *x,
                loss::hinge_max_gap_backward(self.value(*x), picks, gout[0]),
            )],
            Op::SqDevRef { x, reference } => vec![(
                *x,
                loss::sq_dev_ref_backward(self.value(*x), reference, gout[0]),
            )],
            Op::AffineGrid { theta, k } => {
                vec![(*theta, sampling::affine_grid_backward(self.value(*theta), *k, gout))]
            }
            Op::BilinearSample { fmap, grid } => {
                sampling::bilinear_backward(self, *fmap, *grid, gout, &wants)
            }
            Op::TapContract { taps, w, b } => {
                sampling::tap_contract_backward(self, *taps, *w, *b, gout, &wants)
            }
        }
    }
}
