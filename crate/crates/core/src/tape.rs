//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! replays it in reverse and consumes the tape; a new forward pass needs a
//! fresh tape.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::{self, BalanceWeights};
use crate::scalar::Real;
use crate::shape_err;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    MeanOf(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Relu(Var),
    Sigmoid(Var),
    ChannelMean(Var),
    ChannelMax(Var, Vec<u32>),
    RowMean(Var),
    Upsample2x(Var),
    AvgPool2x2(Var),
    WeightedGram(Var, Var),
    Laplacian(Var, T),
    SoftmaxRows(Var),
    PermuteRows(Var, Vec<usize>),
    Sum(Var),
    BalancedBce(Var, Tensor<T>, BalanceWeights),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The primitive operator set exposed by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    Add,
    Mul,
    MatMul,
    Concat,
    Reshape,
    Transpose,
    ScalarOp,
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "mul" => Self::Mul,
            "matmul" => Self::MatMul,
            "concat" => Self::Concat,
            "reshape" => Self::Reshape,
            "transpose" => Self::Transpose,
            "scalar_op" => Self::ScalarOp,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

/// Extra arguments some primitives need.
#[derive(Debug, Clone, Default)]
pub struct PrimitiveArgs<T> {
    /// Target shape for `reshape`.
    pub shape: Vec<usize>,
    /// `(scale, shift)` for `scalar_op`.
    pub affine: Option<(T, T)>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    /// Elementwise product; `b` may broadcast (channel map or bias vector).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), ng))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let y = ops::affine(self.value(x), scale, shift);
        let ng = self.any_grad(&[x]);
        self.push(y, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).transpose2()?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::Reshape(x), ng))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_last(&refs)?;
        let ng = self.any_grad(parts);
        Ok(self.push(y, Op::Concat(parts.to_vec()), ng))
    }

    /// Elementwise mean of same-shape operands, independent of operand order.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = ops::mean_of(&refs)?;
        let ng = self.any_grad(parts);
        Ok(self.push(y, Op::MeanOf(parts.to_vec()), ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), stride)?;
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(y, Op::Conv2d { x, w, b, stride }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let ng = self.any_grad(&[x]);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        let ng = self.any_grad(&[x]);
        self.push(y, Op::Sigmoid(x), ng)
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let y = ops::channel_mean(self.value(x))?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::ChannelMean(x), ng))
    }

    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (y, arg) = ops::channel_max(self.value(x))?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::ChannelMax(x, arg), ng))
    }

    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let y = ops::row_mean(self.value(x))?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::RowMean(x), ng))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = ops::upsample2x(self.value(x))?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::Upsample2x(x), ng))
    }

    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let y = ops::avg_pool2x2(self.value(x))?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::AvgPool2x2(x), ng))
    }

    pub fn weighted_gram(&mut self, p: Var, lambda: Var) -> Result<Var> {
        let y = ops::weighted_gram(self.value(p), self.value(lambda))?;
        let ng = self.any_grad(&[p, lambda]);
        Ok(self.push(y, Op::WeightedGram(p, lambda), ng))
    }

    pub fn normalized_laplacian(&mut self, adj: Var, eps: T) -> Result<Var> {
        let y = ops::normalized_laplacian(self.value(adj), eps)?;
        let ng = self.any_grad(&[adj]);
        Ok(self.push(y, Op::Laplacian(adj, eps), ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_rows(self.value(x))?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::SoftmaxRows(x), ng))
    }

    pub fn permute_rows(&mut self, x: Var, perm: Vec<usize>) -> Result<Var> {
        let y = ops::permute_rows(self.value(x), &perm)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::PermuteRows(x, perm), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let ng = self.any_grad(&[x]);
        self.push(y, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::cst(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Class-balanced BCE of a prediction against a constant binary label.
    pub fn balanced_bce(&mut self, s: Var, label: &Tensor<T>) -> Result<Var> {
        let w = ops::balance_weights(label)?;
        let y = ops::balanced_bce(self.value(s), label, w)?;
        let ng = self.any_grad(&[s]);
        Ok(self.push(Tensor::scalar(y), Op::BalancedBce(s, label.clone(), w), ng))
    }

    /// Dispatch a primitive by kind.
    pub fn primitive(&mut self, kind: PrimitiveKind, operands: &[Var], args: &PrimitiveArgs<T>) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if operands.len() == n {
                Ok(())
            } else {
                Err(shape_err!("primitive", "{kind:?} takes {n} operands, got {}", operands.len()))
            }
        };
        match kind {
            PrimitiveKind::Add => {
                arity(2)?;
                self.add(operands[0], operands[1])
            }
            PrimitiveKind::Mul => {
                arity(2)?;
                self.mul(operands[0], operands[1])
            }
            PrimitiveKind::MatMul => {
                arity(2)?;
                self.matmul(operands[0], operands[1])
            }
            PrimitiveKind::Concat => self.concat(operands),
            PrimitiveKind::Reshape => {
                arity(1)?;
                self.reshape(operands[0], &args.shape)
            }
            PrimitiveKind::Transpose => {
                arity(1)?;
                self.transpose(operands[0])
            }
            PrimitiveKind::ScalarOp => {
                arity(1)?;
                let (s, b) = args
                    .affine
                    .ok_or_else(|| shape_err!("primitive", "scalar_op needs (scale, shift)"))?;
                Ok(self.affine(operands[0], s, b))
            }
        }
    }

    /// Reverse pass from a scalar `loss`. Consumes the recorded graph: a
    /// second call fails with [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut emit = |v: Var, d: Tensor<T>, nodes: &[Node<T>]| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(d.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            };
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    let (ga, gb) = ops::add_backward(&g, val(*a), val(*b));
                    emit(*a, ga, nodes);
                    emit(*b, gb, nodes);
                }
                Op::Mul(a, b) => {
                    let (ga, gb) = ops::mul_backward(&g, val(*a), val(*b));
                    emit(*a, ga, nodes);
                    emit(*b, gb, nodes);
                }
                Op::Affine(x, s) => emit(*x, g.map(|v| v * *s), nodes),
                Op::MatMul(a, b) => {
                    let (ga, gb) = ops::matmul_backward(&g, val(*a), val(*b));
                    emit(*a, ga, nodes);
                    emit(*b, gb, nodes);
                }
                Op::Transpose(x) => emit(*x, g.transpose2()?, nodes),
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    emit(*x, g.reshape(&shape)?, nodes);
                }
                Op::Concat(parts) => {
                    let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| val(p).shape().to_vec()).collect();
                    for (p, d) in parts.iter().zip(ops::concat_last_backward(&g, &shapes)) {
                        emit(*p, d, nodes);
                    }
                }
                Op::MeanOf(parts) => {
                    let inv = T::one() / T::cst(parts.len() as f64);
                    for p in parts {
                        emit(*p, g.map(|v| v * inv), nodes);
                    }
                }
                Op::Conv2d { x, w, b, stride } => {
                    let need_x = nodes[x.0].needs_grad;
                    let (dx, dw, db) = ops::conv2d_backward(&g, val(*x), val(*w), val(*b), *stride, need_x);
                    if let Some(dx) = dx {
                        emit(*x, dx, nodes);
                    }
                    emit(*w, dw, nodes);
                    emit(*b, db, nodes);
                }
                Op::Relu(x) => emit(*x, ops::relu_backward(&g, val(*x)), nodes),
                Op::Sigmoid(x) => emit(*x, ops::sigmoid_backward(&g, &node.value), nodes),
                Op::ChannelMean(x) => emit(*x, ops::channel_mean_backward(&g, val(*x).shape()), nodes),
                Op::ChannelMax(x, arg) => emit(*x, ops::channel_max_backward(&g, arg, val(*x).shape()), nodes),
                Op::RowMean(x) => emit(*x, ops::row_mean_backward(&g, val(*x).shape()), nodes),
                Op::Upsample2x(x) => emit(*x, ops::upsample2x_backward(&g, val(*x).shape()), nodes),
                Op::AvgPool2x2(x) => emit(*x, ops::avg_pool2x2_backward(&g, val(*x).shape()), nodes),
                Op::WeightedGram(p, l) => {
                    let (dp, dl) = ops::weighted_gram_backward(&g, val(*p), val(*l));
                    emit(*p, dp, nodes);
                    emit(*l, dl, nodes);
                }
                Op::Laplacian(a, eps) => emit(*a, ops::normalized_laplacian_backward(&g, val(*a), *eps), nodes),
                Op::SoftmaxRows(x) => emit(*x, ops::softmax_rows_backward(&g, &node.value), nodes),
                Op::PermuteRows(x, perm) => emit(*x, ops::permute_rows_backward(&g, perm), nodes),
                Op::Sum(x) => emit(*x, Tensor::full(val(*x).shape(), g.item()), nodes),
                Op::BalancedBce(s, label, w) => {
                    emit(*s, ops::balanced_bce_backward(g.item(), val(*s), label, *w), nodes)
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let requires = self
            .nodes
            .iter()
            .map(|n| n.needs_grad && matches!(n.op, Op::Leaf))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            requires,
        })
    }
}

/// Gradients of the loss with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; zero if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Result<Tensor<T>> {
        if !self.requires[v.0] {
            return Err(shape_err!("gradients", "variable {} is not a requires_grad leaf", v.0));
        }
        Ok(match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        })
    }

    pub fn take(&mut self, v: Var) -> Result<Tensor<T>> {
        if !self.requires[v.0] {
            return Err(shape_err!("gradients", "variable {} is not a requires_grad leaf", v.0));
        }
        Ok(self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0])))
    }
}
