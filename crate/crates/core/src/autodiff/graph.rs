//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! Every backward rule is itself written in terms of recorded operations, so a
//! gradient returned by [`Graph::grad`] is an ordinary node that can be
//! differentiated again. Hessian-vector products use exactly that: the inner
//! product `vᵀ∇L` is built on the tape and then differentiated a second time.
//!
//! Node ids are assigned in creation order and parents always precede their
//! children, so reverse id order is a valid reverse topological order.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    SumCols(usize),
    SumRows(usize),
    SumAll(usize),
    BroadcastCols(usize),
    BroadcastRows(usize),
    BroadcastAll(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every node created after `len`. Handles to dropped nodes must not be used again.
    pub fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    pub fn value(&self, var: Var<'_>) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[var.id].value)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn node_value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    /// Handle for a node id previously obtained from [`Var::id`].
    pub(crate) fn var_at(&self, id: usize) -> Var<'_> {
        assert!(id < self.len(), "node {id} was truncated");
        self.var(id)
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'_> {
        let value = f(&self.node_value(a));
        let rg = self.needs(a);
        self.push(value, op, rg)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Tensor,
    ) -> Var<'_> {
        let value = f(&self.node_value(a), &self.node_value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(value, op, rg)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned nodes are recorded on the tape and can be differentiated
    /// again. Inputs that `output` does not depend on get a zero constant.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Vec<Var<'g>> {
        let out_value = self.node_value(output.id);
        assert_eq!(out_value.len(), 1, "grad() needs a scalar output");
        let mut grads: Vec<Option<Var<'g>>> = vec![None; output.id + 1];
        grads[output.id] = Some(self.constant(Tensor::scalar(1.0)));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id] else { continue };
            let (op, requires_grad) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op, nodes[id].requires_grad)
            };
            if !requires_grad {
                continue;
            }
            let node = self.var(id);
            let mut send = |target: usize, contribution: Var<'g>| {
                grads[target] = Some(match grads[target] {
                    Some(acc) => acc + contribution,
                    None => contribution,
                });
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.needs(a) {
                        send(a, g);
                    }
                    if self.needs(b) {
                        send(b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        send(a, g);
                    }
                    if self.needs(b) {
                        send(b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        send(a, g * self.var(b));
                    }
                    if self.needs(b) {
                        send(b, g * self.var(a));
                    }
                }
                Op::Div(a, b) => {
                    let denom = self.var(b);
                    if self.needs(a) {
                        send(a, g / denom);
                    }
                    if self.needs(b) {
                        send(b, -(g * node / denom));
                    }
                }
                Op::Neg(a) => send(a, -g),
                Op::Scale(a, c) => send(a, g.scale(c)),
                Op::AddScalar(a) => send(a, g),
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        send(a, g.matmul(self.var(b).t()));
                    }
                    if self.needs(b) {
                        send(b, self.var(a).t().matmul(g));
                    }
                }
                Op::Transpose(a) => send(a, g.t()),
                Op::SumCols(a) => {
                    let n = self.node_value(a).cols();
                    send(a, g.broadcast_cols(n));
                }
                Op::SumRows(a) => {
                    let m = self.node_value(a).rows();
                    send(a, g.broadcast_rows(m));
                }
                Op::SumAll(a) => {
                    let v = self.node_value(a);
                    send(a, g.broadcast_all(v.rows(), v.cols()));
                }
                Op::BroadcastCols(a) => send(a, g.sum_cols()),
                Op::BroadcastRows(a) => send(a, g.sum_rows()),
                Op::BroadcastAll(a) => send(a, g.sum()),
                Op::Exp(a) => send(a, g * node),
                Op::Log(a) => send(a, g / self.var(a)),
                Op::Relu(a) => {
                    let mask = self.node_value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    send(a, g * self.constant(mask));
                }
                Op::Sigmoid(a) => send(a, g * (node - node * node)),
                Op::Tanh(a) => send(a, g * (-(node * node)).add_scalar(1.0)),
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => {
                    let v = self.node_value(w.id);
                    self.constant(Tensor::zeros(v.rows(), v.cols()))
                }
            })
            .collect()
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.node_value(self.id)
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn matmul(self, rhs: Var<'g>) -> Var<'g> {
        self.graph
            .binary(self.id, rhs.id, Op::MatMul(self.id, rhs.id), |a, b| {
                a.matmul(b)
            })
    }

    pub fn t(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Transpose(self.id), |a| a.transpose())
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Scale(self.id, c), |a| a.map(|x| c * x))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.graph
            .unary(self.id, Op::AddScalar(self.id), |a| a.map(|x| x + c))
    }

    /// `m×n -> m×1`
    pub fn sum_cols(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::SumCols(self.id), |a| a.sum_cols())
    }

    /// `m×n -> 1×n`
    pub fn sum_rows(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::SumRows(self.id), |a| a.sum_rows())
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::SumAll(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `m×1 -> m×n`
    pub fn broadcast_cols(self, n: usize) -> Var<'g> {
        self.graph
            .unary(self.id, Op::BroadcastCols(self.id), |a| a.broadcast_cols(n))
    }

    /// `1×n -> m×n`
    pub fn broadcast_rows(self, m: usize) -> Var<'g> {
        self.graph
            .unary(self.id, Op::BroadcastRows(self.id), |a| a.broadcast_rows(m))
    }

    /// `1×1 -> m×n`
    pub fn broadcast_all(self, m: usize, n: usize) -> Var<'g> {
        self.graph.unary(self.id, Op::BroadcastAll(self.id), |a| {
            Tensor::filled(m, n, a.data()[0])
        })
    }

    pub fn exp(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn relu(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Relu(self.id), |a| a.map(|x| x.max(0.0)))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn tanh(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    /// Inner product of two equally shaped nodes as a `1×1` node.
    pub fn dot(self, rhs: Var<'g>) -> Var<'g> {
        (self * rhs).sum()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

macro_rules! elementwise {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'g> ops::$trait for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                let lhs_dims = self.value();
                let rhs_dims = rhs.value();
                assert!(
                    lhs_dims.same_dims(&rhs_dims),
                    "elementwise operands differ: {:?} vs {:?}",
                    lhs_dims.shape(),
                    rhs_dims.shape()
                );
                self.graph
                    .binary(self.id, rhs.id, Op::$op(self.id, rhs.id), |a, b| a.zip(b, $f))
            }
        }
    };
}

elementwise!(Add, add, Add, |a, b| a + b);
elementwise!(Sub, sub, Sub, |a, b| a - b);
elementwise!(Mul, mul, Mul, |a, b| a * b);
elementwise!(Div, div, Div, |a, b| a / b);

impl<'g> ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Neg(self.id), |a| a.map(|x| -x))
    }
}
