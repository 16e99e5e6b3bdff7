//! Reverse-mode differentiation over a fixed set of dense primitives.
//!
//! Every operation appends one node to the tape. `backward` walks the nodes in
//! exact reverse order, so the recorded order is a valid topological order by
//! construction.

use crate::error::{Error, Result};
use crate::numerics::tensor::{cross_entropy_row, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded recording of one forward pass.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`GradTape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. `None` for nodes that do
    /// not depend on any parameter.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.adjoints.get_mut(var.0).and_then(Option::take)
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is always reported, even when it is zero.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a × bᵀ`; the natural form for `x Wᵀ` with `W` stored `out×in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    /// Broadcasts a `1×n` row over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        let ng = self.needs(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scale(factor);
        let ng = self.needs(&[a]);
        self.push(v, Op::Scale(a, factor), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        let ng = self.needs(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows()?;
        let ng = self.needs(&[a]);
        Ok(self.push(v, Op::SoftmaxRows(a), ng))
    }

    /// Mean cross-entropy over the rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.shape().len() != 2 {
            return Err(Error::dim("cross_entropy", z.shape(), &[]));
        }
        let (n, k) = (z.rows(), z.cols());
        if labels.len() != n || n == 0 {
            return Err(Error::dim("cross_entropy", z.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| cross_entropy_row(z.row(i), l))
            .sum();
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(v, Op::Sum(a), ng)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss node is not on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = adj[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    adj[idx] = Some(upstream);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, upstream.matmul_nt(bv)?)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, av.matmul_tn(&upstream)?)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, upstream.matmul(bv)?)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, upstream.matmul_tn(av)?)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, upstream.clone())?;
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, upstream)?;
                    }
                }
                Op::AddRow(a, row) => {
                    if self.nodes[row.0].needs_grad {
                        accumulate(&mut adj, *row, upstream.sum_rows()?)?;
                    }
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, upstream)?;
                    }
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut adj, *a, upstream.scale(*factor))?;
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(upstream.data())
                        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, Tensor::raw(x.shape().to_vec(), data))?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = y.row(i);
                        let gr = upstream.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, Tensor::raw(y.shape().to_vec(), out))?;
                }
                Op::CrossEntropy { logits, labels } => {
                    let z = self.value(*logits);
                    let mut p = z.softmax_rows()?;
                    let n = labels.len();
                    let k = z.cols();
                    let coef = upstream.item()? / n as f64;
                    let data = p.data_mut();
                    for (i, &l) in labels.iter().enumerate() {
                        data[i * k + l] -= 1.0;
                    }
                    for v in data.iter_mut() {
                        *v *= coef;
                    }
                    accumulate(&mut adj, *logits, p)?;
                }
                Op::Sum(a) => {
                    let g = upstream.item()?;
                    accumulate(&mut adj, *a, Tensor::filled(self.value(*a).shape(), g))?;
                }
            }
        }

        // Parameters are reported even when the loss does not reach them.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) && adj[i].is_none() {
                adj[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], var: Var, grad: Tensor) -> Result<()> {
    match &mut adj[var.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => {
            *slot = Some(grad);
            Ok(())
        }
    }
}
