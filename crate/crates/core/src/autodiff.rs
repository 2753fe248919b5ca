//! Reverse-mode differentiation over a fixed node list.
//!
//! A [`Graph`] is built once, then evaluated any number of times with fresh
//! input bindings. Nodes can only reference nodes created before them, so
//! the insertion order is a topological order and the backward pass is a
//! single reverse sweep.
//!
//! Shapes must conform exactly; there is no broadcasting.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Parameter(String),
    MatMul(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Relu(NodeId),
    AppendOnes(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    GaussianLogLik {
        y: NodeId,
        mean: NodeId,
        variance: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Parameter(_) => "parameter",
            Op::MatMul(..) => "matmul",
            Op::Mul(..) => "mul",
            Op::Add(..) => "add",
            Op::Relu(_) => "relu",
            Op::AppendOnes(_) => "append_ones",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::GaussianLogLik { .. } => "gaussian_log_lik",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Parameter(_) => vec![],
            Op::MatMul(a, b) | Op::Mul(a, b) | Op::Add(a, b) => vec![a, b],
            Op::Relu(a) | Op::AppendOnes(a) | Op::Scale(a, _) | Op::Sum(a) => vec![a],
            Op::GaussianLogLik { y, mean, variance } => vec![y, mean, variance],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar node with respect to every parameter node.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(NodeId, String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(_, n, _)| n == name)
            .map(|(_, _, t)| t)
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _, _)| *n == id)
            .map(|(_, _, t)| t)
    }

    pub fn take_node(&mut self, id: NodeId) -> Option<Tensor> {
        let pos = self.entries.iter().position(|(n, _, _)| *n == id)?;
        Some(self.entries.swap_remove(pos).2)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(_, n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let operands = op.operands();
        for o in &operands {
            assert!(o.0 < self.nodes.len(), "operand {o:?} is not in this graph");
        }
        let requires_grad = match op {
            Op::Parameter(_) => true,
            Op::Input(_) => false,
            _ => operands.iter().any(|o| self.nodes[o.0].requires_grad),
        };
        self.nodes.push(Node { op, requires_grad });
        self.values.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Non-differentiable input bound at evaluation time.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()))
    }

    /// Differentiable input bound at evaluation time.
    pub fn parameter(&mut self, name: &str) -> NodeId {
        self.push(Op::Parameter(name.to_string()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    /// Appends a constant-1 column to a matrix (the bias unit).
    pub fn append_ones(&mut self, a: NodeId) -> NodeId {
        self.push(Op::AppendOnes(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    /// `Σ_n log N(y_n; mean_n, variance)` with a scalar variance node.
    pub fn gaussian_log_lik(&mut self, y: NodeId, mean: NodeId, variance: NodeId) -> NodeId {
        self.push(Op::GaussianLogLik { y, mean, variance })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.values[id.0].as_ref().ok_or(Error::NotEvaluated(id.0))
    }

    fn shape_err(&self, node: usize, detail: String) -> Error {
        Error::ShapeMismatch {
            node,
            op: self.nodes[node].op.name(),
            detail,
        }
    }

    /// Runs the forward pass up to `output` and caches every intermediate.
    pub fn evaluate(&mut self, output: NodeId, inputs: &[(&str, &Tensor)]) -> Result<Tensor> {
        for i in 0..=output.0 {
            let v = self.forward_node(i, inputs)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.values[i] = Some(v);
        }
        Ok(self.values[output.0].clone().expect("just evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("operands precede consumers")
    }

    fn forward_node(&self, i: usize, inputs: &[(&str, &Tensor)]) -> Result<Tensor> {
        let v = match &self.nodes[i].op {
            Op::Input(name) | Op::Parameter(name) => inputs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| (*t).clone())
                .ok_or_else(|| Error::UnboundInput(name.clone()))?,
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
                    return Err(self.shape_err(
                        i,
                        format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                    ));
                }
                a.matmul(b)
            }
            Op::Mul(a, b) | Op::Add(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if ta.shape() != tb.shape() {
                    return Err(self.shape_err(
                        i,
                        format!("operands {:?} and {:?} differ", ta.shape(), tb.shape()),
                    ));
                }
                if matches!(self.nodes[i].op, Op::Mul(..)) {
                    ta.zip_map(tb, |x, y| x * y)
                } else {
                    ta.zip_map(tb, |x, y| x + y)
                }
            }
            Op::Relu(a) => self.val(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::AppendOnes(a) => {
                let a = self.val(*a);
                if !a.is_matrix() {
                    return Err(self.shape_err(i, format!("expected a matrix, got {:?}", a.shape())));
                }
                let (n, k) = (a.rows(), a.cols());
                let mut data = Vec::with_capacity(n * (k + 1));
                for r in 0..n {
                    data.extend_from_slice(a.row(r));
                    data.push(1.0);
                }
                Tensor::matrix(n, k + 1, data)?
            }
            Op::Scale(a, f) => self.val(*a).map(|x| x * f),
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::GaussianLogLik { y, mean, variance } => {
                let (ty, tm, tv) = (self.val(*y), self.val(*mean), self.val(*variance));
                if ty.shape() != tm.shape() {
                    return Err(self.shape_err(
                        i,
                        format!("targets {:?} vs mean {:?}", ty.shape(), tm.shape()),
                    ));
                }
                if !tv.is_scalar() {
                    return Err(self.shape_err(i, format!("variance must be scalar, got {:?}", tv.shape())));
                }
                Tensor::scalar(gaussian_log_likelihood_raw(ty.data(), tm.data(), tv.item())?)
            }
        };
        Ok(v)
    }

    /// Gradient of the scalar `output` with respect to every parameter node.
    ///
    /// Requires a prior [`Graph::evaluate`] covering `output`.
    pub fn gradient(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output)?;
        if !out.is_scalar() {
            return Err(Error::NonScalarOutput {
                node: output.0,
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            if let Op::Parameter(_) = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            for (operand, contribution) in self.backward_node(i, &g) {
                if !self.nodes[operand.0].requires_grad {
                    continue;
                }
                match &mut grads[operand.0] {
                    Some(acc) => acc.axpy(1.0, &contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut entries = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Parameter(name) = &node.op {
                let g = match grads.get_mut(i).and_then(Option::take) {
                    Some(g) => g,
                    None => match &self.values[i] {
                        Some(v) => Tensor::zeros(v.shape()),
                        None => continue,
                    },
                };
                entries.push((NodeId(i), name.clone(), g));
            }
        }
        Ok(Gradients { entries })
    }

    fn backward_node(&self, i: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match self.nodes[i].op {
            Op::Input(_) | Op::Parameter(_) => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if wants(a) {
                    out.push((a, g.matmul_t(self.val(b))));
                }
                if wants(b) {
                    out.push((b, self.val(a).t_matmul(g)));
                }
                out
            }
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if wants(a) {
                    out.push((a, g.zip_map(self.val(b), |x, y| x * y)));
                }
                if wants(b) {
                    out.push((b, g.zip_map(self.val(a), |x, y| x * y)));
                }
                out
            }
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            // Subgradient 0 at the kink.
            Op::Relu(a) => vec![(a, g.zip_map(self.val(a), |gx, x| if x > 0.0 { gx } else { 0.0 }))],
            Op::AppendOnes(a) => {
                let k = self.val(a).cols();
                let n = g.rows();
                let mut data = Vec::with_capacity(n * k);
                for r in 0..n {
                    data.extend_from_slice(&g.row(r)[..k]);
                }
                vec![(a, Tensor::matrix(n, k, data).expect("shape of operand"))]
            }
            Op::Scale(a, f) => vec![(a, g.map(|x| x * f))],
            Op::Sum(a) => vec![(a, Tensor::full(self.val(a).shape(), g.item()))],
            Op::GaussianLogLik { y, mean, variance } => {
                let upstream = g.item();
                let (ty, tm) = (self.val(y), self.val(mean));
                let v = self.val(variance).item();
                let mut out = Vec::with_capacity(3);
                if wants(mean) {
                    out.push((mean, ty.zip_map(tm, |yy, mm| upstream * (yy - mm) / v)));
                }
                if wants(y) {
                    out.push((y, ty.zip_map(tm, |yy, mm| -upstream * (yy - mm) / v)));
                }
                if wants(variance) {
                    let n = ty.numel() as f64;
                    let sq: f64 = ty
                        .data()
                        .iter()
                        .zip(tm.data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    let d = -0.5 * n / v + 0.5 * sq / (v * v);
                    out.push((variance, Tensor::scalar(upstream * d)));
                }
                out
            }
        }
    }
}

fn gaussian_log_likelihood_raw(y: &[f64], mean: &[f64], variance: f64) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Domain(format!(
            "observation variance must be positive, got {variance}"
        )));
    }
    let norm = -0.5 * (2.0 * PI * variance).ln();
    Ok(y
        .iter()
        .zip(mean)
        .map(|(a, m)| norm - (a - m) * (a - m) / (2.0 * variance))
        .sum())
}

/// `Σ_n [ -½ log(2π·variance) - (y_n - mean_n)² / (2·variance) ]`.
pub fn gaussian_log_likelihood(y: &Tensor, mean: &Tensor, variance: f64) -> Result<f64> {
    if y.shape() != mean.shape() {
        return Err(Error::InvalidTensor(format!(
            "targets {:?} and mean {:?} differ in shape",
            y.shape(),
            mean.shape()
        )));
    }
    gaussian_log_likelihood_raw(y.data(), mean.data(), variance)
}
