use std::collections::HashMap;

use super::Tensor;
use crate::error::{DgmError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// `[1, c] -> [n, c]`
    BroadcastRows(NodeId),
    /// `[r, c] -> [1, c]`
    SumRows(NodeId),
    /// `[r, 1] -> [r, c]`
    BroadcastCols(NodeId),
    /// `[r, c] -> [r, 1]`
    SumCols(NodeId),
    /// `[r, c] -> [1, 1]`
    Sum(NodeId),
    /// `[1, 1] -> [r, c]`
    BroadcastScalar(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Powf(NodeId, f64),
    LogSoftmax(NodeId),
}

impl Op {
    fn inputs(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul { a, b, .. } | Add(a, b) | Sub(a, b) | Mul(a, b) => [Some(a), Some(b)],
            Scale(a, _)
            | AddScalar(a)
            | BroadcastRows(a)
            | SumRows(a)
            | BroadcastCols(a)
            | SumCols(a)
            | Sum(a)
            | BroadcastScalar(a)
            | LeakyRelu(a, _)
            | Tanh(a)
            | Sigmoid(a)
            | Exp(a)
            | Powf(a, _)
            | LogSoftmax(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient of a registered parameter together with the gate that produced it.
#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub grad: Tensor,
    /// Elementwise multiplier already applied to `grad`. Entries equal to
    /// exactly zero mark frozen elements that optimizers must not touch.
    pub gate: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<NodeId, ParamGrad>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ParamGrad> {
        self.map.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<ParamGrad> {
        self.map.remove(&id)
    }
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Gradients are themselves built out of recorded operations, so a gradient
/// node can feed further computation and be differentiated again. That is how
/// the critic's input-gradient penalty gets its parameter gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(NodeId, Option<Tensor>)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Smallest `|x|` over all inputs of recorded LeakyReLU ops, the distance
    /// of this evaluation point from the nearest kink. Infinite without any.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu(a, _) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(DgmError::NonFinite { op: name });
        }
        let requires_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(DgmError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// A designated differentiable input (see [`Graph::grad`]).
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, true)
    }

    /// Registers a trainable parameter. `gate`, when present, must match the
    /// parameter's shape and multiplies its gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Tensor, gate: Option<Tensor>) -> Result<NodeId> {
        if let Some(g) = &gate {
            if g.shape() != value.shape() {
                return Err(DgmError::shape("param gate", value.shape(), g.shape()));
            }
        }
        let id = self.leaf(value, true)?;
        self.params.push((id, gate));
        Ok(id)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b), ta, tb)?;
        self.push(v, Op::MatMul { a, b, ta, tb }, "matmul")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), "add_scalar")
    }

    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let v = self.value(a).broadcast_rows(n)?;
        self.push(v, Op::BroadcastRows(a), "broadcast_rows")
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        self.push(Tensor::matrix(1, c, out)?, Op::SumRows(a), "sum_rows")
    }

    pub fn broadcast_cols(&mut self, a: NodeId, c: usize) -> Result<NodeId> {
        let (r, ac) = self.shape(a);
        if ac != 1 {
            return Err(DgmError::shape("broadcast_cols", &[r, 1], &[r, ac]));
        }
        let src = self.value(a).data();
        let data = src
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, c))
            .collect();
        self.push(
            Tensor::matrix(r, c, data)?,
            Op::BroadcastCols(a),
            "broadcast_cols",
        )
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let src = self.value(a).data();
        let data = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().sum())
            .collect();
        self.push(Tensor::matrix(r, 1, data)?, Op::SumCols(a), "sum_cols")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if self.value(a).len() != 1 {
            return Err(DgmError::shape(
                "broadcast_scalar",
                &[1, 1],
                self.value(a).shape(),
            ));
        }
        let v = Tensor::full(rows, cols, self.value(a).item());
        self.push(v, Op::BroadcastScalar(a), "broadcast_scalar")
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), "exp")
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p), "powf")
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.powf(a, 0.5)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    /// Row-wise log-softmax, computed with the max-shift for stability.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        self.push(Tensor::matrix(r, c, out)?, Op::LogSoftmax(a), "log_softmax")
    }

    /// `x · W + b` with `b` of shape `[1, p]` broadcast over the batch.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xr, xc) = self.shape(x);
        let (wr, wc) = self.shape(w);
        if xc != wr {
            return Err(DgmError::shape("dense", &[xr, xc], &[wr, wc]));
        }
        let (br, bc) = self.shape(b);
        if br != 1 || bc != wc {
            return Err(DgmError::shape("dense bias", &[1, wc], &[br, bc]));
        }
        let xw = self.matmul(x, w)?;
        let bb = self.broadcast_rows(b, xr)?;
        self.add(xw, bb)
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shape(logits);
        if labels.len() != r {
            return Err(DgmError::shape("cross_entropy", &[r], &[labels.len()]));
        }
        let mut onehot = Tensor::zeros(r, c);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(DgmError::OutOfRange {
                    what: "label",
                    value: y,
                    lo: 0,
                    hi: c.saturating_sub(1),
                });
            }
            onehot.set(i, y, 1.0);
        }
        let ls = self.log_softmax(logits)?;
        let oh = self.constant(onehot)?;
        let picked = self.mul(ls, oh)?;
        let total = self.sum(picked)?;
        self.scale(total, -1.0 / r.max(1) as f64)
    }

    /// Builds gradient nodes of the scalar `loss` with respect to `wrt`.
    ///
    /// The returned nodes are ordinary graph nodes and may be differentiated
    /// again. A `wrt` entry that `loss` does not depend on yields `None`.
    pub fn grad(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>> {
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(DgmError::NonScalarLoss(loss_shape));
        }
        for w in wrt {
            if !self.nodes[w.0].requires_grad {
                return Err(DgmError::NotDifferentiable(w.0));
            }
        }
        let end = loss.0 + 1;
        let mut relevant = vec![false; end];
        for w in wrt {
            if w.0 < end {
                relevant[w.0] = true;
            }
        }
        for i in 0..end {
            if !relevant[i] {
                relevant[i] = self.nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .flatten()
                    .any(|inp| relevant[inp.0]);
            }
        }
        let mut grads: Vec<Option<NodeId>> = vec![None; end];
        if relevant[loss.0] {
            grads[loss.0] = Some(self.constant(Tensor::scalar(1.0))?);
        }
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes[i].op;
            for (input, vjp) in self.vjp(NodeId(i), op, g)? {
                if !relevant[input.0] {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0] {
                    Some(acc) => self.add(acc, vjp)?,
                    None => vjp,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| grads.get(w.0).copied().flatten())
            .collect())
    }

    /// Vector-Jacobian products of one recorded op, expressed as new nodes.
    fn vjp(&mut self, out: NodeId, op: Op, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        use Op::*;
        Ok(match op {
            Leaf => vec![],
            MatMul { a, b, ta, tb } => {
                let ga = if ta {
                    self.matmul_t(b, g, tb, true)?
                } else {
                    self.matmul_t(g, b, false, !tb)?
                };
                let gb = if tb {
                    self.matmul_t(g, a, true, ta)?
                } else {
                    self.matmul_t(a, g, !ta, false)?
                };
                vec![(a, ga), (b, gb)]
            }
            Add(a, b) => vec![(a, g), (b, g)],
            Sub(a, b) => {
                let nb = self.scale(g, -1.0)?;
                vec![(a, g), (b, nb)]
            }
            Mul(a, b) => {
                let ga = self.mul(g, b)?;
                let gb = self.mul(g, a)?;
                vec![(a, ga), (b, gb)]
            }
            Scale(a, c) => vec![(a, self.scale(g, c)?)],
            AddScalar(a) => vec![(a, g)],
            BroadcastRows(a) => vec![(a, self.sum_rows(g)?)],
            SumRows(a) => {
                let r = self.value(a).rows();
                vec![(a, self.broadcast_rows(g, r)?)]
            }
            BroadcastCols(a) => vec![(a, self.sum_cols(g)?)],
            SumCols(a) => {
                let c = self.value(a).cols();
                vec![(a, self.broadcast_cols(g, c)?)]
            }
            Sum(a) => {
                let (r, c) = self.shape(a);
                vec![(a, self.broadcast_scalar(g, r, c)?)]
            }
            BroadcastScalar(a) => vec![(a, self.sum(g)?)],
            LeakyRelu(a, slope) => {
                let d = self.value(a).map(|x| if x > 0.0 { 1.0 } else { slope });
                let d = self.constant(d)?;
                vec![(a, self.mul(g, d)?)]
            }
            Tanh(a) => {
                let y2 = self.square(out)?;
                let neg = self.scale(y2, -1.0)?;
                let d = self.add_scalar(neg, 1.0)?;
                vec![(a, self.mul(g, d)?)]
            }
            Sigmoid(a) => {
                let neg = self.scale(out, -1.0)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let d = self.mul(out, one_minus)?;
                vec![(a, self.mul(g, d)?)]
            }
            Exp(a) => vec![(a, self.mul(g, out)?)],
            Powf(a, p) => {
                let pm = self.powf(a, p - 1.0)?;
                let d = self.scale(pm, p)?;
                vec![(a, self.mul(g, d)?)]
            }
            LogSoftmax(a) => {
                let c = self.value(a).cols();
                let sm = self.exp(out)?;
                let gs = self.sum_cols(g)?;
                let gb = self.broadcast_cols(gs, c)?;
                let corr = self.mul(sm, gb)?;
                vec![(a, self.sub(g, corr)?)]
            }
        })
    }

    /// Per-sample L2 norms of `d output / d input`, as a `[batch, 1]` node.
    ///
    /// Valid when rows of `input` do not interact, which holds for every
    /// network built from the ops above.
    pub fn input_gradient_norm(&mut self, output: NodeId, input: NodeId) -> Result<NodeId> {
        let grads = self.grad(output, &[input])?;
        let g = match grads[0] {
            Some(g) => g,
            None => {
                let (r, c) = self.shape(input);
                self.constant(Tensor::zeros(r, c))?
            }
        };
        let sq = self.square(g)?;
        let ss = self.sum_cols(sq)?;
        // keeps the square root differentiable at a zero gradient
        let ss = self.add_scalar(ss, 1e-12)?;
        self.sqrt(ss)
    }

    /// Gradients of `loss` for every registered parameter, gates applied.
    /// Parameters `loss` does not depend on receive zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let ids: Vec<NodeId> = self.params.iter().map(|(id, _)| *id).collect();
        let nodes = self.grad(loss, &ids)?;
        let mut map = HashMap::with_capacity(ids.len());
        for ((id, gate), node) in self.params.iter().zip(nodes) {
            let raw = match node {
                Some(n) => self.nodes[n.0].value.clone(),
                None => {
                    let v = &self.nodes[id.0].value;
                    Tensor::new(v.shape().to_vec(), vec![0.0; v.len()])?
                }
            };
            let grad = match gate {
                Some(gt) => raw.zip_map(gt, "gate", |g, m| g * m)?,
                None => raw,
            };
            map.insert(
                *id,
                ParamGrad {
                    grad,
                    gate: gate.clone(),
                },
            );
        }
        Ok(Gradients { map })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
