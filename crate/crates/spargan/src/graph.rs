//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is an append-only record of primitive operations. Each builder
//! method validates shapes, evaluates its node eagerly and caches whatever the
//! backward pass needs, so replaying the record on identical inputs is
//! bit-for-bit reproducible. [`Graph::backward`] walks the record in reverse
//! and returns a gradient for every parameter node (zero if unused).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

/// Probabilities fed to the binary cross-entropy are clamped to
/// `[BCE_EPS, 1 - BCE_EPS]` so saturated discriminator outputs keep the loss
/// finite.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Leaf replaced on replay.
    Input,
    /// Leaf that receives a gradient.
    Param,
    /// Leaf literal (loss weights, scale factors).
    Const,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Row-broadcast add: [b,n] + [n].
    AddBias(NodeId, NodeId),
    /// Concatenate along the last axis: [b,n1] ++ [b,n2].
    ConcatCols(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    /// Softmax over the last axis of a matrix.
    SoftmaxRows(NodeId),
    Ln(NodeId),
    /// Mean over the batch (first) axis: [b, rest..] -> [rest..].
    MeanBatch(NodeId),
    /// Mean over the batch of -log softmax(logits)[label]. Scalar output.
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
    /// Mean of -[t log p + (1-t) log(1-p)] with clamped p. Scalar output.
    BinaryCrossEntropy(NodeId, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    name: Option<String>,
    value: Tensor,
    /// Extra forward results the backward pass reuses (softmax probabilities,
    /// clamped BCE inputs).
    cache: Option<Tensor>,
}

/// Gradients keyed by parameter name, as returned by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.by_name.insert(name, grad);
    }

    /// Gradients whose names start with `prefix`, re-keyed without it.
    pub fn strip_prefix(&self, prefix: &str) -> Gradients {
        let by_name = self
            .by_name
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix)
                    .map(|rest| (rest.to_string(), v.clone()))
            })
            .collect();
        Gradients { by_name }
    }
}

/// The recorded computation: an ordered list of primitive-operation nodes.
/// Node ids are topologically ordered by construction (an input id always
/// precedes its consumer).
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, name: Option<String>, value: Tensor, cache: Option<Tensor>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            name,
            value,
            cache,
        });
        id
    }

    fn mismatch(&self, op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::ShapeMismatch {
            op,
            node: self.nodes.len(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    // ---- leaves ---------------------------------------------------------

    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(Op::Input, Some(name.to_string()), value, None)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(Op::Param, Some(name.to_string()), value, None)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, None, value, None)
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", &sa, &sb));
        }
        let value = self.eval(&Op::MatMul(a, b)).0;
        Ok(self.push(Op::MatMul(a, b), None, value, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(self.mismatch("add", &sa, &sb));
        }
        let value = self.eval(&Op::Add(a, b)).0;
        Ok(self.push(Op::Add(a, b), None, value, None))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(self.mismatch("add_bias", &sx, &sb));
        }
        let value = self.eval(&Op::AddBias(x, bias)).0;
        Ok(self.push(Op::AddBias(x, bias), None, value, None))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(self.mismatch("concat_cols", &sa, &sb));
        }
        let value = self.eval(&Op::ConcatCols(a, b)).0;
        Ok(self.push(Op::ConcatCols(a, b), None, value, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(self.mismatch("mul", &sa, &sb));
        }
        let value = self.eval(&Op::Mul(a, b)).0;
        Ok(self.push(Op::Mul(a, b), None, value, None))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.eval(&Op::Tanh(x)).0;
        self.push(Op::Tanh(x), None, value, None)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let value = self.eval(&Op::LeakyRelu(x, slope)).0;
        self.push(Op::LeakyRelu(x, slope), None, value, None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.eval(&Op::Sigmoid(x)).0;
        self.push(Op::Sigmoid(x), None, value, None)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(self.mismatch("softmax_rows", &sx, &sx));
        }
        let value = self.eval(&Op::SoftmaxRows(x)).0;
        Ok(self.push(Op::SoftmaxRows(x), None, value, None))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let value = self.eval(&Op::Ln(x)).0;
        self.push(Op::Ln(x), None, value, None)
    }

    pub fn mean_batch(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(self.mismatch("mean_batch", &sx, &sx));
        }
        let value = self.eval(&Op::MeanBatch(x)).0;
        Ok(self.push(Op::MeanBatch(x), None, value, None))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(self.mismatch("softmax_cross_entropy", &sl, &[labels.len()]));
        }
        if labels.is_empty() {
            return Err(Error::EmptyBatch("softmax_cross_entropy"));
        }
        let classes = sl[1];
        for &label in labels {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        let op = Op::SoftmaxCrossEntropy(logits, labels.to_vec());
        let (value, cache) = self.eval(&op);
        Ok(self.push(op, None, value, cache))
    }

    /// Mean of `-[t log p + (1-t) log(1-p)]` with per-element targets in {0,1}.
    pub fn binary_cross_entropy(&mut self, probs: NodeId, targets: &[f64]) -> Result<NodeId> {
        let sp = self.shape(probs).to_vec();
        let n: usize = sp.iter().product();
        if n != targets.len() {
            return Err(self.mismatch("binary_cross_entropy", &sp, &[targets.len()]));
        }
        if targets.is_empty() {
            return Err(Error::EmptyBatch("binary_cross_entropy"));
        }
        for &t in targets {
            if t != 0.0 && t != 1.0 {
                return Err(Error::InvalidBinaryTarget { value: t });
            }
        }
        let op = Op::BinaryCrossEntropy(probs, targets.to_vec());
        let (value, cache) = self.eval(&op);
        Ok(self.push(op, None, value, cache))
    }

    /// Binary cross-entropy against one target shared by every element.
    pub fn bce_uniform(&mut self, probs: NodeId, target: f64) -> Result<NodeId> {
        let n = self.value(probs).numel();
        self.binary_cross_entropy(probs, &vec![target; n])
    }

    // ---- evaluation ------------------------------------------------------

    fn eval(&self, op: &Op) -> (Tensor, Option<Tensor>) {
        match op {
            Op::Input | Op::Param | Op::Const => unreachable!("leaves are never re-evaluated here"),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut out = vec![0.0; m * n];
                matmul_acc(va.values(), vb.values(), m, k, n, &mut out);
                (Tensor::from_values(&[m, n], out).unwrap(), None)
            }
            Op::Add(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let values = va
                    .values()
                    .iter()
                    .zip(vb.values())
                    .map(|(x, y)| x + y)
                    .collect();
                (Tensor::from_values(va.shape(), values).unwrap(), None)
            }
            Op::AddBias(x, bias) => {
                let (vx, vb) = (self.value(*x), self.value(*bias));
                let (rows, cols) = (vx.shape()[0], vx.shape()[1]);
                let mut values = vx.values().to_vec();
                for r in 0..rows {
                    for (v, b) in values[r * cols..(r + 1) * cols].iter_mut().zip(vb.values()) {
                        *v += b;
                    }
                }
                (Tensor::from_values(vx.shape(), values).unwrap(), None)
            }
            Op::ConcatCols(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let rows = va.shape()[0];
                let (ca, cb) = (va.shape()[1], vb.shape()[1]);
                let mut values = Vec::with_capacity(rows * (ca + cb));
                for r in 0..rows {
                    values.extend_from_slice(va.row(r));
                    values.extend_from_slice(vb.row(r));
                }
                (Tensor::from_values(&[rows, ca + cb], values).unwrap(), None)
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let values = va
                    .values()
                    .iter()
                    .zip(vb.values())
                    .map(|(x, y)| x * y)
                    .collect();
                (Tensor::from_values(va.shape(), values).unwrap(), None)
            }
            Op::Tanh(x) => (self.value(*x).map(f64::tanh), None),
            Op::LeakyRelu(x, slope) => (
                self.value(*x).map(|v| if v > 0.0 { v } else { slope * v }),
                None,
            ),
            Op::Sigmoid(x) => (self.value(*x).map(|v| 1.0 / (1.0 + (-v).exp())), None),
            Op::SoftmaxRows(x) => {
                let vx = self.value(*x);
                let (rows, cols) = (vx.shape()[0], vx.shape()[1]);
                let mut values = vec![0.0; rows * cols];
                for r in 0..rows {
                    softmax_into(vx.row(r), &mut values[r * cols..(r + 1) * cols]);
                }
                (Tensor::from_values(vx.shape(), values).unwrap(), None)
            }
            Op::Ln(x) => (self.value(*x).map(f64::ln), None),
            Op::MeanBatch(x) => {
                let vx = self.value(*x);
                let batch = vx.shape()[0];
                let rest: usize = vx.shape()[1..].iter().product();
                let mut values = vec![0.0; rest];
                for r in 0..batch {
                    for (acc, v) in values.iter_mut().zip(&vx.values()[r * rest..(r + 1) * rest]) {
                        *acc += v;
                    }
                }
                for v in &mut values {
                    *v /= batch as f64;
                }
                (Tensor::from_values(&vx.shape()[1..], values).unwrap(), None)
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let vl = self.value(*logits);
                let (rows, cols) = (vl.shape()[0], vl.shape()[1]);
                let mut probs = vec![0.0; rows * cols];
                let mut loss = 0.0;
                for r in 0..rows {
                    let prow = &mut probs[r * cols..(r + 1) * cols];
                    softmax_into(vl.row(r), prow);
                    loss -= prow[labels[r]].ln();
                }
                loss /= rows as f64;
                (
                    Tensor::scalar(loss),
                    Some(Tensor::from_values(&[rows, cols], probs).unwrap()),
                )
            }
            Op::BinaryCrossEntropy(probs, targets) => {
                let vp = self.value(*probs);
                let clamped: Vec<f64> = vp
                    .values()
                    .iter()
                    .map(|&p| p.clamp(BCE_EPS, 1.0 - BCE_EPS))
                    .collect();
                let mut loss = 0.0;
                for (&p, &t) in clamped.iter().zip(targets) {
                    loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
                }
                loss /= targets.len() as f64;
                (
                    Tensor::scalar(loss),
                    Some(Tensor::from_values(vp.shape(), clamped).unwrap()),
                )
            }
        }
    }

    /// Replace input values and recompute the whole record in id order.
    /// Every `Input` node must be covered by `inputs`; parameters and
    /// constants keep their stored values.
    pub fn forward(&mut self, inputs: &[(&str, Tensor)]) -> Result<BTreeMap<String, Tensor>> {
        let provided: BTreeMap<&str, &Tensor> = inputs.iter().map(|(n, t)| (*n, t)).collect();
        for node in &mut self.nodes {
            if let Op::Input = node.op {
                let name = node.name.as_deref().unwrap_or_default();
                match provided.get(name) {
                    Some(t) => {
                        if t.shape() != node.value.shape() {
                            return Err(Error::GradShapeMismatch {
                                name: name.to_string(),
                                param: node.value.shape().to_vec(),
                                grad: t.shape().to_vec(),
                            });
                        }
                        node.value = (*t).clone();
                    }
                    None => {
                        return Err(Error::MissingInput {
                            name: name.to_string(),
                        })
                    }
                }
            }
        }
        self.recompute();
        Ok(self.named_values())
    }

    /// Overwrite one parameter value in place (used by finite-difference
    /// probes); shapes must match.
    pub fn set_param_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Param) && node.name.as_deref() == Some(name) {
                if value.shape() != node.value.shape() {
                    return Err(Error::GradShapeMismatch {
                        name: name.to_string(),
                        param: node.value.shape().to_vec(),
                        grad: value.shape().to_vec(),
                    });
                }
                node.value = value;
                return Ok(());
            }
        }
        Err(Error::UnknownNode {
            name: name.to_string(),
        })
    }

    /// Re-evaluate every non-leaf node from current leaf values.
    pub fn recompute(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input | Op::Param | Op::Const) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, cache) = self.eval(&op);
            self.nodes[i].value = value;
            self.nodes[i].cache = cache;
        }
    }

    /// Values of all named nodes (inputs, parameters and named outputs).
    pub fn named_values(&self) -> BTreeMap<String, Tensor> {
        self.nodes
            .iter()
            .filter_map(|n| n.name.clone().map(|name| (name, n.value.clone())))
            .collect()
    }

    /// Attach a name to a computed node so `forward` reports it.
    pub fn name_node(&mut self, id: NodeId, name: &str) {
        self.nodes[id.0].name = Some(name.to_string());
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of the scalar node `loss` with respect to every `Param`
    /// node. Parameters the loss does not depend on get a zero tensor.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut accum: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        accum[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = accum[i].take() else {
                continue;
            };
            self.backward_node(i, &grad, &mut accum);
            // Leaves keep their accumulator for collection below.
            if matches!(self.nodes[i].op, Op::Param) {
                accum[i] = Some(grad);
            }
        }

        let mut grads = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param = node.op {
                let name = node.name.clone().unwrap_or_default();
                let tensor = match &accum[i] {
                    Some(g) => Tensor::from_values(node.value.shape(), g.clone()).unwrap(),
                    None => Tensor::zeros(node.value.shape()),
                };
                grads.insert(name, tensor);
            }
        }
        Ok(grads)
    }

    fn backward_node(&self, i: usize, grad: &[f64], accum: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param | Op::Const => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                // dA = dOut @ B^T
                let da = ensure(accum, a.0, m * k);
                matmul_a_bt_acc(grad, vb.values(), m, n, k, da);
                // dB = A^T @ dOut
                let db = ensure(accum, b.0, k * n);
                matmul_at_b_acc(va.values(), grad, m, k, n, db);
            }
            Op::Add(a, b) => {
                acc_into(ensure(accum, a.0, grad.len()), grad, 1.0);
                acc_into(ensure(accum, b.0, grad.len()), grad, 1.0);
            }
            Op::AddBias(x, bias) => {
                acc_into(ensure(accum, x.0, grad.len()), grad, 1.0);
                let cols = self.value(*bias).numel();
                let db = ensure(accum, bias.0, cols);
                for chunk in grad.chunks(cols) {
                    for (d, g) in db.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let rows = va.shape()[0];
                let (ca, cb) = (va.shape()[1], vb.shape()[1]);
                let da = ensure(accum, a.0, rows * ca);
                for r in 0..rows {
                    let src = &grad[r * (ca + cb)..r * (ca + cb) + ca];
                    for (d, g) in da[r * ca..(r + 1) * ca].iter_mut().zip(src) {
                        *d += g;
                    }
                }
                let db = ensure(accum, b.0, rows * cb);
                for r in 0..rows {
                    let src = &grad[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                    for (d, g) in db[r * cb..(r + 1) * cb].iter_mut().zip(src) {
                        *d += g;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = ensure(accum, a.0, grad.len());
                for ((d, g), v) in da.iter_mut().zip(grad).zip(vb.values()) {
                    *d += g * v;
                }
                let db = ensure(accum, b.0, grad.len());
                for ((d, g), v) in db.iter_mut().zip(grad).zip(va.values()) {
                    *d += g * v;
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let dx = ensure(accum, x.0, grad.len());
                for ((d, g), v) in dx.iter_mut().zip(grad).zip(y.values()) {
                    *d += g * (1.0 - v * v);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.value(*x);
                let dx = ensure(accum, x.0, grad.len());
                for ((d, g), v) in dx.iter_mut().zip(grad).zip(vx.values()) {
                    *d += g * if *v > 0.0 { 1.0 } else { *slope };
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let dx = ensure(accum, x.0, grad.len());
                for ((d, g), v) in dx.iter_mut().zip(grad).zip(y.values()) {
                    *d += g * v * (1.0 - v);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (rows, cols) = (y.shape()[0], y.shape()[1]);
                let dx = ensure(accum, x.0, rows * cols);
                for r in 0..rows {
                    let yrow = y.row(r);
                    let grow = &grad[r * cols..(r + 1) * cols];
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(yrow)
                        .zip(grow)
                    {
                        *d += y * (g - dot);
                    }
                }
            }
            Op::Ln(x) => {
                let vx = self.value(*x);
                let dx = ensure(accum, x.0, grad.len());
                for ((d, g), v) in dx.iter_mut().zip(grad).zip(vx.values()) {
                    *d += g / v;
                }
            }
            Op::MeanBatch(x) => {
                let vx = self.value(*x);
                let batch = vx.shape()[0];
                let rest: usize = vx.shape()[1..].iter().product();
                let scale = 1.0 / batch as f64;
                let dx = ensure(accum, x.0, batch * rest);
                for r in 0..batch {
                    for (d, g) in dx[r * rest..(r + 1) * rest].iter_mut().zip(grad) {
                        *d += g * scale;
                    }
                }
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let probs = node.cache.as_ref().expect("cached probabilities");
                let (rows, cols) = (probs.shape()[0], probs.shape()[1]);
                let g = grad[0] / rows as f64;
                let dl = ensure(accum, logits.0, rows * cols);
                for r in 0..rows {
                    let prow = probs.row(r);
                    let drow = &mut dl[r * cols..(r + 1) * cols];
                    for (d, p) in drow.iter_mut().zip(prow) {
                        *d += g * p;
                    }
                    drow[labels[r]] -= g;
                }
            }
            Op::BinaryCrossEntropy(probs, targets) => {
                let clamped = node.cache.as_ref().expect("cached clamped probabilities");
                let g = grad[0] / targets.len() as f64;
                let dp = ensure(accum, probs.0, targets.len());
                for ((d, p), t) in dp.iter_mut().zip(clamped.values()).zip(targets) {
                    *d += g * (p - t) / (p * (1.0 - p));
                }
            }
        }
    }
}

fn ensure<'a>(accum: &'a mut Vec<Option<Vec<f64>>>, idx: usize, len: usize) -> &'a mut Vec<f64> {
    accum[idx].get_or_insert_with(|| vec![0.0; len])
}

fn acc_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

/// Numerically stable softmax of one row.
fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: f64, expected: f64, tol: f64, msg: &str) {
        assert!(
            (actual - expected).abs() < tol,
            "{msg}: actual={actual} expected={expected}"
        );
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.input(
            "i",
            Tensor::from_values(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let x = g.input(
            "x",
            Tensor::from_values(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).values(), g.value(x).values());
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::zeros(&[1, 3]));
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).values() {
            assert_close(v, 1.0 / 3.0, 1e-15, "softmax of zeros");
        }
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::zeros(&[2, 4]));
        let y = g.tanh(x);
        assert!(g.value(y).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_node_and_shapes() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::zeros(&[2, 3]));
        let b = g.input("b", Tensor::zeros(&[4, 2]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, node, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(node, 2);
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x_i^2) = mean(x*x) * n
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_values(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let mean = g.mean_batch(sq).unwrap();
        let n = g.constant(Tensor::scalar(3.0));
        let loss = g.mul(mean, n).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().values(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_values(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let loss = g.mean_batch(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().values(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn two_layer_tanh_network_matches_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (b, d0, d1, d2) = (3, 4, 5, 2);
        let randn =
            |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
        let x = Tensor::from_values(&[b, d0], randn(&mut rng, b * d0)).unwrap();
        let w1 = Tensor::from_values(&[d0, d1], randn(&mut rng, d0 * d1)).unwrap();
        let b1 = Tensor::from_values(&[d1], randn(&mut rng, d1)).unwrap();
        let w2 = Tensor::from_values(&[d1, d2], randn(&mut rng, d1 * d2)).unwrap();
        let labels = vec![0usize, 1, 0];

        let mut g = Graph::new();
        let xn = g.input("x", x);
        let w1n = g.param("w1", w1.clone());
        let b1n = g.param("b1", b1.clone());
        let w2n = g.param("w2", w2.clone());
        let h = g.matmul(xn, w1n).unwrap();
        let h = g.add_bias(h, b1n).unwrap();
        let h = g.tanh(h);
        let logits = g.matmul(h, w2n).unwrap();
        let loss = g.softmax_cross_entropy(logits, &labels).unwrap();
        let grads = g.backward(loss).unwrap();

        let h_step = 1e-5;
        let mut max_rel = 0.0f64;
        for (name, base) in [("w1", &w1), ("b1", &b1), ("w2", &w2)] {
            let analytic = grads.get(name).unwrap().clone();
            for i in 0..base.numel() {
                let mut plus = base.clone();
                plus.values_mut()[i] += h_step;
                g.set_param_value(name, plus).unwrap();
                g.recompute();
                let lp = g.value(loss).item();
                let mut minus = base.clone();
                minus.values_mut()[i] -= h_step;
                g.set_param_value(name, minus).unwrap();
                g.recompute();
                let lm = g.value(loss).item();
                g.set_param_value(name, base.clone()).unwrap();
                g.recompute();
                let fd = (lp - lm) / (2.0 * h_step);
                let denom = fd.abs().max(analytic.values()[i].abs()).max(1e-8);
                max_rel = max_rel.max((fd - analytic.values()[i]).abs() / denom);
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.input("l", Tensor::zeros(&[2, 5]));
        let loss = g.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        assert_close(g.value(loss).item(), 5.0f64.ln(), 1e-12, "ln 5");
    }

    #[test]
    fn cross_entropy_decreases_with_margin() {
        let loss_at_margin = |m: f64| {
            let mut g = Graph::new();
            let logits = g.input("l", Tensor::from_values(&[1, 3], vec![0.0, 0.0, m]).unwrap());
            let loss = g.softmax_cross_entropy(logits, &[2]).unwrap();
            g.value(loss).item()
        };
        let l1 = loss_at_margin(1.0);
        let l10 = loss_at_margin(10.0);
        assert!(l10 < l1, "loss should fall as the margin grows");
        assert!(l10 < 1e-3, "large margin loss near zero, got {l10}");
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = [1.0, 2.0, 3.0];
        let mut g = Graph::new();
        let l = g.input("l", Tensor::from_values(&[1, 3], logits.to_vec()).unwrap());
        let loss = g.softmax_cross_entropy(l, &[2]).unwrap();
        // brute force: softmax then -log
        let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        let expected = -(exps[2] / sum).ln();
        assert_close(g.value(loss).item(), expected, 1e-12, "direct formula");
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let l = g.input("l", Tensor::zeros(&[1, 3]));
        match g.softmax_cross_entropy(l, &[3]) {
            Err(Error::LabelOutOfRange { label, classes }) => {
                assert_eq!(label, 3);
                assert_eq!(classes, 3);
            }
            other => panic!("expected label error, got {other:?}"),
        }
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.input("p", Tensor::filled(&[4], 0.5));
        let loss = g.bce_uniform(p, 1.0).unwrap();
        assert_close(g.value(loss).item(), 2.0f64.ln(), 1e-12, "ln 2");
    }

    #[test]
    fn bce_saturated_boundary_is_near_zero() {
        let mut g = Graph::new();
        let p = g.input("p", Tensor::filled(&[2], 1.0 - BCE_EPS));
        let loss = g.bce_uniform(p, 1.0).unwrap();
        assert!(g.value(loss).item() < 1e-6);
        // clamping keeps even p = 1.0 finite
        let p2 = g.input("p2", Tensor::filled(&[2], 1.0));
        let loss2 = g.bce_uniform(p2, 0.0).unwrap();
        assert!(g.value(loss2).item().is_finite());
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut g = Graph::new();
        let p = g.input("p", Tensor::from_values(&[2], vec![0.9, 0.1]).unwrap());
        let loss = g.binary_cross_entropy(p, &[1.0, 0.0]).unwrap();
        let expected = (-(0.9f64.ln()) - 0.9f64.ln()) / 2.0;
        assert_close(g.value(loss).item(), expected, 1e-12, "mean of -ln 0.9 twice");
    }

    #[test]
    fn bce_rejects_fractional_target() {
        let mut g = Graph::new();
        let p = g.input("p", Tensor::filled(&[1], 0.5));
        assert!(matches!(
            g.binary_cross_entropy(p, &[0.5]),
            Err(Error::InvalidBinaryTarget { .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::zeros(&[2, 2]));
        match g.backward(x) {
            Err(Error::NonScalarLoss { node, shape }) => {
                assert_eq!(node, 0);
                assert_eq!(shape, vec![2, 2]);
            }
            other => panic!("expected non-scalar loss error, got {other:?}"),
        }
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_values(&[2], vec![1.0, 2.0]).unwrap());
        let _unused = g.param("unused", Tensor::zeros(&[3]));
        let loss = g.mean_batch(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("unused").unwrap().values(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.get("x").unwrap().values(), &[0.5, 0.5]);
    }

    #[test]
    fn replay_reproduces_outputs_bit_for_bit() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::from_values(&[1, 2], vec![0.3, -0.7]).unwrap());
        let w = g.param("w", Tensor::from_values(&[2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap());
        let h = g.matmul(x, w).unwrap();
        let y = g.sigmoid(h);
        g.name_node(y, "y");
        let first = g.value(y).clone();

        let out = g
            .forward(&[("x", Tensor::from_values(&[1, 2], vec![0.3, -0.7]).unwrap())])
            .unwrap();
        assert_eq!(out.get("y").unwrap().values(), first.values());

        // and a different input actually changes the output
        let out2 = g
            .forward(&[("x", Tensor::from_values(&[1, 2], vec![1.0, 1.0]).unwrap())])
            .unwrap();
        assert_ne!(out2.get("y").unwrap().values(), first.values());
    }

    #[test]
    fn forward_requires_all_inputs() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::zeros(&[1, 2]));
        let _ = g.tanh(x);
        assert!(matches!(
            g.forward(&[]),
            Err(Error::MissingInput { .. })
        ));
    }

    #[test]
    fn gradients_are_deterministic_across_runs() {
        let build = || {
            let mut g = Graph::new();
            let x = g.input("x", Tensor::from_values(&[2, 2], vec![0.5, -0.25, 0.125, 2.0]).unwrap());
            let w = g.param("w", Tensor::from_values(&[2, 2], vec![0.9, -0.1, 0.4, 0.7]).unwrap());
            let h = g.matmul(x, w).unwrap();
            let a = g.leaky_relu(h, 0.2);
            let s = g.softmax_rows(a).unwrap();
            let lg = g.ln(s);
            let m = g.mean_batch(lg).unwrap();
            let loss = g.mean_batch(m).unwrap();
            g.backward(loss).unwrap()
        };
        let g1 = build();
        let g2 = build();
        assert_eq!(g1.get("w").unwrap().values(), g2.get("w").unwrap().values());
    }
}
