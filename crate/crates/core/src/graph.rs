//! Computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is a list of nodes in insertion order. Every builder method
//! only accepts handles of nodes that already exist, so insertion order is a
//! valid topological order by construction. Leaves are either named inputs
//! or named parameters; both are resolved from a [`Feeds`] map at
//! [`Graph::forward`] time. [`Graph::backward`] returns the gradient of the
//! designated scalar loss with respect to every parameter leaf.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Param(String),
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul(NodeId, NodeId),
    /// `[m, n] + [n]`, the only broadcast supported.
    BiasAdd(NodeId, NodeId),
    Relu(NodeId),
    /// Elementwise product of equally shaped tensors.
    Mul(NodeId, NodeId),
    /// `[m, p] ++ [m, q] -> [m, p + q]` along the feature axis.
    Concat(NodeId, NodeId),
    /// Mean of squared differences over all elements.
    Mse(NodeId, NodeId),
    /// Row-mean of `-sum(target * log_softmax(logits))`.
    SoftmaxCrossEntropy(NodeId, NodeId),
    /// Sum of all elements.
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::BiasAdd(..) => "bias_add",
            Op::Relu(_) => "relu",
            Op::Mul(..) => "mul",
            Op::Concat(..) => "concat",
            Op::Mse(..) => "mse",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
        }
    }

    fn is_reduction(&self) -> bool {
        matches!(self, Op::Mse(..) | Op::SoftmaxCrossEntropy(..) | Op::Sum(_))
    }
}

/// Borrowed name -> tensor bindings for graph leaves.
#[derive(Default, Clone)]
pub struct Feeds<'a> {
    map: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Feeds<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &'a str, value: &'a Tensor) -> &mut Self {
        self.map.insert(name, value);
        self
    }

    pub fn with(mut self, name: &'a str, value: &'a Tensor) -> Self {
        self.map.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    loss: Option<NodeId>,
    values: Option<Vec<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.values = None;
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, ids: &[NodeId]) {
        for id in ids {
            assert!(
                id.0 < self.nodes.len(),
                "node handle {} does not belong to this graph",
                id.0
            );
        }
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_owned()))
    }

    pub fn param(&mut self, id: &str) -> NodeId {
        self.push(Op::Param(id.to_owned()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check(&[a, b]);
        self.push(Op::MatMul(a, b))
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.check(&[x, bias]);
        self.push(Op::BiasAdd(x, bias))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.check(&[x]);
        self.push(Op::Relu(x))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check(&[a, b]);
        self.push(Op::Mul(a, b))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check(&[a, b]);
        self.push(Op::Concat(a, b))
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        self.check(&[pred, target]);
        self.push(Op::Mse(pred, target))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: NodeId) -> NodeId {
        self.check(&[logits, target]);
        self.push(Op::SoftmaxCrossEntropy(logits, target))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.check(&[x]);
        self.push(Op::Sum(x))
    }

    /// `x @ w + b`, optionally followed by ReLU.
    pub fn dense(&mut self, x: NodeId, weight: &str, bias: &str, relu: bool) -> NodeId {
        let w = self.param(weight);
        let b = self.param(bias);
        let h = self.matmul(x, w);
        let h = self.bias_add(h, b);
        if relu {
            self.relu(h)
        } else {
            h
        }
    }

    /// Designates the scalar loss node. Only reduction nodes qualify.
    pub fn set_loss(&mut self, node: NodeId) -> Result<()> {
        self.check(&[node]);
        let op = &self.nodes[node.0];
        if !op.is_reduction() {
            return Err(Error::ShapeMismatch {
                node: node.0,
                op: op.name(),
                detail: "loss node must be a scalar reduction".into(),
            });
        }
        self.loss = Some(node);
        Ok(())
    }

    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    /// Ids of all parameter leaves, sorted and deduplicated.
    pub fn param_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|op| match op {
                Op::Param(id) => Some(id.clone()),
                _ => None,
            })
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Cached value of a node from the most recent forward pass.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.as_ref().map(|v| &v[node.0])
    }

    /// Evaluates every node and returns the scalar loss.
    pub fn forward(&mut self, feeds: &Feeds<'_>) -> Result<f64> {
        let loss = self.loss.ok_or(Error::NoLoss)?;
        self.evaluate(feeds)?;
        Ok(self.values.as_ref().expect("values cached")[loss.0].data()[0])
    }

    /// Evaluates every node without requiring a loss node.
    pub fn evaluate(&mut self, feeds: &Feeds<'_>) -> Result<()> {
        self.values = None;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, op) in self.nodes.iter().enumerate() {
            let out = eval_node(idx, op, &values, feeds)?;
            values.push(out);
        }
        self.values = Some(values);
        Ok(())
    }

    /// Gradient of the loss with respect to every parameter leaf.
    ///
    /// Gradients are accumulated from zero on every call. Parameters that
    /// the loss does not depend on get an all-zero gradient.
    pub fn backward(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let loss = self.loss.ok_or(Error::NoLoss)?;
        let values = self.values.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = adj[idx].take() else {
                continue;
            };
            match &self.nodes[idx] {
                Op::Input(_) => {}
                Op::Param(_) => {
                    adj[idx] = Some(upstream);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = values[a.0].dims2().expect("checked in forward");
                    let (_, n) = values[b.0].dims2().expect("checked in forward");
                    let av = values[a.0].data();
                    let bv = values[b.0].data();
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let g_row = &upstream[i * n..(i + 1) * n];
                        for p in 0..k {
                            let b_row = &bv[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g_row[j] * b_row[j];
                            }
                            da[i * k + p] = acc;
                            let a_ip = av[i * k + p];
                            let db_row = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                db_row[j] += a_ip * g_row[j];
                            }
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::BiasAdd(x, bias) => {
                    let n = values[bias.0].len();
                    let mut db = vec![0.0; n];
                    for row in upstream.chunks(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut adj, *bias, db);
                    accumulate(&mut adj, *x, upstream);
                }
                Op::Relu(x) => {
                    let xv = values[x.0].data();
                    let dx = upstream
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *x, dx);
                }
                Op::Mul(a, b) => {
                    let av = values[a.0].data();
                    let bv = values[b.0].data();
                    let da = upstream.iter().zip(bv).map(|(g, v)| g * v).collect();
                    let db = upstream.iter().zip(av).map(|(g, v)| g * v).collect();
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Concat(a, b) => {
                    let (m, p) = values[a.0].dims2().expect("checked in forward");
                    let (_, q) = values[b.0].dims2().expect("checked in forward");
                    let mut da = Vec::with_capacity(m * p);
                    let mut db = Vec::with_capacity(m * q);
                    for row in upstream.chunks(p + q) {
                        da.extend_from_slice(&row[..p]);
                        db.extend_from_slice(&row[p..]);
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Mse(pred, target) => {
                    let g = upstream[0];
                    let pv = values[pred.0].data();
                    let tv = values[target.0].data();
                    let scale = 2.0 / pv.len() as f64;
                    let dp: Vec<f64> = pv
                        .iter()
                        .zip(tv)
                        .map(|(p, t)| g * scale * (p - t))
                        .collect();
                    let dt = dp.iter().map(|v| -v).collect();
                    accumulate(&mut adj, *pred, dp);
                    accumulate(&mut adj, *target, dt);
                }
                Op::SoftmaxCrossEntropy(logits, target) => {
                    let g = upstream[0];
                    let (m, n) = values[logits.0].dims2().expect("checked in forward");
                    let lv = values[logits.0].data();
                    let tv = values[target.0].data();
                    let mut dl = vec![0.0; m * n];
                    let mut dt = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &lv[i * n..(i + 1) * n];
                        let t_row = &tv[i * n..(i + 1) * n];
                        let (log_sm, t_sum) = log_softmax(row, t_row);
                        for j in 0..n {
                            let p = log_sm[j].exp();
                            dl[i * n + j] = g * (p * t_sum - t_row[j]) / m as f64;
                            dt[i * n + j] = -g * log_sm[j] / m as f64;
                        }
                    }
                    accumulate(&mut adj, *logits, dl);
                    accumulate(&mut adj, *target, dt);
                }
                Op::Sum(x) => {
                    let n = values[x.0].len();
                    accumulate(&mut adj, *x, vec![upstream[0]; n]);
                }
            }
        }

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (idx, op) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = op {
                let shape = values[idx].shape();
                let g = adj[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; values[idx].len()]);
                match grads.get_mut(id) {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                            *e += v;
                        }
                    }
                    None => {
                        grads.insert(id.clone(), Tensor::new(shape.to_vec(), g)?);
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], node: NodeId, grad: Vec<f64>) {
    match &mut adj[node.0] {
        Some(existing) => {
            for (e, g) in existing.iter_mut().zip(grad) {
                *e += g;
            }
        }
        slot @ None => *slot = Some(grad),
    }
}

/// Stable log-softmax of one row, plus the row sum of the target weights.
fn log_softmax(row: &[f64], target: &[f64]) -> (Vec<f64>, f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (row.iter().map(|v| v - lse).collect(), target.iter().sum())
}

fn mismatch(node: usize, op: &Op, detail: String) -> Error {
    Error::ShapeMismatch {
        node,
        op: op.name(),
        detail,
    }
}

fn eval_node(idx: usize, op: &Op, values: &[Tensor], feeds: &Feeds<'_>) -> Result<Tensor> {
    let dims2 = |id: &NodeId, role: &str| -> Result<(usize, usize)> {
        values[id.0].dims2().ok_or_else(|| {
            mismatch(
                idx,
                op,
                format!("{role} must be 2-D, got {:?}", values[id.0].shape()),
            )
        })
    };
    Ok(match op {
        Op::Input(name) | Op::Param(name) => {
            let t = feeds
                .get(name)
                .ok_or_else(|| Error::MissingInput(name.clone()))?;
            let mut t = t.clone();
            t.clear_grad();
            t
        }
        Op::MatMul(a, b) => {
            let (m, k) = dims2(a, "left operand")?;
            let (k2, n) = dims2(b, "right operand")?;
            if k != k2 {
                return Err(mismatch(
                    idx,
                    op,
                    format!("inner dimensions {k} and {k2} differ"),
                ));
            }
            let av = values[a.0].data();
            let bv = values[b.0].data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let out_row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let a_ip = av[i * k + p];
                    let b_row = &bv[p * n..(p + 1) * n];
                    for j in 0..n {
                        out_row[j] += a_ip * b_row[j];
                    }
                }
            }
            Tensor::matrix(m, n, out)?
        }
        Op::BiasAdd(x, bias) => {
            let (m, n) = dims2(x, "input")?;
            let b = &values[bias.0];
            if b.shape() != [n] {
                return Err(mismatch(
                    idx,
                    op,
                    format!(
                        "bias shape {:?} does not broadcast over [{m}, {n}]",
                        b.shape()
                    ),
                ));
            }
            let mut out = values[x.0].data().to_vec();
            for row in out.chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Tensor::matrix(m, n, out)?
        }
        Op::Relu(x) => values[x.0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Mul(a, b) => {
            if values[a.0].shape() != values[b.0].shape() {
                return Err(mismatch(
                    idx,
                    op,
                    format!(
                        "operands {:?} and {:?} differ",
                        values[a.0].shape(),
                        values[b.0].shape()
                    ),
                ));
            }
            values[a.0].hadamard(&values[b.0])?
        }
        Op::Concat(a, b) => {
            let (m, p) = dims2(a, "left operand")?;
            let (m2, q) = dims2(b, "right operand")?;
            if m != m2 {
                return Err(mismatch(idx, op, format!("row counts {m} and {m2} differ")));
            }
            let mut out = Vec::with_capacity(m * (p + q));
            for i in 0..m {
                out.extend_from_slice(values[a.0].row(i));
                out.extend_from_slice(values[b.0].row(i));
            }
            Tensor::matrix(m, p + q, out)?
        }
        Op::Mse(pred, target) => {
            let (p, t) = (&values[pred.0], &values[target.0]);
            if p.shape() != t.shape() {
                return Err(mismatch(
                    idx,
                    op,
                    format!("prediction {:?} vs target {:?}", p.shape(), t.shape()),
                ));
            }
            let sse: f64 = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Tensor::scalar(sse / p.len() as f64)
        }
        Op::SoftmaxCrossEntropy(logits, target) => {
            let (m, n) = dims2(logits, "logits")?;
            if values[target.0].shape() != [m, n] {
                return Err(mismatch(
                    idx,
                    op,
                    format!("logits [{m}, {n}] vs target {:?}", values[target.0].shape()),
                ));
            }
            let lv = values[logits.0].data();
            let tv = values[target.0].data();
            let mut total = 0.0;
            for i in 0..m {
                let t_row = &tv[i * n..(i + 1) * n];
                let (log_sm, _) = log_softmax(&lv[i * n..(i + 1) * n], t_row);
                total -= t_row.iter().zip(&log_sm).map(|(t, l)| t * l).sum::<f64>();
            }
            Tensor::scalar(total / m as f64)
        }
        Op::Sum(x) => Tensor::scalar(values[x.0].data().iter().sum()),
    })
}
