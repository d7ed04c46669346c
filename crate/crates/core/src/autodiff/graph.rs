//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, which is already a topological
//! order: every op only references nodes that exist when it is created. The
//! forward pass walks that order once; the backward pass walks it in reverse
//! and only visits nodes that depend on a trainable parameter.

use std::collections::{BTreeMap, HashMap};

use super::tensor::{matmul_into, matmul_t_into, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input {
        name: String,
    },
    Param {
        name: String,
        trainable: bool,
    },
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`, the layout used by linear layers with `[out, in]` weights.
    MatMulT(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Gather {
        table: NodeId,
        indices: String,
    },
    MeanSquaredError(NodeId, NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: String,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Silu(..) => "silu",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Gather { .. } => "gather",
            Op::MeanSquaredError(..) => "mse",
            Op::Sum(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    requires_grad: bool,
}

/// Named tensors and index lists fed to a graph's inputs.
#[derive(Clone, Debug, Default)]
pub struct Feeds {
    tensors: HashMap<String, Tensor>,
    indices: HashMap<String, Vec<usize>>,
}

impl Feeds {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(mut self, name: &str, value: Tensor) -> Self {
        self.tensors.insert(name.to_string(), value);
        self
    }

    pub fn indices(mut self, name: &str, ids: Vec<usize>) -> Self {
        self.indices.insert(name.to_string(), ids);
        self
    }

    pub fn set_tensor(&mut self, name: &str, value: Tensor) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn set_indices(&mut self, name: &str, ids: Vec<usize>) {
        self.indices.insert(name.to_string(), ids);
    }
}

/// Gradients of a scalar with respect to every trainable parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, param: NodeId) -> Option<&Tensor> {
        self.by_param.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Node values; params hold their current weights here.
    values: Vec<Tensor>,
    index_lengths: HashMap<String, usize>,
    index_values: HashMap<String, Vec<usize>>,
    outputs: Vec<(String, NodeId)>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn label(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::Input { name } | Op::Param { name, .. } => format!("#{} {} '{name}'", id.0, node.op.kind()),
            op => format!("#{} {}", id.0, op.kind()),
        }
    }

    fn shape_err(&self, next: usize, kind: &str, detail: String) -> Error {
        Error::Shape { node: format!("#{next} {kind}"), detail }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Input { .. } => false,
            Op::Param { trainable, .. } => *trainable,
            other => self.inputs_of(other).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, requires_grad });
        self.values.push(Tensor::zeros(shape));
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn inputs_of(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Input { .. } | Op::Param { .. } => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MeanSquaredError(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Silu(a) | Op::Sum(a) => vec![*a],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id.0].shape()
    }

    fn dims2(&self, id: NodeId) -> Option<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(self.shape_err(self.nodes.len(), "input", format!("invalid shape {shape:?}")));
        }
        Ok(self.push(Op::Input { name: name.to_string() }, shape))
    }

    /// Declares an index-list input of fixed length consumed by `gather` / `cross_entropy`.
    pub fn index_input(&mut self, name: &str, len: usize) {
        self.index_lengths.insert(name.to_string(), len);
    }

    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> NodeId {
        let id = self.push(Op::Param { name: name.to_string(), trainable }, vec![1]);
        self.values[id.0] = value;
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        match (self.dims2(a), self.dims2(b)) {
            (Some((m, k)), Some((k2, n))) if k == k2 => Ok(self.push(Op::MatMul(a, b), vec![m, n])),
            _ => Err(self.shape_err(self.nodes.len(), "matmul", format!("{:?} · {:?}", self.shape(a), self.shape(b)))),
        }
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        match (self.dims2(a), self.dims2(b)) {
            (Some((m, k)), Some((n, k2))) if k == k2 => Ok(self.push(Op::MatMulT(a, b), vec![m, n])),
            _ => {
                Err(self.shape_err(self.nodes.len(), "matmul_t", format!("{:?} · {:?}ᵀ", self.shape(a), self.shape(b))))
            }
        }
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        match (self.dims2(x), self.shape(bias)) {
            (Some((m, n)), [nb]) if n == *nb => Ok(self.push(Op::AddBias(x, bias), vec![m, n])),
            _ => Err(self.shape_err(
                self.nodes.len(),
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            )),
        }
    }

    fn same_shape(&mut self, kind: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(self.nodes.len(), kind, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, factor), shape)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Silu(a), shape)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().and_then(|p| self.dims2(*p)).map(|d| d.0);
        let mut total = 0;
        for p in parts {
            match (self.dims2(*p), rows) {
                (Some((r, c)), Some(rows)) if r == rows => total += c,
                _ => {
                    return Err(self.shape_err(
                        self.nodes.len(),
                        "concat_cols",
                        format!("part {} has shape {:?}", self.label(*p), self.shape(*p)),
                    ))
                }
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![rows.unwrap_or(0), total]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().and_then(|p| self.dims2(*p)).map(|d| d.1);
        let mut total = 0;
        for p in parts {
            match (self.dims2(*p), cols) {
                (Some((r, c)), Some(cols)) if c == cols => total += r,
                _ => {
                    return Err(self.shape_err(
                        self.nodes.len(),
                        "concat_rows",
                        format!("part {} has shape {:?}", self.label(*p), self.shape(*p)),
                    ))
                }
            }
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![total, cols.unwrap_or(0)]))
    }

    /// Row lookup `table[indices[i]]`; the index list is fed by name at run time.
    pub fn gather(&mut self, table: NodeId, indices: &str) -> Result<NodeId> {
        let len = *self
            .index_lengths
            .get(indices)
            .ok_or_else(|| self.shape_err(self.nodes.len(), "gather", format!("undeclared index input '{indices}'")))?;
        let Some((_, d)) = self.dims2(table) else {
            return Err(self.shape_err(self.nodes.len(), "gather", "table must be 2-D".into()));
        };
        Ok(self.push(Op::Gather { table, indices: indices.to_string() }, vec![len, d]))
    }

    /// Mean of squared differences over every element; a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse", a, b)?;
        Ok(self.push(Op::MeanSquaredError(a, b), vec![1]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    /// Mean softmax cross-entropy of `logits[m, c]` against fed integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &str) -> Result<NodeId> {
        let len = self.index_lengths.get(labels).copied();
        match (self.dims2(logits), len) {
            (Some((m, _)), Some(len)) if m == len => {
                Ok(self.push(Op::CrossEntropy { logits, labels: labels.to_string() }, vec![1]))
            }
            _ => Err(self.shape_err(
                self.nodes.len(),
                "cross_entropy",
                format!("logits {:?} with labels '{labels}' of length {len:?}", self.shape(logits)),
            )),
        }
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn param_value(&self, id: NodeId) -> &Tensor {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Param { .. }));
        &self.values[id.0]
    }

    /// Mutable access to a parameter; invalidates the last forward pass.
    pub fn param_value_mut(&mut self, id: NodeId) -> &mut Tensor {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Param { .. }));
        self.evaluated = false;
        &mut self.values[id.0]
    }

    pub fn param_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id.0].op {
            Op::Param { name, .. } => Some(name),
            _ => None,
        }
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param { trainable: true, .. })
    }

    pub fn trainable_params(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).map(NodeId).filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Runs the forward pass and returns every output registered with `mark_output`.
    pub fn forward_eval(&mut self, feeds: &Feeds) -> Result<BTreeMap<String, Tensor>> {
        self.forward(feeds)?;
        Ok(self.outputs.iter().map(|(name, id)| (name.clone(), self.values[id.0].clone())).collect())
    }

    pub fn forward(&mut self, feeds: &Feeds) -> Result<()> {
        self.evaluated = false;
        for (name, &len) in &self.index_lengths {
            let ids = feeds
                .indices
                .get(name)
                .ok_or_else(|| Error::Shape { node: format!("index input '{name}'"), detail: "not fed".into() })?;
            if ids.len() != len {
                return Err(Error::Shape {
                    node: format!("index input '{name}'"),
                    detail: format!("expected {len} indices, got {}", ids.len()),
                });
            }
            self.index_values.insert(name.clone(), ids.clone());
        }
        for i in 0..self.nodes.len() {
            self.eval_node(i, feeds)?;
        }
        self.evaluated = true;
        Ok(())
    }

    fn eval_node(&mut self, i: usize, feeds: &Feeds) -> Result<()> {
        let (before, rest) = self.values.split_at_mut(i);
        let out = &mut rest[0];
        let v = |id: &NodeId| &before[id.0];
        match &self.nodes[i].op {
            Op::Param { .. } => {}
            Op::Input { name } => {
                let fed = feeds
                    .tensors
                    .get(name)
                    .ok_or_else(|| Error::Shape { node: format!("#{i} input '{name}'"), detail: "not fed".into() })?;
                if fed.shape() != out.shape() {
                    return Err(Error::Shape {
                        node: format!("#{i} input '{name}'"),
                        detail: format!("declared {:?}, fed {:?}", out.shape(), fed.shape()),
                    });
                }
                out.data_mut().copy_from_slice(fed.data());
            }
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                matmul_into(a.data(), b.data(), out.data_mut(), m, k, n);
            }
            Op::MatMulT(a, b) => {
                let (a, b) = (v(a), v(b));
                let (m, k, n) = (a.rows(), a.cols(), b.rows());
                matmul_t_into(a.data(), b.data(), out.data_mut(), m, k, n);
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (v(x), v(bias));
                let n = bias.numel();
                for (o_row, x_row) in out.data_mut().chunks_mut(n).zip(x.data().chunks(n)) {
                    for ((o, &xv), &bv) in o_row.iter_mut().zip(x_row).zip(bias.data()) {
                        *o = xv + bv;
                    }
                }
            }
            Op::Add(a, b) => zip_into(out, v(a), v(b), |x, y| x + y),
            Op::Sub(a, b) => zip_into(out, v(a), v(b), |x, y| x - y),
            Op::Mul(a, b) => zip_into(out, v(a), v(b), |x, y| x * y),
            Op::Scale(a, c) => {
                for (o, &x) in out.data_mut().iter_mut().zip(v(a).data()) {
                    *o = c * x;
                }
            }
            Op::Silu(a) => {
                for (o, &x) in out.data_mut().iter_mut().zip(v(a).data()) {
                    *o = x * sigmoid(x);
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let p = v(p);
                    let c = p.cols();
                    for (r, src) in p.data().chunks(c).enumerate() {
                        out.data_mut()[r * total + offset..r * total + offset + c].copy_from_slice(src);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let p = v(p);
                    out.data_mut()[offset..offset + p.numel()].copy_from_slice(p.data());
                    offset += p.numel();
                }
            }
            Op::Gather { table, indices } => {
                let table = v(table);
                let d = table.cols();
                let ids = &self.index_values[indices];
                for (r, &id) in ids.iter().enumerate() {
                    if id >= table.rows() {
                        return Err(Error::Shape {
                            node: format!("#{i} gather"),
                            detail: format!("index {id} out of range for {} rows", table.rows()),
                        });
                    }
                    out.data_mut()[r * d..(r + 1) * d].copy_from_slice(table.row(id));
                }
            }
            Op::MeanSquaredError(a, b) => {
                let (a, b) = (v(a), v(b));
                let mut acc = 0.0;
                for (&x, &y) in a.data().iter().zip(b.data()) {
                    let d = x - y;
                    acc += d * d;
                }
                out.data_mut()[0] = acc / a.numel() as f64;
            }
            Op::Sum(a) => {
                out.data_mut()[0] = v(a).data().iter().sum();
            }
            Op::CrossEntropy { logits, labels } => {
                let logits = v(logits);
                let c = logits.cols();
                let labels = &self.index_values[labels];
                let mut acc = 0.0;
                for (row, &label) in logits.data().chunks(c).zip(labels) {
                    if label >= c {
                        return Err(Error::Shape {
                            node: format!("#{i} cross_entropy"),
                            detail: format!("label {label} out of range for {c} classes"),
                        });
                    }
                    acc += log_sum_exp(row) - row[label];
                }
                out.data_mut()[0] = acc / labels.len() as f64;
            }
        }
        Ok(())
    }

    /// Reverse pass from `output`. Scalar outputs default to a seed of 1.
    pub fn backward(&self, output: NodeId, seed: Option<&Tensor>) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let seed = match seed {
            Some(s) => {
                if s.shape() != self.shape(output) {
                    return Err(Error::Shape {
                        node: self.label(output),
                        detail: format!("seed {:?} vs output {:?}", s.shape(), self.shape(output)),
                    });
                }
                s.clone()
            }
            None if self.values[output.0].numel() == 1 => Tensor::scalar(1.0).reshape(self.shape(output).to_vec())?,
            None => return Err(Error::MissingSeed(self.label(output))),
        };

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            // Parameter gradients stay in place for collection below.
            if matches!(self.nodes[i].op, Op::Param { .. }) {
                grads[i] = Some(g);
            }
        }

        let mut by_param = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { trainable: true, .. } = node.op {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(self.values[i].shape().to_vec()));
                by_param.insert(NodeId(i), g);
            }
        }
        Ok(Gradients { by_param })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: &NodeId| &self.values[id.0];
        let wants = |id: &NodeId| self.nodes[id.0].requires_grad;
        match &self.nodes[i].op {
            Op::Input { .. } | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(a) {
                    let mut tmp = vec![0.0; m * k];
                    matmul_t_into(g.data(), bv.data(), &mut tmp, m, n, k);
                    add_into(slot(grads, a, av), &tmp);
                }
                if wants(b) {
                    matmul_tn_acc(av.data(), g.data(), slot(grads, b, bv).data_mut(), m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if wants(a) {
                    let mut tmp = vec![0.0; m * k];
                    matmul_into(g.data(), bv.data(), &mut tmp, m, n, k);
                    add_into(slot(grads, a, av), &tmp);
                }
                if wants(b) {
                    matmul_tn_acc(g.data(), av.data(), slot(grads, b, bv).data_mut(), m, n, k);
                }
            }
            Op::AddBias(x, bias) => {
                if wants(x) {
                    add_into(slot(grads, x, val(x)), g.data());
                }
                if wants(bias) {
                    let bv = val(bias);
                    let n = bv.numel();
                    let gb = slot(grads, bias, bv).data_mut();
                    for row in g.data().chunks(n) {
                        for (o, &r) in gb.iter_mut().zip(row) {
                            *o += r;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    add_into(slot(grads, a, val(a)), g.data());
                }
                if wants(b) {
                    add_into(slot(grads, b, val(b)), g.data());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    add_into(slot(grads, a, val(a)), g.data());
                }
                if wants(b) {
                    for (o, &x) in slot(grads, b, val(b)).data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    let ga = slot(grads, a, av).data_mut();
                    for ((o, &gi), &y) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gi * y;
                    }
                }
                if wants(b) {
                    let gb = slot(grads, b, bv).data_mut();
                    for ((o, &gi), &x) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gi * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    for (o, &gi) in slot(grads, a, val(a)).data_mut().iter_mut().zip(g.data()) {
                        *o += c * gi;
                    }
                }
            }
            Op::Silu(a) => {
                if wants(a) {
                    let av = val(a);
                    let ga = slot(grads, a, av).data_mut();
                    for ((o, &gi), &x) in ga.iter_mut().zip(g.data()).zip(av.data()) {
                        let s = sigmoid(x);
                        *o += gi * s * (1.0 + x * (1.0 - s));
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = val(p);
                    let c = pv.cols();
                    if wants(p) {
                        let gp = slot(grads, p, pv).data_mut();
                        for (r, dst) in gp.chunks_mut(c).enumerate() {
                            let src = &g.data()[r * total + offset..r * total + offset + c];
                            for (o, &x) in dst.iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = val(p);
                    let n = pv.numel();
                    if wants(p) {
                        add_into(slot(grads, p, pv), &g.data()[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Gather { table, indices } => {
                if wants(table) {
                    let tv = val(table);
                    let d = tv.cols();
                    let gt = slot(grads, table, tv).data_mut();
                    for (r, &id) in self.index_values[indices].iter().enumerate() {
                        for (o, &x) in gt[id * d..(id + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::MeanSquaredError(a, b) => {
                let (av, bv) = (val(a), val(b));
                let coef = 2.0 * g.item() / av.numel() as f64;
                if wants(a) {
                    let ga = slot(grads, a, av).data_mut();
                    for ((o, &x), &y) in ga.iter_mut().zip(av.data()).zip(bv.data()) {
                        *o += coef * (x - y);
                    }
                }
                if wants(b) {
                    let gb = slot(grads, b, bv).data_mut();
                    for ((o, &x), &y) in gb.iter_mut().zip(av.data()).zip(bv.data()) {
                        *o -= coef * (x - y);
                    }
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    let gi = g.item();
                    for o in slot(grads, a, val(a)).data_mut() {
                        *o += gi;
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if wants(logits) {
                    let lv = val(logits);
                    let c = lv.cols();
                    let labels = &self.index_values[labels];
                    let coef = g.item() / labels.len() as f64;
                    let gl = slot(grads, logits, lv).data_mut();
                    for ((dst, row), &label) in gl.chunks_mut(c).zip(lv.data().chunks(c)).zip(labels) {
                        let lse = log_sum_exp(row);
                        for (j, (o, &x)) in dst.iter_mut().zip(row).enumerate() {
                            let p = (x - lse).exp();
                            let target = if j == label { 1.0 } else { 0.0 };
                            *o += coef * (p - target);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], id: &NodeId, like: &Tensor) -> &'a mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(like.shape().to_vec()))
}

fn add_into(dst: &mut Tensor, src: &[f64]) {
    for (o, &x) in dst.data_mut().iter_mut().zip(src) {
        *o += x;
    }
}

fn zip_into(out: &mut Tensor, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) {
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = f(x, y);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}
