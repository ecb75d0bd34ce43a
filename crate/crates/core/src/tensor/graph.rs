use std::collections::{BTreeMap, HashMap};

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so inputs always precede the node
/// that consumes them and backward is a single reverse sweep. A graph is
/// single-use: a second [`backward`](Graph::backward) is an error.
#[derive(Debug)]
pub struct Graph<'s> {
    store: Option<&'s ParameterStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.by_param.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// `self += other`, summing in key order.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (id, g) in &other.by_param {
            match self.by_param.get_mut(id) {
                Some(buf) => {
                    for (b, v) in buf.iter_mut().zip(g) {
                        *b += v;
                    }
                }
                None => {
                    self.by_param.insert(*id, g.clone());
                }
            }
        }
    }
}

fn check_finite(data: &[f64], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn with_store(store: &'s ParameterStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store.expect("graph has no parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn finish(
        &mut self,
        dims: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        needs_grad: bool,
        name: &str,
    ) -> Result<Var> {
        check_finite(&data, name)?;
        Ok(self.push(Tensor::from_parts(dims, data), op, needs_grad))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable free input, for tests and gradient checks on raw ops.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter from the store. Each parameter is loaded once per
    /// graph; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = self.store().get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, k) = self.rc(a);
        let (k2, q) = self.rc(b);
        if k != k2 || self.dims(a).len() != 2 || self.dims(b).len() != 2 {
            return Err(Error::shape("matmul", self.dims(a), self.dims(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), p, k, q);
        let ng = self.ng(a) || self.ng(b);
        self.finish(vec![p, q], out, Op::MatMul(a, b), ng, "matmul")
    }

    /// `a · bᵀ`; the workhorse for linear maps (`x · Wᵀ`) and attention scores.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, k) = self.rc(a);
        let (q, k2) = self.rc(b);
        if k != k2 || self.dims(a).len() != 2 || self.dims(b).len() != 2 {
            return Err(Error::shape("matmul_bt", self.dims(a), self.dims(b)));
        }
        let out = kernels::matmul_bt(self.value(a).data(), self.value(b).data(), p, k, q);
        let ng = self.ng(a) || self.ng(b);
        self.finish(vec![p, q], out, Op::MatMulBt(a, b), ng, "matmul_bt")
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(name, self.dims(a), self.dims(b)));
        }
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.finish(self.dims(a).to_vec(), out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.finish(self.dims(a).to_vec(), out, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.finish(self.dims(a).to_vec(), out, Op::Mul(a, b), ng, "mul")
    }

    /// Adds the vector `b` (length = cols) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.rc(a);
        if self.value(b).numel() != q {
            return Err(Error::shape("add_row", self.dims(a), self.dims(b)));
        }
        let bias = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..p {
            for (o, &bv) in out[i * q..(i + 1) * q].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.finish(self.dims(a).to_vec(), out, Op::AddRow(a, b), ng, "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        self.finish(self.dims(a).to_vec(), out, Op::Scale(a, c), ng, "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| kernels::sigmoid(x))
            .collect();
        let ng = self.ng(a);
        self.finish(self.dims(a).to_vec(), out, Op::Sigmoid(a), ng, "sigmoid")
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| kernels::gelu(x))
            .collect();
        let ng = self.ng(a);
        self.finish(self.dims(a).to_vec(), out, Op::Gelu(a), ng, "gelu")
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row-wise softmax where entry `(i, j)` is masked out (exactly zero)
    /// whenever `j > i`.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (p, q) = self.rc(a);
        if causal && p > q {
            return Err(Error::shape("causal_softmax_rows", self.dims(a), &[p, p]));
        }
        let x = self.value(a).data();
        check_finite(x, "softmax input")?;
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            let valid = if causal { i + 1 } else { q };
            kernels::softmax_row(&x[i * q..(i + 1) * q], valid, &mut out[i * q..(i + 1) * q]);
        }
        let ng = self.ng(a);
        self.finish(self.dims(a).to_vec(), out, Op::Softmax(a), ng, "softmax")
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (eps 1e-5).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (p, q) = self.rc(x);
        if self.value(gamma).numel() != q || self.value(beta).numel() != q {
            return Err(Error::shape("layer_norm", self.dims(x), self.dims(gamma)));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; p * q];
        let mut inv_std = vec![0.0; p];
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            let row = &xd[i * q..(i + 1) * q];
            let mean = row.iter().sum::<f64>() / q as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / q as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..q {
                let h = (row[j] - mean) * is;
                xhat[i * q + j] = h;
                out[i * q + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.finish(self.dims(x).to_vec(), out, op, ng, "layer_norm")
    }

    /// Row gather from an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.rc(table);
        if ids.is_empty() {
            return Err(Error::shape("gather", self.dims(table), &[0]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("gather", self.dims(table), &[bad]));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.finish(vec![ids.len(), d], out, op, ng, "gather")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let q = self.rc(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if c != q {
                return Err(Error::shape(
                    "concat_rows",
                    self.dims(parts[0]),
                    self.dims(p),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.finish(
            vec![rows, q],
            out,
            Op::ConcatRows(parts.to_vec()),
            ng,
            "concat_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let p = self.rc(parts[0]).0;
        let mut total = 0;
        for &v in parts {
            let (r, c) = self.rc(v);
            if r != p {
                return Err(Error::shape(
                    "concat_cols",
                    self.dims(parts[0]),
                    self.dims(v),
                ));
            }
            total += c;
        }
        let mut out = vec![0.0; p * total];
        let mut off = 0;
        for &v in parts {
            let c = self.rc(v).1;
            let d = self.value(v).data();
            for i in 0..p {
                out[i * total + off..i * total + off + c].copy_from_slice(&d[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let ng = parts.iter().any(|&v| self.ng(v));
        self.finish(
            vec![p, total],
            out,
            Op::ConcatCols(parts.to_vec()),
            ng,
            "concat_cols",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (p, q) = self.rc(x);
        if len == 0 || start + len > p {
            return Err(Error::shape("slice_rows", self.dims(x), &[start, len]));
        }
        let out = self.value(x).data()[start * q..(start + len) * q].to_vec();
        let ng = self.ng(x);
        self.finish(
            vec![len, q],
            out,
            Op::SliceRows { x, start },
            ng,
            "slice_rows",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (p, q) = self.rc(x);
        if len == 0 || start + len > q {
            return Err(Error::shape("slice_cols", self.dims(x), &[start, len]));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(p * len);
        for i in 0..p {
            out.extend_from_slice(&d[i * q + start..i * q + start + len]);
        }
        let ng = self.ng(x);
        self.finish(
            vec![p, len],
            out,
            Op::SliceCols { x, start },
            ng,
            "slice_cols",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        let ng = self.ng(x);
        self.finish(vec![1], vec![s], Op::Sum(x), ng, "sum")
    }

    /// Mean next-token cross-entropy over the masked-in rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (l, v) = self.rc(logits);
        if targets.len() != l || mask.len() != l {
            return Err(Error::shape(
                "cross_entropy",
                self.dims(logits),
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch(
                "no masked-in target positions".into(),
            ));
        }
        if let Some((&t, _)) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= v) {
            return Err(Error::shape("cross_entropy", self.dims(logits), &[t]));
        }
        let x = self.value(logits).data();
        check_finite(x, "cross_entropy input")?;
        let mut probs = vec![0.0; l * v];
        let mut total = 0.0;
        for i in 0..l {
            if !mask[i] {
                continue;
            }
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[targets[i]];
            for j in 0..v {
                probs[i * v + j] = (row[j] - log_z).exp();
            }
        }
        let loss = total / count as f64;
        let ng = self.ng(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        self.finish(vec![1], vec![loss], op, ng, "cross_entropy")
    }

    /// Reverse sweep from the scalar `loss`, seeded with `seed`. Returns the
    /// gradient of every trainable parameter loaded into this graph (zeros
    /// for parameters the loss does not depend on).
    pub fn backward(&mut self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; re-run forward first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.dims(loss), &[1]));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }

        let mut by_param = BTreeMap::new();
        for (&id, &v) in &self.params {
            if !self.nodes[v.0].needs_grad {
                continue;
            }
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]);
            by_param.insert(id, g);
        }
        Ok(Gradients { by_param })
    }

    /// Gradient with respect to a free `input` node after backward; used by
    /// tests on raw ops.
    pub fn input_grad(&mut self, loss: Var, input: Var) -> Result<Vec<f64>> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; re-run forward first".into(),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (input.0 + 1..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(grads[input.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[input.0].value.numel()]))
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].needs_grad;

        // Lazily allocated accumulation buffer for input `v`.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }

        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (p, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let q = nodes[b.0].value.cols();
                if wants(a) {
                    // dA = dC · Bᵀ
                    kernels::matmul_bt_acc(slot(grads, nodes, a), g, val(b), p, q, k);
                }
                if wants(b) {
                    // dB = Aᵀ · dC
                    kernels::matmul_at_acc(slot(grads, nodes, b), val(a), g, p, k, q);
                }
            }
            &Op::MatMulBt(a, b) => {
                let (p, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let q = nodes[b.0].value.rows();
                if wants(a) {
                    // dA = dC · B
                    kernels::matmul_acc(slot(grads, nodes, a), g, val(b), p, q, k);
                }
                if wants(b) {
                    // dB = dCᵀ · A
                    kernels::matmul_at_acc(slot(grads, nodes, b), g, val(a), p, q, k);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        acc(slot(grads, nodes, v), g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    acc(slot(grads, nodes, a), g);
                }
                if wants(b) {
                    for (o, &x) in slot(grads, nodes, b).iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    for ((o, &x), &y) in slot(grads, nodes, a).iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if wants(b) {
                    let av = val(a);
                    for ((o, &x), &y) in slot(grads, nodes, b).iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            &Op::AddRow(a, b) => {
                if wants(a) {
                    acc(slot(grads, nodes, a), g);
                }
                if wants(b) {
                    let q = nodes[b.0].value.numel();
                    let gb = slot(grads, nodes, b);
                    for row in g.chunks(q) {
                        acc(gb, row);
                    }
                }
            }
            &Op::Scale(a, c) => {
                for (o, &x) in slot(grads, nodes, a).iter_mut().zip(g) {
                    *o += c * x;
                }
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                for ((o, &x), &s) in slot(grads, nodes, a).iter_mut().zip(g).zip(y) {
                    *o += x * s * (1.0 - s);
                }
            }
            &Op::Gelu(a) => {
                let xv = val(a);
                for ((o, &x), &z) in slot(grads, nodes, a).iter_mut().zip(g).zip(xv) {
                    *o += x * kernels::gelu_grad(z);
                }
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let q = node.value.cols();
                let ga = slot(grads, nodes, a);
                for ((orow, grow), yrow) in ga.chunks_mut(q).zip(g.chunks(q)).zip(y.chunks(q)) {
                    let s = kernels::dot(grow, yrow);
                    for ((o, &gy), &yy) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += yy * (gy - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let q = node.value.cols();
                let gam = val(*gamma);
                if wants(*gamma) {
                    let gg = slot(grads, nodes, *gamma);
                    for (grow, hrow) in g.chunks(q).zip(xhat.chunks(q)) {
                        for j in 0..q {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, nodes, *beta);
                    for grow in g.chunks(q) {
                        acc(gb, grow);
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    let n = q as f64;
                    let mut dh = vec![0.0; q];
                    for (i, (grow, hrow)) in g.chunks(q).zip(xhat.chunks(q)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..q {
                            dh[j] = grow[j] * gam[j];
                            s1 += dh[j];
                            s2 += dh[j] * hrow[j];
                        }
                        let is = inv_std[i];
                        for j in 0..q {
                            gx[i * q + j] += is / n * (n * dh[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                let gt = slot(grads, nodes, *table);
                for (r, &id) in ids.iter().enumerate() {
                    acc(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if wants(p) {
                        acc(slot(grads, nodes, p), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    if wants(p) {
                        let gp = slot(grads, nodes, p);
                        for (i, row) in gp.chunks_mut(c).enumerate() {
                            acc(row, &g[i * total + off..i * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            &Op::SliceRows { x, start } => {
                let q = node.value.cols();
                let gx = slot(grads, nodes, x);
                acc(&mut gx[start * q..start * q + g.len()], g);
            }
            &Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let q = nodes[x.0].value.cols();
                let gx = slot(grads, nodes, x);
                for (i, grow) in g.chunks(len).enumerate() {
                    acc(&mut gx[i * q + start..i * q + start + len], grow);
                }
            }
            &Op::Sum(x) => {
                let s = g[0];
                for o in slot(grads, nodes, x).iter_mut() {
                    *o += s;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = nodes[logits.0].value.cols();
                let scale = g[0] / *count as f64;
                let gl = slot(grads, nodes, *logits);
                for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        gl[i * v + j] += scale * probs[i * v + j];
                    }
                    gl[i * v + t] -= scale;
                }
            }
        }
    }
}

fn acc(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
