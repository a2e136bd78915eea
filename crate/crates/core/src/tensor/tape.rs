use std::fmt;

use super::kernels::{self, gelu, gelu_grad};
use super::{Real, Tensor, TensorError};

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Index of a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// A user-supplied differentiable operation.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError>;
    /// Gradients for each input given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: Real },
    GatherSum { table: NodeId, lists: Vec<Vec<usize>> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<Real>, inv_std: Vec<Real> },
    Softmax(NodeId),
    Gelu(NodeId),
    Ln(NodeId),
    Clamp { x: NodeId, lo: Real, hi: Real },
    Sum(NodeId),
    Custom { op: Box<dyn CustomOp>, inputs: Vec<NodeId> },
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::GatherSum { .. } => "gather_sum",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Gelu(_) => "gelu",
            Op::Ln(_) => "ln",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    op: Op,
    /// `None` for parameter leaves; their value lives in the store.
    value: Option<Tensor>,
}

/// Records a forward computation so it can be differentiated.
///
/// Nodes are appended in evaluation order, which is a valid topological
/// order for the reverse sweep. Parameter leaves borrow from the store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Parameter gradients, dense and shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: Real) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }
}

impl fmt::Debug for Tape<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (_, Some(v)) => v,
            (Op::Param(p), None) => self.params.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, TensorError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                node: id,
                op: op.label(),
            });
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Ok(NodeId(id))
    }

    fn mismatch(&self, op: &'static str, detail: String) -> TensorError {
        TensorError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn require_rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let v = self.value(id);
        if v.shape().len() != 2 {
            return Err(self.mismatch(op, format!("expected rank-2 input, got {:?}", v.shape())));
        }
        Ok(dims2(v))
    }

    /// A constant input (receives no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, TensorError> {
        if value.shape().len() != 2 {
            return Err(self.mismatch("constant", format!("expected rank 2, got {:?}", value.shape())));
        }
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.require_rank2("matmul", a)?;
        let (k2, n) = self.require_rank2("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?)
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.require_rank2("matmul_bt", a)?;
        let (n, k2) = self.require_rank2("matmul_bt", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_bt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMulBt(a, b), Tensor::matrix(m, n, out)?)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.require_rank2("add", a)?;
        let sb = self.require_rank2("add", b)?;
        if sa != sb {
            return Err(self.mismatch("add", format!("{sa:?} + {sb:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), Tensor::matrix(sa.0, sa.1, data)?)
    }

    /// Adds the `[1, n]` row `r` to every row of `a[m, n]`.
    pub fn add_row(&mut self, a: NodeId, r: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.require_rank2("add_row", a)?;
        let sr = self.require_rank2("add_row", r)?;
        if sr != (1, n) {
            return Err(self.mismatch("add_row", format!("[{m},{n}] + row {sr:?}")));
        }
        let row = self.value(r).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(row).map(|(x, y)| x + y))
            .collect();
        self.push(Op::AddRow(a, r), Tensor::matrix(m, n, data)?)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.require_rank2("mul", a)?;
        let sb = self.require_rank2("mul", b)?;
        if sa != sb {
            return Err(self.mismatch("mul", format!("{sa:?} * {sb:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), Tensor::matrix(sa.0, sa.1, data)?)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: Real, shift: Real) -> Result<NodeId, TensorError> {
        let (m, n) = self.require_rank2("affine", x)?;
        let data = self.value(x).data().iter().map(|v| scale * v + shift).collect();
        self.push(Op::Affine { x, scale }, Tensor::matrix(m, n, data)?)
    }

    pub fn scale(&mut self, x: NodeId, scale: Real) -> Result<NodeId, TensorError> {
        self.affine(x, scale, 0.0)
    }

    /// Row `i` of the output is the sum of `table` rows listed in `lists[i]`;
    /// an empty list yields a zero row. A single-element list is a plain
    /// embedding lookup.
    pub fn gather_sum(&mut self, table: NodeId, lists: Vec<Vec<usize>>) -> Result<NodeId, TensorError> {
        let (v, d) = self.require_rank2("gather_sum", table)?;
        let t = self.value(table).data();
        let mut out = vec![0.0; lists.len() * d];
        for (i, list) in lists.iter().enumerate() {
            let dst = &mut out[i * d..(i + 1) * d];
            for &idx in list {
                if idx >= v {
                    return Err(TensorError::IndexOutOfRange {
                        node: self.nodes.len(),
                        op: "gather_sum",
                        index: idx,
                        bound: v,
                    });
                }
                for (o, s) in dst.iter_mut().zip(&t[idx * d..(idx + 1) * d]) {
                    *o += s;
                }
            }
        }
        let rows = lists.len();
        self.push(Op::GatherSum { table, lists }, Tensor::matrix(rows, d, out)?)
    }

    /// Plain row lookup.
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        self.gather_sum(table, indices.iter().map(|&i| vec![i]).collect())
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (m, n) = self.require_rank2("slice_cols", x)?;
        if start + len > n {
            return Err(self.mismatch("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        self.push(Op::SliceCols { x, start }, Tensor::matrix(m, len, data)?)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(self.mismatch("concat_cols", "no inputs".into()));
        }
        let mut m = None;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.require_rank2("concat_cols", p)?;
            if *m.get_or_insert(r) != r {
                return Err(self.mismatch("concat_cols", format!("row counts differ: {m:?} vs {r}")));
            }
            total += c;
        }
        let m = m.unwrap_or(0);
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(m, total, data)?)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(self.mismatch("concat_rows", "no inputs".into()));
        }
        let mut n = None;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.require_rank2("concat_rows", p)?;
            if *n.get_or_insert(c) != c {
                return Err(self.mismatch("concat_rows", format!("col counts differ: {n:?} vs {c}")));
            }
            rows += r;
        }
        let n = n.unwrap_or(0);
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::matrix(rows, n, data)?)
    }

    /// Row-wise layer normalization with `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: Real) -> Result<NodeId, TensorError> {
        let (m, n) = self.require_rank2("layer_norm", x)?;
        for p in [gain, bias] {
            let s = self.require_rank2("layer_norm", p)?;
            if s != (1, n) {
                return Err(self.mismatch("layer_norm", format!("affine shape {s:?}, expected [1,{n}]")));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for (i, row) in self.value(x).data().chunks(n).enumerate() {
            let mean = row.iter().sum::<Real>() / n as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            Tensor::matrix(m, n, out)?,
        )
    }

    /// Softmax along each row.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.require_rank2("softmax", x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        self.push(Op::Softmax(x), Tensor::matrix(m, n, data)?)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.require_rank2("gelu", x)?;
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        self.push(Op::Gelu(x), Tensor::matrix(m, n, data)?)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.require_rank2("ln", x)?;
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        self.push(Op::Ln(x), Tensor::matrix(m, n, data)?)
    }

    /// Elementwise clip into `[lo, hi]`; the gradient is zero where clipping is active.
    pub fn clamp(&mut self, x: NodeId, lo: Real, hi: Real) -> Result<NodeId, TensorError> {
        let (m, n) = self.require_rank2("clamp", x)?;
        let data = self.value(x).data().iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(Op::Clamp { x, lo, hi }, Tensor::matrix(m, n, data)?)
    }

    /// Sum of all elements, as a `[1, 1]` scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.require_rank2("sum", x)?;
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        let out = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
            op.forward(&vals)?
        };
        self.push(
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            out,
        )
    }

    /// Reverse sweep from a scalar `loss`. Parameters not reachable from the
    /// loss receive zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse sweep seeded with `seed` instead of one.
    pub fn backward_scaled(&self, loss: NodeId, seed: Real) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut param_grads = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), seed));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out_val = self.value(NodeId(idx));
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => {
                    for (a, b) in param_grads.grads[p.0].data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims2(self.value(*a));
                    let n = self.value(*b).cols();
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_bt_acc(g.data(), self.value(*b).data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_at_acc(self.value(*a).data(), g.data(), &mut gb, m, k, n);
                    accumulate(&mut grads, *a, vec![m, k], ga);
                    accumulate(&mut grads, *b, vec![k, n], gb);
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = dims2(self.value(*a));
                    let n = self.value(*b).rows();
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_acc(g.data(), self.value(*b).data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; n * k];
                    kernels::matmul_at_acc(g.data(), self.value(*a).data(), &mut gb, m, n, k);
                    accumulate(&mut grads, *a, vec![m, k], ga);
                    accumulate(&mut grads, *b, vec![n, k], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.shape().to_vec(), g.data().to_vec());
                    accumulate(&mut grads, *b, g.shape().to_vec(), g.into_data());
                }
                Op::AddRow(a, r) => {
                    let n = g.cols();
                    let mut gr = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, v) in gr.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *r, vec![1, n], gr);
                    accumulate(&mut grads, *a, g.shape().to_vec(), g.into_data());
                }
                Op::Mul(a, b) => {
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    let ga = g.data().iter().zip(vb).map(|(x, y)| x * y).collect();
                    let gb = g.data().iter().zip(va).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, g.shape().to_vec(), ga);
                    accumulate(&mut grads, *b, g.shape().to_vec(), gb);
                }
                Op::Affine { x, scale, .. } => {
                    let gx = g.data().iter().map(|v| v * scale).collect();
                    accumulate(&mut grads, *x, g.shape().to_vec(), gx);
                }
                Op::GatherSum { table, lists } => {
                    let tv = self.value(*table);
                    let (v, d) = dims2(tv);
                    let mut gt = vec![0.0; v * d];
                    for (i, list) in lists.iter().enumerate() {
                        let src = &g.data()[i * d..(i + 1) * d];
                        for &idx in list {
                            for (o, s) in gt[idx * d..(idx + 1) * d].iter_mut().zip(src) {
                                *o += s;
                            }
                        }
                    }
                    accumulate(&mut grads, *table, vec![v, d], gt);
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = dims2(self.value(*x));
                    let len = g.cols();
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        gx[i * n + start..i * n + start + len].copy_from_slice(g.row_slice(i));
                    }
                    accumulate(&mut grads, *x, vec![m, n], gx);
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut gp = Vec::with_capacity(m * c);
                        for i in 0..m {
                            gp.extend_from_slice(&g.row_slice(i)[offset..offset + c]);
                        }
                        accumulate(&mut grads, p, vec![m, c], gp);
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let n = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        let gp = g.data()[offset * n..(offset + r) * n].to_vec();
                        accumulate(&mut grads, p, vec![r, n], gp);
                        offset += r;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (m, n) = dims2(out_val);
                    let gv = self.value(*gain).data();
                    let mut gx = vec![0.0; m * n];
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        let dy = g.row_slice(i);
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..n {
                            gg[j] += dy[j] * xh[j];
                            gb[j] += dy[j];
                            let dxh = dy[j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        let nf = n as Real;
                        for j in 0..n {
                            let dxh = dy[j] * gv[j];
                            gx[i * n + j] = inv_std[i] / nf * (nf * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                    accumulate(&mut grads, *x, vec![m, n], gx);
                    accumulate(&mut grads, *gain, vec![1, n], gg);
                    accumulate(&mut grads, *bias, vec![1, n], gb);
                }
                Op::Softmax(x) => {
                    let n = out_val.cols();
                    let mut gx = vec![0.0; out_val.len()];
                    for (i, (y, dy)) in out_val.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                        let dotp: Real = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] = y[j] * (dy[j] - dotp);
                        }
                    }
                    accumulate(&mut grads, *x, out_val.shape().to_vec(), gx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let gx = g.data().iter().zip(xv).map(|(d, &v)| d * gelu_grad(v)).collect();
                    accumulate(&mut grads, *x, g.shape().to_vec(), gx);
                }
                Op::Ln(x) => {
                    let xv = self.value(*x).data();
                    let gx = g.data().iter().zip(xv).map(|(d, v)| d / v).collect();
                    accumulate(&mut grads, *x, g.shape().to_vec(), gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.value(*x).data();
                    let gx = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(d, v)| if v < lo || v > hi { 0.0 } else { *d })
                        .collect();
                    accumulate(&mut grads, *x, g.shape().to_vec(), gx);
                }
                Op::Sum(x) => {
                    let s = self.value(*x).shape().to_vec();
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, s, vec![g.item(); n]);
                }
                Op::Custom { op, inputs } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                    let gs = op.backward(&vals, out_val, &g);
                    for (&inp, gi) in inputs.iter().zip(gs) {
                        let shape = gi.shape().to_vec();
                        accumulate(&mut grads, inp, shape, gi.into_data());
                    }
                }
            }
        }
        Ok(param_grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: Vec<usize>, data: Vec<Real>) {
    match &mut grads[id.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor { shape, data });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_leaves_input_unchanged() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.25, 7.0, -1.0]).unwrap();
        let xn = tape.constant(x.clone()).unwrap();
        let y = tape.matmul(eye, xn).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::row(vec![3.0; 4])).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn layer_norm_of_two_values() {
        let mut store = ParamStore::new();
        let g = store.add("g", Tensor::row(vec![1.0, 1.0]));
        let b = store.add("b", Tensor::row(vec![0.0, 0.0]));
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::row(vec![1.0, 3.0])).unwrap();
        let (gn, bn) = (tape.param(g), tape.param(b));
        let y = tape.layer_norm(x, gn, bn, 1e-5).unwrap();
        // mean 2, population variance 1
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let out = tape.value(y).data();
        assert!((out[0] + expect).abs() < 1e-12);
        assert!((out[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn linear_map_gradient_rows_equal_input() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let mut tape = Tape::new(&store);
        let wn = tape.param(w);
        let x = tape.constant(Tensor::matrix(2, 1, vec![2.0, -1.0]).unwrap()).unwrap();
        let y = tape.matmul(wn, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[2.0, -1.0, 2.0, -1.0, 2.0, -1.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::row(vec![1.0, 2.0]));
        let unused = store.add("unused", Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let mut tape = Tape::new(&store);
        let u = tape.param(used);
        let loss = tape.sum(u).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused), &Tensor::zeros(vec![2, 2]));
        assert_eq!(grads.get(used).data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_reports_node() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::row(vec![0.0, 1.0])).unwrap();
        assert!(matches!(tape.ln(x), Err(TensorError::NonFinite { op: "ln", .. })));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::row(vec![0.0, 1.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn masked_softmax_entries_vanish() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::row(vec![0.3, -0.2, 1.1])).unwrap();
        let m = tape.constant(Tensor::row(vec![0.0, super::super::MASK_VALUE, 0.0])).unwrap();
        let s = tape.add(x, m).unwrap();
        let p = tape.softmax(s).unwrap();
        assert!(tape.value(p).data()[1] < 1e-30);
    }
}
