use std::collections::HashMap;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::mesh::SparseRows;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A sparse matrix together with its transpose, applied block-diagonally
/// over a batch of stacked feature matrices.
#[derive(Debug)]
pub struct SparseTransfer {
    fwd: SparseRows,
    adj: SparseRows,
}

impl SparseTransfer {
    pub fn new(matrix: SparseRows) -> Arc<Self> {
        let adj = matrix.transpose();
        Arc::new(SparseTransfer { fwd: matrix, adj })
    }

    pub fn matrix(&self) -> &SparseRows {
        &self.fwd
    }

    fn pick(&self, transposed: bool) -> &SparseRows {
        if transposed {
            &self.adj
        } else {
            &self.fwd
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Const,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    MatMul(NodeId, NodeId, bool, bool),
    /// `r x c` plus a `1 x c` row broadcast over rows.
    AddRow(NodeId, NodeId),
    /// Column sums: `r x c -> 1 x c`.
    SumRows(NodeId),
    BroadcastRows(NodeId, usize),
    /// Row sums: `r x c -> r x 1`.
    RowSums(NodeId),
    BroadcastCols(NodeId, usize),
    SumAll(NodeId),
    BroadcastScalar(NodeId, usize, usize),
    /// Output row `m` concatenates input rows `idx[m*group .. (m+1)*group]`.
    Gather(NodeId, Arc<Vec<usize>>, usize),
    /// Adjoint of `Gather`, producing `rows` output rows.
    ScatterAdd(NodeId, Arc<Vec<usize>>, usize),
    SparseMatMul(Arc<SparseTransfer>, NodeId, usize, bool),
    Reshape(NodeId, usize, usize),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    PadCols(NodeId, usize),
    LeakyRelu(NodeId, f64),
    /// Local slope of the leaky rectifier; treated as piecewise constant.
    LeakySlope(NodeId, f64),
    Tanh(NodeId),
    Abs(NodeId),
    Sign(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Input(_) | Const | Param => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b, _, _) | AddRow(a, b) | ConcatCols(a, b) => vec![a, b],
            Scale(a, _)
            | AddConst(a, _)
            | SumRows(a)
            | BroadcastRows(a, _)
            | RowSums(a)
            | BroadcastCols(a, _)
            | SumAll(a)
            | BroadcastScalar(a, _, _)
            | Gather(a, _, _)
            | ScatterAdd(a, _, _)
            | SparseMatMul(_, a, _, _)
            | Reshape(a, _, _)
            | SliceCols(a, _, _)
            | PadCols(a, _)
            | LeakyRelu(a, _)
            | LeakySlope(a, _)
            | Tanh(a)
            | Abs(a)
            | Sign(a)
            | Sqrt(a)
            | Recip(a) => vec![a],
        }
    }
}

struct Node {
    op: Op,
    shape: [usize; 2],
    value: Option<Tensor>,
}

/// Computation graph. Nodes are evaluated eagerly whenever all their inputs
/// carry values; graphs containing unbound [`Graph::input`] placeholders are
/// evaluated later through [`Graph::evaluate`].
///
/// Gradients are built as ordinary nodes, so they can be differentiated again.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].shape
    }

    /// Forward value of a node; fails for nodes depending on unbound inputs.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes[id.0]
            .value
            .as_ref()
            .ok_or_else(|| Error::Graph(format!("node {} depends on an unbound input", id.0)))
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id)?;
        if v.len() != 1 {
            return Err(shape_err(format!("expected a scalar, node has shape {:?}", v.shape())));
        }
        Ok(v.item())
    }

    fn push(&mut self, op: Op, shape: [usize; 2]) -> NodeId {
        let ready = op.inputs().iter().all(|i| self.nodes[i.0].value.is_some());
        let value = match op {
            Op::Input(_) | Op::Const | Op::Param => None,
            _ if ready => Some(self.compute(&op, shape, |i| self.nodes[i.0].value.as_ref().unwrap())),
            _ => None,
        };
        self.nodes.push(Node { op, shape, value });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, op: Op, t: Tensor) -> NodeId {
        let shape = t.shape();
        self.nodes.push(Node {
            op,
            shape,
            value: Some(t),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Unbound placeholder, supplied later through [`Graph::evaluate`].
    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input(name.to_string()),
            shape: [rows, cols],
            value: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(Op::Const, t)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.leaf(Op::Param, t)
    }

    /// Same as [`Graph::param`]; reads better for inputs we differentiate
    /// with respect to.
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.param(t)
    }

    /// Copy of `a`'s value that gradients do not flow through.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a)?.clone();
        Ok(self.constant(v))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<[usize; 2]> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scale(&mut self, a: NodeId, f: f64) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Scale(a, f), s)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a);
        self.push(Op::AddConst(a, c), s)
    }

    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let [ar, ac] = self.shape(a);
        let [br, bc] = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(format!("matmul inner dimensions {k} vs {k2}")));
        }
        Ok(self.push(Op::MatMul(a, b, ta, tb), [m, n]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if self.shape(row) != [1, c] {
            return Err(shape_err(format!("row broadcast of {:?} onto {r}x{c}", self.shape(row))));
        }
        Ok(self.push(Op::AddRow(a, row), [r, c]))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let [_, c] = self.shape(a);
        self.push(Op::SumRows(a), [1, c])
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if r != 1 {
            return Err(shape_err(format!("broadcast_rows needs one row, got {r}")));
        }
        Ok(self.push(Op::BroadcastRows(a, rows), [rows, c]))
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let [r, _] = self.shape(a);
        self.push(Op::RowSums(a), [r, 1])
    }

    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if c != 1 {
            return Err(shape_err(format!("broadcast_cols needs one column, got {c}")));
        }
        Ok(self.push(Op::BroadcastCols(a, cols), [r, cols]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), [1, 1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let [r, c] = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (r * c).max(1) as f64)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if self.shape(a) != [1, 1] {
            return Err(shape_err(format!("broadcast_scalar of {:?}", self.shape(a))));
        }
        Ok(self.push(Op::BroadcastScalar(a, rows, cols), [rows, cols]))
    }

    pub fn gather(&mut self, a: NodeId, idx: Arc<Vec<usize>>, group: usize) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if group == 0 || idx.len() % group != 0 {
            return Err(shape_err(format!("{} gather indices in groups of {group}", idx.len())));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err(format!("gather index {bad} out of range for {r} rows")));
        }
        let out = [idx.len() / group, group * c];
        Ok(self.push(Op::Gather(a, idx, group), out))
    }

    fn scatter_add(&mut self, a: NodeId, idx: Arc<Vec<usize>>, group: usize, rows: usize) -> NodeId {
        let [_, c] = self.shape(a);
        self.push(Op::ScatterAdd(a, idx, group), [rows, c / group])
    }

    /// Applies `m` to each of `batch` stacked blocks of `a`.
    pub fn sparse_matmul(&mut self, m: &Arc<SparseTransfer>, a: NodeId, batch: usize) -> Result<NodeId> {
        self.sparse_matmul_t(m, a, batch, false)
    }

    fn sparse_matmul_t(&mut self, m: &Arc<SparseTransfer>, a: NodeId, batch: usize, transposed: bool) -> Result<NodeId> {
        let s = m.pick(transposed);
        let [r, c] = self.shape(a);
        if r != batch * s.col_count() {
            return Err(shape_err(format!(
                "sparse matmul expects {batch} blocks of {} rows, got {r}",
                s.col_count()
            )));
        }
        Ok(self.push(Op::SparseMatMul(m.clone(), a, batch, transposed), [batch * s.row_count(), c]))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if r * c != rows * cols {
            return Err(shape_err(format!("cannot reshape {r}x{c} into {rows}x{cols}")));
        }
        Ok(self.push(Op::Reshape(a, rows, cols), [rows, cols]))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [ra, ca] = self.shape(a);
        let [rb, cb] = self.shape(b);
        if ra != rb {
            return Err(shape_err(format!("concat of {ra} and {rb} rows")));
        }
        Ok(self.push(Op::ConcatCols(a, b), [ra, ca + cb]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if start + len > c {
            return Err(shape_err(format!("column slice {start}+{len} of {c}")));
        }
        Ok(self.push(Op::SliceCols(a, start, len), [r, len]))
    }

    fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> NodeId {
        let [r, _] = self.shape(a);
        self.push(Op::PadCols(a, start), [r, total])
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let s = self.shape(a);
        self.push(Op::LeakyRelu(a, slope), s)
    }

    fn leaky_slope(&mut self, a: NodeId, slope: f64) -> NodeId {
        let s = self.shape(a);
        self.push(Op::LeakySlope(a, slope), s)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Tanh(a), s)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Abs(a), s)
    }

    fn sign(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Sign(a), s)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Sqrt(a), s)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Recip(a), s)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mul(a, a), self.shape(a))
    }

    /// Sum of absolute values (subgradient 0 at 0).
    pub fn l1_norm(&mut self, a: NodeId) -> NodeId {
        let b = self.abs(a);
        self.sum(b)
    }

    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        let sq = self.square(a);
        let s = self.sum(sq);
        self.sqrt(s)
    }

    fn compute<'a>(&self, op: &Op, shape: [usize; 2], val: impl Fn(NodeId) -> &'a Tensor) -> Tensor {
        use Op::*;
        let [rows, cols] = shape;
        match op {
            Input(_) | Const | Param => unreachable!("leaves carry their own values"),
            Add(a, b) => val(*a).zip(val(*b), |x, y| x + y),
            Sub(a, b) => val(*a).zip(val(*b), |x, y| x - y),
            Mul(a, b) => val(*a).zip(val(*b), |x, y| x * y),
            Scale(a, f) => val(*a).map(|x| x * f),
            AddConst(a, c) => val(*a).map(|x| x + c),
            MatMul(a, b, ta, tb) => Tensor::matmul(val(*a), *ta, val(*b), *tb),
            AddRow(a, b) => {
                let mut out = val(*a).clone();
                let row = val(*b).data();
                for chunk in out.data_mut().chunks_exact_mut(cols) {
                    for (x, y) in chunk.iter_mut().zip(row) {
                        *x += y;
                    }
                }
                out
            }
            SumRows(a) => {
                let mut out = vec![0.0; cols];
                for chunk in val(*a).data().chunks_exact(cols) {
                    for (o, x) in out.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                Tensor::row(out)
            }
            BroadcastRows(a, n) => {
                let row = val(*a).data();
                Tensor::new(*n, cols, row.repeat(*n)).unwrap()
            }
            RowSums(a) => {
                let v = val(*a);
                let data = v.data().chunks_exact(v.cols().max(1)).map(|r| r.iter().sum()).collect::<Vec<f64>>();
                let data = if v.cols() == 0 { vec![0.0; rows] } else { data };
                Tensor::new(rows, 1, data).unwrap()
            }
            BroadcastCols(a, n) => {
                let data = val(*a).data().iter().flat_map(|&x| std::iter::repeat_n(x, *n)).collect();
                Tensor::new(rows, *n, data).unwrap()
            }
            SumAll(a) => Tensor::scalar(val(*a).data().iter().sum()),
            BroadcastScalar(a, r, c) => Tensor::full(*r, *c, val(*a).item()),
            Gather(a, idx, _) => {
                let v = val(*a);
                let c = v.cols();
                let mut data = Vec::with_capacity(rows * cols);
                for &i in idx.iter() {
                    data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
                }
                Tensor::new(rows, cols, data).unwrap()
            }
            ScatterAdd(a, idx, _) => {
                let v = val(*a);
                let mut out = Tensor::zeros(rows, cols);
                let o = out.data_mut();
                for (j, &i) in idx.iter().enumerate() {
                    let src = &v.data()[j * cols..(j + 1) * cols];
                    for (d, s) in o[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                out
            }
            SparseMatMul(m, a, batch, transposed) => {
                let s = m.pick(*transposed);
                let v = val(*a);
                let block_in = s.col_count() * cols;
                let mut data = Vec::with_capacity(rows * cols);
                for b in 0..*batch {
                    data.extend(s.apply(&v.data()[b * block_in..(b + 1) * block_in], cols));
                }
                Tensor::new(rows, cols, data).unwrap()
            }
            Reshape(a, r, c) => val(*a).clone().reshaped(*r, *c).unwrap(),
            ConcatCols(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    data.extend_from_slice(va.row_slice(r));
                    data.extend_from_slice(vb.row_slice(r));
                }
                Tensor::new(rows, cols, data).unwrap()
            }
            SliceCols(a, start, len) => {
                let v = val(*a);
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    data.extend_from_slice(&v.row_slice(r)[*start..start + len]);
                }
                Tensor::new(rows, cols, data).unwrap()
            }
            PadCols(a, start) => {
                let v = val(*a);
                let mut out = Tensor::zeros(rows, cols);
                let w = v.cols();
                for r in 0..rows {
                    out.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(v.row_slice(r));
                }
                out
            }
            LeakyRelu(a, s) => val(*a).map(|x| if x > 0.0 { x } else { s * x }),
            LeakySlope(a, s) => val(*a).map(|x| if x > 0.0 { 1.0 } else { *s }),
            Tanh(a) => val(*a).map(f64::tanh),
            Abs(a) => val(*a).map(f64::abs),
            Sign(a) => val(*a).map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }),
            Sqrt(a) => val(*a).map(f64::sqrt),
            Recip(a) => val(*a).map(|x| 1.0 / x),
        }
    }

    /// Re-evaluates the whole graph with `bindings` for its placeholders and
    /// returns the values of `outputs`. Stored values are left untouched.
    pub fn evaluate(&self, bindings: &HashMap<String, Tensor>, outputs: &[NodeId]) -> Result<Vec<Tensor>> {
        let last = outputs.iter().map(|o| o.0).max().map_or(0, |m| m + 1);
        let mut vals: Vec<Option<Tensor>> = Vec::with_capacity(last);
        for node in &self.nodes[..last] {
            let v = match &node.op {
                Op::Input(name) => {
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| Error::Graph(format!("input `{name}` is not bound")))?;
                    if t.shape() != node.shape {
                        return Err(shape_err(format!(
                            "input `{name}` bound to {:?}, expected {:?}",
                            t.shape(),
                            node.shape
                        )));
                    }
                    t.clone()
                }
                Op::Const | Op::Param => node.value.clone().unwrap(),
                op => self.compute(op, node.shape, |i| vals[i.0].as_ref().unwrap()),
            };
            vals.push(Some(v));
        }
        Ok(outputs.iter().map(|o| vals[o.0].clone().unwrap()).collect())
    }

    /// Reverse-mode gradients of the scalar `output` with respect to `wrt`,
    /// returned as graph nodes.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.shape(output) != [1, 1] {
            return Err(Error::Graph(format!(
                "gradient of a non-scalar node of shape {:?}",
                self.shape(output)
            )));
        }
        let end = output.0 + 1;
        let mut needed = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needed[w.0] = true;
            }
        }
        for i in 0..end {
            if !needed[i] && self.nodes[i].op.inputs().iter().any(|j| needed[j.0]) {
                needed[i] = true;
            }
        }
        let live = self.ancestors(output);
        for w in wrt {
            if w.0 >= end || !live[w.0] || !needed[output.0] {
                return Err(Error::Graph(format!("node {} does not influence the output", w.0)));
            }
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; end];
        let one = self.constant(Tensor::scalar(1.0));
        adj[output.0] = Some(one);
        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !needed[i] || !live[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contributions = self.backward(&op, NodeId(i), g, &needed)?;
            for (j, c) in contributions {
                adj[j.0] = Some(match adj[j.0] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }
        wrt.iter()
            .map(|w| adj[w.0].ok_or_else(|| Error::Graph(format!("node {} does not influence the output", w.0))))
            .collect()
    }

    /// Like [`Graph::grad`], but parameters that do not influence `output`
    /// get a zero gradient instead of an error.
    pub fn grad_or_zeros(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let live = self.ancestors(output);
        let used: Vec<NodeId> = wrt.iter().copied().filter(|w| self.depends(&live, *w)).collect();
        let grads = if used.is_empty() { vec![] } else { self.grad(output, &used)? };
        let mut it = grads.into_iter();
        Ok(wrt
            .iter()
            .map(|&w| {
                if self.depends(&live, w) {
                    it.next().unwrap()
                } else {
                    let [r, c] = self.shape(w);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    fn ancestors(&self, output: NodeId) -> Vec<bool> {
        let mut live = vec![false; output.0 + 1];
        live[output.0] = true;
        for i in (0..=output.0).rev() {
            if live[i] {
                for j in self.nodes[i].op.inputs() {
                    live[j.0] = true;
                }
            }
        }
        live
    }

    fn depends(&self, live: &[bool], w: NodeId) -> bool {
        w.0 < live.len() && live[w.0]
    }

    fn backward(&mut self, op: &Op, out: NodeId, g: NodeId, needed: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
        use Op::*;
        let need = |n: &NodeId| needed[n.0];
        let mut c = Vec::new();
        match *op {
            Input(_) | Const | Param => {}
            Add(a, b) => {
                if need(&a) {
                    c.push((a, g));
                }
                if need(&b) {
                    c.push((b, g));
                }
            }
            Sub(a, b) => {
                if need(&a) {
                    c.push((a, g));
                }
                if need(&b) {
                    let n = self.scale(g, -1.0);
                    c.push((b, n));
                }
            }
            Mul(a, b) => {
                if need(&a) {
                    let d = self.mul(g, b)?;
                    c.push((a, d));
                }
                if need(&b) {
                    let d = self.mul(g, a)?;
                    c.push((b, d));
                }
            }
            Scale(a, f) => c.push((a, self.scale(g, f))),
            AddConst(a, _) => c.push((a, g)),
            MatMul(a, b, ta, tb) => {
                if need(&a) {
                    let d = match (ta, tb) {
                        (false, false) => self.matmul_t(g, false, b, true)?,
                        (false, true) => self.matmul_t(g, false, b, false)?,
                        (true, false) => self.matmul_t(b, false, g, true)?,
                        (true, true) => self.matmul_t(b, true, g, true)?,
                    };
                    c.push((a, d));
                }
                if need(&b) {
                    let d = match (ta, tb) {
                        (false, false) => self.matmul_t(a, true, g, false)?,
                        (false, true) => self.matmul_t(g, true, a, false)?,
                        (true, false) => self.matmul_t(a, false, g, false)?,
                        (true, true) => self.matmul_t(g, true, a, true)?,
                    };
                    c.push((b, d));
                }
            }
            AddRow(a, b) => {
                if need(&a) {
                    c.push((a, g));
                }
                if need(&b) {
                    c.push((b, self.sum_rows(g)));
                }
            }
            SumRows(a) => {
                let r = self.shape(a)[0];
                c.push((a, self.broadcast_rows(g, r)?));
            }
            BroadcastRows(a, _) => c.push((a, self.sum_rows(g))),
            RowSums(a) => {
                let k = self.shape(a)[1];
                c.push((a, self.broadcast_cols(g, k)?));
            }
            BroadcastCols(a, _) => c.push((a, self.row_sums(g))),
            SumAll(a) => {
                let [r, k] = self.shape(a);
                c.push((a, self.broadcast_scalar(g, r, k)?));
            }
            BroadcastScalar(a, _, _) => c.push((a, self.sum(g))),
            Gather(a, ref idx, group) => {
                let r = self.shape(a)[0];
                c.push((a, self.scatter_add(g, idx.clone(), group, r)));
            }
            ScatterAdd(a, ref idx, group) => c.push((a, self.gather(g, idx.clone(), group)?)),
            SparseMatMul(ref m, a, batch, t) => c.push((a, self.sparse_matmul_t(m, g, batch, !t)?)),
            Reshape(a, _, _) => {
                let [r, k] = self.shape(a);
                c.push((a, self.reshape(g, r, k)?));
            }
            ConcatCols(a, b) => {
                let ca = self.shape(a)[1];
                let cb = self.shape(b)[1];
                if need(&a) {
                    c.push((a, self.slice_cols(g, 0, ca)?));
                }
                if need(&b) {
                    c.push((b, self.slice_cols(g, ca, cb)?));
                }
            }
            SliceCols(a, start, _) => {
                let total = self.shape(a)[1];
                c.push((a, self.pad_cols(g, start, total)));
            }
            PadCols(a, start) => {
                let w = self.shape(a)[1];
                c.push((a, self.slice_cols(g, start, w)?));
            }
            LeakyRelu(a, s) => {
                let slope = self.leaky_slope(a, s);
                c.push((a, self.mul(g, slope)?));
            }
            LeakySlope(..) | Sign(_) => {}
            Tanh(a) => {
                let y2 = self.square(out);
                let neg = self.scale(y2, -1.0);
                let d = self.add_const(neg, 1.0);
                c.push((a, self.mul(g, d)?));
            }
            Abs(a) => {
                let s = self.sign(a);
                c.push((a, self.mul(g, s)?));
            }
            Sqrt(a) => {
                let r = self.recip(out);
                let h = self.scale(r, 0.5);
                c.push((a, self.mul(g, h)?));
            }
            Recip(a) => {
                let r2 = self.square(out);
                let n = self.scale(r2, -1.0);
                c.push((a, self.mul(g, n)?));
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn square_and_derivative() {
        let mut g = Graph::new();
        let x = g.variable(s(3.0));
        let y = g.square(x);
        assert_eq!(g.scalar(y).unwrap(), 9.0);
        let [dx] = g.grad(y, &[x]).unwrap()[..] else { panic!() };
        assert_eq!(g.scalar(dx).unwrap(), 6.0);
    }

    #[test]
    fn double_backprop_cubic() {
        // f = x^3, g = (f' - 1)^2, g'(2) = 2 (12 - 1) 6x = 264
        let mut gr = Graph::new();
        let x = gr.variable(s(2.0));
        let x2 = gr.square(x);
        let f = gr.mul(x2, x).unwrap();
        let df = gr.grad(f, &[x]).unwrap()[0];
        assert_eq!(gr.scalar(df).unwrap(), 12.0);
        let t = gr.add_const(df, -1.0);
        let pen = gr.square(t);
        let dpen = gr.grad(pen, &[x]).unwrap()[0];
        assert_eq!(gr.scalar(dpen).unwrap(), 264.0);
    }

    #[test]
    fn identity_gather_is_noop() {
        let mut g = Graph::new();
        let t = Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = g.constant(t.clone());
        let y = g.gather(x, Arc::new(vec![0, 1, 2]), 1).unwrap();
        assert_eq!(g.value(y).unwrap(), &t);
    }

    #[test]
    fn lazy_inputs_and_evaluate() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1);
        let y = g.square(x);
        assert!(g.value(y).is_err());
        let missing = g.evaluate(&HashMap::new(), &[y]);
        assert!(matches!(missing, Err(Error::Graph(_))));
        let b = HashMap::from([("x".to_string(), s(3.0))]);
        assert_eq!(g.evaluate(&b, &[y]).unwrap()[0].item(), 9.0);
        let wrong = HashMap::from([("x".to_string(), Tensor::zeros(2, 1))]);
        assert!(matches!(g.evaluate(&wrong, &[y]), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_errors() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(2, 1));
        assert!(g.grad(x, &[x]).is_err());
        let z = g.variable(s(1.0));
        let other = g.variable(s(2.0));
        let y = g.square(z);
        assert!(matches!(g.grad(y, &[other]), Err(Error::Graph(_))));
        let d = g.detach(z).unwrap();
        let y2 = g.square(d);
        assert!(g.grad(y2, &[z]).is_err());
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(vec![-2.0, 0.0, 3.0]));
        let n = g.l1_norm(x);
        assert_eq!(g.scalar(n).unwrap(), 5.0);
        let d = g.grad(n, &[x]).unwrap()[0];
        assert_eq!(g.value(d).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(3, 2));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        assert!(g.matmul(a, b).is_ok());
    }
}
