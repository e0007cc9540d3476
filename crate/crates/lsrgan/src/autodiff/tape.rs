//! Define-by-run computation tape.
//!
//! Every operation eagerly computes its values and appends a node. `grad`
//! replays the tape in reverse and emits each adjoint as a new tape node,
//! so gradients can be fed back into further tape operations and
//! differentiated again (needed for the input-gradient-norm penalty).
//!
//! ReLU and LeakyReLU masks are captured as constants during the backward
//! pass: their second derivative is treated as zero, which is exact away
//! from the kink set.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a tape node. Ids are topologically ordered by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

/// Guards row-norm backward against division by zero; small enough that
/// forward values are bit-exact for any norm above ~1e-8.
const NORM_EPS_SQ: f64 = 1e-24;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    SumAll(NodeId),
    BroadcastRows(NodeId),
    BroadcastCols(NodeId),
    BroadcastFull(NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    RowNorms(NodeId),
    Softmax(NodeId),
    SoftmaxXent(NodeId, Vec<usize>),
    SquaredError(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    PadCols(NodeId, usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the tape's differentiable leaves.
#[derive(Debug)]
pub struct GradMap {
    entries: Vec<(NodeId, Tensor)>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.entries.iter().find(|(k, _)| *k == id).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(NodeId, Tensor)> {
        self.entries.iter()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.rows, n.cols, n.values.clone()).expect("node shape is consistent")
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.rows == 1 && n.cols == 1 {
            Ok(n.values[0])
        } else {
            Err(Error::NonScalarOutput {
                rows: n.rows,
                cols: n.cols,
            })
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, values: Vec<f64>, rg: bool) -> NodeId {
        debug_assert_eq!(rows * cols, values.len());
        self.nodes.push(Node {
            op,
            rows,
            cols,
            values,
            requires_grad: rg,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    fn mismatch(&self, op: &'static str, ids: &[NodeId]) -> Error {
        let detail = ids
            .iter()
            .map(|id| {
                let (r, c) = self.shape(*id);
                format!("{}x{}", r, c)
            })
            .collect::<Vec<_>>()
            .join(" vs ");
        Error::ShapeMismatch { op, detail }
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        self.push(
            Op::Leaf,
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            requires_grad,
        )
    }

    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf, 1, 1, vec![v], false)
    }

    fn const_full(&mut self, rows: usize, cols: usize, v: f64) -> NodeId {
        self.push(Op::Leaf, rows, cols, vec![v; rows * cols], false)
    }

    fn zeros_like(&mut self, id: NodeId) -> NodeId {
        let (r, c) = self.shape(id);
        self.const_full(r, c, 0.0)
    }

    // ---- structural ops ----------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let mut out = vec![0.0; m * n];
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aval) in arow.iter().enumerate() {
                if aval == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += aval * brow[j];
                }
            }
        }
        let rg = self.rg2(a, b);
        Ok(self.push(Op::MatMul(a, b), m, n, out, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Transpose(a), n, m, out, rg)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(self.mismatch(name, &[a, b]));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg2(a, b);
        Ok(self.push(op, m, n, out, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise division. No zero guard; callers own the denominator.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise squared difference (a - b)^2.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(
            "squared_error",
            a,
            b,
            |x, y| (x - y) * (x - y),
            Op::SquaredError(a, b),
        )
    }

    /// Bias add: broadcasts a 1xN row over every row of an MxN matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(self.mismatch("add_row", &[a, row]));
        }
        let rv = self.nodes[row.0].values.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .chunks(n)
            .flat_map(|r| r.iter().zip(&rv).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg2(a, row);
        Ok(self.push(Op::AddRow(a, row), m, n, out, rg))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (_, n) = self.shape(a);
        let mut out = vec![0.0; n];
        for row in self.nodes[a.0].values.chunks(n) {
            for (acc, &v) in out.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::SumRows(a), 1, n, out, rg)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .chunks(n)
            .map(|r| r.iter().sum())
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::SumCols(a), m, 1, out, rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].values.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::SumAll(a), 1, 1, vec![total], rg)
    }

    pub fn broadcast_rows(&mut self, a: NodeId, m: usize) -> Result<NodeId> {
        let (r, n) = self.shape(a);
        if r != 1 {
            return Err(self.mismatch("broadcast_rows", &[a]));
        }
        let row = self.nodes[a.0].values.clone();
        let out: Vec<f64> = row.iter().cycle().take(m * n).copied().collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::BroadcastRows(a), m, n, out, rg))
    }

    pub fn broadcast_cols(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let (m, c) = self.shape(a);
        if c != 1 {
            return Err(self.mismatch("broadcast_cols", &[a]));
        }
        let col = self.nodes[a.0].values.clone();
        let mut out = Vec::with_capacity(m * n);
        for &v in &col {
            out.extend(std::iter::repeat_n(v, n));
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::BroadcastCols(a), m, n, out, rg))
    }

    pub fn broadcast_full(&mut self, a: NodeId, m: usize, n: usize) -> Result<NodeId> {
        if self.shape(a) != (1, 1) {
            return Err(self.mismatch("broadcast_full", &[a]));
        }
        let v = self.nodes[a.0].values[0];
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::BroadcastFull(a), m, n, vec![v; m * n], rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| x * c).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Scale(a, c), m, n, out, rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, na) = self.shape(a);
        let (mb, nb) = self.shape(b);
        if m != mb {
            return Err(self.mismatch("concat_cols", &[a, b]));
        }
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(&self.nodes[a.0].values[i * na..(i + 1) * na]);
            out.extend_from_slice(&self.nodes[b.0].values[i * nb..(i + 1) * nb]);
        }
        let rg = self.rg2(a, b);
        Ok(self.push(Op::ConcatCols(a, b), m, na + nb, out, rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("slice {}..{} of {} cols", start, start + len, n),
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.nodes[a.0].values[i * n + start..i * n + start + len]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SliceCols(a, start, len), m, len, out, rg))
    }

    pub fn pad_cols(&mut self, a: NodeId, left: usize, right: usize) -> NodeId {
        let (m, n) = self.shape(a);
        let total = left + n + right;
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            out[i * total + left..i * total + left + n]
                .copy_from_slice(&self.nodes[a.0].values[i * n..(i + 1) * n]);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::PadCols(a, left, right), m, total, out, rg)
    }

    // ---- nonlinearities ----------------------------------------------

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(op, m, n, out, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// max(0, x); same function as `relu`, named for penalty construction.
    pub fn hinge(&mut self, a: NodeId) -> NodeId {
        self.relu(a)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Per-row L2 norm of an MxN matrix, shape Mx1.
    pub fn row_norms(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .chunks(n)
            .map(|r| (r.iter().map(|v| v * v).sum::<f64>() + NORM_EPS_SQ).sqrt())
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::RowNorms(a), m, 1, out, rg)
    }

    /// Row-wise softmax with max-shift stabilization.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut out = Vec::with_capacity(m * n);
        for row in self.nodes[a.0].values.chunks(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&z| (z - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / denom));
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Softmax(a), m, n, out, rg)
    }

    /// Fused softmax cross-entropy. `labels` are 0-based class indices,
    /// one per row; output is the Mx1 column of per-sample losses.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (m, c) = self.shape(logits);
        if labels.len() != m {
            return Err(Error::ShapeMismatch {
                op: "softmax_xent",
                detail: format!("{} rows vs {} labels", m, labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "label index {} out of range for {} classes",
                bad, c
            )));
        }
        let mut out = Vec::with_capacity(m);
        for (row, &y) in self.nodes[logits.0].values.chunks(c).zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
            out.push(lse - row[y]);
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(Op::SoftmaxXent(logits, labels.to_vec()), m, 1, out, rg))
    }

    // ---- composites ----------------------------------------------------

    /// Column-wise mean: MxN -> 1xN.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (m, _) = self.shape(a);
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m as f64)
    }

    /// Mean of all entries: MxN -> 1x1.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (m * n) as f64)
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for &(w, id) in terms {
            if self.shape(id) != (1, 1) {
                return Err(self.mismatch("combine", &[id]));
            }
            let scaled = self.scale(id, w);
            acc = Some(match acc {
                None => scaled,
                Some(prev) => self.add(prev, scaled)?,
            });
        }
        Ok(acc.unwrap_or_else(|| self.scalar(0.0)))
    }

    // ---- reverse pass --------------------------------------------------

    /// Gradients of a scalar node with respect to `wrt`, returned as node ids
    /// so they can be fed into further tape operations. Nodes the output does
    /// not depend on get a zero gradient. Every `wrt` node must be marked
    /// `requires_grad`.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let adj = self.adjoints(output)?;
        Ok(wrt
            .iter()
            .map(|id| adj[id.0].unwrap_or_else(|| self.zeros_like(*id)))
            .collect())
    }

    /// Gradient values of a scalar with respect to every `requires_grad` leaf.
    pub fn backward(&mut self, output: NodeId) -> Result<GradMap> {
        let leaves: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad)
            .map(NodeId)
            .collect();
        let adj = self.adjoints(output)?;
        let entries = leaves
            .into_iter()
            .map(|id| {
                let t = match adj.get(id.0).copied().flatten() {
                    Some(g) => self.value_tensor(g),
                    None => {
                        let (r, c) = self.shape(id);
                        Tensor::zeros(r, c)
                    }
                };
                (id, t)
            })
            .collect();
        Ok(GradMap { entries })
    }

    /// Gradient of a scalar with respect to one `input` tensor, as a tape node
    /// that participates in further differentiation. Rejects inputs the output
    /// does not depend on.
    pub fn input_gradient(&mut self, output: NodeId, input: NodeId) -> Result<NodeId> {
        if !self.nodes[input.0].requires_grad {
            return Err(Error::NotAncestor);
        }
        if !self.reaches(output, input) {
            return Err(Error::NotAncestor);
        }
        let adj = self.adjoints(output)?;
        adj[input.0].ok_or(Error::NotAncestor)
    }

    /// True when `input` is an ancestor of `output` in the graph.
    fn reaches(&self, output: NodeId, input: NodeId) -> bool {
        if output == input {
            return true;
        }
        let mut mark = vec![false; output.0 + 1];
        mark[output.0] = true;
        for i in (input.0..=output.0).rev() {
            if !mark[i] {
                continue;
            }
            for dep in op_inputs(&self.nodes[i].op) {
                if dep == input {
                    return true;
                }
                mark[dep.0] = true;
            }
        }
        false
    }

    /// Reverse sweep from a scalar output. Adjoints are created as tape nodes;
    /// propagation into subtrees without differentiable leaves is skipped.
    fn adjoints(&mut self, output: NodeId) -> Result<Vec<Option<NodeId>>> {
        let (r, c) = self.shape(output);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarOutput { rows: r, cols: c });
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        let seed = self.scalar(1.0);
        adj[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(NodeId(i), &op, g, &mut adj)?;
        }
        Ok(adj)
    }

    fn accumulate(
        &mut self,
        adj: &mut [Option<NodeId>],
        target: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        adj[target.0] = Some(match adj[target.0] {
            None => contribution,
            Some(prev) => self.add(prev, contribution)?,
        });
        Ok(())
    }

    fn wants_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(
        &mut self,
        node: NodeId,
        op: &Op,
        g: NodeId,
        adj: &mut [Option<NodeId>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants_grad(a) {
                    let bt = self.transpose(b);
                    let da = self.matmul(g, bt)?;
                    self.accumulate(adj, a, da)?;
                }
                if self.wants_grad(b) {
                    let at = self.transpose(a);
                    let db = self.matmul(at, g)?;
                    self.accumulate(adj, b, db)?;
                }
            }
            Op::Transpose(a) => {
                if self.wants_grad(a) {
                    let da = self.transpose(g);
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants_grad(a) {
                    self.accumulate(adj, a, g)?;
                }
                if self.wants_grad(b) {
                    self.accumulate(adj, b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if self.wants_grad(a) {
                    self.accumulate(adj, a, g)?;
                }
                if self.wants_grad(b) {
                    let db = self.scale(g, -1.0);
                    self.accumulate(adj, b, db)?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants_grad(a) {
                    let da = self.mul(g, b)?;
                    self.accumulate(adj, a, da)?;
                }
                if self.wants_grad(b) {
                    let db = self.mul(g, a)?;
                    self.accumulate(adj, b, db)?;
                }
            }
            Op::Div(a, b) => {
                if self.wants_grad(a) {
                    let da = self.div(g, b)?;
                    self.accumulate(adj, a, da)?;
                }
                if self.wants_grad(b) {
                    let ga = self.mul(g, a)?;
                    let bb = self.mul(b, b)?;
                    let q = self.div(ga, bb)?;
                    let db = self.scale(q, -1.0);
                    self.accumulate(adj, b, db)?;
                }
            }
            Op::AddRow(a, row) => {
                if self.wants_grad(a) {
                    self.accumulate(adj, a, g)?;
                }
                if self.wants_grad(row) {
                    let dr = self.sum_rows(g);
                    self.accumulate(adj, row, dr)?;
                }
            }
            Op::SumRows(a) => {
                if self.wants_grad(a) {
                    let (m, _) = self.shape(a);
                    let da = self.broadcast_rows(g, m)?;
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::SumCols(a) => {
                if self.wants_grad(a) {
                    let (_, n) = self.shape(a);
                    let da = self.broadcast_cols(g, n)?;
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::SumAll(a) => {
                if self.wants_grad(a) {
                    let (m, n) = self.shape(a);
                    let da = self.broadcast_full(g, m, n)?;
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::BroadcastRows(a) => {
                if self.wants_grad(a) {
                    let da = self.sum_rows(g);
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::BroadcastCols(a) => {
                if self.wants_grad(a) {
                    let da = self.sum_cols(g);
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::BroadcastFull(a) => {
                if self.wants_grad(a) {
                    let da = self.sum_all(g);
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::Scale(a, c) => {
                if self.wants_grad(a) {
                    let da = self.scale(g, c);
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::Relu(a) => {
                if self.wants_grad(a) {
                    let mask = self.activation_mask(a, |x| if x > 0.0 { 1.0 } else { 0.0 });
                    let da = self.mul(g, mask)?;
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.wants_grad(a) {
                    let mask = self.activation_mask(a, |x| if x > 0.0 { 1.0 } else { slope });
                    let da = self.mul(g, mask)?;
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::Tanh(a) => {
                if self.wants_grad(a) {
                    let (m, n) = self.shape(a);
                    let y2 = self.mul(node, node)?;
                    let ones = self.const_full(m, n, 1.0);
                    let deriv = self.sub(ones, y2)?;
                    let da = self.mul(g, deriv)?;
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::RowNorms(a) => {
                if self.wants_grad(a) {
                    let (_, n) = self.shape(a);
                    let scaled = self.div(g, node)?;
                    let wide = self.broadcast_cols(scaled, n)?;
                    let da = self.mul(wide, a)?;
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::Softmax(a) => {
                if self.wants_grad(a) {
                    let (_, n) = self.shape(a);
                    let gy = self.mul(g, node)?;
                    let dot = self.sum_cols(gy);
                    let wide = self.broadcast_cols(dot, n)?;
                    let centered = self.sub(g, wide)?;
                    let da = self.mul(node, centered)?;
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::SoftmaxXent(logits, ref labels) => {
                if self.wants_grad(logits) {
                    let (m, c) = self.shape(logits);
                    let probs = self.softmax(logits);
                    let mut one_hot = vec![0.0; m * c];
                    for (i, &y) in labels.iter().enumerate() {
                        one_hot[i * c + y] = 1.0;
                    }
                    let oh = self.push(Op::Leaf, m, c, one_hot, false);
                    let diff = self.sub(probs, oh)?;
                    let wide = self.broadcast_cols(g, c)?;
                    let da = self.mul(wide, diff)?;
                    self.accumulate(adj, logits, da)?;
                }
            }
            Op::SquaredError(a, b) => {
                let d = self.sub(a, b)?;
                let two_d = self.scale(d, 2.0);
                if self.wants_grad(a) {
                    let da = self.mul(g, two_d)?;
                    self.accumulate(adj, a, da)?;
                }
                if self.wants_grad(b) {
                    let gd = self.mul(g, two_d)?;
                    let db = self.scale(gd, -1.0);
                    self.accumulate(adj, b, db)?;
                }
            }
            Op::ConcatCols(a, b) => {
                let (_, na) = self.shape(a);
                let (_, nb) = self.shape(b);
                if self.wants_grad(a) {
                    let da = self.slice_cols(g, 0, na)?;
                    self.accumulate(adj, a, da)?;
                }
                if self.wants_grad(b) {
                    let db = self.slice_cols(g, na, nb)?;
                    self.accumulate(adj, b, db)?;
                }
            }
            Op::SliceCols(a, start, len) => {
                if self.wants_grad(a) {
                    let (_, n) = self.shape(a);
                    let da = self.pad_cols(g, start, n - start - len);
                    self.accumulate(adj, a, da)?;
                }
            }
            Op::PadCols(a, left, _right) => {
                if self.wants_grad(a) {
                    let (_, n) = self.shape(a);
                    let da = self.slice_cols(g, left, n)?;
                    self.accumulate(adj, a, da)?;
                }
            }
        }
        Ok(())
    }

    /// Pointwise derivative captured as a constant; further differentiation
    /// treats it as zero, matching the a.e. second derivative of the kinks.
    fn activation_mask(&mut self, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let (m, n) = self.shape(a);
        let mask: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        self.push(Op::Leaf, m, n, mask, false)
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddRow(a, b)
        | Op::SquaredError(a, b)
        | Op::ConcatCols(a, b) => vec![a, b],
        Op::Transpose(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::SumAll(a)
        | Op::BroadcastRows(a)
        | Op::BroadcastCols(a)
        | Op::BroadcastFull(a)
        | Op::Scale(a, _)
        | Op::Relu(a)
        | Op::LeakyRelu(a, _)
        | Op::Tanh(a)
        | Op::RowNorms(a)
        | Op::Softmax(a)
        | Op::SoftmaxXent(a, _)
        | Op::SliceCols(a, _, _)
        | Op::PadCols(a, _, _) => vec![a],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf2x2(tape: &mut Tape, vals: [f64; 4], rg: bool) -> NodeId {
        let t = Tensor::new(2, 2, vals.to_vec()).unwrap();
        tape.leaf(&t, rg)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = leaf2x2(&mut tape, [1.0, 2.0, 3.0, 4.0], false);
        let eye = leaf2x2(&mut tape, [1.0, 0.0, 0.0, 1.0], false);
        let out = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.values(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(2, 3), false);
        let b = tape.leaf(&Tensor::zeros(2, 3), false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row_vector(vec![-1.0, 0.0, 2.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.values(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row_vector(vec![-5.0]), false);
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.values(y), &[-1.0]);
    }

    #[test]
    fn square_gradient() {
        // d/dx (x*x) at x=3 -> 6
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.grad(y, &[x]).unwrap();
        assert_eq!(tape.values(g[0]), &[6.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row_vector(vec![1.0, 5.0]), true);
        let m = tape.mean_all(x);
        let g = tape.grad(m, &[x]).unwrap();
        assert_eq!(tape.values(g[0]), &[0.5, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row_vector(vec![1.0, 2.0]), true);
        let y = tape.scale(x, 2.0);
        assert!(matches!(
            tape.backward(y),
            Err(Error::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn input_gradient_rejects_unrelated_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.0), true);
        let z = tape.leaf(&Tensor::scalar(4.0), true);
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(
            tape.input_gradient(y, z),
            Err(Error::NotAncestor)
        ));
    }

    #[test]
    fn linear_input_gradient_and_penalty() {
        // D(x) = w.x with w = [3,4]: grad_x D = [3,4], norm 5, (5-1)^2 = 16.
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row_vector(vec![0.7, -0.2]), true);
        let w = tape.leaf(&Tensor::new(2, 1, vec![3.0, 4.0]).unwrap(), true);
        let score = tape.matmul(x, w).unwrap();
        let gx = tape.input_gradient(score, x).unwrap();
        assert_eq!(tape.values(gx), &[3.0, 4.0]);
        let norm = tape.row_norms(gx);
        assert_eq!(tape.values(norm), &[5.0]);
        let one = tape.scalar(1.0);
        let pen = tape.squared_error(norm, one).unwrap();
        assert_eq!(tape.values(pen), &[16.0]);
    }

    #[test]
    fn unit_norm_weight_gives_zero_penalty() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row_vector(vec![0.3, 0.9]), true);
        let w = tape.leaf(&Tensor::new(2, 1, vec![0.6, 0.8]).unwrap(), true);
        let score = tape.matmul(x, w).unwrap();
        let gx = tape.input_gradient(score, x).unwrap();
        let norm = tape.row_norms(gx);
        let one = tape.scalar(1.0);
        let pen = tape.squared_error(norm, one).unwrap();
        assert!(tape.values(pen)[0].abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_wrt_weights_matches_analytic() {
        // penalty = (|w| - 1)^2, d/dw = 2(|w|-1) w/|w| = [4.8, 6.4] at [3,4].
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row_vector(vec![0.7, -0.2]), true);
        let w = tape.leaf(&Tensor::new(2, 1, vec![3.0, 4.0]).unwrap(), true);
        let score = tape.matmul(x, w).unwrap();
        let gx = tape.input_gradient(score, x).unwrap();
        let norm = tape.row_norms(gx);
        let one = tape.scalar(1.0);
        let pen = tape.squared_error(norm, one).unwrap();
        let gw = tape.grad(pen, &[w]).unwrap()[0];
        let got = tape.values(gw);
        assert!((got[0] - 4.8).abs() < 1e-10, "{got:?}");
        assert!((got[1] - 6.4).abs() < 1e-10, "{got:?}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let z = tape.leaf(
            &Tensor::new(2, 3, vec![1.0, -2.0, 0.5, 30.0, 10.0, -5.0]).unwrap(),
            false,
        );
        let p = tape.softmax(z);
        for row in tape.values(p).chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn xent_hand_value() {
        // logits [1,2,3], true class 3 (index 2) -> 0.40760596.
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::row_vector(vec![1.0, 2.0, 3.0]), false);
        let l = tape.softmax_xent(z, &[2]).unwrap();
        assert!((tape.values(l)[0] - 0.407_605_964_44).abs() < 1e-9);
    }

    #[test]
    fn concat_slice_round_trip_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::row_vector(vec![1.0, 2.0]), true);
        let b = tape.leaf(&Tensor::row_vector(vec![3.0]), true);
        let cat = tape.concat_cols(a, b).unwrap();
        let w = tape.leaf(&Tensor::new(3, 1, vec![10.0, 20.0, 30.0]).unwrap(), false);
        let y = tape.matmul(cat, w).unwrap();
        let g = tape.grad(y, &[a, b]).unwrap();
        assert_eq!(tape.values(g[0]), &[10.0, 20.0]);
        assert_eq!(tape.values(g[1]), &[30.0]);
    }

    /// FD check of one op: inputs are leaves, the op output is contracted
    /// with a fixed random weighting (a uniform adjoint would null out
    /// softmax-style gradients), and every input gradient must match
    /// central differences.
    fn op_gradcheck<F>(shapes: &[(usize, usize)], point: &[f64], tol: f64, build: F)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        use crate::gradcheck::{central_difference, max_relative_error};
        use rand::{Rng, SeedableRng};
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        assert_eq!(total, point.len());

        let run = |p: &[f64]| -> (Vec<f64>, f64, Vec<NodeId>, Tape) {
            let mut tape = Tape::new();
            let mut off = 0;
            let leaves: Vec<NodeId> = shapes
                .iter()
                .map(|&(r, c)| {
                    let t = Tensor::new(r, c, p[off..off + r * c].to_vec()).unwrap();
                    off += r * c;
                    tape.leaf(&t, true)
                })
                .collect();
            let out = build(&mut tape, &leaves);
            let (m, n) = tape.shape(out);
            let mut wrng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
            let w = Tensor::new(m, n, (0..m * n).map(|_| wrng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let wl = tape.constant(&w);
            let prod = tape.mul(out, wl).unwrap();
            let loss = tape.sum_all(prod);
            let v = tape.scalar_value(loss).unwrap();
            let grads = tape.grad(loss, &leaves).unwrap();
            let flat: Vec<f64> = grads.iter().flat_map(|&g| tape.values(g).to_vec()).collect();
            (flat, v, leaves, tape)
        };
        let (analytic, _, _, _) = run(point);
        let numeric = central_difference(|p| Ok(run(p).1), point, 1e-5).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < tol, "op gradient error {err}");
    }

    #[test]
    fn every_op_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        // values bounded away from zero so relu kinks and divisions are safe
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.2..1.2);
                    if rng.gen::<bool>() {
                        v
                    } else {
                        -v
                    }
                })
                .collect()
        };
        let a23 = draw(6);
        let b34 = draw(12);

        op_gradcheck(&[(2, 3), (3, 4)], &[a23.clone(), b34].concat(), 1e-6, |t, l| {
            t.matmul(l[0], l[1]).unwrap()
        });
        op_gradcheck(&[(2, 3)], &a23, 1e-6, |t, l| t.transpose(l[0]));
        for op in ["add", "sub", "mul", "div", "sqerr"] {
            let pts = [draw(6), draw(6)].concat();
            op_gradcheck(&[(2, 3), (2, 3)], &pts, 1e-6, move |t, l| match op {
                "add" => t.add(l[0], l[1]).unwrap(),
                "sub" => t.sub(l[0], l[1]).unwrap(),
                "mul" => t.mul(l[0], l[1]).unwrap(),
                "div" => t.div(l[0], l[1]).unwrap(),
                _ => t.squared_error(l[0], l[1]).unwrap(),
            });
        }
        op_gradcheck(&[(3, 4), (1, 4)], &[draw(12), draw(4)].concat(), 1e-6, |t, l| {
            t.add_row(l[0], l[1]).unwrap()
        });
        op_gradcheck(&[(3, 4)], &draw(12), 1e-6, |t, l| t.sum_rows(l[0]));
        op_gradcheck(&[(3, 4)], &draw(12), 1e-6, |t, l| t.sum_cols(l[0]));
        op_gradcheck(&[(3, 4)], &draw(12), 1e-6, |t, l| t.sum_all(l[0]));
        op_gradcheck(&[(1, 4)], &draw(4), 1e-6, |t, l| {
            t.broadcast_rows(l[0], 3).unwrap()
        });
        op_gradcheck(&[(3, 1)], &draw(3), 1e-6, |t, l| {
            t.broadcast_cols(l[0], 4).unwrap()
        });
        op_gradcheck(&[(1, 1)], &draw(1), 1e-6, |t, l| {
            t.broadcast_full(l[0], 2, 5).unwrap()
        });
        op_gradcheck(&[(2, 3)], &draw(6), 1e-6, |t, l| t.scale(l[0], -2.5));
        op_gradcheck(&[(2, 2), (2, 3)], &[draw(4), draw(6)].concat(), 1e-6, |t, l| {
            t.concat_cols(l[0], l[1]).unwrap()
        });
        op_gradcheck(&[(2, 5)], &draw(10), 1e-6, |t, l| {
            t.slice_cols(l[0], 1, 3).unwrap()
        });
        op_gradcheck(&[(2, 3)], &draw(6), 1e-6, |t, l| t.pad_cols(l[0], 2, 1));
        op_gradcheck(&[(2, 3)], &draw(6), 1e-5, |t, l| t.relu(l[0]));
        op_gradcheck(&[(2, 3)], &draw(6), 1e-5, |t, l| t.leaky_relu(l[0], 0.2));
        op_gradcheck(&[(2, 3)], &draw(6), 1e-6, |t, l| t.tanh(l[0]));
        op_gradcheck(&[(2, 4)], &draw(8), 1e-6, |t, l| t.row_norms(l[0]));
        op_gradcheck(&[(2, 4)], &draw(8), 1e-6, |t, l| t.softmax(l[0]));
        op_gradcheck(&[(3, 4)], &draw(12), 1e-6, |t, l| {
            t.softmax_xent(l[0], &[2, 0, 3]).unwrap()
        });
    }

    #[test]
    fn double_backward_matches_analytic_tanh() {
        // y = tanh(x); s = (dy/dx)^2; ds/dx = 2 tanh'(x) tanh''(x)
        //            = -4 tanh(x) tanh'(x)^2
        let x0 = 0.3f64;
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(x0), true);
        let y = tape.tanh(x);
        let dy = tape.grad(y, &[x]).unwrap()[0];
        let s = tape.mul(dy, dy).unwrap();
        let ds = tape.grad(s, &[x]).unwrap()[0];
        let sech2 = 1.0 - x0.tanh() * x0.tanh();
        let expect = -4.0 * x0.tanh() * sech2 * sech2;
        let got = tape.values(ds)[0];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn forward_values_stay_finite_on_extreme_finite_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            &Tensor::new(2, 3, vec![1e8, -1e8, 3.0, 0.0, -2.5, 7e7]).unwrap(),
            false,
        );
        let w = tape.leaf(&Tensor::new(3, 2, vec![1e4, -2.0, 0.5, 3e3, -1.0, 0.25]).unwrap(), false);
        let h = tape.matmul(x, w).unwrap();
        let a = tape.leaky_relu(h, 0.2);
        let t = tape.tanh(a);
        let n = tape.row_norms(a);
        let p = tape.softmax(h);
        let xe = tape.softmax_xent(h, &[1, 0]).unwrap();
        for id in [h, a, t, n, p, xe] {
            assert!(tape.values(id).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn two_layer_mlp_gradient_matches_finite_differences() {
        use crate::gradcheck::{central_difference, max_relative_error};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(77);
        let x = Tensor::new(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let target = Tensor::new(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w1v: Vec<f64> = (0..3 * 5).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let w2v: Vec<f64> = (0..5 * 2).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let params: Vec<f64> = [w1v, w2v].concat();

        let loss_of = |p: &[f64]| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let w1 = tape.leaf(&Tensor::new(3, 5, p[..15].to_vec())?, true);
            let w2 = tape.leaf(&Tensor::new(5, 2, p[15..].to_vec())?, true);
            let xn = tape.constant(&x);
            let tn = tape.constant(&target);
            let h = tape.matmul(xn, w1)?;
            let a = tape.tanh(h);
            let y = tape.matmul(a, w2)?;
            let e = tape.squared_error(y, tn)?;
            let loss = tape.mean_all(e);
            tape.scalar_value(loss)
        };
        let numeric = central_difference(loss_of, &params, 1e-5).unwrap();

        let mut tape = Tape::new();
        let w1 = tape.leaf(&Tensor::new(3, 5, params[..15].to_vec()).unwrap(), true);
        let w2 = tape.leaf(&Tensor::new(5, 2, params[15..].to_vec()).unwrap(), true);
        let xn = tape.constant(&x);
        let tn = tape.constant(&target);
        let h = tape.matmul(xn, w1).unwrap();
        let a = tape.tanh(h);
        let y = tape.matmul(a, w2).unwrap();
        let e = tape.squared_error(y, tn).unwrap();
        let loss = tape.mean_all(e);
        let grads = tape.grad(loss, &[w1, w2]).unwrap();
        let analytic: Vec<f64> = grads
            .iter()
            .flat_map(|&g| tape.values(g).to_vec())
            .collect();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn deterministic_replay() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::row_vector(vec![0.3, -1.2, 0.9]), true);
            let w = tape.leaf(
                &Tensor::new(3, 2, vec![0.1, -0.4, 0.2, 0.8, -0.7, 0.05]).unwrap(),
                true,
            );
            let h = tape.matmul(x, w).unwrap();
            let a = tape.tanh(h);
            let n = tape.row_norms(a);
            let s = tape.sum_all(n);
            let g = tape.grad(s, &[w]).unwrap()[0];
            (tape.values(s).to_vec(), tape.values(g).to_vec())
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&v1), bits(&v2));
        assert_eq!(bits(&g1), bits(&g2));
    }
}
