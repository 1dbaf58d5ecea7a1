use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::matrix::Matrix;
use crate::numcore::param::{ParamId, ParamStore};
use crate::numcore::scalar::Scalar;

/// Gradients keyed by parameter id; ordered, so accumulation is deterministic.
pub type GradMap<S> = BTreeMap<ParamId, Matrix<S>>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C1: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C2: f64 = 0.044715;

#[derive(Debug)]
enum Op<S> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// `a * b^T`
    MatMulNT {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    /// Broadcast a 1xN row over every row of `a`.
    AddRow {
        a: NodeId,
        row: NodeId,
    },
    Scale {
        a: NodeId,
        c: S,
    },
    Tanh {
        a: NodeId,
    },
    Gelu {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    SoftmaxRows {
        a: NodeId,
    },
    /// Row i attends to columns 0..=i; masked entries are exactly zero.
    CausalSoftmaxRows {
        a: NodeId,
    },
    LogSoftmaxRows {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix<S>,
        inv_std: Vec<S>,
    },
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    SliceRows {
        a: NodeId,
        start: usize,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    /// Sum of the entries at the given (row, col) positions; a 1x1 result.
    PickSum {
        a: NodeId,
        picks: Vec<(usize, usize)>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape over a borrowed parameter store.
///
/// Forward methods append nodes and validate shapes and finiteness as they
/// go; [`Tape::backward`] walks the tape once and returns gradients for the
/// trainable parameters reachable from the loss. Frozen subtrees are pruned:
/// no gradient work happens where no trainable parameter contributes.
pub struct Tape<'s, S> {
    store: &'s ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

impl<'s, S: Scalar> Tape<'s, S> {
    pub fn new(store: &'s ParamStore<S>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node. Parameter leaves read straight from the store.
    pub fn value(&self, id: NodeId) -> &Matrix<S> {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Leaf { param: Some(p) } => self.store.value(p),
            _ => &node.value,
        }
    }

    /// The 1x1 value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> Result<S> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(Error::Dim(format!("scalar: node is {:?}", v.shape())));
        }
        Ok(v.get(0, 0))
    }

    /// A constant (non-differentiable) input.
    pub fn constant(&mut self, value: Matrix<S>) -> Result<NodeId> {
        value.check_finite("constant")?;
        Ok(self.push(value, Op::Leaf { param: None }, false))
    }

    /// A parameter leaf; memoized, so repeated requests share one node and
    /// gradient contributions from every use accumulate together.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let trainable = self.store.tensor(id).trainable();
        let n = self.push(Matrix::zeros(0, 0), Op::Leaf { param: Some(id) }, trainable);
        self.param_nodes.insert(id, n);
        n
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn finite(&self, m: Matrix<S>, what: &str) -> Result<Matrix<S>> {
        m.check_finite(what)?;
        Ok(m)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let v = self.finite(v, "matmul")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul { a, b }, ng))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let v = self.finite(v, "matmul_nt")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMulNT { a, b }, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let v = self.finite(v, "add")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let v = self.finite(v, "sub")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub { a, b }, ng))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Dim(format!(
                "add_row: {:?} + {:?}",
                av.shape(),
                rv.shape()
            )));
        }
        let mut v = av.clone();
        for i in 0..v.rows() {
            for (x, &r) in v.row_mut(i).iter_mut().zip(rv.row(0).iter()) {
                *x += r;
            }
        }
        let v = self.finite(v, "add_row")?;
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(v, Op::AddRow { a, row }, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::NonFinite("scale constant".into()));
        }
        let v = self.value(a).scale(c);
        let v = self.finite(v, "scale")?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Scale { a, c }, ng))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.tanh());
        let v = self.finite(v, "tanh")?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Tanh { a }, ng))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let c1 = S::from_c(GELU_C1);
        let c2 = S::from_c(GELU_C2);
        let half = S::from_c(0.5);
        let v = self.value(a).map(|x| {
            let t = (c1 * (x + c2 * x * x * x)).tanh();
            half * x * (S::one() + t)
        });
        let v = self.finite(v, "gelu")?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Gelu { a }, ng))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        let v = self.finite(v, "relu")?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Relu { a }, ng))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.cols() == 0 {
            return Err(Error::Dim("softmax_rows: zero columns".into()));
        }
        let mut v = Matrix::zeros(av.rows(), av.cols());
        for i in 0..av.rows() {
            softmax_into(av.row(i), v.row_mut(i));
        }
        let v = self.finite(v, "softmax_rows")?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::SoftmaxRows { a }, ng))
    }

    pub fn causal_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rows() != av.cols() {
            return Err(Error::Dim(format!(
                "causal_softmax_rows: non-square {:?}",
                av.shape()
            )));
        }
        let mut v = Matrix::zeros(av.rows(), av.cols());
        for i in 0..av.rows() {
            softmax_into(&av.row(i)[..=i], &mut v.row_mut(i)[..=i]);
        }
        let v = self.finite(v, "causal_softmax_rows")?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::CausalSoftmaxRows { a }, ng))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.cols() == 0 {
            return Err(Error::Dim("log_softmax_rows: zero columns".into()));
        }
        let mut v = Matrix::zeros(av.rows(), av.cols());
        for i in 0..av.rows() {
            let row = av.row(i);
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for &x in row {
                sum += (x - m).exp();
            }
            let lse = m + sum.ln();
            for (o, &x) in v.row_mut(i).iter_mut().zip(row.iter()) {
                *o = x - lse;
            }
        }
        let v = self.finite(v, "log_softmax_rows")?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::LogSoftmaxRows { a }, ng))
    }

    /// Row-wise layer normalization with learnable gain and bias (both 1xN).
    /// Uses the population variance and a fixed 1e-5 stabilizer.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let n = xv.cols();
        if n == 0 || gv.shape() != (1, n) || bv.shape() != (1, n) {
            return Err(Error::Dim(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let inv_n = S::from_c(1.0 / n as f64);
        let eps = S::from_c(LN_EPS);
        let mut xhat = Matrix::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Matrix::zeros(xv.rows(), n);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat.set(i, j, xh);
                out.set(i, j, xh * gv.get(0, j) + bv.get(0, j));
            }
        }
        let out = self.finite(out, "layer_norm")?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Rows of `table` selected by index, in order; repeats allowed.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let cols = tv.cols();
        let mut v = Matrix::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(Error::Dim(format!(
                    "gather_rows: row {id} out of {}",
                    tv.rows()
                )));
            }
            v.row_mut(r).copy_from_slice(tv.row(id));
        }
        let v = self.finite(v, "gather_rows")?;
        let ng = self.needs(table);
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Stack matrices vertically. Zero-row parts are allowed.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_rows: no parts".into()));
        }
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::Dim(format!(
                    "concat_rows: {} cols vs {}",
                    pv.cols(),
                    cols
                )));
            }
            for r in 0..pv.rows() {
                v.row_mut(at + r).copy_from_slice(pv.row(r));
            }
            at += pv.rows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            v,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Stack matrices horizontally (used to rejoin attention heads).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_cols: no parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::Dim(format!(
                    "concat_cols: {} rows vs {}",
                    pv.rows(),
                    rows
                )));
            }
            for r in 0..rows {
                v.row_mut(r)[at..at + pv.cols()].copy_from_slice(pv.row(r));
            }
            at += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            v,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(Error::Dim(format!(
                "slice_rows: [{start}, {}) of {} rows",
                start + len,
                av.rows()
            )));
        }
        let mut v = Matrix::zeros(len, av.cols());
        for r in 0..len {
            v.row_mut(r).copy_from_slice(av.row(start + r));
        }
        let ng = self.needs(a);
        Ok(self.push(v, Op::SliceRows { a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::Dim(format!(
                "slice_cols: [{start}, {}) of {} cols",
                start + len,
                av.cols()
            )));
        }
        let mut v = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            v.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(v, Op::SliceCols { a, start }, ng))
    }

    /// Sum the entries at `picks`, producing a 1x1 node.
    pub fn pick_sum(&mut self, a: NodeId, picks: &[(usize, usize)]) -> Result<NodeId> {
        let av = self.value(a);
        let mut acc = S::zero();
        for &(r, c) in picks {
            if r >= av.rows() || c >= av.cols() {
                return Err(Error::Dim(format!(
                    "pick_sum: ({r}, {c}) out of {:?}",
                    av.shape()
                )));
            }
            acc += av.get(r, c);
        }
        let v = Matrix::from_vec(1, 1, vec![acc])?;
        let v = self.finite(v, "pick_sum")?;
        let ng = self.needs(a);
        Ok(self.push(
            v,
            Op::PickSum {
                a,
                picks: picks.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a 1x1 loss node. Returns gradients for every
    /// trainable parameter that influences the loss; parameters with no
    /// influence are absent from the map.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap<S>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Dim(format!(
                "backward: loss is {:?}, want 1x1",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Matrix<S>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            adj[loss.0] = Some(Matrix::from_vec(1, 1, vec![S::one()])?);
        }
        for i in (0..self.nodes.len()).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.push_back(NodeId(i), &g, &mut adj)?;
            // Parameter leaves keep their adjoint for collection below.
            if matches!(self.nodes[i].op, Op::Leaf { param: Some(_) }) {
                adj[i] = Some(g);
            }
        }
        let mut grads = GradMap::new();
        for (&pid, &nid) in &self.param_nodes {
            if let Some(g) = adj[nid.0].take() {
                g.check_finite(&format!("gradient of parameter {}", pid.index()))?;
                grads.insert(pid, g);
            }
        }
        Ok(grads)
    }

    fn push_back(
        &self,
        id: NodeId,
        g: &Matrix<S>,
        adj: &mut Vec<Option<Matrix<S>>>,
    ) -> Result<()> {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                if self.needs(*a) {
                    let da = g.matmul_nt(self.value(*b))?;
                    accumulate(adj, *a, da)?;
                }
                if self.needs(*b) {
                    let db = self.value(*a).matmul_tn(g)?;
                    accumulate(adj, *b, db)?;
                }
            }
            Op::MatMulNT { a, b } => {
                if self.needs(*a) {
                    let da = g.matmul(self.value(*b))?;
                    accumulate(adj, *a, da)?;
                }
                if self.needs(*b) {
                    let db = g.matmul_tn(self.value(*a))?;
                    accumulate(adj, *b, db)?;
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.clone())?;
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.clone())?;
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.clone())?;
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.scale(-S::one()))?;
                }
            }
            Op::AddRow { a, row } => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.clone())?;
                }
                if self.needs(*row) {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &x) in dr.row_mut(0).iter_mut().zip(g.row(i).iter()) {
                            *o += x;
                        }
                    }
                    accumulate(adj, *row, dr)?;
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.scale(*c))?;
                }
            }
            Op::Tanh { a } => {
                if self.needs(*a) {
                    let y = &node.value;
                    let mut da = g.clone();
                    for (d, &yv) in da.as_mut_slice().iter_mut().zip(y.as_slice().iter()) {
                        *d *= S::one() - yv * yv;
                    }
                    accumulate(adj, *a, da)?;
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    let c1 = S::from_c(GELU_C1);
                    let c2 = S::from_c(GELU_C2);
                    let half = S::from_c(0.5);
                    let three = S::from_c(3.0);
                    let x = self.value(*a);
                    let mut da = g.clone();
                    for (d, &xv) in da.as_mut_slice().iter_mut().zip(x.as_slice().iter()) {
                        let u = c1 * (xv + c2 * xv * xv * xv);
                        let t = u.tanh();
                        let du = c1 * (S::one() + three * c2 * xv * xv);
                        let deriv = half * (S::one() + t) + half * xv * (S::one() - t * t) * du;
                        *d *= deriv;
                    }
                    accumulate(adj, *a, da)?;
                }
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let mut da = g.clone();
                    for (d, &xv) in da.as_mut_slice().iter_mut().zip(x.as_slice().iter()) {
                        if xv <= S::zero() {
                            *d = S::zero();
                        }
                    }
                    accumulate(adj, *a, da)?;
                }
            }
            Op::SoftmaxRows { a } | Op::CausalSoftmaxRows { a } => {
                if self.needs(*a) {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let mut s = S::zero();
                        for (&gv, &yv) in g.row(i).iter().zip(y.row(i).iter()) {
                            s += gv * yv;
                        }
                        for ((d, &gv), &yv) in da
                            .row_mut(i)
                            .iter_mut()
                            .zip(g.row(i).iter())
                            .zip(y.row(i).iter())
                        {
                            *d = yv * (gv - s);
                        }
                    }
                    accumulate(adj, *a, da)?;
                }
            }
            Op::LogSoftmaxRows { a } => {
                if self.needs(*a) {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let mut s = S::zero();
                        for &gv in g.row(i) {
                            s += gv;
                        }
                        for ((d, &gv), &yv) in da
                            .row_mut(i)
                            .iter_mut()
                            .zip(g.row(i).iter())
                            .zip(y.row(i).iter())
                        {
                            *d = gv - yv.exp() * s;
                        }
                    }
                    accumulate(adj, *a, da)?;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let n = xhat.cols();
                let inv_n = S::from_c(1.0 / n as f64);
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(xhat.rows(), n);
                    for i in 0..xhat.rows() {
                        let mut mh = S::zero();
                        let mut mhx = S::zero();
                        for j in 0..n {
                            let h = g.get(i, j) * gv.get(0, j);
                            mh += h;
                            mhx += h * xhat.get(i, j);
                        }
                        mh *= inv_n;
                        mhx *= inv_n;
                        for j in 0..n {
                            let h = g.get(i, j) * gv.get(0, j);
                            dx.set(i, j, inv_std[i] * (h - mh - xhat.get(i, j) * mhx));
                        }
                    }
                    accumulate(adj, *x, dx)?;
                }
                if self.needs(*gain) {
                    let mut dg = Matrix::zeros(1, n);
                    for i in 0..xhat.rows() {
                        for j in 0..n {
                            let v = dg.get(0, j) + g.get(i, j) * xhat.get(i, j);
                            dg.set(0, j, v);
                        }
                    }
                    accumulate(adj, *gain, dg)?;
                }
                if self.needs(*bias) {
                    let mut db = Matrix::zeros(1, n);
                    for i in 0..xhat.rows() {
                        for j in 0..n {
                            let v = db.get(0, j) + g.get(i, j);
                            db.set(0, j, v);
                        }
                    }
                    accumulate(adj, *bias, db)?;
                }
            }
            Op::GatherRows { table, ids } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &x) in dt.row_mut(id).iter_mut().zip(g.row(r).iter()) {
                            *o += x;
                        }
                    }
                    accumulate(adj, *table, dt)?;
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) && rows > 0 {
                        let mut dp = Matrix::zeros(rows, g.cols());
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(g.row(at + r));
                        }
                        accumulate(adj, p, dp)?;
                    }
                    at += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) && cols > 0 {
                        let mut dp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + cols]);
                        }
                        accumulate(adj, p, dp)?;
                    }
                    at += cols;
                }
            }
            Op::SliceRows { a, start } => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        da.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(adj, *a, da)?;
                }
            }
            Op::SliceCols { a, start } => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(adj, *a, da)?;
                }
            }
            Op::PickSum { a, picks } => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let gs = g.get(0, 0);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for &(r, c) in picks {
                        da.set(r, c, da.get(r, c) + gs);
                    }
                    accumulate(adj, *a, da)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(
    adj: &mut [Option<Matrix<S>>],
    id: NodeId,
    g: Matrix<S>,
) -> Result<()> {
    match &mut adj[id.0] {
        Some(cur) => cur.add_assign_scaled(&g, S::one()),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Stable softmax of `row` into `out` (same length).
fn softmax_into<S: Scalar>(row: &[S], out: &mut [S]) {
    let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        let e = (x - m).exp();
        *o = e;
        sum += e;
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o *= inv;
    }
}
