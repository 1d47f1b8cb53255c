//! Reverse-mode differentiation over small dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are appended
//! after their inputs, so walking the node list backwards is a valid
//! topological order for the adjoint sweep.

use super::{Grads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Square,
    Sqrt,
    Neg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    ParamRows {
        param: ParamId,
        rows: Vec<usize>,
    },
    SparseRows {
        param: ParamId,
        entries: Vec<(usize, usize, f64)>,
    },
    Gather(Vec<(NodeId, usize)>),
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalarNode(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    RowScale(NodeId, Vec<f64>),
    Unary(NodeId, Unary),
    ClampMin(NodeId, f64),
    Concat(Vec<NodeId>),
    Slice {
        a: NodeId,
        start: usize,
    },
    RowSum(NodeId),
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    /// `None` only for `Op::Param`, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// One forward pass and everything needed to differentiate it.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Result of the adjoint sweep.
pub struct Backward {
    pub params: Grads,
    nodes: Vec<Option<Tensor>>,
}

impl Backward {
    /// Adjoint of a node, if the output depends on it.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes.get(node.0).and_then(|t| t.as_ref())
    }
}

fn mismatch(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::shape(op, format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable scalar helpers shared with code that works outside the
/// tape.
pub mod scalar {
    pub fn softplus(x: f64) -> f64 {
        super::softplus(x)
    }

    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Neg => -x,
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Neg => -1.0,
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.value(*p),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A value the output is not differentiated against.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose adjoint is kept, for gradients with respect to inputs.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Copies a node's current value into a new constant, cutting gradient
    /// flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Selected rows of a parameter matrix (embedding-style lookup).
    pub fn param_rows(&mut self, id: ParamId, rows: &[usize]) -> Result<NodeId> {
        let table = self.store.value(id);
        let cols = table.cols();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= table.rows() {
                return Err(Error::shape(
                    format!("param_rows({})", self.store.name(id)),
                    format!("row {r} of {}", table.rows()),
                ));
            }
            out.extend_from_slice(table.row_slice(r));
        }
        let value = Tensor::matrix(rows.len(), cols, out)?;
        Ok(self.push(
            value,
            Op::ParamRows {
                param: id,
                rows: rows.to_vec(),
            },
            true,
        ))
    }

    /// `out[r] = Σ weight · table[row]` over `(r, row, weight)` entries: a
    /// sparse matrix times a parameter table.
    pub fn sparse_rows(&mut self, id: ParamId, n_out: usize, entries: Vec<(usize, usize, f64)>) -> Result<NodeId> {
        let table = self.store.value(id);
        let cols = table.cols();
        let mut out = Tensor::zeros(n_out, cols);
        for &(r, row, w) in &entries {
            if r >= n_out || row >= table.rows() {
                return Err(Error::shape(
                    format!("sparse_rows({})", self.store.name(id)),
                    format!("entry ({r}, {row}) outside {n_out}x{}", table.rows()),
                ));
            }
            let src = table.row_slice(row);
            for (o, s) in out.row_slice_mut(r).iter_mut().zip(src) {
                *o += w * s;
            }
        }
        Ok(self.push(out, Op::SparseRows { param: id, entries }, true))
    }

    /// Stacks rows picked from arbitrary nodes of equal width.
    pub fn gather(&mut self, sources: Vec<(NodeId, usize)>) -> Result<NodeId> {
        let cols = match sources.first() {
            Some(&(n, _)) => self.value(n).cols(),
            None => return Err(Error::shape("gather", "no rows")),
        };
        let mut out = Vec::with_capacity(sources.len() * cols);
        let mut needs = false;
        for &(n, r) in &sources {
            let v = self.value(n);
            if v.cols() != cols || r >= v.rows() {
                return Err(Error::shape(
                    "gather",
                    format!("row {r} of {}x{} into width {cols}", v.rows(), v.cols()),
                ));
            }
            out.extend_from_slice(v.row_slice(r));
            needs |= self.needs(n);
        }
        let value = Tensor::matrix(sources.len(), cols, out)?;
        Ok(self.push(value, Op::Gather(sources), needs))
    }

    /// Rows of a single node, with repetition allowed.
    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.gather(rows.iter().map(|&r| (a, r)).collect())
    }

    /// `x · wᵀ + b` for `x: n×in`, `w: out×in`, `b: 1×out`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.cols() {
            return Err(mismatch("affine input", xv, wv));
        }
        if bv.rows() != 1 || bv.cols() != wv.rows() {
            return Err(mismatch("affine bias", wv, bv));
        }
        let (n, din, dout) = (xv.rows(), xv.cols(), wv.rows());
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let xr = &xv.data()[r * din..(r + 1) * din];
            let orow = &mut out[r * dout..(r + 1) * dout];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wr = &wv.data()[o * din..(o + 1) * din];
                let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                *slot = dot + bv.data()[o];
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::matrix(n, dout, out)?;
        Ok(self.push(value, Op::Affine { x, w, b }, needs))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::matrix(av.rows(), av.cols(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `1 × 1` node to every entry of `a`.
    pub fn add_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("add_scalar_node", "scalar operand is not 1x1"));
        }
        let c = sv.item();
        let av = self.value(a);
        let data = av.data().iter().map(|x| x + c).collect();
        let value = Tensor::matrix(av.rows(), av.cols(), data)?;
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(value, Op::AddScalarNode(a, s), needs))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let av = self.value(a);
        let value =
            Tensor::matrix(av.rows(), av.cols(), av.data().iter().map(|x| x * k).collect()).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, k), needs)
    }

    pub fn offset(&mut self, a: NodeId, k: f64) -> NodeId {
        let av = self.value(a);
        let value =
            Tensor::matrix(av.rows(), av.cols(), av.data().iter().map(|x| x + k).collect()).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Offset(a), needs)
    }

    /// Multiplies row `r` of `a` by the constant `factors[r]`.
    pub fn row_scale(&mut self, a: NodeId, factors: Vec<f64>) -> Result<NodeId> {
        let av = self.value(a);
        if factors.len() != av.rows() {
            return Err(Error::shape(
                "row_scale",
                format!("{} factors for {} rows", factors.len(), av.rows()),
            ));
        }
        let c = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * factors[i / c.max(1)])
            .collect();
        let value = Tensor::matrix(av.rows(), c, data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::RowScale(a, factors), needs))
    }

    pub fn unary(&mut self, a: NodeId, f: Unary) -> NodeId {
        let av = self.value(a);
        let value =
            Tensor::matrix(av.rows(), av.cols(), av.data().iter().map(|&x| f.apply(x)).collect()).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Unary(a, f), needs)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Softplus)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Square)
    }

    /// `max(a, floor)` entrywise; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let av = self.value(a);
        let value = Tensor::matrix(av.rows(), av.cols(), av.data().iter().map(|&x| x.max(floor)).collect())
            .expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::ClampMin(a, floor), needs)
    }

    /// Column-wise concatenation of nodes with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::shape("concat", "no parts")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape("concat", format!("{} rows vs {rows}", v.rows())));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::matrix(rows, total, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), needs))
    }

    /// Columns `start..start+len` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}+{len} beyond {} columns", av.cols()),
            ));
        }
        let mut out = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row_slice(r)[start..start + len]);
        }
        let value = Tensor::matrix(av.rows(), len, out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Slice { a, start }, needs))
    }

    /// Sums each row: `n × c → n × 1`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row_slice(r).iter().sum()).collect();
        let value = Tensor::column(data);
        let needs = self.needs(a);
        self.push(value, Op::RowSum(a), needs)
    }

    /// Sum of every entry as a `1 × 1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Adjoint sweep from a `1 × 1` output.
    pub fn backward(&self, output: NodeId) -> Result<Backward> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", "output is not a scalar"));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Tensor::scalar(1.0));
        let mut grads = Grads::zeros_like(self.store);

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj, &mut grads);
            adj[i] = Some(g);
        }
        Ok(Backward {
            params: grads,
            nodes: adj,
        })
    }

    fn acc<'a>(&self, adj: &'a mut [Option<Tensor>], id: NodeId) -> Option<&'a mut Tensor> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let v = self.value(id);
        let (r, c) = (v.rows(), v.cols());
        Some(adj[id.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>], grads: &mut Grads) {
        let node = &self.nodes[i];
        let out = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::Param(p) => {
                grads.slot(self.store, *p).add_assign(g);
                grads.mark_all(*p);
            }
            Op::ParamRows { param, rows } => {
                let slot = grads.slot(self.store, *param);
                let c = slot.cols();
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g.data()[k * c..(k + 1) * c];
                    for (d, s) in slot.row_slice_mut(r).iter_mut().zip(src) {
                        *d += s;
                    }
                }
                for &r in rows {
                    grads.mark_row(*param, r);
                }
            }
            Op::SparseRows { param, entries } => {
                let slot = grads.slot(self.store, *param);
                let c = slot.cols();
                for &(r, row, w) in entries {
                    let src = &g.data()[r * c..(r + 1) * c];
                    for (d, s) in slot.row_slice_mut(row).iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
                for &(_, row, _) in entries {
                    grads.mark_row(*param, row);
                }
            }
            Op::Gather(sources) => {
                let c = g.cols();
                for (k, &(src, r)) in sources.iter().enumerate() {
                    if let Some(a) = self.acc(adj, src) {
                        let gk = &g.data()[k * c..(k + 1) * c];
                        for (d, s) in a.row_slice_mut(r).iter_mut().zip(gk) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xv.rows(), xv.cols(), wv.rows());
                if let Some(dx) = self.acc(adj, *x) {
                    for r in 0..n {
                        let gr = &g.data()[r * dout..(r + 1) * dout];
                        let dxr = &mut dx.data_mut()[r * din..(r + 1) * din];
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wv.data()[o * din..(o + 1) * din];
                            for (d, wi) in dxr.iter_mut().zip(wr) {
                                *d += go * wi;
                            }
                        }
                    }
                }
                if let Some(dw) = self.acc(adj, *w) {
                    for r in 0..n {
                        let gr = &g.data()[r * dout..(r + 1) * dout];
                        let xr = &xv.data()[r * din..(r + 1) * din];
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let dwr = &mut dw.data_mut()[o * din..(o + 1) * din];
                            for (d, xi) in dwr.iter_mut().zip(xr) {
                                *d += go * xi;
                            }
                        }
                    }
                }
                if let Some(db) = self.acc(adj, *b) {
                    for r in 0..n {
                        let gr = &g.data()[r * dout..(r + 1) * dout];
                        for (d, go) in db.data_mut().iter_mut().zip(gr) {
                            *d += go;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(adj, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.acc(adj, *b) {
                    db.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.acc(adj, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.acc(adj, *b) {
                    for (d, s) in db.data_mut().iter_mut().zip(g.data()) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.acc(adj, *a) {
                    for ((d, s), y) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += s * y;
                    }
                }
                if let Some(db) = self.acc(adj, *b) {
                    for ((d, s), x) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += s * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.acc(adj, *a) {
                    for ((d, s), y) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += s / y;
                    }
                }
                if let Some(db) = self.acc(adj, *b) {
                    for (((d, s), x), y) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()).zip(bv.data()) {
                        *d -= s * x / (y * y);
                    }
                }
            }
            Op::AddScalarNode(a, s) => {
                if let Some(da) = self.acc(adj, *a) {
                    da.add_assign(g);
                }
                let total: f64 = g.data().iter().sum();
                if let Some(ds) = self.acc(adj, *s) {
                    ds.data_mut()[0] += total;
                }
            }
            Op::Scale(a, k) => {
                if let Some(da) = self.acc(adj, *a) {
                    for (d, s) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += k * s;
                    }
                }
            }
            Op::Offset(a) => {
                if let Some(da) = self.acc(adj, *a) {
                    da.add_assign(g);
                }
            }
            Op::RowScale(a, factors) => {
                if let Some(da) = self.acc(adj, *a) {
                    let c = g.cols().max(1);
                    for (k, (d, s)) in da.data_mut().iter_mut().zip(g.data()).enumerate() {
                        *d += s * factors[k / c];
                    }
                }
            }
            Op::Unary(a, f) => {
                let (xv, yv) = (self.value(*a).data(), out.expect("stored").data());
                if let Some(da) = self.acc(adj, *a) {
                    for (((d, s), &x), &y) in da.data_mut().iter_mut().zip(g.data()).zip(xv).zip(yv) {
                        *d += s * f.derivative(x, y);
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let xv = self.value(*a).data();
                if let Some(da) = self.acc(adj, *a) {
                    for ((d, s), &x) in da.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        if x > *floor {
                            *d += s;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.acc(adj, p) {
                        for r in 0..g.rows() {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            for (d, s) in dp.row_slice_mut(r).iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { a, start } => {
                let w = g.cols();
                if let Some(da) = self.acc(adj, *a) {
                    for r in 0..g.rows() {
                        let dst = &mut da.row_slice_mut(r)[*start..*start + w];
                        for (d, s) in dst.iter_mut().zip(g.row_slice(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::RowSum(a) => {
                if let Some(da) = self.acc(adj, *a) {
                    let c = da.cols();
                    for (k, d) in da.data_mut().iter_mut().enumerate() {
                        *d += g.data()[k / c.max(1)];
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                if let Some(da) = self.acc(adj, *a) {
                    da.data_mut().iter_mut().for_each(|d| *d += s);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn unary_derivatives_match_finite_differences() {
        let store = ParamStore::new();
        for f in [
            Unary::Tanh,
            Unary::Sigmoid,
            Unary::Softplus,
            Unary::Exp,
            Unary::Ln,
            Unary::Square,
            Unary::Sqrt,
            Unary::Neg,
        ] {
            for &x in &[0.3, 1.7, 2.5] {
                let mut g = Graph::new(&store);
                let a = g.input(Tensor::scalar(x));
                let y = g.unary(a, f);
                let s = g.sum(y);
                let b = g.backward(s).unwrap();
                let analytic = b.wrt(a).unwrap().item();
                let numeric = fd(|v| f.apply(v), x);
                assert!((analytic - numeric).abs() < 1e-6, "{f:?} at {x}");
            }
        }
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn affine_gradients_against_hand_computation() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap());
        let b = store.add("b", Tensor::row(vec![0.5]));
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let (wn, bn) = (g.param(w), g.param(b));
        let y = g.affine(x, wn, bn).unwrap();
        assert_eq!(g.value(y).item(), 2.5);
        let s = g.sum(y);
        let back = g.backward(s).unwrap();
        assert_eq!(back.params.get(w).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(back.params.get(b).unwrap().data(), &[1.0]);
        assert_eq!(back.wrt(x).unwrap().data(), &[2.0, -1.0]);
    }

    #[test]
    fn param_rows_scatter_and_mark() {
        let mut store = ParamStore::new();
        let t = store.add_table("t", Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let mut g = Graph::new(&store);
        let r = g.param_rows(t, &[2, 2, 0]).unwrap();
        let s = g.sum(r);
        let back = g.backward(s).unwrap();
        assert_eq!(back.params.get(t).unwrap().data(), &[1.0, 0.0, 2.0]);
        assert_eq!(back.params.touched_rows(t).unwrap(), &[true, false, true]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros(2, 2));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(g.backward(a).is_err());
    }
}
