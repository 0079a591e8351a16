//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters enter it
//! through [`Tape::bind`], which copies the current values of a
//! [`ParamStore`] in as leaves. After [`Tape::backward`] the resulting
//! [`Gradients`] are folded back into the store with
//! [`ParamStore::accumulate`], so accumulation (`+=`) and `zero_grad`
//! live on the store, not on the tape.
//!
//! Every node is stored as a `rows × cols` matrix; rank-1 tensors are one
//! row. Nodes whose inputs are all constants are never visited during the
//! backward sweep.

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

/// Vars created by binding a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, slot: usize) -> Var {
        self.vars[slot]
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Dimension {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies the node out as a rank-2 tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node invariant")
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(t.data().to_vec(), r, c, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn constant_rows(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols);
        self.push(data, rows, cols, Op::Leaf, false)
    }

    /// Places every parameter of `store` on the tape. Trainable tensors
    /// become differentiable leaves; frozen ones become constants.
    pub fn bind(&mut self, store: &ParamStore) -> Result<Bound> {
        let mut vars = Vec::with_capacity(store.len());
        for (_, t) in store.iter() {
            vars.push(self.leaf(t, t.requires_grad)?);
        }
        Ok(Bound { vars })
    }

    /// Like [`Tape::bind`] but every leaf is constant.
    pub fn bind_frozen(&mut self, store: &ParamStore) -> Result<Bound> {
        let mut vars = Vec::with_capacity(store.len());
        for (_, t) in store.iter() {
            vars.push(self.leaf(t, false)?);
        }
        Ok(Bound { vars })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(dim_err("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, m, n, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(dim_err("matmul_nt", (m, k), (n, k2)));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, m, n, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, n, m, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(dim_err(op, da, db));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, r, c, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, r, c, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, r, c, Op::Mul(a, b), rg))
    }

    /// Adds a bias row `b` (1×n) to every row of `x` (m×n).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (br, bc) = self.dims(b);
        if br != 1 || bc != n {
            return Err(dim_err("add_row", (m, n), (br, bc)));
        }
        let bv = self.value(b);
        let out = self
            .value(x)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(v, b)| v + b))
            .collect();
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, m, n, Op::AddRow(x, b), rg))
    }

    /// `x · w + b`, the affine map used throughout the encoder.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (r, cols) = self.dims(x);
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(out, r, cols, Op::Scale(x, c), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(&[x]);
        self.push(out, r, c, Op::Tanh(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(&[x]);
        self.push(out, r, c, Op::Gelu(x), rg)
    }

    /// Softmax along `axis` of a rank-2 node (axis 1 = within each row).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => Ok(self.softmax_rows(x, None)),
            0 => {
                let t = self.transpose(x);
                let s = self.softmax_rows(t, None);
                Ok(self.transpose(s))
            }
            _ => Err(Error::Index {
                what: "softmax axis",
                index: axis,
                bound: 2,
            }),
        }
    }

    /// Row-wise softmax. Columns with `key_mask[j] == false` receive weight
    /// exactly zero and do not enter the normalizer.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            match key_mask {
                None => softmax_in_place(row),
                Some(mask) => masked_softmax_in_place(row, mask),
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, r, c, Op::Softmax(x), rg)
    }

    /// Per-row layer normalization with affine `gamma`/`beta` (each 1×n).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        for p in [gamma, beta] {
            if self.dims(p) != (1, n) {
                return Err(dim_err("layer_norm", (m, n), self.dims(p)));
            }
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let (mean, var) = row_moments(row);
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            m,
            n,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.dims(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding row",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv[id * h..(id + 1) * h]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(out, ids.len(), h, Op::Gather(table, ids.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(dim_err("concat_rows", (rows, cols), (r, c)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(out, rows, cols, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start > end || end > r {
            return Err(Error::Index {
                what: "row slice end",
                index: end,
                bound: r,
            });
        }
        let out = self.value(x)[start * c..end * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(out, end - start, c, Op::SliceRows(x, start), rg))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index {
                    what: "row",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, idx.len(), c, Op::SelectRows(x, idx.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(dim_err("concat_cols", (rows, total), (r, c)));
            }
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let pv = self.value(p);
            for i in 0..rows {
                out[i * total + off..i * total + off + c].copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(out, rows, total, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start > end || end > c {
            return Err(Error::Index {
                what: "column slice end",
                index: end,
                bound: c,
            });
        }
        let w = end - start;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, r, w, Op::SliceCols(x, start), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.dims(logits);
        if targets.len() != b {
            return Err(dim_err("cross_entropy", (b, c), (targets.len(), 1)));
        }
        if b == 0 {
            return Err(Error::contract("cross_entropy over an empty batch"));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            if t >= c {
                return Err(Error::Index {
                    what: "class target",
                    index: t,
                    bound: c,
                });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![loss / b as f64],
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![s], 1, 1, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column means over rows (mean pooling), giving 1×n.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks(c.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / r.max(1) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(&[x]);
        self.push(out, 1, c, Op::MeanRows(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.node(loss);
        if n.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {}x{}",
                n.rows, n.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if let Some(ga) = self.slot(*a, grads) {
                    // dA += dC · Bᵀ
                    matmul_nt_into(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    // dB += Aᵀ · dC
                    let av = self.value(*a);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (r, gv) in row.iter_mut().zip(gi) {
                                *r += a_ip * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if let Some(ga) = self.slot(*a, grads) {
                    // dA += dC · B
                    matmul_into(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    // dB += dCᵀ · A
                    let av = self.value(*a);
                    for i in 0..m {
                        let ai = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            let c = g[i * n + j];
                            let row = &mut gb[j * k..(j + 1) * k];
                            for (r, x) in row.iter_mut().zip(ai) {
                                *r += c * x;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    // node is rows×cols, input is cols×rows
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[j * rows + i] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(v, grads) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(*a, grads) {
                    for ((x, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gv * y;
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for ((x, gv), y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gv * y;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(gx) = self.slot(*x, grads) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for row in g.chunks(cols.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for ((a, b), y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *a += b * (1.0 - y * y);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(*x, grads) {
                    for ((a, b), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += b * gelu_grad(v);
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    let c = cols.max(1);
                    for ((gr, yr), out) in g.chunks(c).zip(node.value.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), y) in out.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gv - dot);
                        }
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
                let n = cols;
                let gv = self.value(*gamma).to_vec();
                if let Some(gg) = self.slot(*gamma, grads) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, a), h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += a * h;
                        }
                    }
                }
                if let Some(gb) = self.slot(*beta, grads) {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.slot(*x, grads) {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for i in 0..rows {
                        let gr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv_std[i] / nf;
                        for j in 0..n {
                            gx[i * n + j] += k * (nf * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Gather(table, ids) => {
                if let Some(gt) = self.slot(*table, grads) {
                    let h = cols;
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(p, grads) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                if let Some(gx) = self.slot(*x, grads) {
                    let off = start * cols;
                    add_into(&mut gx[off..off + g.len()], g);
                }
            }
            Op::SelectRows(x, idx) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.dims(p);
                    if let Some(gp) = self.slot(p, grads) {
                        for i in 0..rows {
                            add_into(
                                &mut gp[i * c..(i + 1) * c],
                                &g[i * cols + off..i * cols + off + c],
                            );
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols(x, start) => {
                let (_, c) = self.dims(*x);
                if let Some(gx) = self.slot(*x, grads) {
                    for i in 0..rows {
                        add_into(
                            &mut gx[i * c + start..i * c + start + cols],
                            &g[i * cols..(i + 1) * cols],
                        );
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (b, c) = self.dims(*logits);
                if let Some(gl) = self.slot(*logits, grads) {
                    let k = g[0] / b as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * c + j] += k * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = self.dims(*x);
                let inv = 1.0 / r.max(1) as f64;
                if let Some(gx) = self.slot(*x, grads) {
                    for row in gx.chunks_mut(c.max(1)) {
                        for (a, b) in row.iter_mut().zip(g) {
                            *a += b * inv;
                        }
                    }
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated lazily; `None` for constants.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut [f64]> {
        let n = &self.nodes[v.0];
        if !n.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `out += a · b` for row-major a (m×k), b (k×n).
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for a (m×k), b (n×k).
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn masked_softmax_in_place(row: &mut [f64], mask: &[bool]) {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (v, &m) in row.iter_mut().zip(mask) {
        *v = if m { (*v - max).exp() } else { 0.0 };
        z += *v;
    }
    if z > 0.0 {
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central-difference check of d(loss)/d(input) for a graph built by `f`.
    fn check_grad(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x, true).unwrap()).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or(vec![0.0; x.len()]);
            for i in 0..x.len() {
                let eval = |delta: f64| {
                    let mut ins = inputs.to_vec();
                    ins[k].data_mut()[i] += delta;
                    let mut tp = Tape::new();
                    let vs: Vec<Var> = ins.iter().map(|x| tp.leaf(x, false).unwrap()).collect();
                    let l = f(&mut tp, &vs);
                    tp.value(l)[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (analytic[i] - numeric).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
                assert!(err < 1e-4, "input {k}[{i}]: analytic {} numeric {numeric}", analytic[i]);
            }
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true).unwrap();
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0), true).unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(&Tensor::zeros(&[4, 5])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let l = tape.constant(&t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let ce = tape.cross_entropy(l, &[1]).unwrap();
        assert!((tape.value(ce)[0] - 3f64.ln()).abs() < 1e-12);
        let l = tape.constant(&t(&[1, 3], &[0.0, 800.0, 0.0])).unwrap();
        let ce = tape.cross_entropy(l, &[1]).unwrap();
        assert!(tape.value(ce)[0].abs() < 1e-12);
        assert!(matches!(tape.cross_entropy(l, &[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn grad_matmul_and_nt() {
        check_grad(&[rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)], |tp, v| {
            let y = tp.matmul(v[0], v[1]).unwrap();
            let y = tp.tanh(y);
            tp.sum(y)
        });
        check_grad(&[rand_t(&[3, 4], 3), rand_t(&[5, 4], 4)], |tp, v| {
            let y = tp.matmul_nt(v[0], v[1]).unwrap();
            let y = tp.gelu(y);
            tp.sum(y)
        });
    }

    #[test]
    fn grad_cross_entropy_random_4x3() {
        check_grad(&[rand_t(&[4, 3], 5)], |tp, v| tp.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap());
    }

    #[test]
    fn grad_softmax_layernorm_gelu() {
        check_grad(&[rand_t(&[3, 5], 6), rand_t(&[1, 5], 7), rand_t(&[1, 5], 8), rand_t(&[3, 5], 9)], |tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let y = tp.gelu(y);
            let s = tp.softmax(y, 1).unwrap();
            let w = tp.mul(s, v[3]).unwrap();
            tp.sum(w)
        });
        check_grad(&[rand_t(&[3, 4], 10), rand_t(&[3, 4], 11)], |tp, v| {
            let s = tp.softmax(v[0], 0).unwrap();
            let w = tp.mul(s, v[1]).unwrap();
            tp.sum(w)
        });
    }

    #[test]
    fn grad_structural_ops() {
        check_grad(&[rand_t(&[5, 4], 12), rand_t(&[2, 4], 13), rand_t(&[1, 4], 14)], |tp, v| {
            let g = tp.gather(v[0], &[1, 3, 1]).unwrap();
            let c = tp.concat_rows(&[v[1], g]).unwrap();
            let c = tp.add_row(c, v[2]).unwrap();
            let s = tp.slice_rows(c, 1, 4).unwrap();
            let a = tp.slice_cols(s, 0, 2).unwrap();
            let b = tp.slice_cols(s, 2, 4).unwrap();
            let cc = tp.concat_cols(&[b, a]).unwrap();
            let sel = tp.select_rows(cc, &[2, 0]).unwrap();
            let tr = tp.transpose(sel);
            let m = tp.mean_rows(tr);
            let sq = tp.mul(m, m).unwrap();
            let d = tp.sub(sq, m).unwrap();
            let d = tp.scale(d, 0.7);
            tp.sum(d)
        });
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 3], &[1.0, 5.0, 2.0, 0.0, 9.0, 0.0])).unwrap();
        let s = tape.softmax_rows(x, Some(&[true, false, true]));
        let v = tape.value(s);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[4], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_moments() {
        let mut tape = Tape::new();
        let x = tape.constant(&rand_t(&[4, 16], 20)).unwrap();
        let g = tape.constant(&Tensor::full(&[1, 16], 1.0)).unwrap();
        let b = tape.constant(&Tensor::zeros(&[1, 16])).unwrap();
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        for row in tape.value(y).chunks(16) {
            let (mean, var) = row_moments(row);
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(&rand_t(&[2, 2], 1), false).unwrap();
        let b = tape.leaf(&rand_t(&[2, 2], 2), true).unwrap();
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }
}
