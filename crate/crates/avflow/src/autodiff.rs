//! Reverse-mode automatic differentiation over f64 matrices: an eagerly
//! evaluated Wengert list. Every model forward builds a fresh tape; `backward`
//! walks it once and accumulates gradients into the input nodes. Gradients only
//! propagate through nodes reachable from trainable inputs, so constant
//! subgraphs (targets, interpolation matrices) cost nothing in reverse.

use crate::tensor::{matmul, Mat};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-6;

// The scalar payloads of AddConst/SqrtEps are not needed by their backward
// rules (derivatives are 1 and 0.5/y), but keep the tape self-describing.
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op {
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// (n,d) + broadcast (1,d)
    AddRow(NodeId, NodeId),
    /// (n,d) ⊙ broadcast (1,d)
    MulRow(NodeId, NodeId),
    AddConst(NodeId, f64),
    Scale(NodeId, f64),
    Matmul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    SoftmaxRows(NodeId),
    /// Per-row (x − mean) / sqrt(var + eps); no affine part.
    NormalizeRows(NodeId),
    /// elu(x) + 1: the positive feature map for linear attention.
    EluP1(NodeId),
    Silu(NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// Row-gather from an embedding table.
    Embed(NodeId, Vec<usize>),
    /// (n,d) → (n,1) row sums.
    SumCols(NodeId),
    /// Mean over all elements → (1,1).
    MeanAll(NodeId),
    Div(NodeId, NodeId),
    /// (n,d) / broadcast (n,1)
    DivCol(NodeId, NodeId),
    /// sqrt(x + eps), elementwise.
    SqrtEps(NodeId, f64),
}

pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Mat>,
    requires: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), vals: Vec::new(), requires: Vec::new() }
    }

    pub fn val(&self, id: NodeId) -> &Mat {
        &self.vals[id]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, val: Mat, requires: bool) -> NodeId {
        self.ops.push(op);
        self.vals.push(val);
        self.requires.push(requires);
        self.vals.len() - 1
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.requires[i])
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn input(&mut self, m: Mat) -> NodeId {
        self.push(Op::Input, m, true)
    }

    /// Constant leaf: no gradient is ever propagated into it.
    pub fn constant(&mut self, m: Mat) -> NodeId {
        self.push(Op::Input, m, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.vals[a], &self.vals[b]);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape");
        let mut out = va.clone();
        for (o, x) in out.data.iter_mut().zip(&vb.data) {
            *o += x;
        }
        let r = self.req(&[a, b]);
        self.push(Op::Add(a, b), out, r)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.vals[a], &self.vals[b]);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "sub shape");
        let mut out = va.clone();
        for (o, x) in out.data.iter_mut().zip(&vb.data) {
            *o -= x;
        }
        let r = self.req(&[a, b]);
        self.push(Op::Sub(a, b), out, r)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.vals[a], &self.vals[b]);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "mul shape");
        let mut out = va.clone();
        for (o, x) in out.data.iter_mut().zip(&vb.data) {
            *o *= x;
        }
        let r = self.req(&[a, b]);
        self.push(Op::Mul(a, b), out, r)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (&self.vals[a], &self.vals[row]);
        assert_eq!(vr.rows, 1, "add_row broadcast operand must be (1,d)");
        assert_eq!(va.cols, vr.cols, "add_row width");
        let mut out = va.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += vr.data[c];
            }
        }
        let rq = self.req(&[a, row]);
        self.push(Op::AddRow(a, row), out, rq)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (&self.vals[a], &self.vals[row]);
        assert_eq!(vr.rows, 1, "mul_row broadcast operand must be (1,d)");
        assert_eq!(va.cols, vr.cols, "mul_row width");
        let mut out = va.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] *= vr.data[c];
            }
        }
        let rq = self.req(&[a, row]);
        self.push(Op::MulRow(a, row), out, rq)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.vals[a].clone();
        for v in &mut out.data {
            *v += c;
        }
        let r = self.requires[a];
        self.push(Op::AddConst(a, c), out, r)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.vals[a].clone();
        for v in &mut out.data {
            *v *= c;
        }
        let r = self.requires[a];
        self.push(Op::Scale(a, c), out, r)
    }

    pub fn matmul(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        let out = matmul(&self.vals[a], ta, &self.vals[b], tb);
        let r = self.req(&[a, b]);
        self.push(Op::Matmul { a, b, ta, tb }, out, r)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.vals[a];
        let mut out = va.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let r = self.requires[a];
        self.push(Op::SoftmaxRows(a), out, r)
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.vals[a];
        let mut out = va.clone();
        let d = out.cols as f64;
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let r = self.requires[a];
        self.push(Op::NormalizeRows(a), out, r)
    }

    pub fn elu_p1(&mut self, a: NodeId) -> NodeId {
        let mut out = self.vals[a].clone();
        for v in &mut out.data {
            *v = if *v > 0.0 { *v + 1.0 } else { v.exp() };
        }
        let r = self.requires[a];
        self.push(Op::EluP1(a), out, r)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.vals[a].clone();
        for v in &mut out.data {
            *v *= 1.0 / (1.0 + (-*v).exp());
        }
        let r = self.requires[a];
        self.push(Op::Silu(a), out, r)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = &self.vals[a];
        assert!(start + len <= va.rows, "slice_rows bounds");
        let out = Mat::from_vec(
            len,
            va.cols,
            va.data[start * va.cols..(start + len) * va.cols].to_vec(),
        );
        let r = self.requires[a];
        self.push(Op::SliceRows(a, start, len), out, r)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = &self.vals[a];
        assert!(start + len <= va.cols, "slice_cols bounds");
        let mut out = Mat::zeros(va.rows, len);
        for r in 0..va.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&va.data[r * va.cols + start..r * va.cols + start + len]);
        }
        let r = self.requires[a];
        self.push(Op::SliceCols(a, start, len), out, r)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.vals[parts[0]].cols;
        let rows: usize = parts.iter().map(|&p| self.vals[p].rows).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let vp = &self.vals[p];
            assert_eq!(vp.cols, cols, "concat_rows width");
            out.data[at..at + vp.data.len()].copy_from_slice(&vp.data);
            at += vp.data.len();
        }
        let r = self.req(parts);
        self.push(Op::ConcatRows(parts.to_vec()), out, r)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.vals[parts[0]].rows;
        let cols: usize = parts.iter().map(|&p| self.vals[p].cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let vp = &self.vals[p];
            assert_eq!(vp.rows, rows, "concat_cols height");
            for r in 0..rows {
                out.data[r * cols + at..r * cols + at + vp.cols]
                    .copy_from_slice(&vp.data[r * vp.cols..(r + 1) * vp.cols]);
            }
            at += vp.cols;
        }
        let r = self.req(parts);
        self.push(Op::ConcatCols(parts.to_vec()), out, r)
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let vt = &self.vals[table];
        let mut out = Mat::zeros(ids.len(), vt.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < vt.rows, "embedding id out of table");
            out.data[r * vt.cols..(r + 1) * vt.cols]
                .copy_from_slice(&vt.data[id * vt.cols..(id + 1) * vt.cols]);
        }
        let rq = self.requires[table];
        self.push(Op::Embed(table, ids.to_vec()), out, rq)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let va = &self.vals[a];
        let mut out = Mat::zeros(va.rows, 1);
        for r in 0..va.rows {
            out.data[r] = va.row(r).iter().sum();
        }
        let rq = self.requires[a];
        self.push(Op::SumCols(a), out, rq)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = &self.vals[a];
        let m = va.data.iter().sum::<f64>() / va.numel() as f64;
        let rq = self.requires[a];
        self.push(Op::MeanAll(a), Mat::from_vec(1, 1, vec![m]), rq)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.vals[a], &self.vals[b]);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "div shape");
        let mut out = va.clone();
        for (o, x) in out.data.iter_mut().zip(&vb.data) {
            *o /= x;
        }
        let r = self.req(&[a, b]);
        self.push(Op::Div(a, b), out, r)
    }

    pub fn div_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (va, vc) = (&self.vals[a], &self.vals[col]);
        assert_eq!(vc.cols, 1, "div_col operand must be (n,1)");
        assert_eq!(va.rows, vc.rows, "div_col height");
        let mut out = va.clone();
        for r in 0..out.rows {
            let inv = 1.0 / vc.data[r];
            for c in 0..out.cols {
                out.data[r * out.cols + c] *= inv;
            }
        }
        let rq = self.req(&[a, col]);
        self.push(Op::DivCol(a, col), out, rq)
    }

    pub fn sqrt_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        let mut out = self.vals[a].clone();
        for v in &mut out.data {
            *v = (*v + eps).sqrt();
        }
        let r = self.requires[a];
        self.push(Op::SqrtEps(a, eps), out, r)
    }

    /// Reverse pass from a scalar (1,1) node; returns per-node gradients.
    /// Nodes unreachable from trainable inputs keep `None`.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Mat>> {
        let lv = &self.vals[loss];
        assert_eq!((lv.rows, lv.cols), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = vec![None; self.vals.len()];
        grads[loss] = Some(Mat::from_vec(1, 1, vec![1.0]));
        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.requires[id] {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.step_back(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn acc(&self, grads: &mut [Option<Mat>], id: NodeId, delta: Mat) {
        if !self.requires[id] {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                debug_assert_eq!((g.rows, g.cols), (delta.rows, delta.cols));
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn step_back(&self, id: NodeId, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.ops[id] {
            Op::Input => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let mut n = g.clone();
                for v in &mut n.data {
                    *v = -*v;
                }
                self.acc(grads, *b, n);
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                for (v, x) in da.data.iter_mut().zip(&self.vals[*b].data) {
                    *v *= x;
                }
                self.acc(grads, *a, da);
                let mut db = g.clone();
                for (v, x) in db.data.iter_mut().zip(&self.vals[*a].data) {
                    *v *= x;
                }
                self.acc(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                let mut dr = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        dr.data[c] += g.data[r * g.cols + c];
                    }
                }
                self.acc(grads, *row, dr);
            }
            Op::MulRow(a, row) => {
                let vr = &self.vals[*row];
                let mut da = g.clone();
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        da.data[r * g.cols + c] *= vr.data[c];
                    }
                }
                self.acc(grads, *a, da);
                let va = &self.vals[*a];
                let mut dr = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        dr.data[c] += g.data[r * g.cols + c] * va.data[r * g.cols + c];
                    }
                }
                self.acc(grads, *row, dr);
            }
            Op::AddConst(a, _) => self.acc(grads, *a, g.clone()),
            Op::Scale(a, c) => {
                let mut da = g.clone();
                for v in &mut da.data {
                    *v *= c;
                }
                self.acc(grads, *a, da);
            }
            Op::Matmul { a, b, ta, tb } => {
                let (va, vb) = (&self.vals[*a], &self.vals[*b]);
                if self.requires[*a] {
                    let dap = matmul(g, false, vb, !tb);
                    self.acc(grads, *a, if *ta { dap.transpose() } else { dap });
                }
                if self.requires[*b] {
                    let dbp = matmul(va, !ta, g, false);
                    self.acc(grads, *b, if *tb { dbp.transpose() } else { dbp });
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &self.vals[id];
                let mut da = Mat::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let dot: f64 = (0..g.cols)
                        .map(|c| g.data[r * g.cols + c] * y.data[r * g.cols + c])
                        .sum();
                    for c in 0..g.cols {
                        da.data[r * g.cols + c] =
                            y.data[r * g.cols + c] * (g.data[r * g.cols + c] - dot);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::NormalizeRows(a) => {
                let x = &self.vals[*a];
                let y = &self.vals[id];
                let d = x.cols as f64;
                let mut da = Mat::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let gm: f64 = g.row(r).iter().sum::<f64>() / d;
                    let gym: f64 = (0..x.cols)
                        .map(|c| g.data[r * x.cols + c] * y.data[r * x.cols + c])
                        .sum::<f64>()
                        / d;
                    for c in 0..x.cols {
                        da.data[r * x.cols + c] =
                            inv * (g.data[r * x.cols + c] - gm - y.data[r * x.cols + c] * gym);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::EluP1(a) => {
                let x = &self.vals[*a];
                let mut da = g.clone();
                for (v, xv) in da.data.iter_mut().zip(&x.data) {
                    *v *= if *xv > 0.0 { 1.0 } else { xv.exp() };
                }
                self.acc(grads, *a, da);
            }
            Op::Silu(a) => {
                let x = &self.vals[*a];
                let mut da = g.clone();
                for (v, xv) in da.data.iter_mut().zip(&x.data) {
                    let s = 1.0 / (1.0 + (-xv).exp());
                    *v *= s + xv * s * (1.0 - s);
                }
                self.acc(grads, *a, da);
            }
            Op::SliceRows(a, start, len) => {
                let va = &self.vals[*a];
                let mut da = Mat::zeros(va.rows, va.cols);
                da.data[start * va.cols..(start + len) * va.cols].copy_from_slice(&g.data);
                self.acc(grads, *a, da);
            }
            Op::SliceCols(a, start, len) => {
                let va = &self.vals[*a];
                let mut da = Mat::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    da.data[r * va.cols + start..r * va.cols + start + len]
                        .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                self.acc(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let vp = &self.vals[p];
                    let dp = Mat::from_vec(
                        vp.rows,
                        vp.cols,
                        g.data[at..at + vp.data.len()].to_vec(),
                    );
                    at += vp.data.len();
                    self.acc(grads, p, dp);
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let vp = &self.vals[p];
                    let mut dp = Mat::zeros(vp.rows, vp.cols);
                    for r in 0..vp.rows {
                        dp.data[r * vp.cols..(r + 1) * vp.cols].copy_from_slice(
                            &g.data[r * g.cols + at..r * g.cols + at + vp.cols],
                        );
                    }
                    at += vp.cols;
                    self.acc(grads, p, dp);
                }
            }
            Op::Embed(table, ids) => {
                let vt = &self.vals[*table];
                let mut dt = Mat::zeros(vt.rows, vt.cols);
                for (r, &tok) in ids.iter().enumerate() {
                    for c in 0..vt.cols {
                        dt.data[tok * vt.cols + c] += g.data[r * vt.cols + c];
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::SumCols(a) => {
                let va = &self.vals[*a];
                let mut da = Mat::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    for c in 0..va.cols {
                        da.data[r * va.cols + c] = g.data[r];
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let va = &self.vals[*a];
                let s = g.data[0] / va.numel() as f64;
                self.acc(grads, *a, Mat::filled(va.rows, va.cols, s));
            }
            Op::Div(a, b) => {
                let (va, vb) = (&self.vals[*a], &self.vals[*b]);
                if self.requires[*a] {
                    let mut da = g.clone();
                    for (v, bv) in da.data.iter_mut().zip(&vb.data) {
                        *v /= bv;
                    }
                    self.acc(grads, *a, da);
                }
                if self.requires[*b] {
                    let mut db = g.clone();
                    for ((v, av), bv) in db.data.iter_mut().zip(&va.data).zip(&vb.data) {
                        *v *= -av / (bv * bv);
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::DivCol(a, col) => {
                let (va, vc) = (&self.vals[*a], &self.vals[*col]);
                if self.requires[*a] {
                    let mut da = g.clone();
                    for r in 0..da.rows {
                        let inv = 1.0 / vc.data[r];
                        for c in 0..da.cols {
                            da.data[r * da.cols + c] *= inv;
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.requires[*col] {
                    let mut dc = Mat::zeros(vc.rows, 1);
                    for r in 0..va.rows {
                        let mut s = 0.0;
                        for c in 0..va.cols {
                            s += g.data[r * va.cols + c] * va.data[r * va.cols + c];
                        }
                        dc.data[r] = -s / (vc.data[r] * vc.data[r]);
                    }
                    self.acc(grads, *col, dc);
                }
            }
            Op::SqrtEps(a, _) => {
                let y = &self.vals[id];
                let mut da = g.clone();
                for (v, yv) in da.data.iter_mut().zip(&y.data) {
                    *v *= 0.5 / yv;
                }
                self.acc(grads, *a, da);
            }
        }
    }
}
