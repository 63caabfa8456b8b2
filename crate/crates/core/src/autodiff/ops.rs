//! Tensor operations: forward kernels, tape records, and gradient rules.
//!
//! Shape policy: operands must match exactly; the only implicit broadcast
//! is scalar-with-tensor. Operations whose contracts name an error return
//! `Result`; elementwise helpers treat shape mismatches as programming
//! errors and panic.

use std::sync::Arc;

use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Operand handle captured by a tape node: the node id when the operand
/// is tracked, plus a snapshot of its values for the gradient rule.
pub(crate) struct Opnd<S: Scalar> {
    id: Option<NodeId>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Opnd<S> {
    fn of(t: &Tensor<S>) -> Self {
        Opnd {
            id: t.node,
            data: Arc::clone(&t.data),
        }
    }
}

pub(crate) struct ConvDims {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add { a: Opnd<S>, b: Opnd<S> },
    Sub { a: Opnd<S>, b: Opnd<S> },
    Mul { a: Opnd<S>, b: Opnd<S> },
    Neg { a: Opnd<S> },
    Scale { a: Opnd<S>, c: S },
    AddConst { a: Opnd<S> },
    Matmul { a: Opnd<S>, b: Opnd<S>, m: usize, k: usize, n: usize },
    MatmulNT { a: Opnd<S>, b: Opnd<S>, m: usize, k: usize, n: usize },
    Matvec { w: Opnd<S>, x: Opnd<S>, m: usize, k: usize },
    AddRow { a: Opnd<S>, b: Opnd<S>, rows: usize, cols: usize },
    Softmax { a: Opnd<S>, y: Arc<Vec<S>>, lane: usize, inner: usize },
    LogSoftmax { a: Opnd<S>, y: Arc<Vec<S>>, lane: usize, inner: usize },
    Sigmoid { a: Opnd<S>, y: Arc<Vec<S>> },
    Tanh { a: Opnd<S>, y: Arc<Vec<S>> },
    Relu { a: Opnd<S> },
    Exp { a: Opnd<S>, y: Arc<Vec<S>> },
    Clamp { a: Opnd<S>, lo: S, hi: S },
    Minimum { a: Opnd<S>, b: Opnd<S> },
    Sum { a: Opnd<S> },
    Mean { a: Opnd<S> },
    Concat { parts: Vec<(Option<NodeId>, usize)> },
    Slice { a: Opnd<S>, start: usize, src_len: usize },
    Reshape { a: Opnd<S> },
    Conv2d { x: Opnd<S>, w: Opnd<S>, b: Option<Opnd<S>>, dims: ConvDims },
}

// ── forward kernels ──────────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n], accumulated row-wise so the inner loop is a
/// contiguous multiply-add.
fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * *bv;
            }
        }
    }
    c
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ.
fn matmul_nt_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += *av * *bv;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// C[k×n] = A[m×k]ᵀ · B[m×n].
fn matmul_tn_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let c_row = &mut c[l * n..(l + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * *bv;
            }
        }
    }
    c
}

fn matvec_kernel<S: Scalar>(w: &[S], x: &[S], m: usize, k: usize) -> Vec<S> {
    let mut y = vec![S::zero(); m];
    for i in 0..m {
        let row = &w[i * k..(i + 1) * k];
        let mut acc = S::zero();
        for (wv, xv) in row.iter().zip(x) {
            acc += *wv * *xv;
        }
        y[i] = acc;
    }
    y
}

/// Lane-wise softmax with max subtraction. `lane` is the softmax axis
/// length; `inner` the stride between consecutive lane elements.
fn softmax_kernel<S: Scalar>(x: &[S], lane: usize, inner: usize, log: bool) -> Vec<S> {
    let mut y = vec![S::zero(); x.len()];
    let outer = x.len() / (lane * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut max = x[base];
            for l in 1..lane {
                let v = x[base + l * inner];
                if v > max {
                    max = v;
                }
            }
            let mut denom = S::zero();
            for l in 0..lane {
                denom += (x[base + l * inner] - max).exp();
            }
            if log {
                let log_denom = denom.ln();
                for l in 0..lane {
                    y[base + l * inner] = x[base + l * inner] - max - log_denom;
                }
            } else {
                for l in 0..lane {
                    y[base + l * inner] = (x[base + l * inner] - max).exp() / denom;
                }
            }
        }
    }
    y
}

/// Unfolds conv input into a `[patch × positions]` matrix.
fn build_col<S: Scalar>(x: &[S], d: &ConvDims) -> Vec<S> {
    let p = d.positions();
    let mut col = vec![S::zero(); d.patch() * p];
    let mut ri = 0;
    for ic in 0..d.in_c {
        let plane = &x[ic * d.in_h * d.in_w..(ic + 1) * d.in_h * d.in_w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let c_row = &mut col[ri * p..(ri + 1) * p];
                let mut pi = 0;
                for oy in 0..d.out_h {
                    let x_row = &plane[(oy * d.stride + ky) * d.in_w..];
                    for ox in 0..d.out_w {
                        c_row[pi] = x_row[ox * d.stride + kx];
                        pi += 1;
                    }
                }
                ri += 1;
            }
        }
    }
    col
}

/// Transposed unfold, `[positions × patch]`; used by the backward pass so
/// both gradient contractions stay contiguous.
fn build_col_t<S: Scalar>(x: &[S], d: &ConvDims) -> Vec<S> {
    let r = d.patch();
    let mut col = vec![S::zero(); d.positions() * r];
    let mut pi = 0;
    for oy in 0..d.out_h {
        for ox in 0..d.out_w {
            let c_row = &mut col[pi * r..(pi + 1) * r];
            let mut ri = 0;
            for ic in 0..d.in_c {
                let plane = &x[ic * d.in_h * d.in_w..];
                for ky in 0..d.kh {
                    let x_row = &plane[(oy * d.stride + ky) * d.in_w + ox * d.stride..];
                    for kx in 0..d.kw {
                        c_row[ri] = x_row[kx];
                        ri += 1;
                    }
                }
            }
            pi += 1;
        }
    }
    col
}

fn conv_forward<S: Scalar>(x: &[S], w: &[S], b: Option<&[S]>, d: &ConvDims) -> Vec<S> {
    let p = d.positions();
    let col = build_col(x, d);
    let mut y = matmul_kernel(w, &col, d.out_c, d.patch(), p);
    if let Some(bias) = b {
        for oc in 0..d.out_c {
            let bv = bias[oc];
            for v in &mut y[oc * p..(oc + 1) * p] {
                *v += bv;
            }
        }
    }
    y
}

// ── gradient rules ───────────────────────────────────────────────────

/// Contribution of `adj` to an operand that may have been a broadcast
/// scalar: collapse by summing when the operand had a single element.
fn spread_or_sum<S: Scalar>(adj: &[S], operand_len: usize) -> Vec<S> {
    if operand_len == adj.len() {
        adj.to_vec()
    } else {
        debug_assert_eq!(operand_len, 1);
        let mut acc = S::zero();
        for v in adj {
            acc += *v;
        }
        vec![acc]
    }
}

impl<S: Scalar> Op<S> {
    pub(crate) fn backward(&self, adj: &[S], sink: &mut dyn FnMut(NodeId, Vec<S>)) {
        match self {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if let Some(id) = a.id {
                    sink(id, spread_or_sum(adj, a.data.len()));
                }
                if let Some(id) = b.id {
                    sink(id, spread_or_sum(adj, b.data.len()));
                }
            }
            Op::Sub { a, b } => {
                if let Some(id) = a.id {
                    sink(id, spread_or_sum(adj, a.data.len()));
                }
                if let Some(id) = b.id {
                    let mut g = spread_or_sum(adj, b.data.len());
                    for v in &mut g {
                        *v = -*v;
                    }
                    sink(id, g);
                }
            }
            Op::Mul { a, b } => {
                if let Some(id) = a.id {
                    sink(id, mul_grad(adj, &b.data, a.data.len()));
                }
                if let Some(id) = b.id {
                    sink(id, mul_grad(adj, &a.data, b.data.len()));
                }
            }
            Op::Neg { a } => {
                if let Some(id) = a.id {
                    sink(id, adj.iter().map(|v| -*v).collect());
                }
            }
            Op::Scale { a, c } => {
                if let Some(id) = a.id {
                    sink(id, adj.iter().map(|v| *v * *c).collect());
                }
            }
            Op::AddConst { a } => {
                if let Some(id) = a.id {
                    sink(id, adj.to_vec());
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if let Some(id) = a.id {
                    sink(id, matmul_nt_kernel(adj, &b.data, *m, *n, *k));
                }
                if let Some(id) = b.id {
                    sink(id, matmul_tn_kernel(&a.data, adj, *m, *k, *n));
                }
            }
            Op::MatmulNT { a, b, m, k, n } => {
                if let Some(id) = a.id {
                    sink(id, matmul_kernel(adj, &b.data, *m, *n, *k));
                }
                if let Some(id) = b.id {
                    sink(id, matmul_tn_kernel(adj, &a.data, *m, *n, *k));
                }
            }
            Op::Matvec { w, x, m, k } => {
                if let Some(id) = w.id {
                    let mut dw = vec![S::zero(); m * k];
                    for i in 0..*m {
                        let av = adj[i];
                        let row = &mut dw[i * k..(i + 1) * k];
                        for (dv, xv) in row.iter_mut().zip(x.data.iter()) {
                            *dv = av * *xv;
                        }
                    }
                    sink(id, dw);
                }
                if let Some(id) = x.id {
                    let mut dx = vec![S::zero(); *k];
                    for i in 0..*m {
                        let av = adj[i];
                        let row = &w.data[i * k..(i + 1) * k];
                        for (dv, wv) in dx.iter_mut().zip(row) {
                            *dv += av * *wv;
                        }
                    }
                    sink(id, dx);
                }
            }
            Op::AddRow { a, b, rows, cols } => {
                if let Some(id) = a.id {
                    sink(id, adj.to_vec());
                }
                if let Some(id) = b.id {
                    let mut db = vec![S::zero(); *cols];
                    for r in 0..*rows {
                        for (dv, av) in db.iter_mut().zip(&adj[r * cols..(r + 1) * cols]) {
                            *dv += *av;
                        }
                    }
                    sink(id, db);
                }
            }
            Op::Softmax { a, y, lane, inner } => {
                let (lane, inner) = (*lane, *inner);
                if let Some(id) = a.id {
                    let mut dx = vec![S::zero(); y.len()];
                    let outer = y.len() / (lane * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            let mut dot = S::zero();
                            for l in 0..lane {
                                let idx = base + l * inner;
                                dot += adj[idx] * y[idx];
                            }
                            for l in 0..lane {
                                let idx = base + l * inner;
                                dx[idx] = y[idx] * (adj[idx] - dot);
                            }
                        }
                    }
                    sink(id, dx);
                }
            }
            Op::LogSoftmax { a, y, lane, inner } => {
                let (lane, inner) = (*lane, *inner);
                if let Some(id) = a.id {
                    let mut dx = vec![S::zero(); y.len()];
                    let outer = y.len() / (lane * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            let mut total = S::zero();
                            for l in 0..lane {
                                total += adj[base + l * inner];
                            }
                            for l in 0..lane {
                                let idx = base + l * inner;
                                dx[idx] = adj[idx] - y[idx].exp() * total;
                            }
                        }
                    }
                    sink(id, dx);
                }
            }
            Op::Sigmoid { a, y } => {
                if let Some(id) = a.id {
                    sink(
                        id,
                        adj.iter()
                            .zip(y.iter())
                            .map(|(av, yv)| *av * *yv * (S::one() - *yv))
                            .collect(),
                    );
                }
            }
            Op::Tanh { a, y } => {
                if let Some(id) = a.id {
                    sink(
                        id,
                        adj.iter()
                            .zip(y.iter())
                            .map(|(av, yv)| *av * (S::one() - *yv * *yv))
                            .collect(),
                    );
                }
            }
            Op::Relu { a } => {
                if let Some(id) = a.id {
                    sink(
                        id,
                        adj.iter()
                            .zip(a.data.iter())
                            .map(|(av, xv)| if *xv > S::zero() { *av } else { S::zero() })
                            .collect(),
                    );
                }
            }
            Op::Exp { a, y } => {
                if let Some(id) = a.id {
                    sink(
                        id,
                        adj.iter().zip(y.iter()).map(|(av, yv)| *av * *yv).collect(),
                    );
                }
            }
            Op::Clamp { a, lo, hi } => {
                if let Some(id) = a.id {
                    sink(
                        id,
                        adj.iter()
                            .zip(a.data.iter())
                            .map(|(av, xv)| {
                                if *xv >= *lo && *xv <= *hi {
                                    *av
                                } else {
                                    S::zero()
                                }
                            })
                            .collect(),
                    );
                }
            }
            Op::Minimum { a, b } => {
                if let Some(id) = a.id {
                    sink(
                        id,
                        adj.iter()
                            .zip(a.data.iter().zip(b.data.iter()))
                            .map(|(av, (x, y))| if *x <= *y { *av } else { S::zero() })
                            .collect(),
                    );
                }
                if let Some(id) = b.id {
                    sink(
                        id,
                        adj.iter()
                            .zip(a.data.iter().zip(b.data.iter()))
                            .map(|(av, (x, y))| if *y < *x { *av } else { S::zero() })
                            .collect(),
                    );
                }
            }
            Op::Sum { a } => {
                if let Some(id) = a.id {
                    sink(id, vec![adj[0]; a.data.len()]);
                }
            }
            Op::Mean { a } => {
                if let Some(id) = a.id {
                    let g = adj[0] / S::from_f64(a.data.len() as f64);
                    sink(id, vec![g; a.data.len()]);
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for (id, len) in parts {
                    if let Some(id) = id {
                        sink(*id, adj[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Slice { a, start, src_len } => {
                if let Some(id) = a.id {
                    let mut g = vec![S::zero(); *src_len];
                    g[*start..*start + adj.len()].copy_from_slice(adj);
                    sink(id, g);
                }
            }
            Op::Reshape { a } => {
                if let Some(id) = a.id {
                    sink(id, adj.to_vec());
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let r = dims.patch();
                let p = dims.positions();
                if x.id.is_some() || w.id.is_some() {
                    let col_t = build_col_t(&x.data, dims);
                    if let Some(id) = w.id {
                        // dW[out_c×r] = adj[out_c×p] · col_t[p×r]
                        sink(id, matmul_kernel(adj, &col_t, dims.out_c, p, r));
                    }
                    if let Some(id) = x.id {
                        // d(col_t)[p×r] = adjᵀ-indexed axpy over output channels
                        let mut dcol_t = vec![S::zero(); p * r];
                        for pi in 0..p {
                            let drow = &mut dcol_t[pi * r..(pi + 1) * r];
                            for oc in 0..dims.out_c {
                                let av = adj[oc * p + pi];
                                let w_row = &w.data[oc * r..(oc + 1) * r];
                                for (dv, wv) in drow.iter_mut().zip(w_row) {
                                    *dv += av * *wv;
                                }
                            }
                        }
                        // fold patches back onto the input plane
                        let mut dx = vec![S::zero(); dims.in_c * dims.in_h * dims.in_w];
                        let mut pi = 0;
                        for oy in 0..dims.out_h {
                            for ox in 0..dims.out_w {
                                let drow = &dcol_t[pi * r..(pi + 1) * r];
                                let mut ri = 0;
                                for ic in 0..dims.in_c {
                                    let plane = ic * dims.in_h * dims.in_w;
                                    for ky in 0..dims.kh {
                                        let base = plane
                                            + (oy * dims.stride + ky) * dims.in_w
                                            + ox * dims.stride;
                                        for kx in 0..dims.kw {
                                            dx[base + kx] += drow[ri];
                                            ri += 1;
                                        }
                                    }
                                }
                                pi += 1;
                            }
                        }
                        sink(id, dx);
                    }
                }
                if let Some(bias) = b {
                    if let Some(id) = bias.id {
                        let mut db = vec![S::zero(); dims.out_c];
                        for oc in 0..dims.out_c {
                            let mut acc = S::zero();
                            for v in &adj[oc * p..(oc + 1) * p] {
                                acc += *v;
                            }
                            db[oc] = acc;
                        }
                        sink(id, db);
                    }
                }
            }
        }
    }
}

fn mul_grad<S: Scalar>(adj: &[S], other: &[S], operand_len: usize) -> Vec<S> {
    if operand_len == adj.len() {
        if other.len() == 1 {
            adj.iter().map(|v| *v * other[0]).collect()
        } else {
            adj.iter().zip(other).map(|(a, o)| *a * *o).collect()
        }
    } else {
        debug_assert_eq!(operand_len, 1);
        let mut acc = S::zero();
        for (a, o) in adj.iter().zip(other) {
            acc += *a * *o;
        }
        vec![acc]
    }
}

// ── tensor methods ───────────────────────────────────────────────────

/// Resolves the tape shared by the operands; panics when two operands
/// sit on different tapes.
fn shared_graph<'a, S: Scalar>(ts: &[&'a Tensor<S>]) -> Option<&'a Graph<S>> {
    let mut found: Option<&Graph<S>> = None;
    for t in ts {
        if let Some(g) = &t.graph {
            match found {
                None => found = Some(g),
                Some(prev) => assert!(prev.same(g), "operands belong to different tapes"),
            }
        }
    }
    found
}

fn emit<S: Scalar>(
    operands: &[&Tensor<S>],
    op_builder: impl FnOnce() -> Op<S>,
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
) -> Tensor<S> {
    match shared_graph(operands) {
        Some(g) => g.clone().record(op_builder(), shape, data),
        None => Tensor::from_arc(shape, data),
    }
}

fn binary_shape<'a, S: Scalar>(op: &str, a: &'a Tensor<S>, b: &'a Tensor<S>) -> &'a [usize] {
    if a.shape() == b.shape() {
        a.shape()
    } else if b.numel() == 1 {
        a.shape()
    } else if a.numel() == 1 {
        b.shape()
    } else {
        panic!(
            "{op}: incompatible shapes {:?} vs {:?} (only scalar broadcast is allowed)",
            a.shape(),
            b.shape()
        );
    }
}

fn broadcast_zip<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
    } else if b.len() == 1 {
        a.iter().map(|x| f(*x, b[0])).collect()
    } else {
        b.iter().map(|y| f(a[0], *y)).collect()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        let shape = binary_shape("add", self, other).to_vec();
        let data = Arc::new(broadcast_zip(self.data(), other.data(), |a, b| a + b));
        emit(
            &[self, other],
            || Op::Add {
                a: Opnd::of(self),
                b: Opnd::of(other),
            },
            shape,
            data,
        )
    }

    pub fn sub(&self, other: &Tensor<S>) -> Tensor<S> {
        let shape = binary_shape("sub", self, other).to_vec();
        let data = Arc::new(broadcast_zip(self.data(), other.data(), |a, b| a - b));
        emit(
            &[self, other],
            || Op::Sub {
                a: Opnd::of(self),
                b: Opnd::of(other),
            },
            shape,
            data,
        )
    }

    pub fn mul(&self, other: &Tensor<S>) -> Tensor<S> {
        let shape = binary_shape("mul", self, other).to_vec();
        let data = Arc::new(broadcast_zip(self.data(), other.data(), |a, b| a * b));
        emit(
            &[self, other],
            || Op::Mul {
                a: Opnd::of(self),
                b: Opnd::of(other),
            },
            shape,
            data,
        )
    }

    pub fn neg(&self) -> Tensor<S> {
        let data = Arc::new(self.data().iter().map(|v| -*v).collect());
        emit(
            &[self],
            || Op::Neg { a: Opnd::of(self) },
            self.shape.clone(),
            data,
        )
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let data = Arc::new(self.data().iter().map(|v| *v * c).collect());
        emit(
            &[self],
            || Op::Scale {
                a: Opnd::of(self),
                c,
            },
            self.shape.clone(),
            data,
        )
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        let data = Arc::new(self.data().iter().map(|v| *v + c).collect());
        emit(
            &[self],
            || Op::AddConst { a: Opnd::of(self) },
            self.shape.clone(),
            data,
        )
    }

    /// Standard matrix product `[m×k]·[k×n]`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = as_2d("matmul", self)?;
        let (k2, n) = as_2d("matmul", other)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = Arc::new(matmul_kernel(self.data(), other.data(), m, k, n));
        Ok(emit(
            &[self, other],
            || Op::Matmul {
                a: Opnd::of(self),
                b: Opnd::of(other),
                m,
                k,
                n,
            },
            vec![m, n],
            data,
        ))
    }

    /// `[m×k]·[n×k]ᵀ`; the right operand is used transposed.
    pub fn matmul_nt(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = as_2d("matmul_nt", self)?;
        let (n, k2) = as_2d("matmul_nt", other)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = Arc::new(matmul_nt_kernel(self.data(), other.data(), m, k, n));
        Ok(emit(
            &[self, other],
            || Op::MatmulNT {
                a: Opnd::of(self),
                b: Opnd::of(other),
                m,
                k,
                n,
            },
            vec![m, n],
            data,
        ))
    }

    /// Matrix-vector product `[m×k]·[k]`.
    pub fn matvec(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = as_2d("matvec", self)?;
        if x.shape().len() != 1 || x.numel() != k {
            return Err(Error::Shape {
                op: "matvec",
                lhs: self.shape.clone(),
                rhs: x.shape.clone(),
            });
        }
        let data = Arc::new(matvec_kernel(self.data(), x.data(), m, k));
        Ok(emit(
            &[self, x],
            || Op::Matvec {
                w: Opnd::of(self),
                x: Opnd::of(x),
                m,
                k,
            },
            vec![m],
            data,
        ))
    }

    /// Adds a row vector to every row of a 2-D tensor.
    pub fn add_row(&self, bias: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.shape.len(), 2, "add_row needs a 2-D tensor");
        let (rows, cols) = (self.shape[0], self.shape[1]);
        assert_eq!(bias.numel(), cols, "add_row bias length mismatch");
        let mut out = self.data().to_vec();
        for r in 0..rows {
            for (o, b) in out[r * cols..(r + 1) * cols].iter_mut().zip(bias.data()) {
                *o += *b;
            }
        }
        emit(
            &[self, bias],
            || Op::AddRow {
                a: Opnd::of(self),
                b: Opnd::of(bias),
                rows,
                cols,
            },
            self.shape.clone(),
            Arc::new(out),
        )
    }

    /// Softmax along `axis`; every slice sums to one, computed with max
    /// subtraction so large logits do not overflow.
    pub fn softmax(&self, axis: usize) -> Tensor<S> {
        let (lane, inner) = lane_dims(&self.shape, axis);
        let data = Arc::new(softmax_kernel(self.data(), lane, inner, false));
        let y = Arc::clone(&data);
        emit(
            &[self],
            || Op::Softmax {
                a: Opnd::of(self),
                y,
                lane,
                inner,
            },
            self.shape.clone(),
            data,
        )
    }

    pub fn log_softmax(&self, axis: usize) -> Tensor<S> {
        let (lane, inner) = lane_dims(&self.shape, axis);
        let data = Arc::new(softmax_kernel(self.data(), lane, inner, true));
        let y = Arc::clone(&data);
        emit(
            &[self],
            || Op::LogSoftmax {
                a: Opnd::of(self),
                y,
                lane,
                inner,
            },
            self.shape.clone(),
            data,
        )
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let data: Arc<Vec<S>> = Arc::new(
            self.data()
                .iter()
                .map(|v| S::one() / (S::one() + (-*v).exp()))
                .collect(),
        );
        let y = Arc::clone(&data);
        emit(
            &[self],
            || Op::Sigmoid {
                a: Opnd::of(self),
                y,
            },
            self.shape.clone(),
            data,
        )
    }

    pub fn tanh(&self) -> Tensor<S> {
        let data: Arc<Vec<S>> = Arc::new(self.data().iter().map(|v| v.tanh()).collect());
        let y = Arc::clone(&data);
        emit(
            &[self],
            || Op::Tanh {
                a: Opnd::of(self),
                y,
            },
            self.shape.clone(),
            data,
        )
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&self) -> Tensor<S> {
        let data = Arc::new(
            self.data()
                .iter()
                .map(|v| if *v > S::zero() { *v } else { S::zero() })
                .collect(),
        );
        emit(
            &[self],
            || Op::Relu { a: Opnd::of(self) },
            self.shape.clone(),
            data,
        )
    }

    pub fn exp(&self) -> Tensor<S> {
        let data: Arc<Vec<S>> = Arc::new(self.data().iter().map(|v| v.exp()).collect());
        let y = Arc::clone(&data);
        emit(
            &[self],
            || Op::Exp {
                a: Opnd::of(self),
                y,
            },
            self.shape.clone(),
            data,
        )
    }

    /// Clamp to `[lo, hi]`; gradients pass inside the interval and are
    /// zero outside.
    pub fn clamp(&self, lo: S, hi: S) -> Tensor<S> {
        let data = Arc::new(
            self.data()
                .iter()
                .map(|v| {
                    if *v < lo {
                        lo
                    } else if *v > hi {
                        hi
                    } else {
                        *v
                    }
                })
                .collect(),
        );
        emit(
            &[self],
            || Op::Clamp {
                a: Opnd::of(self),
                lo,
                hi,
            },
            self.shape.clone(),
            data,
        )
    }

    /// Elementwise minimum; the gradient follows the smaller operand
    /// (ties go to the left).
    pub fn minimum(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.shape(), other.shape(), "minimum: shape mismatch");
        let data = Arc::new(
            self.data()
                .iter()
                .zip(other.data())
                .map(|(a, b)| if *a <= *b { *a } else { *b })
                .collect(),
        );
        emit(
            &[self, other],
            || Op::Minimum {
                a: Opnd::of(self),
                b: Opnd::of(other),
            },
            self.shape.clone(),
            data,
        )
    }

    pub fn sum(&self) -> Tensor<S> {
        let mut acc = S::zero();
        for v in self.data() {
            acc += *v;
        }
        emit(
            &[self],
            || Op::Sum { a: Opnd::of(self) },
            vec![1],
            Arc::new(vec![acc]),
        )
    }

    pub fn mean(&self) -> Tensor<S> {
        let mut acc = S::zero();
        for v in self.data() {
            acc += *v;
        }
        let n = S::from_f64(self.numel() as f64);
        emit(
            &[self],
            || Op::Mean { a: Opnd::of(self) },
            vec![1],
            Arc::new(vec![acc / n]),
        )
    }

    /// Concatenation of 1-D tensors into one 1-D tensor.
    pub fn concat(parts: &[&Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        Self::concat_impl(parts, |total| vec![total])
    }

    /// Stacks equal-length 1-D tensors as the rows of a 2-D tensor.
    pub fn stack_rows(rows: &[&Tensor<S>]) -> Tensor<S> {
        assert!(!rows.is_empty(), "stack_rows of zero tensors");
        let width = rows[0].numel();
        assert!(
            rows.iter().all(|r| r.numel() == width),
            "stack_rows: rows must have equal length"
        );
        let count = rows.len();
        Self::concat_impl(rows, |_| vec![count, width])
    }

    fn concat_impl(parts: &[&Tensor<S>], shape: impl FnOnce(usize) -> Vec<usize>) -> Tensor<S> {
        let total: usize = parts.iter().map(|p| p.numel()).sum();
        let mut data = Vec::with_capacity(total);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let meta: Vec<(Option<NodeId>, usize)> =
            parts.iter().map(|p| (p.node, p.numel())).collect();
        emit(
            parts,
            || Op::Concat { parts: meta },
            shape(total),
            Arc::new(data),
        )
    }

    /// Contiguous 1-D slice.
    pub fn slice(&self, start: usize, len: usize) -> Tensor<S> {
        assert_eq!(self.shape.len(), 1, "slice needs a 1-D tensor");
        self.slice_flat(start, len)
    }

    /// Row of a 2-D tensor as a 1-D tensor.
    pub fn row(&self, r: usize) -> Tensor<S> {
        assert_eq!(self.shape.len(), 2, "row needs a 2-D tensor");
        let cols = self.shape[1];
        self.slice_flat(r * cols, cols)
    }

    fn slice_flat(&self, start: usize, len: usize) -> Tensor<S> {
        assert!(start + len <= self.numel(), "slice out of bounds");
        let data = Arc::new(self.data()[start..start + len].to_vec());
        let src_len = self.numel();
        emit(
            &[self],
            || Op::Slice {
                a: Opnd::of(self),
                start,
                src_len,
            },
            vec![len],
            data,
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor<S> {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape changes element count");
        emit(
            &[self],
            || Op::Reshape { a: Opnd::of(self) },
            shape,
            Arc::clone(&self.data),
        )
    }

    /// Valid cross-correlation of `[in_c×H×W]` input with
    /// `[out_c×in_c×kh×kw]` kernels.
    pub fn conv2d(
        &self,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
    ) -> Result<Tensor<S>> {
        assert!(stride >= 1, "conv2d stride must be positive");
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (in_c, in_h, in_w) = (xs[0], xs[1], xs[2]);
        let (out_c, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > in_h || kw > in_w {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if let Some(b) = bias {
            assert_eq!(b.numel(), out_c, "conv2d bias length mismatch");
        }
        let dims = ConvDims {
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            stride,
            out_h: (in_h - kh) / stride + 1,
            out_w: (in_w - kw) / stride + 1,
        };
        let data = Arc::new(conv_forward(
            self.data(),
            weight.data(),
            bias.map(|b| b.data()),
            &dims,
        ));
        let shape = vec![out_c, dims.out_h, dims.out_w];
        let mut operands: Vec<&Tensor<S>> = vec![self, weight];
        if let Some(b) = bias {
            operands.push(b);
        }
        Ok(emit(
            &operands,
            || Op::Conv2d {
                x: Opnd::of(self),
                w: Opnd::of(weight),
                b: bias.map(Opnd::of),
                dims,
            },
            shape,
            data,
        ))
    }
}

fn as_2d<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    if t.shape().len() == 2 {
        Ok((t.shape()[0], t.shape()[1]))
    } else {
        Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        })
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize) {
    assert!(axis < shape.len(), "softmax axis out of range");
    let lane = shape[axis];
    assert!(lane >= 1, "softmax axis must be non-empty");
    let inner: usize = shape[axis + 1..].iter().product();
    (lane, inner)
}
