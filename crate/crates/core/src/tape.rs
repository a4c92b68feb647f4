//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] records primitive operations in topological order during the
//! forward pass; [`Tape::backward`] replays them once in reverse. Tapes are
//! built fresh for every training step and dropped afterwards, so gradients
//! can never accumulate silently across steps.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_nt_acc, matmul_tn_acc, Scalar, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Row-major visibility mask for masked softmax. `true` = visible.
pub type VisMask = Rc<Vec<bool>>;

enum Op<E: Scalar> {
    Leaf,
    Add(usize, usize),
    Scale(usize, E),
    /// A[m x k] * B[k x n]
    Matmul(usize, usize),
    /// A[m x k] * B[n x k]^T
    MatmulNT(usize, usize),
    /// Softmax over the last axis, restricted to visible entries.
    /// Masked entries get probability exactly zero.
    SoftmaxRows(usize, Option<VisMask>),
    LogSoftmaxRows(usize),
    /// x, gain, bias; eps on the variance.
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: E,
    },
    Relu(usize),
    /// Row lookup into a table (embedding).
    Gather(usize, Rc<Vec<usize>>),
    ConcatRows(Vec<usize>),
    SliceRows {
        a: usize,
        start: usize,
        rows: usize,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        a: usize,
        start: usize,
        cols: usize,
    },
    SumAll(usize),
    /// Elementwise product with a constant (non-differentiated) tensor.
    MulConst(usize, Rc<Vec<E>>),
    /// Cosine similarity of two flat vectors; scalar output.
    CosineSim(usize, usize),
}

pub struct Tape<E: Scalar> {
    values: Vec<Tensor<E>>,
    grads: Vec<Option<Vec<E>>>,
    ops: Vec<Op<E>>,
    backward_done: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0].as_deref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.values[v.0].shape
    }

    // ---- primitives ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.values[a.0].shape, self.values[b.0].shape,
            "add: shape mismatch"
        );
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.values[a.0].shape.clone();
        self.push(Tensor { shape, data }, Op::Add(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: E) -> Var {
        let data = self.values[a.0].data.iter().map(|&x| x * k).collect();
        let shape = self.values[a.0].shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(a.0, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.values[a.0].rows_cols();
        let (k2, n) = self.values[b.0].rows_cols();
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree, {:?} vs {:?}",
                self.values[a.0].shape, self.values[b.0].shape
            )));
        }
        let mut out = vec![E::zero(); m * n];
        matmul_nn(m, k, n, &self.values[a.0].data, &self.values[b.0].data, &mut out);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::Matmul(a.0, b.0),
        ))
    }

    /// A[m x k] * B[n x k]^T -> [m x n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.values[a.0].rows_cols();
        let (n, k2) = self.values[b.0].rows_cols();
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt: inner dimensions disagree, {:?} vs {:?}",
                self.values[a.0].shape, self.values[b.0].shape
            )));
        }
        let mut out = vec![E::zero(); m * n];
        matmul_nt(m, k, n, &self.values[a.0].data, &self.values[b.0].data, &mut out);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatmulNT(a.0, b.0),
        ))
    }

    /// Numerically stabilized softmax over the last axis. With a mask, the
    /// max and the normalizer run over visible entries only, so masked
    /// positions come out exactly zero regardless of their input values.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<VisMask>) -> Var {
        let (rows, cols) = self.values[a.0].rows_cols();
        if let Some(m) = &mask {
            assert_eq!(m.len(), rows * cols, "softmax mask size");
        }
        let x = &self.values[a.0].data;
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let visible = |j: usize| mask.as_ref().map_or(true, |m| m[r * cols + j]);
            let mut mx = E::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if visible(j) && v > mx {
                    mx = v;
                }
            }
            if mx == E::neg_infinity() {
                continue; // fully masked row stays zero
            }
            let mut sum = E::zero();
            for (j, &v) in row.iter().enumerate() {
                if visible(j) {
                    let e = (v - mx).exp();
                    out[r * cols + j] = e;
                    sum = sum + e;
                }
            }
            for j in 0..cols {
                if visible(j) {
                    out[r * cols + j] = out[r * cols + j] / sum;
                }
            }
        }
        let shape = self.values[a.0].shape.clone();
        self.push(Tensor { shape, data: out }, Op::SoftmaxRows(a.0, mask))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.values[a.0].rows_cols();
        let x = &self.values[a.0].data;
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let lse = mx
                + row
                    .iter()
                    .map(|&v| (v - mx).exp())
                    .fold(E::zero(), |s, e| s + e)
                    .ln();
            for j in 0..cols {
                out[r * cols + j] = row[j] - lse;
            }
        }
        let shape = self.values[a.0].shape.clone();
        self.push(Tensor { shape, data: out }, Op::LogSoftmaxRows(a.0))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: E) -> Var {
        let (rows, cols) = self.values[x.0].rows_cols();
        assert_eq!(self.values[gain.0].numel(), cols, "layer_norm gain size");
        assert_eq!(self.values[bias.0].numel(), cols, "layer_norm bias size");
        let xd = &self.values[x.0].data;
        let g = &self.values[gain.0].data;
        let b = &self.values[bias.0].data;
        let nf = E::of_f64(cols as f64);
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().cloned().fold(E::zero(), |s, v| s + v) / nf;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(E::zero(), |s, v| s + v)
                / nf;
            let inv = (var + eps).sqrt().recip();
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let shape = self.values[x.0].shape.clone();
        self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.values[a.0]
            .data
            .iter()
            .map(|&x| if x > E::zero() { x } else { E::zero() })
            .collect();
        let shape = self.values[a.0].shape.clone();
        self.push(Tensor { shape, data }, Op::Relu(a.0))
    }

    pub fn gather(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Var {
        let (rows, cols) = self.values[table.0].rows_cols();
        let t = &self.values[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids.iter() {
            assert!(id < rows, "gather: id {} out of range {}", id, rows);
            out.extend_from_slice(&t[id * cols..(id + 1) * cols]);
        }
        self.push(
            Tensor {
                shape: vec![ids.len(), cols],
                data: out,
            },
            Op::Gather(table.0, ids),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.values[parts[0].0].rows_cols().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.values[p.0].rows_cols();
            assert_eq!(c, cols, "concat_rows: column mismatch");
            rows += r;
            data.extend_from_slice(&self.values[p.0].data);
        }
        let shape = if cols == 1 && parts.iter().all(|&p| self.values[p.0].shape.len() == 1) {
            vec![rows]
        } else {
            vec![rows, cols]
        };
        self.push(
            Tensor { shape, data },
            Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, rows: usize) -> Var {
        let (r, c) = self.values[a.0].rows_cols();
        assert!(start + rows <= r, "slice_rows out of range");
        let data = self.values[a.0].data[start * c..(start + rows) * c].to_vec();
        self.push(
            Tensor {
                shape: vec![rows, c],
                data,
            },
            Op::SliceRows { a: a.0, start, rows },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.values[parts[0].0].rows_cols().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.values[p.0].rows_cols();
                assert_eq!(r, rows, "concat_cols: row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![E::zero(); rows * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let c = widths[pi];
            for r in 0..rows {
                data[r * total + off..r * total + off + c]
                    .copy_from_slice(&self.values[p.0].data[r * c..(r + 1) * c]);
            }
            off += c;
        }
        self.push(
            Tensor {
                shape: vec![rows, total],
                data,
            },
            Op::ConcatCols(parts.iter().map(|v| v.0).collect()),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, cols: usize) -> Var {
        let (r, c) = self.values[a.0].rows_cols();
        assert!(start + cols <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * cols);
        for row in 0..r {
            data.extend_from_slice(&self.values[a.0].data[row * c + start..row * c + start + cols]);
        }
        self.push(
            Tensor {
                shape: vec![r, cols],
                data,
            },
            Op::SliceCols { a: a.0, start, cols },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data.iter().cloned().fold(E::zero(), |a, b| a + b);
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn mul_const(&mut self, a: Var, c: Rc<Vec<E>>) -> Var {
        assert_eq!(self.values[a.0].numel(), c.len(), "mul_const size");
        let data = self.values[a.0]
            .data
            .iter()
            .zip(c.iter())
            .map(|(&x, &k)| x * k)
            .collect();
        let shape = self.values[a.0].shape.clone();
        self.push(Tensor { shape, data }, Op::MulConst(a.0, c))
    }

    /// Cosine similarity of two flat vectors of equal length.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let un = self.values[u.0].numel();
        let vn = self.values[v.0].numel();
        if un != vn {
            return Err(Error::Shape(format!(
                "cosine_sim: lengths {un} vs {vn}"
            )));
        }
        let ud = &self.values[u.0].data;
        let vd = &self.values[v.0].data;
        let dot = ud.iter().zip(vd).map(|(&a, &b)| a * b).fold(E::zero(), |s, x| s + x);
        let nu = ud.iter().map(|&a| a * a).fold(E::zero(), |s, x| s + x).sqrt();
        let nv = vd.iter().map(|&a| a * a).fold(E::zero(), |s, x| s + x).sqrt();
        if nu == E::zero() || nv == E::zero() {
            return Err(Error::Domain("cosine_sim: zero-norm input".into()));
        }
        let c = dot / (nu * nv);
        Ok(self.push(Tensor::scalar(c), Op::CosineSim(u.0, v.0)))
    }

    // ---- backward --------------------------------------------------------

    fn acc(grads: &mut [Option<Vec<E>>], idx: usize, n: usize, f: impl FnOnce(&mut [E])) {
        let g = grads[idx].get_or_insert_with(|| vec![E::zero(); n]);
        f(g);
    }

    /// Run reverse accumulation from a scalar loss. Errors on non-scalar
    /// losses and on repeated invocation without a fresh tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Numeric(
                "backward already ran on this tape; build a fresh tape per step".into(),
            ));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.values[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.ops[i] {
                Op::Leaf => {
                    self.grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    let n = g.len();
                    Self::acc(&mut self.grads, a, n, |ga| {
                        for (x, &y) in ga.iter_mut().zip(&g) {
                            *x = *x + y;
                        }
                    });
                    Self::acc(&mut self.grads, b, n, |gb| {
                        for (x, &y) in gb.iter_mut().zip(&g) {
                            *x = *x + y;
                        }
                    });
                }
                Op::Scale(a, k) => {
                    let (a, k) = (*a, *k);
                    let n = g.len();
                    Self::acc(&mut self.grads, a, n, |ga| {
                        for (x, &y) in ga.iter_mut().zip(&g) {
                            *x = *x + y * k;
                        }
                    });
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.values[a].rows_cols();
                    let n = self.values[b].rows_cols().1;
                    // dA += dC * B^T ; dB += A^T * dC
                    let (av, bv) = (&self.values[a].data, &self.values[b].data);
                    let na = self.values[a].numel();
                    let nb = self.values[b].numel();
                    {
                        let ga = self.grads[a].get_or_insert_with(|| vec![E::zero(); na]);
                        matmul_nt_acc(m, n, k, &g, bv, ga);
                    }
                    {
                        let gb = self.grads[b].get_or_insert_with(|| vec![E::zero(); nb]);
                        matmul_tn_acc(k, m, n, av, &g, gb);
                    }
                }
                Op::MatmulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.values[a].rows_cols();
                    let n = self.values[b].rows_cols().0;
                    // C = A B^T : dA += dC * B ; dB += dC^T * A
                    let (av, bv) = (&self.values[a].data, &self.values[b].data);
                    let na = self.values[a].numel();
                    let nb = self.values[b].numel();
                    {
                        let ga = self.grads[a].get_or_insert_with(|| vec![E::zero(); na]);
                        // dA(m x k) += dC(m x n) * B(n x k)
                        E::gemm(m, n, k, E::one(), &g, n as isize, 1, bv, k as isize, 1, E::one(), ga);
                    }
                    {
                        let gb = self.grads[b].get_or_insert_with(|| vec![E::zero(); nb]);
                        // dB(n x k) += dC^T(n x m) * A(m x k)
                        E::gemm(n, m, k, E::one(), &g, 1, n as isize, av, k as isize, 1, E::one(), gb);
                    }
                }
                Op::SoftmaxRows(a, mask) => {
                    let a = *a;
                    let mask = mask.clone();
                    let (rows, cols) = self.values[i].rows_cols();
                    let p = &self.values[i].data;
                    let n = self.values[a].numel();
                    let ga = self.grads[a].get_or_insert_with(|| vec![E::zero(); n]);
                    for r in 0..rows {
                        let mut dot = E::zero();
                        for j in 0..cols {
                            dot = dot + g[r * cols + j] * p[r * cols + j];
                        }
                        for j in 0..cols {
                            let visible = mask.as_ref().map_or(true, |m| m[r * cols + j]);
                            if visible {
                                let idx = r * cols + j;
                                ga[idx] = ga[idx] + p[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let a = *a;
                    let (rows, cols) = self.values[i].rows_cols();
                    let y = &self.values[i].data;
                    let n = self.values[a].numel();
                    let ga = self.grads[a].get_or_insert_with(|| vec![E::zero(); n]);
                    for r in 0..rows {
                        let mut gsum = E::zero();
                        for j in 0..cols {
                            gsum = gsum + g[r * cols + j];
                        }
                        for j in 0..cols {
                            let idx = r * cols + j;
                            ga[idx] = ga[idx] + g[idx] - y[idx].exp() * gsum;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let (rows, cols) = self.values[x].rows_cols();
                    let nf = E::of_f64(cols as f64);
                    let xd = self.values[x].data.clone();
                    let gd = self.values[gain.to_owned()].data.clone();
                    let nx = self.values[x].numel();
                    {
                        let gx = self.grads[x].get_or_insert_with(|| vec![E::zero(); nx]);
                        for r in 0..rows {
                            let row = &xd[r * cols..(r + 1) * cols];
                            let mean = row.iter().cloned().fold(E::zero(), |s, v| s + v) / nf;
                            let var = row
                                .iter()
                                .map(|&v| (v - mean) * (v - mean))
                                .fold(E::zero(), |s, v| s + v)
                                / nf;
                            let inv = (var + eps).sqrt().recip();
                            // dxhat = dy * gain
                            let mut sum_dxhat = E::zero();
                            let mut sum_dxhat_xhat = E::zero();
                            for j in 0..cols {
                                let xhat = (row[j] - mean) * inv;
                                let dxhat = g[r * cols + j] * gd[j];
                                sum_dxhat = sum_dxhat + dxhat;
                                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                            }
                            for j in 0..cols {
                                let xhat = (row[j] - mean) * inv;
                                let dxhat = g[r * cols + j] * gd[j];
                                let dx = (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf) * inv;
                                gx[r * cols + j] = gx[r * cols + j] + dx;
                            }
                        }
                    }
                    Self::acc(&mut self.grads, gain, cols, |gg| {
                        for r in 0..rows {
                            let row = &xd[r * cols..(r + 1) * cols];
                            let mean = row.iter().cloned().fold(E::zero(), |s, v| s + v) / nf;
                            let var = row
                                .iter()
                                .map(|&v| (v - mean) * (v - mean))
                                .fold(E::zero(), |s, v| s + v)
                                / nf;
                            let inv = (var + eps).sqrt().recip();
                            for j in 0..cols {
                                gg[j] = gg[j] + g[r * cols + j] * (row[j] - mean) * inv;
                            }
                        }
                    });
                    Self::acc(&mut self.grads, bias, cols, |gb| {
                        for r in 0..rows {
                            for j in 0..cols {
                                gb[j] = gb[j] + g[r * cols + j];
                            }
                        }
                    });
                }
                Op::Relu(a) => {
                    let a = *a;
                    let n = self.values[a].numel();
                    let xd = &self.values[a].data;
                    let ga = self.grads[a].get_or_insert_with(|| vec![E::zero(); n]);
                    for j in 0..n {
                        if xd[j] > E::zero() {
                            ga[j] = ga[j] + g[j];
                        }
                    }
                }
                Op::Gather(table, ids) => {
                    let table = *table;
                    let ids = ids.clone();
                    let cols = self.values[table].rows_cols().1;
                    let n = self.values[table].numel();
                    let gt = self.grads[table].get_or_insert_with(|| vec![E::zero(); n]);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[id * cols + j] = gt[id * cols + j] + g[r * cols + j];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let n = self.values[p].numel();
                        Self::acc(&mut self.grads, p, n, |gp| {
                            for (x, &y) in gp.iter_mut().zip(&g[off..off + n]) {
                                *x = *x + y;
                            }
                        });
                        off += n;
                    }
                }
                Op::SliceRows { a, start, rows } => {
                    let (a, start, rows) = (*a, *start, *rows);
                    let c = self.values[a].rows_cols().1;
                    let n = self.values[a].numel();
                    Self::acc(&mut self.grads, a, n, |ga| {
                        for (x, &y) in ga[start * c..(start + rows) * c].iter_mut().zip(&g) {
                            *x = *x + y;
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let rows = self.values[i].rows_cols().0;
                    let total = self.values[i].rows_cols().1;
                    let mut off = 0;
                    for p in parts {
                        let c = self.values[p].rows_cols().1;
                        let n = self.values[p].numel();
                        Self::acc(&mut self.grads, p, n, |gp| {
                            for r in 0..rows {
                                for j in 0..c {
                                    gp[r * c + j] = gp[r * c + j] + g[r * total + off + j];
                                }
                            }
                        });
                        off += c;
                    }
                }
                Op::SliceCols { a, start, cols } => {
                    let (a, start, cols) = (*a, *start, *cols);
                    let (r, c) = self.values[a].rows_cols();
                    let n = self.values[a].numel();
                    Self::acc(&mut self.grads, a, n, |ga| {
                        for row in 0..r {
                            for j in 0..cols {
                                ga[row * c + start + j] = ga[row * c + start + j] + g[row * cols + j];
                            }
                        }
                    });
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let n = self.values[a].numel();
                    let gs = g[0];
                    Self::acc(&mut self.grads, a, n, |ga| {
                        for x in ga.iter_mut() {
                            *x = *x + gs;
                        }
                    });
                }
                Op::MulConst(a, c) => {
                    let a = *a;
                    let c = c.clone();
                    let n = self.values[a].numel();
                    Self::acc(&mut self.grads, a, n, |ga| {
                        for j in 0..n {
                            ga[j] = ga[j] + g[j] * c[j];
                        }
                    });
                }
                Op::CosineSim(u, v) => {
                    let (u, v) = (*u, *v);
                    let gs = g[0];
                    let n = self.values[u].numel();
                    let ud = self.values[u].data.clone();
                    let vd = self.values[v].data.clone();
                    let dot = ud.iter().zip(&vd).map(|(&a, &b)| a * b).fold(E::zero(), |s, x| s + x);
                    let nu = ud.iter().map(|&a| a * a).fold(E::zero(), |s, x| s + x).sqrt();
                    let nv = vd.iter().map(|&a| a * a).fold(E::zero(), |s, x| s + x).sqrt();
                    let c = dot / (nu * nv);
                    Self::acc(&mut self.grads, u, n, |gu| {
                        for j in 0..n {
                            gu[j] = gu[j] + gs * (vd[j] / (nu * nv) - c * ud[j] / (nu * nu));
                        }
                    });
                    Self::acc(&mut self.grads, v, n, |gv| {
                        for j in 0..n {
                            gv[j] = gv[j] + gs * (ud[j] / (nu * nv) - c * vd[j] / (nv * nv));
                        }
                    });
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let w = t.leaf(Tensor::of_f64(vec![3], &[1.0, 2.0, 3.0]));
        let loss = t.sum_all(w);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_self_gradient_is_2w() {
        let mut t = Tape::<f64>::new();
        let w = t.leaf(Tensor::of_f64(vec![1, 3], &[1.0, -2.0, 3.0]));
        let ww = t.matmul_nt(w, w).unwrap();
        let loss = t.sum_all(ww);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut t = Tape::<f64>::new();
        let w = t.leaf(Tensor::of_f64(vec![1], &[2.0]));
        let loss = t.sum_all(w);
        t.backward(loss).unwrap();
        assert!(t.backward(loss).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let w = t.leaf(Tensor::of_f64(vec![2], &[1.0, 2.0]));
        assert!(t.backward(w).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::<f64>::new();
        let i2 = t.leaf(Tensor::of_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = t.leaf(Tensor::of_f64(vec![2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let c = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(c).data, vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_1x2_2x1() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::of_f64(vec![1, 2], &[1.0, 2.0]));
        let b = t.leaf(Tensor::of_f64(vec![2, 1], &[3.0, 4.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data, vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::<f64>::zeros(vec![2, 3]));
        let b = t.leaf(Tensor::<f64>::zeros(vec![2, 2]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::of_f64(vec![1, 3], &[0.0, 0.0, 0.0]));
        let p = t.softmax_rows(x, None);
        for &v in &t.value(p).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let y = t.leaf(Tensor::of_f64(vec![1, 3], &[1.0, 2.0, 3.0]));
        let yc = t.leaf(Tensor::of_f64(vec![1, 3], &[101.0, 102.0, 103.0]));
        let py = t.softmax_rows(y, None);
        let pyc = t.softmax_rows(yc, None);
        for (a, b) in t.value(py).data.iter().zip(&t.value(pyc).data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_softmax_is_exactly_zero_on_masked() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::of_f64(vec![1, 3], &[5.0, 100.0, 1.0]));
        let mask = Rc::new(vec![true, false, true]);
        let p = t.softmax_rows(x, Some(mask));
        let d = &t.value(p).data;
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_extremes() {
        let mut t = Tape::<f64>::new();
        let v = t.leaf(Tensor::of_f64(vec![2], &[3.0, 4.0]));
        let c = t.cosine_sim(v, v).unwrap();
        assert!((t.value(c).item() - 1.0).abs() < 1e-12);

        let e1 = t.leaf(Tensor::of_f64(vec![2], &[1.0, 0.0]));
        let e2 = t.leaf(Tensor::of_f64(vec![2], &[0.0, 1.0]));
        let c2 = t.cosine_sim(e1, e2).unwrap();
        assert_eq!(t.value(c2).item(), 0.0);

        let nv = t.scale(v, -1.0);
        let c3 = t.cosine_sim(v, nv).unwrap();
        assert!((t.value(c3).item() + 1.0).abs() < 1e-12);

        let z = t.leaf(Tensor::of_f64(vec![2], &[0.0, 0.0]));
        assert!(t.cosine_sim(v, z).is_err());
    }

    #[test]
    fn layer_norm_constant_input_yields_bias() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::of_f64(vec![1, 4], &[7.0, 7.0, 7.0, 7.0]));
        let g = t.leaf(Tensor::of_f64(vec![4], &[1.0; 4]));
        let b = t.leaf(Tensor::of_f64(vec![4], &[0.5, -0.5, 2.0, 0.0]));
        let y = t.layer_norm(x, g, b, 1e-5);
        for (out, bias) in t.value(y).data.iter().zip(&t.value(b).data) {
            assert!((out - bias).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::of_f64(vec![1, 2], &[1.0, -1.0]));
        let g = t.leaf(Tensor::of_f64(vec![2], &[1.0, 1.0]));
        let b = t.leaf(Tensor::of_f64(vec![2], &[0.0, 0.0]));
        let y = t.layer_norm(x, g, b, 1e-12);
        assert!((t.value(y).data[0] - 1.0).abs() < 1e-6);
        assert!((t.value(y).data[1] + 1.0).abs() < 1e-6);
    }
}
