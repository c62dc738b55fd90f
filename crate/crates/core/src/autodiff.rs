//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Parameters are copied onto the tape the first time they are used, every
//! primitive appends one node, and [`Tape::backward`] walks the node list in
//! reverse. Nodes are only ever appended after their inputs, so reverse index
//! order is a reverse topological order.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, row_stats};

/// Handle to a value on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, rstd: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    /// Interleaved channel-pair rotation; `cos`/`sin` are `rows x cols/2`.
    Rotary { x: Var, cos: Vec<f64>, sin: Vec<f64> },
    Gather { table: Var, indices: Vec<usize> },
    Sum(Var),
    MeanSquaredError { x: Var, target: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    nan_in_softmax: bool,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            nan_in_softmax: false,
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

    /// True once any softmax on this tape has seen a NaN input.
    pub fn nan_in_softmax(&self) -> bool {
        self.nan_in_softmax
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::shape("constant", &[rows, cols], &[value.len()]));
        }
        Ok(self.push(rows, cols, value, Op::Constant))
    }

    /// Loads a parameter, viewing it as `leading x last-axis`.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let t = &self.params.get(id).tensor;
        let v = self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Param(id));
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `a * b^T`, used for attention logits.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMulNT(a, b)))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(r, c, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(r, c, out, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let ((r, c), (rr, rc)) = (self.shape(a), self.shape(row));
        if rr != 1 || rc != c {
            return Err(Error::shape(op, &[r, c], &[rr, rc]));
        }
        Ok((r, c))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.check_row("add_row", a, row)?;
        let rv = self.value(row);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % c])
            .collect();
        Ok(self.push(r, c, out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.check_row("mul_row", a, row)?;
        let rv = self.value(row);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * rv[i % c])
            .collect();
        Ok(self.push(r, c, out, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.push(r, c, out, Op::Scale(a, factor))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        self.push(r, c, out, Op::Silu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        if out.iter().any(|v| v.is_nan()) {
            self.nan_in_softmax = true;
        }
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(r, c, out, Op::SoftmaxRows(a))
    }

    /// Row normalisation without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        let mut rstds = Vec::with_capacity(r);
        for row in out.chunks_mut(c.max(1)) {
            let (mean, rstd) = row_stats(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        self.push(r, c, out, Op::LayerNormRows { x, rstd: rstds })
    }

    /// `layer_norm(x) * scale + shift` with `1 x cols` affine rows.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let n = self.layer_norm_rows(x, eps);
        let s = self.mul_row(n, scale)?;
        self.add_row(s, shift)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        Ok(self.push(r, len, out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |p| self.shape(*p).0);
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).0 != r) {
            let s = self.shape(*bad);
            return Err(Error::shape("concat_cols", &[r], &[s.0, s.1]));
        }
        let c: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                let pc = self.shape(*p).1;
                out.extend_from_slice(&self.value(*p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, len]));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, out, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, |p| self.shape(*p).1);
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).1 != c) {
            let s = self.shape(*bad);
            return Err(Error::shape("concat_rows", &[c], &[s.0, s.1]));
        }
        let r: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut out = Vec::with_capacity(r * c);
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        Ok(self.push(r, c, out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rotates channel pairs `(2j, 2j+1)` of row `i` by `angles[i * cols/2 + j]`.
    pub fn rotary(&mut self, x: Var, angles: &[f64]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if c % 2 != 0 || angles.len() != r * c / 2 {
            return Err(Error::shape("rotary", &[r, c], &[angles.len()]));
        }
        let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
        let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
        let out = rotate_pairs(self.value(x), &cos, &sin, 1.0);
        Ok(self.push(r, c, out, Op::Rotary { x, cos, sin }))
    }

    /// Selects rows of `table`; indices may repeat.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if let Some(bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", &[r, c], &[*bad]));
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            indices.len(),
            c,
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// Mean of squared differences against a constant target.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if target.len() != r * c {
            return Err(Error::shape("mse", &[r, c], &[target.len()]));
        }
        let n = (r * c).max(1) as f64;
        let s = self
            .value(x)
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push(
            1,
            1,
            vec![s],
            Op::MeanSquaredError {
                x,
                target: target.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every parameter of the borrowed store receives a buffer; parameters the
    /// loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    for (o, v) in out.get_mut(*id).iter_mut().zip(&g) {
                        *o += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    let ga = acc(&mut grads, *a, m * k);
                    matmul_nt_into(&g, self.value(*b), ga, m, n, k);
                    let gb = acc(&mut grads, *b, k * n);
                    matmul_tn_into(self.value(*a), &g, gb, k, m, n);
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    let ga = acc(&mut grads, *a, m * k);
                    matmul_into(&g, self.value(*b), ga, m, n, k);
                    let gb = acc(&mut grads, *b, n * k);
                    matmul_tn_into(&g, self.value(*a), gb, n, m, k);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *o += gi * bi;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((o, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *o += gi * ai;
                    }
                }
                Op::AddRow(a, row) => {
                    let c = node.cols;
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    let gr = acc(&mut grads, *row, c);
                    for (i, gi) in g.iter().enumerate() {
                        gr[i % c] += gi;
                    }
                }
                Op::MulRow(a, row) => {
                    let c = node.cols;
                    let (av, rv) = (self.value(*a), self.value(*row));
                    let ga = acc(&mut grads, *a, g.len());
                    for (i, (o, gi)) in ga.iter_mut().zip(&g).enumerate() {
                        *o += gi * rv[i % c];
                    }
                    let gr = acc(&mut grads, *row, c);
                    for (i, (gi, ai)) in g.iter().zip(av).enumerate() {
                        gr[i % c] += gi * ai;
                    }
                }
                Op::Scale(a, f) => add_into(acc(&mut grads, *a, g.len()), &g, *f),
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), &x) in ga.iter_mut().zip(&g).zip(av) {
                        let s = sigmoid(x);
                        *o += gi * s * (1.0 + x * (1.0 - s));
                    }
                }
                Op::SoftmaxRows(a) => {
                    let c = node.cols.max(1);
                    let ga = acc(&mut grads, *a, g.len());
                    for ((go, gy), y) in ga
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(node.value.chunks(c))
                    {
                        let inner: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in go.iter_mut().zip(gy).zip(y) {
                            *o += yi * (gi - inner);
                        }
                    }
                }
                Op::LayerNormRows { x, rstd } => {
                    let c = node.cols.max(1);
                    let n = c as f64;
                    let gx = acc(&mut grads, *x, g.len());
                    for (((go, gy), xh), rs) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(node.value.chunks(c))
                        .zip(rstd)
                    {
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gx = gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, gi), xi) in go.iter_mut().zip(gy).zip(xh) {
                            *o += rs * (gi - mean_g - xi * mean_gx);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.shape(*x);
                    let len = node.cols;
                    let gx = acc(&mut grads, *x, r * c);
                    for i in 0..r {
                        add_into(
                            &mut gx[i * c + start..i * c + start + len],
                            &g[i * len..(i + 1) * len],
                            1.0,
                        );
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, c) = (node.rows, node.cols);
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.shape(*p).1;
                        let gp = acc(&mut grads, *p, r * pc);
                        for i in 0..r {
                            add_into(
                                &mut gp[i * pc..(i + 1) * pc],
                                &g[i * c + offset..i * c + offset + pc],
                                1.0,
                            );
                        }
                        offset += pc;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (r, c) = self.shape(*x);
                    let gx = acc(&mut grads, *x, r * c);
                    add_into(&mut gx[start * c..start * c + g.len()], &g, 1.0);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        add_into(acc(&mut grads, *p, n), &g[offset..offset + n], 1.0);
                        offset += n;
                    }
                }
                Op::Rotary { x, cos, sin } => {
                    let back = rotate_pairs(&g, cos, sin, -1.0);
                    add_into(acc(&mut grads, *x, g.len()), &back, 1.0);
                }
                Op::Gather { table, indices } => {
                    let (r, c) = self.shape(*table);
                    let gt = acc(&mut grads, *table, r * c);
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * c..(i + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    let gx = acc(&mut grads, *x, n);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
                Op::MeanSquaredError { x, target } => {
                    let xv = self.value(*x);
                    let n = xv.len().max(1) as f64;
                    let gx = acc(&mut grads, *x, xv.len());
                    for ((o, a), b) in gx.iter_mut().zip(xv).zip(target) {
                        *o += g[0] * 2.0 * (a - b) / n;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

/// Rotates each interleaved pair by `direction * angle`.
fn rotate_pairs(x: &[f64], cos: &[f64], sin: &[f64], direction: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ((o, xi), (c, s)) in out.chunks_mut(2).zip(x.chunks(2)).zip(cos.iter().zip(sin)) {
        let s = direction * s;
        o[0] = xi[0] * c - xi[1] * s;
        o[1] = xi[0] * s + xi[1] * c;
    }
    out
}
