//! Rank-2 tensors and a reverse-mode tape.
//!
//! Every operation appends a node holding its value and whatever the backward
//! pass needs. `backward` walks the nodes once in reverse order, accumulating
//! gradients additively, so fan-out needs no special handling.

use crate::error::{Error, Result};
use crate::trajcore::wrap_angle;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn row(data: Vec<f64>) -> Tensor {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a·b`, or `a·bᵀ` when `bt`.
/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += s * x`.
fn axpy(out: &mut [f64], s: f64, x: &[f64]) {
    let n = out.len().min(x.len());
    let (out, x) = (&mut out[..n], &x[..n]);
    for j in 0..n {
        out[j] += s * x[j];
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor, bt: bool) -> Tensor {
    let (n, k) = (a.rows, a.cols);
    let m = if bt { b.rows } else { b.cols };
    let mut out = vec![0.0; n * m];
    if bt {
        for i in 0..n {
            let ar = &a.data[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = dot(ar, &b.data[j * k..(j + 1) * k]);
            }
        }
    } else {
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                axpy(orow, av, &b.data[p * m..(p + 1) * m]);
            }
        }
    }
    Tensor {
        rows: n,
        cols: m,
        data: out,
    }
}

/// `aᵀ·b`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let ar = &a.data[p * n..(p + 1) * n];
        let br = &b.data[p * m..(p + 1) * m];
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            axpy(&mut out[i * m..(i + 1) * m], av, br);
        }
    }
    Tensor {
        rows: n,
        cols: m,
        data: out,
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(e: f64) -> f64 {
    let a = e.abs();
    if a < 1.0 {
        0.5 * e * e
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(e: f64) -> f64 {
    if e.abs() < 1.0 {
        e
    } else {
        e.signum()
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Transpose(Var),
    TrajSmoothL1 { pred: Var, target: Vec<f64>, w_psi: f64 },
    Bce { p: Var, target: Vec<f64>, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients per parameter index; parameters that never reached the loss get zeros.
    pub fn param_grads(&self, shapes: &[[usize; 2]]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect();
        for &(node, p) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[p].add_assign(g);
            }
        }
        out
    }
}

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(what()))
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// True when every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.data.iter().all(|x| x.is_finite()))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to parameter `index`; its gradient is reported under that index.
    pub fn param(&mut self, index: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa[1] == sb[0], || format!("matmul {sa:?} x {sb:?}"))?;
        let v = matmul_raw(self.value(a), self.value(b), false);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a·bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa[1] == sb[1], || format!("matmul_t {sa:?} x {sb:?}ᵀ"))?;
        let v = matmul_raw(self.value(a), self.value(b), true);
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa == sb, || format!("{name} {sa:?} vs {sb:?}"))?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.push(Tensor { rows: sa[0], cols: sa[1], data }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    fn row_broadcast(&mut self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        check(sr[0] == 1 && sr[1] == sa[1], || format!("row broadcast {sr:?} onto {sa:?}"))?;
        let (av, rv) = (self.value(a), self.value(row));
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, rv.data[i % sa[1]]))
            .collect();
        Ok(self.push(Tensor { rows: sa[0], cols: sa[1], data }, op))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, |x, r| x + r, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, |x, r| x * r, Op::MulRow(a, row))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let v = Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().map(|x| f(*x)).collect(),
        };
        self.push(v, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = t.data.clone();
        for r in data.chunks_mut(t.cols.max(1)) {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in r.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in r.iter_mut() {
                *x /= s;
            }
        }
        let v = Tensor { rows: t.rows, cols: t.cols, data };
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layernorm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols as f64;
        let mut data = t.data.clone();
        let mut rstd = Vec::with_capacity(t.rows);
        for r in data.chunks_mut(t.cols.max(1)) {
            let mean = r.iter().sum::<f64>() / c;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for x in r.iter_mut() {
                *x = (*x - mean) * s;
            }
            rstd.push(s);
        }
        let v = Tensor { rows: t.rows, cols: t.cols, data };
        self.push(v, Op::LayerNorm(a, rstd))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        check(idx.iter().all(|&i| i < t.rows), || format!("gather {idx:?} from {} rows", t.rows))?;
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let v = Tensor { rows: idx.len(), cols: t.cols, data };
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), || "concat of nothing".into())?;
        let cols = self.shape(parts[0])[1];
        check(parts.iter().all(|&p| self.shape(p)[1] == cols), || "concat_rows column mismatch".into())?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
            rows += self.shape(p)[0];
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), || "concat of nothing".into())?;
        let rows = self.shape(parts[0])[0];
        check(parts.iter().all(|&p| self.shape(p)[0] == rows), || "concat_cols row mismatch".into())?;
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        check(start + len <= t.rows, || format!("rows {start}..{} of {}", start + len, t.rows))?;
        let v = Tensor {
            rows: len,
            cols: t.cols,
            data: t.data[start * t.cols..(start + len) * t.cols].to_vec(),
        };
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        check(start + len <= t.cols, || format!("cols {start}..{} of {}", start + len, t.cols))?;
        let mut data = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let v = Tensor { rows: t.rows, cols: len, data };
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Column means as a `1×c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (d, x) in data.iter_mut().zip(t.row_slice(r)) {
                *d += x;
            }
        }
        let n = t.rows as f64;
        data.iter_mut().for_each(|d| *d /= n);
        self.push(Tensor::row(data), Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::row(vec![s]), Op::Sum(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = vec![0.0; t.data.len()];
        for r in 0..t.rows {
            for c in 0..t.cols {
                data[c * t.rows + r] = t.data[r * t.cols + c];
            }
        }
        let v = Tensor { rows: t.cols, cols: t.rows, data };
        self.push(v, Op::Transpose(a))
    }

    /// Mean over waypoints of smooth-L1 on x and y plus `w_psi` times smooth-L1
    /// of the wrapped heading error. `pred` holds `x y psi` triples.
    pub fn traj_smooth_l1(&mut self, pred: Var, target: &[f64], w_psi: f64) -> Result<Var> {
        let p = &self.value(pred).data;
        check(p.len() == target.len() && p.len().is_multiple_of(3) && !p.is_empty(), || {
            format!("trajectory loss on {} vs {} values", p.len(), target.len())
        })?;
        let n = (p.len() / 3) as f64;
        let mut s = 0.0;
        for (pw, tw) in p.chunks(3).zip(target.chunks(3)) {
            s += smooth_l1(pw[0] - tw[0]) + smooth_l1(pw[1] - tw[1]) + w_psi * smooth_l1(wrap_angle(pw[2] - tw[2]));
        }
        let op = Op::TrajSmoothL1 {
            pred,
            target: target.to_vec(),
            w_psi,
        };
        Ok(self.push(Tensor::row(vec![s / n]), op))
    }

    /// Mean binary cross-entropy of probabilities clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, p: Var, target: &[f64], eps: f64) -> Result<Var> {
        let pv = &self.value(p).data;
        check(pv.len() == target.len() && !pv.is_empty(), || {
            format!("bce on {} vs {} values", pv.len(), target.len())
        })?;
        let n = pv.len() as f64;
        let s: f64 = pv
            .iter()
            .zip(target)
            .map(|(&q, &t)| {
                let q = q.clamp(eps, 1.0 - eps);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum();
        let op = Op::Bce {
            p,
            target: target.to_vec(),
            eps,
        };
        Ok(self.push(Tensor::row(vec![s / n]), op))
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Tensor::filled(1, 1, 1.0));
        let mut params = Vec::new();
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    params.push((i, *p));
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, matmul_raw(&g, val(*b), true));
                    acc(*b, matmul_tn(val(*a), &g));
                }
                Op::MatMulT(a, b) => {
                    // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                    acc(*a, matmul_raw(&g, val(*b), false));
                    acc(*b, matmul_tn(&g, val(*a)));
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::AddRow(a, r) => {
                    let mut gr = vec![0.0; g.cols];
                    for row in g.data.chunks(g.cols) {
                        for (s, x) in gr.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    acc(*r, Tensor::row(gr));
                    acc(*a, g);
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (val(*a), val(*r));
                    let mut gr = vec![0.0; g.cols];
                    let mut ga = g.clone();
                    for (k, gx) in ga.data.iter_mut().enumerate() {
                        let c = k % g.cols;
                        gr[c] += *gx * av.data[k];
                        *gx *= rv.data[c];
                    }
                    acc(*r, Tensor::row(gr));
                    acc(*a, ga);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga = Tensor { data: g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(), ..g.clone() };
                    let gb = Tensor { data: g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect(), ..g };
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(*a, Tensor { data: g.data.iter().map(|x| x * s).collect(), ..g });
                }
                Op::Relu(a) => {
                    let av = val(*a);
                    let data = g.data.iter().zip(&av.data).map(|(x, y)| if *y > 0.0 { *x } else { 0.0 }).collect();
                    acc(*a, Tensor { data, ..g });
                }
                Op::Gelu(a) => {
                    let av = val(*a);
                    let data = g.data.iter().zip(&av.data).map(|(x, y)| x * gelu_grad(*y)).collect();
                    acc(*a, Tensor { data, ..g });
                }
                Op::Sigmoid(a) => {
                    let data = g.data.iter().zip(&node.value.data).map(|(x, y)| x * y * (1.0 - y)).collect();
                    acc(*a, Tensor { data, ..g });
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut data = vec![0.0; g.data.len()];
                    for r in 0..g.rows {
                        let gr = g.row_slice(r);
                        let yr = y.row_slice(r);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..g.cols {
                            data[r * g.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(*a, Tensor { data, ..g });
                }
                Op::LayerNorm(a, rstd) => {
                    let y = &node.value;
                    let c = g.cols as f64;
                    let mut data = vec![0.0; g.data.len()];
                    for r in 0..g.rows {
                        let gr = g.row_slice(r);
                        let yr = y.row_slice(r);
                        let mg = gr.iter().sum::<f64>() / c;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                        for k in 0..g.cols {
                            data[r * g.cols + k] = rstd[r] * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                    acc(*a, Tensor { data, ..g });
                }
                Op::GatherRows(a, idx) => {
                    let av = val(*a);
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    for (k, &r) in idx.iter().enumerate() {
                        for c in 0..av.cols {
                            ga.data[r * av.cols + c] += g.data[k * av.cols + c];
                        }
                    }
                    acc(*a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let s = val(p).shape();
                        acc(p, Tensor { rows: s[0], cols: s[1], data: g.data[off..off + s[0] * s[1]].to_vec() });
                        off += s[0] * s[1];
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let s = val(p).shape();
                        let mut data = Vec::with_capacity(s[0] * s[1]);
                        for r in 0..g.rows {
                            data.extend_from_slice(&g.row_slice(r)[off..off + s[1]]);
                        }
                        acc(p, Tensor { rows: s[0], cols: s[1], data });
                        off += s[1];
                    }
                }
                Op::SliceRows(a, start) => {
                    let s = val(*a).shape();
                    let mut ga = Tensor::zeros(s[0], s[1]);
                    ga.data[start * s[1]..start * s[1] + g.data.len()].copy_from_slice(&g.data);
                    acc(*a, ga);
                }
                Op::SliceCols(a, start) => {
                    let s = val(*a).shape();
                    let mut ga = Tensor::zeros(s[0], s[1]);
                    for r in 0..s[0] {
                        ga.data[r * s[1] + start..r * s[1] + start + g.cols].copy_from_slice(g.row_slice(r));
                    }
                    acc(*a, ga);
                }
                Op::MeanRows(a) => {
                    let s = val(*a).shape();
                    let inv = 1.0 / s[0] as f64;
                    let data = (0..s[0] * s[1]).map(|k| g.data[k % s[1]] * inv).collect();
                    acc(*a, Tensor { rows: s[0], cols: s[1], data });
                }
                Op::Sum(a) => {
                    let s = val(*a).shape();
                    acc(*a, Tensor::filled(s[0], s[1], g.data[0]));
                }
                Op::Transpose(a) => {
                    let mut data = vec![0.0; g.data.len()];
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            data[c * g.rows + r] = g.data[r * g.cols + c];
                        }
                    }
                    acc(*a, Tensor { rows: g.cols, cols: g.rows, data });
                }
                Op::TrajSmoothL1 { pred, target, w_psi } => {
                    let pv = val(*pred);
                    let scale = g.data[0] / (pv.data.len() / 3) as f64;
                    let mut data = vec![0.0; pv.data.len()];
                    for k in 0..pv.data.len() / 3 {
                        let b = 3 * k;
                        data[b] = scale * smooth_l1_grad(pv.data[b] - target[b]);
                        data[b + 1] = scale * smooth_l1_grad(pv.data[b + 1] - target[b + 1]);
                        data[b + 2] = scale * w_psi * smooth_l1_grad(wrap_angle(pv.data[b + 2] - target[b + 2]));
                    }
                    acc(*pred, Tensor { rows: pv.rows, cols: pv.cols, data });
                }
                Op::Bce { p, target, eps } => {
                    let pv = val(*p);
                    let scale = g.data[0] / pv.data.len() as f64;
                    let data = pv
                        .data
                        .iter()
                        .zip(target)
                        .map(|(&q, &t)| {
                            if q <= *eps || q >= 1.0 - eps {
                                0.0
                            } else {
                                scale * (-t / q + (1.0 - t) / (1.0 - q))
                            }
                        })
                        .collect();
                    acc(*p, Tensor { rows: pv.rows, cols: pv.cols, data });
                }
            }
        }
        Gradients { grads, params }
    }
}
