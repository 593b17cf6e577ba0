//! A small reverse-mode tape over matrices.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients. Parameters are
//! registered through [`Backend::param`], which deduplicates by address so a
//! weight used in several places shares one gradient.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::rwkv::{wkv_backward, wkv_rows, DecayParams, WkvState};
use crate::tensor::{ParamTree, LN_EPS};
use crate::{Mat, Real};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Gelu(Var),
    SqRelu(Var),
    Exp(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<F> },
    SoftmaxRows(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Output row `i` is `Σ w · x[row]` over `groups[i]`.
    RowMix { x: Var, groups: Vec<Vec<(usize, F)>> },
    /// Row 0 is `init`, row `t` is `x[t-1]`.
    ShiftRows { x: Var, init: Var },
    Wkv { k: Var, v: Var, w: Var, u: Var, init: WkvState<F> },
    CrossEntropy { logits: Var, label: usize },
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Mat<F>,
    op: Op<F>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<usize, Var>,
    grads: Vec<Option<Mat<F>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

/// Forward operations shared by the eager evaluator and the recording tape.
///
/// Model code is written once against this trait: [`Eager`] computes values
/// and drops intermediates, [`Tape`] records them for [`Tape::backward`].
pub trait Backend<F: Real> {
    type T: Clone;

    fn value<'a>(&'a self, t: &'a Self::T) -> &'a Mat<F>;
    fn constant(&mut self, m: Mat<F>) -> Self::T;
    fn param(&mut self, m: &Mat<F>) -> Self::T;
    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    /// Adds a `1 × d` row to every row.
    fn add_row(&mut self, a: &Self::T, row: &Self::T) -> Self::T;
    /// Multiplies every row by a `1 × d` row.
    fn mul_row(&mut self, a: &Self::T, row: &Self::T) -> Self::T;
    fn scale(&mut self, a: &Self::T, s: F) -> Self::T;
    fn sigmoid(&mut self, a: &Self::T) -> Self::T;
    /// GELU, tanh approximation.
    fn gelu(&mut self, a: &Self::T) -> Self::T;
    /// `max(x, 0)²`.
    fn sq_relu(&mut self, a: &Self::T) -> Self::T;
    fn exp(&mut self, a: &Self::T) -> Self::T;
    /// Row-wise layer normalisation with `1 × d` gain and bias.
    fn layer_norm(&mut self, x: &Self::T, gain: &Self::T, bias: &Self::T) -> Self::T;
    fn softmax_rows(&mut self, a: &Self::T) -> Self::T;
    fn transpose(&mut self, a: &Self::T) -> Self::T;
    fn slice_cols(&mut self, x: &Self::T, start: usize, width: usize) -> Self::T;
    fn concat_cols(&mut self, parts: &[Self::T]) -> Self::T;
    fn concat_rows(&mut self, parts: &[Self::T]) -> Self::T;
    /// Output row `i = Σ_(row, w) ∈ groups[i] w · x[row]`, summed in the
    /// listed order.
    fn row_mix(&mut self, x: &Self::T, groups: Vec<Vec<(usize, F)>>) -> Self::T;
    /// Previous-token view of `x`: row 0 is `init` (`1 × d`), row `t` is
    /// `x[t-1]`.
    fn shift_rows(&mut self, x: &Self::T, init: &Self::T) -> Self::T;
    /// Sequential wkv over the rows of `k` and `v`; `w` and `u` are `1 × d`.
    fn wkv(&mut self, k: &Self::T, v: &Self::T, w: &Self::T, u: &Self::T, init: &WkvState<F>) -> Self::T;
    /// Softmax cross-entropy of a `1 × C` logit row against `label`.
    fn cross_entropy(&mut self, logits: &Self::T, label: usize) -> Self::T;

    fn gather_rows(&mut self, x: &Self::T, rows: &[usize]) -> Self::T {
        let groups = rows.iter().map(|&r| vec![(r, F::one())]).collect();
        self.row_mix(x, groups)
    }

    /// `x + mu ⊙ (prev − x)` with a `1 × d` weight.
    fn lerp_row(&mut self, x: &Self::T, prev: &Self::T, mu: &Self::T) -> Self::T {
        let diff = self.sub(prev, x);
        let scaled = self.mul_row(&diff, mu);
        self.add(x, &scaled)
    }

    /// `x + mu ⊙ (prev − x)` with a per-row weight matrix.
    fn lerp(&mut self, x: &Self::T, prev: &Self::T, mu: &Self::T) -> Self::T {
        let diff = self.sub(prev, x);
        let scaled = self.mul(&diff, mu);
        self.add(x, &scaled)
    }

    /// `x · w + b`.
    fn linear(&mut self, x: &Self::T, w: &Self::T, b: &Self::T) -> Self::T {
        let y = self.matmul(x, w);
        self.add_row(&y, b)
    }
}

mod fwd {
    use super::*;

    pub fn zip<F: Real>(x: &Mat<F>, y: &Mat<F>, f: impl Fn(F, F) -> F) -> Mat<F> {
        assert_eq!(x.shape(), y.shape(), "elementwise shape");
        let data = x.as_slice().iter().zip(y.as_slice()).map(|(&p, &q)| f(p, q)).collect();
        Mat::from_vec(x.rows(), x.cols(), data).expect("shape")
    }

    pub fn zip_row<F: Real>(x: &Mat<F>, r: &Mat<F>, f: impl Fn(F, F) -> F) -> Mat<F> {
        assert_eq!((1, x.cols()), r.shape(), "row broadcast shape");
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o = f(*o, b);
            }
        }
        out
    }

    pub fn sq_relu<F: Real>(x: F) -> F {
        let r = x.max(F::zero());
        r * r
    }

    pub fn layer_norm<F: Real>(xm: &Mat<F>, g: &[F], b: &[F]) -> (Mat<F>, Vec<F>) {
        let mut out = Mat::zeros(xm.rows(), xm.cols());
        let mut rstds = Vec::with_capacity(xm.rows());
        let n = F::of(xm.cols() as f64);
        for i in 0..xm.rows() {
            let row = xm.row(i);
            let mean = row.iter().fold(F::zero(), |a, &b| a + b) / n;
            let var = row.iter().fold(F::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
            let rstd = F::one() / (var + F::of(LN_EPS)).sqrt();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (row[j] - mean) * rstd * g[j] + b[j];
            }
            rstds.push(rstd);
        }
        (out, rstds)
    }

    pub fn softmax_rows<F: Real>(x: &Mat<F>) -> Mat<F> {
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut s = F::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s = s + *x;
            }
            row.iter_mut().for_each(|x| *x = *x / s);
        }
        out
    }

    pub fn slice_cols<F: Real>(xm: &Mat<F>, start: usize, width: usize) -> Mat<F> {
        let mut out = Mat::zeros(xm.rows(), width);
        for i in 0..xm.rows() {
            out.row_mut(i).copy_from_slice(&xm.row(i)[start..start + width]);
        }
        out
    }

    pub fn concat_cols<F: Real>(parts: &[&Mat<F>]) -> Mat<F> {
        let rows = parts[0].rows();
        let width: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Mat::zeros(rows, width);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = p.row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        out
    }

    pub fn concat_rows<F: Real>(parts: &[&Mat<F>]) -> Mat<F> {
        let mut out = Mat::zeros(0, 0);
        for p in parts {
            for r in p.iter_rows() {
                out.push_row(r).expect("uniform width");
            }
        }
        out
    }

    pub fn row_mix<F: Real>(xm: &Mat<F>, groups: &[Vec<(usize, F)>]) -> Mat<F> {
        let mut out = Mat::zeros(groups.len(), xm.cols());
        for (i, g) in groups.iter().enumerate() {
            let orow = out.row_mut(i);
            for &(r, w) in g {
                for (o, &s) in orow.iter_mut().zip(xm.row(r)) {
                    *o = *o + w * s;
                }
            }
        }
        out
    }

    pub fn shift_rows<F: Real>(xm: &Mat<F>, init: &Mat<F>) -> Mat<F> {
        let mut out = Mat::zeros(xm.rows(), xm.cols());
        if xm.rows() > 0 {
            out.row_mut(0).copy_from_slice(init.as_slice());
        }
        for t in 1..xm.rows() {
            out.row_mut(t).copy_from_slice(xm.row(t - 1));
        }
        out
    }

    pub fn wkv<F: Real>(k: &Mat<F>, v: &Mat<F>, w: &Mat<F>, u: &Mat<F>, init: &WkvState<F>) -> Mat<F> {
        let mut st = init.clone();
        wkv_rows(k, v, w.as_slice(), u.as_slice(), &mut st)
    }

    pub fn cross_entropy<F: Real>(l: &[F], label: usize) -> F {
        let m = l.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let lse = m + l.iter().fold(F::zero(), |a, &x| a + (x - m).exp()).ln();
        lse - l[label]
    }
}

/// Evaluates values only.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eager;

impl<F: Real> Backend<F> for Eager {
    type T = Mat<F>;

    fn value<'a>(&'a self, t: &'a Mat<F>) -> &'a Mat<F> {
        t
    }
    fn constant(&mut self, m: Mat<F>) -> Mat<F> {
        m
    }
    fn param(&mut self, m: &Mat<F>) -> Mat<F> {
        m.clone()
    }
    fn matmul(&mut self, a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
        a.matmul(b)
    }
    fn add(&mut self, a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
        fwd::zip(a, b, |x, y| x + y)
    }
    fn sub(&mut self, a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
        fwd::zip(a, b, |x, y| x - y)
    }
    fn mul(&mut self, a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
        fwd::zip(a, b, |x, y| x * y)
    }
    fn add_row(&mut self, a: &Mat<F>, row: &Mat<F>) -> Mat<F> {
        fwd::zip_row(a, row, |x, y| x + y)
    }
    fn mul_row(&mut self, a: &Mat<F>, row: &Mat<F>) -> Mat<F> {
        fwd::zip_row(a, row, |x, y| x * y)
    }
    fn scale(&mut self, a: &Mat<F>, s: F) -> Mat<F> {
        a.map(|x| x * s)
    }
    fn sigmoid(&mut self, a: &Mat<F>) -> Mat<F> {
        a.map(|x| x.sigmoid())
    }
    fn gelu(&mut self, a: &Mat<F>) -> Mat<F> {
        a.map(gelu)
    }
    fn sq_relu(&mut self, a: &Mat<F>) -> Mat<F> {
        a.map(fwd::sq_relu)
    }
    fn exp(&mut self, a: &Mat<F>) -> Mat<F> {
        a.map(|x| x.exp())
    }
    fn layer_norm(&mut self, x: &Mat<F>, gain: &Mat<F>, bias: &Mat<F>) -> Mat<F> {
        fwd::layer_norm(x, gain.as_slice(), bias.as_slice()).0
    }
    fn softmax_rows(&mut self, a: &Mat<F>) -> Mat<F> {
        fwd::softmax_rows(a)
    }
    fn transpose(&mut self, a: &Mat<F>) -> Mat<F> {
        a.transpose()
    }
    fn slice_cols(&mut self, x: &Mat<F>, start: usize, width: usize) -> Mat<F> {
        fwd::slice_cols(x, start, width)
    }
    fn concat_cols(&mut self, parts: &[Mat<F>]) -> Mat<F> {
        fwd::concat_cols(&parts.iter().collect::<Vec<_>>())
    }
    fn concat_rows(&mut self, parts: &[Mat<F>]) -> Mat<F> {
        fwd::concat_rows(&parts.iter().collect::<Vec<_>>())
    }
    fn row_mix(&mut self, x: &Mat<F>, groups: Vec<Vec<(usize, F)>>) -> Mat<F> {
        fwd::row_mix(x, &groups)
    }
    fn shift_rows(&mut self, x: &Mat<F>, init: &Mat<F>) -> Mat<F> {
        fwd::shift_rows(x, init)
    }
    fn wkv(&mut self, k: &Mat<F>, v: &Mat<F>, w: &Mat<F>, u: &Mat<F>, init: &WkvState<F>) -> Mat<F> {
        fwd::wkv(k, v, w, u, init)
    }
    fn cross_entropy(&mut self, logits: &Mat<F>, label: usize) -> Mat<F> {
        Mat::filled(1, 1, fwd::cross_entropy(logits.as_slice(), label))
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Mat<F> {
        &self.nodes[v.0].value
    }

    fn accumulate(&mut self, v: Var, g: Mat<F>) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient of the scalar `loss` (a `1 × 1` node) with respect to every
    /// node reachable from it.
    pub fn backward(&mut self, loss: Var) {
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Mat::filled(1, 1, F::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            self.backward_node(id, &op, &g);
            self.grads[id] = Some(g);
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Mat<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every matrix of `tree`, in visit order; unused
    /// parameters get zeros.
    pub fn param_grads<P: ParamTree<F> + ?Sized>(&self, tree: &P) -> Vec<Mat<F>> {
        let mut out = Vec::new();
        tree.visit("", &mut |_, m| {
            let key = m as *const Mat<F> as usize;
            let g = self
                .params
                .get(&key)
                .and_then(|&v| self.grad(v).cloned())
                .unwrap_or_else(|| Mat::zeros(m.rows(), m.cols()));
            out.push(g);
        });
        out
    }

    fn backward_node(&mut self, id: usize, op: &Op<F>, g: &Mat<F>) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(self.val(*b));
                let gb = self.val(*a).t_matmul(g);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = mul_elem(g, self.val(*b));
                let gb = mul_elem(g, self.val(*a));
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::AddRow(a, row) => {
                self.accumulate(*a, g.clone());
                let gr = col_sums(g);
                self.accumulate(*row, gr);
            }
            Op::MulRow(a, row) => {
                let r = self.val(*row).as_slice();
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    ga.row_mut(i).iter_mut().zip(r).for_each(|(x, &s)| *x = *x * s);
                }
                let gr = col_sums(&mul_elem(g, self.val(*a)));
                self.accumulate(*a, ga);
                self.accumulate(*row, gr);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(*a, g.map(|x| x * s));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let ga = zip_map(g, y, |gi, yi| gi * yi * (F::one() - yi));
                self.accumulate(*a, ga);
            }
            Op::Gelu(a) => {
                let ga = zip_map(g, self.val(*a), |gi, xi| gi * gelu_grad(xi));
                self.accumulate(*a, ga);
            }
            Op::SqRelu(a) => {
                let ga = zip_map(g, self.val(*a), |gi, xi| gi * F::of(2.0) * xi.max(F::zero()));
                self.accumulate(*a, ga);
            }
            Op::Exp(a) => {
                let ga = zip_map(g, &self.nodes[id].value, |gi, yi| gi * yi);
                self.accumulate(*a, ga);
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let (gx, gg, gb) = self.layer_norm_backward(*x, *gain, rstd, g);
                self.accumulate(*x, gx);
                self.accumulate(*gain, gg);
                self.accumulate(*bias, gb);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = yr.iter().zip(gr).fold(F::zero(), |acc, (&p, &q)| acc + p * q);
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::Transpose(a) => self.accumulate(*a, g.transpose()),
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.val(*x).shape();
                let mut gx = Mat::zeros(rows, cols);
                for i in 0..rows {
                    gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    let mut gp = Mat::zeros(g.rows(), w);
                    for i in 0..g.rows() {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                    }
                    off += w;
                    self.accumulate(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.val(p).shape();
                    let mut gp = Mat::zeros(rows, cols);
                    for i in 0..rows {
                        gp.row_mut(i).copy_from_slice(g.row(off + i));
                    }
                    off += rows;
                    self.accumulate(p, gp);
                }
            }
            Op::RowMix { x, groups } => {
                let (rows, cols) = self.val(*x).shape();
                let mut gx = Mat::zeros(rows, cols);
                for (i, grp) in groups.iter().enumerate() {
                    for &(r, w) in grp {
                        for (o, &s) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o = *o + w * s;
                        }
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::ShiftRows { x, init } => {
                let (rows, cols) = self.val(*x).shape();
                let mut gx = Mat::zeros(rows, cols);
                for t in 1..rows {
                    gx.row_mut(t - 1).copy_from_slice(g.row(t));
                }
                let gi = if rows > 0 { Mat::row_vector(g.row(0)) } else { Mat::zeros(1, cols) };
                self.accumulate(*x, gx);
                self.accumulate(*init, gi);
            }
            Op::Wkv { k, v, w, u, init } => {
                let params = DecayParams {
                    w: self.val(*w).as_slice().to_vec(),
                    u: self.val(*u).as_slice().to_vec(),
                };
                let gr = wkv_backward(self.val(*k), self.val(*v), &params, init, g);
                self.accumulate(*k, gr.k);
                self.accumulate(*v, gr.v);
                self.accumulate(*w, Mat::row_vector(&gr.w));
                self.accumulate(*u, Mat::row_vector(&gr.u));
            }
            Op::CrossEntropy { logits, label } => {
                let l = self.val(*logits).as_slice();
                let m = l.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                let z = l.iter().fold(F::zero(), |a, &x| a + (x - m).exp());
                let s = g.get(0, 0);
                let gl: Vec<F> = l
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        let p = (x - m).exp() / z;
                        s * (p - if j == *label { F::one() } else { F::zero() })
                    })
                    .collect();
                self.accumulate(*logits, Mat::row_vector(&gl));
            }
        }
    }

    fn layer_norm_backward(&self, x: Var, gain: Var, rstd: &[F], g: &Mat<F>) -> (Mat<F>, Mat<F>, Mat<F>) {
        let xm = self.val(x);
        let gm = self.val(gain).as_slice();
        let (rows, cols) = xm.shape();
        let n = F::of(cols as f64);
        let mut gx = Mat::zeros(rows, cols);
        let mut gg = Mat::zeros(1, cols);
        let mut gb = Mat::zeros(1, cols);
        let mut xhat = vec![F::zero(); cols];
        let mut dxhat = vec![F::zero(); cols];
        for i in 0..rows {
            let row = xm.row(i);
            let mean = row.iter().fold(F::zero(), |a, &b| a + b) / n;
            let gr = g.row(i);
            for j in 0..cols {
                xhat[j] = (row[j] - mean) * rstd[i];
                dxhat[j] = gr[j] * gm[j];
                gg.as_mut_slice()[j] = gg.as_slice()[j] + gr[j] * xhat[j];
                gb.as_mut_slice()[j] = gb.as_slice()[j] + gr[j];
            }
            let m1 = dxhat.iter().fold(F::zero(), |a, &b| a + b) / n;
            let m2 = dxhat.iter().zip(&xhat).fold(F::zero(), |a, (&p, &q)| a + p * q) / n;
            for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                *o = rstd[i] * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
        (gx, gg, gb)
    }
}

impl<F: Real> Backend<F> for Tape<F> {
    type T = Var;

    fn value<'a>(&'a self, t: &'a Var) -> &'a Mat<F> {
        self.val(*t)
    }

    fn constant(&mut self, m: Mat<F>) -> Var {
        self.push(m, Op::Leaf)
    }

    /// The same matrix (by address) maps to one node.
    fn param(&mut self, m: &Mat<F>) -> Var {
        let key = m as *const Mat<F> as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(m.clone(), Op::Leaf);
        self.params.insert(key, v);
        v
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).matmul(self.val(*b));
        self.push(v, Op::MatMul(*a, *b))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = fwd::zip(self.val(*a), self.val(*b), |x, y| x + y);
        self.push(v, Op::Add(*a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let v = fwd::zip(self.val(*a), self.val(*b), |x, y| x - y);
        self.push(v, Op::Sub(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let v = fwd::zip(self.val(*a), self.val(*b), |x, y| x * y);
        self.push(v, Op::Mul(*a, *b))
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Var {
        let v = fwd::zip_row(self.val(*a), self.val(*row), |x, y| x + y);
        self.push(v, Op::AddRow(*a, *row))
    }

    fn mul_row(&mut self, a: &Var, row: &Var) -> Var {
        let v = fwd::zip_row(self.val(*a), self.val(*row), |x, y| x * y);
        self.push(v, Op::MulRow(*a, *row))
    }

    fn scale(&mut self, a: &Var, s: F) -> Var {
        let v = self.val(*a).map(|x| x * s);
        self.push(v, Op::Scale(*a, s))
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(|x| x.sigmoid());
        self.push(v, Op::Sigmoid(*a))
    }

    fn gelu(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(gelu);
        self.push(v, Op::Gelu(*a))
    }

    fn sq_relu(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(fwd::sq_relu);
        self.push(v, Op::SqRelu(*a))
    }

    fn exp(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(|x| x.exp());
        self.push(v, Op::Exp(*a))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Var {
        let (out, rstd) = fwd::layer_norm(self.val(*x), self.val(*gain).as_slice(), self.val(*bias).as_slice());
        self.push(
            out,
            Op::LayerNorm {
                x: *x,
                gain: *gain,
                bias: *bias,
                rstd,
            },
        )
    }

    fn softmax_rows(&mut self, a: &Var) -> Var {
        let v = fwd::softmax_rows(self.val(*a));
        self.push(v, Op::SoftmaxRows(*a))
    }

    fn transpose(&mut self, a: &Var) -> Var {
        let v = self.val(*a).transpose();
        self.push(v, Op::Transpose(*a))
    }

    fn slice_cols(&mut self, x: &Var, start: usize, width: usize) -> Var {
        let v = fwd::slice_cols(self.val(*x), start, width);
        self.push(v, Op::SliceCols { x: *x, start })
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let v = fwd::concat_cols(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>());
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let v = fwd::concat_rows(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>());
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    fn row_mix(&mut self, x: &Var, groups: Vec<Vec<(usize, F)>>) -> Var {
        let v = fwd::row_mix(self.val(*x), &groups);
        self.push(v, Op::RowMix { x: *x, groups })
    }

    fn shift_rows(&mut self, x: &Var, init: &Var) -> Var {
        let v = fwd::shift_rows(self.val(*x), self.val(*init));
        self.push(v, Op::ShiftRows { x: *x, init: *init })
    }

    fn wkv(&mut self, k: &Var, v: &Var, w: &Var, u: &Var, init: &WkvState<F>) -> Var {
        let out = fwd::wkv(self.val(*k), self.val(*v), self.val(*w), self.val(*u), init);
        self.push(
            out,
            Op::Wkv {
                k: *k,
                v: *v,
                w: *w,
                u: *u,
                init: init.clone(),
            },
        )
    }

    fn cross_entropy(&mut self, logits: &Var, label: usize) -> Var {
        let loss = fwd::cross_entropy(self.val(*logits).as_slice(), label);
        self.push(
            Mat::filled(1, 1, loss),
            Op::CrossEntropy {
                logits: *logits,
                label,
            },
        )
    }
}

fn zip_map<F: Real>(a: &Mat<F>, b: &Mat<F>, f: impl Fn(F, F) -> F) -> Mat<F> {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Mat::from_vec(a.rows(), a.cols(), data).expect("shape")
}

fn mul_elem<F: Real>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    zip_map(a, b, |x, y| x * y)
}

fn col_sums<F: Real>(g: &Mat<F>) -> Mat<F> {
    let mut out = Mat::zeros(1, g.cols());
    for r in g.iter_rows() {
        for (o, &x) in out.as_mut_slice().iter_mut().zip(r) {
            *o = *o + x;
        }
    }
    out
}
