//! A small reverse-mode tape over 2-D matrices.
//!
//! Every node holds an owned `[rows, cols]` value. Parameters enter as leaves
//! that require gradients; frozen weights and data enter as constants, and no
//! gradient is ever accumulated for them. The tape is generic over the scalar
//! so the same model code runs in `f32` for training and `f64` for gradient
//! checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Debug
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Contiguous row ranges `(start, len)` that form one attention group, e.g.
/// one sample's tokens inside a batch-stacked matrix.
pub type Groups = Arc<Vec<(usize, usize)>>;

/// Per-row rotation angles for rotary embeddings, `[rows, head_dim / 2]`,
/// applied identically to every head.
#[derive(Debug, Clone)]
pub struct RotaryRows<T> {
    pub cos: Array2<T>,
    pub sin: Array2<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a` has `k * n` rows, `b` has `n` rows repeated down `a`.
    AddTiled(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// Row `r` of `x` is modulated by row `r / group` of scale and shift.
    Modulate { x: Var, scale: Var, shift: Var, group: usize },
    /// `x + gate[r / group] * y`.
    GatedResidual { x: Var, y: Var, gate: Var, group: usize },
    LayerNorm { x: Var, xhat: Array2<T>, rstd: Vec<T> },
    Gelu(Var),
    Silu(Var),
    Rope { x: Var, table: Arc<RotaryRows<T>>, head_dim: usize },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        q_groups: Groups,
        kv_groups: Groups,
        n_heads: usize,
        probs: Vec<Array2<T>>,
    },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    /// Scalar `mean((x - target)^2)`.
    SqErrMean { x: Var, target: Array2<T> },
    /// `sum_i w_i * x_i` over same-shaped inputs.
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// The `[1, 1]` value of a scalar node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.rg(v))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let rg = self.any_rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `x @ w + b` with `b` a `[1, out]` bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_tiled(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let out = self.value(a) + self.value(b);
        let rg = self.any_rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.value(a).dim();
        let (rb, cb) = self.value(b).dim();
        assert!(ca == cb && rb > 0 && ra % rb == 0, "add_tiled shapes {ra}x{ca} + {rb}x{cb}");
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            row += &bv.row(r % rb);
        }
        let rg = self.any_rg(&[a, b]);
        self.push(out, Op::AddTiled(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let out = self.value(a) * self.value(b);
        let rg = self.any_rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `x * (1 + scale) + shift`, with one scale/shift row per `group` rows of `x`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (sv, hv) = (self.value(scale), self.value(shift));
        assert_eq!(sv.dim(), hv.dim());
        assert_eq!(xv.nrows(), sv.nrows() * group, "modulate rows");
        let mut out = xv.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let (sr, hr) = (sv.row(r / group), hv.row(r / group));
            Zip::from(&mut row).and(&sr).and(&hr).for_each(|o, &s, &h| *o = *o * (T::one() + s) + h);
        }
        let rg = self.any_rg(&[x, scale, shift]);
        self.push(out, Op::Modulate { x, scale, shift, group }, rg)
    }

    /// `x + gate * y`, with one gate row per `group` rows.
    pub fn gated_residual(&mut self, x: Var, y: Var, gate: Var, group: usize) -> Var {
        let (xv, yv, gv) = (self.value(x), self.value(y), self.value(gate));
        assert_eq!(xv.dim(), yv.dim());
        assert_eq!(xv.nrows(), gv.nrows() * group, "gate rows");
        let mut out = xv.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let g = gv.row(r / group);
            Zip::from(&mut row).and(&yv.row(r)).and(&g).for_each(|o, &yy, &gg| *o += gg * yy);
        }
        let rg = self.any_rg(&[x, y, gate]);
        self.push(out, Op::GatedResidual { x, y, gate, group }, rg)
    }

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.ncols()).expect("cols");
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd.push(r);
        }
        let out = xhat.clone();
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, xhat, rstd }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    /// Rotates consecutive coordinate pairs of every head by the per-row angles in `table`.
    pub fn rope(&mut self, x: Var, table: Arc<RotaryRows<T>>, head_dim: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), table.cos.nrows(), "rope rows");
        assert_eq!(head_dim / 2, table.cos.ncols(), "rope pairs");
        let out = rotate_pairs(xv.view(), &table, head_dim, false);
        let rg = self.rg(x);
        self.push(out, Op::Rope { x, table, head_dim }, rg)
    }

    /// Multi-head scaled dot-product attention, run independently per group.
    /// With `causal`, query `i` of a group only sees keys `j <= i + (kv_len - q_len)`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_groups: Groups,
        kv_groups: Groups,
        n_heads: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(kv.ncols(), d);
        assert_eq!(vv.dim(), kv.dim());
        assert_eq!(q_groups.len(), kv_groups.len());
        assert_eq!(d % n_heads, 0);
        let dh = d / n_heads;
        let scale = T::one() / T::from_usize(dh).expect("dh").sqrt();
        let mut out = Array2::<T>::zeros(qv.dim());
        let mut probs = Vec::with_capacity(q_groups.len() * n_heads);
        for (&(qs, ql), &(ks, kl)) in q_groups.iter().zip(kv_groups.iter()) {
            for h in 0..n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![qs..qs + ql, cols.clone()]);
                let kh = kv.slice(s![ks..ks + kl, cols.clone()]);
                let vh = vv.slice(s![ks..ks + kl, cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    if causal {
                        let limit = i + kl.saturating_sub(ql);
                        for (j, x) in row.iter_mut().enumerate() {
                            if j > limit {
                                *x = T::neg_infinity();
                            }
                        }
                    }
                    softmax_inplace(row.as_slice_mut().expect("contiguous"));
                }
                out.slice_mut(s![qs..qs + ql, cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let rg = self.any_rg(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, q_groups, kv_groups, n_heads, probs }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        let rg = self.any_rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sq_err_mean(&mut self, x: Var, target: Array2<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), target.dim(), "sq_err_mean shape");
        let n = T::from_usize(xv.len().max(1)).expect("len");
        let total: T = Zip::from(xv).and(&target).fold(T::zero(), |acc, &a, &b| acc + (a - b) * (a - b));
        let rg = self.rg(x);
        self.push(Array2::from_elem((1, 1), total / n), Op::SqErrMean { x, target }, rg)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let first = terms.first().expect("weighted_sum needs at least one term").0;
        let mut out = Array2::<T>::zeros(self.value(first).dim());
        for &(v, w) in terms {
            out.scaled_add(w, self.value(v));
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(out, Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Backpropagates from a scalar `root`. Returns per-node gradients; only
    /// nodes that require grad and lie upstream of `root` get `Some`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut g: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Array2::from_elem((1, 1), T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = g[idx].take() else { continue };
            self.backward_node(node, &gout, &mut g);
            g[idx] = Some(gout);
        }
        Grads { g }
    }

    fn backward_node(&self, node: &Node<T>, gout: &Array2<T>, g: &mut [Option<Array2<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    accum(g, *a, gout.dot(&val(*b).t()));
                }
                if rg(*b) {
                    accum(g, *b, val(*a).t().dot(gout));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accum(g, *a, gout.clone());
                }
                if rg(*b) {
                    accum(g, *b, gout.clone());
                }
            }
            Op::AddTiled(a, b) => {
                if rg(*a) {
                    accum(g, *a, gout.clone());
                }
                if rg(*b) {
                    let rb = val(*b).nrows();
                    let mut gb = Array2::<T>::zeros(val(*b).dim());
                    for (r, row) in gout.rows().into_iter().enumerate() {
                        let mut dst = gb.row_mut(r % rb);
                        dst += &row;
                    }
                    accum(g, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    accum(g, *a, gout * val(*b));
                }
                if rg(*b) {
                    accum(g, *b, gout * val(*a));
                }
            }
            Op::Scale(a, c) => {
                if rg(*a) {
                    accum(g, *a, gout * *c);
                }
            }
            Op::Modulate { x, scale, shift, group } => {
                let (xv, sv) = (val(*x), val(*scale));
                if rg(*x) {
                    let mut gx = gout.clone();
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let sr = sv.row(r / group);
                        Zip::from(&mut row).and(&sr).for_each(|d, &s| *d = *d * (T::one() + s));
                    }
                    accum(g, *x, gx);
                }
                if rg(*scale) {
                    let prod = gout * xv;
                    accum(g, *scale, group_sum(&prod, *group));
                }
                if rg(*shift) {
                    accum(g, *shift, group_sum(gout, *group));
                }
            }
            Op::GatedResidual { x, y, gate, group } => {
                if rg(*x) {
                    accum(g, *x, gout.clone());
                }
                let gv = val(*gate);
                if rg(*y) {
                    let mut gy = gout.clone();
                    for (r, mut row) in gy.rows_mut().into_iter().enumerate() {
                        let gr = gv.row(r / group);
                        Zip::from(&mut row).and(&gr).for_each(|d, &gg| *d *= gg);
                    }
                    accum(g, *y, gy);
                }
                if rg(*gate) {
                    let prod = gout * val(*y);
                    accum(g, *gate, group_sum(&prod, *group));
                }
            }
            Op::LayerNorm { x, xhat, rstd } => {
                if rg(*x) {
                    let n = T::from_usize(xhat.ncols()).expect("cols");
                    let mut gx = Array2::<T>::zeros(xhat.dim());
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let go = gout.row(r);
                        let xh = xhat.row(r);
                        let mean_g = go.sum() / n;
                        let mean_gx = go.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                        Zip::from(&mut row).and(&go).and(&xh).for_each(|d, &gg, &xx| {
                            *d = rstd[r] * (gg - mean_g - xx * mean_gx);
                        });
                    }
                    accum(g, *x, gx);
                }
            }
            Op::Gelu(x) => {
                if rg(*x) {
                    let gx = Zip::from(gout).and(val(*x)).map_collect(|&gg, &xx| gg * gelu_grad(xx));
                    accum(g, *x, gx);
                }
            }
            Op::Silu(x) => {
                if rg(*x) {
                    let gx = Zip::from(gout).and(val(*x)).map_collect(|&gg, &xx| {
                        let sg = sigmoid(xx);
                        gg * sg * (T::one() + xx * (T::one() - sg))
                    });
                    accum(g, *x, gx);
                }
            }
            Op::Rope { x, table, head_dim } => {
                if rg(*x) {
                    accum(g, *x, rotate_pairs(gout.view(), table, *head_dim, true));
                }
            }
            Op::Attention { q, k, v, q_groups, kv_groups, n_heads, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let dh = qv.ncols() / n_heads;
                let scale = T::one() / T::from_usize(dh).expect("dh").sqrt();
                let mut gq = Array2::<T>::zeros(qv.dim());
                let mut gk = Array2::<T>::zeros(kv.dim());
                let mut gv = Array2::<T>::zeros(vv.dim());
                let mut pi = 0;
                for (&(qs, ql), &(ks, kl)) in q_groups.iter().zip(kv_groups.iter()) {
                    for h in 0..*n_heads {
                        let cols = h * dh..(h + 1) * dh;
                        let p = &probs[pi];
                        pi += 1;
                        let go = gout.slice(s![qs..qs + ql, cols.clone()]);
                        let qh = qv.slice(s![qs..qs + ql, cols.clone()]);
                        let kh = kv.slice(s![ks..ks + kl, cols.clone()]);
                        let vh = vv.slice(s![ks..ks + kl, cols.clone()]);
                        let mut gvh = gv.slice_mut(s![ks..ks + kl, cols.clone()]);
                        gvh += &p.t().dot(&go);
                        let mut dp = go.dot(&vh.t());
                        for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                            let dot: T = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
                            Zip::from(&mut drow).and(&prow).for_each(|d, &pp| *d = pp * (*d - dot) * scale);
                        }
                        let mut gqh = gq.slice_mut(s![qs..qs + ql, cols.clone()]);
                        gqh += &dp.dot(&kh);
                        let mut gkh = gk.slice_mut(s![ks..ks + kl, cols]);
                        gkh += &dp.t().dot(&qh);
                    }
                }
                if rg(*q) {
                    accum(g, *q, gq);
                }
                if rg(*k) {
                    accum(g, *k, gk);
                }
                if rg(*v) {
                    accum(g, *v, gv);
                }
            }
            Op::SliceRows { x, start } => {
                if rg(*x) {
                    let mut gx = Array2::<T>::zeros(val(*x).dim());
                    gx.slice_mut(s![*start..*start + gout.nrows(), ..]).assign(gout);
                    accum(g, *x, gx);
                }
            }
            Op::SliceCols { x, start } => {
                if rg(*x) {
                    let mut gx = Array2::<T>::zeros(val(*x).dim());
                    gx.slice_mut(s![.., *start..*start + gout.ncols()]).assign(gout);
                    accum(g, *x, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    if rg(p) {
                        accum(g, p, gout.slice(s![off..off + n, ..]).to_owned());
                    }
                    off += n;
                }
            }
            Op::SqErrMean { x, target } => {
                if rg(*x) {
                    let xv = val(*x);
                    let c = gout[[0, 0]] * T::lit(2.0) / T::from_usize(xv.len().max(1)).expect("len");
                    let gx = Zip::from(xv).and(target).map_collect(|&a, &b| c * (a - b));
                    accum(g, *x, gx);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if rg(v) {
                        accum(g, v, gout * w);
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    g: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.g.get(v.0).and_then(|x| x.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.g.get_mut(v.0).and_then(|x| x.take())
    }
}

fn accum<T: Scalar>(g: &mut [Option<Array2<T>>], v: Var, delta: Array2<T>) {
    match &mut g[v.0] {
        Some(acc) => *acc += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn group_sum<T: Scalar>(x: &Array2<T>, group: usize) -> Array2<T> {
    let rows = x.nrows() / group;
    let mut out = Array2::<T>::zeros((rows, x.ncols()));
    for (r, row) in x.rows().into_iter().enumerate() {
        let mut dst = out.row_mut(r / group);
        dst += &row;
    }
    out
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let th = inner.tanh();
    let dinner = T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * dinner
}

fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

fn rotate_pairs<T: Scalar>(x: ArrayView2<T>, table: &RotaryRows<T>, head_dim: usize, inverse: bool) -> Array2<T> {
    let mut out = x.to_owned();
    let pairs = head_dim / 2;
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let (c, sn) = (table.cos.row(r), table.sin.row(r));
        let row = row.as_slice_mut().expect("contiguous");
        for head in row.chunks_exact_mut(head_dim) {
            for m in 0..pairs {
                let (a, b) = (head[2 * m], head[2 * m + 1]);
                let (cm, sm) = (c[m], if inverse { -sn[m] } else { sn[m] });
                head[2 * m] = a * cm - b * sm;
                head[2 * m + 1] = a * sm + b * cm;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(input) for a graph built by `f`,
    /// with `loss = mean((out - probe)^2)` for a fixed random probe.
    fn check(inputs: Vec<Array2<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let eval = |vals: &[Array2<f64>], probe: &Array2<f64>| -> (f64, Vec<Array2<f64>>) {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone())).collect();
            let out = f(&mut tape, &vars);
            let loss = tape.sq_err_mean(out, probe.clone());
            let grads = tape.backward(loss);
            let gs = vars
                .iter()
                .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(tape.value(v).dim())))
                .collect();
            (tape.scalar(loss), gs)
        };
        let out_dim = {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).dim()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = Array2::from_shape_fn(out_dim, |_| rng.random_range(-2.0..2.0));
        let (_, grads) = eval(&inputs, &probe);
        let h = 1e-6;
        for (i, inp) in inputs.iter().enumerate() {
            for idx in 0..inp.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[i].as_slice_mut().unwrap()[idx] += h;
                minus[i].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus, &probe).0 - eval(&minus, &probe).0) / (2.0 * h);
                let an = grads[i].as_slice().unwrap()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} elem {idx}: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn matmul_add_tiled_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 3, 5), rand_mat(&mut rng, 2, 5)], |t, v| {
            let y = t.matmul(v[0], v[1]);
            t.add_tiled(y, v[2])
        });
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 3, 4)], |t, v| {
            let a = t.mul(v[0], v[1]);
            let b = t.gelu(a);
            let c = t.silu(v[1]);
            let d = t.add(b, c);
            t.scale(d, 0.7)
        });
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![rand_mat(&mut rng, 3, 6)], |t, v| t.layer_norm(v[0], 1e-6));
    }

    #[test]
    fn modulate_and_gate_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![
            rand_mat(&mut rng, 6, 4),
            rand_mat(&mut rng, 2, 4),
            rand_mat(&mut rng, 2, 4),
            rand_mat(&mut rng, 6, 4),
            rand_mat(&mut rng, 2, 4),
        ];
        check(inputs, |t, v| {
            let m = t.modulate(v[0], v[1], v[2], 3);
            t.gated_residual(m, v[3], v[4], 3)
        });
    }

    #[test]
    fn slicing_and_concat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![rand_mat(&mut rng, 5, 6), rand_mat(&mut rng, 2, 2)], |t, v| {
            let a = t.slice_rows(v[0], 1, 3);
            let b = t.slice_cols(a, 2, 2);
            let c = t.concat_rows(&[v[1], b, v[1]]);
            t.weighted_sum(&[(c, 0.5), (c, -2.0)])
        });
    }

    #[test]
    fn attention_grads_grouped_and_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![rand_mat(&mut rng, 5, 8), rand_mat(&mut rng, 7, 8), rand_mat(&mut rng, 7, 8)];
        for causal in [false, true] {
            check(inputs.clone(), move |t, v| {
                let qg = Arc::new(vec![(0, 2), (2, 3)]);
                let kg = Arc::new(vec![(0, 3), (3, 4)]);
                t.attention(v[0], v[1], v[2], qg, kg, 2, causal)
            });
        }
    }

    #[test]
    fn rope_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = Arc::new(RotaryRows {
            cos: Array2::from_shape_fn((3, 4), |(r, c)| ((r * 4 + c) as f64 * 0.3).cos()),
            sin: Array2::from_shape_fn((3, 4), |(r, c)| ((r * 4 + c) as f64 * 0.3).sin()),
        });
        check(vec![rand_mat(&mut rng, 3, 16)], move |t, v| t.rope(v[0], table.clone(), 8));
    }

    #[test]
    fn sq_err_mean_value_and_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Array2::from_shape_vec((1, 2), vec![1.0, 3.0]).unwrap());
        let loss = tape.sq_err_mean(x, Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap());
        assert_eq!(tape.scalar(loss), 2.5);
        let g = tape.backward(loss);
        assert_eq!(g.get(x).unwrap().as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Array2::eye(2));
        let x = tape.param(Array2::ones((1, 2)));
        let y = tape.matmul(x, w);
        let loss = tape.sq_err_mean(y, Array2::zeros((1, 2)));
        let g = tape.backward(loss);
        assert!(g.get(w).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = rand_mat(&mut rng, 3, 4);
        let k = rand_mat(&mut rng, 3, 4);
        let mut v = rand_mat(&mut rng, 3, 4);
        let run = |v: &Array2<f64>| {
            let mut t = Tape::<f64>::new();
            let (a, b, c) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
            let g = Arc::new(vec![(0, 3)]);
            let o = t.attention(a, b, c, g.clone(), g, 1, true);
            t.value(o).clone()
        };
        let before = run(&v);
        v.row_mut(2).fill(9.0);
        let after = run(&v);
        assert_eq!(before.row(0), after.row(0));
        assert_eq!(before.row(1), after.row(1));
        assert_ne!(before.row(2), after.row(2));
    }
}
