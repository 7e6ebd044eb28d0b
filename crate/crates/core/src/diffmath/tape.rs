use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{s, Array2, Axis, Zip};

use super::{ParamId, ParamStore};
use crate::error::{DpmsError, Result};
use crate::special::{digamma, gamma_quantile_dshape, gamma_standard_quantile, ln_gamma, trigamma, LN_2PI};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Arc<[usize]>),
    GatherSum { src: Var, indices: Arc<[usize]>, per_row: usize },
    Bounded { x: Var, range: f64, offset: f64 },
    NormalLogProb(Var, Var, Var),
    KlNormal(Var, Var, Var, Var),
    GammaLogProb(Var, Var, Var),
    KlGamma(Var, Var, Var, Var),
    GammaRsample { shape: Var, rate: Var, dx_dshape: Array2<f64> },
    LogAbsDet { x: Var, inv_t: Array2<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SelectRows(..) => "select_rows",
            Op::GatherSum { .. } => "gather_sum",
            Op::Bounded { .. } => "bounded",
            Op::NormalLogProb(..) => "normal_log_prob",
            Op::KlNormal(..) => "kl_normal",
            Op::GammaLogProb(..) => "gamma_log_prob",
            Op::KlGamma(..) => "kl_gamma",
            Op::GammaRsample { .. } => "gamma_rsample",
            Op::LogAbsDet { .. } => "log_abs_det",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
    label: Option<String>,
}

/// Gradients of a scalar output, keyed by parameter block.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_block: BTreeMap<ParamId, Array2<f64>>,
}

impl Gradients {
    /// Adds `g` into the entry for `id`.
    pub fn insert(&mut self, id: ParamId, g: Array2<f64>) {
        match self.by_block.get_mut(&id) {
            Some(existing) => *existing += &g,
            None => {
                self.by_block.insert(id, g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.by_block.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.by_block.iter().map(|(k, v)| (*k, v))
    }

    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.by_block {
            self.insert(id, g);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.by_block.is_empty()
    }
}

/// Records a computation for reverse-mode differentiation.
///
/// All values are 2-D; scalars are 1×1 and column vectors n×1. Parameters
/// are read from a [`ParamStore`] when recorded; frozen blocks and constants
/// do not receive gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &str, a: &Array2<f64>, b: &Array2<f64>) {
    assert_eq!(a.dim(), b.dim(), "{op}: shape mismatch {:?} vs {:?}", a.dim(), b.dim());
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

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.val(v)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.val(v).dim()
    }

    /// Value of a 1×1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let x = self.val(v);
        assert_eq!(x.dim(), (1, 1), "scalar_value on {:?}", x.dim());
        x[[0, 0]]
    }

    /// Attaches a name used in non-finite diagnostics.
    pub fn label(&mut self, v: Var, label: impl Into<String>) -> Var {
        self.nodes[v.0].label = Some(label.into());
        v
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Records the current values of a block. Frozen blocks enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.values(id).clone();
        if store.is_frozen(id) {
            let v = self.constant(value);
            self.nodes[v.0].label = Some(store.block(id).name().to_string());
            v
        } else {
            let v = self.push(value, Op::Param(id), &[]);
            self.nodes[v.0].label = Some(store.block(id).name().to_string());
            v
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape("add", self.val(a), self.val(b));
        let v = self.val(a) + self.val(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape("sub", self.val(a), self.val(b));
        let v = self.val(a) - self.val(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape("mul", self.val(a), self.val(b));
        let v = self.val(a) * self.val(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        same_shape("div", self.val(a), self.val(b));
        let v = self.val(a) / self.val(b);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.val(a);
        self.push(v, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a) * c;
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Adds the constant `c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a) + c;
        self.push(v, Op::Shift(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a), self.val(b));
        assert_eq!(x.ncols(), y.nrows(), "matmul: {:?} x {:?}", x.dim(), y.dim());
        let v = x.dot(y);
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a), self.val(b));
        assert_eq!(x.ncols(), y.ncols(), "matmul_nt: {:?} x {:?}ᵀ", x.dim(), y.dim());
        let v = x.dot(&y.t());
        self.push(v, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.val(a).t().as_standard_layout().into_owned();
        self.push(v, Op::Transpose(a), &[a])
    }

    /// Repeats a 1×c row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let x = self.val(a);
        assert_eq!(x.nrows(), 1, "broadcast_rows expects a single row, got {:?}", x.dim());
        let v = x.broadcast((n, x.ncols())).expect("broadcast").to_owned();
        self.push(v, Op::BroadcastRows(a), &[a])
    }

    /// Repeats an n×1 column `c` times.
    pub fn broadcast_cols(&mut self, a: Var, c: usize) -> Var {
        let x = self.val(a);
        assert_eq!(x.ncols(), 1, "broadcast_cols expects a single column, got {:?}", x.dim());
        let v = x.broadcast((x.nrows(), c)).expect("broadcast").to_owned();
        self.push(v, Op::BroadcastCols(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.val(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Column sums: n×c → 1×c.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.val(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a), &[a])
    }

    /// Row sums: n×c → n×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.val(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.val(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn select_rows(&mut self, a: Var, rows: Arc<[usize]>) -> Var {
        let v = self.val(a).select(Axis(0), &rows);
        self.push(v, Op::SelectRows(a, rows), &[a])
    }

    /// `out[i] = Σ_k src[indices[i·per_row + k]]` over the flattened source,
    /// giving an n×1 column.
    pub fn gather_sum(&mut self, src: Var, indices: Arc<[usize]>, per_row: usize) -> Var {
        assert!(per_row > 0 && indices.len() % per_row == 0, "gather_sum: ragged index list");
        let x = self.val(src);
        let flat = x.as_slice().expect("standard layout");
        let n = indices.len() / per_row;
        let mut v = Array2::zeros((n, 1));
        for (i, chunk) in indices.chunks_exact(per_row).enumerate() {
            v[[i, 0]] = chunk.iter().map(|&j| flat[j]).sum();
        }
        self.push(v, Op::GatherSum { src, indices, per_row }, &[src])
    }

    /// `lo + (hi - lo)·(tanh(x + offset) + 1)/2`, evaluated in the
    /// equivalent logistic form `lo + (hi - lo)·σ(2(x + offset))` for
    /// precision near the lower bound.
    pub fn bounded(&mut self, x: Var, lo: f64, hi: f64, offset: f64) -> Var {
        let range = hi - lo;
        let v = self.val(x).mapv(|r| bounded_value(r, lo, hi, offset));
        self.push(v, Op::Bounded { x, range, offset }, &[x])
    }

    /// Elementwise `ln N(x; mean, std²)`.
    pub fn normal_log_prob(&mut self, x: Var, mean: Var, std: Var) -> Var {
        same_shape("normal_log_prob", self.val(x), self.val(mean));
        same_shape("normal_log_prob", self.val(x), self.val(std));
        let mut v = Array2::zeros(self.val(x).raw_dim());
        Zip::from(&mut v)
            .and(self.val(x))
            .and(self.val(mean))
            .and(self.val(std))
            .for_each(|o, &x, &m, &s| {
                let z = (x - m) / s;
                *o = -0.5 * z * z - s.ln() - 0.5 * LN_2PI;
            });
        self.push(v, Op::NormalLogProb(x, mean, std), &[x, mean, std])
    }

    /// Elementwise `KL(N(mq, sq²) ‖ N(mp, sp²))`.
    pub fn kl_normal(&mut self, mq: Var, sq: Var, mp: Var, sp: Var) -> Var {
        for other in [sq, mp, sp] {
            same_shape("kl_normal", self.val(mq), self.val(other));
        }
        let mut v = Array2::zeros(self.val(mq).raw_dim());
        Zip::from(&mut v)
            .and(self.val(mq))
            .and(self.val(sq))
            .and(self.val(mp))
            .and(self.val(sp))
            .for_each(|o, &mq, &sq, &mp, &sp| {
                // ln(sp/sq) + (sq²/sp² - 1)/2 written around u = sq/sp - 1 to
                // avoid cancellation when the two are nearly equal
                let u = sq / sp - 1.0;
                let z = (mq - mp) / sp;
                *o = (u - u.ln_1p()) + 0.5 * u * u + 0.5 * z * z;
            });
        self.push(v, Op::KlNormal(mq, sq, mp, sp), &[mq, sq, mp, sp])
    }

    /// Elementwise Gamma log density with shape/rate parameters.
    pub fn gamma_log_prob(&mut self, x: Var, shape: Var, rate: Var) -> Var {
        same_shape("gamma_log_prob", self.val(x), self.val(shape));
        same_shape("gamma_log_prob", self.val(x), self.val(rate));
        let mut v = Array2::zeros(self.val(x).raw_dim());
        Zip::from(&mut v)
            .and(self.val(x))
            .and(self.val(shape))
            .and(self.val(rate))
            .for_each(|o, &x, &a, &b| {
                *o = a * b.ln() + (a - 1.0) * x.ln() - b * x - ln_gamma(a);
            });
        self.push(v, Op::GammaLogProb(x, shape, rate), &[x, shape, rate])
    }

    /// Elementwise `KL(Gamma(aq, bq) ‖ Gamma(ap, bp))`, shape/rate.
    pub fn kl_gamma(&mut self, aq: Var, bq: Var, ap: Var, bp: Var) -> Var {
        for other in [bq, ap, bp] {
            same_shape("kl_gamma", self.val(aq), self.val(other));
        }
        let mut v = Array2::zeros(self.val(aq).raw_dim());
        Zip::from(&mut v)
            .and(self.val(aq))
            .and(self.val(bq))
            .and(self.val(ap))
            .and(self.val(bp))
            .for_each(|o, &aq, &bq, &ap, &bp| *o = kl_gamma_value(aq, bq, ap, bp));
        self.push(v, Op::KlGamma(aq, bq, ap, bp), &[aq, bq, ap, bp])
    }

    /// Reparameterized Gamma draw `quantile(shape, Φ(eps)) / rate`, with the
    /// standard normal `eps` held fixed.
    pub fn gamma_rsample(&mut self, shape: Var, rate: Var, eps: &Array2<f64>) -> Var {
        same_shape("gamma_rsample", self.val(shape), self.val(rate));
        same_shape("gamma_rsample", self.val(shape), eps);
        let mut v = Array2::zeros(eps.raw_dim());
        let mut dx_dshape = Array2::zeros(eps.raw_dim());
        Zip::from(&mut v)
            .and(&mut dx_dshape)
            .and(self.val(shape))
            .and(self.val(rate))
            .and(eps)
            .for_each(|o, d, &a, &b, &e| {
                let x = gamma_standard_quantile(a, e);
                *d = gamma_quantile_dshape(a, x);
                *o = x / b;
            });
        self.push(v, Op::GammaRsample { shape, rate, dx_dshape }, &[shape, rate])
    }

    /// `ln |det a|` of a square matrix.
    pub fn log_abs_det(&mut self, x: Var) -> Var {
        let a = self.val(x);
        assert_eq!(a.nrows(), a.ncols(), "log_abs_det of non-square {:?}", a.dim());
        let n = a.nrows();
        let m = DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
        let lu = m.lu();
        let u = lu.u();
        let value: f64 = (0..n).map(|i| u[(i, i)].abs().ln()).sum();
        let inv_t = match lu.try_inverse() {
            Some(inv) => Array2::from_shape_fn((n, n), |(i, j)| inv[(j, i)]),
            None => Array2::from_elem((n, n), f64::NAN),
        };
        self.push(
            Array2::from_elem((1, 1), value),
            Op::LogAbsDet { x, inv_t },
            &[x],
        )
    }

    fn describe(&self, i: usize) -> String {
        let node = &self.nodes[i];
        match &node.label {
            Some(l) => format!("node {i} ({}, `{l}`)", node.op.name()),
            None => format!("node {i} ({})", node.op.name()),
        }
    }

    /// First recorded node (up to `out`) holding a NaN or infinity.
    pub fn first_non_finite(&self, out: Var) -> Option<String> {
        (0..=out.0)
            .find(|&i| self.nodes[i].value.iter().any(|x| !x.is_finite()))
            .map(|i| self.describe(i))
    }

    /// Reverse pass from the scalar `out`.
    pub fn gradients(&self, out: Var) -> Result<Gradients> {
        let value = self.val(out);
        if value.dim() != (1, 1) {
            return Err(DpmsError::shape("objective", &[1, 1], &[value.nrows(), value.ncols()]));
        }
        if !value[[0, 0]].is_finite() {
            let culprit = self.first_non_finite(out).unwrap_or_else(|| self.describe(out.0));
            return Err(DpmsError::NonFinite(format!("objective is {}; first at {culprit}", value[[0, 0]])));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Array2::ones((1, 1)));
        let mut result = Gradients::default();

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(DpmsError::NonFinite(format!(
                            "gradient of {}; first non-finite value at {}",
                            self.describe(i),
                            self.first_non_finite(out).unwrap_or_else(|| "no node".into())
                        )));
                    }
                    result.insert(*id, g);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *b, || g.clone());
                    self.acc(&mut grads, *a, || g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *b, || -&g);
                    self.acc(&mut grads, *a, || g);
                }
                Op::Mul(a, b) => {
                    self.acc(&mut grads, *a, || &g * self.val(*b));
                    self.acc(&mut grads, *b, || &g * self.val(*a));
                }
                Op::Div(a, b) => {
                    let bv = self.val(*b);
                    self.acc(&mut grads, *a, || &g / bv);
                    self.acc(&mut grads, *b, || -(&g * y) / bv);
                }
                Op::Neg(a) => self.acc(&mut grads, *a, || -g),
                Op::Scale(a, c) => self.acc(&mut grads, *a, || g * *c),
                Op::Shift(a) => self.acc(&mut grads, *a, || g),
                Op::MatMul(a, b) => {
                    self.acc(&mut grads, *a, || g.dot(&self.val(*b).t()));
                    self.acc(&mut grads, *b, || self.val(*a).t().dot(&g));
                }
                Op::MatMulNt(a, b) => {
                    self.acc(&mut grads, *a, || g.dot(self.val(*b)));
                    self.acc(&mut grads, *b, || g.t().dot(self.val(*a)));
                }
                Op::Transpose(a) => self.acc(&mut grads, *a, || g.t().as_standard_layout().into_owned()),
                Op::BroadcastRows(a) => self.acc(&mut grads, *a, || g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::BroadcastCols(a) => self.acc(&mut grads, *a, || g.sum_axis(Axis(1)).insert_axis(Axis(1))),
                Op::Exp(a) => self.acc(&mut grads, *a, || g * y),
                Op::Log(a) => self.acc(&mut grads, *a, || g / self.val(*a)),
                Op::Tanh(a) => self.acc(&mut grads, *a, || {
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
                    d
                }),
                Op::Relu(a) => self.acc(&mut grads, *a, || {
                    let mut d = g;
                    Zip::from(&mut d).and(self.val(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    d
                }),
                Op::Square(a) => self.acc(&mut grads, *a, || g * self.val(*a) * 2.0),
                Op::Sum(a) => self.acc(&mut grads, *a, || Array2::from_elem(self.val(*a).raw_dim(), g[[0, 0]])),
                Op::SumRows(a) => self.acc(&mut grads, *a, || {
                    g.broadcast(self.val(*a).raw_dim()).expect("broadcast").to_owned()
                }),
                Op::SumCols(a) => self.acc(&mut grads, *a, || {
                    g.broadcast(self.val(*a).raw_dim()).expect("broadcast").to_owned()
                }),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.val(*p).ncols();
                        let range = start..start + w;
                        self.acc(&mut grads, *p, || g.slice(s![.., range]).to_owned());
                        start += w;
                    }
                }
                Op::SelectRows(a, rows) => self.acc(&mut grads, *a, || {
                    let mut d = Array2::zeros(self.val(*a).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &g.row(k);
                    }
                    d
                }),
                Op::GatherSum { src, indices, per_row } => self.acc(&mut grads, *src, || {
                    let mut d = Array2::zeros(self.val(*src).raw_dim());
                    let flat = d.as_slice_mut().expect("standard layout");
                    for (k, chunk) in indices.chunks_exact(*per_row).enumerate() {
                        let gk = g[[k, 0]];
                        for &j in chunk {
                            flat[j] += gk;
                        }
                    }
                    d
                }),
                Op::Bounded { x, range, offset } => self.acc(&mut grads, *x, || {
                    let mut d = g;
                    Zip::from(&mut d).and(self.val(*x)).for_each(|d, &r| {
                        let p = logistic(2.0 * (r + offset));
                        *d *= 2.0 * range * p * (1.0 - p);
                    });
                    d
                }),
                Op::NormalLogProb(x, m, s) => {
                    let (xv, mv, sv) = (self.val(*x), self.val(*m), self.val(*s));
                    let mut gx = Array2::zeros(g.raw_dim());
                    let mut gs = Array2::zeros(g.raw_dim());
                    Zip::from(&mut gx)
                        .and(&mut gs)
                        .and(&g)
                        .and(xv)
                        .and(mv)
                        .and(sv)
                        .for_each(|gx, gs, &g, &x, &m, &s| {
                            let r = (x - m) / s;
                            *gx = -g * r / s;
                            *gs = g * (r * r - 1.0) / s;
                        });
                    self.acc(&mut grads, *s, || gs);
                    self.acc(&mut grads, *m, || -&gx);
                    self.acc(&mut grads, *x, || gx);
                }
                Op::KlNormal(mq, sq, mp, sp) => {
                    let (v1, v2, v3, v4) = (self.val(*mq), self.val(*sq), self.val(*mp), self.val(*sp));
                    let mut gm = Array2::zeros(g.raw_dim());
                    let mut gsq = Array2::zeros(g.raw_dim());
                    let mut gsp = Array2::zeros(g.raw_dim());
                    for ((idx, &gi), ((&mq, &sq), (&mp, &sp))) in
                        g.indexed_iter().zip(v1.iter().zip(v2).zip(v3.iter().zip(v4)))
                    {
                        let d = mq - mp;
                        let sp2 = sp * sp;
                        gm[idx] = gi * d / sp2;
                        gsq[idx] = gi * (sq / sp2 - 1.0 / sq);
                        gsp[idx] = gi * (1.0 / sp - (sq * sq + d * d) / (sp2 * sp));
                    }
                    self.acc(&mut grads, *sq, || gsq);
                    self.acc(&mut grads, *sp, || gsp);
                    self.acc(&mut grads, *mp, || -&gm);
                    self.acc(&mut grads, *mq, || gm);
                }
                Op::GammaLogProb(x, a, b) => {
                    let (xv, av, bv) = (self.val(*x), self.val(*a), self.val(*b));
                    let mut gx = Array2::zeros(g.raw_dim());
                    let mut ga = Array2::zeros(g.raw_dim());
                    let mut gb = Array2::zeros(g.raw_dim());
                    for ((idx, &gi), (&x, (&a, &b))) in g.indexed_iter().zip(xv.iter().zip(av.iter().zip(bv))) {
                        gx[idx] = gi * ((a - 1.0) / x - b);
                        ga[idx] = gi * (b.ln() + x.ln() - digamma(a));
                        gb[idx] = gi * (a / b - x);
                    }
                    self.acc(&mut grads, *x, || gx);
                    self.acc(&mut grads, *a, || ga);
                    self.acc(&mut grads, *b, || gb);
                }
                Op::KlGamma(aq, bq, ap, bp) => {
                    let (a1, b1, a2, b2) = (self.val(*aq), self.val(*bq), self.val(*ap), self.val(*bp));
                    let mut parts: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros(g.raw_dim()));
                    for ((idx, &gi), ((&x1, &y1), (&x2, &y2))) in
                        g.indexed_iter().zip(a1.iter().zip(b1).zip(a2.iter().zip(b2)))
                    {
                        let (d1, d2, d3, d4) = kl_gamma_grad(x1, y1, x2, y2);
                        parts[0][idx] = gi * d1;
                        parts[1][idx] = gi * d2;
                        parts[2][idx] = gi * d3;
                        parts[3][idx] = gi * d4;
                    }
                    let [g1, g2, g3, g4] = parts;
                    self.acc(&mut grads, *aq, || g1);
                    self.acc(&mut grads, *bq, || g2);
                    self.acc(&mut grads, *ap, || g3);
                    self.acc(&mut grads, *bp, || g4);
                }
                Op::GammaRsample { shape, rate, dx_dshape } => {
                    let bv = self.val(*rate);
                    self.acc(&mut grads, *shape, || &g * dx_dshape / bv);
                    self.acc(&mut grads, *rate, || -(&g * y) / bv);
                }
                Op::LogAbsDet { x, inv_t } => self.acc(&mut grads, *x, || inv_t * g[[0, 0]]),
            }
        }
        Ok(result)
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: impl FnOnce() -> Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let d = delta();
        match &mut grads[v.0] {
            Some(existing) => *existing += &d,
            slot => *slot = Some(d),
        }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Forward map of [`Tape::bounded`].
pub fn bounded_value(raw: f64, lo: f64, hi: f64, offset: f64) -> f64 {
    (lo + (hi - lo) * logistic(2.0 * (raw + offset))).clamp(lo, hi)
}

/// `KL(Gamma(a1, b1) ‖ Gamma(a2, b2))` with shape/rate parameters.
pub fn kl_gamma_value(a1: f64, b1: f64, a2: f64, b2: f64) -> f64 {
    (a1 - a2) * digamma(a1) - ln_gamma(a1) + ln_gamma(a2) + a2 * (b1.ln() - b2.ln()) + a1 * (b2 - b1) / b1
}

/// Partial derivatives of [`kl_gamma_value`] in argument order.
pub fn kl_gamma_grad(a1: f64, b1: f64, a2: f64, b2: f64) -> (f64, f64, f64, f64) {
    (
        (a1 - a2) * trigamma(a1) + b2 / b1 - 1.0,
        a2 / b1 - a1 * b2 / (b1 * b1),
        digamma(a2) - digamma(a1) + b1.ln() - b2.ln(),
        a1 / b1 - a2 / b2,
    )
}

/// Reverse pass from `out`, adding the gradients into `store`.
pub fn backward(tape: &Tape, out: Var, store: &mut ParamStore) -> Result<()> {
    let grads = tape.gradients(out)?;
    store.accumulate(&grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{check_gradients, GradCheckOptions};
    use ndarray::array;

    fn grads_of(store: &ParamStore, f: impl Fn(&ParamStore, &mut Tape) -> Var) -> Gradients {
        let mut tape = Tape::new();
        let out = f(store, &mut tape);
        tape.gradients(out).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[1.0, 2.0, 3.0]]).unwrap();
        let g = grads_of(&store, |s, t| {
            let v = t.param(s, x);
            t.sum(v)
        });
        assert_eq!(g.get(x).unwrap(), &array![[1.0, 1.0, 1.0]]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[0.5], [-1.5], [2.0]]).unwrap();
        let g = grads_of(&store, |s, t| {
            let v = t.param(s, x);
            let sq = t.square(v);
            let total = t.sum(sq);
            t.scale(total, 0.5)
        });
        assert_eq!(g.get(x).unwrap(), store.values(x));
    }

    #[test]
    fn frozen_blocks_get_no_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[1.0]]).unwrap();
        let y = store.add("y", array![[2.0]]).unwrap();
        store.set_frozen(y, true);
        let g = grads_of(&store, |s, t| {
            let a = t.param(s, x);
            let b = t.param(s, y);
            let p = t.mul(a, b);
            t.sum(p)
        });
        assert_eq!(g.get(x).unwrap()[[0, 0]], 2.0);
        assert!(g.get(y).is_none());
    }

    #[test]
    fn non_finite_objective_names_first_bad_node() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[-1.0]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, x);
        let l = tape.ln(v);
        let l = tape.label(l, "log_of_negative");
        let out = tape.sum(l);
        let err = tape.gradients(out).unwrap_err().to_string();
        assert!(err.contains("log_of_negative"), "{err}");
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]]).unwrap();
        let b = store.add("b", array![[0.5, -1.0], [0.25, 0.8], [-0.6, 0.1]]).unwrap();
        let r = store.add("r", array![[0.2, -0.3]]).unwrap();
        let m = store.add("m", array![[1.2, 0.3, -0.2], [0.1, 0.9, 0.4], [-0.3, 0.2, 1.5]]).unwrap();
        let rows: Arc<[usize]> = Arc::from(vec![1, 0, 1]);
        let idx: Arc<[usize]> = Arc::from(vec![0, 2, 1, 5, 3, 3]);
        let report = check_gradients(
            &store,
            |s, t| {
                let a = t.param(s, a);
                let b = t.param(s, b);
                let r = t.param(s, r);
                let m = t.param(s, m);
                let ab = t.matmul(a, b); // 2×2
                let rb = t.broadcast_rows(r, 2);
                let h = t.add(ab, rb);
                let h = t.tanh(h);
                let bt = t.transpose(b); // 2×3
                let abt = t.matmul_nt(a, bt); // 2×2
                let e = t.exp(abt);
                let q = t.div(h, e);
                let p = t.relu(abt);
                let p = t.shift(p, 1.0);
                let lp = t.ln(p);
                let c = t.concat_cols(&[q, lp, a]); // 2×7
                let sel = t.select_rows(c, rows.clone());
                let cs = t.sum_cols(sel);
                let bc = t.broadcast_cols(cs, 2);
                let rs = t.sum_rows(bc);
                let gsum = t.gather_sum(a, idx.clone(), 2);
                let gsq = t.square(gsum);
                let det = t.log_abs_det(m);
                let n = t.neg(det);
                let s1 = t.sum(rs);
                let s2 = t.sum(gsq);
                let s3 = t.sub(s1, s2);
                let s4 = t.mul(s3, n);
                let bd = t.bounded(a, 0.1, 10.0, 0.3);
                let s5 = t.sum(bd);
                let s5 = t.scale(s5, 0.1);
                Ok(t.add(s4, s5))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report:#?}");
    }

    #[test]
    fn distribution_ops_match_finite_differences() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[0.3, 1.7]]).unwrap();
        let m = store.add("m", array![[0.1, -0.4]]).unwrap();
        let s = store.add("s", array![[0.8, 1.3]]).unwrap();
        let a1 = store.add("a1", array![[3.0, 12.0]]).unwrap();
        let b1 = store.add("b1", array![[2.0, 400.0]]).unwrap();
        let a2 = store.add("a2", array![[5.0, 10.0]]).unwrap();
        let b2 = store.add("b2", array![[1.5, 1000.0]]).unwrap();
        let eps = array![[-0.8, 1.2]];
        let report = check_gradients(
            &store,
            |st, t| {
                let [x, m, s, a1, b1, a2, b2] = [x, m, s, a1, b1, a2, b2].map(|id| t.param(st, id));
                let lp = t.normal_log_prob(x, m, s);
                let kn = t.kl_normal(m, s, x, s);
                let kg = t.kl_gamma(a1, b1, a2, b2);
                let z = t.gamma_rsample(a1, b1, &eps);
                let gl = t.gamma_log_prob(z, a2, b2);
                let gl = t.scale(gl, 1e-3);
                let parts = [lp, kn, kg, gl].map(|v| t.sum(v));
                let u = t.add(parts[0], parts[1]);
                let u = t.sub(u, parts[2]);
                Ok(t.add(u, parts[3]))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-5, "{report:#?}");
    }
}
