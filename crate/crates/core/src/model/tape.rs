//! Reverse-mode autodiff over row-major 2D tensors.
//!
//! A [`Tape`] borrows the parameter tensors and records every op of one
//! forward pass. Values of intermediate nodes live on the tape; parameters
//! are read through the borrow so building a tape never copies weights.

use ndarray::{s, Array2, ArrayView2, Axis, NdFloat};

use crate::seed::Rng;
use rand::Rng as _;

pub trait Scalar: NdFloat + std::iter::Sum + Default + num_traits::FromPrimitive {}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn c<T: Scalar>(x: f64) -> T {
    T::from(x).expect("constant fits")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scatter {
        x: Var,
        token: Var,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<T>>,
    },
    MeanRows(Var),
    Dropout(Var, Array2<T>),
    MaskedMse {
        pred: Var,
        target: Array2<T>,
        rows: Vec<usize>,
    },
    Bce {
        logits: Var,
        target: Array2<T>,
    },
    SoftmaxXent {
        logits: Var,
        label: usize,
    },
    Mse {
        pred: Var,
        target: Array2<T>,
    },
}

struct Node<T> {
    value: Option<Array2<T>>,
    op: Op<T>,
}

/// Parameter gradients indexed like the parameter list; `None` for
/// parameters the graph never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    /// Add `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => *a += b,
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub struct Tape<'p, T: Scalar> {
    params: &'p [Array2<T>],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [Array2<T>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(a), _) => a.view(),
            (None, Op::Param(id)) => self.params[*id].view(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `x + bias` with a `1 x d` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let v = &self.value(x) + &self.value(bias);
        self.push(v, Op::AddRow(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// An `n x d` matrix whose row `rows[i]` is row `i` of `x` and whose
    /// remaining rows are the `1 x d` `token`.
    pub fn scatter(&mut self, x: Var, token: Var, rows: Vec<usize>, n: usize) -> Var {
        let xv = self.value(x);
        let tv = self.value(token);
        let d = xv.ncols();
        let mut out = Array2::zeros((n, d));
        for r in 0..n {
            out.row_mut(r).assign(&tv.row(0));
        }
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).assign(&xv.row(i));
        }
        self.push(out, Op::Scatter { x, token, rows })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x).to_owned();
        let (n, d) = xv.dim();
        let dn: T = c(d as f64);
        let eps: T = c(LN_EPS);
        let mut xhat = Array2::zeros((n, d));
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.sum() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let y = &(&xhat * &self.value(gamma)) + &self.value(beta);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        self.push(v, Op::Gelu(x))
    }

    /// Multi-head scaled dot-product attention over `heads` equal column
    /// slices of `q`, `k` and `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        let dh = d / heads;
        let scale = T::one() / c::<T>(dh as f64).sqrt();
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = qv.slice(cols).dot(&kv.slice(cols).t());
            p.mapv_inplace(|x| x * scale);
            softmax_rows(&mut p);
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// `1 x d` mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(x))
    }

    /// Inverted dropout with keep probability `1 - p`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = c::<T>(1.0 / (1.0 - p));
        let mask = self.value(x).mapv(|_| if rng.gen_bool(p) { T::zero() } else { keep });
        let v = &self.value(x) * &mask;
        self.push(v, Op::Dropout(x, mask))
    }

    /// Mean squared error over the listed rows only; 0 when `rows` is empty.
    pub fn masked_mse(&mut self, pred: Var, target: Array2<T>, rows: Vec<usize>) -> Var {
        let pv = self.value(pred);
        let mut acc = T::zero();
        for &r in &rows {
            for (&p, &t) in pv.row(r).iter().zip(target.row(r)) {
                acc += (p - t) * (p - t);
            }
        }
        let denom = rows.len() * pv.ncols();
        let loss = if denom == 0 { T::zero() } else { acc / c(denom as f64) };
        self.push(Array2::from_elem((1, 1), loss), Op::MaskedMse { pred, target, rows })
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, target: Array2<T>) -> Var {
        let lv = self.value(logits);
        let n: T = c(lv.len() as f64);
        let loss = lv
            .iter()
            .zip(target.iter())
            .map(|(&z, &t)| softplus(z) - t * z)
            .sum::<T>()
            / n;
        self.push(Array2::from_elem((1, 1), loss), Op::Bce { logits, target })
    }

    /// Cross-entropy of one `1 x K` logit row against `label`.
    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Var {
        let lv = self.value(logits);
        let m = lv.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = m + lv.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
        let loss = lse - lv[[0, label]];
        self.push(Array2::from_elem((1, 1), loss), Op::SoftmaxXent { logits, label })
    }

    pub fn mse(&mut self, pred: Var, target: Array2<T>) -> Var {
        let pv = self.value(pred);
        let n: T = c(pv.len() as f64);
        let loss = pv
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        self.push(Array2::from_elem((1, 1), loss), Op::Mse { pred, target })
    }

    /// Backpropagate from scalar node `out`, seeded with `d out = seed`.
    pub fn backward(&self, out: Var, seed: T) -> Gradients<T> {
        let mut g: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[out.0] = Some(Array2::from_elem((1, 1), seed));
        let mut params = Gradients::zeros_like(self.params.len());
        for i in (0..=out.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match &mut params.grads[*id] {
                    Some(acc) => *acc += &dy,
                    slot => *slot = Some(dy),
                },
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    add_grad(&mut g, *a, da);
                    add_grad(&mut g, *b, db);
                }
                Op::AddRow(x, b) => {
                    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_grad(&mut g, *b, db);
                    add_grad(&mut g, *x, dy);
                }
                Op::Add(a, b) => {
                    add_grad(&mut g, *a, dy.clone());
                    add_grad(&mut g, *b, dy);
                }
                Op::Scatter { x, token, rows } => {
                    let d = dy.ncols();
                    let mut dx = Array2::zeros((rows.len(), d));
                    let mut hit = vec![false; dy.nrows()];
                    for (j, &r) in rows.iter().enumerate() {
                        dx.row_mut(j).assign(&dy.row(r));
                        hit[r] = true;
                    }
                    let mut dt = Array2::zeros((1, d));
                    for (r, _) in hit.iter().enumerate().filter(|(_, h)| !**h) {
                        let mut row = dt.row_mut(0);
                        row += &dy.row(r);
                    }
                    add_grad(&mut g, *x, dx);
                    add_grad(&mut g, *token, dt);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma);
                    let dgamma = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &dy * &gv;
                    let (n, d) = dy.dim();
                    let dn: T = c(d as f64);
                    let mut dx = Array2::zeros((n, d));
                    for r in 0..n {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let s1 = dh.sum();
                        let s2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..d {
                            dx[[r, j]] = rstd[r] / dn * (dn * dh[j] - s1 - xh[j] * s2);
                        }
                    }
                    add_grad(&mut g, *gamma, dgamma);
                    add_grad(&mut g, *beta, dbeta);
                    add_grad(&mut g, *x, dx);
                }
                Op::Gelu(x) => {
                    let mut dx = self.value(*x).mapv(gelu_grad);
                    dx *= &dy;
                    add_grad(&mut g, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = T::one() / c::<T>(dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let dout = dy.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&dout));
                        let dp = dout.dot(&vv.slice(cols).t());
                        // Softmax backward row by row.
                        let mut ds = Array2::zeros(p.dim());
                        for r in 0..p.nrows() {
                            let dot = p.row(r).iter().zip(dp.row(r).iter()).map(|(&a, &b)| a * b).sum::<T>();
                            for j in 0..p.ncols() {
                                ds[[r, j]] = p[[r, j]] * (dp[[r, j]] - dot) * scale;
                            }
                        }
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    add_grad(&mut g, *q, dq);
                    add_grad(&mut g, *k, dk);
                    add_grad(&mut g, *v, dv);
                }
                Op::MeanRows(x) => {
                    let n = self.value(*x).nrows();
                    let inv: T = c(1.0 / n as f64);
                    let row = dy.row(0).mapv(|v| v * inv);
                    let dx = row.broadcast((n, row.len())).expect("broadcast").to_owned();
                    add_grad(&mut g, *x, dx);
                }
                Op::Dropout(x, mask) => {
                    add_grad(&mut g, *x, &dy * mask);
                }
                Op::MaskedMse { pred, target, rows } => {
                    let pv = self.value(*pred);
                    let denom = rows.len() * pv.ncols();
                    let mut dp = Array2::zeros(pv.dim());
                    if denom > 0 {
                        let k = dy[[0, 0]] * c(2.0 / denom as f64);
                        for &r in rows {
                            for j in 0..pv.ncols() {
                                dp[[r, j]] = k * (pv[[r, j]] - target[[r, j]]);
                            }
                        }
                    }
                    add_grad(&mut g, *pred, dp);
                }
                Op::Bce { logits, target } => {
                    let lv = self.value(*logits);
                    let k = dy[[0, 0]] / c(lv.len() as f64);
                    let mut dl = lv.mapv(sigmoid);
                    dl -= target;
                    dl.mapv_inplace(|v| v * k);
                    add_grad(&mut g, *logits, dl);
                }
                Op::SoftmaxXent { logits, label } => {
                    let mut p = self.value(*logits).to_owned();
                    softmax_rows(&mut p);
                    p[[0, *label]] -= T::one();
                    let k = dy[[0, 0]];
                    p.mapv_inplace(|v| v * k);
                    add_grad(&mut g, *logits, p);
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let k = dy[[0, 0]] * c(2.0 / pv.len() as f64);
                    let dp = (&pv - target).mapv(|v| v * k);
                    add_grad(&mut g, *pred, dp);
                }
            }
        }
        params
    }
}

fn add_grad<T: Scalar>(g: &mut [Option<Array2<T>>], v: Var, d: Array2<T>) {
    match &mut g[v.0] {
        Some(acc) => *acc += &d,
        slot => *slot = Some(d),
    }
}

pub fn softmax_rows<T: Scalar>(a: &mut Array2<T>) {
    for mut row in a.rows_mut() {
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let u = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    c::<T>(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = c::<T>(GELU_K) * (T::one() + c::<T>(3.0 * GELU_A) * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_at_three_has_gradient_six() {
        let params = vec![array![[3.0f64]]];
        let mut t = Tape::new(&params);
        let w = t.param(0);
        let loss = t.mse(w, array![[0.0]]);
        assert_eq!(t.scalar(loss), 9.0);
        let g = t.backward(loss, 1.0);
        assert_eq!(g.grads[0].as_ref().unwrap()[[0, 0]], 6.0);
        let z = t.backward(loss, 0.0);
        assert_eq!(z.grads[0].as_ref().unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let params: Vec<Array2<f64>> = vec![];
        let mut t = Tape::new(&params);
        let z = t.input(Array2::zeros((5, 1)));
        let loss = t.bce_with_logits(z, array![[1.0], [0.0], [1.0], [1.0], [0.0]]);
        assert!((t.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    fn fd_check(build: impl Fn(&mut Tape<f64>) -> Var, params: Vec<Array2<f64>>) {
        let t_params = params.clone();
        let mut t = Tape::new(&t_params);
        let out = build(&mut t);
        let g = t.backward(out, 1.0);
        let h = 1e-5;
        for (pid, p) in params.iter().enumerate() {
            for idx in 0..p.len() {
                let eval = |delta: f64| {
                    let mut ps = params.clone();
                    let flat = ps[pid].as_slice_mut().unwrap();
                    flat[idx] += delta;
                    let mut t = Tape::new(&ps);
                    let o = build(&mut t);
                    t.scalar(o)
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = g.grads[pid].as_ref().map_or(0.0, |a| a.as_slice().unwrap()[idx]);
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < 1e-5, "param {pid}[{idx}]: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn ops_match_finite_differences() {
        let x = array![[0.3, -1.2, 0.5, 0.9], [1.1, 0.2, -0.4, 0.0], [-0.7, 0.8, 0.1, 0.6]];
        let params = vec![
            array![
                [0.2, -0.5, 0.3, 0.1],
                [0.4, 0.1, -0.2, 0.6],
                [-0.3, 0.2, 0.5, -0.1],
                [0.1, 0.3, -0.4, 0.2]
            ],
            array![[0.05, -0.1, 0.2, 0.0]],
            array![[1.1, 0.9, 1.05, 0.95]],
            array![[0.01, -0.02, 0.03, 0.0]],
            array![[0.3, -0.3, 0.2, 0.1]],
            array![[0.5], [-0.4], [0.3], [0.2]],
        ];
        let build = |t: &mut Tape<f64>| {
            let xi = t.input(x.clone());
            let (w, b, g, be, tok, wh) = (t.param(0), t.param(1), t.param(2), t.param(3), t.param(4), t.param(5));
            let y = t.linear(xi, w, b);
            let y = t.layer_norm(y, g, be);
            let a = t.attention(y, y, y, 2);
            let a = t.add(a, y);
            let a = t.gelu(a);
            let a = t.scatter(a, tok, vec![0, 2, 3], 5);
            let z = t.matmul(a, wh);
            let l1 = t.bce_with_logits(z, array![[1.0], [0.0], [0.0], [1.0], [1.0]]);
            let m = t.mean_rows(a);
            let l2 = t.softmax_xent(m, 2);
            let l3 = t.masked_mse(a, Array2::from_elem((5, 4), 0.25), vec![1, 4]);
            let s = t.add(l1, l2);
            t.add(s, l3)
        };
        fd_check(build, params);
    }
}
