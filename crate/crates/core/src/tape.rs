//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in evaluation order. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates adjoints for every node that depends on a differentiable leaf.
//! Everything is double precision and single threaded, so gradients are
//! bit-reproducible for a fixed sequence of operations.

use std::rc::Rc;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 5-D convolution `[N, T, H, W, C]`, causal along `T` and
/// zero-padded to the same size along `H` and `W`.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    t: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kt: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.n * self.t * self.h * self.w
    }

    fn patch(&self) -> usize {
        self.kt * self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kt == 1 && self.kh == 1 && self.kw == 1
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Option<Rc<Vec<f64>>>,
    },
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Gather(Var, Rc<Vec<usize>>),
    ConcatLast(Vec<Var>),
    MeanMid {
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, or zeros of length `len` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

/// `C (+)= op(A) * op(B)` where `A` is logically `m x k` and `B` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe dense row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.patch();
    let mut cols = vec![0.0; g.rows() * p];
    let (ht, hw) = (g.kh / 2, g.kw / 2);
    let mut r = 0;
    for n in 0..g.n {
        for t in 0..g.t {
            for y in 0..g.h {
                for xx in 0..g.w {
                    let row = &mut cols[r * p..(r + 1) * p];
                    for dt in 0..g.kt {
                        let Some(tt) = (t + dt).checked_sub(g.kt - 1) else {
                            continue;
                        };
                        for dy in 0..g.kh {
                            let Some(yy) = (y + dy).checked_sub(ht).filter(|&v| v < g.h) else {
                                continue;
                            };
                            for dx in 0..g.kw {
                                let Some(xc) = (xx + dx).checked_sub(hw).filter(|&v| v < g.w) else {
                                    continue;
                                };
                                let src = (((n * g.t + tt) * g.h + yy) * g.w + xc) * g.cin;
                                let dst = ((dt * g.kh + dy) * g.kw + dx) * g.cin;
                                row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.patch();
    let (ht, hw) = (g.kh / 2, g.kw / 2);
    let mut r = 0;
    for n in 0..g.n {
        for t in 0..g.t {
            for y in 0..g.h {
                for xx in 0..g.w {
                    let row = &dcols[r * p..(r + 1) * p];
                    for dt in 0..g.kt {
                        let Some(tt) = (t + dt).checked_sub(g.kt - 1) else {
                            continue;
                        };
                        for dy in 0..g.kh {
                            let Some(yy) = (y + dy).checked_sub(ht).filter(|&v| v < g.h) else {
                                continue;
                            };
                            for dxk in 0..g.kw {
                                let Some(xc) = (xx + dxk).checked_sub(hw).filter(|&v| v < g.w) else {
                                    continue;
                                };
                                let dst = (((n * g.t + tt) * g.h + yy) * g.w + xc) * g.cin;
                                let src = ((dt * g.kh + dy) * g.kw + dxk) * g.cin;
                                for c in 0..g.cin {
                                    dx[dst + c] += row[src + c];
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[..., c] + b[c]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let c = self.value(b).len();
        assert_eq!(self.value(x).last_dim(), c, "bias width mismatch");
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for chunk in value.data_mut().chunks_mut(c) {
            chunk.iter_mut().zip(&bias).for_each(|(v, b)| *v += b);
        }
        self.push(value, Op::AddRow(x, b), &[x, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a [m, k] @ b [k, n]`; leading axes of `a` are flattened into `m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be 2-D");
        let (k, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(va.last_dim(), k, "matmul inner dimension mismatch");
        let m = va.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().expect("matmul lhs must have an axis") = n;
        self.push(Tensor::new(shape, out), Op::MatMul(a, b), &[a, b])
    }

    /// Convolution of `x [N, T, H, W, Cin]` with `w [kt, kh, kw, Cin, Cout]`.
    ///
    /// Output frame `t` only reads input frames `t - kt + 1 ..= t`; spatial
    /// kernels are centred (odd sizes) with zero padding.
    pub fn conv(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape();
        let ws = vw.shape();
        assert_eq!(xs.len(), 5, "conv input must be [N,T,H,W,C], got {xs:?}");
        assert_eq!(ws.len(), 5, "conv kernel must be [kt,kh,kw,Cin,Cout]");
        assert_eq!(xs[4], ws[3], "conv channel mismatch");
        assert!(ws[1] % 2 == 1 && ws[2] % 2 == 1, "spatial kernel sizes must be odd");
        let geom = ConvGeom {
            n: xs[0],
            t: xs[1],
            h: xs[2],
            w: xs[3],
            cin: xs[4],
            cout: ws[4],
            kt: ws[0],
            kh: ws[1],
            kw: ws[2],
        };
        let rows = geom.rows();
        let p = geom.patch();
        let mut out = vec![0.0; rows * geom.cout];
        let cols = if geom.is_pointwise() {
            gemm(rows, p, geom.cout, vx.data(), false, vw.data(), false, &mut out, false);
            None
        } else {
            let cols = im2col(vx.data(), &geom);
            gemm(rows, p, geom.cout, &cols, false, vw.data(), false, &mut out, false);
            Some(Rc::new(cols))
        };
        let value = Tensor::new(vec![geom.n, geom.t, geom.h, geom.w, geom.cout], out);
        self.push(value, Op::Conv { x, w, geom, cols }, &[x, w])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Smooth bound `cap * tanh(x / cap)`.
    pub fn soft_cap(&mut self, a: Var, cap: f64) -> Var {
        let s = self.scale(a, 1.0 / cap);
        let t = self.tanh(s);
        self.scale(t, cap)
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), index.len());
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        self.push(Tensor::new(shape, data), Op::Gather(x, index), &[x])
    }

    /// Concatenate along the trailing axis; all parts share their leading axes.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead: Vec<usize> = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], lead.as_slice(), "concat leading axes differ");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::new(shape, data), Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Mean over the middle axis of `x` viewed as `[outer, mid, inner]`.
    pub fn mean_mid(&mut self, x: Var, outer: usize, mid: usize, inner: usize, shape: Vec<usize>) -> Var {
        let src = self.value(x).data();
        assert_eq!(src.len(), outer * mid * inner);
        assert_eq!(shape.iter().product::<usize>(), outer * inner);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let k = 1.0 / mid as f64;
        data.iter_mut().for_each(|v| *v *= k);
        self.push(Tensor::new(shape, data), Op::MeanMid { x, outer, mid, inner }, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.value(a).clone().reshaped(shape);
        self.push(value, Op::Reshape(a), &[a])
    }

    /// Adjoints of every node with respect to the scalar `out`.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).len(), 1, "backward() needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len_of = |v: Var| self.nodes[v.0].value.len();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * vb[i];
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * va[i];
                        }
                    });
                }
            }
            Op::AddRow(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
                if self.wants(*b) {
                    let c = len_of(*b);
                    accumulate(&mut grads[b.0], c, |d| {
                        for chunk in g.chunks(c) {
                            d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                        }
                    });
                }
            }
            Op::Scale(a, k) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g));
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::MatMul(a, b) => {
                let vb = &self.nodes[b.0].value;
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = len_of(*a) / k.max(1);
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], m * k, |d| gemm(m, n, k, g, false, vb.data(), true, d, true));
                }
                if self.wants(*b) {
                    let va = val(*a);
                    accumulate(&mut grads[b.0], k * n, |d| gemm(k, m, n, va, true, g, false, d, true));
                }
            }
            Op::Conv { x, w, geom, cols } => {
                let rows = geom.rows();
                let p = geom.patch();
                let co = geom.cout;
                if self.wants(*w) {
                    let src: &[f64] = match cols {
                        Some(c) => c,
                        None => val(*x),
                    };
                    accumulate(&mut grads[w.0], p * co, |d| gemm(p, rows, co, src, true, g, false, d, true));
                }
                if self.wants(*x) {
                    let wv = val(*w);
                    if geom.is_pointwise() {
                        accumulate(&mut grads[x.0], rows * p, |d| gemm(rows, co, p, g, false, wv, true, d, true));
                    } else {
                        let mut dcols = vec![0.0; rows * p];
                        gemm(rows, co, p, g, false, wv, true, &mut dcols, false);
                        accumulate(&mut grads[x.0], len_of(*x), |d| col2im(&dcols, geom, d));
                    }
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
            }
            Op::Softplus(a) => {
                if self.wants(*a) {
                    let x = val(*a);
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * sigmoid(x[i]);
                        }
                    });
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * y[i];
                        }
                    });
                }
            }
            Op::Abs(a) => {
                if self.wants(*a) {
                    let x = val(*a);
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 };
                        }
                    });
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    let x = val(*a);
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += 2.0 * g[i] * x[i];
                        }
                    });
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.wants(*a) {
                    let x = val(*a);
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for i in 0..g.len() {
                            if x[i] >= *lo && x[i] <= *hi {
                                d[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Gather(x, index) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], len_of(*x), |d| {
                        for (gi, &src) in g.iter().zip(index.iter()) {
                            d[src] += gi;
                        }
                    });
                }
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for &p in parts {
                    let wd = self.nodes[p.0].value.last_dim();
                    if self.wants(p) {
                        accumulate(&mut grads[p.0], rows * wd, |d| {
                            for r in 0..rows {
                                for c in 0..wd {
                                    d[r * wd + c] += g[r * total + off + c];
                                }
                            }
                        });
                    }
                    off += wd;
                }
            }
            Op::MeanMid { x, outer, mid, inner } => {
                if self.wants(*x) {
                    let k = 1.0 / *mid as f64;
                    accumulate(&mut grads[x.0], outer * mid * inner, |d| {
                        for o in 0..*outer {
                            for m in 0..*mid {
                                let base = (o * mid + m) * inner;
                                for i in 0..*inner {
                                    d[base + i] += k * g[o * inner + i];
                                }
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let g0 = g[0];
                    accumulate(&mut grads[a.0], len_of(*a), |d| d.iter_mut().for_each(|d| *d += g0));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Central-difference check of `f` over every coordinate of every input.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.item(o)
        };
        let h = 1e-6;
        for (k, inp) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], inp.len());
            for i in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} coord {i}: fd {fd} vs analytic {}", analytic[i]);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = rand_tensor(&[2, 3, 3, 4, 2], 1);
        let w = rand_tensor(&[2, 3, 3, 2, 3], 2);
        check(vec![x, w], |t, v| {
            let y = t.conv(v[0], v[1]);
            let y = t.tanh(y);
            t.sum(y)
        });
    }

    #[test]
    fn pointwise_conv_and_matmul_gradients() {
        let x = rand_tensor(&[1, 2, 2, 2, 3], 3);
        let w = rand_tensor(&[1, 1, 1, 3, 2], 4);
        let m = rand_tensor(&[2, 4], 5);
        check(vec![x, w, m], |t, v| {
            let y = t.conv(v[0], v[1]);
            let z = t.matmul(y, v[2]);
            let z = t.square(z);
            t.mean(z)
        });
    }

    #[test]
    fn elementwise_ops_gradients() {
        let a = rand_tensor(&[3, 4], 6);
        let b = rand_tensor(&[3, 4], 7);
        let bias = rand_tensor(&[4], 8);
        check(vec![a, b, bias], |t, v| {
            let s = t.sigmoid(v[0]);
            let p = t.softplus(v[1]);
            let m = t.mul(s, p);
            let r = t.add_row(m, v[2]);
            let e = t.exp(r);
            let c = t.soft_cap(e, 2.0);
            let d = t.sub(c, v[1]);
            let ab = t.abs(d);
            let k = t.clamp(ab, -5.0, 5.0);
            let q = t.add_scalar(k, 0.5);
            t.sum(q)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let a = rand_tensor(&[2, 3, 2], 9);
        let b = rand_tensor(&[2, 3, 1], 10);
        check(vec![a, b], |t, v| {
            let c = t.concat_last(&[v[0], v[1]]);
            let idx = Rc::new(vec![0, 0, 4, 17, 9, 3]);
            let g = t.gather(c, idx, vec![2, 3]);
            let m = t.mean_mid(c, 2, 3, 3, vec![2, 3]);
            let s = t.add(g, m);
            let r = t.reshape(s, vec![6]);
            let sq = t.square(r);
            t.sum(sq)
        });
    }

    #[test]
    fn causal_conv_ignores_future_frames() {
        let mut x = rand_tensor(&[1, 4, 2, 2, 1], 11);
        let w = rand_tensor(&[2, 3, 3, 1, 1], 12);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y0 = t.conv(xv, wv);
        let before = t.value(y0).data()[..8].to_vec();
        // perturb frames 2 and 3
        for v in &mut x.data_mut()[8..] {
            *v += 1.0;
        }
        let mut t2 = Tape::new();
        let (xv, wv) = (t2.constant(x), t2.constant(w));
        let y1 = t2.conv(xv, wv);
        assert_eq!(&t2.value(y1).data()[..8], before.as_slice());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::full(&[3], 2.0));
        let l = t.leaf(Tensor::full(&[3], 1.0));
        let p = t.mul(c, l);
        let s = t.sum(p);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(l).unwrap(), &[2.0, 2.0, 2.0]);
    }
}
