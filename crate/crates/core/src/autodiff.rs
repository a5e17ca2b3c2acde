//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Every forward operation pushes one node onto the [`Tape`]; a node owns its
//! value and an [`Op`] describing how it was produced. [`Tape::backward`]
//! walks the nodes in reverse creation order and accumulates vector-Jacobian
//! products into per-node gradient buffers, so fan-out gradients are summed
//! in the order the consumers were created. The graph is rebuilt each step
//! and dropped afterwards.
//!
//! The op set is exactly what the reconstruction network needs: elementwise
//! arithmetic and activations, dense matrix products, row-vector broadcasts,
//! last-axis layer norm, depthwise convolution, index gathers, centered 2-D
//! Fourier transforms on 2-channel images, complex elementwise products, and
//! a fused selective-scan recurrence.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::fourier;
use crate::ssm::{self, BbarMode};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRowVec(Var, Var),
    MulRowVec(Var, Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Sqrt(Var),
    Abs(Var),
    SumAll(Var),
    MeanAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    DepthwiseConv2d {
        x: Var,
        kernel: Var,
    },
    GatherElems {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    GatherRows {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    Reshape(Var),
    Fft2 {
        x: Var,
        inverse: bool,
    },
    ComplexMul(Var, Var),
    Scan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        mode: BbarMode,
        saved: ssm::ScanSaved,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients of a scalar with respect to every tape node that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, if `v` required grad and was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Define-by-run graph of [`Tensor`] operations.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input node. Parameters pass `requires_grad = true`; data
    /// constants pass `false` and backward never descends into them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, parents: &[Var], op: Op) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(value, rg, op)
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{name}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data);
        self.push(t, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data);
        self.push(t, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data);
        self.push(t, &[a, b], Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| -x);
        self.push(t, &[a], Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| c * x);
        self.push(t, &[a], Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, &[a], Op::AddScalar(a))
    }

    /// Dense product of `a: [m,k]` and `b: [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa.len(), 2, "matmul: lhs must be rank 2");
        assert_eq!(sb.len(), 2, "matmul: rhs must be rank 2");
        assert_eq!(sa[1], sb[0], "matmul: inner dimensions differ");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::from_vec(&[m, n], out);
        self.push(t, &[a, b], Op::MatMul(a, b))
    }

    /// Adds row vector `v: [c]` to every row of `x: [r,c]` (rank >= 2 allowed;
    /// the last axis must match `v`).
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Var {
        let c = *self.value(x).shape().last().expect("add_row_vec: scalar x");
        assert_eq!(self.value(v).shape(), &[c], "add_row_vec: vector length");
        let vd = self.value(v).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e + vd[i % c])
            .collect();
        let t = Tensor::from_vec(self.value(x).shape(), data);
        self.push(t, &[x, v], Op::AddRowVec(x, v))
    }

    /// Multiplies every row of `x` elementwise by `v` along the last axis.
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Var {
        let c = *self.value(x).shape().last().expect("mul_row_vec: scalar x");
        assert_eq!(self.value(v).shape(), &[c], "mul_row_vec: vector length");
        let vd = self.value(v).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e * vd[i % c])
            .collect();
        let t = Tensor::from_vec(self.value(x).shape(), data);
        self.push(t, &[x, v], Op::MulRowVec(x, v))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(silu_scalar);
        self.push(t, &[a], Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus_scalar);
        self.push(t, &[a], Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, &[a], Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::sqrt);
        self.push(t, &[a], Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, &[a], Op::Abs(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n), &[a], Op::MeanAll(a))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let d = *self.value(x).shape().last().expect("layer_norm: scalar x");
        assert_eq!(self.value(gamma).shape(), &[d], "layer_norm: gamma length");
        assert_eq!(self.value(beta).shape(), &[d], "layer_norm: beta length");
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        let xt = self.value(x);
        let rows = xt.numel() / d;
        let mut out = vec![0.0; xt.numel()];
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mu) * inv;
                out[r * d + j] = gd[j] * xhat + bd[j];
            }
        }
        let t = Tensor::from_vec(self.value(x).shape(), out);
        self.push(t, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Depthwise 2-D convolution of `x: [h,w,c]` with an odd-sized kernel
    /// `[kh,kw,c]` and zero padding that preserves the spatial shape.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Var {
        let sx = self.value(x).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        assert_eq!(sx.len(), 3, "depthwise_conv2d: input must be [h,w,c]");
        assert_eq!(sk.len(), 3, "depthwise_conv2d: kernel must be [kh,kw,c]");
        assert_eq!(sx[2], sk[2], "depthwise_conv2d: channel counts differ");
        assert!(
            sk[0] % 2 == 1 && sk[1] % 2 == 1,
            "depthwise_conv2d: kernel dims must be odd"
        );
        let out = dwconv_raw(
            self.value(x).data(),
            self.value(kernel).data(),
            sx[0],
            sx[1],
            sx[2],
            sk[0],
            sk[1],
        );
        let t = Tensor::from_vec(&sx, out);
        self.push(t, &[x, kernel], Op::DepthwiseConv2d { x, kernel })
    }

    /// Gathers flat elements: `out[i] = x[idx[i]]` reshaped to `shape`.
    /// Duplicate indices are allowed; backward scatter-adds.
    pub fn gather_elems(&mut self, x: Var, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(idx.len(), n, "gather_elems: index count != output size");
        let xd = self.value(x).data();
        let data: Vec<f64> = idx.iter().map(|&i| xd[i]).collect();
        let t = Tensor::from_vec(shape, data);
        self.push(t, &[x], Op::GatherElems { x, idx })
    }

    /// Gathers rows of `x: [r,c]`: `out[i,:] = x[idx[i],:]`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let s = self.value(x).shape();
        assert_eq!(s.len(), 2, "gather_rows: input must be rank 2");
        let (r, c) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            assert!(i < r, "gather_rows: row index out of range");
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let t = Tensor::from_vec(&[idx.len(), c], data);
        self.push(t, &[x], Op::GatherRows { x, idx })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).reshaped(shape);
        self.push(t, &[x], Op::Reshape(x))
    }

    /// Centered orthonormal 2-D FFT of a 2-channel image `[2,h,w]`
    /// (channel 0 real, channel 1 imaginary). The map is unitary, so the
    /// backward pass applies the opposite transform.
    pub fn fft2c(&mut self, x: Var) -> Var {
        self.fft2_impl(x, false)
    }

    pub fn ifft2c(&mut self, x: Var) -> Var {
        self.fft2_impl(x, true)
    }

    fn fft2_impl(&mut self, x: Var, inverse: bool) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3, "fft2: input must be [2,h,w]");
        assert_eq!(s[0], 2, "fft2: first axis must hold (re,im)");
        let (h, w) = (s[1], s[2]);
        let hw = h * w;
        let xd = self.value(x).data();
        let mut re = xd[..hw].to_vec();
        let mut im = xd[hw..].to_vec();
        fourier::fft2c_slices(&mut re, &mut im, h, w, inverse);
        re.extend_from_slice(&im);
        let t = Tensor::from_vec(&s, re);
        self.push(t, &[x], Op::Fft2 { x, inverse })
    }

    /// Complex elementwise product of two 2-channel images `[2,h,w]`.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "complex_mul");
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3, "complex_mul: operands must be [2,h,w]");
        assert_eq!(s[0], 2, "complex_mul: first axis must hold (re,im)");
        let hw = s[1] * s[2];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; 2 * hw];
        for i in 0..hw {
            let (ar, ai) = (ad[i], ad[hw + i]);
            let (br, bi) = (bd[i], bd[hw + i]);
            data[i] = ar * br - ai * bi;
            data[hw + i] = ar * bi + ai * br;
        }
        let t = Tensor::from_vec(&s, data);
        self.push(t, &[a, b], Op::ComplexMul(a, b))
    }

    /// Fused selective-scan recurrence. Shapes: `u`, `delta`: `[l,d]` or
    /// `[bs,l,d]`; `b`, `c`: matching rank with last axis `n`; `a`: `[d,n]`.
    /// The hidden-state trajectory is saved for the backward pass.
    pub fn scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, mode: BbarMode) -> Var {
        let su = self.value(u).shape().to_vec();
        assert!(
            su.len() == 2 || su.len() == 3,
            "scan: u must be [l,d] or [bs,l,d]"
        );
        let (bs, l, d) = if su.len() == 2 {
            (1, su[0], su[1])
        } else {
            (su[0], su[1], su[2])
        };
        let sa = self.value(a).shape();
        assert_eq!(sa.len(), 2, "scan: a must be [d,n]");
        assert_eq!(sa[0], d, "scan: a channel dim");
        let n = sa[1];
        assert_eq!(self.value(delta).shape(), &su[..], "scan: delta shape");
        let sb_expect: Vec<usize> = if su.len() == 2 {
            vec![l, n]
        } else {
            vec![bs, l, n]
        };
        assert_eq!(self.value(b).shape(), &sb_expect[..], "scan: b shape");
        assert_eq!(self.value(c).shape(), &sb_expect[..], "scan: c shape");
        let (y, saved) = ssm::scan_forward(
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            bs,
            l,
            d,
            n,
            mode,
        );
        let t = Tensor::from_vec(&su, y);
        self.push(
            t,
            &[u, delta, a, b, c],
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                mode,
                saved,
            },
        )
    }

    /// Reverse pass from a scalar node. Returns per-node gradients; interior
    /// buffers are dropped as soon as they have been consumed, leaf gradients
    /// are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || grads[i].is_none() {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.apply_vjp(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc<'a>(&self, grads: &'a mut Vec<Option<Vec<f64>>>, v: Var) -> &'a mut [f64] {
        let len = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn apply_vjp(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &(v, sign) in &[(*a, 1.0), (*b, 1.0)] {
                    if self.needs(v) {
                        let buf = self.acc(grads, v);
                        for (dst, &gv) in buf.iter_mut().zip(g) {
                            *dst += sign * gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for &(v, sign) in &[(*a, 1.0), (*b, -1.0)] {
                    if self.needs(v) {
                        let buf = self.acc(grads, v);
                        for (dst, &gv) in buf.iter_mut().zip(g) {
                            *dst += sign * gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bd = self.nodes[b.0].value.data().to_vec();
                    let buf = self.acc(grads, a);
                    for k in 0..g.len() {
                        buf[k] += g[k] * bd[k];
                    }
                }
                if self.needs(b) {
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let buf = self.acc(grads, b);
                    for k in 0..g.len() {
                        buf[k] += g[k] * ad[k];
                    }
                }
            }
            Op::Neg(a) => {
                if self.needs(*a) {
                    let buf = self.acc(grads, *a);
                    for (dst, &gv) in buf.iter_mut().zip(g) {
                        *dst -= gv;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let c = *c;
                    let buf = self.acc(grads, *a);
                    for (dst, &gv) in buf.iter_mut().zip(g) {
                        *dst += c * gv;
                    }
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    let buf = self.acc(grads, *a);
                    for (dst, &gv) in buf.iter_mut().zip(g) {
                        *dst += gv;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                if self.needs(a) {
                    // dA = G . B^T
                    let bd = self.nodes[b.0].value.data().to_vec();
                    let buf = self.acc(grads, a);
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv != 0.0 {
                                for q in 0..k {
                                    buf[r * k + q] += gv * bd[q * n + j];
                                }
                            }
                        }
                    }
                }
                if self.needs(b) {
                    // dB = A^T . G
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let buf = self.acc(grads, b);
                    for r in 0..m {
                        for q in 0..k {
                            let av = ad[r * k + q];
                            if av != 0.0 {
                                for j in 0..n {
                                    buf[q * n + j] += av * g[r * n + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::AddRowVec(x, v) => {
                let (x, v) = (*x, *v);
                let c = self.nodes[v.0].value.numel();
                if self.needs(x) {
                    let buf = self.acc(grads, x);
                    for (dst, &gv) in buf.iter_mut().zip(g) {
                        *dst += gv;
                    }
                }
                if self.needs(v) {
                    let buf = self.acc(grads, v);
                    for (k, &gv) in g.iter().enumerate() {
                        buf[k % c] += gv;
                    }
                }
            }
            Op::MulRowVec(x, v) => {
                let (x, v) = (*x, *v);
                let c = self.nodes[v.0].value.numel();
                if self.needs(x) {
                    let vd = self.nodes[v.0].value.data().to_vec();
                    let buf = self.acc(grads, x);
                    for (k, &gv) in g.iter().enumerate() {
                        buf[k] += gv * vd[k % c];
                    }
                }
                if self.needs(v) {
                    let xd = self.nodes[x.0].value.data().to_vec();
                    let buf = self.acc(grads, v);
                    for (k, &gv) in g.iter().enumerate() {
                        buf[k % c] += gv * xd[k];
                    }
                }
            }
            Op::Silu(a) => {
                if self.needs(*a) {
                    let xd = self.nodes[a.0].value.data().to_vec();
                    let buf = self.acc(grads, *a);
                    for (k, &gv) in g.iter().enumerate() {
                        buf[k] += gv * silu_derivative(xd[k]);
                    }
                }
            }
            Op::Softplus(a) => {
                if self.needs(*a) {
                    let xd = self.nodes[a.0].value.data().to_vec();
                    let buf = self.acc(grads, *a);
                    for (k, &gv) in g.iter().enumerate() {
                        buf[k] += gv * sigmoid(xd[k]);
                    }
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let yd = self.nodes[i].value.data().to_vec();
                    let buf = self.acc(grads, *a);
                    for (k, &gv) in g.iter().enumerate() {
                        buf[k] += gv * yd[k];
                    }
                }
            }
            Op::Sqrt(a) => {
                if self.needs(*a) {
                    let yd = self.nodes[i].value.data().to_vec();
                    let buf = self.acc(grads, *a);
                    for (k, &gv) in g.iter().enumerate() {
                        buf[k] += gv * 0.5 / yd[k];
                    }
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let xd = self.nodes[a.0].value.data().to_vec();
                    let buf = self.acc(grads, *a);
                    for (k, &gv) in g.iter().enumerate() {
                        buf[k] += gv * sign_zero(xd[k]);
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let gv = g[0];
                    let buf = self.acc(grads, *a);
                    for dst in buf.iter_mut() {
                        *dst += gv;
                    }
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.numel() as f64;
                    let gv = g[0] / n;
                    let buf = self.acc(grads, *a);
                    for dst in buf.iter_mut() {
                        *dst += gv;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let d = self.nodes[gamma.0].value.numel();
                let xd = self.nodes[x.0].value.data().to_vec();
                let gd = self.nodes[gamma.0].value.data().to_vec();
                let rows = xd.len() / d;
                // Recompute per-row statistics; cheaper than saving them.
                let mut xhat = vec![0.0; xd.len()];
                let mut inv_std = vec![0.0; rows];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std[r] = inv;
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mu) * inv;
                    }
                }
                if self.needs(beta) {
                    let buf = self.acc(grads, beta);
                    for (k, &gv) in g.iter().enumerate() {
                        buf[k % d] += gv;
                    }
                }
                if self.needs(gamma) {
                    let buf = self.acc(grads, gamma);
                    for (k, &gv) in g.iter().enumerate() {
                        buf[k % d] += gv * xhat[k];
                    }
                }
                if self.needs(x) {
                    let buf = self.acc(grads, x);
                    for r in 0..rows {
                        let grow = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = grow[j] * gd[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[j];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let dxh = grow[j] * gd[j];
                            buf[r * d + j] +=
                                inv_std[r] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::DepthwiseConv2d { x, kernel } => {
                let (x, kernel) = (*x, *kernel);
                let sx = self.nodes[x.0].value.shape().to_vec();
                let sk = self.nodes[kernel.0].value.shape().to_vec();
                let (h, w, c) = (sx[0], sx[1], sx[2]);
                let (kh, kw) = (sk[0], sk[1]);
                let (ph, pw) = (kh / 2, kw / 2);
                if self.needs(x) {
                    let kd = self.nodes[kernel.0].value.data().to_vec();
                    let buf = self.acc(grads, x);
                    for y in 0..h {
                        for xp in 0..w {
                            for dy in 0..kh {
                                let iy = y + dy;
                                if iy < ph || iy - ph >= h {
                                    continue;
                                }
                                let iy = iy - ph;
                                for dx in 0..kw {
                                    let ix = xp + dx;
                                    if ix < pw || ix - pw >= w {
                                        continue;
                                    }
                                    let ix = ix - pw;
                                    let gbase = (y * w + xp) * c;
                                    let ibase = (iy * w + ix) * c;
                                    let kbase = (dy * kw + dx) * c;
                                    for ch in 0..c {
                                        buf[ibase + ch] += g[gbase + ch] * kd[kbase + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                if self.needs(kernel) {
                    let xd = self.nodes[x.0].value.data().to_vec();
                    let buf = self.acc(grads, kernel);
                    for y in 0..h {
                        for xp in 0..w {
                            for dy in 0..kh {
                                let iy = y + dy;
                                if iy < ph || iy - ph >= h {
                                    continue;
                                }
                                let iy = iy - ph;
                                for dx in 0..kw {
                                    let ix = xp + dx;
                                    if ix < pw || ix - pw >= w {
                                        continue;
                                    }
                                    let ix = ix - pw;
                                    let gbase = (y * w + xp) * c;
                                    let ibase = (iy * w + ix) * c;
                                    let kbase = (dy * kw + dx) * c;
                                    for ch in 0..c {
                                        buf[kbase + ch] += g[gbase + ch] * xd[ibase + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherElems { x, idx } => {
                if self.needs(*x) {
                    let idx = Rc::clone(idx);
                    let buf = self.acc(grads, *x);
                    for (k, &src) in idx.iter().enumerate() {
                        buf[src] += g[k];
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.needs(*x) {
                    let idx = Rc::clone(idx);
                    let c = self.nodes[x.0].value.shape()[1];
                    let buf = self.acc(grads, *x);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let buf = self.acc(grads, *x);
                    for (dst, &gv) in buf.iter_mut().zip(g) {
                        *dst += gv;
                    }
                }
            }
            Op::Fft2 { x, inverse } => {
                if self.needs(*x) {
                    // The transform is unitary, so the adjoint is the inverse
                    // transform applied to the upstream gradient.
                    let s = self.nodes[i].value.shape();
                    let (h, w) = (s[1], s[2]);
                    let hw = h * w;
                    let mut re = g[..hw].to_vec();
                    let mut im = g[hw..].to_vec();
                    fourier::fft2c_slices(&mut re, &mut im, h, w, !inverse);
                    let buf = self.acc(grads, *x);
                    for k in 0..hw {
                        buf[k] += re[k];
                        buf[hw + k] += im[k];
                    }
                }
            }
            Op::ComplexMul(a, b) => {
                let (a, b) = (*a, *b);
                let hw = self.nodes[a.0].value.numel() / 2;
                if self.needs(a) {
                    let bd = self.nodes[b.0].value.data().to_vec();
                    let buf = self.acc(grads, a);
                    for k in 0..hw {
                        let (br, bi) = (bd[k], bd[hw + k]);
                        let (gr, gi) = (g[k], g[hw + k]);
                        buf[k] += gr * br + gi * bi;
                        buf[hw + k] += -gr * bi + gi * br;
                    }
                }
                if self.needs(b) {
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let buf = self.acc(grads, b);
                    for k in 0..hw {
                        let (ar, ai) = (ad[k], ad[hw + k]);
                        let (gr, gi) = (g[k], g[hw + k]);
                        buf[k] += gr * ar + gi * ai;
                        buf[hw + k] += -gr * ai + gi * ar;
                    }
                }
            }
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                mode,
                saved,
            } => {
                let (u, delta, a, b, c, mode) = (*u, *delta, *a, *b, *c, *mode);
                let su = self.nodes[u.0].value.shape();
                let (bs, l, d) = if su.len() == 2 {
                    (1, su[0], su[1])
                } else {
                    (su[0], su[1], su[2])
                };
                let n = self.nodes[a.0].value.shape()[1];
                let out = ssm::scan_backward(
                    g,
                    self.nodes[u.0].value.data(),
                    self.nodes[delta.0].value.data(),
                    self.nodes[a.0].value.data(),
                    self.nodes[b.0].value.data(),
                    self.nodes[c.0].value.data(),
                    saved,
                    bs,
                    l,
                    d,
                    n,
                    mode,
                );
                let targets = [
                    (u, out.du),
                    (delta, out.ddelta),
                    (a, out.da),
                    (b, out.db),
                    (c, out.dc),
                ];
                for (v, contrib) in targets {
                    if self.needs(v) {
                        let buf = self.acc(grads, v);
                        for (dst, gv) in buf.iter_mut().zip(contrib) {
                            *dst += gv;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for q in 0..k {
            let av = a[r * k + q];
            if av != 0.0 {
                let brow = &b[q * n..(q + 1) * n];
                let orow = &mut out[r * n..(r + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    out
}

fn dwconv_raw(x: &[f64], k: &[f64], h: usize, w: usize, c: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xp in 0..w {
            let obase = (y * w + xp) * c;
            for dy in 0..kh {
                let iy = y + dy;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                let iy = iy - ph;
                for dx in 0..kw {
                    let ix = xp + dx;
                    if ix < pw || ix - pw >= w {
                        continue;
                    }
                    let ix = ix - pw;
                    let ibase = (iy * w + ix) * c;
                    let kbase = (dy * kw + dx) * c;
                    for ch in 0..c {
                        out[obase + ch] += x[ibase + ch] * k[kbase + ch];
                    }
                }
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn test_silu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 10.0]), false);
        let y = tape.silu(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
        let expect = 10.0 / (1.0 + (-10.0f64).exp());
        assert!((tape.value(y).data()[1] - expect).abs() < 1e-12);
        assert!((expect - 9.99955).abs() < 1e-5);
    }

    #[test]
    fn test_silu_derivative_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.silu(x);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap()[0], 0.5);
    }

    #[test]
    fn test_sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 5.0]), true);
        let s = tape.sum_all(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn test_linear_weight_grad_is_column_sums() {
        // loss = sum(x . w) => dw[q][j] = sum_r x[r][q], independent of j.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = rand_tensor(&mut rng, &[4, 3]);
        let wt = rand_tensor(&mut rng, &[3, 2]);
        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), false);
        let w = tape.leaf(wt, true);
        let y = tape.matmul(x, w);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        let dw = grads.get(w).unwrap();
        for q in 0..3 {
            let col_sum: f64 = (0..4).map(|r| xt.at2(r, q)).sum();
            for j in 0..2 {
                assert!((dw[q * 2 + j] - col_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn test_fanout_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![3.0, -1.5]), true);
        let y = tape.mul(x, x);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0, -3.0]);
    }

    #[test]
    fn test_backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]), true);
        let y = tape.silu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn test_layer_norm_constant_rows_give_beta() {
        let mut tape = Tape::new();
        let beta_vals = vec![0.1, 0.2, 0.3, 0.4];
        let x = tape.leaf(Tensor::full(&[2, 4], 3.7), true);
        let gamma = tape.leaf(Tensor::ones(&[4]), true);
        let beta = tape.leaf(Tensor::from_vec(&[4], beta_vals.clone()), true);
        let y = tape.layer_norm(x, gamma, beta, 1e-6);
        for r in 0..2 {
            for j in 0..4 {
                assert_eq!(tape.value(y).at2(r, j), beta_vals[j]);
            }
        }
    }

    #[test]
    fn test_layer_norm_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&mut rng, &[5, 8]), false);
        let gamma = tape.leaf(Tensor::ones(&[8]), false);
        let beta = tape.leaf(Tensor::zeros(&[8]), false);
        let y = tape.layer_norm(x, gamma, beta, 1e-12);
        let yd = tape.value(y).data();
        for r in 0..5 {
            let row = &yd[r * 8..(r + 1) * 8];
            let mu: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
            assert!(mu.abs() < 1e-10, "row mean {mu}");
            assert!((var - 1.0).abs() < 1e-6, "row var {var}");
        }
    }

    #[test]
    fn test_depthwise_conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xt = rand_tensor(&mut rng, &[4, 5, 3]);
        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), false);
        let k = tape.leaf(Tensor::ones(&[1, 1, 3]), false);
        let y = tape.depthwise_conv2d(x, k);
        assert_eq!(tape.value(y).data(), xt.data());
    }

    #[test]
    fn test_depthwise_conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w, c) = (5, 5, 2);
        let xt = rand_tensor(&mut rng, &[h, w, c]);
        let kt = rand_tensor(&mut rng, &[3, 3, c]);
        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), false);
        let k = tape.leaf(kt.clone(), false);
        let y = tape.depthwise_conv2d(x, k);
        // Independent nested-loop reference with explicit zero padding.
        for yy in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..3usize {
                        for dx in 0..3usize {
                            let iy = yy as isize + dy as isize - 1;
                            let ix = xx as isize + dx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += xt.data()[((iy as usize) * w + ix as usize) * c + ch]
                                * kt.data()[(dy * 3 + dx) * c + ch];
                        }
                    }
                    let got = tape.value(y).data()[(yy * w + xx) * c + ch];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    #[should_panic]
    fn test_depthwise_conv_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 4, 1]), false);
        let k = tape.leaf(Tensor::zeros(&[2, 2, 1]), false);
        let _ = tape.depthwise_conv2d(x, k);
    }

    #[test]
    fn test_gather_elems_scatter_adds_duplicates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]), true);
        let idx = Rc::new(vec![0usize, 0, 2]);
        let y = tape.gather_elems(x, idx, &[3]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn test_primitive_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // Composite touching every primitive except the fused scan, which has
        // its own check next to its kernel.
        let x0 = rand_tensor(&mut rng, &[4, 6]);
        let w0 = rand_tensor(&mut rng, &[6, 6]);
        let v0 = rand_tensor(&mut rng, &[6]);
        let g0 = rand_tensor(&mut rng, &[6]);
        let b0 = rand_tensor(&mut rng, &[6]);
        let k0 = rand_tensor(&mut rng, &[3, 3, 3]);
        let c0 = rand_tensor(&mut rng, &[2, 4, 4]);
        let c1 = rand_tensor(&mut rng, &[2, 4, 4]);
        let inputs = vec![x0, w0, v0, g0, b0, k0, c0, c1];

        let build = |ins: &[Tensor], tape: &mut Tape| -> Var {
            let x = tape.leaf(ins[0].clone(), true);
            let w = tape.leaf(ins[1].clone(), true);
            let v = tape.leaf(ins[2].clone(), true);
            let gamma = tape.leaf(ins[3].clone(), true);
            let beta = tape.leaf(ins[4].clone(), true);
            let k = tape.leaf(ins[5].clone(), true);
            let ca = tape.leaf(ins[6].clone(), true);
            let cb = tape.leaf(ins[7].clone(), true);

            let mm = tape.matmul(x, w);
            let biased = tape.add_row_vec(mm, v);
            let scaled = tape.mul_row_vec(biased, v);
            let ln = tape.layer_norm(scaled, gamma, beta, 1e-5);
            let act = tape.silu(ln);
            let sp = tape.softplus(act);
            let grid = tape.reshape(sp, &[2, 4, 3]);
            let conv = tape.depthwise_conv2d(grid, k);
            let flat = tape.reshape(conv, &[24]);
            let idx = Rc::new((0..24).rev().collect::<Vec<usize>>());
            let gathered = tape.gather_elems(flat, idx, &[4, 6]);
            let rows = tape.gather_rows(gathered, Rc::new(vec![3usize, 1, 1, 0]));
            let neg = tape.neg(rows);
            let pos = tape.softplus(neg);
            let shifted = tape.add_scalar(pos, 0.5);
            let sq = tape.sqrt(shifted);
            let ab = tape.abs(sq);
            let part1 = tape.mean_all(ab);

            let cm = tape.complex_mul(ca, cb);
            let f = tape.fft2c(cm);
            let fi = tape.ifft2c(f);
            let d = tape.sub(fi, ca);
            let e = tape.exp(d);
            let m = tape.mul(e, e);
            let sc = tape.scale(m, 0.3);
            let part2 = tape.mean_all(sc);

            let tot = tape.add(part1, part2);
            tape.sum_all(tot)
        };

        let mut tape = Tape::new();
        let loss = build(&inputs, &mut tape);
        let grads = tape.backward(loss).unwrap();
        let vars: Vec<Var> = (0..8).map(Var).collect();

        let numeric = central_diff(
            &inputs,
            |ins| {
                let mut t = Tape::new();
                let l = build(ins, &mut t);
                t.value(l).data()[0]
            },
            1e-5,
        );
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).unwrap();
            let err = max_rel_err(analytic, numeric[i].data());
            assert!(err < 1e-4, "input {i}: max rel err {err}");
        }
    }

    #[test]
    fn test_fft_adjoint_via_backward() {
        // <F x, y> == <x, F^H y> with F^H realized by the backward pass.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xt = rand_tensor(&mut rng, &[2, 8, 8]);
        let yt = rand_tensor(&mut rng, &[2, 8, 8]);
        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), true);
        let fx = tape.fft2c(x);
        let y = tape.constant(yt.clone());
        let prod = tape.mul(fx, y);
        let s = tape.sum_all(prod);
        let lhs = tape.value(s).data()[0];
        let grads = tape.backward(s).unwrap();
        let adj = grads.get(x).unwrap();
        let rhs: f64 = xt.data().iter().zip(adj).map(|(&a, &b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn test_graph_rebuild_is_deterministic() {
        let run = || -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let xt = rand_tensor(&mut rng, &[6, 6]);
            let wt = rand_tensor(&mut rng, &[6, 6]);
            let mut tape = Tape::new();
            let x = tape.leaf(xt, false);
            let w = tape.leaf(wt, true);
            let y = tape.matmul(x, w);
            let a = tape.silu(y);
            let s = tape.mean_all(a);
            let grads = tape.backward(s).unwrap();
            grads.get(w).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical seeds must give bit-identical gradients");
    }

    #[test]
    fn test_primitives_stay_finite_on_finite_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..20 {
            let xt = rand_tensor(&mut rng, &[3, 4]);
            let mut tape = Tape::new();
            let x = tape.leaf(xt, true);
            let a = tape.silu(x);
            let b = tape.softplus(a);
            let c = tape.exp(b);
            let d = tape.abs(c);
            let e = tape.sqrt(d);
            let s = tape.mean_all(e);
            assert!(tape.value(s).is_finite());
            let grads = tape.backward(s).unwrap();
            assert!(grads.get(x).unwrap().iter().all(|v| v.is_finite()));
        }
    }
}
