//! Reverse-mode autodiff over dense `f32` tensors.
//!
//! Every backward rule is written in terms of differentiable tensor ops, so a
//! gradient produced with `create_graph = true` can itself be differentiated.
//! The WGAN gradient penalty depends on this.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::conv::{col2im, im2col, ConvGeometry};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    op: Option<Op>,
    requires_grad: bool,
}

#[derive(Clone)]
enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f32),
    Offset(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Sqrt(Tensor),
    Tanh(Tensor),
    Sigmoid(Tensor),
    LeakyRelu(Tensor, f32),
    Abs(Tensor),
    MatMul { a: Tensor, b: Tensor, ta: bool, tb: bool },
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    BroadcastTo(Tensor),
    SumTo(Tensor),
    Narrow { x: Tensor, axis: usize, start: usize },
    Embed { x: Tensor, axis: usize, start: usize },
    Im2Col(Tensor, ConvGeometry),
    Col2Im(Tensor, ConvGeometry),
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f32>, op: Option<Op>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::new(data),
            op,
            requires_grad,
        }))
    }

    /// Result of an op: records the graph only if some input tracks gradients.
    fn from_op(shape: Vec<usize>, data: Vec<f32>, inputs: &[&Tensor], op: impl FnOnce() -> Op) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::make(shape, data, Some(op()), true)
        } else {
            Self::make(shape, data, None, false)
        }
    }

    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(numel(shape), data.len(), "data length does not match shape {shape:?}");
        Self::make(shape.to_vec(), data, None, false)
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(numel(shape), data.len(), "data length does not match shape {shape:?}");
        Self::make(shape.to_vec(), data, None, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Self::new(shape, vec![v; numel(shape)])
    }

    pub fn scalar(v: f32) -> Self {
        Self::new(&[], vec![v])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dims(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.data.iter().map(|&v| v as f64).collect()
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} elements", self.numel());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same storage, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            op: None,
            requires_grad: false,
        }))
    }

    /// Same storage as a fresh trainable leaf.
    pub fn as_param(&self) -> Tensor {
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            op: None,
            requires_grad: true,
        }))
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Vec<f32> {
        self.data().iter().map(|&v| f(v)).collect()
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
        self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect()
    }

    /// Brings two operands to a common shape.
    fn align(&self, other: &Tensor) -> (Tensor, Tensor) {
        if self.shape() == other.shape() {
            return (self.clone(), other.clone());
        }
        let shape = broadcast_shape(self.shape(), other.shape()).unwrap_or_else(|| {
            panic!("shapes {:?} and {:?} do not broadcast", self.shape(), other.shape())
        });
        (self.broadcast_to(&shape), other.broadcast_to(&shape))
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.align(other);
        let data = a.zip(&b, |x, y| x + y);
        Tensor::from_op(a.shape().to_vec(), data, &[&a, &b], || Op::Add(a.clone(), b.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.align(other);
        let data = a.zip(&b, |x, y| x - y);
        Tensor::from_op(a.shape().to_vec(), data, &[&a, &b], || Op::Sub(a.clone(), b.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.align(other);
        let data = a.zip(&b, |x, y| x * y);
        Tensor::from_op(a.shape().to_vec(), data, &[&a, &b], || Op::Mul(a.clone(), b.clone()))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.align(other);
        let data = a.zip(&b, |x, y| x / y);
        Tensor::from_op(a.shape().to_vec(), data, &[&a, &b], || Op::Div(a.clone(), b.clone()))
    }

    pub fn scale(&self, s: f32) -> Tensor {
        let data = self.map(|x| x * s);
        Tensor::from_op(self.shape().to_vec(), data, &[self], || Op::Scale(self.clone(), s))
    }

    pub fn add_scalar(&self, s: f32) -> Tensor {
        let data = self.map(|x| x + s);
        Tensor::from_op(self.shape().to_vec(), data, &[self], || Op::Offset(self.clone()))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn exp(&self) -> Tensor {
        let data = self.map(f32::exp);
        Tensor::from_op(self.shape().to_vec(), data, &[self], || Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Tensor {
        let data = self.map(f32::ln);
        Tensor::from_op(self.shape().to_vec(), data, &[self], || Op::Log(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        let data = self.map(f32::sqrt);
        Tensor::from_op(self.shape().to_vec(), data, &[self], || Op::Sqrt(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.map(f32::tanh);
        Tensor::from_op(self.shape().to_vec(), data, &[self], || Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.map(sigmoid);
        Tensor::from_op(self.shape().to_vec(), data, &[self], || Op::Sigmoid(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        let data = self.map(|x| if x > 0.0 { x } else { slope * x });
        Tensor::from_op(self.shape().to_vec(), data, &[self], || Op::LeakyRelu(self.clone(), slope))
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn abs(&self) -> Tensor {
        let data = self.map(f32::abs);
        Tensor::from_op(self.shape().to_vec(), data, &[self], || Op::Abs(self.clone()))
    }

    /// Elementwise sign as a constant (derivative of |x|).
    pub fn sign(&self) -> Tensor {
        Tensor::new(
            self.shape(),
            self.map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }),
        )
    }

    /// 2-D product `op(a) @ op(b)` where `op` optionally transposes.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert_eq!(self.dims(), 2, "matmul lhs must be 2-D, got {:?}", self.shape());
        assert_eq!(other.dims(), 2, "matmul rhs must be 2-D, got {:?}", other.shape());
        let (ar, ac) = (self.shape()[0], self.shape()[1]);
        let (br, bc) = (other.shape()[0], other.shape()[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?}", self.shape(), other.shape());
        let mut out = vec![0.0f32; m * n];
        if m > 0 && n > 0 && k > 0 {
            let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
            let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
            // SAFETY: strides describe the owned buffers exactly; `out` is m*n row-major.
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data().as_ptr(),
                    rsa as isize,
                    csa as isize,
                    other.data().as_ptr(),
                    rsb as isize,
                    csb as isize,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::from_op(vec![m, n], out, &[self, other], || Op::MatMul {
            a: self.clone(),
            b: other.clone(),
            ta,
            tb,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(other, false, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "cannot reshape {:?} into {shape:?}", self.shape());
        if shape == self.shape() {
            return self.clone();
        }
        let track = grad_enabled() && self.requires_grad();
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: shape.to_vec(),
            data: Arc::clone(&self.0.data),
            op: track.then(|| Op::Reshape(self.clone())),
            requires_grad: track,
        }))
    }

    pub fn flatten_batch(&self) -> Tensor {
        let b = self.shape()[0];
        self.reshape(&[b, self.numel() / b])
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.dims());
        let in_shape = self.shape();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides_of(in_shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let data = gather_strided(self.data(), &out_shape, &src_strides);
        Tensor::from_op(out_shape, data, &[self], || Op::Permute(self.clone(), perm.to_vec()))
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.dims(), 2);
        self.permute(&[1, 0])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let offset = shape.len().checked_sub(self.dims()).expect("broadcast to fewer dims");
        let in_strides = strides_of(self.shape());
        let mut src_strides = vec![0; shape.len()];
        for (i, &d) in self.shape().iter().enumerate() {
            assert!(d == shape[i + offset] || d == 1, "cannot broadcast {:?} to {shape:?}", self.shape());
            src_strides[i + offset] = if d == 1 { 0 } else { in_strides[i] };
        }
        let data = gather_strided(self.data(), shape, &src_strides);
        Tensor::from_op(shape.to_vec(), data, &[self], || Op::BroadcastTo(self.clone()))
    }

    /// Sums broadcast dimensions away until the tensor has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let out_n = numel(shape);
        let offset = self.dims().checked_sub(shape.len()).expect("sum_to more dims");
        let out_strides = strides_of(shape);
        let mut dst_strides = vec![0; self.dims()];
        for (i, &d) in shape.iter().enumerate() {
            assert!(d == self.shape()[i + offset] || d == 1, "cannot sum {:?} to {shape:?}", self.shape());
            dst_strides[i + offset] = if d == 1 { 0 } else { out_strides[i] };
        }
        let mut out = vec![0.0f32; out_n];
        scatter_add_strided(self.data(), self.shape(), &dst_strides, &mut out);
        Tensor::from_op(shape.to_vec(), out, &[self], || Op::SumTo(self.clone()))
    }

    pub fn sum(&self) -> Tensor {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f32)
    }

    /// Sum over every axis but the first: `[B, ...] -> [B]`.
    pub fn sum_per_sample(&self) -> Tensor {
        let b = self.shape()[0];
        self.flatten_batch().sum_to(&[b, 1]).reshape(&[b])
    }

    pub fn mean_per_sample(&self) -> Tensor {
        let per = (self.numel() / self.shape()[0]) as f32;
        self.sum_per_sample().scale(1.0 / per)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape();
        assert!(start + len <= shape[axis], "narrow out of range");
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Tensor::from_op(out_shape, data, &[self], || Op::Narrow { x: self.clone(), axis, start })
    }

    /// Places `self` into zeros of size `total` along `axis` at `start`.
    pub fn embed(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let shape = self.shape();
        let len = shape[axis];
        assert!(start + len <= total, "embed out of range");
        let mut out_shape = shape.to_vec();
        out_shape[axis] = total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0f32; numel(&out_shape)];
        for o in 0..outer {
            let dst = o * total * inner + start * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data()[src..src + len * inner]);
        }
        Tensor::from_op(out_shape, data, &[self], || Op::Embed { x: self.clone(), axis, start })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut acc: Option<Tensor> = None;
        let mut start = 0;
        for p in parts {
            let e = p.embed(axis, start, total);
            start += p.shape()[axis];
            acc = Some(match acc {
                None => e,
                Some(a) => a.add(&e),
            });
        }
        acc.expect("concat of zero tensors")
    }

    pub fn im2col(&self, g: ConvGeometry) -> Tensor {
        let data = im2col(self.data(), &g);
        Tensor::from_op(g.cols_shape().to_vec(), data, &[self], || Op::Im2Col(self.clone(), g))
    }

    pub fn col2im(&self, g: ConvGeometry) -> Tensor {
        let data = col2im(self.data(), &g);
        Tensor::from_op(g.image_shape().to_vec(), data, &[self], || Op::Col2Im(self.clone(), g))
    }

    pub fn clamp_values(&self, lo: f32, hi: f32) -> Tensor {
        Tensor::new(self.shape(), self.map(|x| x.clamp(lo, hi)))
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out[idx] = src[sum(idx_i * stride_i)] over the row-major index space of `shape`.
fn gather_strided(src: &[f32], shape: &[usize], strides: &[usize]) -> Vec<f32> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let d = shape.len();
    if d == 0 {
        out.push(src[0]);
        return out;
    }
    let last = shape[d - 1];
    let last_stride = strides[d - 1];
    let mut idx = vec![0usize; d];
    let mut base = 0usize;
    loop {
        if last_stride == 1 {
            out.extend_from_slice(&src[base..base + last]);
        } else {
            for j in 0..last {
                out.push(src[base + j * last_stride]);
            }
        }
        // odometer over all but the last axis
        let mut ax = d - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// out[sum(idx_i * stride_i)] += src[idx] over the row-major index space of `shape`.
fn scatter_add_strided(src: &[f32], shape: &[usize], strides: &[usize], out: &mut [f32]) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let d = shape.len();
    if d == 0 {
        out[0] += src[0];
        return;
    }
    let last = shape[d - 1];
    let last_stride = strides[d - 1];
    let mut idx = vec![0usize; d];
    let mut base = 0usize;
    let mut pos = 0usize;
    loop {
        let row = &src[pos..pos + last];
        if last_stride == 0 {
            out[base] += row.iter().sum::<f32>();
        } else {
            for (j, &v) in row.iter().enumerate() {
                out[base + j * last_stride] += v;
            }
        }
        pos += last;
        let mut ax = d - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![a, b],
            MatMul { a, b, .. } => vec![a, b],
            Scale(x, _) | Offset(x) | Exp(x) | Log(x) | Sqrt(x) | Tanh(x) | Sigmoid(x)
            | LeakyRelu(x, _) | Abs(x) | Reshape(x) | Permute(x, _) | BroadcastTo(x) | SumTo(x)
            | Im2Col(x, _) | Col2Im(x, _) => vec![x],
            Narrow { x, .. } | Embed { x, .. } => vec![x],
        }
    }

    /// Vector-Jacobian products for each input, built from differentiable ops.
    fn backward(&self, g: &Tensor) -> Vec<Tensor> {
        use Op::*;
        match self {
            Add(_, _) => vec![g.clone(), g.clone()],
            Sub(_, _) => vec![g.clone(), g.neg()],
            Mul(a, b) => vec![g.mul(b), g.mul(a)],
            Div(a, b) => {
                let ga = g.div(b);
                let gb = ga.mul(a).div(b).neg();
                vec![ga, gb]
            }
            Scale(_, s) => vec![g.scale(*s)],
            Offset(_) => vec![g.clone()],
            Exp(x) => vec![g.mul(&x.exp())],
            Log(x) => vec![g.div(x)],
            Sqrt(x) => vec![g.div(&x.sqrt()).scale(0.5)],
            Tanh(x) => {
                let t = x.tanh();
                vec![g.sub(&g.mul(&t.square()))]
            }
            Sigmoid(x) => {
                let s = x.sigmoid();
                vec![g.mul(&s.sub(&s.square()))]
            }
            LeakyRelu(x, slope) => {
                let mask = Tensor::new(x.shape(), x.map(|v| if v > 0.0 { 1.0 } else { *slope }));
                vec![g.mul(&mask)]
            }
            Abs(x) => vec![g.mul(&x.sign())],
            MatMul { a, b, ta, tb } => {
                let ga = if *ta { b.matmul_t(g, *tb, true) } else { g.matmul_t(b, false, !*tb) };
                let gb = if *tb { g.matmul_t(a, true, *ta) } else { a.matmul_t(g, !*ta, false) };
                vec![ga, gb]
            }
            Reshape(x) => vec![g.reshape(x.shape())],
            Permute(_, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![g.permute(&inv)]
            }
            BroadcastTo(x) => vec![g.sum_to(x.shape())],
            SumTo(x) => vec![g.broadcast_to(x.shape())],
            Narrow { x, axis, start } => vec![g.embed(*axis, *start, x.shape()[*axis])],
            Embed { x, axis, start } => vec![g.narrow(*axis, *start, x.shape()[*axis])],
            Im2Col(_, geom) => vec![g.col2im(*geom)],
            Col2Im(_, geom) => vec![g.im2col(*geom)],
        }
    }
}

/// Gradients of scalar `output` with respect to each of `wrt`.
///
/// Inputs unreachable from `output` get a zero gradient. With `create_graph`
/// the returned tensors carry their own graph and can be differentiated again.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(output.numel(), 1, "grad() needs a scalar output, got {:?}", output.shape());
    let run = || {
        let order = topo_order(output);
        let mut grads: HashMap<usize, Tensor> = HashMap::new();
        grads.insert(output.id(), Tensor::full(output.shape(), 1.0));
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else { continue };
            let keep = wrt.iter().any(|w| w.id() == node.id());
            if let Some(op) = &node.0.op {
                for (input, gi) in op.inputs().into_iter().zip(op.backward(&g)) {
                    if !input.requires_grad() {
                        continue;
                    }
                    let acc = match grads.remove(&input.id()) {
                        Some(prev) => prev.add(&gi),
                        None => gi,
                    };
                    grads.insert(input.id(), acc);
                }
            }
            if keep {
                grads.insert(node.id(), g);
            }
        }
        wrt.iter()
            .map(|w| grads.get(&w.id()).cloned().unwrap_or_else(|| Tensor::zeros(w.shape())))
            .collect::<Vec<_>>()
    };
    if create_graph {
        run()
    } else {
        no_grad(run)
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !t.requires_grad() || !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = &t.0.op {
            for i in op.inputs() {
                if i.requires_grad() && !seen.contains(&i.id()) {
                    stack.push((i.clone(), false));
                }
            }
        }
    }
    order
}
