use rand::Rng;
use sha2::{Digest, Sha256};

use super::conv::ConvGeometry;
use super::tensor::Tensor;

/// Anything holding named trainable tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t.clone()));
        out
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// A copy whose parameters no longer track gradients. Gradients still flow
    /// through it to upstream inputs.
    fn frozen(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut m = self.clone();
        m.visit_mut("", &mut |_, t| *t = t.detach());
        m
    }

    /// A copy whose parameters are fresh trainable leaves sharing storage.
    fn trainable(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut m = self.clone();
        m.visit_mut("", &mut |_, t| *t = t.as_param());
        m
    }

    /// SHA-256 over parameter names, shapes and raw bits.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |n, t| {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        Linear {
            weight: Tensor::param(&[outputs, inputs], uniform(rng, inputs * outputs, bound)),
            bias: Tensor::param(&[outputs], uniform(rng, outputs, bound)),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `[B, in] -> [B, out]`
    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul_t(&self.weight, false, true).add(&self.bias)
    }
}

impl Module for Linear {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(p, "weight"), &self.weight);
        f(&join(p, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(p, "weight"), &mut self.weight);
        f(&join(p, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Conv2d {
            weight: Tensor::param(
                &[out_ch, in_ch, kernel, kernel],
                uniform(rng, out_ch * fan_in, bound),
            ),
            bias: Tensor::param(&[out_ch], uniform(rng, out_ch, bound)),
            stride,
            padding,
        }
    }

    /// `[B, C, H, W] -> [B, C_out, H', W']`
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let [cout, cin, kh, kw] = [
            self.weight.shape()[0],
            self.weight.shape()[1],
            self.weight.shape()[2],
            self.weight.shape()[3],
        ];
        assert_eq!(s[1], cin, "conv expects {cin} channels, got {:?}", s);
        let g = ConvGeometry::forward(
            [s[0], s[1], s[2], s[3]],
            (kh, kw),
            (self.stride, self.stride),
            (self.padding, self.padding),
        );
        let cols = x.im2col(g);
        let out = self.weight.reshape(&[cout, cin * kh * kw]).matmul(&cols);
        out.reshape(&[cout, s[0], g.out_h, g.out_w])
            .permute(&[1, 0, 2, 3])
            .add(&self.bias.reshape(&[1, cout, 1, 1]))
    }
}

impl Module for Conv2d {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(p, "weight"), &self.weight);
        f(&join(p, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(p, "weight"), &mut self.weight);
        f(&join(p, "bias"), &mut self.bias);
    }
}

/// Weight layout `[C_in, C_out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = out_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        ConvTranspose2d {
            weight: Tensor::param(
                &[in_ch, out_ch, kernel, kernel],
                uniform(rng, in_ch * fan_in, bound),
            ),
            bias: Tensor::param(&[out_ch], uniform(rng, out_ch, bound)),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let [cin, cout, kh, kw] = [
            self.weight.shape()[0],
            self.weight.shape()[1],
            self.weight.shape()[2],
            self.weight.shape()[3],
        ];
        assert_eq!(s[1], cin, "transposed conv expects {cin} channels, got {:?}", s);
        let (b, h, w) = (s[0], s[2], s[3]);
        let xf = x.permute(&[1, 0, 2, 3]).reshape(&[cin, b * h * w]);
        let cols = self.weight.reshape(&[cin, cout * kh * kw]).matmul_t(&xf, true, false);
        let g = ConvGeometry::transposed(
            b,
            cout,
            (h, w),
            (kh, kw),
            (self.stride, self.stride),
            (self.padding, self.padding),
        );
        cols.col2im(g).add(&self.bias.reshape(&[1, cout, 1, 1]))
    }
}

impl Module for ConvTranspose2d {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(p, "weight"), &self.weight);
        f(&join(p, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(p, "weight"), &mut self.weight);
        f(&join(p, "bias"), &mut self.bias);
    }
}

/// 1-D convolution over `[B, C, L]`, run as a height-1 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub inner: Conv2d,
}

impl Conv1d {
    pub fn new(
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_ch * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Conv1d {
            inner: Conv2d {
                weight: Tensor::param(&[out_ch, in_ch, 1, kernel], uniform(rng, out_ch * fan_in, bound)),
                bias: Tensor::param(&[out_ch], uniform(rng, out_ch, bound)),
                stride,
                padding,
            },
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let y = conv2d_rect(&self.inner, &x.reshape(&[s[0], s[1], 1, s[2]]), (1, self.inner.stride), (0, self.inner.padding));
        let ys = y.shape().to_vec();
        y.reshape(&[ys[0], ys[1], ys[3]])
    }
}

impl Module for Conv1d {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.inner.visit(p, f)
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.inner.visit_mut(p, f)
    }
}

/// Transposed 1-D convolution over `[B, C, L]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1d {
    pub fn new(
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = out_ch * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        ConvTranspose1d {
            weight: Tensor::param(&[in_ch, out_ch, 1, kernel], uniform(rng, in_ch * fan_in, bound)),
            bias: Tensor::param(&[out_ch], uniform(rng, out_ch, bound)),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let (b, cin, l) = (s[0], s[1], s[2]);
        let cout = self.weight.shape()[1];
        let k = self.weight.shape()[3];
        let xf = x.permute(&[1, 0, 2]).reshape(&[cin, b * l]);
        let cols = self.weight.reshape(&[cin, cout * k]).matmul_t(&xf, true, false);
        let g = ConvGeometry::transposed(b, cout, (1, l), (1, k), (1, self.stride), (0, self.padding));
        let y = cols.col2im(g).add(&self.bias.reshape(&[1, cout, 1, 1]));
        let ys = y.shape().to_vec();
        y.reshape(&[ys[0], ys[1], ys[3]])
    }
}

impl Module for ConvTranspose1d {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(p, "weight"), &self.weight);
        f(&join(p, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(p, "weight"), &mut self.weight);
        f(&join(p, "bias"), &mut self.bias);
    }
}

fn conv2d_rect(c: &Conv2d, x: &Tensor, stride: (usize, usize), padding: (usize, usize)) -> Tensor {
    let s = x.shape();
    let w = c.weight.shape();
    let (cout, cin, kh, kw) = (w[0], w[1], w[2], w[3]);
    let g = ConvGeometry::forward([s[0], s[1], s[2], s[3]], (kh, kw), stride, padding);
    let cols = x.im2col(g);
    c.weight
        .reshape(&[cout, cin * kh * kw])
        .matmul(&cols)
        .reshape(&[cout, s[0], g.out_h, g.out_w])
        .permute(&[1, 0, 2, 3])
        .add(&c.bias.reshape(&[1, cout, 1, 1]))
}

/// Fixed-kernel depthwise 2-D filtering of `[B, C, H, W]` with valid padding.
pub fn filter2d_valid(x: &Tensor, kernel: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let planes = x.reshape(&[s[0] * s[1], 1, s[2], s[3]]);
    let g = ConvGeometry::forward([s[0] * s[1], 1, s[2], s[3]], (kh, kw), (1, 1), (0, 0));
    let cols = planes.im2col(g);
    kernel
        .reshape(&[1, kh * kw])
        .matmul(&cols)
        .reshape(&[s[0], s[1], g.out_h, g.out_w])
}
