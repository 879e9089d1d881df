//! Variational encoder, generator and Wasserstein critic, trained jointly
//! with a two-interpolant gradient penalty.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::metrics::{cbr, ImageShape};
use crate::nn::layers::join;
use crate::nn::{grad, no_grad, Adam, Conv2d, ConvTranspose2d, Linear, Module, Tensor};
use crate::rng::{normals_f32, Rng};

const SLOPE: f32 = 0.2;

/// Network shapes. Widths are per layer; the encoder has six stride-2
/// convolutions, the generator five stride-2 and two stride-1 transposed
/// convolutions after a linear projection of the latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub image: ImageShape,
    /// Complex channel symbols `k`; the real latent has `2k` entries.
    pub latent_k: usize,
    pub enc_widths: [usize; 6],
    pub gen_widths: [usize; 6],
    pub disc_widths: Vec<usize>,
}

impl CodecConfig {
    /// Small networks for 32x32 grayscale images at a bandwidth ratio of 1/16.
    pub fn desk(image: ImageShape) -> Self {
        CodecConfig {
            image,
            latent_k: image.numel() / 16,
            enc_widths: [16, 32, 64, 64, 128, 128],
            gen_widths: [64, 64, 32, 16, 8, 8],
            disc_widths: vec![16, 32, 32],
        }
    }

    pub fn latent_dim(&self) -> usize {
        2 * self.latent_k
    }

    pub fn cbr(&self) -> f64 {
        cbr(self.latent_k, self.image)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image;
        if self.latent_k == 0 || s.numel() == 0 {
            return Err(Error::Config("latent size and image shape must be positive".into()));
        }
        if s.h % 32 != 0 || s.w % 32 != 0 {
            return Err(Error::Config(format!("image sides must be multiples of 32, got {}x{}", s.h, s.w)));
        }
        if self.disc_widths.is_empty() {
            return Err(Error::Config("discriminator needs at least one layer".into()));
        }
        Ok(())
    }
}

fn conv_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

/// Mean/log-std heads over a convolutional trunk.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub mu: Linear,
    pub log_std: Linear,
    /// Mean of `mu` over the training set. Transmitters subtract it before
    /// power normalization and receivers add it back, so channel power is
    /// spent on what differs between images.
    pub latent_mean: Option<Vec<f32>>,
}

/// Encoder output for a batch; tensors are `[B, 2k]`.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub mu: Tensor,
    pub log_std: Tensor,
}

impl EncoderOutput {
    pub fn sigma(&self) -> Tensor {
        self.log_std.exp()
    }

    /// `mu + sigma * eps` with `eps ~ N(0, I)` from `rng`.
    pub fn sample(&self, rng: &mut Rng) -> Tensor {
        let eps = Tensor::new(self.mu.shape(), normals_f32(rng, self.mu.numel()));
        self.mu.add(&self.sigma().mul(&eps))
    }
}

impl Encoder {
    pub fn new(cfg: &CodecConfig, rng: &mut Rng) -> Self {
        let mut convs = Vec::new();
        let (mut c, mut h, mut w) = (cfg.image.c, cfg.image.h, cfg.image.w);
        for &width in &cfg.enc_widths {
            convs.push(Conv2d::new(rng, c, width, 3, 2, 1));
            c = width;
            h = conv_out(h);
            w = conv_out(w);
        }
        let flat = c * h * w;
        Encoder {
            convs,
            mu: Linear::new(rng, flat, cfg.latent_dim()),
            log_std: Linear::new(rng, flat, cfg.latent_dim()),
            latent_mean: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> EncoderOutput {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h).leaky_relu(SLOPE);
        }
        let f = h.flatten_batch();
        EncoderOutput { mu: self.mu.forward(&f), log_std: self.log_std.forward(&f) }
    }

    /// Sets `latent_mean` from the encoder means of `images`.
    pub fn fit_latent_mean(&mut self, images: &ImageSet, batch: usize) {
        let idx: Vec<usize> = (0..images.len()).collect();
        let mut sum: Vec<f64> = Vec::new();
        for chunk in idx.chunks(batch.max(1)) {
            let mu = no_grad(|| self.forward(&images.batch(chunk)).mu);
            let d = mu.shape()[1];
            sum.resize(d, 0.0);
            for row in mu.data().chunks(d) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += *v as f64;
                }
            }
        }
        let n = images.len().max(1) as f64;
        self.latent_mean = if sum.is_empty() { None } else { Some(sum.iter().map(|s| (s / n) as f32).collect()) };
    }

    /// `latent_mean` widened to f64, or zeros when unset.
    pub fn latent_offset(&self) -> Vec<f64> {
        match &self.latent_mean {
            Some(m) => m.iter().map(|v| *v as f64).collect(),
            None => vec![0.0; self.mu.out_features()],
        }
    }

    /// Checked entry point for an image batch.
    pub fn encode(&self, x: &Tensor, shape: ImageShape) -> Result<EncoderOutput> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != [shape.c, shape.h, shape.w] {
            return Err(Error::shape(format!("[B, {}, {}, {}]", shape.c, shape.h, shape.w), format!("{s:?}")));
        }
        Ok(self.forward(x))
    }
}

impl Module for Encoder {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(p, &format!("conv{i}")), f);
        }
        self.mu.visit(&join(p, "mu"), f);
        self.log_std.visit(&join(p, "log_std"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(p, &format!("conv{i}")), f);
        }
        self.mu.visit_mut(&join(p, "mu"), f);
        self.log_std.visit_mut(&join(p, "log_std"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub project: Linear,
    pub layers: Vec<ConvTranspose2d>,
    base: (usize, usize, usize),
}

impl Generator {
    pub fn new(cfg: &CodecConfig, rng: &mut Rng) -> Self {
        let g = &cfg.gen_widths;
        let base = (g[0], cfg.image.h / 32, cfg.image.w / 32);
        let mut layers = Vec::new();
        for i in 0..5 {
            layers.push(ConvTranspose2d::new(rng, g[i], g[i + 1], 4, 2, 1));
        }
        layers.push(ConvTranspose2d::new(rng, g[5], g[5], 3, 1, 1));
        layers.push(ConvTranspose2d::new(rng, g[5], cfg.image.c, 3, 1, 1));
        Generator { project: Linear::new(rng, cfg.latent_dim(), base.0 * base.1 * base.2), layers, base }
    }

    /// `[B, 2k] -> [B, C, H, W]` in `(0, 1)`.
    pub fn forward(&self, z: &Tensor) -> Tensor {
        let b = z.shape()[0];
        let mut h = self.project.forward(z).leaky_relu(SLOPE).reshape(&[b, self.base.0, self.base.1, self.base.2]);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h);
            if i < last {
                h = h.leaky_relu(SLOPE);
            }
        }
        h.sigmoid()
    }

    pub fn decode(&self, z: &Tensor, latent_dim: usize) -> Result<Tensor> {
        if z.dims() != 2 || z.shape()[1] != latent_dim {
            return Err(Error::shape(format!("[B, {latent_dim}]"), format!("{:?}", z.shape())));
        }
        Ok(self.forward(z))
    }
}

impl Module for Generator {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.project.visit(&join(p, "project"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(p, &format!("deconv{i}")), f);
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.project.visit_mut(&join(p, "project"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(p, &format!("deconv{i}")), f);
        }
    }
}

/// Convolutional feature body followed by a single affine score head.
#[derive(Clone, Debug)]
pub struct DiscriminatorBody {
    pub convs: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub body: DiscriminatorBody,
    pub head: Linear,
}

impl DiscriminatorBody {
    /// Flattened features `[B, F]`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.features(x).last().expect("at least one layer").flatten_batch()
    }

    /// Activations after every layer, shallow to deep.
    pub fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut h = x.clone();
        let mut out = Vec::new();
        for c in &self.convs {
            h = c.forward(&h).leaky_relu(SLOPE);
            out.push(h.clone());
        }
        out
    }
}

impl Discriminator {
    pub fn new(cfg: &CodecConfig, rng: &mut Rng) -> Self {
        let mut convs = Vec::new();
        let (mut c, mut h, mut w) = (cfg.image.c, cfg.image.h, cfg.image.w);
        for &width in &cfg.disc_widths {
            convs.push(Conv2d::new(rng, c, width, 4, 2, 1));
            c = width;
            h /= 2;
            w /= 2;
        }
        Discriminator { body: DiscriminatorBody { convs }, head: Linear::new(rng, c * h * w, 1) }
    }

    /// Unbounded critic score `[B]`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let b = x.shape()[0];
        self.head.forward(&self.body.forward(x)).reshape(&[b])
    }
}

impl Module for DiscriminatorBody {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(p, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(p, &format!("conv{i}")), f);
        }
    }
}

impl Module for Discriminator {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.body.visit(&join(p, "body"), f);
        self.head.visit(&join(p, "head"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.body.visit_mut(&join(p, "body"), f);
        self.head.visit_mut(&join(p, "head"), f);
    }
}

/// Encoder, generator and critic sharing one configuration.
#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub encoder: Encoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Codec {
    pub fn new(config: CodecConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Ok(Codec {
            encoder: Encoder::new(&config, rng),
            generator: Generator::new(&config, rng),
            discriminator: Discriminator::new(&config, rng),
            config,
        })
    }

    /// `G(E(x).mu)` without gradient tracking.
    pub fn reconstruct(&self, x: &Tensor) -> Tensor {
        no_grad(|| self.generator.forward(&self.encoder.forward(x).mu))
    }
}

/// `KL(N(mu, sigma^2) || N(0, 1))` averaged over every latent entry.
pub fn gaussian_kl(out: &EncoderOutput) -> Tensor {
    let s2 = out.log_std.scale(2.0).exp();
    out.mu.square().add(&s2).sub(&out.log_std.scale(2.0)).add_scalar(-1.0).scale(0.5).mean()
}

/// Closed-form KL for one scalar Gaussian against the standard normal.
pub fn gaussian_kl_scalar(mu: f64, sigma: f64) -> f64 {
    0.5 * (mu * mu + sigma * sigma - 1.0 - (sigma * sigma).ln())
}

/// Sum of squared pixel errors per image, averaged over the batch.
pub fn recon_loss(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).square().sum_per_sample().mean()
}

/// `E[(||grad_x critic(x_hat)|| - 1)^2]` along random interpolants between
/// `real` and `fake`. The returned tensor is differentiable in the critic's
/// parameters.
pub fn gradient_penalty(critic: &dyn Fn(&Tensor) -> Tensor, real: &Tensor, fake: &Tensor, rng: &mut Rng) -> Tensor {
    let b = real.shape()[0];
    let per: usize = real.numel() / b;
    let eps: Vec<f32> = (0..b).flat_map(|_| std::iter::repeat_n(rng.random::<f32>(), per)).collect();
    let eps = Tensor::new(real.shape(), eps);
    let mix = eps.mul(&real.detach()).add(&eps.neg().add_scalar(1.0).mul(&fake.detach())).as_param();
    penalty_at(critic, &mix)
}

/// Gradient penalty evaluated at fixed points `x`.
pub fn penalty_at(critic: &dyn Fn(&Tensor) -> Tensor, x: &Tensor) -> Tensor {
    let x = if x.requires_grad() { x.clone() } else { x.as_param() };
    let score = critic(&x).sum();
    let g = grad(&score, &[&x], true).remove(0);
    let norm = g.square().sum_per_sample().add_scalar(1e-12).sqrt();
    norm.add_scalar(-1.0).square().mean()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f32,
    pub lambda_gp: f32,
    pub alpha_phi: f32,
    pub alpha_psi: f32,
    pub n_critic: usize,
    /// Record a log row every this many iterations.
    pub log_every: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            iterations: 3000,
            batch: 32,
            lr: 1e-3,
            lambda_gp: 10.0,
            alpha_phi: 0.5,
            alpha_psi: 0.5,
            n_critic: 1,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecLossRecord {
    pub iteration: usize,
    pub critic: f64,
    pub gradient_penalty: f64,
    pub encoder: f64,
    pub kl: f64,
    pub generator: f64,
    pub recon_mse: f64,
}

pub fn sample_indices(n: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn finite(v: f64, what: &str, it: usize, last: Option<&CodecLossRecord>) -> Result<f64> {
    if v.is_finite() {
        return Ok(v);
    }
    let snap = last.map(|r| serde_json::to_string(r).unwrap_or_default()).unwrap_or_else(|| "none".into());
    Err(Error::Numerical(format!("{what} loss is {v} at iteration {it}; last logged state: {snap}")))
}

/// Optimizer state kept across calls so training can resume.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecOptimizers {
    pub critic: Adam,
    pub encoder: Adam,
    pub generator: Adam,
    pub iteration: usize,
}

impl CodecOptimizers {
    pub fn new(lr: f32) -> Self {
        // Adam with beta1 = 0.5 is the usual choice under a gradient penalty.
        CodecOptimizers {
            critic: Adam::with_betas(lr, 0.5, 0.9),
            encoder: Adam::with_betas(lr, 0.5, 0.9),
            generator: Adam::with_betas(lr, 0.5, 0.9),
            iteration: 0,
        }
    }
}

/// One critic update. Returns (critic loss, penalty).
pub fn critic_step(codec: &mut Codec, x: &Tensor, cfg: &CodecTrainConfig, opt: &mut Adam, rng: &mut Rng) -> (f64, f64) {
    let b = x.shape()[0];
    let d = codec.latent_dim();
    let (fake_prior, fake_recon) = no_grad(|| {
        let z = Tensor::new(&[b, d], normals_f32(rng, b * d));
        let zr = codec.encoder.forward(x).sample(rng);
        (codec.generator.forward(&z), codec.generator.forward(&zr))
    });
    let disc = &codec.discriminator;
    let critic = |t: &Tensor| disc.forward(t);
    let wass = critic(&fake_prior).mean().add(&critic(&fake_recon).mean()).sub(&critic(x).mean().scale(2.0));
    let gp = gradient_penalty(&critic, x, &fake_prior, rng).add(&gradient_penalty(&critic, x, &fake_recon, rng));
    let loss = wass.add(&gp.scale(cfg.lambda_gp));
    let params = disc.params();
    let grads = grad(&loss, &params.iter().collect::<Vec<_>>(), false);
    opt.step(&mut codec.discriminator, &grads);
    (loss.item() as f64, gp.item() as f64)
}

/// Encoder update: `alpha KL + (1 - alpha) reconstruction`. Returns (loss, kl).
pub fn encoder_step(codec: &mut Codec, x: &Tensor, cfg: &CodecTrainConfig, opt: &mut Adam, rng: &mut Rng) -> (f64, f64) {
    let gen = codec.generator.frozen();
    let out = codec.encoder.forward(x);
    let kl = gaussian_kl(&out);
    let recon = recon_loss(&gen.forward(&out.sample(rng)), x);
    let loss = kl.scale(cfg.alpha_phi).add(&recon.scale(1.0 - cfg.alpha_phi));
    let params = codec.encoder.params();
    let grads = grad(&loss, &params.iter().collect::<Vec<_>>(), false);
    opt.step(&mut codec.encoder, &grads);
    (loss.item() as f64, kl.item() as f64)
}

/// Generator update: `alpha reconstruction - (1 - alpha) critic score`.
/// Returns (loss, reconstruction MSE per pixel).
pub fn generator_step(codec: &mut Codec, x: &Tensor, cfg: &CodecTrainConfig, opt: &mut Adam, rng: &mut Rng) -> (f64, f64) {
    let b = x.shape()[0];
    let d = codec.latent_dim();
    let zr = no_grad(|| codec.encoder.forward(x).sample(rng));
    let z = Tensor::new(&[b, d], normals_f32(rng, b * d));
    let disc = codec.discriminator.frozen();
    let recon_img = codec.generator.forward(&zr);
    let recon = recon_loss(&recon_img, x);
    let adv = disc.forward(&codec.generator.forward(&z)).mean().add(&disc.forward(&recon_img).mean()).scale(0.5);
    let loss = recon.scale(cfg.alpha_psi).sub(&adv.scale(1.0 - cfg.alpha_psi));
    let params = codec.generator.params();
    let grads = grad(&loss, &params.iter().collect::<Vec<_>>(), false);
    opt.step(&mut codec.generator, &grads);
    (loss.item() as f64, recon.item() as f64 / (x.numel() / b) as f64)
}

impl Codec {
    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }
}

/// Trains (or continues training) a codec. Aborts with
/// [`Error::Numerical`] as soon as any loss is not finite.
pub fn train_vae_wgan_gp(
    codec: &mut Codec,
    data: &ImageSet,
    cfg: &CodecTrainConfig,
    opt: &mut CodecOptimizers,
    rng: &mut Rng,
    progress: &mut dyn FnMut(&CodecLossRecord),
) -> Result<Vec<CodecLossRecord>> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if data.shape != codec.config.image {
        return Err(Error::shape(format!("{:?}", codec.config.image), format!("{:?}", data.shape)));
    }
    let mut log: Vec<CodecLossRecord> = Vec::new();
    let start = opt.iteration;
    for it in start..start + cfg.iterations {
        let (mut c_loss, mut gp) = (0.0, 0.0);
        for _ in 0..cfg.n_critic {
            let x = data.batch(&sample_indices(data.len(), cfg.batch, rng));
            (c_loss, gp) = critic_step(codec, &x, cfg, &mut opt.critic, rng);
            finite(c_loss, "critic", it, log.last())?;
        }
        let x = data.batch(&sample_indices(data.len(), cfg.batch, rng));
        let (e_loss, kl) = encoder_step(codec, &x, cfg, &mut opt.encoder, rng);
        finite(e_loss, "encoder", it, log.last())?;
        let (g_loss, mse) = generator_step(codec, &x, cfg, &mut opt.generator, rng);
        finite(g_loss, "generator", it, log.last())?;
        opt.iteration = it + 1;
        if (it + 1 - start) % cfg.log_every.max(1) == 0 || it + 1 == start + cfg.iterations {
            let rec = CodecLossRecord {
                iteration: it + 1,
                critic: c_loss,
                gradient_penalty: gp,
                encoder: e_loss,
                kl,
                generator: g_loss,
                recon_mse: mse,
            };
            progress(&rec);
            log.push(rec);
        }
    }
    codec.encoder.fit_latent_mean(data, 256);
    Ok(log)
}
