//! Variance-exploding latent diffusion over the equalized channel output:
//! the noise-prediction teacher, Euler/Heun solvers, the consistency student
//! and its end-to-end distillation through the frozen generator, and the
//! receiver-side sampler.
//!
//! Latents are flat `[B * d]` f64 buffers with `d = 2k`. A batch shares one
//! noise level but every sample carries its own fading, so CSI is per entry.
//! The forward process is `z_t = H_z z_R + t H_n eps`, hence the probability
//! flow velocity is `dz/dt = H_n eps_theta(z, t)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adaptation::AdapterParams;
use crate::channel::{ChannelDistribution, ChannelRealization};
use crate::codec::{Encoder, Generator};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::metrics::ssim_tensor;
use crate::nn::layers::join;
use crate::nn::{ema_update, grad, no_grad, Adam, Conv1d, ConvTranspose1d, Linear, Module, Tensor};
use crate::rng::normal;

/// Smallest usable `H_z` entry when inverting the channel gain.
pub const HZ_GUARD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSchedule {
    pub n: usize,
    pub eps: f64,
    pub t_max: f64,
    pub rho: f64,
    /// `t[i]` is `t_{i+1}`.
    pub t: Vec<f64>,
}

impl Default for TimeSchedule {
    fn default() -> Self {
        TimeSchedule::build(100, 0.002, 2.0, 7.0).expect("default schedule is valid")
    }
}

impl TimeSchedule {
    pub fn build(n: usize, eps: f64, t_max: f64, rho: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Param(format!("schedule needs N >= 2, got {n}")));
        }
        if !(eps > 0.0 && eps < t_max && t_max.is_finite()) {
            return Err(Error::Param(format!("need 0 < eps < T, got eps={eps} T={t_max}")));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Param(format!("rho must be > 0, got {rho}")));
        }
        let (a, b) = (eps.powf(1.0 / rho), t_max.powf(1.0 / rho));
        let mut t: Vec<f64> =
            (0..n).map(|i| (a + i as f64 / (n - 1) as f64 * (b - a)).powf(rho)).collect();
        t[0] = eps;
        t[n - 1] = t_max;
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Param("schedule is not strictly increasing at this precision".into()));
        }
        Ok(TimeSchedule { n, eps, t_max, rho, t })
    }

    /// `t_idx`, 1-based.
    pub fn time(&self, idx: usize) -> f64 {
        self.t[idx - 1]
    }

    /// Start index `m` whose `t_m^2` is closest to `sigma2`; ties go to the smaller index.
    pub fn start_step(&self, sigma2: f64) -> (usize, f64) {
        let mut best = 0;
        for i in 1..self.n {
            if (sigma2 - self.t[i] * self.t[i]).abs() < (sigma2 - self.t[best] * self.t[best]).abs() {
                best = i;
            }
        }
        (best + 1, self.t[best])
    }

    /// Indices `tau_1 = m > tau_2 > ... ` spaced geometrically in time
    /// between `t_m` and `eps`. Collisions after snapping are dropped, so
    /// the result can be shorter than `s` when `m` is small.
    pub fn subsequence(&self, m: usize, s: usize) -> Vec<usize> {
        let mut out = vec![m];
        if s <= 1 || m <= 1 {
            return out;
        }
        let (hi, lo) = (self.time(m).ln(), self.eps.ln());
        for i in 1..s {
            let target = (hi + (lo - hi) * i as f64 / s as f64).exp();
            let idx = (1..m)
                .min_by(|&a, &b| {
                    let da = (self.time(a) - target).abs();
                    let db = (self.time(b) - target).abs();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap_or(1);
            if idx < *out.last().unwrap() {
                out.push(idx);
            }
        }
        out
    }
}

pub fn select_start_step(sigma2: f64, schedule: &TimeSchedule) -> (usize, f64) {
    schedule.start_step(sigma2)
}

/// `z0 + t H_n eps`, one fresh normal per entry.
pub fn forward_perturb(z0: &[f64], t: f64, h_n: &[f64], rng: &mut impl rand::Rng) -> Result<Vec<f64>> {
    if h_n.len() != z0.len() {
        return Err(Error::shape(z0.len(), h_n.len()));
    }
    if !(t >= 0.0) {
        return Err(Error::Param(format!("time must be >= 0, got {t}")));
    }
    Ok(z0.iter().zip(h_n).map(|(z, h)| z + t * h * normal(rng)).collect())
}

/// Per-entry CSI for a batch of latents.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiBatch {
    pub dim: usize,
    pub h_z: Vec<f64>,
    pub h_n: Vec<f64>,
}

impl CsiBatch {
    pub fn from_realizations(chs: &[ChannelRealization], normalized: bool) -> Self {
        let dim = chs.first().map(|c| c.h_z.len()).unwrap_or(0);
        let mut h_z = Vec::with_capacity(dim * chs.len());
        let mut h_n = Vec::with_capacity(dim * chs.len());
        for c in chs {
            let csi = c.csi(normalized);
            h_z.extend(csi.h_z);
            h_n.extend(csi.h_n);
        }
        CsiBatch { dim, h_z, h_n }
    }

    /// Identity gains: the plain VE process.
    pub fn identity(batch: usize, dim: usize) -> Self {
        CsiBatch { dim, h_z: vec![1.0; batch * dim], h_n: vec![1.0; batch * dim] }
    }

    pub fn batch(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.h_z.len() / self.dim
        }
    }

    fn check(&self, z: &[f64], t: &[f64]) -> Result<()> {
        if self.h_z.len() != z.len() || self.h_n.len() != z.len() {
            return Err(Error::shape(z.len(), self.h_z.len()));
        }
        if t.len() * self.dim != z.len() {
            return Err(Error::shape(z.len() / self.dim.max(1), t.len()));
        }
        Ok(())
    }
}

/// Anything that predicts the standardized noise in `z_t`.
pub trait NoisePredictor {
    /// `z` is `[B * d]`, `t` is `[B]`.
    fn predict(&self, z: &[f64], t: &[f64], csi: &CsiBatch) -> Result<Vec<f64>>;
}

impl<F: Fn(&[f64], &[f64], &CsiBatch) -> Vec<f64>> NoisePredictor for F {
    fn predict(&self, z: &[f64], t: &[f64], csi: &CsiBatch) -> Result<Vec<f64>> {
        Ok(self(z, t, csi))
    }
}

fn ode_step(z: &[f64], eps: &[f64], csi: &CsiBatch, t_from: &[f64], t_to: &[f64]) -> Vec<f64> {
    let d = csi.dim;
    z.iter()
        .enumerate()
        .map(|(i, v)| v - csi.h_n[i] * eps[i] * (t_from[i / d] - t_to[i / d]))
        .collect()
}

/// First-order step from `t_from` to `t_to`; one evaluation.
pub fn euler_step(
    model: &dyn NoisePredictor,
    z: &[f64],
    t_from: &[f64],
    t_to: &[f64],
    csi: &CsiBatch,
    nfe: &mut u64,
) -> Result<Vec<f64>> {
    csi.check(z, t_from)?;
    let e = model.predict(z, t_from, csi)?;
    *nfe += 1;
    Ok(ode_step(z, &e, csi, t_from, t_to))
}

/// Second-order step; two evaluations. A step that lands on `t = 0` has no
/// defined corrector and falls back to Euler.
pub fn heun_step(
    model: &dyn NoisePredictor,
    z: &[f64],
    t_from: &[f64],
    t_to: &[f64],
    csi: &CsiBatch,
    nfe: &mut u64,
) -> Result<Vec<f64>> {
    csi.check(z, t_from)?;
    let e1 = model.predict(z, t_from, csi)?;
    *nfe += 1;
    let z_pred = ode_step(z, &e1, csi, t_from, t_to);
    if t_to.iter().any(|t| *t <= 0.0) {
        return Ok(z_pred);
    }
    let e2 = model.predict(&z_pred, t_to, csi)?;
    *nfe += 1;
    let avg: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(ode_step(z, &avg, csi, t_from, t_to))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Heun,
}

/// Integrates along `times` (decreasing, usually ending at 0).
pub fn integrate(
    model: &dyn NoisePredictor,
    y: &[f64],
    csi: &CsiBatch,
    times: &[f64],
    solver: Solver,
    nfe: &mut u64,
) -> Result<Vec<f64>> {
    let b = csi.batch();
    let mut z = y.to_vec();
    for w in times.windows(2) {
        let (from, to) = (vec![w[0]; b], vec![w[1]; b]);
        z = match solver {
            Solver::Euler => euler_step(model, &z, &from, &to, csi, nfe)?,
            Solver::Heun => heun_step(model, &z, &from, &to, csi, nfe)?,
        };
    }
    Ok(z)
}

/// Teacher sampler: `t_m, t_{m-1}, ..., t_1, 0`. Euler costs `m`
/// evaluations, Heun `2m - 1` (the last step into 0 is Euler).
pub fn multi_step_denoise(
    model: &dyn NoisePredictor,
    y: &[f64],
    csi: &CsiBatch,
    sigma2: f64,
    schedule: &TimeSchedule,
    solver: Solver,
    nfe: &mut u64,
) -> Result<Vec<f64>> {
    let (m, _) = schedule.start_step(sigma2);
    let mut times: Vec<f64> = (1..=m).rev().map(|i| schedule.time(i)).collect();
    times.push(0.0);
    integrate(model, y, csi, &times, solver, nfe)
}

/// Two Euler steps: `t_m -> t_tau -> 0` with `tau` the geometric midpoint.
pub fn ddim_two_step(
    model: &dyn NoisePredictor,
    y: &[f64],
    csi: &CsiBatch,
    sigma2: f64,
    schedule: &TimeSchedule,
    nfe: &mut u64,
) -> Result<Vec<f64>> {
    let (m, t_m) = schedule.start_step(sigma2);
    let sub = schedule.subsequence(m, 2);
    let mid = if sub.len() > 1 { schedule.time(sub[1]) } else { 0.5 * t_m };
    integrate(model, y, csi, &[t_m, mid, 0.0], Solver::Euler, nfe)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub width: usize,
    pub emb: usize,
}

impl DenoiserConfig {
    pub fn new(dim: usize) -> Self {
        DenoiserConfig { dim, width: 32, emb: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(Error::Config(format!("latent length must be a positive multiple of 4, got {}", self.dim)));
        }
        if self.width == 0 || self.emb < 2 {
            return Err(Error::Config("denoiser width and embedding must be positive".into()));
        }
        Ok(())
    }
}

fn silu(x: &Tensor) -> Tensor {
    x.mul(&x.sigmoid())
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv1d,
    conv2: Conv1d,
    emb: Linear,
    skip: Option<Conv1d>,
}

impl ResBlock {
    fn new(rng: &mut impl rand::Rng, cin: usize, cout: usize, emb: usize) -> Self {
        ResBlock {
            conv1: Conv1d::new(rng, cin, cout, 3, 1, 1),
            conv2: Conv1d::new(rng, cout, cout, 3, 1, 1),
            emb: Linear::new(rng, emb, cout),
            skip: (cin != cout).then(|| Conv1d::new(rng, cin, cout, 1, 1, 0)),
        }
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Tensor {
        let b = x.shape()[0];
        let e = self.emb.forward(emb);
        let ch = e.shape()[1];
        let h = self.conv1.forward(&silu(x)).add(&e.reshape(&[b, ch, 1]));
        let h = self.conv2.forward(&silu(&h));
        let s = match &self.skip {
            Some(c) => c.forward(x),
            None => x.clone(),
        };
        s.add(&h)
    }
}

impl Module for ResBlock {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit(&join(p, "conv1"), f);
        self.conv2.visit(&join(p, "conv2"), f);
        self.emb.visit(&join(p, "emb"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(p, "skip"), f);
        }
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_mut(&join(p, "conv1"), f);
        self.conv2.visit_mut(&join(p, "conv2"), f);
        self.emb.visit_mut(&join(p, "emb"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(p, "skip"), f);
        }
    }
}

/// Three-level residual U-net over the latent sequence. Input channels are
/// the preconditioned state and the two CSI diagonals.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    stem: Conv1d,
    enc0: ResBlock,
    down1: Conv1d,
    enc1: ResBlock,
    down2: Conv1d,
    mid: ResBlock,
    up2: ConvTranspose1d,
    dec1: ResBlock,
    up1: ConvTranspose1d,
    dec0: ResBlock,
    out: Conv1d,
    /// Lower clamp on the embedded time, so `t = 0` stays finite.
    pub t_floor: f64,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let (w, e) = (config.width, config.emb);
        let mut out = Conv1d::new(rng, w, 1, 3, 1, 1);
        out.inner.weight = Tensor::param(out.inner.weight.shape(), vec![0.0; out.inner.weight.numel()]);
        out.inner.bias = Tensor::param(&[1], vec![0.0]);
        Ok(Denoiser {
            config,
            time1: Linear::new(rng, e / 2 * 2, e),
            time2: Linear::new(rng, e, e),
            stem: Conv1d::new(rng, 3, w, 3, 1, 1),
            enc0: ResBlock::new(rng, w, w, e),
            down1: Conv1d::new(rng, w, 2 * w, 3, 2, 1),
            enc1: ResBlock::new(rng, 2 * w, 2 * w, e),
            down2: Conv1d::new(rng, 2 * w, 2 * w, 3, 2, 1),
            mid: ResBlock::new(rng, 2 * w, 2 * w, e),
            up2: ConvTranspose1d::new(rng, 2 * w, 2 * w, 4, 2, 1),
            dec1: ResBlock::new(rng, 4 * w, 2 * w, e),
            up1: ConvTranspose1d::new(rng, 2 * w, w, 4, 2, 1),
            dec0: ResBlock::new(rng, 2 * w, w, e),
            out,
            t_floor: 1e-3,
        })
    }

    fn embedding(&self, t: &[f64]) -> Tensor {
        let half = self.config.emb / 2;
        let mut v = Vec::with_capacity(t.len() * 2 * half);
        for &ti in t {
            let u = ti.max(self.t_floor).ln() / 4.0;
            for j in 0..half {
                let f = (j as f64 / (half.max(2) - 1) as f64 * 100f64.ln()).exp();
                v.push((u * f).sin());
            }
            for j in 0..half {
                let f = (j as f64 / (half.max(2) - 1) as f64 * 100f64.ln()).exp();
                v.push((u * f).cos());
            }
        }
        let raw = Tensor::from_f64(&[t.len(), 2 * half], &v);
        self.time2.forward(&silu(&self.time1.forward(&raw)))
    }

    /// Differentiable noise prediction, `[B, d]`.
    pub fn forward(&self, z: &[f64], t: &[f64], csi: &CsiBatch) -> Result<Tensor> {
        let d = self.config.dim;
        if csi.dim != d {
            return Err(Error::shape(d, csi.dim));
        }
        csi.check(z, t)?;
        let b = t.len();
        let mut input = vec![0.0; b * 3 * d];
        for s in 0..b {
            for j in 0..d {
                let i = s * d + j;
                let (hz, hn) = (csi.h_z[i], csi.h_n[i]);
                let c_in = 1.0 / (hz * hz + (t[s] * hn).powi(2) + 1e-12).sqrt();
                input[(s * 3) * d + j] = z[i] * c_in;
                input[(s * 3 + 1) * d + j] = hz;
                input[(s * 3 + 2) * d + j] = hn;
            }
        }
        let x = Tensor::from_f64(&[b, 3, d], &input);
        let emb = self.embedding(t);
        let h0 = self.enc0.forward(&self.stem.forward(&x), &emb);
        let h1 = self.enc1.forward(&self.down1.forward(&silu(&h0)), &emb);
        let h2 = self.mid.forward(&self.down2.forward(&silu(&h1)), &emb);
        let u1 = self.up2.forward(&silu(&h2));
        let u1 = self.dec1.forward(&Tensor::concat(&[&u1, &h1], 1), &emb);
        let u0 = self.up1.forward(&silu(&u1));
        let u0 = self.dec0.forward(&Tensor::concat(&[&u0, &h0], 1), &emb);
        Ok(self.out.forward(&silu(&u0)).reshape(&[b, d]))
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z: &[f64], t: &[f64], csi: &CsiBatch) -> Result<Vec<f64>> {
        Ok(no_grad(|| self.forward(z, t, csi))?.to_f64())
    }
}

impl Module for Denoiser {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.time1.visit(&join(p, "time1"), f);
        self.time2.visit(&join(p, "time2"), f);
        self.stem.visit(&join(p, "stem"), f);
        self.enc0.visit(&join(p, "enc0"), f);
        self.down1.visit(&join(p, "down1"), f);
        self.enc1.visit(&join(p, "enc1"), f);
        self.down2.visit(&join(p, "down2"), f);
        self.mid.visit(&join(p, "mid"), f);
        self.up2.visit(&join(p, "up2"), f);
        self.dec1.visit(&join(p, "dec1"), f);
        self.up1.visit(&join(p, "up1"), f);
        self.dec0.visit(&join(p, "dec0"), f);
        self.out.visit(&join(p, "out"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.time1.visit_mut(&join(p, "time1"), f);
        self.time2.visit_mut(&join(p, "time2"), f);
        self.stem.visit_mut(&join(p, "stem"), f);
        self.enc0.visit_mut(&join(p, "enc0"), f);
        self.down1.visit_mut(&join(p, "down1"), f);
        self.enc1.visit_mut(&join(p, "enc1"), f);
        self.down2.visit_mut(&join(p, "down2"), f);
        self.mid.visit_mut(&join(p, "mid"), f);
        self.up2.visit_mut(&join(p, "up2"), f);
        self.dec1.visit_mut(&join(p, "dec1"), f);
        self.up1.visit_mut(&join(p, "up1"), f);
        self.dec0.visit_mut(&join(p, "dec0"), f);
        self.out.visit_mut(&join(p, "out"), f);
    }
}

/// Encoder means of a dataset, centered on the encoder's latent mean and
/// scaled to unit power per real entry. `scale` is the per-image factor the
/// receiver needs to undo it; `mean` is added back after that.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    pub dim: usize,
    pub z: Vec<f64>,
    pub scale: Vec<f64>,
    pub mean: Vec<f64>,
}

impl LatentSet {
    pub fn encode(encoder: &Encoder, images: &ImageSet, batch: usize) -> Self {
        let mean = encoder.latent_offset();
        let mut z = Vec::new();
        let mut scale = Vec::new();
        let idx: Vec<usize> = (0..images.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let mu = no_grad(|| encoder.forward(&images.batch(chunk)).mu);
            let (n, s) = center_and_normalize(&mu.to_f64(), &mean);
            z.extend(n);
            scale.extend(s);
        }
        LatentSet { dim: mean.len(), z, scale, mean }
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.dim..(i + 1) * self.dim]
    }

    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let z = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        let s = idx.iter().map(|&i| self.scale[i]).collect();
        (z, s)
    }
}

/// Rows of `mu` minus `mean`, each scaled to unit power; returns the rows and their scales.
pub fn center_and_normalize(mu: &[f64], mean: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = mean.len();
    let mut z = Vec::with_capacity(mu.len());
    let mut scales = Vec::with_capacity(mu.len() / d.max(1));
    for row in mu.chunks(d.max(1)) {
        let centered: Vec<f64> = row.iter().zip(mean).map(|(v, m)| v - m).collect();
        let (n, s) = crate::channel::normalize_power(&centered);
        z.extend(n);
        scales.push(s);
    }
    (z, scales)
}

/// One channel realization per sample, drawn from `dist`.
pub fn sample_csi(dist: &ChannelDistribution, batch: usize, dim: usize, rng: &mut impl rand::Rng) -> Result<CsiBatch> {
    let chs = (0..batch).map(|_| dist.sample(dim / 2, rng)).collect::<Result<Vec<_>>>()?;
    Ok(CsiBatch::from_realizations(&chs, true))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdmTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f32,
    pub log_every: usize,
    pub channels: ChannelDistribution,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        LdmTrainConfig { iterations: 3000, batch: 64, lr: 5e-4, log_every: 50, channels: ChannelDistribution::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdmLossRecord {
    pub iteration: usize,
    /// Mean squared noise-prediction error per entry, averaged over the logging window.
    pub loss: f64,
}

/// Builds a noisy training batch `H_z z_R + t H_n eps` at uniformly drawn schedule indices.
fn noisy_batch(
    latents: &LatentSet,
    schedule: &TimeSchedule,
    idx: &[usize],
    csi: &CsiBatch,
    steps: &[usize],
    rng: &mut impl rand::Rng,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = latents.dim;
    let (z0, _) = latents.gather(idx);
    let t: Vec<f64> = steps.iter().map(|&n| schedule.time(n)).collect();
    let noise: Vec<f64> = (0..z0.len()).map(|_| normal(rng)).collect();
    let zt = (0..z0.len()).map(|i| csi.h_z[i] * z0[i] + t[i / d] * csi.h_n[i] * noise[i]).collect();
    (zt, t, noise)
}

/// Noise-prediction training with a fresh channel per sample. Stops with
/// [`Error::Numerical`] before applying a non-finite update, leaving `net`
/// at its last good state.
pub fn train_ldm(
    net: &mut Denoiser,
    latents: &LatentSet,
    schedule: &TimeSchedule,
    cfg: &LdmTrainConfig,
    rng: &mut crate::rng::Rng,
    progress: &mut dyn FnMut(&LdmLossRecord),
) -> Result<Vec<LdmLossRecord>> {
    if latents.dim != net.config.dim {
        return Err(Error::Config(format!("latent length {} does not match denoiser {}", latents.dim, net.config.dim)));
    }
    if latents.is_empty() || cfg.batch == 0 {
        return Err(Error::Config("train_ldm needs latents and a positive batch".into()));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::new();
    let mut window = (0.0, 0usize);
    for it in 1..=cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..latents.len())).collect();
        let steps: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(1..=schedule.n)).collect();
        let csi = sample_csi(&cfg.channels, cfg.batch, latents.dim, rng)?;
        let (zt, t, noise) = noisy_batch(latents, schedule, &idx, &csi, &steps, rng);
        let target = Tensor::from_f64(&[cfg.batch, latents.dim], &noise);
        let loss = net.forward(&zt, &t, &csi)?.sub(&target).square().mean();
        let v = loss.item() as f64;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("diffusion loss is {v} at iteration {it}")));
        }
        let params = net.params();
        let grads = grad(&loss, &params.iter().collect::<Vec<_>>(), false);
        opt.step(net, &grads);
        window.0 += v;
        window.1 += 1;
        if it % cfg.log_every.max(1) == 0 || it == cfg.iterations {
            let rec = LdmLossRecord { iteration: it, loss: window.0 / window.1 as f64 };
            progress(&rec);
            log.push(rec);
            window = (0.0, 0);
        }
    }
    Ok(log)
}

/// Mean noise-prediction loss on held-out latents at fixed seed.
pub fn ldm_eval_loss(
    net: &dyn NoisePredictor,
    latents: &LatentSet,
    schedule: &TimeSchedule,
    channels: &ChannelDistribution,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = crate::rng::seeded(seed);
    let n = samples.min(latents.len()).max(1);
    let idx: Vec<usize> = (0..n).collect();
    let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.n)).collect();
    let csi = sample_csi(channels, n, latents.dim, &mut rng)?;
    let (zt, t, noise) = noisy_batch(latents, schedule, &idx, &csi, &steps, &mut rng);
    let pred = net.predict(&zt, &t, &csi)?;
    Ok(pred.iter().zip(&noise).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
}

pub const SIGMA_DATA: f64 = 0.5;

/// `(c_skip, c_out)` at time `t`; exactly `(1, 0)` at `t = eps`.
pub fn consistency_coefficients(t: f64, eps: f64, sigma_d: f64) -> (f64, f64) {
    let s2 = sigma_d * sigma_d;
    let c_skip = s2 / ((t - eps).powi(2) + s2);
    let c_out = sigma_d * (t - eps) / (s2 + t * t).sqrt();
    (c_skip, c_out)
}

/// Coefficients `(a, b)` of the student output `F = a z - b H_n eps_net`.
/// They make `c_skip z + c_out F` equal the one-step Euler jump to `eps`,
/// so a student copied from the teacher starts as a one-step sampler.
fn student_head(t: f64, eps: f64, sigma_d: f64) -> (f64, f64) {
    let s2 = sigma_d * sigma_d;
    let r = (s2 + t * t).sqrt();
    ((t - eps) * r / (sigma_d * ((t - eps).powi(2) + s2)), r / sigma_d)
}

/// `f(z, t) = c_skip z + c_out F(z, t)`, differentiable in the network parameters.
pub fn consistency_forward(net: &Denoiser, z: &[f64], t: &[f64], csi: &CsiBatch, eps: f64, sigma_d: f64) -> Result<Tensor> {
    let d = net.config.dim;
    let e = net.forward(z, t, csi)?;
    let b = t.len();
    let mut skip = vec![0.0; b * d];
    let mut out = vec![0.0; b * d];
    for s in 0..b {
        let (cs, co) = consistency_coefficients(t[s], eps, sigma_d);
        let (a, bb) = student_head(t[s], eps, sigma_d);
        for j in 0..d {
            let i = s * d + j;
            skip[i] = (cs + co * a) * z[i];
            out[i] = -co * bb * csi.h_n[i];
        }
    }
    Ok(Tensor::from_f64(&[b, d], &skip).add(&e.mul(&Tensor::from_f64(&[b, d], &out))))
}

/// Evaluates `f` in f64. Samples at the boundary are returned untouched.
pub fn consistency_apply(
    net: &Denoiser,
    z: &[f64],
    t: &[f64],
    csi: &CsiBatch,
    eps: f64,
    sigma_d: f64,
    nfe: &mut u64,
) -> Result<Vec<f64>> {
    csi.check(z, t)?;
    let d = csi.dim;
    let coeff: Vec<(f64, f64)> = t.iter().map(|&ti| consistency_coefficients(ti, eps, sigma_d)).collect();
    if coeff.iter().all(|c| c.1 == 0.0) {
        return Ok(z.to_vec());
    }
    let e = net.predict(z, t, csi)?;
    *nfe += 1;
    let mut out = z.to_vec();
    for s in 0..t.len() {
        let (cs, co) = coeff[s];
        if co == 0.0 {
            continue;
        }
        let (a, b) = student_head(t[s], eps, sigma_d);
        for j in 0..d {
            let i = s * d + j;
            out[i] = cs * z[i] + co * (a * z[i] - b * csi.h_n[i] * e[i]);
        }
    }
    Ok(out)
}

/// The distilled student: online weights, the target copy used by the
/// distillation loss, and a slow average used for sampling.
#[derive(Clone, Debug)]
pub struct ConsistencyModel {
    pub online: Denoiser,
    pub target: Denoiser,
    pub ema: Denoiser,
    pub sigma_data: f64,
    pub eps: f64,
    pub steps: u64,
}

impl ConsistencyModel {
    pub fn from_teacher(teacher: &Denoiser, schedule: &TimeSchedule) -> Self {
        let online = teacher.trainable();
        ConsistencyModel {
            target: online.frozen(),
            ema: online.frozen(),
            online,
            sigma_data: SIGMA_DATA,
            eps: schedule.eps,
            steps: 0,
        }
    }

    /// Sampling-time consistency function (slow-average weights).
    pub fn apply(&self, z: &[f64], t: &[f64], csi: &CsiBatch, nfe: &mut u64) -> Result<Vec<f64>> {
        consistency_apply(&self.ema, z, t, csi, self.eps, self.sigma_data, nfe)
    }
}

/// Distance between decoded teacher/student images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillDistance {
    /// `1 - SSIM`, per image.
    Ssim,
    /// Squared error per image, averaged over pixels.
    SquaredError,
}

impl DistillDistance {
    fn per_sample(&self, a: &Tensor, b: &Tensor) -> Tensor {
        match self {
            DistillDistance::Ssim => ssim_tensor(a, b, 1.0).scale(-1.0).add_scalar(1.0),
            DistillDistance::SquaredError => a.sub(b).square().mean_per_sample(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EecdConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f32,
    /// Target-network decay.
    pub mu: f32,
    /// Ceiling of the warm-up sampling-average decay.
    pub ema_decay: f32,
    pub distance: DistillDistance,
    pub log_every: usize,
    pub channels: ChannelDistribution,
}

impl Default for EecdConfig {
    fn default() -> Self {
        EecdConfig {
            iterations: 1000,
            batch: 32,
            lr: 2e-4,
            mu: 0.95,
            ema_decay: 0.99993,
            distance: DistillDistance::Ssim,
            log_every: 25,
            channels: ChannelDistribution::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EecdLossRecord {
    pub iteration: usize,
    pub loss: f64,
}

/// Maps consistency outputs (estimates of `H_z z_R`) back to generator inputs.
fn unscale_tensor(f: &Tensor, csi: &CsiBatch, scales: &[f64], mean: &[f64]) -> Tensor {
    let d = csi.dim;
    let w: Vec<f64> = (0..csi.h_z.len()).map(|i| scales[i / d] / csi.h_z[i].max(HZ_GUARD)).collect();
    let m: Vec<f64> = (0..csi.h_z.len()).map(|i| mean[i % d]).collect();
    f.mul(&Tensor::from_f64(f.shape(), &w)).add(&Tensor::from_f64(f.shape(), &m))
}

/// End-to-end consistency distillation. The teacher and generator are
/// only read. On a non-finite loss the model is left at its last good state.
#[allow(clippy::too_many_arguments)]
pub fn eecd_distill(
    cm: &mut ConsistencyModel,
    teacher: &Denoiser,
    generator: &Generator,
    latents: &LatentSet,
    schedule: &TimeSchedule,
    cfg: &EecdConfig,
    rng: &mut crate::rng::Rng,
    progress: &mut dyn FnMut(&EecdLossRecord),
) -> Result<Vec<EecdLossRecord>> {
    if latents.dim != cm.online.config.dim || teacher.config.dim != latents.dim || latents.mean.len() != latents.dim {
        return Err(Error::Config("latent length does not match the student/teacher".into()));
    }
    if latents.is_empty() || cfg.batch == 0 {
        return Err(Error::Config("eecd_distill needs latents and a positive batch".into()));
    }
    let gen = generator.frozen();
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::new();
    let mut window = (0.0, 0usize);
    let d = latents.dim;
    for it in 1..=cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..latents.len())).collect();
        let steps: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(1..schedule.n)).collect();
        let csi = sample_csi(&cfg.channels, cfg.batch, d, rng)?;
        let next: Vec<usize> = steps.iter().map(|n| n + 1).collect();
        let (z_next, t_next, _) = noisy_batch(latents, schedule, &idx, &csi, &next, rng);
        let (_, scales) = latents.gather(&idx);
        let t_n: Vec<f64> = steps.iter().map(|&n| schedule.time(n)).collect();
        let mut teacher_nfe = 0;
        let z_hat = heun_step(teacher, &z_next, &t_next, &t_n, &csi, &mut teacher_nfe)?;
        let target = no_grad(|| -> Result<Tensor> {
            let f = consistency_forward(&cm.target, &z_hat, &t_n, &csi, cm.eps, cm.sigma_data)?;
            Ok(gen.forward(&unscale_tensor(&f, &csi, &scales, &latents.mean)))
        })?;
        let f = consistency_forward(&cm.online, &z_next, &t_next, &csi, cm.eps, cm.sigma_data)?;
        let img = gen.forward(&unscale_tensor(&f, &csi, &scales, &latents.mean));
        let loss = cfg.distance.per_sample(&img, &target).mean();
        let v = loss.item() as f64;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("distillation loss is {v} at iteration {it}")));
        }
        let params = cm.online.params();
        let grads = grad(&loss, &params.iter().collect::<Vec<_>>(), false);
        opt.step(&mut cm.online, &grads);
        ema_update(&mut cm.target, &cm.online, cfg.mu);
        cm.steps += 1;
        let n = cm.steps as f32;
        let decay = cfg.ema_decay.min((1.0 + n) / (10.0 + n));
        ema_update(&mut cm.ema, &cm.online, decay);
        window.0 += v;
        window.1 += 1;
        if it % cfg.log_every.max(1) == 0 || it == cfg.iterations {
            let rec = EecdLossRecord { iteration: it, loss: window.0 / window.1 as f64 };
            progress(&rec);
            log.push(rec);
            window = (0.0, 0);
        }
    }
    Ok(log)
}

/// `H_z^{-1} z` per entry, refusing near-singular gains.
pub fn invert_gain(z: &[f64], csi: &CsiBatch) -> Result<Vec<f64>> {
    if let Some(h) = csi.h_z.iter().find(|h| !(**h >= HZ_GUARD)) {
        return Err(Error::Numerical(format!("channel gain {h:e} is too small to invert")));
    }
    Ok(z.iter().zip(&csi.h_z).map(|(v, h)| v / h).collect())
}

/// Receiver chain up to the latent: consistency jump from `t_m`, optional
/// re-noise/re-jump along a geometric subsequence, then gain inversion.
/// Returns the estimate of the normalized `z_R`; costs `s` evaluations
/// unless the subsequence collapses for very small `m`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_latent(
    y: &[f64],
    csi: &CsiBatch,
    sigma2: f64,
    cm: &ConsistencyModel,
    schedule: &TimeSchedule,
    s: usize,
    rng: &mut impl rand::Rng,
    nfe: &mut u64,
) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::Param("subsequence length must be >= 1".into()));
    }
    let b = csi.batch();
    let (m, t_m) = schedule.start_step(sigma2);
    let mut z = cm.apply(y, &vec![t_m; b], csi, nfe)?;
    for &tau in schedule.subsequence(m, s).iter().skip(1) {
        let t = schedule.time(tau);
        let noisy: Vec<f64> = z.iter().zip(&csi.h_n).map(|(v, h)| v + t * h * normal(rng)).collect();
        z = cm.apply(&noisy, &vec![t; b], csi, nfe)?;
    }
    invert_gain(&z, csi)
}

/// Undoes the power normalization and centering, applies the adapter and
/// decodes. An empty `mean` means the latents were not centered.
pub fn decode_latents(
    z_r: &[f64],
    scales: &[f64],
    dim: usize,
    mean: &[f64],
    adapter: Option<&AdapterParams>,
    generator: &Generator,
) -> Result<Tensor> {
    if dim == 0 || z_r.len() != scales.len() * dim {
        return Err(Error::shape(scales.len() * dim, z_r.len()));
    }
    if !mean.is_empty() && mean.len() != dim {
        return Err(Error::shape(dim, mean.len()));
    }
    let offset = |j: usize| if mean.is_empty() { 0.0 } else { mean[j] };
    let raw: Vec<f64> = z_r.iter().enumerate().map(|(i, v)| v * scales[i / dim] + offset(i % dim)).collect();
    let z = Tensor::from_f64(&[scales.len(), dim], &raw);
    Ok(no_grad(|| {
        let z = match adapter {
            Some(a) => a.apply(&z),
            None => z,
        };
        generator.forward(&z)
    }))
}

/// Full consistency receiver: denoise, invert the gain, adapt, decode.
#[allow(clippy::too_many_arguments)]
pub fn denoise_sample(
    y: &[f64],
    csi: &CsiBatch,
    sigma2: f64,
    scales: &[f64],
    mean: &[f64],
    cm: &ConsistencyModel,
    schedule: &TimeSchedule,
    s: usize,
    adapter: Option<&AdapterParams>,
    generator: &Generator,
    rng: &mut impl rand::Rng,
    nfe: &mut u64,
) -> Result<Tensor> {
    let z = denoise_latent(y, csi, sigma2, cm, schedule, s, rng, nfe)?;
    decode_latents(&z, scales, csi.dim, mean, adapter, generator)
}
