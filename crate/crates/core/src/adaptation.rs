//! One-shot latent adaptation for out-of-domain inputs: an affine map on the
//! latent trained against a fresh critic head on the frozen critic body.

use serde::{Deserialize, Serialize};

use crate::codec::{penalty_at, Codec, DiscriminatorBody, Encoder, Generator};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::nn::layers::join;
use crate::nn::{grad, no_grad, Adam, Linear, Module, Tensor};
use crate::rng::{normals_f32, Rng};

/// Side-channel format version written by [`AdapterParams::to_bytes`].
pub const ADAPTER_FORMAT_VERSION: u32 = 1;

/// `z -> omega^T z + b`, with `omega` full or diagonal.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub dim: usize,
    /// `[dim, dim]` when full, `[dim]` when diagonal.
    pub omega: Tensor,
    pub b: Tensor,
    pub diagonal: bool,
}

impl AdapterParams {
    pub fn identity(dim: usize, diagonal: bool) -> Self {
        let omega = if diagonal {
            Tensor::param(&[dim], vec![1.0; dim])
        } else {
            let mut w = vec![0.0; dim * dim];
            (0..dim).for_each(|i| w[i * dim + i] = 1.0);
            Tensor::param(&[dim, dim], w)
        };
        AdapterParams { dim, omega, b: Tensor::param(&[dim], vec![0.0; dim]), diagonal }
    }

    pub fn from_matrix(dim: usize, omega: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        if omega.len() != dim * dim || b.len() != dim {
            return Err(Error::shape(dim * dim + dim, omega.len() + b.len()));
        }
        Ok(AdapterParams { dim, omega: Tensor::param(&[dim, dim], omega), b: Tensor::param(&[dim], b), diagonal: false })
    }

    /// Dense `omega` in row-major order.
    pub fn omega_matrix(&self) -> Vec<f32> {
        if !self.diagonal {
            return self.omega.to_vec();
        }
        let mut w = vec![0.0; self.dim * self.dim];
        for (i, v) in self.omega.data().iter().enumerate() {
            w[i * self.dim + i] = *v;
        }
        w
    }

    pub fn is_identity(&self) -> bool {
        let w = self.omega_matrix();
        self.b.data().iter().all(|v| *v == 0.0)
            && (0..self.dim).all(|i| (0..self.dim).all(|j| w[i * self.dim + j] == if i == j { 1.0 } else { 0.0 }))
    }

    /// Applies the map to a `[B, dim]` batch of latents (rows).
    pub fn apply(&self, z: &Tensor) -> Tensor {
        let lin = if self.diagonal { z.mul(&self.omega) } else { z.matmul(&self.omega) };
        lin.add(&self.b)
    }

    /// Fixed-width little-endian encoding: version, dim, omega row-major, b.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&ADAPTER_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in self.omega_matrix().iter().chain(self.b.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn encoded_len(&self) -> usize {
        8 + 4 * (self.dim * self.dim + self.dim)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<[u8; 4]> {
            bytes.get(i..i + 4).map(|s| [s[0], s[1], s[2], s[3]]).ok_or_else(|| Error::Format("adapter record truncated".into()))
        };
        let version = u32::from_le_bytes(word(0)?);
        if version != ADAPTER_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported adapter format version {version}")));
        }
        let dim = u32::from_le_bytes(word(4)?) as usize;
        let n = dim * dim + dim;
        if bytes.len() != 8 + 4 * n {
            return Err(Error::Format(format!("adapter record of {} bytes, expected {}", bytes.len(), 8 + 4 * n)));
        }
        let vals: Vec<f32> = (0..n).map(|i| word(8 + 4 * i).map(f32::from_le_bytes)).collect::<Result<_>>()?;
        Self::from_matrix(dim, vals[..dim * dim].to_vec(), vals[dim * dim..].to_vec())
    }
}

impl PartialEq for AdapterParams {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.omega_matrix() == other.omega_matrix() && self.b.data() == other.b.data()
    }
}

/// Rows `idx` of a constant `[N, D]` tensor.
fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let data = idx.iter().flat_map(|&i| t.data()[i * d..(i + 1) * d].iter().copied()).collect();
    Tensor::new(&[idx.len(), d], data)
}

impl Module for AdapterParams {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(p, "omega"), &self.omega);
        f(&join(p, "b"), &self.b);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(p, "omega"), &mut self.omega);
        f(&join(p, "b"), &mut self.b);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub eta: f32,
    pub lambda_gp: f32,
    pub max_epochs: usize,
    pub steps_per_epoch: usize,
    /// Latent samples per step.
    pub batch: usize,
    /// Half of each batch is drawn around `E(x'')` instead of from `N(0, I)`.
    pub encoder_anchored: bool,
    /// Weight of the critic-body feature matching term on anchored samples.
    pub feature_match: f32,
    pub diagonal: bool,
    /// Epochs without improvement of the adapter loss before stopping.
    pub patience: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            eta: 1e-3,
            lambda_gp: 10.0,
            max_epochs: 100,
            steps_per_epoch: 5,
            batch: 16,
            encoder_anchored: true,
            feature_match: 1.0,
            diagonal: false,
            patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpochRecord {
    pub epoch: usize,
    pub critic_loss: f64,
    pub adapter_loss: f64,
    /// Reconstruction PSNR of the target image(s) through the current adapter.
    pub psnr: f64,
}

pub struct AdaptOutcome {
    pub adapter: AdapterParams,
    pub head: Linear,
    pub log: Vec<AdaptEpochRecord>,
    /// PSNR before any update.
    pub initial_psnr: f64,
}

/// Mean PSNR of `G(adapter(E(x).mu))` against `x`.
pub fn adapted_psnr(encoder: &Encoder, generator: &Generator, adapter: &AdapterParams, x: &ImageSet) -> Result<f64> {
    let t = x.batch(&(0..x.len()).collect::<Vec<_>>());
    let rec = no_grad(|| generator.forward(&adapter.apply(&encoder.forward(&t).mu)));
    let per = x.shape.numel();
    let mut s = 0.0;
    for i in 0..x.len() {
        s += psnr(x.image(i), &rec.data()[i * per..(i + 1) * per], 1.0)?;
    }
    Ok(s / x.len() as f64)
}

/// Online adversarial fit of an adapter to `target`. Encoder, generator and
/// critic body are read-only; the head starts from the trained critic's head.
pub fn adapt_one_shot(codec: &Codec, target: &ImageSet, cfg: &AdaptConfig, rng: &mut Rng) -> Result<AdaptOutcome> {
    if target.is_empty() {
        return Err(Error::Config("adaptation needs at least one image".into()));
    }
    if target.shape != codec.config.image {
        return Err(Error::shape(format!("{:?}", codec.config.image), format!("{:?}", target.shape)));
    }
    let dim = codec.latent_dim();
    let encoder = codec.encoder.frozen();
    let generator = codec.generator.frozen();
    let body: DiscriminatorBody = codec.discriminator.body.frozen();
    let mut head = codec.discriminator.head.trainable();
    let mut adapter = AdapterParams::identity(dim, cfg.diagonal);
    let initial_psnr = adapted_psnr(&encoder, &generator, &adapter, target)?;
    let mut log = Vec::new();
    if cfg.max_epochs == 0 {
        return Ok(AdaptOutcome { adapter, head, log, initial_psnr });
    }

    let n = target.len();
    let x_all = target.batch(&(0..n).collect::<Vec<_>>());
    let anchors = no_grad(|| encoder.forward(&x_all));
    let anchor_sd = no_grad(|| anchors.sigma());
    let real_feat = no_grad(|| body.forward(&x_all));
    let mut opt_head = Adam::with_betas(cfg.eta, 0.5, 0.9);
    let mut opt_adapter = Adam::with_betas(cfg.eta, 0.5, 0.9);
    let (mut best, mut since) = (f64::INFINITY, 0);
    let bsz = cfg.batch.max(2);
    let half = if cfg.encoder_anchored { bsz / 2 } else { 0 };

    // rows of real images repeated to the batch size
    let real_idx: Vec<usize> = (0..bsz).map(|i| i % n).collect();
    let x_real = target.batch(&real_idx);

    let sample_z = |rng: &mut Rng| -> Tensor {
        let prior = Tensor::new(&[bsz - half, dim], normals_f32(rng, (bsz - half) * dim));
        if half == 0 {
            return prior;
        }
        let idx: Vec<usize> = (0..half).map(|i| i % n).collect();
        let mu = gather_rows(&anchors.mu, &idx);
        let sd = gather_rows(&anchor_sd, &idx);
        let eps = Tensor::new(&[half, dim], normals_f32(rng, half * dim));
        Tensor::concat(&[&mu.add(&sd.mul(&eps)), &prior], 0)
    };

    for epoch in 1..=cfg.max_epochs {
        let (mut c_sum, mut a_sum) = (0.0, 0.0);
        for _ in 0..cfg.steps_per_epoch {
            // critic head
            let z = sample_z(rng);
            let fake = no_grad(|| generator.forward(&adapter.apply(&z)));
            let h = head.clone();
            let critic = |t: &Tensor| h.forward(&body.forward(t)).reshape(&[t.shape()[0]]);
            let eps: Vec<f32> = normals_f32(rng, bsz).iter().map(|v| (v.tanh() + 1.0) / 2.0).collect();
            let per = target.shape.numel();
            let e = Tensor::new(x_real.shape(), eps.iter().flat_map(|v| std::iter::repeat_n(*v, per)).collect());
            let mix = e.mul(&x_real).add(&e.neg().add_scalar(1.0).mul(&fake));
            let c_loss = critic(&fake).mean().sub(&critic(&x_real).mean()).add(&penalty_at(&critic, &mix).scale(cfg.lambda_gp));
            let hp = head.params();
            let g = grad(&c_loss, &hp.iter().collect::<Vec<_>>(), false);
            opt_head.step(&mut head, &g);
            c_sum += c_loss.item() as f64;

            // adapter
            let z = sample_z(rng);
            let fake = generator.forward(&adapter.apply(&z));
            let feats = body.forward(&fake);
            let hf = head.frozen();
            let mut a_loss = hf.forward(&feats).mean().neg();
            if half > 0 && cfg.feature_match > 0.0 {
                let f_anchor = feats.narrow(0, 0, half);
                let r = gather_rows(&real_feat, &(0..half).map(|i| i % n).collect::<Vec<_>>());
                a_loss = a_loss.add(&f_anchor.sub(&r).square().sum_per_sample().mean().scale(cfg.feature_match));
            }
            let ap = adapter.params();
            let g = grad(&a_loss, &ap.iter().collect::<Vec<_>>(), false);
            opt_adapter.step(&mut adapter, &g);
            a_sum += a_loss.item() as f64;
        }
        let steps = cfg.steps_per_epoch.max(1) as f64;
        let rec = AdaptEpochRecord {
            epoch,
            critic_loss: c_sum / steps,
            adapter_loss: a_sum / steps,
            psnr: adapted_psnr(&encoder, &generator, &adapter, target)?,
        };
        if !(rec.critic_loss.is_finite() && rec.adapter_loss.is_finite()) {
            return Err(Error::Numerical(format!("adaptation loss not finite at epoch {epoch}")));
        }
        let loss = rec.adapter_loss;
        log.push(rec);
        if loss < best - 1e-6 {
            best = loss;
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    Ok(AdaptOutcome { adapter, head, log, initial_psnr })
}

/// Parameters of one adaptation session: `(2k)^2 + 2k` adapter plus the head.
pub fn adapter_param_bound(dim: usize, head: &Linear) -> usize {
    dim * dim + dim + head.param_count()
}

/// Per-image flag: reconstruction MSE at the transmitter exceeds `threshold`.
pub fn detect_ambiguity(codec: &Codec, x: &ImageSet, threshold: f64) -> Result<Vec<bool>> {
    Ok(reconstruction_errors(codec, x)?.into_iter().map(|e| e > threshold).collect())
}

pub fn reconstruction_errors(codec: &Codec, x: &ImageSet) -> Result<Vec<f64>> {
    let per = x.shape.numel();
    let mut out = Vec::with_capacity(x.len());
    for chunk in (0..x.len()).collect::<Vec<_>>().chunks(64) {
        let rec = codec.reconstruct(&x.batch(chunk));
        for (j, &i) in chunk.iter().enumerate() {
            out.push(crate::metrics::mse(x.image(i), &rec.data()[j * per..(j + 1) * per])?);
        }
    }
    Ok(out)
}

/// Empirical `q`-quantile (nearest rank).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::metrics::ImageShape;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn tiny_codec(rng: &mut crate::rng::Rng) -> Codec {
        Codec::new(
            CodecConfig {
                image: ImageShape::new(1, 32, 32),
                latent_k: 4,
                enc_widths: [2; 6],
                gen_widths: [4, 2, 2, 2, 2, 2],
                disc_widths: vec![2, 2],
            },
            rng,
        )
        .unwrap()
    }

    #[test]
    fn identity_and_scaling() {
        let z = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]);
        for diag in [false, true] {
            let a = AdapterParams::identity(3, diag);
            assert_eq!(a.apply(&z).data(), z.data());
            assert!(a.is_identity());
        }
        let mut w = vec![0.0; 9];
        (0..3).for_each(|i| w[i * 3 + i] = 2.0);
        let a = AdapterParams::from_matrix(3, w, vec![0.0; 3]).unwrap();
        assert_eq!(a.apply(&Tensor::full(&[1, 3], 1.0)).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn inverse_composition() {
        // omega = I + 0.1 R is well conditioned; invert by Gauss-Jordan in f64
        let n = 4;
        let r: Vec<f64> = (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let w: Vec<f64> = (0..16).map(|i| r[i] * 0.1 + if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let b = vec![0.3, -0.1, 0.2, 0.05];
        let mut aug: Vec<Vec<f64>> = (0..n).map(|i| {
            let mut row = w[i * n..(i + 1) * n].to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        }).collect();
        for c in 0..n {
            let p = aug[c][c];
            aug[c].iter_mut().for_each(|v| *v /= p);
            for r in 0..n {
                if r != c {
                    let f = aug[r][c];
                    let src = aug[c].clone();
                    aug[r].iter_mut().zip(&src).for_each(|(v, s)| *v -= f * s);
                }
            }
        }
        let inv: Vec<f64> = (0..n).flat_map(|i| aug[i][n..].to_vec()).collect();
        // z' = z W + b  =>  z = (z' - b) W^-1 = z' W^-1 - b W^-1
        let b_inv: Vec<f64> = (0..n).map(|j| -(0..n).map(|i| b[i] * inv[i * n + j]).sum::<f64>()).collect();
        let fwd = AdapterParams::from_matrix(n, w.iter().map(|v| *v as f32).collect(), b.iter().map(|v| *v as f32).collect()).unwrap();
        let back = AdapterParams::from_matrix(n, inv.iter().map(|v| *v as f32).collect(), b_inv.iter().map(|v| *v as f32).collect()).unwrap();
        let z = Tensor::new(&[1, 4], vec![0.7, -1.3, 2.0, 0.1]);
        let rt = back.apply(&fwd.apply(&z));
        for (a, b) in rt.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn side_channel_round_trip() {
        let a = AdapterParams::from_matrix(2, vec![1.5, 0.25, -3.0, 1e-7], vec![0.5, -0.125]).unwrap();
        let bytes = a.to_bytes();
        assert_eq!(bytes.len(), 8 + 4 * 6);
        assert_eq!(&bytes[..8], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(AdapterParams::from_bytes(&bytes).unwrap(), a);
        assert!(AdapterParams::from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 9;
        assert!(AdapterParams::from_bytes(&bad).is_err());
    }

    #[test]
    fn zero_epochs_returns_identity_and_freezes_everything() {
        let mut rng = seeded(0);
        let codec = tiny_codec(&mut rng);
        let x = ImageSet::new(ImageShape::new(1, 32, 32), vec![0.4; 1024], None).unwrap();
        let out = adapt_one_shot(&codec, &x, &AdaptConfig { max_epochs: 0, ..Default::default() }, &mut rng).unwrap();
        assert!(out.adapter.is_identity());
        let sums = (codec.encoder.checksum(), codec.generator.checksum(), codec.discriminator.body.checksum());
        let cfg = AdaptConfig { max_epochs: 2, steps_per_epoch: 2, batch: 4, ..Default::default() };
        let out = adapt_one_shot(&codec, &x, &cfg, &mut rng).unwrap();
        assert_eq!(sums, (codec.encoder.checksum(), codec.generator.checksum(), codec.discriminator.body.checksum()));
        assert!(!out.adapter.is_identity());
        assert!(out.adapter.param_count() + out.head.param_count() <= adapter_param_bound(8, &codec.discriminator.head));
    }

    #[test]
    fn identity_adapter_is_bit_identical_to_plain_pipeline() {
        let mut rng = seeded(1);
        let codec = tiny_codec(&mut rng);
        let x = Tensor::new(&[2, 1, 32, 32], (0..2048).map(|i| (i % 13) as f32 / 13.0).collect());
        let plain = codec.reconstruct(&x);
        let mu = no_grad(|| codec.encoder.forward(&x).mu);
        let adapted = no_grad(|| codec.generator.forward(&AdapterParams::identity(8, false).apply(&mu)));
        assert_eq!(plain.data(), adapted.data());
    }

    #[test]
    fn ambiguity_thresholds() {
        let mut rng = seeded(2);
        let codec = tiny_codec(&mut rng);
        let x = ImageSet::new(ImageShape::new(1, 32, 32), (0..3072).map(|i| (i % 3) as f32 / 2.0).collect(), None).unwrap();
        assert!(detect_ambiguity(&codec, &x, f64::INFINITY).unwrap().iter().all(|f| !f));
        assert!(detect_ambiguity(&codec, &x, 0.0).unwrap().iter().all(|f| *f));
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 0.5), 2.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 0.99), 4.0);
    }

    proptest! {
        #[test]
        fn encoded_size_is_fixed(dim in 1usize..12, seed in 0u64..100) {
            let vals = normals_f32(&mut seeded(seed), dim * dim + dim);
            let a = AdapterParams::from_matrix(dim, vals[..dim * dim].to_vec(), vals[dim * dim..].to_vec()).unwrap();
            let bytes = a.to_bytes();
            prop_assert_eq!(bytes.len(), a.encoded_len());
            prop_assert_eq!(AdapterParams::from_bytes(&bytes).unwrap(), a);
        }
    }
}
