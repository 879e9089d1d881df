//! Deep JSCC baseline: a convolutional autoencoder trained end to end with
//! fading, noise and MMSE equalization inside the forward pass. It reuses
//! the codec's encoder/generator shapes so the latent size matches.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelDistribution, ChannelRealization};
use crate::codec::{recon_loss, CodecConfig, Encoder, Generator};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::nn::{grad, no_grad, Adam, Module, Tensor};
use crate::rng::{normals_f32, Rng};

#[derive(Clone, Debug)]
pub struct Jscc {
    pub config: CodecConfig,
    pub encoder: Encoder,
    pub decoder: Generator,
}

impl Jscc {
    pub fn new(config: CodecConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut m = Jscc { encoder: Encoder::new(&config, rng), decoder: Generator::new(&config, rng), config };
        m.rescale_weights();
        Ok(m)
    }

    /// He-style weight scale. With the default uniform init the decoder's
    /// output barely depends on its input, and plain MSE training then sits
    /// on the mean image forever.
    fn rescale_weights(&mut self) {
        let relu = 2.0 / (1.0 + 0.2f32 * 0.2);
        for c in &mut self.encoder.convs {
            let s = c.weight.shape().to_vec();
            rescale(&mut c.weight, s[1] * s[2] * s[3] / (c.stride * c.stride), relu);
        }
        for l in [&mut self.encoder.mu, &mut self.encoder.log_std] {
            let fan = l.weight.shape()[1];
            rescale(&mut l.weight, fan, 1.0);
        }
        let fan = self.decoder.project.weight.shape()[1];
        rescale(&mut self.decoder.project.weight, fan, relu);
        let last = self.decoder.layers.len() - 1;
        for (i, l) in self.decoder.layers.iter_mut().enumerate() {
            let s = l.weight.shape().to_vec();
            rescale(&mut l.weight, s[0] * s[2] * s[3] / (l.stride * l.stride), if i < last { relu } else { 1.0 });
        }
    }

    /// Unit-power channel input `[B, 2k]`.
    pub fn encode(&self, x: &Tensor) -> Tensor {
        power_normalize(&self.encoder.forward(x).mu)
    }

    pub fn decode(&self, y: &Tensor) -> Tensor {
        self.decoder.forward(y)
    }
}

impl Module for Jscc {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(&crate::nn::layers::join(p, "encoder"), f);
        self.decoder.visit(&crate::nn::layers::join(p, "decoder"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&crate::nn::layers::join(p, "encoder"), f);
        self.decoder.visit_mut(&crate::nn::layers::join(p, "decoder"), f);
    }
}

/// Scales `w` to mean square `gain / fan`.
fn rescale(w: &mut Tensor, fan: usize, gain: f32) {
    let v = w.to_vec();
    let ms = v.iter().map(|x| x * x).sum::<f32>() / v.len().max(1) as f32;
    let k = if ms > 0.0 { (gain / fan.max(1) as f32 / ms).sqrt() } else { 1.0 };
    *w = Tensor::param(&w.shape().to_vec(), v.iter().map(|x| x * k).collect());
}

/// Scales every row to mean square 1.
pub fn power_normalize(z: &Tensor) -> Tensor {
    let p = z.square().mean_per_sample().add_scalar(1e-12).sqrt();
    let b = z.shape()[0];
    z.div(&p.reshape(&[b, 1]))
}

/// Differentiable `mmse(h z + n)` in real layout, with the noise drawn
/// from `rng` (`sigma` per real dimension).
pub fn channel_layer(z: &Tensor, chs: &[ChannelRealization], normalized: bool, rng: &mut Rng) -> Result<Tensor> {
    let (b, d) = (z.shape()[0], z.shape()[1]);
    let k = d / 2;
    if chs.len() != b || chs.iter().any(|c| c.symbols() != k) {
        return Err(Error::shape(format!("{b} channels of {k} symbols"), chs.len()));
    }
    let mut hr = Vec::with_capacity(b * k);
    let mut hi = Vec::with_capacity(b * k);
    let mut w = Vec::with_capacity(b * k);
    let mut nr = Vec::with_capacity(b * k);
    let mut ni = Vec::with_capacity(b * k);
    for c in chs {
        let s = if normalized { c.normalization() } else { 1.0 };
        let sigma = c.sigma2.sqrt() as f32;
        for h in &c.h {
            hr.push(h.re);
            hi.push(h.im);
            let den = h.norm_sqr() + c.sigma2;
            w.push(if den > 0.0 { s / den } else { 0.0 });
        }
        nr.extend(normals_f32(rng, k).into_iter().map(|v| v * sigma));
        ni.extend(normals_f32(rng, k).into_iter().map(|v| v * sigma));
    }
    let t = |v: &[f64]| Tensor::from_f64(&[b, k], v);
    let (hr, hi, w) = (t(&hr), t(&hi), t(&w));
    let (nr, ni) = (Tensor::new(&[b, k], nr), Tensor::new(&[b, k], ni));
    let zr = z.narrow(1, 0, k);
    let zi = z.narrow(1, k, k);
    let yr = hr.mul(&zr).sub(&hi.mul(&zi)).add(&nr);
    let yi = hr.mul(&zi).add(&hi.mul(&zr)).add(&ni);
    let er = hr.mul(&yr).add(&hi.mul(&yi)).mul(&w);
    let ei = hr.mul(&yi).sub(&hi.mul(&yr)).mul(&w);
    Ok(Tensor::concat(&[&er, &ei], 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JsccTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f32,
    pub log_every: usize,
    pub channels: ChannelDistribution,
}

impl Default for JsccTrainConfig {
    fn default() -> Self {
        JsccTrainConfig { iterations: 2000, batch: 32, lr: 1e-3, log_every: 50, channels: ChannelDistribution::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsccLossRecord {
    pub iteration: usize,
    /// Per-pixel squared error.
    pub mse: f64,
}

/// Squared error per image of one channel-in-the-loop forward pass, on the
/// same scale as the codec's reconstruction term.
pub fn jscc_loss(model: &Jscc, x: &Tensor, chs: &[ChannelRealization], rng: &mut Rng) -> Result<Tensor> {
    let y = channel_layer(&model.encode(x), chs, true, rng)?;
    Ok(recon_loss(&model.decode(&y), x))
}

pub fn train_deep_jscc(
    model: &mut Jscc,
    data: &ImageSet,
    cfg: &JsccTrainConfig,
    rng: &mut Rng,
    progress: &mut dyn FnMut(&JsccLossRecord),
) -> Result<Vec<JsccLossRecord>> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::Config("deep JSCC training needs data and a positive batch".into()));
    }
    let k = model.config.latent_k;
    let per = data.shape.numel() as f64;
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::new();
    let mut window = (0.0, 0usize);
    for it in 1..=cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..data.len())).collect();
        let x = data.batch(&idx);
        let chs = (0..cfg.batch).map(|_| cfg.channels.sample(k, rng)).collect::<Result<Vec<_>>>()?;
        let loss = jscc_loss(model, &x, &chs, rng)?;
        let v = loss.item() as f64;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("deep JSCC loss is {v} at iteration {it}")));
        }
        let params = model.params();
        let grads = grad(&loss, &params.iter().collect::<Vec<_>>(), false);
        opt.step(model, &grads);
        window.0 += v;
        window.1 += 1;
        if it % cfg.log_every.max(1) == 0 || it == cfg.iterations {
            let rec = JsccLossRecord { iteration: it, mse: window.0 / window.1 as f64 / per };
            progress(&rec);
            log.push(rec);
            window = (0.0, 0);
        }
    }
    Ok(log)
}

/// Decodes an already equalized channel output (real layout, `[B * 2k]`).
pub fn jscc_receive(model: &Jscc, y: &[f64]) -> Result<Tensor> {
    let d = model.config.latent_dim();
    if y.len() % d != 0 {
        return Err(Error::shape(format!("multiple of {d}"), y.len()));
    }
    Ok(no_grad(|| model.decode(&Tensor::from_f64(&[y.len() / d, d], y))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{mmse_equalize, sample_channel, transmit, ChannelKind};
    use crate::metrics::ImageShape;
    use crate::rng::seeded;

    fn tiny() -> Jscc {
        let mut cfg = CodecConfig::desk(ImageShape::new(1, 32, 32));
        cfg.enc_widths = [2, 2, 2, 2, 2, 2];
        cfg.gen_widths = [4, 2, 2, 2, 2, 2];
        cfg.latent_k = 4;
        Jscc::new(cfg, &mut seeded(1)).unwrap()
    }

    #[test]
    fn noiseless_link_reduces_to_autoencoder() {
        let m = tiny();
        let mut rng = seeded(2);
        let x = Tensor::new(&[2, 1, 32, 32], (0..2048).map(|i| (i % 7) as f32 / 7.0).collect());
        let chs: Vec<_> = (0..2).map(|_| sample_channel(ChannelKind::Awgn, 4, 0.0, &mut rng).unwrap()).collect();
        let loss = jscc_loss(&m, &x, &chs, &mut rng).unwrap().item();
        let plain = no_grad(|| m.decode(&m.encode(&x))).sub(&x).square().mean().item() * 1024.0;
        assert!((loss - plain).abs() < 1e-6 * (1.0 + plain));
    }

    #[test]
    fn fresh_decoder_responds_to_its_input() {
        // Regression: at the default uniform init the desk decoder's output
        // varied by ~1e-12 between latents and MSE training never left the mean image.
        let m = Jscc::new(CodecConfig::desk(ImageShape::new(1, 32, 32)), &mut seeded(0)).unwrap();
        let z = Tensor::new(&[2, 128], normals_f32(&mut seeded(1), 256));
        let out = no_grad(|| m.decode(&z));
        let d = out.data();
        let sse: f32 = (0..1024).map(|j| (d[j] - d[1024 + j]).powi(2)).sum();
        assert!(sse > 1e-2, "decoder output barely moves: {sse:e}");
    }

    #[test]
    fn channel_layer_matches_complex_path() {
        // Same noise draws through the complex reference and the tensor layer.
        let mut rng = seeded(3);
        let z: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let ch = sample_channel(ChannelKind::Rician { k: 1.0 }, 4, 0.3, &mut rng).unwrap();
        let reference = {
            let mut r = seeded(4);
            let nr = normals_f32(&mut r, 4);
            let ni = normals_f32(&mut r, 4);
            let s = ch.sigma2.sqrt();
            let y: Vec<_> = (0..4)
                .map(|i| {
                    ch.h[i] * num_complex::Complex64::new(z[i], z[4 + i])
                        + num_complex::Complex64::new(nr[i] as f64 * s, ni[i] as f64 * s)
                })
                .collect();
            mmse_equalize(&y, &ch, true).unwrap()
        };
        let got = channel_layer(&Tensor::from_f64(&[1, 8], &z), &[ch.clone()], true, &mut seeded(4)).unwrap();
        for (a, b) in got.to_f64().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        // And the two noise models agree in distribution on the residual power.
        let mut r = seeded(5);
        let y = transmit(&z, &ch, &mut r).unwrap();
        assert_eq!(mmse_equalize(&y, &ch, true).unwrap().len(), 8);
    }

    #[test]
    fn training_reduces_loss_and_keeps_param_count() {
        let mut m = tiny();
        let n0 = m.param_count();
        let pix: Vec<f32> = (0..8 * 1024).map(|i| ((i / 1024) % 2) as f32 * ((i % 32) as f32 / 32.0)).collect();
        let data = ImageSet::new(ImageShape::new(1, 32, 32), pix, None).unwrap();
        let cfg = JsccTrainConfig { iterations: 60, batch: 4, lr: 3e-3, log_every: 20, ..Default::default() };
        let log = train_deep_jscc(&mut m, &data, &cfg, &mut seeded(6), &mut |_| {}).unwrap();
        assert!(log.last().unwrap().mse < log[0].mse);
        assert_eq!(m.param_count(), n0);
    }
}
