//! Learned-feature image distances: channel-normalized activations of a
//! convolutional trunk, compared layer by layer.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::codec::{CodecConfig, DiscriminatorBody};
use crate::config::PerceptualBackend;
use crate::error::{Error, Result};
use crate::metrics::{ImageShape, PerceptualDistance, SsimDistance};
use crate::nn::{no_grad, Tensor};
use crate::rng::seeded;

pub struct FeatureDistance {
    body: DiscriminatorBody,
    shape: ImageShape,
    label: String,
}

impl FeatureDistance {
    pub fn new(body: DiscriminatorBody, shape: ImageShape, label: &str) -> Self {
        FeatureDistance { body, shape, label: label.into() }
    }

    /// Loads a trunk stored as kind `perceptual` (config: a codec config,
    /// tensors under `body`).
    pub fn from_file(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("perceptual")?;
        let cfg: CodecConfig = ck.config_as()?;
        let mut body = crate::codec::Discriminator::new(&cfg, &mut seeded(0)).body;
        ck.load_module("body", &mut body)?;
        Ok(FeatureDistance::new(body, cfg.image, &format!("features:{}", path.display())))
    }

    pub fn to_checkpoint(&self, cfg: &CodecConfig) -> Result<Checkpoint> {
        Ok(Checkpoint::new("perceptual", cfg)?.add_module("body", &self.body))
    }
}

/// Unit-normalizes the channel vector at every spatial position.
fn unit_channels(f: &[f32], c: usize, hw: usize) -> Vec<f32> {
    let mut out = f.to_vec();
    for p in 0..hw {
        let n: f32 = (0..c).map(|ch| f[ch * hw + p].powi(2)).sum::<f32>().sqrt() + 1e-10;
        for ch in 0..c {
            out[ch * hw + p] /= n;
        }
    }
    out
}

impl PerceptualDistance for FeatureDistance {
    fn name(&self) -> &str {
        &self.label
    }

    fn distance(&self, a: &[f32], b: &[f32], shape: ImageShape) -> Result<f64> {
        if shape != self.shape {
            return Err(Error::shape(format!("{:?}", self.shape), format!("{shape:?}")));
        }
        if a.len() != shape.numel() || b.len() != shape.numel() {
            return Err(Error::shape(shape.numel(), a.len().min(b.len())));
        }
        let dims = [2, shape.c, shape.h, shape.w];
        let mut both = a.to_vec();
        both.extend_from_slice(b);
        let feats = no_grad(|| self.body.features(&Tensor::new(&dims, both)));
        let mut total = 0.0;
        for f in &feats {
            let s = f.shape();
            let (c, hw) = (s[1], s[2] * s[3]);
            let per = c * hw;
            let fa = unit_channels(&f.data()[..per], c, hw);
            let fb = unit_channels(&f.data()[per..2 * per], c, hw);
            total += fa.iter().zip(&fb).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / hw as f64;
        }
        Ok(total / feats.len() as f64)
    }
}

/// Resolves a configured backend. `critic` needs the bundle's critic trunk.
pub fn resolve(
    backend: &PerceptualBackend,
    critic: Option<&DiscriminatorBody>,
    shape: ImageShape,
) -> Result<Box<dyn PerceptualDistance>> {
    Ok(match backend {
        PerceptualBackend::Ssim => Box::new(SsimDistance),
        PerceptualBackend::Critic => {
            let body = critic.ok_or_else(|| Error::Config("critic distance needs a codec in the bundle".into()))?;
            Box::new(FeatureDistance::new(body.clone(), shape, "critic-features"))
        }
        PerceptualBackend::Weights { path } => Box::new(FeatureDistance::from_file(path)?),
    })
}
