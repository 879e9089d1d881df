//! End-to-end transmission chains for every compared method, sharing the
//! exact channel draws at a grid point so comparisons are paired.

use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::AdapterParams;
use crate::bundle::{self, Bundle, Slot};
use crate::channel::{mmse_equalize, sample_channel, to_complex, ChannelConfig, ChannelRealization, Qam256};
use crate::codec::{Encoder, Generator};
use crate::diffusion::{
    center_and_normalize, ddim_two_step, decode_latents, denoise_latent, invert_gain, multi_step_denoise, ConsistencyModel, CsiBatch, Denoiser,
    Solver, TimeSchedule,
};
use crate::error::{Error, Result};
use crate::jscc::Jscc;
use crate::nn::{no_grad, Tensor};
use crate::rng::{label_key, normal, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    VefLdmTeacher,
    EecdS1,
    EecdS2,
    #[serde(rename = "ddim-2step")]
    Ddim2Step,
    DeepJscc,
    NoDenoise,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::VefLdmTeacher, Method::EecdS1, Method::EecdS2, Method::Ddim2Step, Method::DeepJscc, Method::NoDenoise];

    pub fn name(&self) -> &'static str {
        match self {
            Method::VefLdmTeacher => "vef-ldm-teacher",
            Method::EecdS1 => "eecd-s1",
            Method::EecdS2 => "eecd-s2",
            Method::Ddim2Step => "ddim-2step",
            Method::DeepJscc => "deep-jscc",
            Method::NoDenoise => "no-denoise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }

    pub fn required_slots(&self) -> Vec<Slot> {
        match self {
            Method::VefLdmTeacher | Method::Ddim2Step => vec![Slot::Codec, Slot::Teacher],
            Method::EecdS1 | Method::EecdS2 => vec![Slot::Codec, Slot::Student],
            Method::DeepJscc => vec![Slot::Jscc],
            Method::NoDenoise => vec![Slot::Codec],
        }
    }

    /// Network evaluations per image at start index `m`.
    pub fn expected_nfe(&self, m: usize) -> u64 {
        match self {
            Method::VefLdmTeacher => m as u64,
            Method::EecdS1 => 1,
            Method::EecdS2 | Method::Ddim2Step => 2,
            Method::DeepJscc | Method::NoDenoise => 0,
        }
    }
}

/// Everything a receiver might need, loaded once per sweep.
#[derive(Clone, Debug)]
pub struct Models {
    pub encoder: Option<Encoder>,
    pub generator: Option<Generator>,
    pub schedule: TimeSchedule,
    pub teacher: Option<Denoiser>,
    pub student: Option<ConsistencyModel>,
    pub jscc: Option<Jscc>,
    pub adapter: Option<AdapterParams>,
}

impl Models {
    /// Loads the slots the listed methods need; the robust encoder replaces
    /// the codec encoder when present.
    pub fn from_bundle(b: &Bundle, methods: &[Method], use_adapter: bool) -> Result<Self> {
        let mut need: Vec<Slot> = methods.iter().flat_map(|m| m.required_slots()).collect();
        if use_adapter {
            need.push(Slot::Adapter);
        }
        b.require(&need)?;
        let mut m = Models {
            encoder: None,
            generator: None,
            schedule: TimeSchedule::default(),
            teacher: None,
            student: None,
            jscc: None,
            adapter: None,
        };
        if need.contains(&Slot::Codec) {
            let codec = bundle::codec_from(&b.get(Slot::Codec)?)?;
            m.encoder = Some(if b.has(Slot::RobustEncoder) {
                bundle::encoder_from(&b.get(Slot::RobustEncoder)?)?
            } else {
                codec.encoder
            });
            m.generator = Some(codec.generator);
        }
        if need.contains(&Slot::Teacher) {
            let (t, s) = bundle::teacher_from(&b.get(Slot::Teacher)?)?;
            m.teacher = Some(t);
            m.schedule = s;
        }
        if need.contains(&Slot::Student) {
            let (cm, s) = bundle::student_from(&b.get(Slot::Student)?)?;
            m.student = Some(cm);
            m.schedule = s;
        }
        if need.contains(&Slot::Jscc) {
            m.jscc = Some(bundle::jscc_from(&b.get(Slot::Jscc)?)?);
        }
        if use_adapter {
            m.adapter = Some(bundle::adapter_from(&b.get(Slot::Adapter)?)?);
        }
        Ok(m)
    }
}

/// Equalized channel output of a batch plus what the receiver knows.
#[derive(Clone, Debug)]
pub struct Link {
    pub y: Vec<f64>,
    pub csi: CsiBatch,
    pub sigma2: f64,
    /// Digest of every fading gain and noise sample the batch consumed.
    pub draws: String,
}

/// Stable key of a channel grid point.
pub fn point_key(point: &ChannelConfig) -> u64 {
    label_key(&serde_json::to_string(point).unwrap_or_default())
}

fn image_rng(point: &ChannelConfig, seed: u64, id: usize) -> crate::rng::Rng {
    stream(seed ^ point.seed, &[point_key(point), id as u64])
}

/// Sends unit-power rows of `z` (each `dim` long). Image `ids[i]` always
/// sees the same fading and noise at a given point and seed, whichever
/// method produced its latent.
pub fn send(z: &[f64], dim: usize, point: &ChannelConfig, seed: u64, ids: &[usize]) -> Result<Link> {
    if dim == 0 || dim % 2 != 0 || z.len() != dim * ids.len() {
        return Err(Error::shape(dim * ids.len(), z.len()));
    }
    let sigma2 = point.sigma2();
    let k = dim / 2;
    let mut y = Vec::with_capacity(z.len());
    let mut chs: Vec<ChannelRealization> = Vec::with_capacity(ids.len());
    let mut h = Sha256::new();
    for (row, &id) in z.chunks(dim).zip(ids) {
        let mut rng = image_rng(point, seed, id);
        if point.qam {
            // One 256-QAM symbol per real latent entry: twice the channel uses.
            let q = Qam256::default();
            let ch = sample_channel(point.kind, dim, sigma2, &mut rng)?;
            let amp = std::f64::consts::SQRT_2;
            let tx: Vec<Complex64> = q.modulate(row).into_iter().map(|s| s * amp).collect();
            let mut rx = Vec::with_capacity(dim);
            for (s, g) in tx.iter().zip(&ch.h) {
                let n = Complex64::new(ch.sigma2.sqrt() * normal(&mut rng), ch.sigma2.sqrt() * normal(&mut rng));
                hash_draw(&mut h, *g, n);
                let r = g * s + n;
                rx.push(if g.norm_sqr() > 0.0 { r / (g * amp) } else { Complex64::new(0.0, 0.0) });
            }
            y.extend(q.demodulate(&rx));
            // The digital path hands over hard decisions, so the receiver sees a clean link.
            chs.push(ChannelRealization::from_gains(point.kind, vec![Complex64::new(1.0, 0.0); k], 0.0)?);
        } else {
            let ch = sample_channel(point.kind, k, sigma2, &mut rng)?;
            let zc = to_complex(row)?;
            let mut rx = Vec::with_capacity(k);
            for (s, g) in zc.iter().zip(&ch.h) {
                let n = Complex64::new(ch.sigma2.sqrt() * normal(&mut rng), ch.sigma2.sqrt() * normal(&mut rng));
                hash_draw(&mut h, *g, n);
                rx.push(g * s + n);
            }
            y.extend(mmse_equalize(&rx, &ch, point.normalized)?);
            chs.push(ch);
        }
    }
    let csi = CsiBatch::from_realizations(&chs, point.normalized);
    let sigma2 = if point.qam { 0.0 } else { sigma2 };
    Ok(Link { y, csi, sigma2, draws: h.finalize().iter().map(|b| format!("{b:02x}")).collect() })
}

fn hash_draw(h: &mut Sha256, g: Complex64, n: Complex64) {
    for v in [g.re, g.im, n.re, n.im] {
        h.update(v.to_bits().to_le_bytes());
    }
}

/// Centered encoder means scaled to unit power per row, with the per-row factors.
pub fn encode_latents(encoder: &Encoder, x: &Tensor) -> (Vec<f64>, Vec<f64>, usize) {
    let mu = no_grad(|| encoder.forward(x).mu);
    let dim = mu.shape()[1];
    let (z, scales) = center_and_normalize(&mu.to_f64(), &encoder.latent_offset());
    (z, scales, dim)
}

#[derive(Clone, Debug)]
pub struct MethodOutput {
    pub recon: Tensor,
    /// Network evaluations each image went through.
    pub nfe: u64,
    /// Receiver wall-clock for the whole batch.
    pub elapsed_ms: f64,
    pub draws: String,
    pub start_step: usize,
}

fn missing(what: &str) -> Error {
    Error::Config(format!("model '{what}' is not loaded"))
}

/// Runs one method on a batch `x` whose images have ids `ids`.
pub fn run_method(
    method: Method,
    models: &Models,
    x: &Tensor,
    ids: &[usize],
    point: &ChannelConfig,
    seed: u64,
) -> Result<MethodOutput> {
    let (start_step, _) = models.schedule.start_step(point.sigma2());
    if method == Method::DeepJscc {
        let m = models.jscc.as_ref().ok_or_else(|| missing("jscc"))?;
        let z = no_grad(|| m.encode(x)).to_f64();
        let link = send(&z, m.config.latent_dim(), point, seed, ids)?;
        let t0 = Instant::now();
        let recon = crate::jscc::jscc_receive(m, &link.y)?;
        let elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;
        return Ok(MethodOutput { recon, nfe: 0, elapsed_ms, draws: link.draws, start_step });
    }
    let encoder = models.encoder.as_ref().ok_or_else(|| missing("encoder"))?;
    let generator = models.generator.as_ref().ok_or_else(|| missing("generator"))?;
    let (z, scales, dim) = encode_latents(encoder, x);
    let link = send(&z, dim, point, seed, ids)?;
    let t0 = Instant::now();
    let mut nfe = 0u64;
    let s2 = link.sigma2;
    let z_hat = match method {
        Method::NoDenoise => {
            // Plain MMSE estimate: undo the normalized convention's rescale.
            let s = if point.normalized && !point.qam { 1.0 + s2 } else { 1.0 };
            link.y.iter().map(|v| v / s).collect()
        }
        Method::VefLdmTeacher => {
            let t = models.teacher.as_ref().ok_or_else(|| missing("teacher"))?;
            let out = multi_step_denoise(t, &link.y, &link.csi, s2, &models.schedule, Solver::Euler, &mut nfe)?;
            invert_gain(&out, &link.csi)?
        }
        Method::Ddim2Step => {
            let t = models.teacher.as_ref().ok_or_else(|| missing("teacher"))?;
            let out = ddim_two_step(t, &link.y, &link.csi, s2, &models.schedule, &mut nfe)?;
            invert_gain(&out, &link.csi)?
        }
        Method::EecdS1 | Method::EecdS2 => {
            let cm = models.student.as_ref().ok_or_else(|| missing("student"))?;
            let s = if method == Method::EecdS1 { 1 } else { 2 };
            let mut rng = stream(seed ^ point.seed, &[point_key(point), label_key("renoise"), ids.first().copied().unwrap_or(0) as u64]);
            denoise_latent(&link.y, &link.csi, s2, cm, &models.schedule, s, &mut rng, &mut nfe)?
        }
        Method::DeepJscc => unreachable!(),
    };
    let recon = decode_latents(&z_hat, &scales, dim, &encoder.latent_offset(), models.adapter.as_ref(), generator)?;
    let elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(MethodOutput { recon, nfe, elapsed_ms, draws: link.draws, start_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelKind;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(j, format!("\"{}\"", m.name()));
        }
        assert!(Method::parse("ddpm").is_err());
    }

    #[test]
    fn paired_draws_do_not_depend_on_latent() {
        let point = ChannelConfig::new(ChannelKind::Rayleigh, 5.0);
        let a: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let la = send(&a, 8, &point, 3, &[10, 11]).unwrap();
        let lb = send(&b, 8, &point, 3, &[10, 11]).unwrap();
        assert_eq!(la.draws, lb.draws);
        assert_eq!(la.csi, lb.csi);
        let lc = send(&a, 8, &point, 4, &[10, 11]).unwrap();
        assert_ne!(la.draws, lc.draws);
        // Batching does not matter: image 11 alone sees the same channel.
        let single = send(&a[8..], 8, &point, 3, &[11]).unwrap();
        assert_eq!(single.y, la.y[8..].to_vec());
    }

    #[test]
    fn qam_point_decodes_cleanly_at_high_snr() {
        let mut point = ChannelConfig::new(ChannelKind::Awgn, 40.0);
        point.qam = true;
        let z: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let link = send(&z, 8, &point, 1, &[0]).unwrap();
        let step = Qam256::default().step();
        for (a, b) in link.y.iter().zip(&z) {
            assert!((a - b).abs() <= step);
        }
        assert_eq!(link.sigma2, 0.0);
    }
}
