//! Wireless link simulation: Rician block fading, complex transmission,
//! per-symbol MMSE equalization, the diagonal CSI matrices seen by the
//! denoiser, and an optional 256-QAM digital path.
//!
//! Conventions used throughout the crate:
//! * `z_R` is a real vector of length `2k`; complex symbol `i` is
//!   `z_R[i] + j z_R[k + i]`.
//! * `sigma2` is the noise variance per real dimension, so the complex noise
//!   is `CN(0, 2 sigma2)`. With `z_R` at unit power per real element the SNR
//!   is `1 / sigma2` whether counted per real dimension or per complex symbol.
//! * After MMSE equalization each real coordinate is `H_z z_R + H_n sigma eps`
//!   with `eps ~ N(0, 1)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normal;

/// Fading family, parameterized by the Rician power ratio `K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChannelKind {
    /// `K = inf`: unit gain, noise only.
    Awgn,
    /// `K = 0`.
    Rayleigh,
    Rician {
        #[serde(rename = "K")]
        k: f64,
    },
}

impl ChannelKind {
    /// Maps a power ratio onto the matching family.
    pub fn from_k_factor(k: f64) -> Result<Self> {
        if k.is_nan() || k < 0.0 {
            return Err(Error::Param(format!("Rician K must be >= 0, got {k}")));
        }
        Ok(if k.is_infinite() {
            ChannelKind::Awgn
        } else if k == 0.0 {
            ChannelKind::Rayleigh
        } else {
            ChannelKind::Rician { k }
        })
    }

    pub fn k_factor(&self) -> f64 {
        match self {
            ChannelKind::Awgn => f64::INFINITY,
            ChannelKind::Rayleigh => 0.0,
            ChannelKind::Rician { k } => *k,
        }
    }

    pub fn label(&self) -> String {
        match self {
            ChannelKind::Awgn => "awgn".into(),
            ChannelKind::Rayleigh => "rayleigh".into(),
            ChannelKind::Rician { k } => format!("rician-k{k}"),
        }
    }

    fn validate(&self) -> Result<()> {
        if let ChannelKind::Rician { k } = self {
            if !(k.is_finite() && *k >= 0.0) {
                return Err(Error::Param(format!("Rician K must be finite and >= 0, got {k}")));
            }
        }
        Ok(())
    }
}

/// One block-fading channel draw plus the CSI derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub kind: ChannelKind,
    pub h: Vec<Complex64>,
    pub sigma2: f64,
    /// Diagonal of `H_z`, length `2k`.
    pub h_z: Vec<f64>,
    /// Diagonal of `H_n`, length `2k`.
    pub h_n: Vec<f64>,
}

/// Channel state handed to the receiver-side denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct Csi {
    pub h_z: Vec<f64>,
    pub h_n: Vec<f64>,
    /// Noise standard deviation per real dimension.
    pub sigma: f64,
}

impl ChannelRealization {
    /// Builds the realization for given gains; `H_z`, `H_n` follow from `h` and `sigma2`.
    pub fn from_gains(kind: ChannelKind, h: Vec<Complex64>, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::Param(format!("noise variance must be >= 0, got {sigma2}")));
        }
        let k = h.len();
        let mut h_z = vec![0.0; 2 * k];
        let mut h_n = vec![0.0; 2 * k];
        for (i, hi) in h.iter().enumerate() {
            let p = hi.norm_sqr();
            let den = p + sigma2;
            let (hz, hn) = if den > 0.0 { (p / den, hi.norm() / den) } else { (0.0, 0.0) };
            h_z[i] = hz;
            h_z[k + i] = hz;
            h_n[i] = hn;
            h_n[k + i] = hn;
        }
        Ok(ChannelRealization { kind, h, sigma2, h_z, h_n })
    }

    pub fn symbols(&self) -> usize {
        self.h.len()
    }

    /// Rescale factor of the normalized convention: `1 + sigma2`, which makes
    /// the AWGN CSI matrices exactly the identity.
    pub fn normalization(&self) -> f64 {
        1.0 + self.sigma2
    }

    /// CSI in the chosen convention.
    pub fn csi(&self, normalized: bool) -> Csi {
        let s = if normalized { self.normalization() } else { 1.0 };
        Csi {
            h_z: self.h_z.iter().map(|v| v * s).collect(),
            h_n: self.h_n.iter().map(|v| v * s).collect(),
            sigma: self.sigma2.sqrt(),
        }
    }
}

/// Draws `k` i.i.d. fading gains `sqrt(K/(K+1)) + sqrt(1/(K+1)) h_rayleigh`.
pub fn sample_channel(
    kind: ChannelKind,
    k: usize,
    sigma2: f64,
    rng: &mut impl rand::Rng,
) -> Result<ChannelRealization> {
    if k == 0 {
        return Err(Error::Param("channel needs at least one symbol".into()));
    }
    if sigma2.is_nan() || sigma2 < 0.0 {
        return Err(Error::Param(format!("noise variance must be >= 0, got {sigma2}")));
    }
    kind.validate()?;
    let h = match kind {
        ChannelKind::Awgn => vec![Complex64::new(1.0, 0.0); k],
        _ => {
            let kf = kind.k_factor();
            let los = (kf / (kf + 1.0)).sqrt();
            let scatter = (1.0 / (kf + 1.0)).sqrt();
            (0..k)
                .map(|_| {
                    // CN(0, 1): each quadrature has variance 1/2.
                    let re = normal(rng) * std::f64::consts::FRAC_1_SQRT_2;
                    let im = normal(rng) * std::f64::consts::FRAC_1_SQRT_2;
                    Complex64::new(los + scatter * re, scatter * im)
                })
                .collect()
        }
    };
    ChannelRealization::from_gains(kind, h, sigma2)
}

pub fn to_complex(z_r: &[f64]) -> Result<Vec<Complex64>> {
    if z_r.len() % 2 != 0 {
        return Err(Error::shape("even-length real vector", z_r.len()));
    }
    let k = z_r.len() / 2;
    Ok((0..k).map(|i| Complex64::new(z_r[i], z_r[k + i])).collect())
}

pub fn to_real(z_c: &[Complex64]) -> Vec<f64> {
    let mut out: Vec<f64> = z_c.iter().map(|c| c.re).collect();
    out.extend(z_c.iter().map(|c| c.im));
    out
}

/// `y_c = h * z_c + n`, `n` with variance `sigma2` per real dimension.
pub fn transmit(
    z_r: &[f64],
    ch: &ChannelRealization,
    rng: &mut impl rand::Rng,
) -> Result<Vec<Complex64>> {
    if z_r.len() != 2 * ch.symbols() {
        return Err(Error::shape(2 * ch.symbols(), z_r.len()));
    }
    let sigma = ch.sigma2.sqrt();
    let z_c = to_complex(z_r)?;
    Ok(z_c
        .iter()
        .zip(&ch.h)
        .map(|(z, h)| h * z + Complex64::new(sigma * normal(rng), sigma * normal(rng)))
        .collect())
}

/// Per-symbol MMSE estimate `h* y / (|h|^2 + sigma2)` in real layout.
///
/// With `normalized` the output is rescaled by `1 + sigma2`, matching
/// [`ChannelRealization::csi`] with the same flag.
pub fn mmse_equalize(y_c: &[Complex64], ch: &ChannelRealization, normalized: bool) -> Result<Vec<f64>> {
    if y_c.len() != ch.symbols() {
        return Err(Error::shape(ch.symbols(), y_c.len()));
    }
    let s = if normalized { ch.normalization() } else { 1.0 };
    let eq: Vec<Complex64> = y_c
        .iter()
        .zip(&ch.h)
        .map(|(y, h)| {
            let den = h.norm_sqr() + ch.sigma2;
            if den > 0.0 {
                h.conj() * y * (s / den)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    Ok(to_real(&eq))
}

/// Noise variance per real dimension giving `snr_db` against `signal_power`.
pub fn snr_to_sigma2(snr_db: f64, signal_power: f64) -> Result<f64> {
    if !(signal_power > 0.0) {
        return Err(Error::Param(format!("signal power must be > 0, got {signal_power}")));
    }
    Ok(signal_power / 10f64.powf(snr_db / 10.0))
}

/// Scales `z` to unit mean power per real element; returns the scale used.
pub fn normalize_power(z: &[f64]) -> (Vec<f64>, f64) {
    let p = z.iter().map(|v| v * v).sum::<f64>() / z.len().max(1) as f64;
    let scale = if p > 0.0 { p.sqrt() } else { 1.0 };
    (z.iter().map(|v| v / scale).collect(), scale)
}

pub fn denormalize_power(z: &[f64], scale: f64) -> Vec<f64> {
    z.iter().map(|v| v * scale).collect()
}

/// Declarative channel block of an experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    #[serde(flatten)]
    pub kind: ChannelKind,
    pub snr_db: f64,
    #[serde(default)]
    pub qam: bool,
    #[serde(default = "default_true")]
    pub normalized: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl ChannelConfig {
    pub fn new(kind: ChannelKind, snr_db: f64) -> Self {
        ChannelConfig { kind, snr_db, qam: false, normalized: true, seed: 0 }
    }

    pub fn sigma2(&self) -> f64 {
        snr_to_sigma2(self.snr_db, 1.0).expect("unit power is positive")
    }
}

/// Distribution of channel conditions used while training denoisers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelDistribution {
    pub kinds: Vec<ChannelKind>,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
}

impl Default for ChannelDistribution {
    fn default() -> Self {
        ChannelDistribution {
            kinds: vec![
                ChannelKind::Awgn,
                ChannelKind::Rayleigh,
                ChannelKind::Rician { k: 1.0 },
                ChannelKind::Rician { k: 2.0 },
            ],
            snr_db_min: 0.0,
            snr_db_max: 20.0,
        }
    }
}

impl ChannelDistribution {
    /// Uniform kind, uniform SNR in dB, fresh fading gains.
    pub fn sample(&self, k: usize, rng: &mut impl rand::Rng) -> Result<ChannelRealization> {
        if self.kinds.is_empty() || !(self.snr_db_min <= self.snr_db_max) {
            return Err(Error::Config("channel distribution needs kinds and an SNR range".into()));
        }
        let kind = self.kinds[rng.random_range(0..self.kinds.len())];
        let snr = if self.snr_db_max > self.snr_db_min {
            rng.random_range(self.snr_db_min..self.snr_db_max)
        } else {
            self.snr_db_min
        };
        sample_channel(kind, k, snr_to_sigma2(snr, 1.0)?, rng)
    }
}

/// Gray-mapped square 256-QAM with unit average symbol energy, carrying one
/// 8-bit quantized real value per symbol.
#[derive(Clone, Debug)]
pub struct Qam256 {
    pub clip: f64,
}

impl Default for Qam256 {
    fn default() -> Self {
        Qam256 { clip: 4.0 }
    }
}

const QAM_SIDE: usize = 16;
/// Mean energy of the unscaled odd-integer grid {-15..15}^2: 2 * 680 / 8.
const QAM_RAW_ENERGY: f64 = 170.0;

fn gray_to_level(g: u8) -> u8 {
    let mut b = g;
    let mut shift = g >> 1;
    while shift != 0 {
        b ^= shift;
        shift >>= 1;
    }
    b
}

fn level_to_gray(l: u8) -> u8 {
    l ^ (l >> 1)
}

impl Qam256 {
    pub fn step(&self) -> f64 {
        2.0 * self.clip / 255.0
    }

    pub fn quantize(&self, v: f64) -> u8 {
        let c = v.clamp(-self.clip, self.clip);
        ((c + self.clip) / self.step()).round().clamp(0.0, 255.0) as u8
    }

    pub fn dequantize(&self, q: u8) -> f64 {
        q as f64 * self.step() - self.clip
    }

    fn amplitude(level: u8) -> f64 {
        (2.0 * level as f64 - (QAM_SIDE as f64 - 1.0)) / QAM_RAW_ENERGY.sqrt()
    }

    pub fn map_byte(byte: u8) -> Complex64 {
        let i = gray_to_level(byte >> 4);
        let q = gray_to_level(byte & 0x0f);
        Complex64::new(Self::amplitude(i), Self::amplitude(q))
    }

    fn nearest_level(a: f64) -> u8 {
        let l = ((a * QAM_RAW_ENERGY.sqrt() + (QAM_SIDE as f64 - 1.0)) / 2.0).round();
        l.clamp(0.0, QAM_SIDE as f64 - 1.0) as u8
    }

    pub fn demap(symbol: Complex64) -> u8 {
        let i = level_to_gray(Self::nearest_level(symbol.re));
        let q = level_to_gray(Self::nearest_level(symbol.im));
        (i << 4) | q
    }

    pub fn constellation() -> Vec<Complex64> {
        (0..=255u8).map(Self::map_byte).collect()
    }

    pub fn modulate(&self, z_r: &[f64]) -> Vec<Complex64> {
        z_r.iter().map(|&v| Self::map_byte(self.quantize(v))).collect()
    }

    pub fn demodulate(&self, symbols: &[Complex64]) -> Vec<f64> {
        symbols.iter().map(|&s| self.dequantize(Self::demap(s))).collect()
    }

    /// Modulate, pass through the fading channel, zero-force and demodulate.
    pub fn transmit(
        &self,
        z_r: &[f64],
        ch: &ChannelRealization,
        rng: &mut impl rand::Rng,
    ) -> Result<Vec<f64>> {
        let syms = self.modulate(z_r);
        if syms.len() > ch.symbols() {
            return Err(Error::shape(format!("<= {} symbols", ch.symbols()), syms.len()));
        }
        // Symbol energy is 1 while the analog path carries 2 per complex use; scale to match.
        let amp = std::f64::consts::SQRT_2;
        let sigma = ch.sigma2.sqrt();
        let rx: Vec<Complex64> = syms
            .iter()
            .zip(&ch.h)
            .map(|(s, h)| {
                let y = h * s * amp + Complex64::new(sigma * normal(rng), sigma * normal(rng));
                if h.norm_sqr() > 0.0 {
                    y / (h * amp)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        Ok(self.demodulate(&rx))
    }
}
