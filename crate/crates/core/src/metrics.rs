//! Image quality metrics and unit conversions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{filter2d_valid, Tensor};

/// Displayed ceiling for PSNR of identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Channels, height, width of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageShape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        ImageShape { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

fn check_pair(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(())
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
}

pub fn mse_from_psnr(psnr_db: f64, max_val: f64) -> f64 {
    max_val * max_val / 10f64.powf(psnr_db / 10.0)
}

pub fn psnr(a: &[f32], b: &[f32], max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

/// `-10 log10(1 - s)`, infinite at `s = 1`.
pub fn similarity_db(s: f64) -> f64 {
    if s >= 1.0 {
        f64::INFINITY
    } else {
        -10.0 * (1.0 - s).log10()
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode Gaussian blur of one plane.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| taps[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean luminance-contrast-structure term and mean contrast-structure term of one plane pair.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, max_val: f64, taps: &[f64]) -> (f64, f64) {
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let (mu_a, _, _) = blur(a, h, w, taps);
    let (mu_b, _, _) = blur(b, h, w, taps);
    let sq = |v: &[f64], u: &[f64]| v.iter().zip(u).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (e_aa, _, _) = blur(&sq(a, a), h, w, taps);
    let (e_bb, _, _) = blur(&sq(b, b), h, w, taps);
    let (e_ab, _, _) = blur(&sq(a, b), h, w, taps);
    let n = mu_a.len() as f64;
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let va = e_aa[i] - mu_a[i] * mu_a[i];
        let vb = e_bb[i] - mu_b[i] * mu_b[i];
        let cov = e_ab[i] - mu_a[i] * mu_b[i];
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * mu_a[i] * mu_b[i] + c1) / (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1);
        s_sum += l * cs;
        cs_sum += cs;
    }
    (s_sum / n, cs_sum / n)
}

fn planes(x: &[f32], shape: ImageShape) -> Vec<Vec<f64>> {
    x.chunks(shape.h * shape.w).map(|p| p.iter().map(|&v| v as f64).collect()).collect()
}

fn check_image(a: &[f32], b: &[f32], shape: ImageShape) -> Result<()> {
    check_pair(a, b)?;
    if a.len() != shape.numel() {
        return Err(Error::shape(shape.numel(), a.len()));
    }
    if shape.h < SSIM_WINDOW || shape.w < SSIM_WINDOW {
        return Err(Error::Param(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    Ok(())
}

/// Single-scale SSIM of one image pair, averaged over channels.
pub fn ssim(a: &[f32], b: &[f32], shape: ImageShape, max_val: f64) -> Result<f64> {
    check_image(a, b, shape)?;
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (pa, pb) = (planes(a, shape), planes(b, shape));
    let total: f64 = pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, shape.h, shape.w, max_val, &taps).0).sum();
    Ok(total / shape.c as f64)
}

/// Number of dyadic scales whose coarsest image still fits the window.
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut n = 0;
    let (mut hh, mut ww) = (h, w);
    while n < MS_SSIM_WEIGHTS.len() && hh >= SSIM_WINDOW && ww >= SSIM_WINDOW {
        n += 1;
        hh /= 2;
        ww /= 2;
    }
    n
}

fn downsample(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]);
        }
    }
    out
}

/// Multi-scale SSIM. Uses up to five scales with the conventional weights,
/// dropping the coarsest ones (weights renormalized) for small images.
pub fn ms_ssim(a: &[f32], b: &[f32], shape: ImageShape, max_val: f64) -> Result<f64> {
    check_image(a, b, shape)?;
    let scales = ms_ssim_scales(shape.h, shape.w);
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for (mut x, mut y) in planes(a, shape).into_iter().zip(planes(b, shape)) {
        let (mut h, mut w) = (shape.h, shape.w);
        let mut acc = 1.0;
        for (s, wt) in weights.iter().enumerate() {
            let (full, cs) = ssim_plane(&x, &y, h, w, max_val, &taps);
            let term = if s + 1 == scales { full } else { cs };
            acc *= term.max(0.0).powf(wt / wsum);
            if s + 1 < scales {
                x = downsample(&x, h, w);
                y = downsample(&y, h, w);
                h /= 2;
                w /= 2;
            }
        }
        total += acc;
    }
    Ok(total / shape.c as f64)
}

/// Differentiable SSIM over a `[B, C, H, W]` batch; returns `[B]`.
pub fn ssim_tensor(a: &Tensor, b: &Tensor, max_val: f32) -> Tensor {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let k2: Vec<f32> = taps.iter().flat_map(|u| taps.iter().map(move |v| (u * v) as f32)).collect();
    let kernel = Tensor::new(&[SSIM_WINDOW, SSIM_WINDOW], k2);
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let mu_a = filter2d_valid(a, &kernel);
    let mu_b = filter2d_valid(b, &kernel);
    let var_a = filter2d_valid(&a.square(), &kernel).sub(&mu_a.square());
    let var_b = filter2d_valid(&b.square(), &kernel).sub(&mu_b.square());
    let cov = filter2d_valid(&a.mul(b), &kernel).sub(&mu_a.mul(&mu_b));
    let lum = mu_a.mul(&mu_b).scale(2.0).add_scalar(c1).div(&mu_a.square().add(&mu_b.square()).add_scalar(c1));
    let cs = cov.scale(2.0).add_scalar(c2).div(&var_a.add(&var_b).add_scalar(c2));
    lum.mul(&cs).mean_per_sample()
}

/// Channel bandwidth ratio: complex channel uses per source dimension.
pub fn cbr(k: usize, shape: ImageShape) -> f64 {
    k as f64 / shape.numel() as f64
}

/// Number of complex symbols closest to a target bandwidth ratio.
pub fn symbols_for_cbr(target: f64, shape: ImageShape) -> usize {
    ((target * shape.numel() as f64).round() as usize).max(1)
}

/// A distance between two images of the same shape.
pub trait PerceptualDistance: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &[f32], b: &[f32], shape: ImageShape) -> Result<f64>;
}

/// `1 - SSIM`, usable when no learned feature extractor is available.
#[derive(Clone, Copy, Debug, Default)]
pub struct SsimDistance;

impl PerceptualDistance for SsimDistance {
    fn name(&self) -> &str {
        "ssim"
    }

    fn distance(&self, a: &[f32], b: &[f32], shape: ImageShape) -> Result<f64> {
        Ok((1.0 - ssim(a, b, shape, 1.0)?).max(0.0))
    }
}

/// Per-image quality record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub ssim_db: f64,
    pub ms_ssim_db: f64,
    pub perceptual: f64,
    pub cbr: f64,
    pub nfe: u64,
    pub latency_ms: f64,
}

impl MetricReport {
    /// Quality fields for one reconstruction; accounting fields left at zero.
    pub fn compute(
        reference: &[f32],
        recon: &[f32],
        shape: ImageShape,
        perceptual: &dyn PerceptualDistance,
    ) -> Result<Self> {
        let m = mse(reference, recon)?;
        let s = ssim(reference, recon, shape, 1.0)?;
        let ms = ms_ssim(reference, recon, shape, 1.0)?;
        Ok(MetricReport {
            mse: m,
            psnr_db: psnr_from_mse(m, 1.0),
            ssim: s,
            ms_ssim: ms,
            ssim_db: capped_db(s),
            ms_ssim_db: capped_db(ms),
            perceptual: perceptual.distance(reference, recon, shape)?,
            cbr: 0.0,
            nfe: 0,
            latency_ms: 0.0,
        })
    }

    /// Field names in serialization order, for CSV headers.
    pub const FIELDS: [&'static str; 10] =
        ["mse", "psnr_db", "ssim", "ms_ssim", "ssim_db", "ms_ssim_db", "perceptual", "cbr", "nfe", "latency_ms"];

    pub fn values(&self) -> [f64; 10] {
        [
            self.mse,
            self.psnr_db,
            self.ssim,
            self.ms_ssim,
            self.ssim_db,
            self.ms_ssim_db,
            self.perceptual,
            self.cbr,
            self.nfe as f64,
            self.latency_ms,
        ]
    }
}

/// dB similarity clipped to the PSNR cap so records stay finite.
pub fn capped_db(s: f64) -> f64 {
    similarity_db(s).min(PSNR_CAP_DB)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SHAPE: ImageShape = ImageShape { c: 1, h: 32, w: 32 };

    fn pattern(seed: f32) -> Vec<f32> {
        (0..1024).map(|i| (((i as f32) * 0.13 + seed).sin() * 0.5 + 0.5).clamp(0.0, 1.0)).collect()
    }

    #[test]
    fn psnr_examples() {
        let x = pattern(0.0);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        let zeros = vec![0.0; 1024];
        let ones = vec![1.0; 1024];
        assert_eq!(mse(&zeros, &ones).unwrap(), 1.0);
        assert_eq!(psnr(&zeros, &ones, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn ssim_examples() {
        let x = pattern(0.3);
        assert!((ssim(&x, &x, SHAPE, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let binary: Vec<f32> = (0..1024).map(|i| ((i / 3 + i / 32) % 2) as f32).collect();
        let neg: Vec<f32> = binary.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&binary, &neg, SHAPE, 1.0).unwrap() < 0.1);
        let c1 = vec![0.3; 1024];
        assert!((ssim(&c1, &c1, SHAPE, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((ms_ssim(&c1, &c1, SHAPE, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        // independent evaluation: explicit 2-D window, no separability
        let (a, b) = (pattern(0.1), pattern(1.7));
        let taps = gaussian_taps(11, 1.5);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for y in 0..22 {
            for x in 0..22 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = taps[i] * taps[j];
                        let (p, q) = (a[(y + i) * 32 + x + j] as f64, b[(y + i) * 32 + x + j] as f64);
                        ma += wgt * p;
                        mb += wgt * q;
                        saa += wgt * p * p;
                        sbb += wgt * q * q;
                        sab += wgt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        let expect = total / 484.0;
        assert!((ssim(&a, &b, SHAPE, 1.0).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn tensor_ssim_matches_reference() {
        let (a, b) = (pattern(0.1), pattern(0.9));
        let ta = Tensor::new(&[1, 1, 32, 32], a.clone());
        let tb = Tensor::new(&[1, 1, 32, 32], b.clone());
        let got = ssim_tensor(&ta, &tb, 1.0).item() as f64;
        assert!((got - ssim(&a, &b, SHAPE, 1.0).unwrap()).abs() < 1e-4);
    }

    #[test]
    fn ms_ssim_scale_count() {
        assert_eq!(ms_ssim_scales(32, 32), 2);
        assert_eq!(ms_ssim_scales(176, 176), 5);
        assert_eq!(ms_ssim_scales(10, 10), 0);
    }

    #[test]
    fn cbr_examples() {
        assert_eq!(cbr(64, ImageShape::new(1, 32, 32)), 1.0 / 16.0);
        assert_eq!(cbr(1024, ImageShape::new(1, 32, 32)), 1.0);
        assert!((cbr(2212, ImageShape::new(3, 192, 192)) - 0.02).abs() < 1e-4);
        assert_eq!(symbols_for_cbr(1.0 / 16.0, ImageShape::new(1, 32, 32)), 64);
    }

    #[test]
    fn report_round_trips_json() {
        let (a, b) = (pattern(0.0), pattern(0.2));
        let r = MetricReport::compute(&a, &b, SHAPE, &SsimDistance).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&s).unwrap(), r);
        assert!((r.psnr_db - 10.0 * (1.0 / r.mse).log10()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn psnr_mse_round_trip(m in 1e-8f64..10.0) {
            prop_assert!((mse_from_psnr(psnr_from_mse(m, 1.0), 1.0) - m).abs() <= 1e-9 * m.max(1.0));
        }

        #[test]
        fn similarity_db_monotone(a in -1.0f64..0.999, b in -1.0f64..0.999) {
            prop_assume!(a < b);
            prop_assert!(similarity_db(a) < similarity_db(b));
        }

        #[test]
        fn ms_ssim_symmetric(s1 in 0.0f32..6.0, s2 in 0.0f32..6.0) {
            let (a, b) = (pattern(s1), pattern(s2));
            let ab = ms_ssim(&a, &b, SHAPE, 1.0).unwrap();
            let ba = ms_ssim(&b, &a, SHAPE, 1.0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn ssim_distance_nonnegative(s1 in 0.0f32..6.0, s2 in 0.0f32..6.0) {
            let d = SsimDistance.distance(&pattern(s1), &pattern(s2), SHAPE).unwrap();
            prop_assert!(d >= 0.0);
        }
    }
}
