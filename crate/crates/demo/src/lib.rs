//! WebAssembly bindings for the static page in `www/`. Every export returns a
//! JSON string; failures come back as `{"error": "..."}`.

use num_complex::Complex64;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use semcom::channel::{mmse_equalize, sample_channel, snr_to_sigma2, transmit, ChannelKind, Qam256};
use semcom::diffusion::{euler_step, heun_step, invert_gain, CsiBatch, TimeSchedule};
use semcom::rng::{normal, seeded};
use semcom::{Error, Result};

fn finish(r: Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn channel_kind(name: &str, k: f64) -> Result<ChannelKind> {
    match name {
        "awgn" => Ok(ChannelKind::Awgn),
        "rayleigh" => Ok(ChannelKind::Rayleigh),
        "rician" => ChannelKind::from_k_factor(k),
        _ => Err(Error::Param(format!("unknown channel '{name}'"))),
    }
}

fn points(c: &[Complex64]) -> Vec<[f64; 2]> {
    c.iter().map(|v| [v.re, v.im]).collect()
}

pub fn schedule_value(snr_db: f64, n: usize) -> Result<Value> {
    let s = TimeSchedule::build(n, 0.002, 2.0, 7.0)?;
    let sigma2 = snr_to_sigma2(snr_db, 1.0)?;
    let (m, t_m) = s.start_step(sigma2);
    Ok(json!({
        "sigma2": sigma2,
        "start_step": m,
        "t_m": t_m,
        "times": s.t,
        "two_step": s.subsequence(m, 2).iter().map(|&i| s.time(i)).collect::<Vec<_>>(),
    }))
}

/// Noise schedule, the start index matched to `snr_db` and the two-step subsequence.
#[wasm_bindgen]
pub fn schedule_info(snr_db: f64, n: usize) -> String {
    finish(schedule_value(snr_db, n))
}

pub fn constellation_value(kind: &str, k: f64, snr_db: f64, qam: bool, seed: u64, symbols: usize) -> Result<Value> {
    let kind = channel_kind(kind, k)?;
    let sigma2 = snr_to_sigma2(snr_db, 1.0)?;
    let mut rng = seeded(seed);
    let z: Vec<f64> = (0..2 * symbols).map(|_| normal(&mut rng)).collect();
    if qam {
        let q = Qam256::default();
        let tx = q.modulate(&z);
        let ch = sample_channel(kind, tx.len(), sigma2, &mut rng)?;
        let amp = std::f64::consts::SQRT_2;
        let sigma = sigma2.sqrt();
        let rx: Vec<Complex64> = tx
            .iter()
            .zip(&ch.h)
            .map(|(s, h)| h * s * amp + Complex64::new(sigma * normal(&mut rng), sigma * normal(&mut rng)))
            .collect();
        let eq: Vec<Complex64> = rx.iter().zip(&ch.h).map(|(y, h)| y / (h * amp)).collect();
        let z_hat = q.demodulate(&eq);
        let mse = z.iter().zip(&z_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / z.len() as f64;
        return Ok(json!({ "sent": points(&tx), "received": points(&rx), "equalized": points(&eq), "mse": mse }));
    }
    let ch = sample_channel(kind, symbols, sigma2, &mut rng)?;
    let rx = transmit(&z, &ch, &mut rng)?;
    let eq = mmse_equalize(&rx, &ch, false)?;
    let eq_c: Vec<Complex64> = (0..symbols).map(|i| Complex64::new(eq[i], eq[symbols + i])).collect();
    let sent: Vec<Complex64> = (0..symbols).map(|i| Complex64::new(z[i], z[symbols + i])).collect();
    let mse = z.iter().zip(&eq).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / z.len() as f64;
    Ok(json!({ "sent": points(&sent), "received": points(&rx), "equalized": points(&eq_c), "mse": mse }))
}

/// One block of Gaussian symbols through a fading channel, raw and MMSE-equalized
/// (or 256-QAM with zero-forcing when `qam`).
#[wasm_bindgen]
pub fn constellation(kind: &str, k: f64, snr_db: f64, qam: bool, seed: u64, symbols: usize) -> String {
    finish(constellation_value(kind, k, snr_db, qam, seed, symbols))
}

/// Four-component Gaussian mixture in the complex plane.
const CENTERS: [[f64; 2]; 4] = [[0.7, 0.7], [-0.7, 0.7], [-0.7, -0.7], [0.7, -0.7]];
const SPREAD: f64 = 0.02;

/// Exact noise prediction for the faded mixture at time `t`.
pub fn mixture_eps(z: &[f64], t: &[f64], csi: &CsiBatch) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for b in 0..z.len() / 2 {
        let (hz, hn) = (csi.h_z[2 * b], csi.h_n[2 * b]);
        let tau2 = (t[b] * hn).powi(2);
        let var = hz * hz * SPREAD + tau2;
        let x = [z[2 * b], z[2 * b + 1]];
        let logw: Vec<f64> = CENTERS
            .iter()
            .map(|c| -((x[0] - hz * c[0]).powi(2) + (x[1] - hz * c[1]).powi(2)) / (2.0 * var))
            .collect();
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let shrink = hz * hz * SPREAD / var;
        for d in 0..2 {
            let mean: f64 = CENTERS
                .iter()
                .zip(&w)
                .map(|(c, wi)| wi / total * (hz * c[d] + shrink * (x[d] - hz * c[d])))
                .sum();
            let denom = t[b] * hn;
            out[2 * b + d] = if denom > 0.0 { (x[d] - mean) / denom } else { 0.0 };
        }
    }
    out
}

pub fn toy_value(kind: &str, k: f64, snr_db: f64, solver: &str, steps: usize, seed: u64, count: usize) -> Result<Value> {
    let kind = channel_kind(kind, k)?;
    if steps == 0 {
        return Err(Error::Param("steps must be >= 1".into()));
    }
    let sigma2 = snr_to_sigma2(snr_db, 1.0)?;
    let schedule = TimeSchedule::default();
    let (m, t_m) = schedule.start_step(sigma2);
    let mut rng = seeded(seed);
    let mut clean = Vec::with_capacity(2 * count);
    let mut y = Vec::with_capacity(2 * count);
    let mut chs = Vec::with_capacity(count);
    for i in 0..count {
        let c = CENTERS[i % 4];
        // One complex symbol per sample, stored as (re, im).
        let z = [c[0] + SPREAD.sqrt() * normal(&mut rng), c[1] + SPREAD.sqrt() * normal(&mut rng)];
        let ch = sample_channel(kind, 1, sigma2, &mut rng)?;
        let rx = transmit(&z, &ch, &mut rng)?;
        y.extend(mmse_equalize(&rx, &ch, true)?);
        clean.extend(z);
        chs.push(ch);
    }
    let csi = CsiBatch::from_realizations(&chs, true);
    let mut times: Vec<f64> = schedule.subsequence(m, steps).iter().map(|&i| schedule.time(i)).collect();
    times.push(0.0);
    let mut nfe = 0u64;
    let mut z = y.clone();
    let mut path = vec![pairs(&invert_gain(&z, &csi)?)];
    for w in times.windows(2) {
        let (from, to) = (vec![w[0]; count], vec![w[1]; count]);
        z = match solver {
            "euler" => euler_step(&mixture_eps, &z, &from, &to, &csi, &mut nfe)?,
            "heun" => heun_step(&mixture_eps, &z, &from, &to, &csi, &mut nfe)?,
            _ => return Err(Error::Param(format!("unknown solver '{solver}'"))),
        };
        path.push(pairs(&invert_gain(&z, &csi)?));
    }
    let est = invert_gain(&z, &csi)?;
    let mmse: Vec<f64> = y.iter().map(|v| v / (1.0 + sigma2)).collect();
    let err = |a: &[f64]| a.iter().zip(&clean).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / clean.len() as f64;
    Ok(json!({
        "start_step": m,
        "t_m": t_m,
        "times": times,
        "nfe": nfe,
        "clean": pairs(&clean),
        "path": path,
        "mse_denoised": err(&est),
        "mse_mmse": err(&mmse),
    }))
}

fn pairs(v: &[f64]) -> Vec<[f64; 2]> {
    v.chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Denoises a toy mixture received over the channel with the exact noise
/// predictor, using `steps` Euler or Heun steps from the matched start time.
#[wasm_bindgen]
pub fn toy_denoise(kind: &str, k: f64, snr_db: f64, solver: &str, steps: usize, seed: u64, count: usize) -> String {
    finish(toy_value(kind, k, snr_db, solver, steps, seed, count))
}
