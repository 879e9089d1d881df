//! Evaluation sweeps over (channel point, method, seed) and their records.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::config::ExperimentConfig;
use crate::data::{DatasetSource, ImageSet};
use crate::error::{Error, Result};
use crate::metrics::{cbr, MetricReport, PerceptualDistance};
use crate::pipeline::{run_method, Method, Models};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub dataset: String,
    pub method: Method,
    pub channel: ChannelConfig,
    pub seed: u64,
    pub cbr: f64,
    /// Schedule index matched to the channel noise.
    pub start_step: usize,
    /// Network evaluations per image.
    pub nfe: u64,
    /// Receiver wall-clock summed over batches.
    pub wall_ms: f64,
    /// Digest of the channel draws, identical for every method at a point.
    pub draws: String,
    pub per_image: Vec<MetricReport>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

/// Mean and population standard deviation of every metric field.
pub fn aggregate(per_image: &[MetricReport]) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
    let n = per_image.len().max(1) as f64;
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for (i, name) in MetricReport::FIELDS.iter().enumerate() {
        let vals: Vec<f64> = per_image.iter().map(|r| r.values()[i]).collect();
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        mean.insert(name.to_string(), m);
        std.insert(name.to_string(), v.sqrt());
    }
    (mean, std)
}

pub fn dataset_label(source: &DatasetSource) -> String {
    match source {
        DatasetSource::Mnist => "mnist".into(),
        DatasetSource::Fmnist => "fmnist".into(),
        DatasetSource::Folder { path } => {
            format!("folder:{}", path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        }
    }
}

/// Bandwidth ratio of the loaded models, if any latent model is present.
pub fn models_cbr(models: &Models, test: &ImageSet) -> Option<f64> {
    let k = if let Some(e) = &models.encoder {
        e.mu.out_features() / 2
    } else {
        models.jscc.as_ref()?.config.latent_k
    };
    Some(cbr(k, test.shape))
}

struct Task {
    point: ChannelConfig,
    method: Method,
    seed: u64,
}

fn run_task(cfg: &ExperimentConfig, hash: &str, models: &Models, test: &ImageSet, perceptual: &dyn PerceptualDistance, t: &Task) -> Result<RunRecord> {
    let n = cfg.test_images.min(test.len());
    let ids: Vec<usize> = (0..n).collect();
    let mut per_image = Vec::with_capacity(n);
    let mut wall_ms = 0.0;
    let mut nfe = None;
    let mut start_step = 0;
    let mut digest = Sha256::new();
    let ratio = models_cbr(models, test).unwrap_or(cfg.cbr);
    for chunk in ids.chunks(cfg.batch) {
        let x = test.batch(chunk);
        let out = run_method(t.method, models, &x, chunk, &t.point, t.seed)?;
        if *nfe.get_or_insert(out.nfe) != out.nfe {
            return Err(Error::Numerical("evaluation count changed between batches".into()));
        }
        wall_ms += out.elapsed_ms;
        start_step = out.start_step;
        digest.update(out.draws.as_bytes());
        let per_ms = out.elapsed_ms / chunk.len() as f64;
        let numel = test.shape.numel();
        for (j, &id) in chunk.iter().enumerate() {
            let mut r = MetricReport::compute(test.image(id), &out.recon.data()[j * numel..(j + 1) * numel], test.shape, perceptual)?;
            r.cbr = ratio;
            r.nfe = out.nfe;
            r.latency_ms = per_ms;
            per_image.push(r);
        }
    }
    let (mean, std) = aggregate(&per_image);
    Ok(RunRecord {
        config_hash: hash.into(),
        dataset: dataset_label(&cfg.dataset.source),
        method: t.method,
        channel: t.point.clone(),
        seed: t.seed,
        cbr: ratio,
        start_step,
        nfe: nfe.unwrap_or(0),
        wall_ms,
        draws: digest.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        per_image,
        mean,
        std,
    })
}

/// Runs every (channel point, method, seed) triple. Records come back in
/// grid order regardless of how the work was scheduled.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    models: &Models,
    test: &ImageSet,
    perceptual: &dyn PerceptualDistance,
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    if let Some(ratio) = models_cbr(models, test) {
        if (ratio - cfg.cbr).abs() > 0.5 / test.shape.numel() as f64 {
            return Err(Error::Config(format!("configured cbr {} but the bundle transmits at {ratio}", cfg.cbr)));
        }
    }
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let hash = cfg.hash()?;
    let mut tasks = Vec::new();
    for point in &cfg.channels {
        for &method in &cfg.methods {
            for &seed in &cfg.seeds {
                tasks.push(Task { point: point.clone(), method, seed });
            }
        }
    }
    let run = |t: &Task| run_task(cfg, &hash, models, test, perceptual, t);
    #[cfg(feature = "parallel")]
    let out: Vec<Result<RunRecord>> = {
        use rayon::prelude::*;
        tasks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let out: Vec<Result<RunRecord>> = tasks.iter().map(run).collect();
    out.into_iter().collect()
}

pub fn write_jsonl(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RunRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(psnr: f64) -> MetricReport {
        MetricReport {
            mse: 0.0,
            psnr_db: psnr,
            ssim: 0.0,
            ms_ssim: 0.0,
            ssim_db: 0.0,
            ms_ssim_db: 0.0,
            perceptual: 0.0,
            cbr: 0.0625,
            nfe: 2,
            latency_ms: 1.0,
        }
    }

    #[test]
    fn aggregates_recompute_from_per_image() {
        let per = vec![report(10.0), report(14.0), report(12.0)];
        let (m, s) = aggregate(&per);
        assert_eq!(m["psnr_db"], 12.0);
        assert!((s["psnr_db"] - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(m["nfe"], 2.0);
        assert_eq!(s["cbr"], 0.0);
    }
}
