//! Worst-case semantic errors by projected gradient descent, and encoder
//! fine-tuning against them with the generator held fixed.

use serde::{Deserialize, Serialize};

use crate::codec::{sample_indices, Codec, Encoder, Generator};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::nn::{grad, no_grad, Adam, Module, Tensor};
use crate::rng::{normal, Rng};

/// Norm used to measure a perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl Norm {
    pub fn of(&self, v: &[f32]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs() as f64).sum(),
            Norm::L2 => v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0f64, |m, x| m.max(x.abs() as f64)),
        }
    }

    /// A subgradient of the norm at `v`.
    fn subgradient(&self, v: &[f32]) -> Vec<f32> {
        match self {
            Norm::L1 => v.iter().map(|x| if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 }).collect(),
            Norm::L2 => {
                let n = self.of(v);
                if n == 0.0 {
                    vec![0.0; v.len()]
                } else {
                    v.iter().map(|x| (*x as f64 / n) as f32).collect()
                }
            }
            Norm::Linf => {
                let mut g = vec![0.0; v.len()];
                if let Some((i, x)) = v.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())) {
                    if *x != 0.0 {
                        g[i] = x.signum();
                    }
                }
                g
            }
        }
    }

    /// Euclidean projection onto `{ ||v|| <= r }`, shrunk by a hair so a
    /// second projection is the identity.
    fn project_ball(&self, v: &mut [f32], r: f64) {
        const SHRINK: f64 = 1.0 - 1e-6;
        match self {
            Norm::L2 => {
                let n = self.of(v);
                if n > r {
                    let s = (r / n * SHRINK) as f32;
                    v.iter_mut().for_each(|x| *x *= s);
                }
            }
            Norm::Linf => v.iter_mut().for_each(|x| *x = x.clamp(-r as f32, r as f32)),
            Norm::L1 => {
                if self.of(v) <= r {
                    return;
                }
                // soft-threshold at the level that lands on the simplex boundary
                let mut mags: Vec<f64> = v.iter().map(|x| x.abs() as f64).collect();
                mags.sort_by(|a, b| b.total_cmp(a));
                let (mut cum, mut theta) = (0.0, 0.0);
                for (j, m) in mags.iter().enumerate() {
                    cum += m;
                    let t = (cum - r * SHRINK) / (j + 1) as f64;
                    if *m > t {
                        theta = t;
                    }
                }
                v.iter_mut().for_each(|x| *x = x.signum() * ((x.abs() as f64 - theta).max(0.0) as f32));
            }
        }
    }
}

/// Perturbation budget and descent settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticErrorSpec {
    pub p: Norm,
    /// Budget as `||delta||_p / H`.
    pub level: f64,
    pub lambda: f64,
    pub eta1: f64,
    pub max_iters: usize,
    pub lower: f32,
    pub upper: f32,
    /// Weight of the `||E(x + delta).mu||^2 / 2k` latent prior penalty.
    pub prior_weight: f64,
    #[serde(default)]
    pub init: PgdInit,
    /// Documented weighting of the joint-distribution term; not used by the loss.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

/// Starting point of the descent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PgdInit {
    Zero,
    /// A random direction scaled to the full budget. `delta = 0` is a
    /// stationary point of the objective, so this is the useful default.
    #[default]
    Random,
}

impl Default for SemanticErrorSpec {
    fn default() -> Self {
        SemanticErrorSpec {
            p: Norm::L2,
            level: 0.3,
            lambda: 1.0,
            eta1: 0.01,
            max_iters: 50,
            lower: 0.0,
            upper: 1.0,
            prior_weight: 0.1,
            init: PgdInit::Random,
            beta: 1.0,
        }
    }
}

impl SemanticErrorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lower <= self.upper) {
            return Err(Error::Param("pixel bounds need lower <= upper".into()));
        }
        if !(self.level > 0.0) {
            return Err(Error::Param(format!("error level must be > 0, got {}", self.level)));
        }
        if self.eta1 < 0.0 || self.lambda < 0.0 {
            return Err(Error::Param("step size and penalty must be >= 0".into()));
        }
        Ok(())
    }

    pub fn radius(&self, height: usize) -> f64 {
        self.level * height as f64
    }

    /// `P_C`: the norm ball intersected with the box `[L - x, U - x]`.
    pub fn project(&self, delta: &mut [f32], x: &[f32], height: usize) {
        self.p.project_ball(delta, self.radius(height));
        for (d, xi) in delta.iter_mut().zip(x) {
            *d = d.clamp(self.lower - xi, self.upper - xi);
        }
    }
}

/// Differentiable `x -> (reconstruction, latent mean)`.
pub trait Reconstructor {
    fn forward(&self, x: &Tensor) -> (Tensor, Tensor);
}

/// `G(E(x).mu)` with both networks frozen.
pub struct FrozenPipeline {
    pub encoder: Encoder,
    pub generator: Generator,
}

impl FrozenPipeline {
    pub fn new(encoder: &Encoder, generator: &Generator) -> Self {
        FrozenPipeline { encoder: encoder.frozen(), generator: generator.frozen() }
    }

    pub fn from_codec(codec: &Codec) -> Self {
        Self::new(&codec.encoder, &codec.generator)
    }
}

impl Reconstructor for FrozenPipeline {
    fn forward(&self, x: &Tensor) -> (Tensor, Tensor) {
        let mu = self.encoder.forward(x).mu;
        (self.generator.forward(&mu), mu)
    }
}

/// Result of one descent over a batch.
#[derive(Clone, Debug)]
pub struct PgdResult {
    pub delta: Tensor,
    /// Final objective per image.
    pub objective: Vec<f64>,
    /// `d(G(E(x)), G(E(x + delta)))` per image.
    pub distance: Vec<f64>,
    /// Accepted objective values per iteration (row per iteration).
    pub history: Vec<Vec<f64>>,
}

struct Eval {
    objective: Vec<f64>,
    distance: Vec<f64>,
}

fn per_image(t: &Tensor) -> Vec<f64> {
    t.to_f64()
}

/// Evaluates `e(delta)` per image (no gradients).
fn evaluate(model: &dyn Reconstructor, x: &Tensor, clean: &Tensor, delta: &[f32], spec: &SemanticErrorSpec) -> Eval {
    no_grad(|| {
        let b = x.shape()[0];
        let d_t = Tensor::new(x.shape(), delta.to_vec());
        let (rec, mu) = model.forward(&x.add(&d_t));
        let dist = per_image(&rec.sub(clean).square().sum_per_sample());
        let pen = per_image(&mu.square().mean_per_sample());
        let per = delta.len() / b;
        let objective = (0..b)
            .map(|i| spec.lambda * spec.p.of(&delta[i * per..(i + 1) * per]) - dist[i] + spec.prior_weight * pen[i])
            .collect();
        Eval { objective, distance: dist }
    })
}

/// Projected gradient descent on `e(delta) = lambda ||delta||_p - d + prior penalty`
/// for every image of the batch independently, with a per-image backtracking
/// step: a step is accepted only if it does not increase `e`, the step grows
/// after acceptance and halves on rejection.
pub fn find_semantic_error(model: &dyn Reconstructor, x: &Tensor, spec: &SemanticErrorSpec, rng: &mut Rng) -> Result<PgdResult> {
    spec.validate()?;
    if x.dims() != 4 {
        return Err(Error::shape("[B, C, H, W]", format!("{:?}", x.shape())));
    }
    let (b, h) = (x.shape()[0], x.shape()[2]);
    let per = x.numel() / b;
    let xs = x.data();
    let clean = no_grad(|| model.forward(x).0);

    let mut delta = vec![0.0f32; x.numel()];
    if spec.init == PgdInit::Random {
        for i in 0..b {
            let d = &mut delta[i * per..(i + 1) * per];
            d.iter_mut().for_each(|v| *v = normal(rng) as f32);
            let n = spec.p.of(d);
            let s = if n > 0.0 { (spec.radius(h) / n) as f32 } else { 0.0 };
            d.iter_mut().for_each(|v| *v *= s);
        }
    }
    for i in 0..b {
        spec.project(&mut delta[i * per..(i + 1) * per], &xs[i * per..(i + 1) * per], h);
    }
    let mut cur = evaluate(model, x, &clean, &delta, spec);
    let mut history = vec![cur.objective.clone()];
    let mut step = vec![spec.eta1; b];
    const MAX_BACKTRACK: usize = 12;
    const GROW: f64 = 2.0;

    for it in 0..spec.max_iters {
        if spec.eta1 == 0.0 {
            break;
        }
        let d_t = Tensor::param(x.shape(), delta.clone());
        let (rec, mu) = model.forward(&x.add(&d_t));
        let smooth = mu
            .square()
            .mean_per_sample()
            .sum()
            .scale(spec.prior_weight as f32)
            .sub(&rec.sub(&clean.detach()).square().sum());
        let g = grad(&smooth, &[&d_t], false).remove(0);
        if !g.all_finite() {
            let norms: Vec<f64> = (0..b).map(|i| spec.p.of(&delta[i * per..(i + 1) * per])).collect();
            return Err(Error::Numerical(format!("non-finite PGD gradient at iteration {it}; |delta| per image {norms:?}")));
        }
        let mut gv = g.to_vec();
        for i in 0..b {
            let sub = spec.p.subgradient(&delta[i * per..(i + 1) * per]);
            for (gj, sj) in gv[i * per..(i + 1) * per].iter_mut().zip(sub) {
                *gj += spec.lambda as f32 * sj;
            }
        }
        let mut pending: Vec<bool> = vec![true; b];
        let mut next = delta.clone();
        for _ in 0..MAX_BACKTRACK {
            if !pending.iter().any(|p| *p) {
                break;
            }
            let mut cand = delta.clone();
            for i in (0..b).filter(|&i| pending[i]) {
                let r = i * per..(i + 1) * per;
                for j in r.clone() {
                    cand[j] -= (step[i] as f32) * gv[j];
                }
                spec.project(&mut cand[r.clone()], &xs[r], h);
            }
            let ev = evaluate(model, x, &clean, &cand, spec);
            for i in 0..b {
                if !pending[i] {
                    continue;
                }
                if ev.objective[i] <= cur.objective[i] + 1e-8 {
                    next[i * per..(i + 1) * per].copy_from_slice(&cand[i * per..(i + 1) * per]);
                    cur.objective[i] = ev.objective[i];
                    cur.distance[i] = ev.distance[i];
                    pending[i] = false;
                    step[i] *= GROW;
                } else {
                    step[i] *= 0.5;
                }
            }
        }
        delta = next;
        history.push(cur.objective.clone());
    }
    Ok(PgdResult { delta: Tensor::new(x.shape(), delta), objective: cur.objective, distance: cur.distance, history })
}

/// Random perturbation per image with the same norm as `like` (then box-clipped).
pub fn random_perturbation(x: &Tensor, like: &Tensor, spec: &SemanticErrorSpec, rng: &mut Rng) -> Tensor {
    let b = x.shape()[0];
    let per = x.numel() / b;
    let mut out = vec![0.0f32; x.numel()];
    for i in 0..b {
        let target = spec.p.of(&like.data()[i * per..(i + 1) * per]);
        let d = &mut out[i * per..(i + 1) * per];
        d.iter_mut().for_each(|v| *v = normal(rng) as f32);
        let n = spec.p.of(d);
        d.iter_mut().for_each(|v| *v *= (target / n) as f32);
        for (dj, xj) in d.iter_mut().zip(&x.data()[i * per..(i + 1) * per]) {
            *dj = dj.clamp(spec.lower - xj, spec.upper - xj);
        }
    }
    Tensor::new(x.shape(), out)
}

/// Per-image `d(G(E(x)), G(E(x + delta)))`.
pub fn reconstruction_shift(model: &dyn Reconstructor, x: &Tensor, delta: &Tensor) -> Vec<f64> {
    no_grad(|| {
        let (a, _) = model.forward(x);
        let (b, _) = model.forward(&x.add(delta));
        per_image(&a.sub(&b).square().sum_per_sample())
    })
}

/// `d(x, G(E'(x))) + d(G(E'(x)), G(E'(x + delta)))` with `d` the per-image squared error.
pub fn robust_loss(encoder: &Encoder, generator: &Generator, x: &Tensor, delta: &Tensor) -> Tensor {
    let clean = generator.forward(&encoder.forward(x).mu);
    let attacked = generator.forward(&encoder.forward(&x.add(delta)).mu);
    clean.sub(x).square().sum_per_sample().add(&attacked.sub(&clean).square().sum_per_sample()).mean()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustTrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch: usize,
    pub eta2: f32,
    /// Images used for the per-epoch clean/attacked PSNR row.
    pub eval_images: usize,
    /// Consecutive epochs of rising loss that count as divergence.
    pub patience: usize,
}

impl Default for RobustTrainConfig {
    fn default() -> Self {
        RobustTrainConfig { epochs: 6, batches_per_epoch: 10, batch: 32, eta2: 3e-5, eval_images: 64, patience: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub clean_psnr: f64,
    pub attacked_psnr: f64,
}

pub struct FinetuneOutcome {
    /// Best encoder seen (lowest epoch loss).
    pub encoder: Encoder,
    pub log: Vec<RobustEpochRecord>,
    /// Set when training stopped on a rising loss.
    pub diverged: bool,
}

/// Mean clean and attacked PSNR of `encoder` on `images`, each encoder attacked by its own descent.
pub fn robustness_psnr(
    encoder: &Encoder,
    generator: &Generator,
    images: &ImageSet,
    spec: &SemanticErrorSpec,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let model = FrozenPipeline::new(encoder, generator);
    let (mut clean, mut attacked) = (0.0, 0.0);
    let n = images.len();
    for chunk in (0..n).collect::<Vec<_>>().chunks(32) {
        let x = images.batch(chunk);
        let res = find_semantic_error(&model, &x, spec, rng)?;
        let (rc, _) = no_grad(|| model.forward(&x));
        let (ra, _) = no_grad(|| model.forward(&x.add(&res.delta)));
        let per = images.shape.numel();
        for (j, &i) in chunk.iter().enumerate() {
            clean += psnr(images.image(i), &rc.data()[j * per..(j + 1) * per], 1.0)?;
            attacked += psnr(images.image(i), &ra.data()[j * per..(j + 1) * per], 1.0)?;
        }
    }
    Ok((clean / n as f64, attacked / n as f64))
}

/// Alternates the inner error search with encoder updates; the generator is
/// never modified.
pub fn finetune_robust_encoder(
    codec: &Codec,
    data: &ImageSet,
    eval: &ImageSet,
    spec: &SemanticErrorSpec,
    cfg: &RobustTrainConfig,
    rng: &mut Rng,
    progress: &mut dyn FnMut(&RobustEpochRecord),
) -> Result<FinetuneOutcome> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let generator = codec.generator.frozen();
    let mut encoder = codec.encoder.clone();
    let mut opt = Adam::new(cfg.eta2);
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, encoder.clone());
    let mut rising = 0;
    let eval = eval.take(cfg.eval_images);
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let x = data.batch(&sample_indices(data.len(), cfg.batch, rng));
            let attack = FrozenPipeline::new(&encoder, &generator);
            let delta = find_semantic_error(&attack, &x, spec, rng)?.delta;
            let loss = robust_loss(&encoder, &generator, &x, &delta);
            let v = loss.item() as f64;
            if !v.is_finite() {
                return Err(Error::Numerical(format!("robust loss is {v} in epoch {epoch}")));
            }
            let params = encoder.params();
            let grads = grad(&loss, &params.iter().collect::<Vec<_>>(), false);
            opt.step(&mut encoder, &grads);
            total += v;
        }
        let loss = total / cfg.batches_per_epoch.max(1) as f64;
        let (clean_psnr, attacked_psnr) = if eval.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            robustness_psnr(&encoder, &generator, &eval, spec, rng)?
        };
        let rec = RobustEpochRecord { epoch, loss, clean_psnr, attacked_psnr };
        progress(&rec);
        let prev = log.last().map(|r: &RobustEpochRecord| r.loss);
        log.push(rec);
        if loss < best.0 {
            best = (loss, encoder.clone());
        }
        rising = match prev {
            Some(p) if loss > p => rising + 1,
            _ => 0,
        };
        if rising >= cfg.patience {
            let mut encoder = best.1;
            encoder.fit_latent_mean(data, 256);
            return Ok(FinetuneOutcome { encoder, log, diverged: true });
        }
    }
    encoder.fit_latent_mean(data, 256);
    Ok(FinetuneOutcome { encoder, log, diverged: false })
}

/// CSV rows `epoch,clean_psnr,attacked_psnr,loss`.
pub fn epochs_csv(log: &[RobustEpochRecord]) -> String {
    let mut s = String::from("epoch,clean_psnr,attacked_psnr,loss\n");
    for r in log {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.epoch, r.clean_psnr, r.attacked_psnr, r.loss));
    }
    s
}
