use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use semcom::adaptation::{adapt_one_shot, adapted_psnr};
use semcom::bundle::{self, Bundle, BundleLock, Slot};
use semcom::channel::{ChannelConfig, ChannelKind};
use semcom::codec::{train_vae_wgan_gp, Codec, CodecOptimizers};
use semcom::config::{load_file, ExperimentConfig, TrainingConfig};
use semcom::data::{load_dataset, load_image, Split};
use semcom::diffusion::{
    decode_latents, denoise_latent, eecd_distill, invert_gain, multi_step_denoise, train_ldm, ConsistencyModel,
    Denoiser, DenoiserConfig, LatentSet, Solver,
};
use semcom::jscc::{train_deep_jscc, Jscc};
use semcom::metrics::psnr;
use semcom::perceptual;
use semcom::pipeline::{encode_latents, point_key, send, Method, Models};
use semcom::report::write_report;
use semcom::rng::{label_key, stream, Rng, RngState};
use semcom::robustness::{epochs_csv, finetune_robust_encoder};
use semcom::sweep::{read_jsonl, run_sweep, write_jsonl};
use semcom::{Error, Result};

#[derive(Parser)]
#[command(name = "semcom", version, about = "Latent-diffusion semantic communication toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the VAE-WGAN-GP codec into a bundle.
    TrainCodec {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the encoder against semantic errors of the given budget; prints a per-epoch CSV.
    FinetuneRobust {
        /// Bundle holding a trained codec.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        level: f64,
        /// Bundle receiving the robust encoder (may be the same as --ckpt).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the channel-conditioned latent denoiser (teacher).
    TrainLdm {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill the teacher into a consistency student.
    DistillEecd {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the end-to-end deep JSCC baseline.
    TrainJscc {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a latent adapter to one out-of-distribution image and write its side-channel bytes.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also store the adapter in the bundle for later sweeps.
        #[arg(long)]
        install: bool,
    },
    /// Evaluate methods over channel points and seeds; writes records.jsonl.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Tables and plots from a records file.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Denoise test images one call at a time, printing evaluations and wall-clock per call.
    Denoise {
        #[arg(long, default_value = "bundle")]
        bundle: PathBuf,
        #[arg(long)]
        snr: f64,
        /// awgn, rayleigh or rician
        #[arg(long)]
        channel: String,
        /// Rician power ratio.
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        /// Student steps; ignored with --teacher.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long)]
        teacher: bool,
        #[arg(long, default_value_t = 4)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        qam: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn emit<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).unwrap_or_default());
}

fn training_config(path: Option<&Path>) -> Result<TrainingConfig> {
    let cfg = match path {
        Some(p) => load_file(p)?,
        None => TrainingConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn rng_for(cfg: &TrainingConfig, stage: &str) -> Rng {
    stream(cfg.seed, &[label_key(stage)])
}

/// Creates the bundle directory if needed and holds its lock.
fn lock_bundle(dir: &Path) -> Result<(BundleLock, Bundle)> {
    std::fs::create_dir_all(dir)?;
    let lock = BundleLock::acquire(dir)?;
    Ok((lock, Bundle::open_or_create(dir)?))
}

fn load_split(cfg: &TrainingConfig) -> Result<Split> {
    let split = load_dataset(&cfg.dataset)?;
    if split.train.is_empty() {
        return Err(Error::Config(format!("no training images in {}", split.origin)));
    }
    Ok(split)
}

/// The codec with the robust encoder swapped in when the bundle has one.
fn deployed_codec(b: &Bundle) -> Result<Codec> {
    let mut codec = bundle::codec_from(&b.get(Slot::Codec)?)?;
    if b.has(Slot::RobustEncoder) {
        codec.encoder = bundle::encoder_from(&b.get(Slot::RobustEncoder)?)?;
    }
    Ok(codec)
}

fn parse_channel(name: &str, k: f64) -> Result<ChannelKind> {
    match name {
        "awgn" => Ok(ChannelKind::Awgn),
        "rayleigh" => Ok(ChannelKind::Rayleigh),
        "rician" => ChannelKind::from_k_factor(k),
        _ => Err(Error::Config(format!("unknown channel '{name}' (awgn, rayleigh, rician)"))),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::TrainCodec { config, out } => {
            let cfg = training_config(config.as_deref())?;
            let (_lock, mut b) = lock_bundle(&out)?;
            let split = load_split(&cfg)?;
            let mut rng = rng_for(&cfg, "train-codec");
            let mut codec = Codec::new(cfg.codec_config(split.train.shape), &mut rng)?;
            let mut opt = CodecOptimizers::new(cfg.codec_train.lr);
            let log = train_vae_wgan_gp(&mut codec, &split.train, &cfg.codec_train, &mut opt, &mut rng, &mut |r| emit(r))?;
            let ck = bundle::codec_checkpoint(&codec, Some(RngState::capture(&rng)))?;
            b.put(Slot::Codec, &ck, json!({ "dataset": split.origin, "last": log.last() }))?;
        }
        Cmd::FinetuneRobust { ckpt, level, out, config } => {
            let mut cfg = training_config(config.as_deref())?;
            cfg.semantic_error.level = level;
            cfg.semantic_error.validate()?;
            let (_lock, mut dst) = lock_bundle(&out)?;
            let same = std::fs::canonicalize(&ckpt).ok() == std::fs::canonicalize(&out).ok();
            let codec_ck = if same { dst.get(Slot::Codec)? } else { Bundle::open(&ckpt)?.get(Slot::Codec)? };
            let codec = bundle::codec_from(&codec_ck)?;
            let split = load_split(&cfg)?;
            let mut rng = rng_for(&cfg, "finetune-robust");
            let res = finetune_robust_encoder(
                &codec,
                &split.train,
                &split.test,
                &cfg.semantic_error,
                &cfg.robust_train,
                &mut rng,
                &mut |r| eprintln!("{}", serde_json::to_string(r).unwrap_or_default()),
            )?;
            let csv = epochs_csv(&res.log);
            print!("{csv}");
            if res.diverged {
                eprintln!("loss kept rising; keeping the best epoch");
            }
            if !same {
                dst.put(Slot::Codec, &codec_ck, json!({ "copied_from": ckpt }))?;
            }
            std::fs::write(out.join("robust_epochs.csv"), &csv)?;
            let info = json!({ "semantic_error": cfg.semantic_error, "log": res.log, "diverged": res.diverged });
            let ck = bundle::encoder_checkpoint(&codec.config, &res.encoder, &info)?;
            dst.put(Slot::RobustEncoder, &ck, json!({ "level": level, "diverged": res.diverged }))?;
        }
        Cmd::TrainLdm { config, out } => {
            let cfg = training_config(config.as_deref())?;
            let (_lock, mut b) = lock_bundle(&out)?;
            let codec = deployed_codec(&b)?;
            let split = load_split(&cfg)?;
            let latents = LatentSet::encode(&codec.encoder, &split.train, 200);
            let schedule = cfg.schedule.build()?;
            let mut rng = rng_for(&cfg, "train-ldm");
            let mut dcfg = DenoiserConfig::new(latents.dim);
            dcfg.width = cfg.denoiser_width;
            let mut net = Denoiser::new(dcfg, &mut rng)?;
            let log = train_ldm(&mut net, &latents, &schedule, &cfg.ldm, &mut rng, &mut |r| emit(r))?;
            let ck = bundle::teacher_checkpoint(&net, &schedule, Some(RngState::capture(&rng)))?;
            b.put(Slot::Teacher, &ck, json!({ "first": log.first(), "last": log.last() }))?;
        }
        Cmd::DistillEecd { config, out } => {
            let cfg = training_config(config.as_deref())?;
            let (_lock, mut b) = lock_bundle(&out)?;
            let codec = deployed_codec(&b)?;
            let (teacher, schedule) = bundle::teacher_from(&b.get(Slot::Teacher)?)?;
            let split = load_split(&cfg)?;
            let latents = LatentSet::encode(&codec.encoder, &split.train, 200);
            let mut rng = rng_for(&cfg, "distill-eecd");
            let mut cm = ConsistencyModel::from_teacher(&teacher, &schedule);
            let res = eecd_distill(&mut cm, &teacher, &codec.generator, &latents, &schedule, &cfg.eecd, &mut rng, &mut |r| emit(r));
            // A numerical abort still leaves the last good student; save it before reporting.
            let ck = bundle::student_checkpoint(&cm, &schedule)?;
            let log = res?;
            b.put(Slot::Student, &ck, json!({ "last": log.last() }))?;
        }
        Cmd::TrainJscc { config, out } => {
            let cfg = training_config(config.as_deref())?;
            let (_lock, mut b) = lock_bundle(&out)?;
            let split = load_split(&cfg)?;
            let mut rng = rng_for(&cfg, "train-jscc");
            let mut model = Jscc::new(cfg.codec_config(split.train.shape), &mut rng)?;
            let log = train_deep_jscc(&mut model, &split.train, &cfg.jscc, &mut rng, &mut |r| emit(r))?;
            let ck = bundle::jscc_checkpoint(&model, &cfg.jscc)?;
            b.put(Slot::Jscc, &ck, json!({ "last": log.last() }))?;
        }
        Cmd::Adapt { ckpt, input, out, config, install } => {
            let cfg = training_config(config.as_deref())?;
            let b = Bundle::open(&ckpt)?;
            let codec = deployed_codec(&b)?;
            let shape = codec.config.image;
            if shape.h != shape.w {
                return Err(Error::Config("adaptation expects square images".into()));
            }
            let target = load_image(&input, shape.c, shape.h)?;
            let mut rng = rng_for(&cfg, "adapt");
            let res = adapt_one_shot(&codec, &target, &cfg.adapt, &mut rng)?;
            for r in &res.log {
                emit(r);
            }
            let bytes = res.adapter.to_bytes();
            std::fs::write(&out, &bytes)?;
            let final_psnr = adapted_psnr(&codec.encoder, &codec.generator, &res.adapter, &target)?;
            emit(&json!({
                "initial_psnr": res.initial_psnr,
                "final_psnr": final_psnr,
                "epochs": res.log.len(),
                "side_channel_bytes": bytes.len(),
            }));
            if install {
                let _lock = BundleLock::acquire(&ckpt)?;
                let mut b = Bundle::open(&ckpt)?;
                let ck = bundle::adapter_checkpoint(&res.adapter, &res.head, &res.log)?;
                b.put(Slot::Adapter, &ck, json!({ "input": input, "final_psnr": final_psnr }))?;
            }
        }
        Cmd::Sweep { config } => {
            let cfg: ExperimentConfig = load_file(&config)?;
            cfg.validate()?;
            let b = Bundle::open(&cfg.bundle)?;
            let models = Models::from_bundle(&b, &cfg.methods, cfg.use_adapter)?;
            let split = load_dataset(&cfg.dataset)?;
            let critic = match cfg.perceptual {
                semcom::config::PerceptualBackend::Critic => Some(bundle::codec_from(&b.get(Slot::Codec)?)?.discriminator.body),
                _ => None,
            };
            let dist = perceptual::resolve(&cfg.perceptual, critic.as_ref(), split.test.shape)?;
            let records = run_sweep(&cfg, &models, &split.test, dist.as_ref())?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            write_jsonl(&cfg.output_dir.join("records.jsonl"), &records)?;
            for r in &records {
                emit(&json!({
                    "method": r.method,
                    "channel": r.channel,
                    "seed": r.seed,
                    "nfe": r.nfe,
                    "wall_ms": r.wall_ms,
                    "psnr_db": r.mean.get("psnr_db"),
                    "ms_ssim_db": r.mean.get("ms_ssim_db"),
                }));
            }
        }
        Cmd::Report { input, out } => {
            let records = read_jsonl(&input)?;
            let dir = out.unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
            for p in write_report(&records, &dir)? {
                println!("{}", p.display());
            }
        }
        Cmd::Denoise { bundle: dir, snr, channel, k, steps, teacher, images, seed, qam, config } => {
            let cfg = training_config(config.as_deref())?;
            if !snr.is_finite() {
                return Err(Error::Config("--snr must be finite".into()));
            }
            if !teacher && steps == 0 {
                return Err(Error::Config("--steps must be at least 1".into()));
            }
            let mut point = ChannelConfig::new(parse_channel(&channel, k)?, snr);
            point.qam = qam;
            point.seed = seed;
            let method = if teacher { Method::VefLdmTeacher } else { Method::EecdS1 };
            let b = Bundle::open(&dir)?;
            let models = Models::from_bundle(&b, &[method], false)?;
            let encoder = models.encoder.as_ref().expect("codec slot loaded");
            let generator = models.generator.as_ref().expect("codec slot loaded");
            let split = load_dataset(&cfg.dataset)?;
            let test = split.test.take(images);
            let per = test.shape.numel();
            for i in 0..test.len() {
                let x = test.batch(&[i]);
                let (z, scales, d) = encode_latents(encoder, &x);
                let link = send(&z, d, &point, seed, &[i])?;
                let (start_step, _) = models.schedule.start_step(link.sigma2);
                let t0 = Instant::now();
                let mut nfe = 0u64;
                let z_hat = match (&models.teacher, &models.student) {
                    (Some(t), _) if teacher => {
                        let out = multi_step_denoise(t, &link.y, &link.csi, link.sigma2, &models.schedule, Solver::Euler, &mut nfe)?;
                        invert_gain(&out, &link.csi)?
                    }
                    (_, Some(cm)) => {
                        let mut rng = stream(seed ^ point.seed, &[point_key(&point), label_key("renoise"), i as u64]);
                        denoise_latent(&link.y, &link.csi, link.sigma2, cm, &models.schedule, steps, &mut rng, &mut nfe)?
                    }
                    _ => return Err(Error::Config("bundle has no denoiser for this call".into())),
                };
                let recon = decode_latents(&z_hat, &scales, d, &encoder.latent_offset(), None, generator)?;
                let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
                emit(&json!({
                    "image": i,
                    "method": if teacher { "teacher" } else { "student" },
                    "steps": if teacher { start_step } else { steps },
                    "channel": point.kind.label(),
                    "snr_db": snr,
                    "start_step": start_step,
                    "nfe": nfe,
                    "wall_ms": wall_ms,
                    "psnr_db": psnr(test.image(i), &recon.data()[..per], 1.0)?,
                }));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
