//! Acceptance run: trains (or reloads) the desk-scale MNIST bundle and prints
//! one PASS/FAIL line per criterion, followed by a few supporting checks.
//!
//! Trained models are cached under the cargo tmp dir, keyed by the training
//! config, so only the first run pays for training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use semcom::adaptation::adapt_one_shot;
use semcom::bundle::{self, Bundle, Slot};
use semcom::channel::*;
use semcom::checkpoint::Checkpoint;
use semcom::codec::{train_vae_wgan_gp, Codec, CodecOptimizers, Encoder};
use semcom::config::{config_hash, ExperimentConfig, TrainingConfig};
use semcom::data::{load_dataset_from, DatasetSource, DatasetSpec, ImageSet, Split};
use semcom::diffusion::*;
use semcom::jscc::{train_deep_jscc, Jscc};
use semcom::metrics::{psnr, SsimDistance};
use semcom::nn::{no_grad, Module};
use semcom::pipeline::{Method, Models};
use semcom::rng::{label_key, normals, seeded, stream};
use semcom::robustness::*;
use semcom::sweep::{run_sweep, RunRecord};

const ROBUST_SEEDS: [u64; 3] = [0, 1, 2];
const SWEEP_SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn report(label: &str, what: &str, v: &Verdict, started: Instant) -> bool {
    println!(
        "{label} {}  {what}  [{}; {:.0}s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        started.elapsed().as_secs_f64()
    );
    v.pass
}

fn rng_for(seed: u64, stage: &str) -> semcom::rng::Rng {
    stream(seed, &[label_key(stage)])
}

// ---------------------------------------------------------------- training

struct Trained {
    cfg: TrainingConfig,
    split: Split,
    codec: Codec,
    robust: Vec<Encoder>,
    dir: PathBuf,
    ldm_log: Vec<LdmLossRecord>,
}

fn log_stage(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

fn cached<T>(path: &Path, load: impl FnOnce(&Path) -> T, train: impl FnOnce() -> T, save: impl FnOnce(&T, &Path)) -> T {
    if path.exists() {
        return load(path);
    }
    let v = train();
    save(&v, path);
    v
}

fn train_all() -> Trained {
    let cfg = TrainingConfig::default();
    let key = config_hash(&cfg).unwrap();
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-{}", &key[..16]));
    std::fs::create_dir_all(&dir).unwrap();
    let mut b = Bundle::open_or_create(&dir).unwrap();
    let split = load_dataset_from(&cfg.dataset, None).unwrap();
    let t0 = Instant::now();

    if !b.has(Slot::Codec) {
        log_stage("training codec");
        let mut rng = rng_for(cfg.seed, "train-codec");
        let mut codec = Codec::new(cfg.codec_config(split.train.shape), &mut rng).unwrap();
        let mut opt = CodecOptimizers::new(cfg.codec_train.lr);
        train_vae_wgan_gp(&mut codec, &split.train, &cfg.codec_train, &mut opt, &mut rng, &mut |_| {}).unwrap();
        b.put(Slot::Codec, &bundle::codec_checkpoint(&codec, None).unwrap(), serde_json::Value::Null).unwrap();
        log_stage(&format!("codec done after {:.0}s", t0.elapsed().as_secs_f64()));
    }
    let codec = bundle::codec_from(&b.get(Slot::Codec).unwrap()).unwrap();

    let mut robust = Vec::new();
    for &seed in &ROBUST_SEEDS {
        let path = dir.join(format!("robust-seed{seed}.ckpt"));
        let enc = cached(
            &path,
            |p| bundle::encoder_from(&Checkpoint::load(p).unwrap()).unwrap(),
            || {
                log_stage(&format!("robust fine-tuning, seed {seed}"));
                let mut rng = rng_for(seed, "finetune-robust");
                let out = finetune_robust_encoder(
                    &codec,
                    &split.train,
                    &split.test,
                    &cfg.semantic_error,
                    &cfg.robust_train,
                    &mut rng,
                    &mut |r| log_stage(&format!("  epoch {} clean {:.2} attacked {:.2}", r.epoch, r.clean_psnr, r.attacked_psnr)),
                )
                .unwrap();
                out.encoder
            },
            |e, p| bundle::encoder_checkpoint(&codec.config, e, &()).unwrap().save(p).unwrap(),
        );
        robust.push(enc);
    }
    if !b.has(Slot::RobustEncoder) {
        b.put(Slot::RobustEncoder, &bundle::encoder_checkpoint(&codec.config, &robust[0], &()).unwrap(), serde_json::Value::Null)
            .unwrap();
    }

    let latents = LatentSet::encode(&robust[0], &split.train, 200);
    let schedule = cfg.schedule.build().unwrap();
    let log_path = dir.join("ldm_log.json");
    if !b.has(Slot::Teacher) || !log_path.exists() {
        log_stage("training latent denoiser");
        let mut rng = rng_for(cfg.seed, "train-ldm");
        let mut dcfg = DenoiserConfig::new(latents.dim);
        dcfg.width = cfg.denoiser_width;
        let mut net = Denoiser::new(dcfg, &mut rng).unwrap();
        let log = train_ldm(&mut net, &latents, &schedule, &cfg.ldm, &mut rng, &mut |_| {}).unwrap();
        std::fs::write(&log_path, serde_json::to_vec(&log).unwrap()).unwrap();
        b.put(Slot::Teacher, &bundle::teacher_checkpoint(&net, &schedule, None).unwrap(), serde_json::Value::Null).unwrap();
        log_stage(&format!("denoiser done after {:.0}s", t0.elapsed().as_secs_f64()));
    }
    let ldm_log: Vec<LdmLossRecord> = serde_json::from_slice(&std::fs::read(&log_path).unwrap()).unwrap();

    if !b.has(Slot::Student) {
        log_stage("distilling consistency student");
        let (teacher, schedule) = bundle::teacher_from(&b.get(Slot::Teacher).unwrap()).unwrap();
        let mut rng = rng_for(cfg.seed, "distill-eecd");
        let mut cm = ConsistencyModel::from_teacher(&teacher, &schedule);
        eecd_distill(&mut cm, &teacher, &codec.generator, &latents, &schedule, &cfg.eecd, &mut rng, &mut |_| {}).unwrap();
        b.put(Slot::Student, &bundle::student_checkpoint(&cm, &schedule).unwrap(), serde_json::Value::Null).unwrap();
        log_stage(&format!("student done after {:.0}s", t0.elapsed().as_secs_f64()));
    }

    if !b.has(Slot::Jscc) {
        log_stage("training deep JSCC baseline");
        let mut rng = rng_for(cfg.seed, "train-jscc");
        let mut model = Jscc::new(cfg.codec_config(split.train.shape), &mut rng).unwrap();
        train_deep_jscc(&mut model, &split.train, &cfg.jscc, &mut rng, &mut |_| {}).unwrap();
        b.put(Slot::Jscc, &bundle::jscc_checkpoint(&model, &cfg.jscc).unwrap(), serde_json::Value::Null).unwrap();
        log_stage(&format!("jscc done after {:.0}s", t0.elapsed().as_secs_f64()));
    }

    Trained { cfg, split, codec, robust, dir, ldm_log }
}

// ---------------------------------------------------------------- criteria

const USES: usize = 10_000;

fn channel_math() -> Verdict {
    let kinds = [ChannelKind::Awgn, ChannelKind::Rayleigh, ChannelKind::Rician { k: 1.0 }];
    let (mut formula_err, mut worst_mean, mut worst_var) = (0f64, 0f64, 0f64);
    for kind in kinds {
        for snr in [0.0, 10.0, 20.0] {
            let sigma2 = snr_to_sigma2(snr, 1.0).unwrap();
            let mut rng = stream(11, &[label_key(&kind.label()), snr as u64]);
            let ch = sample_channel(kind, USES, sigma2, &mut rng).unwrap();
            let z = normals(&mut rng, 2 * USES);
            let y = transmit(&z, &ch, &mut rng).unwrap();
            let eq = mmse_equalize(&y, &ch, false).unwrap();
            let eq_norm = mmse_equalize(&y, &ch, true).unwrap();
            let csi_norm = ch.csi(true);
            let mut res = Vec::with_capacity(2 * USES);
            for i in 0..USES {
                let h: Complex64 = ch.h[i];
                let den = h.norm_sqr() + sigma2;
                let want = h.conj() * y[i] / den;
                let (hz, hn) = (h.norm_sqr() / den, h.norm() / den);
                let s = 1.0 + sigma2;
                let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + b.abs());
                for (a, b) in [
                    (eq[i], want.re),
                    (eq[USES + i], want.im),
                    (eq_norm[i], want.re * s),
                    (eq_norm[USES + i], want.im * s),
                    (ch.h_z[i], hz),
                    (ch.h_z[USES + i], hz),
                    (ch.h_n[i], hn),
                    (ch.h_n[USES + i], hn),
                    (csi_norm.h_z[i], hz * s),
                    (csi_norm.h_n[i], hn * s),
                ] {
                    formula_err = formula_err.max(rel(a, b));
                }
                for j in [i, USES + i] {
                    res.push((eq[j] - hz * z[j]) / (hn * sigma2.sqrt()));
                }
            }
            let n = res.len() as f64;
            let mean = res.iter().sum::<f64>() / n;
            let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - 1.0).abs());
        }
    }
    Verdict {
        pass: formula_err <= 1e-12 && worst_mean < 0.05 && worst_var < 0.05,
        detail: format!("max formula error {formula_err:.1e}, worst |mean| {worst_mean:.4}, worst |var-1| {worst_var:.4}"),
    }
}

fn schedule_and_solvers() -> Verdict {
    let sch = TimeSchedule::default();
    let (a, b) = (sch.eps.powf(1.0 / sch.rho), sch.t_max.powf(1.0 / sch.rho));
    let endpoints = sch.time(1) == sch.eps && sch.time(sch.n) == sch.t_max;
    let interior = (1..=sch.n).all(|i| {
        let want = (a + (i - 1) as f64 / (sch.n - 1) as f64 * (b - a)).powf(sch.rho);
        (sch.time(i) - want).abs() <= 1e-12 * want
    });

    // Point mass at c = H_z z0: the exact noise predictor is (z - c) / (t H_n).
    let d = 16;
    let mut worst = 0f64;
    let mut nfe_ok = true;
    for n in 1..=sch.n {
        let mut rng = stream(5, &[n as u64]);
        let ch = sample_channel(ChannelKind::Rayleigh, d / 2, snr_to_sigma2(5.0, 1.0).unwrap(), &mut rng).unwrap();
        let csi = CsiBatch::from_realizations(&[ch], true);
        let z0 = normals(&mut rng, d);
        let c: Vec<f64> = z0.iter().zip(&csi.h_z).map(|(z, h)| z * h).collect();
        let t = sch.time(n);
        let zt = forward_perturb(&c, t, &csi.h_n, &mut rng).unwrap();
        let oracle = |z: &[f64], tt: &[f64], cs: &CsiBatch| -> Vec<f64> {
            z.iter().enumerate().map(|(i, v)| (v - c[i % d]) / (tt[i / d] * cs.h_n[i])).collect()
        };
        let mut nfe = 0;
        let out = euler_step(&oracle, &zt, &[t], &[0.0], &csi, &mut nfe).unwrap();
        nfe_ok &= nfe == 1;
        worst = worst.max(out.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }

    // dz/dt = t^2 from t = 1.0 to 0.9.
    let csi = CsiBatch::identity(1, 1);
    let field = |_: &[f64], t: &[f64], _: &CsiBatch| -> Vec<f64> { vec![t[0] * t[0]] };
    let exact = -(1.0f64 - 0.9f64.powi(3)) / 3.0;
    let (mut n1, mut n2) = (0, 0);
    let e = euler_step(&field, &[0.0], &[1.0], &[0.9], &csi, &mut n1).unwrap()[0];
    let h = heun_step(&field, &[0.0], &[1.0], &[0.9], &csi, &mut n2).unwrap()[0];
    let (ee, he) = ((e - exact).abs(), (h - exact).abs());
    let ratio = ee / he;
    Verdict {
        pass: endpoints && interior && worst <= 1e-6 && nfe_ok && ratio >= 5.0 && n1 == 1 && n2 == 2,
        detail: format!(
            "endpoints exact {endpoints}, point-mass max error {worst:.1e} over {} steps, Euler/Heun error {ee:.2e}/{he:.2e} (ratio {ratio:.1})",
            sch.n
        ),
    }
}

fn boundary_bits(cm: &ConsistencyModel, dim: usize, seed: u64) -> bool {
    let mut rng = seeded(seed);
    let b = 1000;
    let chs: Vec<_> = (0..b)
        .map(|i| {
            let kind = [ChannelKind::Awgn, ChannelKind::Rayleigh, ChannelKind::Rician { k: 1.0 }][i % 3];
            sample_channel(kind, dim / 2, snr_to_sigma2((i % 21) as f64, 1.0).unwrap(), &mut rng).unwrap()
        })
        .collect();
    let csi = CsiBatch::from_realizations(&chs, true);
    let z: Vec<f64> = normals(&mut rng, b * dim).into_iter().map(|v| v * 3.0).collect();
    let mut nfe = 0;
    let out = cm.apply(&z, &vec![cm.eps; b], &csi, &mut nfe).unwrap();
    nfe == 0 && out.iter().zip(&z).all(|(a, b)| a.to_bits() == b.to_bits())
}

fn consistency_boundary(t: &Trained) -> Verdict {
    let b = Bundle::open(&t.dir).unwrap();
    let (teacher, schedule) = bundle::teacher_from(&b.get(Slot::Teacher).unwrap()).unwrap();
    let (student, _) = bundle::student_from(&b.get(Slot::Student).unwrap()).unwrap();
    let pre = ConsistencyModel::from_teacher(&teacher, &schedule);
    let dim = teacher.config.dim;
    let (ok_pre, ok_post) = (boundary_bits(&pre, dim, 1), boundary_bits(&student, dim, 2));
    Verdict {
        pass: ok_pre && ok_post,
        detail: format!("pre-training {ok_pre}, post-training {ok_post} (student steps {})", student.steps),
    }
}

fn eval_images(t: &Trained) -> ImageSet {
    t.split.test.take(100)
}

fn robust_encoder(t: &Trained) -> Verdict {
    let eval = eval_images(t);
    let spec = &t.cfg.semantic_error;
    let (base_clean, base_att) =
        robustness_psnr(&t.codec.encoder, &t.codec.generator, &eval, spec, &mut seeded(404)).unwrap();
    let mut wins = 0;
    let mut rows = Vec::new();
    for (seed, enc) in ROBUST_SEEDS.iter().zip(&t.robust) {
        let (clean, att) = robustness_psnr(enc, &t.codec.generator, &eval, spec, &mut seeded(404)).unwrap();
        let (gain, loss) = (att - base_att, base_clean - clean);
        let ok = gain >= 3.0 && loss <= 1.0;
        wins += ok as usize;
        rows.push(format!("seed {seed}: attacked {gain:+.2} dB, clean {:+.2} dB", -loss));
    }
    Verdict {
        pass: wins >= 2,
        detail: format!(
            "level {}, base clean/attacked {base_clean:.2}/{base_att:.2} dB; {}; {wins}/3 seeds meet +3/-1",
            spec.level,
            rows.join("; ")
        ),
    }
}

fn pgd_strength(t: &Trained) -> Verdict {
    let eval = eval_images(t);
    let spec = &t.cfg.semantic_error;
    let model = FrozenPipeline::from_codec(&t.codec);
    let mut rng = seeded(505);
    let (mut strong, mut ratios) = (0, Vec::new());
    for chunk in (0..eval.len()).collect::<Vec<_>>().chunks(25) {
        let x = eval.batch(chunk);
        let delta = find_semantic_error(&model, &x, spec, &mut rng).unwrap().delta;
        let pgd = reconstruction_shift(&model, &x, &delta);
        let mut random: Vec<Vec<f64>> = vec![Vec::new(); chunk.len()];
        for _ in 0..20 {
            let r = random_perturbation(&x, &delta, spec, &mut rng);
            for (i, d) in reconstruction_shift(&model, &x, &r).into_iter().enumerate() {
                random[i].push(d);
            }
        }
        for (p, mut r) in pgd.into_iter().zip(random) {
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = 0.5 * (r[9] + r[10]);
            ratios.push(p / median);
            strong += (p >= 2.0 * median) as usize;
        }
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let frac = strong as f64 / ratios.len() as f64;
    Verdict {
        pass: frac >= 0.9,
        detail: format!("{strong}/{} images at >= 2x the random median, median ratio {:.1}", ratios.len(), ratios[ratios.len() / 2]),
    }
}

fn adapter(t: &Trained) -> Verdict {
    let spec = DatasetSpec::new(DatasetSource::Fmnist);
    let fm = load_dataset_from(&spec, None).unwrap();
    let target = fm.test.take(1);
    let mut codec = t.codec.clone();
    codec.encoder = t.robust[0].clone();
    let sums = |c: &Codec| (c.encoder.checksum(), c.generator.checksum(), c.discriminator.body.checksum(), c.discriminator.head.checksum());
    let before = sums(&codec);
    let mut all_ok = true;
    let mut rows = Vec::new();
    for seed in [0u64, 1, 2] {
        let started = Instant::now();
        let out = adapt_one_shot(&codec, &target, &t.cfg.adapt, &mut rng_for(seed, "adapt")).unwrap();
        let last = out.log.last().map(|r| r.psnr).unwrap_or(out.initial_psnr);
        let gain = last - out.initial_psnr;
        let ok = gain >= 4.0 && last > out.initial_psnr && out.log.len() <= 100;
        all_ok &= ok;
        rows.push(format!(
            "seed {seed}: {:.2} -> {last:.2} dB in {} epochs, {:.0}s",
            out.initial_psnr,
            out.log.len(),
            started.elapsed().as_secs_f64()
        ));
    }
    let stable = sums(&codec) == before;
    Verdict { pass: all_ok && stable, detail: format!("{}; frozen checksums stable {stable}", rows.join("; ")) }
}

// ---------------------------------------------------------------- sweep criteria

fn sweep_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(dir.to_path_buf(), dir.join("results"));
    cfg.channels = vec![
        ChannelConfig::new(ChannelKind::Awgn, 0.0),
        ChannelConfig::new(ChannelKind::Awgn, 10.0),
        ChannelConfig::new(ChannelKind::Awgn, 20.0),
        ChannelConfig::new(ChannelKind::Rayleigh, 0.0),
        ChannelConfig::new(ChannelKind::Rician { k: 1.0 }, 10.0),
    ];
    cfg.methods = vec![
        Method::VefLdmTeacher,
        Method::EecdS1,
        Method::EecdS2,
        Method::Ddim2Step,
        Method::NoDenoise,
        Method::DeepJscc,
    ];
    cfg.seeds = SWEEP_SEEDS.to_vec();
    cfg.test_images = 200;
    cfg
}

fn sweep(t: &Trained) -> (Vec<RunRecord>, f64) {
    let cfg = sweep_config(&t.dir);
    let b = Bundle::open(&t.dir).unwrap();
    let models = Models::from_bundle(&b, &cfg.methods, false).unwrap();
    let test = t.split.test.take(cfg.test_images);
    let started = Instant::now();
    let recs = run_sweep(&cfg, &models, &test, &SsimDistance).unwrap();
    (recs, started.elapsed().as_secs_f64())
}

fn find<'a>(recs: &'a [RunRecord], m: Method, kind: ChannelKind, snr: f64, seed: u64) -> &'a RunRecord {
    recs.iter()
        .find(|r| r.method == m && r.channel.kind == kind && r.channel.snr_db == snr && r.seed == seed)
        .expect("grid point present")
}

fn eecd_vs_teacher(recs: &[RunRecord]) -> Verdict {
    let ms = |m, snr, seed| find(recs, m, ChannelKind::Awgn, snr, seed).mean["ms_ssim_db"];
    let mut wins = 0;
    let mut rows = Vec::new();
    for &seed in &SWEEP_SEEDS {
        let (t10, s1, s2) = (ms(Method::VefLdmTeacher, 10.0, seed), ms(Method::EecdS1, 10.0, seed), ms(Method::EecdS2, 10.0, seed));
        let mut ok = s2 >= t10 - 2.0 && s2 >= s1;
        for snr in [0.0, 10.0] {
            let base = ms(Method::NoDenoise, snr, seed);
            for m in [Method::VefLdmTeacher, Method::EecdS1, Method::EecdS2] {
                ok &= ms(m, snr, seed) >= base;
            }
        }
        let (s2_0, ddim_0) = (ms(Method::EecdS2, 0.0, seed), ms(Method::Ddim2Step, 0.0, seed));
        ok &= s2_0 >= ddim_0;
        wins += ok as usize;
        rows.push(format!(
            "seed {seed}: 10 dB teacher/s1/s2/none {t10:.2}/{s1:.2}/{s2:.2}/{:.2}; 0 dB teacher/s2/ddim/none {:.2}/{s2_0:.2}/{ddim_0:.2}/{:.2} {}",
            ms(Method::NoDenoise, 10.0, seed),
            ms(Method::VefLdmTeacher, 0.0, seed),
            ms(Method::NoDenoise, 0.0, seed),
            if ok { "ok" } else { "miss" }
        ));
    }
    Verdict { pass: wins >= 2, detail: format!("MS-SSIM dB, {}; {wins}/3 seeds", rows.join("; ")) }
}

fn latency_nfe(recs: &[RunRecord]) -> Verdict {
    let mut exact = true;
    for r in recs {
        let want = r.method.expected_nfe(r.start_step);
        exact &= r.nfe == want;
        exact &= match r.method {
            Method::VefLdmTeacher => r.nfe == r.start_step as u64,
            Method::EecdS1 => r.nfe == 1,
            Method::EecdS2 | Method::Ddim2Step => r.nfe == 2,
            _ => true,
        };
        exact &= r.per_image.iter().all(|p| p.nfe == r.nfe);
    }
    let m0 = find(recs, Method::VefLdmTeacher, ChannelKind::Awgn, 0.0, 0).start_step;
    let m20 = find(recs, Method::VefLdmTeacher, ChannelKind::Awgn, 20.0, 0).start_step;
    // Wall-clock summed over seeds at each point.
    let mut wall: BTreeMap<(String, Method), f64> = BTreeMap::new();
    for r in recs {
        *wall.entry((point_label(&r.channel), r.method)).or_default() += r.wall_ms;
    }
    let mut ratio_ok = true;
    let mut worst = (f64::INFINITY, String::new());
    for r in recs.iter().filter(|r| r.method == Method::VefLdmTeacher && r.seed == SWEEP_SEEDS[0]) {
        let p = point_label(&r.channel);
        let teacher = wall[&(p.clone(), Method::VefLdmTeacher)];
        for (m, s) in [(Method::EecdS1, 1.0), (Method::EecdS2, 2.0)] {
            let ratio = teacher / wall[&(p.clone(), m)];
            let need = r.start_step as f64 / (4.0 * s);
            ratio_ok &= ratio >= need;
            if ratio / need < worst.0 {
                worst = (ratio / need, format!("{p} s={s}: ratio {ratio:.1} vs required {need:.1}"));
            }
        }
    }
    Verdict {
        pass: exact && m0 > m20 && ratio_ok,
        detail: format!("NFE exact {exact}, teacher m(0 dB)={m0} m(20 dB)={m20}; tightest wall-clock ratio {}", worst.1),
    }
}

fn determinism(a: &[RunRecord], b: &[RunRecord]) -> Verdict {
    let mut worst = 0f64;
    let mut same_shape = a.len() == b.len();
    for (x, y) in a.iter().zip(b) {
        same_shape &= x.method == y.method && x.channel == y.channel && x.seed == y.seed && x.draws == y.draws && x.nfe == y.nfe;
        for (k, v) in &x.mean {
            if k == "latency_ms" {
                continue;
            }
            worst = worst.max((v - y.mean[k]).abs());
        }
        for (k, v) in &x.std {
            if k == "latency_ms" {
                continue;
            }
            worst = worst.max((v - y.std[k]).abs());
        }
    }
    Verdict {
        pass: same_shape && worst <= 1e-5,
        detail: format!("{} records, same grid/draws {same_shape}, max aggregate difference {worst:.1e}", a.len()),
    }
}

// ---------------------------------------------------------------- supporting checks

fn codec_quality(t: &Trained) -> Verdict {
    let x = t.split.train.take(100);
    let ids: Vec<usize> = (0..x.len()).collect();
    let rec = no_grad(|| t.codec.generator.forward(&t.codec.encoder.forward(&x.batch(&ids)).mu));
    let per = x.shape.numel();
    let p = ids.iter().map(|&i| psnr(x.image(i), &rec.data()[i * per..(i + 1) * per], 1.0).unwrap()).sum::<f64>() / x.len() as f64;
    Verdict { pass: p > 15.0, detail: format!("mean train-image PSNR {p:.2} dB over {} images", x.len()) }
}

fn ldm_loss_drop(t: &Trained) -> Verdict {
    let (first, last) = (t.ldm_log.first().unwrap().loss, t.ldm_log.last().unwrap().loss);
    Verdict { pass: last <= 0.5 * first, detail: format!("logged loss {first:.4} -> {last:.4}") }
}

fn student_denoises(t: &Trained) -> Verdict {
    let b = Bundle::open(&t.dir).unwrap();
    let (student, schedule) = bundle::student_from(&b.get(Slot::Student).unwrap()).unwrap();
    let test = LatentSet::encode(&t.robust[0], &t.split.test.take(200), 200);
    let d = test.dim;
    let mut rng = seeded(606);
    let (mut better, mut total) = (0, 0);
    for kind in [ChannelKind::Awgn, ChannelKind::Rayleigh] {
        for snr in [0.0, 10.0, 20.0] {
            let sigma2 = snr_to_sigma2(snr, 1.0).unwrap();
            let (_, t_m) = schedule.start_step(sigma2);
            for i in 0..test.len() {
                let ch = sample_channel(kind, d / 2, sigma2, &mut rng).unwrap();
                let csi = CsiBatch::from_realizations(&[ch], true);
                let c: Vec<f64> = test.row(i).iter().zip(&csi.h_z).map(|(z, h)| z * h).collect();
                let zt = forward_perturb(&c, t_m, &csi.h_n, &mut rng).unwrap();
                let f = student.apply(&zt, &[t_m], &csi, &mut 0).unwrap();
                let dist = |v: &[f64]| v.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                better += (dist(&f) <= dist(&zt)) as usize;
                total += 1;
            }
        }
    }
    let frac = better as f64 / total as f64;
    Verdict { pass: frac >= 0.95, detail: format!("{better}/{total} noisy test latents moved closer to the clean endpoint") }
}

fn jscc_vs_no_denoise(recs: &[RunRecord]) -> Verdict {
    let p = |m, seed| find(recs, m, ChannelKind::Awgn, 10.0, seed).mean["psnr_db"];
    let rows: Vec<String> = SWEEP_SEEDS.iter().map(|&s| format!("{:.2}/{:.2}", p(Method::DeepJscc, s), p(Method::NoDenoise, s))).collect();
    let ok = SWEEP_SEEDS.iter().all(|&s| p(Method::DeepJscc, s) >= p(Method::NoDenoise, s));
    Verdict { pass: ok, detail: format!("10 dB AWGN PSNR jscc/no-denoise per seed {}", rows.join(", ")) }
}

fn main() {
    // `cargo test -- --list` and filters are accepted but there is only one run.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let started = Instant::now();
    let mut ok = true;
    ok &= report("criterion 1", "closed-form channel math and residual standardization", &channel_math(), started);
    ok &= report("criterion 2", "schedule endpoints, point-mass oracle, Heun vs Euler", &schedule_and_solvers(), started);

    let t = train_all();
    ok &= report("criterion 3", "consistency boundary f(z, eps) = z bit-exact", &consistency_boundary(&t), started);
    ok &= report("criterion 4", "robust encoder: attacked +3 dB, clean -1 dB at most, 2 of 3 seeds", &robust_encoder(&t), started);
    ok &= report("criterion 5", "PGD beats equal-norm random perturbations 2x on 90% of 100 images", &pgd_strength(&t), started);
    ok &= report("criterion 6", "F-MNIST one-shot adapter: +4 dB within 100 epochs, frozen weights untouched", &adapter(&t), started);

    let (first, secs) = sweep(&t);
    eprintln!("[acceptance] sweep of {} records took {secs:.0}s", first.len());
    ok &= report("criterion 7", "EECD vs teacher, DDIM and no-denoise on MS-SSIM, 2 of 3 seeds", &eecd_vs_teacher(&first), started);
    ok &= report("criterion 8", "NFE accounting and teacher/EECD wall-clock ratio", &latency_nfe(&first), started);
    let (second, _) = sweep(&t);
    ok &= report("criterion 9", "repeated sweep reproduces aggregates within 1e-5", &determinism(&first, &second), started);

    ok &= report("check", "codec reconstruction above 15 dB on training images", &codec_quality(&t), started);
    ok &= report("check", "denoiser training loss halves", &ldm_loss_drop(&t), started);
    ok &= report("check", "consistency map denoises 95% of test latents", &student_denoises(&t), started);
    ok &= report("check", "deep JSCC at least matches the no-denoise pipeline at 10 dB", &jscc_vs_no_denoise(&first), started);

    if !ok {
        println!("acceptance: some criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}

fn point_label(c: &ChannelConfig) -> String {
    format!("{} {} dB", c.kind.label(), c.snr_db)
}
