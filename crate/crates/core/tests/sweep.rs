use std::collections::BTreeMap;
use std::path::PathBuf;

use semcom::channel::{ChannelConfig, ChannelKind};
use semcom::codec::{Codec, CodecConfig};
use semcom::config::{ExperimentConfig, PerceptualBackend};
use semcom::data::{load_dataset_from, DatasetSource, DatasetSpec, ImageSet};
use semcom::diffusion::{ConsistencyModel, Denoiser, DenoiserConfig, TimeSchedule};
use semcom::jscc::Jscc;
use semcom::metrics::{ImageShape, SsimDistance};
use semcom::pipeline::{Method, Models};
use semcom::rng::seeded;
use semcom::sweep::{aggregate, read_jsonl, run_sweep, write_jsonl, RunRecord};
use semcom::Error;

fn tiny_codec() -> CodecConfig {
    CodecConfig {
        image: ImageShape::new(1, 32, 32),
        latent_k: 64,
        enc_widths: [4, 4, 8, 8, 8, 8],
        gen_widths: [8, 8, 4, 4, 4, 4],
        disc_widths: vec![4, 4],
    }
}

fn models() -> Models {
    let mut rng = seeded(11);
    let codec = Codec::new(tiny_codec(), &mut rng).unwrap();
    let schedule = TimeSchedule::default();
    let teacher = Denoiser::new(DenoiserConfig { dim: 128, width: 8, emb: 8 }, &mut rng).unwrap();
    let student = ConsistencyModel::from_teacher(&teacher, &schedule);
    Models {
        encoder: Some(codec.encoder),
        generator: Some(codec.generator),
        schedule,
        teacher: Some(teacher),
        student: Some(student),
        jscc: Some(Jscc::new(tiny_codec(), &mut rng).unwrap()),
        adapter: None,
    }
}

fn test_set() -> ImageSet {
    let mut spec = DatasetSpec::new(DatasetSource::Mnist);
    spec.test_limit = Some(8);
    load_dataset_from(&spec, None).unwrap().test
}

fn grid(channels: Vec<ChannelConfig>) -> ExperimentConfig {
    ExperimentConfig {
        version: 1,
        dataset: DatasetSpec::new(DatasetSource::Mnist),
        cbr: 1.0 / 16.0,
        channels,
        methods: Method::ALL.to_vec(),
        seeds: vec![0, 5],
        test_images: 5,
        batch: 2,
        use_adapter: false,
        perceptual: PerceptualBackend::Ssim,
        bundle: PathBuf::from("unused"),
        output_dir: PathBuf::from("unused"),
    }
}

fn points() -> Vec<ChannelConfig> {
    vec![ChannelConfig::new(ChannelKind::Awgn, 0.0), ChannelConfig::new(ChannelKind::Rician { k: 1.0 }, 15.0)]
}

fn without_timing(mut r: RunRecord) -> RunRecord {
    r.wall_ms = 0.0;
    r.mean.remove("latency_ms");
    r.std.remove("latency_ms");
    for p in &mut r.per_image {
        p.latency_ms = 0.0;
    }
    r
}

#[test]
fn repeated_sweeps_agree_apart_from_timing() {
    let (m, test, cfg) = (models(), test_set(), grid(points()));
    let a = run_sweep(&cfg, &m, &test, &SsimDistance).unwrap();
    let b = run_sweep(&cfg, &m, &test, &SsimDistance).unwrap();
    assert_eq!(a.len(), 2 * 6 * 2);
    let a: Vec<_> = a.into_iter().map(without_timing).collect();
    let b: Vec<_> = b.into_iter().map(without_timing).collect();
    assert_eq!(a, b);
}

#[test]
fn records_follow_grid_order_and_share_draws_per_point() {
    let (m, test, cfg) = (models(), test_set(), grid(points()));
    let recs = run_sweep(&cfg, &m, &test, &SsimDistance).unwrap();
    let mut i = 0;
    let mut draws: BTreeMap<(usize, u64), Vec<&str>> = BTreeMap::new();
    for (p, point) in cfg.channels.iter().enumerate() {
        for method in &cfg.methods {
            for &seed in &cfg.seeds {
                let r = &recs[i];
                assert_eq!((&r.channel, &r.method, r.seed), (point, method, seed));
                if *method != Method::DeepJscc {
                    draws.entry((p, seed)).or_default().push(&r.draws);
                }
                i += 1;
            }
        }
    }
    for group in draws.values() {
        assert!(group.iter().all(|d| *d == group[0]), "latent methods saw different channel draws");
    }
    assert_ne!(draws[&(0, 0)][0], draws[&(0, 5)][0]);
}

#[test]
fn evaluation_counts_match_the_method() {
    let (m, test, cfg) = (models(), test_set(), grid(points()));
    for r in run_sweep(&cfg, &m, &test, &SsimDistance).unwrap() {
        assert_eq!(r.nfe, r.method.expected_nfe(r.start_step), "{:?}", r.method);
        assert_eq!(r.start_step, m.schedule.start_step(r.channel.sigma2()).0);
        assert!(r.per_image.iter().all(|p| p.nfe == r.nfe));
        assert_eq!(r.per_image.len(), cfg.test_images);
    }
}

#[test]
fn aggregates_and_jsonl_round_trip() {
    let (m, test, cfg) = (models(), test_set(), grid(points()[..1].to_vec()));
    let recs = run_sweep(&cfg, &m, &test, &SsimDistance).unwrap();
    for r in &recs {
        let (mean, std) = aggregate(&r.per_image);
        assert_eq!((&mean, &std), (&r.mean, &r.std));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    write_jsonl(&path, &recs).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), recs);
}

#[test]
fn empty_channel_grid_gives_no_records() {
    let recs = run_sweep(&grid(vec![]), &models(), &test_set(), &SsimDistance).unwrap();
    assert!(recs.is_empty());
}

#[test]
fn mismatched_bandwidth_ratio_is_a_config_error() {
    let mut cfg = grid(points());
    cfg.cbr = 1.0 / 8.0;
    assert!(matches!(run_sweep(&cfg, &models(), &test_set(), &SsimDistance), Err(Error::Config(_))));
}
