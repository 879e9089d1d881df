//! A directory holding every trained component plus a JSON manifest.
//! Training commands take an exclusive lock file on the directory.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::AdapterParams;
use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, CodecConfig, Encoder};
use crate::diffusion::{ConsistencyModel, Denoiser, DenoiserConfig, TimeSchedule};
use crate::error::{Error, Result};
use crate::jscc::Jscc;
use crate::nn::Linear;
use crate::rng::{seeded, RngState};

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Slot {
    Codec,
    RobustEncoder,
    Teacher,
    Student,
    Adapter,
    Jscc,
}

impl Slot {
    pub const ALL: [Slot; 6] = [Slot::Codec, Slot::RobustEncoder, Slot::Teacher, Slot::Student, Slot::Adapter, Slot::Jscc];

    pub fn file(&self) -> &'static str {
        match self {
            Slot::Codec => "codec.ckpt",
            Slot::RobustEncoder => "robust_encoder.ckpt",
            Slot::Teacher => "teacher.ckpt",
            Slot::Student => "student.ckpt",
            Slot::Adapter => "adapter.ckpt",
            Slot::Jscc => "jscc.ckpt",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Slot::Codec => "codec",
            Slot::RobustEncoder => "robust-encoder",
            Slot::Teacher => "teacher",
            Slot::Student => "student",
            Slot::Adapter => "adapter",
            Slot::Jscc => "jscc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotEntry {
    pub file: String,
    pub sha256: String,
    /// Free-form provenance, e.g. the training log summary.
    #[serde(default)]
    pub info: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub slots: BTreeMap<Slot, SlotEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest { version: BUNDLE_VERSION, slots: BTreeMap::new() }
    }
}

/// Exclusive hold on a bundle directory, released on drop.
#[derive(Debug)]
pub struct BundleLock {
    path: PathBuf,
}

impl BundleLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(BundleLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = std::fs::read_to_string(&path).unwrap_or_default();
                Err(Error::Config(format!(
                    "bundle {} is locked by process {}; remove {} if that run is gone",
                    dir.display(),
                    owner.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for BundleLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug)]
pub struct Bundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn sha_hex(b: &[u8]) -> String {
    Sha256::digest(b).iter().map(|v| format!("{v:02x}")).collect()
}

impl Bundle {
    /// Opens an existing bundle or starts an empty one.
    pub fn open_or_create(dir: &Path) -> Result<Self> {
        if dir.join(MANIFEST).exists() {
            return Self::open(dir);
        }
        std::fs::create_dir_all(dir)?;
        let b = Bundle { dir: dir.to_path_buf(), manifest: Manifest::default() };
        b.write_manifest()?;
        Ok(b)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&p)
            .map_err(|e| Error::Config(format!("no bundle manifest at {}: {e}", p.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != BUNDLE_VERSION {
            return Err(Error::Config(format!("unsupported bundle version {}", manifest.version)));
        }
        Ok(Bundle { dir: dir.to_path_buf(), manifest })
    }

    fn write_manifest(&self) -> Result<()> {
        let tmp = self.dir.join("manifest.partial");
        std::fs::write(&tmp, serde_json::to_string_pretty(&self.manifest)?)?;
        std::fs::rename(tmp, self.dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn has(&self, slot: Slot) -> bool {
        self.manifest.slots.contains_key(&slot)
    }

    /// Errors (as a config problem) unless every listed slot is present.
    pub fn require(&self, slots: &[Slot]) -> Result<()> {
        let missing: Vec<&str> = slots.iter().filter(|s| !self.has(**s)).map(|s| s.name()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("bundle {} is missing: {}", self.dir.display(), missing.join(", "))))
        }
    }

    pub fn put(&mut self, slot: Slot, ck: &Checkpoint, info: serde_json::Value) -> Result<()> {
        let bytes = ck.to_bytes()?;
        let path = self.dir.join(slot.file());
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, &path)?;
        self.manifest.slots.insert(slot, SlotEntry { file: slot.file().into(), sha256: sha_hex(&bytes), info });
        self.write_manifest()
    }

    pub fn get(&self, slot: Slot) -> Result<Checkpoint> {
        let entry = self
            .manifest
            .slots
            .get(&slot)
            .ok_or_else(|| Error::Config(format!("bundle {} has no {}", self.dir.display(), slot.name())))?;
        let bytes = std::fs::read(self.dir.join(&entry.file))
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", entry.file)))?;
        if sha_hex(&bytes) != entry.sha256 {
            return Err(Error::Format(format!("{} does not match its manifest checksum", entry.file)));
        }
        Checkpoint::from_bytes(&bytes)
    }
}

const LATENT_MEAN: &str = "encoder.latent_mean";

fn with_latent_mean(ck: Checkpoint, encoder: &Encoder) -> Checkpoint {
    match &encoder.latent_mean {
        Some(m) => ck.add_raw(LATENT_MEAN, &[m.len()], m.clone()),
        None => ck,
    }
}

fn load_latent_mean(ck: &Checkpoint, encoder: &mut Encoder) -> Result<()> {
    if let Some((e, data)) = ck.raw(LATENT_MEAN) {
        if e.shape != [encoder.mu.out_features()] {
            return Err(Error::shape(encoder.mu.out_features(), format!("{:?}", e.shape)));
        }
        encoder.latent_mean = Some(data.clone());
    }
    Ok(())
}

pub fn codec_checkpoint(codec: &Codec, rng: Option<RngState>) -> Result<Checkpoint> {
    let ck = Checkpoint::new("codec", &codec.config)?
        .add_module("encoder", &codec.encoder)
        .add_module("generator", &codec.generator)
        .add_module("discriminator", &codec.discriminator);
    let ck = with_latent_mean(ck, &codec.encoder);
    Ok(match rng {
        Some(r) => ck.with_rng(r),
        None => ck,
    })
}

pub fn codec_from(ck: &Checkpoint) -> Result<Codec> {
    ck.expect_kind("codec")?;
    let mut codec = Codec::new(ck.config_as::<CodecConfig>()?, &mut seeded(0))?;
    ck.load_module("encoder", &mut codec.encoder)?;
    load_latent_mean(ck, &mut codec.encoder)?;
    ck.load_module("generator", &mut codec.generator)?;
    ck.load_module("discriminator", &mut codec.discriminator)?;
    Ok(codec)
}

pub fn encoder_checkpoint(config: &CodecConfig, encoder: &Encoder, info: &impl Serialize) -> Result<Checkpoint> {
    let ck = Checkpoint::new("encoder", &serde_json::json!({ "codec": config, "info": info }))?.add_module("encoder", encoder);
    Ok(with_latent_mean(ck, encoder))
}

pub fn encoder_from(ck: &Checkpoint) -> Result<Encoder> {
    ck.expect_kind("encoder")?;
    let cfg: CodecConfig = serde_json::from_value(ck.config["codec"].clone())?;
    let mut enc = Encoder::new(&cfg, &mut seeded(0));
    ck.load_module("encoder", &mut enc)?;
    load_latent_mean(ck, &mut enc)?;
    Ok(enc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DenoiserMeta {
    denoiser: DenoiserConfig,
    schedule: TimeSchedule,
}

pub fn teacher_checkpoint(net: &Denoiser, schedule: &TimeSchedule, rng: Option<RngState>) -> Result<Checkpoint> {
    let ck = Checkpoint::new("teacher", &DenoiserMeta { denoiser: net.config, schedule: schedule.clone() })?
        .add_module("net", net);
    Ok(match rng {
        Some(r) => ck.with_rng(r),
        None => ck,
    })
}

pub fn teacher_from(ck: &Checkpoint) -> Result<(Denoiser, TimeSchedule)> {
    ck.expect_kind("teacher")?;
    let meta: DenoiserMeta = ck.config_as()?;
    let mut net = Denoiser::new(meta.denoiser, &mut seeded(0))?;
    ck.load_module("net", &mut net)?;
    Ok((net, meta.schedule))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StudentMeta {
    denoiser: DenoiserConfig,
    schedule: TimeSchedule,
    sigma_data: f64,
    steps: u64,
}

pub fn student_checkpoint(cm: &ConsistencyModel, schedule: &TimeSchedule) -> Result<Checkpoint> {
    let meta = StudentMeta { denoiser: cm.online.config, schedule: schedule.clone(), sigma_data: cm.sigma_data, steps: cm.steps };
    Ok(Checkpoint::new("student", &meta)?
        .add_module("online", &cm.online)
        .add_module("target", &cm.target)
        .add_module("ema", &cm.ema))
}

pub fn student_from(ck: &Checkpoint) -> Result<(ConsistencyModel, TimeSchedule)> {
    ck.expect_kind("student")?;
    let meta: StudentMeta = ck.config_as()?;
    let base = Denoiser::new(meta.denoiser, &mut seeded(0))?;
    let mut cm = ConsistencyModel::from_teacher(&base, &meta.schedule);
    ck.load_module("online", &mut cm.online)?;
    ck.load_module("target", &mut cm.target)?;
    ck.load_module("ema", &mut cm.ema)?;
    cm.target = crate::nn::Module::frozen(&cm.target);
    cm.ema = crate::nn::Module::frozen(&cm.ema);
    cm.sigma_data = meta.sigma_data;
    cm.steps = meta.steps;
    Ok((cm, meta.schedule))
}

pub fn adapter_checkpoint(adapter: &AdapterParams, head: &Linear, info: &impl Serialize) -> Result<Checkpoint> {
    let meta = serde_json::json!({ "dim": adapter.dim, "diagonal": adapter.diagonal, "info": info });
    Ok(Checkpoint::new("adapter", &meta)?.add_module("adapter", adapter).add_module("head", head))
}

pub fn adapter_from(ck: &Checkpoint) -> Result<AdapterParams> {
    ck.expect_kind("adapter")?;
    let dim = ck.config["dim"].as_u64().ok_or_else(|| Error::Format("adapter checkpoint lacks dim".into()))? as usize;
    let diagonal = ck.config["diagonal"].as_bool().unwrap_or(false);
    let mut a = AdapterParams::identity(dim, diagonal);
    ck.load_module("adapter", &mut a)?;
    Ok(a)
}

pub fn jscc_checkpoint(model: &Jscc, info: &impl Serialize) -> Result<Checkpoint> {
    Ok(Checkpoint::new("jscc", &serde_json::json!({ "codec": model.config, "info": info }))?.add_module("", model))
}

pub fn jscc_from(ck: &Checkpoint) -> Result<Jscc> {
    ck.expect_kind("jscc")?;
    let cfg: CodecConfig = serde_json::from_value(ck.config["codec"].clone())?;
    let mut m = Jscc::new(cfg, &mut seeded(0))?;
    ck.load_module("", &mut m)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ImageShape;
    use crate::nn::Module;

    fn tiny_codec() -> Codec {
        let mut cfg = CodecConfig::desk(ImageShape::new(1, 32, 32));
        cfg.enc_widths = [2; 6];
        cfg.gen_widths = [4, 2, 2, 2, 2, 2];
        cfg.disc_widths = vec![2];
        cfg.latent_k = 4;
        Codec::new(cfg, &mut seeded(5)).unwrap()
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = BundleLock::acquire(dir.path()).unwrap();
        let err = BundleLock::acquire(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        drop(a);
        BundleLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn slots_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = Bundle::open_or_create(dir.path()).unwrap();
        assert!(b.require(&[Slot::Codec]).is_err());
        let codec = tiny_codec();
        b.put(Slot::Codec, &codec_checkpoint(&codec, None).unwrap(), serde_json::Value::Null).unwrap();
        let schedule = TimeSchedule::default();
        let net = Denoiser::new(DenoiserConfig { dim: 8, width: 4, emb: 8 }, &mut seeded(1)).unwrap();
        b.put(Slot::Teacher, &teacher_checkpoint(&net, &schedule, None).unwrap(), serde_json::Value::Null).unwrap();
        let cm = ConsistencyModel::from_teacher(&net, &schedule);
        b.put(Slot::Student, &student_checkpoint(&cm, &schedule).unwrap(), serde_json::Value::Null).unwrap();

        let reopened = Bundle::open(dir.path()).unwrap();
        reopened.require(&[Slot::Codec, Slot::Teacher, Slot::Student]).unwrap();
        let c2 = codec_from(&reopened.get(Slot::Codec).unwrap()).unwrap();
        assert_eq!(c2.encoder.checksum(), codec.encoder.checksum());
        assert_eq!(c2.discriminator.checksum(), codec.discriminator.checksum());
        let (n2, s2) = teacher_from(&reopened.get(Slot::Teacher).unwrap()).unwrap();
        assert_eq!(n2.checksum(), net.checksum());
        assert_eq!(s2, schedule);
        let (cm2, _) = student_from(&reopened.get(Slot::Student).unwrap()).unwrap();
        assert_eq!(cm2.ema.checksum(), cm.ema.checksum());
        assert!(matches!(teacher_from(&reopened.get(Slot::Student).unwrap()), Err(Error::Config(_))));

        std::fs::write(dir.path().join(Slot::Teacher.file()), b"garbage").unwrap();
        assert!(matches!(reopened.get(Slot::Teacher), Err(Error::Format(_))));
    }

    #[test]
    fn latent_mean_travels_with_the_encoder() {
        let mut codec = tiny_codec();
        assert!(codec_from(&codec_checkpoint(&codec, None).unwrap()).unwrap().encoder.latent_mean.is_none());
        let pixels: Vec<f32> = (0..3 * 1024).map(|i| (i % 7) as f32 / 7.0).collect();
        let images = crate::data::ImageSet::new(ImageShape::new(1, 32, 32), pixels, None).unwrap();
        codec.encoder.fit_latent_mean(&images, 2);
        let want = codec.encoder.latent_mean.clone().unwrap();
        assert_eq!(want.len(), codec.latent_dim());
        let back = codec_from(&Checkpoint::from_bytes(&codec_checkpoint(&codec, None).unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.encoder.latent_mean.as_ref(), Some(&want));
        let ck = encoder_checkpoint(&codec.config, &codec.encoder, &()).unwrap();
        assert_eq!(encoder_from(&ck).unwrap().latent_mean, Some(want));
    }
}
