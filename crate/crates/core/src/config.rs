//! Declarative, versioned configuration files (JSON or TOML) for training
//! and evaluation. Every parsed config has a stable content hash.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::AdaptConfig;
use crate::channel::{ChannelConfig, ChannelKind};
use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::data::{DatasetSource, DatasetSpec};
use crate::diffusion::{EecdConfig, LdmTrainConfig, TimeSchedule};
use crate::error::{Error, Result};
use crate::jscc::JsccTrainConfig;
use crate::metrics::ImageShape;
use crate::pipeline::Method;
use crate::robustness::{RobustTrainConfig, SemanticErrorSpec};

pub const CONFIG_VERSION: u32 = 1;

/// Reads JSON, or TOML when the file name ends in `.toml`.
pub fn load_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text, path.extension().and_then(|e| e.to_str()) == Some("toml"))
}

pub fn parse<T: DeserializeOwned>(text: &str, toml_syntax: bool) -> Result<T> {
    if toml_syntax {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    } else {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// SHA-256 of the canonical JSON form, hex encoded.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let canon = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&canon).iter().map(|b| format!("{b:02x}")).collect())
}

fn check_version(v: u32) -> Result<()> {
    if v != CONFIG_VERSION {
        return Err(Error::Config(format!("config version {v} is not supported (expected {CONFIG_VERSION})")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub n: usize,
    pub eps: f64,
    pub t_max: f64,
    pub rho: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { n: 100, eps: 0.002, t_max: 2.0, rho: 7.0 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<TimeSchedule> {
        TimeSchedule::build(self.n, self.eps, self.t_max, self.rho)
    }
}

/// Everything the training subcommands read; each uses its own section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Network shapes; defaults to the desk configuration for the dataset's image size.
    pub codec: Option<CodecConfig>,
    pub codec_train: CodecTrainConfig,
    pub semantic_error: SemanticErrorSpec,
    pub robust_train: RobustTrainConfig,
    pub schedule: ScheduleConfig,
    pub denoiser_width: usize,
    pub ldm: LdmTrainConfig,
    pub eecd: EecdConfig,
    pub jscc: JsccTrainConfig,
    pub adapt: AdaptConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetSpec::new(DatasetSource::Mnist),
            codec: None,
            codec_train: CodecTrainConfig::default(),
            semantic_error: SemanticErrorSpec::default(),
            robust_train: RobustTrainConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser_width: 32,
            ldm: LdmTrainConfig::default(),
            eecd: EecdConfig::default(),
            jscc: JsccTrainConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        if let Some(c) = &self.codec {
            c.validate()?;
        }
        self.semantic_error.validate()?;
        self.schedule.build()?;
        if self.denoiser_width == 0 {
            return Err(Error::Config("denoiser_width must be positive".into()));
        }
        Ok(())
    }

    pub fn codec_config(&self, image: ImageShape) -> CodecConfig {
        self.codec.clone().unwrap_or_else(|| CodecConfig::desk(image))
    }
}

/// Which perceptual distance fills the `perceptual` metric column.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PerceptualBackend {
    /// `1 - SSIM`.
    #[default]
    Ssim,
    /// Feature distance through the bundle's trained critic.
    Critic,
    /// Feature distance through an external weights file.
    Weights { path: PathBuf },
}

/// One evaluation sweep over methods, channel points and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset: DatasetSpec,
    /// Expected bandwidth ratio; must match the bundle's codec.
    pub cbr: f64,
    pub channels: Vec<ChannelConfig>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_test_images")]
    pub test_images: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub use_adapter: bool,
    #[serde(default)]
    pub perceptual: PerceptualBackend,
    pub bundle: PathBuf,
    pub output_dir: PathBuf,
}

fn default_test_images() -> usize {
    200
}

fn default_batch() -> usize {
    50
}

impl ExperimentConfig {
    /// The desk-scale MNIST grid: three channels, five SNRs, four methods.
    pub fn desk(bundle: PathBuf, output_dir: PathBuf) -> Self {
        let mut channels = Vec::new();
        for kind in [ChannelKind::Awgn, ChannelKind::Rayleigh, ChannelKind::Rician { k: 1.0 }] {
            for snr in [0.0, 5.0, 10.0, 15.0, 20.0] {
                channels.push(ChannelConfig::new(kind, snr));
            }
        }
        ExperimentConfig {
            version: CONFIG_VERSION,
            dataset: DatasetSpec::new(DatasetSource::Mnist),
            cbr: 1.0 / 16.0,
            channels,
            methods: vec![Method::VefLdmTeacher, Method::EecdS1, Method::EecdS2, Method::NoDenoise],
            seeds: vec![0],
            test_images: 200,
            batch: 50,
            use_adapter: false,
            perceptual: PerceptualBackend::Ssim,
            bundle,
            output_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.batch == 0 || self.test_images == 0 {
            return Err(Error::Config("batch and test_images must be positive".into()));
        }
        if !(self.cbr > 0.0 && self.cbr <= 1.0) {
            return Err(Error::Config(format!("cbr must be in (0, 1], got {}", self.cbr)));
        }
        for c in &self.channels {
            if !c.snr_db.is_finite() {
                return Err(Error::Config(format!("channel SNR must be finite, got {}", c.snr_db)));
            }
            if let ChannelKind::Rician { k } = c.kind {
                if !(k.is_finite() && k >= 0.0) {
                    return Err(Error::Config(format!("Rician K must be finite and >= 0, got {k}")));
                }
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_config_sections_default() {
        let cfg: TrainingConfig = parse(r#"{"seed": 4, "codec_train": {"iterations": 7}}"#, false).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.codec_train.iterations, 7);
        assert_eq!(cfg.codec_train.batch, CodecTrainConfig::default().batch);
        assert_eq!(cfg.ldm, LdmTrainConfig::default());
        cfg.validate().unwrap();
        assert!(parse::<TrainingConfig>(r#"{"sed": 4}"#, false).is_err());
        let bad: TrainingConfig = parse(r#"{"version": 9}"#, false).unwrap();
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn experiment_config_toml_and_json_agree() {
        let toml_text = r#"
version = 1
cbr = 0.0625
methods = ["eecd-s2", "no-denoise", "ddim-2step"]
seeds = [0, 1]
bundle = "b"
output_dir = "out"

[dataset]
source = "mnist"

[[channels]]
kind = "rician"
K = 2.0
snr_db = 10.0

[[channels]]
kind = "awgn"
snr_db = 0.0
qam = true
"#;
        let a: ExperimentConfig = parse(toml_text, true).unwrap();
        a.validate().unwrap();
        assert_eq!(a.channels[0].kind, ChannelKind::Rician { k: 2.0 });
        assert!(a.channels[1].qam && a.channels[1].normalized);
        assert_eq!(a.methods[2], Method::Ddim2Step);
        let json = serde_json::to_string(&a).unwrap();
        let b: ExperimentConfig = parse(&json, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let mut c = b.clone();
        c.seeds = vec![0];
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        c.seeds.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn desk_grid_shape() {
        let d = ExperimentConfig::desk("b".into(), "o".into());
        d.validate().unwrap();
        assert_eq!(d.channels.len(), 15);
        assert_eq!(d.methods.len(), 4);
    }
}
