//! Experiment configuration: one TOML file, every field defaulted.

use std::path::{Path, PathBuf};

use serde::de::{DeserializeOwned, Error as _};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use semcloak_core::attacks::{AttackConfig, InverseNetConfig, Optimizer, Strategy};
use semcloak_core::codec::CodecConfig;
use semcloak_core::data::{FaceSetConfig, SplitSpec};
use semcloak_core::generator::GeneratorConfig;
use semcloak_core::metrics::IdentityConfig;
use semcloak_core::signal::{ChannelFamily, ChannelSpec};
use semcloak_core::steg::StegConfig;

use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed. Every stage derives its own stream from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Where stage checkpoints live. Defaults to `out_dir/checkpoints`; runs that share it
    /// share their trained models.
    pub checkpoint_dir: Option<PathBuf>,
    /// Worker threads for the attack grid.
    pub workers: usize,
    /// Train a stage whose checkpoint is missing instead of failing.
    pub train_missing: bool,
    pub dataset: DatasetConfig,
    pub identity: IdentityConfig,
    pub codec: CodecConfig,
    pub generator: GeneratorConfig,
    pub steg: StegConfig,
    pub attacks: AttackGridConfig,
    pub defense: DefenseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_dir: None,
            workers: 1,
            train_missing: true,
            dataset: DatasetConfig::default(),
            identity: IdentityConfig::default(),
            codec: CodecConfig::default(),
            generator: GeneratorConfig::default(),
            steg: StegConfig::default(),
            attacks: AttackGridConfig::default(),
            defense: DefenseConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Folder with one subfolder of images per identity. Unset selects the procedural faces.
    pub path: Option<PathBuf>,
    /// TOML table mapping subfolder names to identity labels. Unset uses the folder names.
    pub labels: Option<PathBuf>,
    /// Images are resized to `image_size × image_size` RGB.
    pub image_size: usize,
    pub split: SplitSpec,
    pub synthetic: FaceSetConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let synthetic = FaceSetConfig::default();
        Self {
            path: None,
            labels: None,
            image_size: synthetic.size,
            split: SplitSpec::default(),
            synthetic,
        }
    }
}

impl DatasetConfig {
    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.image_size, self.image_size]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackGridConfig {
    pub strategies: Vec<Strategy>,
    /// Also score Eve with direct decoder access (the undefended link's own output).
    pub baseline: bool,
    pub families: Vec<ChannelFamily>,
    pub snrs: Vec<f64>,
    /// Closed-box probe count `M`, drawn from the training split.
    pub probes: usize,
    /// Evaluate on at most this many test images.
    pub eval_limit: Option<usize>,
    /// Fields given here override the grid defaults, not those of [`AttackConfig`].
    #[serde(deserialize_with = "glass_patch")]
    pub glass: AttackConfig,
    #[serde(deserialize_with = "genai_glass_patch")]
    pub genai_glass: AttackConfig,
    pub inverse: InverseNetConfig,
}

fn default_glass() -> AttackConfig {
    AttackConfig {
        optimizer: Optimizer::Gd,
        lr: 0.3,
        max_iters: 30,
        ..AttackConfig::default()
    }
}

fn default_genai_glass() -> AttackConfig {
    AttackConfig {
        lr: 1e-2,
        max_iters: 300,
        ..AttackConfig::default()
    }
}

/// Deserializes a partial table on top of `base`.
fn patch<'de, D: Deserializer<'de>, T: Serialize + DeserializeOwned>(d: D, base: T) -> std::result::Result<T, D::Error> {
    let patch = serde_json::Value::deserialize(d)?;
    let mut value = serde_json::to_value(base).map_err(D::Error::custom)?;
    if let (Some(obj), serde_json::Value::Object(p)) = (value.as_object_mut(), patch) {
        obj.extend(p);
    }
    serde_json::from_value(value).map_err(D::Error::custom)
}

fn glass_patch<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<AttackConfig, D::Error> {
    patch(d, default_glass())
}

fn genai_glass_patch<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<AttackConfig, D::Error> {
    patch(d, default_genai_glass())
}

impl Default for AttackGridConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            baseline: true,
            families: vec![ChannelFamily::Awgn, ChannelFamily::Rayleigh],
            snrs: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            probes: 100,
            eval_limit: None,
            glass: default_glass(),
            genai_glass: default_genai_glass(),
            inverse: InverseNetConfig::default(),
        }
    }
}

impl AttackGridConfig {
    /// Every (family, snr) cell of the sweep, families outermost.
    pub fn channels(&self) -> Vec<ChannelSpec> {
        self.families
            .iter()
            .flat_map(|&f| self.snrs.iter().map(move |&s| ChannelSpec::new(f, s)))
            .collect()
    }

    pub fn attack_config(&self, strategy: Strategy) -> &AttackConfig {
        if strategy == Strategy::GenaiGlass {
            &self.genai_glass
        } else {
            &self.glass
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    pub enabled: bool,
    pub family: ChannelFamily,
    /// SNR of Eve's link for the privacy table.
    pub eve_snr: f64,
    /// SNRs of Bob's link for the utility sweep.
    pub bob_snrs: Vec<f64>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            family: ChannelFamily::Awgn,
            eve_snr: 20.0,
            bob_snrs: vec![0.0, 5.0, 10.0, 15.0, 20.0],
        }
    }
}

impl ExperimentConfig {
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| self.out_dir.join("checkpoints"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The full configuration with every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Toml(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        let size = self.dataset.image_size;
        if size == 0 || !size.is_multiple_of(4) {
            return bad(format!("image_size must be a positive multiple of 4, got {size}"));
        }
        if self.dataset.split.train_parts == 0 || self.dataset.split.test_parts == 0 {
            return bad("split parts must both be positive".into());
        }
        let a = &self.attacks;
        for (i, s) in a.strategies.iter().enumerate() {
            if a.strategies[..i].contains(s) {
                return bad(format!("strategy {s} listed twice"));
            }
        }
        if a.probes == 0 {
            return bad("closed-box attacks need at least one probe".into());
        }
        if a.snrs.iter().chain(&self.defense.bob_snrs).chain([&self.defense.eve_snr]).any(|s| s.is_nan()) {
            return bad("SNR values must not be NaN".into());
        }
        if a.eval_limit == Some(0) {
            return bad("eval_limit must be positive when set".into());
        }
        a.glass.validate()?;
        a.genai_glass.validate()?;
        self.codec.loss.validate()?;
        self.steg.loss.validate()?;
        for spec in a.channels() {
            spec.validate()?;
        }
        Ok(())
    }
}
