//! Experiment configuration: TOML file plus command-line overrides.
//!
//! Defaults reproduce the reference CIFAR-10 setup: |D|=2048, P=6,
//! Q=0.4·|D|, λ=10⁻³, 5/3 pooling, linear head, 175-epoch schedule.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use patchvq::encoder::Assignment;
use patchvq::whitening::Orientation;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory holding the CIFAR-10 binary batch files.
    pub dataset_root: PathBuf,
    /// Where timestamped run directories are created.
    pub output_root: PathBuf,
    /// Where dictionaries, caches and checkpoints live.
    pub artifacts_dir: PathBuf,
    pub dictionary: DictionarySection,
    pub encoder: EncoderSection,
    pub classifier: ClassifierSection,
    pub train: TrainSection,
    pub analysis: AnalysisSection,
    pub seeds: SeedsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionarySection {
    pub size: usize,
    pub patch_side: usize,
    pub lambda: f64,
    /// "zca" or "pca"
    pub orientation: String,
    /// Gaussian white-noise atoms instead of sampled image patches.
    pub gaussian: bool,
    /// Patches drawn for covariance estimation.
    pub moment_sample: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    /// Neighbors as a fraction of the dictionary size; `q` overrides.
    pub q_fraction: f64,
    pub q: Option<usize>,
    /// "hard" or "soft"
    pub assignment: String,
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub k2: usize,
    pub c2: usize,
    pub k3: usize,
    pub hidden: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Re-augment and re-encode the training split every epoch (slow path).
    pub augment: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub patch_sides: Vec<usize>,
    pub lambda: f64,
    pub moment_sample: usize,
    pub knn_sample: usize,
    pub neighbor_horizon: usize,
    pub anchor_budget: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    pub dictionary: u64,
    pub training: u64,
    pub augmentation: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_root: PathBuf::from("data/cifar-10-batches-bin"),
            output_root: PathBuf::from("runs"),
            artifacts_dir: PathBuf::from("artifacts"),
            dictionary: DictionarySection::default(),
            encoder: EncoderSection::default(),
            classifier: ClassifierSection::default(),
            train: TrainSection::default(),
            analysis: AnalysisSection::default(),
            seeds: SeedsSection::default(),
        }
    }
}

impl Default for DictionarySection {
    fn default() -> Self {
        DictionarySection {
            size: 2048,
            patch_side: 6,
            lambda: 1e-3,
            orientation: "zca".into(),
            gaussian: false,
            moment_sample: 500_000,
        }
    }
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            q_fraction: 0.4,
            q: None,
            assignment: "hard".into(),
            pool_kernel: 5,
            pool_stride: 3,
        }
    }
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            k2: 1,
            c2: 128,
            k3: 6,
            hidden: false,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 175,
            lr: 0.003,
            decay_epochs: vec![100, 150],
            decay_factor: 0.1,
            momentum: 0.9,
            batch_size: 512,
            augment: false,
        }
    }
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            patch_sides: vec![4, 5, 6, 7, 8],
            lambda: 1e-3,
            moment_sample: 200_000,
            knn_sample: 16_000,
            neighbor_horizon: 4_000,
            anchor_budget: 512,
        }
    }
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection {
            dictionary: 13,
            training: 7,
            augmentation: 99,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dictionary.size == 0 {
            bail!("dictionary.size must be >= 1");
        }
        if self.dictionary.patch_side == 0 {
            bail!("dictionary.patch_side must be >= 1");
        }
        if self.dictionary.lambda < 0.0 {
            bail!("dictionary.lambda must be nonnegative");
        }
        self.orientation()?;
        self.assignment()?;
        if self.encoder.q.is_none()
            && !(self.encoder.q_fraction > 0.0 && self.encoder.q_fraction <= 1.0)
        {
            bail!(
                "encoder.q_fraction must lie in (0, 1], got {}",
                self.encoder.q_fraction
            );
        }
        let q = self.resolved_q();
        if q == 0 || q > 2 * self.dictionary.size {
            bail!("resolved Q={q} must lie in [1, 2·|D|]");
        }
        if self.encoder.pool_kernel == 0 || self.encoder.pool_stride == 0 {
            bail!("pooling kernel and stride must be >= 1");
        }
        if self.train.batch_size < 2 {
            bail!("train.batch_size must be >= 2");
        }
        Ok(())
    }

    /// Explicit Q if given, otherwise round(qFraction · |D|).
    pub fn resolved_q(&self) -> usize {
        match self.encoder.q {
            Some(q) => q,
            None => (self.encoder.q_fraction * self.dictionary.size as f64).round() as usize,
        }
    }

    pub fn orientation(&self) -> Result<Orientation> {
        self.dictionary
            .orientation
            .parse::<Orientation>()
            .map_err(|e| anyhow::anyhow!(e))
    }

    pub fn assignment(&self) -> Result<Assignment> {
        self.encoder
            .assignment
            .parse::<Assignment>()
            .map_err(|e| anyhow::anyhow!(e))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing effective config")
    }

    pub fn whitening_file(&self) -> PathBuf {
        self.artifacts_dir.join("whitening.bin")
    }

    pub fn dict_file(&self) -> PathBuf {
        self.artifacts_dir.join("dictionary.bin")
    }

    pub fn train_cache(&self) -> PathBuf {
        self.artifacts_dir.join("train.cache")
    }

    pub fn test_cache(&self) -> PathBuf {
        self.artifacts_dir.join("test.cache")
    }

    pub fn model_file(&self) -> PathBuf {
        self.artifacts_dir.join("model.bin")
    }
}
