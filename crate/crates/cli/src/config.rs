use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use metavgan::datasets::SyntheticBenchSpec;
use metavgan::episodes::{EpisodeConfig, Shots};
use metavgan::genmodel::{DiscMode, HiddenWidths, LatentSource, ModelConfig};
use metavgan::metatrain::MetaConfig;
use metavgan::zsleval::EvalConfig;
use serde::{Deserialize, Serialize};

/// Model settings; the feature and attribute widths come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub dropout_rate: f64,
    pub disc_mode: DiscMode,
    pub de_term_z: LatentSource,
    pub weight_clip: f64,
    pub literal_eq4: bool,
    pub hidden: HiddenWidths,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            latent_dim: 20,
            dropout_rate: 0.3,
            disc_mode: DiscMode::Critic,
            de_term_z: LatentSource::Posterior,
            weight_clip: 0.01,
            literal_eq4: false,
            hidden: HiddenWidths::default(),
        }
    }
}

impl ModelSection {
    pub fn build(&self, feature_dim: usize, attr_dim: usize) -> metavgan::Result<ModelConfig> {
        let mut cfg = ModelConfig::new(feature_dim, attr_dim, self.latent_dim, &self.hidden, self.dropout_rate)?;
        cfg.disc_mode = self.disc_mode;
        cfg.de_term_z = self.de_term_z;
        cfg.weight_clip = self.weight_clip;
        cfg.literal_eq4 = self.literal_eq4;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Classes to synthesize; empty means every unseen class.
    pub classes: Vec<String>,
    /// Rows per class.
    pub n: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            classes: Vec::new(),
            n: 300,
        }
    }
}

/// Everything a command needs, read from one TOML file with flag overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub out: PathBuf,
    /// Examples kept per seen class: a count or `all`.
    pub shots: String,
    /// Draw query rows from every seen training row instead of the few-shot pool.
    pub val_from_full: bool,
    /// Checkpoint read by `eval` and `synth`; defaults to `<out>/checkpoint.bin`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub model: ModelSection,
    pub episodes: EpisodeConfig,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
    /// Synthetic benchmark written by `gen-data`; its seed is the run seed.
    pub data: SyntheticBenchSpec,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_dir: PathBuf::from("data"),
            out: PathBuf::from("out"),
            shots: "5".into(),
            val_from_full: false,
            checkpoint: None,
            model: ModelSection::default(),
            episodes: EpisodeConfig::default(),
            meta: MetaConfig::default(),
            eval: EvalConfig::default(),
            data: SyntheticBenchSpec::default(),
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn shots(&self) -> Result<Shots> {
        Ok(self.shots.parse::<Shots>()?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            bail!("seed must be at most {}", i64::MAX);
        }
        self.shots()?;
        self.episodes.validate()?;
        self.meta.validate()?;
        self.eval.classifier.validate()?;
        if self.eval.per_class == 0 {
            bail!("eval.per_class must be >= 1");
        }
        if self.synth.n == 0 {
            bail!("synth.n must be >= 1");
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.bin"))
    }

    /// Writes the effective configuration to `<out>/<name>.toml`.
    pub fn echo(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(format!("{name}.toml"));
        let text = toml::to_string(self).context("encoding the effective config")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
