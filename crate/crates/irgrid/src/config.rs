//! Run configuration file (JSON). Relative paths resolve against the
//! directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use irgrid_core::explain::{resistance_channels, ExplainOptions};
use irgrid_core::featurize::CHANNELS;
use irgrid_core::model::AttUNetConfig;
use irgrid_core::synth::SynthParams;
use irgrid_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct Paths {
    /// Corpus directory used for training or evaluation.
    pub corpus: Option<PathBuf>,
    /// Checkpoint to start from, normally the pretrained model when finetuning.
    pub init_checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct ExplainConfig {
    pub k: usize,
    pub factor: f64,
    pub fraction: f64,
    pub channels: Vec<usize>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        let d = ExplainOptions::default();
        Self {
            k: 25,
            factor: d.factor,
            fraction: d.fraction,
            channels: resistance_channels(),
        }
    }
}

impl ExplainConfig {
    pub fn options(&self) -> ExplainOptions {
        ExplainOptions {
            factor: self.factor,
            fraction: self.fraction,
            channels: self.channels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: AttUNetConfig,
    pub train: TrainConfig,
    /// Apply the six flips and rotations to the training corpus.
    pub augment: bool,
    pub synth: SynthParams,
    pub feature_size: usize,
    pub explain: ExplainConfig,
    /// Whether the file set `train` explicitly.
    #[serde(skip)]
    pub train_given: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            model: AttUNetConfig::default(),
            train: TrainConfig::default(),
            augment: true,
            synth: SynthParams::default(),
            feature_size: 512,
            explain: ExplainConfig::default(),
            train_given: false,
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>, must_exist: bool, what: &str) -> Result<()> {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
        if must_exist && !path.exists() {
            bail!("{what} {} does not exist", path.display());
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.train_given = serde_json::from_str::<serde_json::Value>(&text)?.get("train").is_some();
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.paths.corpus, true, "corpus")?;
        resolve(base, &mut cfg.paths.init_checkpoint, true, "checkpoint")?;
        resolve(base, &mut cfg.paths.output, false, "output")?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        self.model.check()?;
        self.train.check()?;
        self.synth.check()?;
        if self.feature_size == 0 {
            bail!("featureSize must be positive");
        }
        if let Some(&c) = self.explain.channels.iter().find(|&&c| c >= CHANNELS) {
            bail!("explain channel {c} out of range (0..{CHANNELS})");
        }
        if !(self.explain.factor > 0.0 && self.explain.factor <= 1.0) {
            bail!("explain factor must lie in (0, 1]");
        }
        if !(self.explain.fraction > 0.0 && self.explain.fraction < 1.0) {
            bail!("explain fraction must lie in (0, 1)");
        }
        Ok(())
    }
}
