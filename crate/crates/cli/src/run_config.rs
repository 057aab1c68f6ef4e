//! Training run configuration (`cpn train --config`) and the resolved model
//! description written next to every checkpoint.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cpn_core::dataset::Stage;
use cpn_core::model::{CpnConfig, FusionMode, HeadKind};
use cpn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Tiny,
    Paper,
}

/// Bank parameters; unset keys keep the preset's values.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSection {
    pub lambdas: Option<Vec<f64>>,
    pub sigmas: Option<Vec<f64>>,
    pub directions: Option<usize>,
    pub size: Option<usize>,
    pub gamma: Option<f64>,
    pub curved: Option<bool>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub input_size: Option<usize>,
    pub descriptor_dim: Option<usize>,
    pub head: Option<HeadKind>,
    /// Arc-margin logit scale.
    pub s: Option<f64>,
    /// Arc-margin angular margin in radians.
    pub m: Option<f64>,
    /// Block-loss weight.
    pub mu: Option<f64>,
    pub block_loss: Option<bool>,
    pub fusion: Option<FusionMode>,
    pub init_std: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_max: Option<f64>,
    pub lr_min: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Training manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    #[serde(default)]
    pub preset: Preset,
    /// Train only on rows of this stage.
    pub stage: Option<Stage>,
    #[serde(default)]
    pub bank: BankSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cfg.manifest.is_relative() {
            cfg.manifest = path.parent().unwrap_or(Path::new(".")).join(&cfg.manifest);
        }
        Ok(cfg)
    }

    pub fn model_config(&self, n_classes: usize) -> CpnConfig {
        let mut c = match self.preset {
            Preset::Tiny => CpnConfig::tiny(n_classes),
            Preset::Paper => CpnConfig::paper(n_classes),
        };
        let b = self.bank.clone();
        set(&mut c.bank.lambdas, b.lambdas);
        set(&mut c.bank.sigmas, b.sigmas);
        set(&mut c.bank.directions, b.directions);
        set(&mut c.bank.size, b.size);
        set(&mut c.bank.gamma, b.gamma);
        set(&mut c.bank.include_curved, b.curved);
        let m = &self.model;
        set(&mut c.input_size, m.input_size);
        set(&mut c.descriptor_dim, m.descriptor_dim);
        set(&mut c.head, m.head);
        set(&mut c.arc.s, m.s);
        set(&mut c.arc.m, m.m);
        set(&mut c.mu, m.mu);
        set(&mut c.block_loss, m.block_loss);
        set(&mut c.fusion, m.fusion);
        set(&mut c.init_std, m.init_std);
        c
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut c = TrainConfig::default();
        let t = &self.train;
        set(&mut c.epochs, t.epochs);
        set(&mut c.batch_size, t.batch_size);
        set(&mut c.lr_max, t.lr_max);
        set(&mut c.lr_min, t.lr_min);
        set(&mut c.momentum, t.momentum);
        set(&mut c.weight_decay, t.weight_decay);
        set(&mut c.seed, t.seed);
        c
    }
}

/// Everything needed to rebuild a trained model from its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    /// Palm identity of each class index.
    pub identities: Vec<u32>,
    pub model_seed: u64,
    pub model: CpnConfig,
    pub train: TrainConfig,
}

impl ModelFile {
    pub const NAME: &'static str = "model.toml";
    pub const CHECKPOINT: &'static str = "model.ckpt";

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(Self::NAME), toml::to_string(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::NAME);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(toml::from_str(&text)?)
    }
}
