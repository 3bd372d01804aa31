use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::models::{BaselineConfig, BaselineKind, TransformerDenoiserConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Diffusion,
    Cnn1d,
    Lstm,
    Transformer,
    /// Tikhonov with Γ = I.
    #[serde(alias = "tikhonov")]
    Tikhonov0,
    /// Tikhonov with Γ = first differences over the heart graph.
    Tikhonov1,
    Tsvd,
}

impl ModelKind {
    pub const LEARNED: [ModelKind; 4] = [Self::Diffusion, Self::Cnn1d, Self::Lstm, Self::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Self::Diffusion => "diffusion",
            Self::Cnn1d => "cnn1d",
            Self::Lstm => "lstm",
            Self::Transformer => "transformer",
            Self::Tikhonov0 => "tikhonov0",
            Self::Tikhonov1 => "tikhonov1",
            Self::Tsvd => "tsvd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::Config(format!("unknown method {s:?}")))
    }

    pub fn is_learned(self) -> bool {
        Self::LEARNED.contains(&self)
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Self::Cnn1d => Some(BaselineKind::Cnn1d),
            Self::Lstm => Some(BaselineKind::Lstm),
            Self::Transformer => Some(BaselineKind::Transformer),
            _ => None,
        }
    }
}

/// Fixed λ and rank for the classical solvers; unset values are chosen on
/// the validation split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassicalConfig {
    pub lambda: Option<f64>,
    pub rank: Option<usize>,
}

/// Everything that determines a training, evaluation or comparison run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub model: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub denoiser: TransformerDenoiserConfig,
    pub cnn1d: BaselineConfig,
    pub lstm: BaselineConfig,
    pub transformer: BaselineConfig,
    pub classical: ClassicalConfig,
    /// Classical rows added to a comparison next to the learned methods.
    pub classical_rows: Vec<ModelKind>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            model: ModelKind::Diffusion,
            epochs: 100,
            batch_size: 32,
            learning_rate: 3e-4,
            seed: 0,
            diffusion: DiffusionConfig::default(),
            denoiser: TransformerDenoiserConfig::default(),
            cnn1d: BaselineConfig::default_for(BaselineKind::Cnn1d),
            lstm: BaselineConfig::default_for(BaselineKind::Lstm),
            transformer: BaselineConfig::default_for(BaselineKind::Transformer),
            classical: ClassicalConfig::default(),
            classical_rows: vec![ModelKind::Tikhonov0, ModelKind::Tikhonov1, ModelKind::Tsvd],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(bad) = self.classical_rows.iter().find(|k| k.is_learned()) {
            return Err(Error::Config(format!("{} is not a classical method", bad.name())));
        }
        for (kind, b) in [
            (BaselineKind::Cnn1d, &self.cnn1d),
            (BaselineKind::Lstm, &self.lstm),
            (BaselineKind::Transformer, &self.transformer),
        ] {
            if b.kind != kind {
                return Err(Error::Config(format!(
                    "baseline entry {} declares kind {}",
                    kind.name(),
                    b.kind.name()
                )));
            }
        }
        self.diffusion.validate()?;
        self.denoiser.encoder.validate()
    }

    pub fn baseline(&self, kind: BaselineKind) -> &BaselineConfig {
        match kind {
            BaselineKind::Cnn1d => &self.cnn1d,
            BaselineKind::Lstm => &self.lstm,
            BaselineKind::Transformer => &self.transformer,
        }
    }

    /// Short hash of the canonical JSON form, used to tag reports.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
