//! The run configuration: one TOML file with a section per stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::noise::{NoiseCategory, NoiseMixSpec};
use super::report::EvalMode;
use super::scoring::Unit;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::phases::{PhaseSchedule, PAPER_CLUSTERS};
use crate::objectives::train::{FinetuneConfig, PretrainConfig};
use crate::objectives::UnitKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhasesConfig {
    /// Cluster count of each phase.
    pub clusters: Vec<usize>,
    /// Encoder block (1-based) clustered from phase 2 on; 0 picks the middle block.
    pub layer: usize,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
}

impl Default for PhasesConfig {
    fn default() -> Self {
        Self {
            clusters: PAPER_CLUSTERS.to_vec(),
            layer: 0,
            kmeans_iters: 30,
            kmeans_restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub unit: UnitKind,
    /// Subword table with one `piece \t log_prob` per line; required for subword units.
    pub table: Option<PathBuf>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            unit: UnitKind::Character,
            table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub unit: Unit,
    pub modes: Vec<EvalMode>,
    pub noise: Vec<NoiseMixSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            unit: Unit::Char,
            modes: vec![EvalMode::A, EvalMode::AV],
            noise: [
                NoiseCategory::Babble,
                NoiseCategory::Music,
                NoiseCategory::Natural,
                NoiseCategory::All,
            ]
            .into_iter()
            .map(|category| NoiseMixSpec {
                category,
                snr_db: 5.0,
                seed: 0,
            })
            .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub phases: PhasesConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub vocab: VocabConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule()?;
        self.pretrain.mask.validate()?;
        if self.vocab.unit == UnitKind::Subword && self.vocab.table.is_none() {
            return Err(Error::Config("subword units need vocab.table".into()));
        }
        if self.eval.modes.is_empty() {
            return Err(Error::Config("eval.modes is empty".into()));
        }
        for n in &self.eval.noise {
            n.validate()?;
        }
        if !(0.0..=1.0).contains(&self.finetune.freeze_fraction) {
            return Err(Error::Config("finetune.freeze_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Encoder block clustered from phase 2 on.
    pub fn cluster_layer(&self) -> usize {
        if self.phases.layer == 0 {
            (self.model.encoder.blocks / 2).max(1)
        } else {
            self.phases.layer
        }
    }

    pub fn schedule(&self) -> Result<PhaseSchedule> {
        let layer = self.cluster_layer();
        if layer > self.model.encoder.blocks {
            return Err(Error::Config(format!(
                "phases.layer {layer} exceeds the {} encoder blocks",
                self.model.encoder.blocks
            )));
        }
        PhaseSchedule::from_clusters(&self.phases.clusters, layer)
    }
}
