use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_biased, load_dataset_with, Dataset, LoadOptions, SyntheticBiasSpec, DEFAULT_RESOLUTION};
use crate::error::{Error, Result};
use crate::explain::Method;
use crate::nn::{Activation, Architecture};
use crate::sampling::Sampler;
use crate::steering::RrrWeights;
use crate::trainer::{TrainConfig, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    Caipi,
    Rrr,
    Hybrid,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Caipi => "caipi",
            Strategy::Rrr => "rrr",
            Strategy::Hybrid => "hybrid",
        }
    }

    pub fn uses_k(self) -> bool {
        matches!(self, Strategy::Caipi | Strategy::Hybrid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Oracle,
    Interactive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// Continue optimising the current model for `epochs_per_iteration`.
    Finetune,
    /// Re-initialise from the run seed and train for `train.epochs`.
    Scratch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSplit {
    Train,
    Val,
}

/// Convolutional backbone shape; the input size comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: [usize; 4],
    /// Stride of the first convolution.
    pub stem_stride: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { channels: [8, 16, 16, 32], stem_stride: 2, activation: Activation::Relu }
    }
}

impl ModelConfig {
    pub fn architecture(&self, input_size: usize) -> Architecture {
        let mut a = Architecture::small_cnn(input_size, self.channels);
        a.blocks[0].stride = self.stem_stride;
        a.activation = self.activation;
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlaConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Also update the logit head while finetuning.
    pub train_head: bool,
}

impl Default for BlaConfig {
    fn default() -> Self {
        Self { epochs: 20, learning_rate: 1e-4, train_head: false }
    }
}

impl BlaConfig {
    pub fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed,
            trainable: if self.train_head { Trainable::Head } else { Trainable::Attention },
            ..base.clone()
        }
    }
}

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic(SyntheticBiasSpec),
    Directory {
        root: PathBuf,
        #[serde(default = "default_resolution")]
        resolution: usize,
        #[serde(default)]
        split_seed: u64,
    },
}

fn default_resolution() -> usize {
    DEFAULT_RESOLUTION
}

impl DataSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSpec::Synthetic(spec) => generate_synthetic_biased(spec),
            DataSpec::Directory { root, resolution, split_seed } => load_dataset_with(
                root,
                LoadOptions { resolution: *resolution, split_seed: *split_seed, ..LoadOptions::default() },
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    pub run_id: Option<String>,
    pub strategy: Strategy,
    pub sampler: Sampler,
    pub explainer: Method,
    /// Counterexamples per selected sample (caipi and hybrid only).
    pub k: usize,
    pub rrr_weights: RrrWeights,
    pub samples_per_iteration: usize,
    pub iterations: usize,
    /// Baseline training schedule (also used for `retrain_mode = scratch`).
    pub train: TrainConfig,
    pub epochs_per_iteration: usize,
    pub retrain_mode: RetrainMode,
    pub confidence_threshold: f64,
    pub pool: PoolSplit,
    pub bla: BlaConfig,
    pub model: ModelConfig,
    pub feedback_source: FeedbackSource,
    /// Seconds to wait for human feedback before pausing (interactive only).
    pub feedback_timeout_secs: u64,
    pub seed: u64,
    /// Test images whose before/after saliency maps are saved with a run.
    pub saliency_samples: usize,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            strategy: Strategy::Caipi,
            sampler: Sampler::HighConfidence,
            explainer: Method::Gradcam,
            k: 3,
            rrr_weights: RrrWeights::default(),
            samples_per_iteration: 5,
            iterations: 10,
            train: TrainConfig::default(),
            epochs_per_iteration: 20,
            retrain_mode: RetrainMode::Finetune,
            confidence_threshold: 0.9,
            pool: PoolSplit::Train,
            bla: BlaConfig::default(),
            model: ModelConfig::default(),
            feedback_source: FeedbackSource::Oracle,
            feedback_timeout_secs: 3600,
            seed: 0,
            saliency_samples: 4,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.rrr_weights.validate()?;
        if self.samples_per_iteration == 0 {
            return Err(Error::Config("samples_per_iteration must be positive".into()));
        }
        if !(self.confidence_threshold > 0.5 && self.confidence_threshold < 1.0) {
            return Err(Error::Config("confidence_threshold must lie in (0.5, 1)".into()));
        }
        if self.model.stem_stride == 0 {
            return Err(Error::Config("stem_stride must be positive".into()));
        }
        if !(self.bla.learning_rate > 0.0) {
            return Err(Error::Config("bla.learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Explainer used to produce the metrics: counterexample steering is
    /// always scored with GradCAM, as is the baseline.
    pub fn eval_method(&self) -> Method {
        match self.strategy {
            Strategy::Caipi | Strategy::Baseline => Method::Gradcam,
            _ => self.explainer,
        }
    }

    /// Whether the model carries a BLA module during steering.
    pub fn uses_bla(&self) -> bool {
        self.eval_method() == Method::Bla
    }

    /// `k` as reported in the results table.
    pub fn table_k(&self) -> Option<usize> {
        self.strategy.uses_k().then_some(self.k)
    }

    pub fn run_id(&self) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        match self.strategy {
            Strategy::Baseline => format!("baseline-s{}", self.seed),
            s => {
                let mut id = format!("{}-{}-{}", s.as_str(), self.sampler.as_str(), self.eval_method().as_str());
                if let Some(k) = self.table_k() {
                    id.push_str(&format!("-k{k}"));
                }
                format!("{id}-s{}", self.seed)
            }
        }
    }
}

/// A steering configuration together with its data source, as read from a
/// config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub steering: SteeringConfig,
    pub data: DataSpec,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.steering.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            cfg.steering.validate()?;
            return Ok(cfg);
        }
        Self::from_toml_str(&text)
    }
}
