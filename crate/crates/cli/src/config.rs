use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spnet::energy::HistogramBins;
use spnet::model::ModelSpec;
use spnet::train::TrainConfig;

use crate::CliError;

/// Cache files a run reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train_cache: PathBuf,
    /// Optional held-out set, scored after every epoch when present.
    pub test_cache: Option<PathBuf>,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            train_cache: PathBuf::from("data/train.cache"),
            test_cache: Some(PathBuf::from("data/test.cache")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Inference horizon for the post-training report.
    pub time_steps: usize,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            time_steps: 4,
            batch_size: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSettings {
    /// Training horizon of the multi-step regime.
    pub multi_steps: usize,
    pub max_eval_steps: usize,
    /// Consecutive seeds starting at `train.seed`.
    pub seeds: usize,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self {
            multi_steps: 4,
            max_eval_steps: 4,
            seeds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradhistSettings {
    pub ks: Vec<f64>,
    pub time_steps: Vec<usize>,
    /// Clouds in the probe batch, spread evenly over the training cache.
    pub samples: usize,
    pub bins: HistogramBins,
}

impl Default for GradhistSettings {
    fn default() -> Self {
        Self {
            ks: vec![0.5, 5.0, 20.0],
            time_steps: vec![1, 4],
            samples: 32,
            bins: HistogramBins::default(),
        }
    }
}

/// A complete experiment. `model.num_classes` is taken from the training
/// cache when the file leaves it out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataPaths,
    pub output_dir: PathBuf,
    pub eval: EvalSettings,
    pub compare: CompareSettings,
    pub gradhist: GradhistSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
            output_dir: PathBuf::from("runs/latest"),
            eval: EvalSettings::default(),
            compare: CompareSettings::default(),
            gradhist: GradhistSettings::default(),
        }
    }
}

/// A parsed config and whether it pinned the class count.
pub struct Loaded {
    pub config: RunConfig,
    pub classes_given: bool,
}

pub fn load(path: Option<&Path>) -> Result<Loaded, CliError> {
    let Some(path) = path else {
        return Ok(Loaded {
            config: RunConfig::default(),
            classes_given: false,
        });
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| CliError::Usage(format!("invalid config {}: {e}", path.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    let classes_given = value.pointer("/model/num_classes").is_some();
    Ok(Loaded {
        config: serde_json::from_value(value).map_err(bad)?,
        classes_given,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for text in [r#"{"bogus": 1}"#, r#"{"train": {"epochz": 3}}"#, r#"{"model": {"neuron": {"vth": 1}}}"#] {
            assert!(serde_json::from_str::<RunConfig>(text).is_err(), "{text}");
        }
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.model, ModelSpec::default());
    }
}
