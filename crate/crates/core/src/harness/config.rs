//! Strictly parsed experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{build_dataset_with_precision, load_dataset, Dataset, NoiseSpec, Precision, SliceRecord};
use crate::error::{invalid, Error, Result};
use crate::losses::LossConfig;
use crate::net::UnrolledConfig;
use crate::sampling::{equidistant_mask, SamplingMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Saved dataset to load; simulated from the fields below when absent.
    pub path: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub rows: usize,
    pub cols: usize,
    pub coils: usize,
    /// Per-component k-space noise standard deviation.
    pub noise_sigma: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            n_train: 100,
            n_test: 20,
            rows: 64,
            cols: 64,
            coils: 8,
            noise_sigma: 0.003,
            seed: 0,
            precision: Precision::Double,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub acceleration: usize,
    pub acs: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            acceleration: 4,
            acs: 8,
        }
    }
}

impl MaskConfig {
    pub fn build(&self, rows: usize, cols: usize) -> Result<SamplingMask> {
        equidistant_mask(rows, cols, self.acceleration, self.acs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub steps: usize,
    pub lr: f64,
    /// Learning rate is multiplied by `lr_decay` every `decay_every` steps (0 disables).
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Validation PSNR is logged every `validate_every` steps (0 disables).
    pub validate_every: usize,
    /// Leading test slices used for validation logging.
    pub n_validation: usize,
    /// Initialization seed for the network.
    pub init_seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 5e-4,
            lr_decay: 1.0,
            decay_every: 0,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            validate_every: 50,
            n_validation: 4,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write magnitude and error PNGs during evaluation.
    pub images: bool,
    /// Slices per evaluation that get images (from the start of the test set).
    pub max_images: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            images: true,
            max_images: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds per-step draws and the training order.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub mask: MaskConfig,
    pub model: UnrolledConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if o.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if !(o.lr > 0.0) || !(o.lr_decay > 0.0) {
            return invalid("lr and lr_decay must be positive");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.adam_eps > 0.0) {
            return invalid("Adam moments must lie in [0, 1) and eps must be positive");
        }
        let d = &self.dataset;
        if d.path.is_none() && d.n_train + d.n_test == 0 {
            return invalid("dataset needs slices");
        }
        Ok(())
    }
}

/// Train and test slices plus the acquisition mask.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<SliceRecord>,
    pub test: Vec<SliceRecord>,
    pub omega: SamplingMask,
    pub precision: Precision,
}

/// Loads or simulates the dataset and splits it: the first `n_train` slices
/// train, the next `n_test` evaluate.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.dataset;
    let dataset: Dataset = match &d.path {
        Some(p) => load_dataset(p)?,
        None => build_dataset_with_precision(
            d.n_train + d.n_test,
            d.rows,
            d.cols,
            d.coils,
            NoiseSpec {
                sigma: d.noise_sigma,
                seed: d.seed,
            },
            d.seed,
            d.precision,
        )?,
    };
    if dataset.len() < d.n_train + d.n_test {
        return invalid(format!(
            "dataset has {} slices, configuration needs {}",
            dataset.len(),
            d.n_train + d.n_test
        ));
    }
    let omega = cfg.mask.build(dataset.rows(), dataset.cols())?;
    let precision = dataset.precision;
    let mut slices = dataset.slices;
    slices.truncate(d.n_train + d.n_test);
    let test = slices.split_off(d.n_train);
    Ok(Splits {
        train: slices,
        test,
        omega,
        precision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.optim.lr, 5e-4);
    }

    #[test]
    fn unknown_keys_are_errors_in_every_section() {
        for text in [
            r#"{"extra": 1}"#,
            r#"{"dataset": {"n_slices": 3}}"#,
            r#"{"mask": {"r": 4}}"#,
            r#"{"model": {"layers": 4}}"#,
            r#"{"loss": {"lambda": 1}}"#,
            r#"{"optim": {"momentum": 0.9}}"#,
            r#"{"output": {"path": "x"}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"optim": {"batch_size": 0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"model": {"kernel": 2}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"loss": {"beta": -1}}"#).is_err());
    }

    #[test]
    fn split_sizes_follow_config() {
        let cfg = ExperimentConfig::from_json(
            r#"{"dataset": {"n_train": 3, "n_test": 2, "rows": 16, "cols": 16, "coils": 2}, "mask": {"acceleration": 2, "acs": 4}}"#,
        )
        .unwrap();
        let s = prepare_data(&cfg).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (3, 2));
        assert_eq!(s.omega.acceleration(), 2);
    }
}
