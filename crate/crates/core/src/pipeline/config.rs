use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::quant::NoiseKind;
use crate::sim::DEFAULT_BATCH_TOKENS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dense model container. Empty means `<output>/model.lten`.
    pub model: String,
    /// Calibration container. Empty means `<output>/calib.lten`.
    pub calibration: String,
    /// Labelled dataset container. Empty means `<output>/data.lten`.
    pub data: String,
    /// Directory for every artifact a command writes.
    pub output: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            model: String::new(),
            calibration: String::new(),
            data: String::new(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Targets {
    pub alpha: f64,
    pub sparse_ratio: f64,
    pub granularity: usize,
}

impl Default for Targets {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            sparse_ratio: 0.125,
            granularity: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorSettings {
    pub threshold: f64,
    pub temperature: f64,
    pub basis_rank: Option<usize>,
    /// PTC dimension the basis rank is derived from.
    pub ptc_dim: usize,
}

impl Default for AllocatorSettings {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            temperature: 1.0,
            basis_rank: None,
            ptc_dim: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionSettings {
    pub iters: usize,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
}

impl Default for DecompositionSettings {
    fn default() -> Self {
        Self {
            iters: 20,
            adapt_steps: 50,
            adapt_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareSettings {
    /// JSON file with `engines` and `energy` sections. Empty uses the defaults.
    pub config: String,
    pub batch_tokens: usize,
}

impl Default for HardwareSettings {
    fn default() -> Self {
        Self {
            config: String::new(),
            batch_tokens: DEFAULT_BATCH_TOKENS,
        }
    }
}

/// Shape of the model and dataset that `gen-toy` writes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySettings {
    pub input_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub blocks: usize,
    pub classes: usize,
    pub seq_len: usize,
    pub samples: usize,
    /// Leading samples of the dataset used for calibration.
    pub calib_samples: usize,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: 32,
            heads: 4,
            mlp_ratio: 4,
            blocks: 2,
            classes: 10,
            seq_len: 8,
            samples: 64,
            calib_samples: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    /// Largest allowed gap between a recorded and a recomputed layer error.
    pub error_tolerance: f64,
    pub quantize: bool,
    pub noise_ratio: f64,
    pub noise_kind: NoiseKind,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            error_tolerance: 1e-4,
            quantize: true,
            noise_ratio: 0.03,
            noise_kind: NoiseKind::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub targets: Targets,
    pub allocator: AllocatorSettings,
    pub decomposition: DecompositionSettings,
    pub hardware: HardwareSettings,
    pub toy: ToySettings,
    pub verify: VerifySettings,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Set one field by its dotted name, e.g. `targets.alpha` = `0.4`. The
    /// value is read as JSON when it parses, otherwise as a string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), PipelineError> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| PipelineError::Usage(format!("unknown config field `{key}`")))?;
        }
        if node.is_object() {
            return Err(PipelineError::Usage(format!(
                "`{key}` is a section, not a field"
            )));
        }
        *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(tree)
            .map_err(|e| PipelineError::Usage(format!("--{key} {raw}: {e}")))?;
        Ok(())
    }

    /// Apply `--a.b value` / `--a.b=value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), PipelineError> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| PipelineError::Usage(format!("unexpected argument `{arg}`")))?;
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| PipelineError::Usage(format!("--{flag} needs a value")))?;
                    (flag.to_string(), v.clone())
                }
            };
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let t = &self.targets;
        if !(t.alpha > 0.0 && t.alpha < 1.0) {
            return Err(PipelineError::Config(format!(
                "targets.alpha {} outside (0,1)",
                t.alpha
            )));
        }
        if !(t.sparse_ratio > 0.0 && t.sparse_ratio < 1.0) {
            return Err(PipelineError::Config(format!(
                "targets.sparse_ratio {} outside (0,1)",
                t.sparse_ratio
            )));
        }
        if t.granularity == 0 {
            return Err(PipelineError::Config(
                "targets.granularity must be >= 1".into(),
            ));
        }
        if self.decomposition.iters == 0 {
            return Err(PipelineError::Config(
                "decomposition.iters must be >= 1".into(),
            ));
        }
        if self.hardware.batch_tokens == 0 {
            return Err(PipelineError::Config(
                "hardware.batch_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.output)
    }

    fn or_output(&self, value: &str, default_name: &str) -> PathBuf {
        if value.is_empty() {
            self.output_dir().join(default_name)
        } else {
            PathBuf::from(value)
        }
    }

    pub fn model_path(&self) -> PathBuf {
        self.or_output(&self.paths.model, "model.lten")
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.or_output(&self.paths.calibration, "calib.lten")
    }

    pub fn data_path(&self) -> PathBuf {
        self.or_output(&self.paths.data, "data.lten")
    }
}
