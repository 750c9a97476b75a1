//! Run configuration, read from TOML. Every field has a default and unknown
//! keys are rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AnnotatorSpec, ConstructionSpec, DatasetForm, WorldSpec};
use crate::error::{LabError, Result};
use crate::objectives::ObjectiveSpec;

/// Named learning rates from the large-model grid.
pub const LR_PRESETS: [(&str, f64); 4] =
    [("grid-3e-7", 3e-7), ("grid-5e-7", 5e-7), ("grid-7e-7", 7e-7), ("grid-1e-6", 1e-6)];

/// A learning rate given either as a number or as a preset name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRate {
    Value(f64),
    Preset(String),
}

impl LearningRate {
    pub fn resolve(&self) -> Result<f64> {
        match self {
            LearningRate::Value(v) if *v >= 0.0 && v.is_finite() => Ok(*v),
            LearningRate::Value(v) => Err(LabError::Config(format!("optimizer: invalid lr {v}"))),
            LearningRate::Preset(name) => LR_PRESETS
                .iter()
                .find(|(n, _)| n == name)
                .map(|&(_, v)| v)
                .ok_or_else(|| {
                    let known: Vec<&str> = LR_PRESETS.iter().map(|p| p.0).collect();
                    LabError::Config(format!("optimizer: unknown lr preset {name:?} (known: {})", known.join(", ")))
                }),
        }
    }
}

impl fmt::Display for LearningRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearningRate::Value(v) => write!(f, "{v}"),
            LearningRate::Preset(p) => f.write_str(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Defaults to 1e-2; the tiny models move six orders of magnitude less per
    /// unit step than a multi-billion parameter network.
    pub lr: LearningRate,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on the total number of updates.
    pub max_steps: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: LearningRate::Value(1e-2), batch_size: 64, epochs: 1, max_steps: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub form: DatasetForm,
    pub pairs_per_prompt: usize,
    pub seed: u64,
    /// Read records from this file instead of annotating the world. The
    /// file's header then supplies the world, annotator and construction.
    pub path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let c = ConstructionSpec::default();
        Self { form: c.form, pairs_per_prompt: c.pairs_per_prompt, seed: c.seed, path: None }
    }
}

impl DatasetConfig {
    pub fn construction(&self) -> ConstructionSpec {
        ConstructionSpec { form: self.form, pairs_per_prompt: self.pairs_per_prompt, seed: self.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryConfig {
    /// Log a metrics row every `cadence` updates, plus the first and last step.
    pub cadence: usize,
    /// Monte-Carlo samples per prompt for token-model KL and KTO reference points.
    pub kl_samples: usize,
    pub kl_seed: u64,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self { cadence: 10, kl_samples: 256, kl_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default") }
    }
}

impl OutputConfig {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Draws per prompt for the sampled win rate.
    pub winrate_samples: usize,
    pub winrate_seed: u64,
    /// Annotator seed for the fresh held-out labels.
    pub heldout_seed: u64,
    /// Independent labels per candidate pair.
    pub heldout_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { winrate_samples: 200, winrate_seed: 0, heldout_seed: 1_000_003, heldout_repeats: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub annotator: AnnotatorSpec,
    pub dataset: DatasetConfig,
    pub objective: ObjectiveSpec,
    pub optimizer: OptimizerConfig,
    pub telemetry: TelemetryConfig,
    pub output: OutputConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LabError::Config(format!("{}: no such config file", path.display())),
            _ => LabError::io(path, e),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        // dataset paths are relative to the config file
        if let (Some(p), Some(base)) = (&cfg.dataset.path, path.parent()) {
            if p.is_relative() {
                cfg.dataset.path = Some(base.join(p));
            }
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.annotator.validate()?;
        self.objective.validate()?;
        self.optimizer.lr.resolve()?;
        if self.optimizer.batch_size == 0 {
            return Err(LabError::Config("optimizer: batch_size must be positive".into()));
        }
        if self.optimizer.epochs == 0 && self.optimizer.max_steps.is_none() {
            return Err(LabError::Config("optimizer: epochs must be positive".into()));
        }
        if self.telemetry.cadence == 0 || self.telemetry.kl_samples == 0 {
            return Err(LabError::Config("telemetry: cadence and kl_samples must be positive".into()));
        }
        if self.eval.winrate_samples == 0 || self.eval.heldout_repeats == 0 {
            return Err(LabError::Config("eval: sample counts must be positive".into()));
        }
        if self.dataset.path.is_none() {
            check_form(&self.objective, self.dataset.form)?;
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<()> {
        match &self.dataset.path {
            Some(p) if !p.is_file() => {
                Err(LabError::Config(format!("dataset: {} does not exist", p.display())))
            }
            _ => Ok(()),
        }
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.lr.resolve().expect("validated")
    }
}

/// Pairwise objectives need one winner and one loser per record.
pub fn check_form(objective: &ObjectiveSpec, form: DatasetForm) -> Result<()> {
    if objective.method.is_pairwise() && !form.is_pairwise() {
        return Err(LabError::Config(format!(
            "{} is a pairwise objective and cannot train on a {form:?} dataset",
            objective.method
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Method;

    #[test]
    fn defaults_parse_from_empty_file() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.optimizer.batch_size, 64);
        assert_eq!(cfg.lr(), 1e-2);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.objective = ObjectiveSpec::new(Method::SimUapo).with_beta(2.5).with_gamma(4.5);
        cfg.optimizer.max_steps = Some(2000);
        cfg.optimizer.lr = LearningRate::Preset("grid-5e-7".into());
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.lr(), 5e-7);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(RunConfig::from_toml("[world]\nprompts = 3\n"), Err(LabError::Config(_))));
        assert!(matches!(RunConfig::from_toml("verbose = true\n"), Err(LabError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[objective]\nmethod = \"dpo2\"\n"), Err(LabError::Config(_))));
    }

    #[test]
    fn unknown_preset_is_error() {
        let r = RunConfig::from_toml("[optimizer]\nlr = \"grid-2e-7\"\n");
        assert!(matches!(r, Err(LabError::Config(_))));
    }

    #[test]
    fn pairwise_method_rejects_unpaired_forms() {
        for form in ["multi", "winners-only", "losers-only"] {
            for method in ["dpo", "simpo"] {
                let text = format!("[objective]\nmethod = \"{method}\"\n[dataset]\nform = \"{form}\"\n");
                let err = RunConfig::from_toml(&text).unwrap_err();
                assert_eq!(err.exit_code(), 2, "{err}");
            }
            let text = format!("[objective]\nmethod = \"simuapo-multi\"\n[dataset]\nform = \"{form}\"\n");
            RunConfig::from_toml(&text).unwrap();
        }
    }

    #[test]
    fn missing_dataset_file_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[dataset]\npath = \"nope.jsonl\"\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(LabError::Config(_))));
    }
}
