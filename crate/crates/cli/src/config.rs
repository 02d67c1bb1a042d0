//! Run configuration: one TOML file with a table per subcommand, overridden
//! by `--set key=value` and the named flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use weaksearch::agent::AgentConfig;
use weaksearch::dataset::{GeneratorConfig, Split, SupervisionMode};
use weaksearch::miltrain::CmiConfig;
use weaksearch::pipeline::DetectorConfig;
use weaksearch::reinforce::TrainConfig;
use weaksearch::svm::SvmConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSection {
    /// `bb`, `eye` or `il`.
    pub mode: String,
    pub constraints: bool,
    pub c_grid: Vec<f64>,
    pub restarts: usize,
    pub t_s: f64,
    pub t_f: f64,
    pub init_ratio_min: f64,
    pub init_ratio_max: f64,
    pub max_iterations: usize,
    pub svm_tolerance: f64,
    pub svm_max_epochs: usize,
    pub seed: u64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::new(SupervisionMode::Eye, true);
        DetectorSection {
            mode: "eye".into(),
            constraints: true,
            c_grid: d.c_grid,
            restarts: d.cmi.restarts,
            t_s: d.cmi.t_s,
            t_f: d.cmi.t_f,
            init_ratio_min: d.cmi.init_ratio.0,
            init_ratio_max: d.cmi.init_ratio.1,
            max_iterations: d.cmi.max_iterations,
            svm_tolerance: d.cmi.svm.tolerance,
            svm_max_epochs: d.cmi.svm.max_epochs,
            seed: d.cmi.seed,
        }
    }
}

impl DetectorSection {
    pub fn mode(&self) -> Result<SupervisionMode, CliError> {
        self.mode.parse().map_err(|e: weaksearch::Error| CliError::Usage(e.to_string()))
    }

    pub fn to_core(&self) -> Result<DetectorConfig, CliError> {
        let mode = self.mode()?;
        let config = DetectorConfig {
            mode,
            constraints: self.constraints,
            c_grid: self.c_grid.clone(),
            cmi: CmiConfig {
                t_s: self.t_s,
                t_f: self.t_f,
                restarts: self.restarts,
                init_ratio: (self.init_ratio_min, self.init_ratio_max),
                max_iterations: self.max_iterations,
                svm: SvmConfig {
                    tolerance: self.svm_tolerance,
                    max_epochs: self.svm_max_epochs,
                    ..SvmConfig::default()
                },
                constraints: self.constraints,
                record_trajectory: false,
                seed: self.seed,
            },
        };
        config.cmi.validate().map_err(CliError::from)?;
        if config.c_grid.is_empty() || config.c_grid.iter().any(|c| !(*c > 0.0)) {
            return Err(CliError::Usage("c_grid needs positive values".into()));
        }
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySection {
    pub lambda_grid: Vec<f64>,
    pub alpha: f64,
    pub max_steps: usize,
    pub samples: usize,
    pub iterations: usize,
    pub step_size: f64,
    pub step_decay: f64,
    pub max_grad_norm: f64,
    pub restarts: usize,
    pub patience: usize,
    pub tolerance: f64,
    pub validation_rollouts: usize,
    pub init_scale: f64,
    pub init_log_sigma: f64,
    pub seed: u64,
}

impl Default for PolicySection {
    fn default() -> Self {
        let t = TrainConfig::default();
        PolicySection {
            lambda_grid: vec![t.lambda],
            alpha: t.agent.alpha,
            max_steps: t.agent.max_steps,
            samples: t.samples,
            iterations: t.iterations,
            step_size: t.step_size,
            step_decay: t.step_decay,
            max_grad_norm: t.max_grad_norm,
            restarts: t.restarts,
            patience: t.patience,
            tolerance: t.tolerance,
            validation_rollouts: t.validation_rollouts,
            init_scale: t.init_scale,
            init_log_sigma: t.init_log_sigma,
            seed: t.seed,
        }
    }
}

impl PolicySection {
    pub fn to_core(&self, lambda: f64) -> Result<TrainConfig, CliError> {
        let config = TrainConfig {
            agent: AgentConfig {
                alpha: self.alpha,
                max_steps: self.max_steps,
            },
            samples: self.samples,
            lambda,
            iterations: self.iterations,
            step_size: self.step_size,
            step_decay: self.step_decay,
            max_grad_norm: self.max_grad_norm,
            restarts: self.restarts,
            patience: self.patience,
            tolerance: self.tolerance,
            validation_rollouts: self.validation_rollouts,
            init_scale: self.init_scale,
            init_log_sigma: self.init_log_sigma,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateSection {
    /// `train`, `val`, `test` or `trainval`.
    pub split: String,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            split: "test".into(),
            repeats: 5,
            seed: 0,
        }
    }
}

impl EvaluateSection {
    pub fn splits(&self) -> Result<Vec<Split>, CliError> {
        match self.split.to_ascii_lowercase().as_str() {
            "train" => Ok(vec![Split::Train]),
            "val" => Ok(vec![Split::Val]),
            "test" => Ok(vec![Split::Test]),
            "trainval" => Ok(vec![Split::Train, Split::Val]),
            other => Err(CliError::Usage(format!("unknown split `{other}`"))),
        }
    }
}

/// Reads the config file (if any) and returns the table for `section`.
pub fn load_section(path: Option<&Path>, section: &str) -> Result<Table, CliError> {
    let Some(path) = path else {
        return Ok(Table::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut root: Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    match root.remove(section) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t),
        Some(_) => Err(CliError::Usage(format!("config section `{section}` is not a table"))),
    }
}

/// Applies `key=value` overrides; values are parsed as TOML, falling back to
/// a bare string.
pub fn apply_overrides(table: &mut Table, sets: &[String]) -> Result<(), CliError> {
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{s}`")))?;
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        table.insert(key.trim().to_string(), value);
    }
    Ok(())
}

pub fn set<V: Into<Value>>(table: &mut Table, key: &str, value: Option<V>) {
    if let Some(v) = value {
        table.insert(key.to_string(), v.into());
    }
}

/// Deserializes `table` over the defaults of `T`, rejecting unknown keys.
pub fn resolve<T>(table: Table) -> Result<T, CliError>
where
    T: Default + Serialize + DeserializeOwned,
{
    let defaults = Table::try_from(T::default())
        .map_err(|e| CliError::Runtime(format!("config defaults: {e}")))?;
    let mut merged = defaults.clone();
    for (k, v) in table {
        if !defaults.contains_key(&k) {
            let mut known: Vec<&String> = defaults.keys().collect();
            known.sort();
            return Err(CliError::Usage(format!("unknown config key `{k}` (known: {known:?})")));
        }
        merged.insert(k, v);
    }
    Value::Table(merged)
        .try_into()
        .map_err(|e| CliError::Usage(format!("config: {e}")))
}

pub fn generator(table: Table) -> Result<GeneratorConfig, CliError> {
    let config: GeneratorConfig = resolve(table)?;
    config.validate()?;
    Ok(config)
}
