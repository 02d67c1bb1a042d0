//! JSON artifacts. Each one carries the resolved config, its hash and the
//! hashes of the inputs it was built from.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use weaksearch::agent::PolicyParams;
use weaksearch::dataset::{FixationSummary, GeneratorConfig};
use weaksearch::miltrain::LabelAssignment;
use weaksearch::pipeline::{DetectionMetrics, SequentialReport};
use weaksearch::reinforce::{LogEntry, RestartSummary};
use weaksearch::svm::LinearModel;

use crate::config::{DetectorSection, EvaluateSection, PolicySection};
use crate::CliError;

pub const SUMMARY_FORMAT: &str = "weaksearch-summary v1";
pub const DETECTOR_FORMAT: &str = "weaksearch-detector v1";
pub const POLICY_FORMAT: &str = "weaksearch-policy-artifact v1";
pub const EVAL_FORMAT: &str = "weaksearch-eval v1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Reads an artifact and checks its `format` tag.
pub fn read_json<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let found = value.get("format").and_then(|f| f.as_str()).unwrap_or("<none>");
    if found != format {
        return Err(CliError::Runtime(format!(
            "{}: expected a `{format}` artifact, found `{found}`",
            path.display()
        )));
    }
    serde_json::from_value(value).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DataSummary {
    pub format: String,
    pub config: GeneratorConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub images: usize,
    pub regions: usize,
    pub fixations: FixationSummary,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassDetector {
    pub class: usize,
    pub c: f64,
    /// `(C, validation detection AP)` per grid value.
    pub grid: Vec<(f64, f64)>,
    pub model: LinearModel,
    pub assignment: Option<LabelAssignment>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectorArtifact {
    pub format: String,
    pub method: String,
    pub config: DetectorSection,
    pub config_hash: String,
    pub dataset_hash: String,
    pub classes: Vec<ClassDetector>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassPolicy {
    pub class: usize,
    pub lambda: f64,
    /// `(λ, validation reward)` per grid value.
    pub lambda_grid: Vec<(f64, f64)>,
    pub restart: usize,
    pub val_reward: f64,
    pub params: PolicyParams,
    pub restarts: Vec<RestartSummary>,
    pub log: Vec<LogEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub format: String,
    pub method: String,
    pub config: PolicySection,
    pub config_hash: String,
    pub dataset_hash: String,
    pub detector_hash: String,
    pub classes: Vec<ClassPolicy>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassEval {
    pub class: usize,
    pub exhaustive: DetectionMetrics,
    pub sequential: Option<SequentialReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    /// Detector pipeline name, e.g. `CMI-EYE`.
    pub method: String,
    pub config: EvaluateSection,
    pub config_hash: String,
    pub dataset_hash: String,
    pub detector_hash: String,
    pub policy_hash: Option<String>,
    pub repeats: usize,
    pub classes: Vec<ClassEval>,
}
