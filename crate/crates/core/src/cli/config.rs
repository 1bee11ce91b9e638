use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::CliError;
use crate::attention::AttentionGeometry;
use crate::model::ModelConfig;
use crate::training::TrainPlan;

impl Default for ModelConfig {
    /// Two-layer all-attention byte model, small enough for CPU training.
    fn default() -> Self {
        let geometry = AttentionGeometry {
            d: 64,
            n_h: 4,
            n_kv: 2,
            d_h: 16,
            d_qk: 8,
            d_r: 8,
            r_q: 64,
            r_kv: 32,
        };
        ModelConfig::attention_only(2, geometry, 128)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub model: ModelConfig,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub plan: TrainPlan,
    /// Trailing fraction of the corpus held out for perplexity.
    pub eval_frac: f64,
    pub context: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            corpus: None,
            out: None,
            trace: None,
            plan: TrainPlan {
                ce_weight: 1.0,
                kl_weight: 0.0,
                lr: 1e-2,
                steps: 300,
                ..TrainPlan::default()
            },
            eval_frac: 0.1,
            context: 32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub student: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub plan: TrainPlan,
    pub eval_frac: f64,
    pub context: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student: None,
            teacher: None,
            corpus: None,
            out: None,
            trace: None,
            plan: TrainPlan {
                steps: 500,
                ..TrainPlan::default()
            },
            eval_frac: 0.1,
            context: 32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub student: Option<PathBuf>,
    pub prefs: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub plan: TrainPlan,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            student: None,
            prefs: None,
            out: None,
            trace: None,
            plan: TrainPlan {
                steps: 100,
                lr: 1e-3,
                ..TrainPlan::default()
            },
        }
    }
}

/// Parses `path` (or returns defaults when absent); unknown keys are usage errors.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

pub fn require<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what} (set it in the config or pass the flag)")))
}

pub fn existing(path: &Path) -> Result<&Path, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("input file {} does not exist", path.display())))
    }
}

/// Output path whose parent directory already exists.
pub fn writable(path: &Path) -> Result<&Path, CliError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if parent.is_dir() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("output directory {} does not exist", parent.display())))
    }
}
