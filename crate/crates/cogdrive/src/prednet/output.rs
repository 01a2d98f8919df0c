//! Prediction output container and serialization.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CogError, Result};
use crate::util::atomic_write;

pub const PRED_FORMAT: &str = "cogdrive-pred/1";

/// One agent's trajectory under one mode, global coordinates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PredTraj {
    /// Mean positions per step.
    pub mu: Vec<[f64; 2]>,
    /// Per-axis standard deviations, expressed along the agent's local axes.
    pub sigma: Vec<[f64; 2]>,
    /// Global headings per step.
    pub yaw: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModePrediction {
    pub prob: f64,
    pub trajs: BTreeMap<String, PredTraj>,
}

/// Full prediction for one scene: `K` joint modes over the joint agents plus
/// constant-velocity rollouts (`[x, y, heading]` per step) for everyone else.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PredictionSet {
    pub dt: f64,
    /// Last observed time; predictions start at `t0 + dt`.
    pub t0: f64,
    pub joint_ids: Vec<String>,
    pub modes: Vec<ModePrediction>,
    pub others: BTreeMap<String, Vec<[f64; 3]>>,
}

impl PredictionSet {
    /// Mean positions of `id` under mode `k` (joint agents only).
    pub fn joint_positions(&self, k: usize, id: &str) -> Option<Vec<[f64; 2]>> {
        self.modes.get(k).and_then(|m| m.trajs.get(id)).map(|t| t.mu.clone())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredFile {
    format: String,
    prediction: PredictionSet,
}

pub fn save_prediction(path: &Path, pred: &PredictionSet) -> Result<()> {
    let file = PredFile {
        format: PRED_FORMAT.to_string(),
        prediction: pred.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| CogError::Parse {
        path: path.display().to_string(),
        context: None,
        msg: e.to_string(),
    })?;
    text.push('\n');
    atomic_write(path, &text)
}

pub fn load_prediction(path: &Path) -> Result<PredictionSet> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CogError::io(path.display().to_string(), e))?;
    let file: PredFile = serde_json::from_str(&text).map_err(|e| CogError::Parse {
        path: path.display().to_string(),
        context: Some(format!("line {}, column {}", e.line(), e.column())),
        msg: e.to_string(),
    })?;
    if file.format != PRED_FORMAT {
        return Err(CogError::Parse {
            path: path.display().to_string(),
            context: None,
            msg: format!("unsupported format '{}', expected '{PRED_FORMAT}'", file.format),
        });
    }
    Ok(file.prediction)
}
