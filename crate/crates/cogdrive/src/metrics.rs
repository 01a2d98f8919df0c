//! Displacement-error metrics for single-agent and joint evaluation.
//!
//! Conventions: the miss threshold is a strict inequality at 2.0 m (ties are
//! hits); b-minFDE adds `(1 - p)^2` of the minFDE-winning mode; joint metrics
//! score all agents under the same mode index, never mixing modes per agent;
//! aggregation over scenes is the unweighted mean.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CogError, Result};
use crate::prednet::PredictionSet;
use crate::scene::GroundTruthFutures;
use crate::util::atomic_write;

pub const METRICS_FORMAT: &str = "cogdrive-metrics/1";
pub const MISS_THRESHOLD: f64 = 2.0;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn check_horizon(op: &'static str, pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<()> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(CogError::Invariant(format!(
            "{op}: horizon mismatch, {} predicted vs {} ground-truth steps",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Min over modes of the mean per-step error for one agent.
pub fn min_ade(modes: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for m in modes {
        check_horizon("min_ade", m, gt)?;
        let ade =
            m.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum::<f64>() / gt.len() as f64;
        if ade < best {
            best = ade;
        }
    }
    Ok(best)
}

/// Min over modes of the final-step error for one agent.
pub fn min_fde(modes: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for m in modes {
        check_horizon("min_fde", m, gt)?;
        let fde = dist(*m.last().unwrap(), *gt.last().unwrap());
        if fde < best {
            best = fde;
        }
    }
    Ok(best)
}

/// Whether the scene counts as a miss: best-mode final error strictly above
/// the 2.0 m threshold.
pub fn is_miss(modes: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> Result<bool> {
    Ok(min_fde(modes, gt)? > MISS_THRESHOLD)
}

/// Fraction of scenes that are misses.
pub fn miss_rate(scenes: &[(Vec<Vec<[f64; 2]>>, Vec<[f64; 2]>)]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(CogError::Invariant("miss_rate over an empty scene set".into()));
    }
    let mut misses = 0usize;
    for (modes, gt) in scenes {
        if is_miss(modes, gt)? {
            misses += 1;
        }
    }
    Ok(misses as f64 / scenes.len() as f64)
}

/// FDE of the minFDE-winning mode plus `(1 - p)^2` of that mode's
/// probability. Ties go to the lowest mode index.
pub fn b_min_fde(modes: &[Vec<[f64; 2]>], probs: &[f64], gt: &[[f64; 2]]) -> Result<f64> {
    if modes.len() != probs.len() {
        return Err(CogError::Invariant(format!(
            "b_min_fde: {} modes vs {} probabilities",
            modes.len(),
            probs.len()
        )));
    }
    let mut best = f64::INFINITY;
    let mut best_k = 0;
    for (k, m) in modes.iter().enumerate() {
        check_horizon("b_min_fde", m, gt)?;
        let fde = dist(*m.last().unwrap(), *gt.last().unwrap());
        if fde < best {
            best = fde;
            best_k = k;
        }
    }
    Ok(best + (1.0 - probs[best_k]).powi(2))
}

/// Min over modes of the error averaged across all agents under the same
/// mode. `modes[k]` holds per-agent trajectories aligned with `gts`.
pub fn min_joint_ade(modes: &[Vec<Vec<[f64; 2]>>], gts: &[Vec<[f64; 2]>]) -> Result<f64> {
    joint_metric(modes, gts, false)
}

/// Joint counterpart of [`min_fde`]: final-step error averaged across
/// agents, minimized over modes.
pub fn min_joint_fde(modes: &[Vec<Vec<[f64; 2]>>], gts: &[Vec<[f64; 2]>]) -> Result<f64> {
    joint_metric(modes, gts, true)
}

fn joint_metric(modes: &[Vec<Vec<[f64; 2]>>], gts: &[Vec<[f64; 2]>], final_only: bool) -> Result<f64> {
    let mut best = f64::INFINITY;
    for mode in modes {
        if mode.len() != gts.len() {
            return Err(CogError::Invariant(format!(
                "joint metric: mode covers {} agents, ground truth has {}",
                mode.len(),
                gts.len()
            )));
        }
        let mut total = 0.0;
        for (traj, gt) in mode.iter().zip(gts) {
            check_horizon("joint metric", traj, gt)?;
            if final_only {
                total += dist(*traj.last().unwrap(), *gt.last().unwrap());
            } else {
                total += traj.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum::<f64>()
                    / gt.len() as f64;
            }
        }
        let avg = total / gts.len() as f64;
        if avg < best {
            best = avg;
        }
    }
    Ok(best)
}

/// Per-scene metric values; ego metrics are single-agent, joint metrics span
/// the prediction's joint set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: bool,
    pub b_min_fde: f64,
    pub min_joint_ade: f64,
    pub min_joint_fde: f64,
}

/// Evaluate one prediction against ground truth. Ego metrics use the first
/// joint agent (the ego); joint metrics use all joint agents.
pub fn evaluate_scene(pred: &PredictionSet, futures: &GroundTruthFutures) -> Result<SceneMetrics> {
    let ego_id = pred
        .joint_ids
        .first()
        .ok_or_else(|| CogError::Invariant("prediction has no joint agents".into()))?;
    let ego_gt = futures
        .positions(ego_id)
        .ok_or_else(|| CogError::Invariant(format!("ground truth missing agent '{ego_id}'")))?;
    let ego_modes: Vec<Vec<[f64; 2]>> = pred
        .modes
        .iter()
        .map(|m| {
            m.trajs
                .get(ego_id)
                .map(|t| t.mu.clone())
                .ok_or_else(|| CogError::Invariant(format!("mode missing agent '{ego_id}'")))
        })
        .collect::<Result<_>>()?;
    let probs: Vec<f64> = pred.modes.iter().map(|m| m.prob).collect();

    let mut joint_modes: Vec<Vec<Vec<[f64; 2]>>> = Vec::with_capacity(pred.modes.len());
    let mut joint_gts: Vec<Vec<[f64; 2]>> = Vec::with_capacity(pred.joint_ids.len());
    for id in &pred.joint_ids {
        joint_gts.push(futures.positions(id).ok_or_else(|| {
            CogError::Invariant(format!("ground truth missing agent '{id}'"))
        })?);
    }
    for m in &pred.modes {
        let mut per_agent = Vec::with_capacity(pred.joint_ids.len());
        for id in &pred.joint_ids {
            per_agent.push(
                m.trajs
                    .get(id)
                    .map(|t| t.mu.clone())
                    .ok_or_else(|| CogError::Invariant(format!("mode missing agent '{id}'")))?,
            );
        }
        joint_modes.push(per_agent);
    }

    // clip ground truth to the predicted horizon if it extends further
    let t_f = ego_modes[0].len();
    let ego_gt = ego_gt[..t_f.min(ego_gt.len())].to_vec();
    let joint_gts: Vec<Vec<[f64; 2]>> =
        joint_gts.into_iter().map(|g| g[..t_f.min(g.len())].to_vec()).collect();

    Ok(SceneMetrics {
        min_ade: min_ade(&ego_modes, &ego_gt)?,
        min_fde: min_fde(&ego_modes, &ego_gt)?,
        miss: is_miss(&ego_modes, &ego_gt)?,
        b_min_fde: b_min_fde(&ego_modes, &probs, &ego_gt)?,
        min_joint_ade: min_joint_ade(&joint_modes, &joint_gts)?,
        min_joint_fde: min_joint_fde(&joint_modes, &joint_gts)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub n_scenes: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub b_min_fde: f64,
    pub min_joint_ade: f64,
    pub min_joint_fde: f64,
}

/// Unweighted mean over scenes.
pub fn aggregate(scenes: &[SceneMetrics]) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(CogError::Invariant("aggregate over an empty scene set".into()));
    }
    let n = scenes.len() as f64;
    Ok(MetricsReport {
        n_scenes: scenes.len(),
        min_ade: scenes.iter().map(|s| s.min_ade).sum::<f64>() / n,
        min_fde: scenes.iter().map(|s| s.min_fde).sum::<f64>() / n,
        miss_rate: scenes.iter().filter(|s| s.miss).count() as f64 / n,
        b_min_fde: scenes.iter().map(|s| s.b_min_fde).sum::<f64>() / n,
        min_joint_ade: scenes.iter().map(|s| s.min_joint_ade).sum::<f64>() / n,
        min_joint_fde: scenes.iter().map(|s| s.min_joint_fde).sum::<f64>() / n,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsFile {
    format: String,
    report: MetricsReport,
}

pub fn save_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let file = MetricsFile {
        format: METRICS_FORMAT.to_string(),
        report: report.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| CogError::Parse {
        path: path.display().to_string(),
        context: None,
        msg: e.to_string(),
    })?;
    text.push('\n');
    atomic_write(path, &text)
}

pub fn load_metrics(path: &Path) -> Result<MetricsReport> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CogError::io(path.display().to_string(), e))?;
    let file: MetricsFile = serde_json::from_str(&text).map_err(|e| CogError::Parse {
        path: path.display().to_string(),
        context: Some(format!("line {}, column {}", e.line(), e.column())),
        msg: e.to_string(),
    })?;
    if file.format != METRICS_FORMAT {
        return Err(CogError::Parse {
            path: path.display().to_string(),
            context: None,
            msg: format!("unsupported format '{}', expected '{METRICS_FORMAT}'", file.format),
        });
    }
    Ok(file.report)
}
