//! Topological interaction-mode classification between trajectory pairs.
//!
//! The discrete mode is the sign of the cumulative relative-bearing change
//! between two trajectories, thresholded at `theta_hat`; a smooth logistic
//! surrogate provides the differentiable counterpart used by the modal loss.

use serde::{Deserialize, Serialize};

use crate::error::{CogError, Result};
use crate::scene::{GroundTruthFutures, Scene};
use crate::util::wrap_angle;

/// Discrete interaction mode: -1 yielding, 0 neutral, +1 aggressive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeLabel(pub i8);

impl ModeLabel {
    pub fn new(value: i8) -> Self {
        assert!(matches!(value, -1 | 0 | 1), "mode label must be -1, 0 or 1");
        Self(value)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityConfig {
    /// Classification threshold on the cumulative bearing change [rad].
    pub theta_hat: f64,
    /// Surrogate temperature.
    pub tau: f64,
    /// Number of nearest neighbors considered for the modality vector.
    pub n_neighbor: usize,
}

impl Default for ModalityConfig {
    fn default() -> Self {
        Self {
            theta_hat: std::f64::consts::FRAC_PI_6,
            tau: 0.05,
            n_neighbor: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModalityVector {
    pub neighbor_ids: Vec<String>,
    pub labels: Vec<ModeLabel>,
    pub soft: Vec<f64>,
}

/// Wrap an angular difference into `[-pi, pi]`; exact boundary inputs map
/// to `+pi`.
pub fn f_norm(angle: f64) -> f64 {
    wrap_angle(angle)
}

/// Cumulative change in relative bearing from `traj_j` to `traj_i`, each
/// increment wrapped into `[-pi, pi]`.
pub fn delta_theta(traj_i: &[[f64; 2]], traj_j: &[[f64; 2]]) -> Result<f64> {
    if traj_i.len() != traj_j.len() || traj_i.len() < 2 {
        return Err(CogError::Invariant(format!(
            "delta_theta requires equal lengths >= 2, got {} and {}",
            traj_i.len(),
            traj_j.len()
        )));
    }
    let mut sum = 0.0;
    let mut prev = bearing(traj_i[0], traj_j[0])?;
    for t in 1..traj_i.len() {
        let cur = bearing(traj_i[t], traj_j[t])?;
        sum += f_norm(cur - prev);
        prev = cur;
    }
    Ok(sum)
}

fn bearing(pi: [f64; 2], pj: [f64; 2]) -> Result<f64> {
    let dy = pi[1] - pj[1];
    let dx = pi[0] - pj[0];
    if dx == 0.0 && dy == 0.0 {
        return Err(CogError::DegenerateGeometry(
            "coincident positions in bearing computation".into(),
        ));
    }
    Ok(dy.atan2(dx))
}

/// Discrete interaction mode of the pair.
pub fn classify(traj_i: &[[f64; 2]], traj_j: &[[f64; 2]], config: &ModalityConfig) -> Result<ModeLabel> {
    let dt = delta_theta(traj_i, traj_j)?;
    Ok(label_from_delta(dt, config.theta_hat))
}

pub fn label_from_delta(delta: f64, theta_hat: f64) -> ModeLabel {
    if delta < -theta_hat {
        ModeLabel(-1)
    } else if delta > theta_hat {
        ModeLabel(1)
    } else {
        ModeLabel(0)
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth surrogate of the discrete mode, in `(-1, 1)`:
/// difference of two logistics centered at `+theta_hat` and `-theta_hat`.
/// Odd in the cumulative bearing change by construction.
pub fn soft_from_delta(delta: f64, config: &ModalityConfig) -> f64 {
    logistic((delta - config.theta_hat) / config.tau)
        - logistic((-delta - config.theta_hat) / config.tau)
}

pub fn soft_mode(traj_i: &[[f64; 2]], traj_j: &[[f64; 2]], config: &ModalityConfig) -> Result<f64> {
    Ok(soft_from_delta(delta_theta(traj_i, traj_j)?, config))
}

/// Ego modality vector over the `n_neighbor` agents closest to the ego at the
/// last observed timestep (ties broken by agent id ascending). Fewer agents
/// than `n_neighbor` truncates the vector.
pub fn modality_vector(
    scene: &Scene,
    futures: &GroundTruthFutures,
    config: &ModalityConfig,
) -> Result<ModalityVector> {
    let neighbors = nearest_neighbors(scene, config.n_neighbor);
    let ego_traj = futures
        .positions(&scene.ego_id)
        .ok_or_else(|| CogError::Invariant("futures must cover the ego".into()))?;
    let mut labels = Vec::new();
    let mut soft = Vec::new();
    for id in &neighbors {
        let traj = futures
            .positions(id)
            .ok_or_else(|| CogError::Invariant(format!("futures must cover agent '{id}'")))?;
        let dt = delta_theta(&ego_traj, &traj)?;
        labels.push(label_from_delta(dt, config.theta_hat));
        soft.push(soft_from_delta(dt, config));
    }
    Ok(ModalityVector {
        neighbor_ids: neighbors,
        labels,
        soft,
    })
}

/// Ids of the `n` non-ego agents closest to the ego at the last observed
/// timestep, in proximity order with ties broken by id.
pub fn nearest_neighbors(scene: &Scene, n: usize) -> Vec<String> {
    let ego_pos = scene.ego().last_state().pose.position();
    let mut others: Vec<(f64, &str)> = scene
        .agents
        .iter()
        .filter(|a| a.id != scene.ego_id)
        .map(|a| {
            let p = a.last_state().pose.position();
            let d2 = (p[0] - ego_pos[0]).powi(2) + (p[1] - ego_pos[1]).powi(2);
            (d2, a.id.as_str())
        })
        .collect();
    others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
    others.into_iter().take(n).map(|(_, id)| id.to_string()).collect()
}
