//! Traffic-scene domain model and the on-disk scenario format.
//!
//! A [`Scene`] holds observed agent histories on a uniform timestamp grid plus
//! map polylines and an ego designation. [`GroundTruthFutures`] optionally
//! extends each agent past the observation window.

mod io;
mod synth;

pub use io::{load_scenario, save_scenario, scenario_to_string};
pub use synth::{synth_scene, GenConfig, Outcome, SynthResult, Template};

use serde::{Deserialize, Serialize};

use crate::error::{CogError, Result};
use crate::util::wrap_angle;

pub const SCENE_FORMAT: &str = "cogdrive-scene/1";

/// Planar pose; heading normalized to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub t: f64,
    pub pose: Pose2,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Cyclist,
    Pedestrian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHistory {
    pub id: String,
    pub kind: AgentKind,
    pub states: Vec<AgentState>,
}

impl AgentHistory {
    pub fn last_state(&self) -> &AgentState {
        self.states.last().expect("validated history is non-empty")
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.states.iter().map(|s| s.pose.position()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineSemantics {
    LaneCenter,
    LaneBoundary,
    RoadEdge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    pub id: String,
    pub semantics: PolylineSemantics,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub agents: Vec<AgentHistory>,
    pub map: Vec<MapPolyline>,
    pub ego_id: String,
    pub dt: f64,
}

impl Scene {
    pub fn agent(&self, id: &str) -> Option<&AgentHistory> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn ego(&self) -> &AgentHistory {
        self.agent(&self.ego_id).expect("validated ego present")
    }

    /// Number of observed steps (T_h).
    pub fn t_h(&self) -> usize {
        self.agents[0].states.len()
    }

    /// Timestamp of the last observation.
    pub fn last_time(&self) -> f64 {
        self.agents[0].states.last().unwrap().t
    }

    /// Check every TYPE invariant; errors name the failing invariant.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(CogError::Invariant("dt must be finite and positive".into()));
        }
        if self.agents.is_empty() {
            return Err(CogError::Invariant("scene must contain at least one agent (M >= 1)".into()));
        }
        if self.agent(&self.ego_id).is_none() {
            return Err(CogError::Invariant(format!(
                "ego_id '{}' not present among agents",
                self.ego_id
            )));
        }
        let grid: Vec<f64> = self.agents[0].states.iter().map(|s| s.t).collect();
        for agent in &self.agents {
            validate_history(agent, self.dt)?;
            if agent.states.len() != grid.len()
                || agent
                    .states
                    .iter()
                    .zip(&grid)
                    .any(|(s, &t)| (s.t - t).abs() > 1e-9)
            {
                return Err(CogError::Invariant(format!(
                    "agent '{}' does not share the scene timestamp grid",
                    agent.id
                )));
            }
        }
        for pl in &self.map {
            validate_polyline(pl)?;
        }
        Ok(())
    }
}

fn validate_history(agent: &AgentHistory, dt: f64) -> Result<()> {
    if agent.states.len() < 2 {
        return Err(CogError::Invariant(format!(
            "agent '{}' history length {} < 2",
            agent.id,
            agent.states.len()
        )));
    }
    for (i, s) in agent.states.iter().enumerate() {
        if !(s.pose.x.is_finite() && s.pose.y.is_finite() && s.pose.heading.is_finite()) {
            return Err(CogError::Invariant(format!(
                "agent '{}' state {} has non-finite pose",
                agent.id, i
            )));
        }
        if (wrap_angle(s.pose.heading) - s.pose.heading).abs() > 1e-12 {
            return Err(CogError::Invariant(format!(
                "agent '{}' state {} heading not normalized to (-pi, pi]",
                agent.id, i
            )));
        }
        if !(s.speed.is_finite() && s.speed >= 0.0) {
            return Err(CogError::Invariant(format!(
                "agent '{}' state {} speed must be >= 0",
                agent.id, i
            )));
        }
    }
    for w in agent.states.windows(2) {
        let step = w[1].t - w[0].t;
        if step <= 0.0 {
            return Err(CogError::Invariant(format!(
                "agent '{}' timestamps not strictly increasing",
                agent.id
            )));
        }
        if (step - dt).abs() > 1e-9 {
            return Err(CogError::Invariant(format!(
                "agent '{}': non-uniform timestep ({} vs dt={})",
                agent.id, step, dt
            )));
        }
    }
    Ok(())
}

fn validate_polyline(pl: &MapPolyline) -> Result<()> {
    if pl.points.len() < 2 {
        return Err(CogError::Invariant(format!(
            "polyline '{}' length {} < 2",
            pl.id,
            pl.points.len()
        )));
    }
    for w in pl.points.windows(2) {
        if w[0] == w[1] {
            return Err(CogError::Invariant(format!(
                "polyline '{}' has consecutive duplicate points",
                pl.id
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FutureState {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentFuture {
    pub id: String,
    pub states: Vec<FutureState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFutures {
    pub futures: Vec<AgentFuture>,
}

impl GroundTruthFutures {
    pub fn agent(&self, id: &str) -> Option<&AgentFuture> {
        self.futures.iter().find(|f| f.id == id)
    }

    /// Future horizon T_f in steps.
    pub fn t_f(&self) -> usize {
        self.futures.first().map(|f| f.states.len()).unwrap_or(0)
    }

    pub fn positions(&self, id: &str) -> Option<Vec<[f64; 2]>> {
        self.agent(id)
            .map(|f| f.states.iter().map(|s| [s.x, s.y]).collect())
    }

    pub fn validate(&self, scene: &Scene) -> Result<()> {
        if self.futures.len() != scene.agents.len() {
            return Err(CogError::Invariant(format!(
                "futures cover {} agents but scene has {}",
                self.futures.len(),
                scene.agents.len()
            )));
        }
        let t_f = self.t_f();
        if t_f < 1 {
            return Err(CogError::Invariant("future length T_f must be >= 1".into()));
        }
        let t0 = scene.last_time() + scene.dt;
        for fut in &self.futures {
            if scene.agent(&fut.id).is_none() {
                return Err(CogError::Invariant(format!(
                    "future agent '{}' not present in scene",
                    fut.id
                )));
            }
            if fut.states.len() != t_f {
                return Err(CogError::Invariant(format!(
                    "future agent '{}' length {} differs from T_f={}",
                    fut.id,
                    fut.states.len(),
                    t_f
                )));
            }
            for (i, s) in fut.states.iter().enumerate() {
                let expected = t0 + i as f64 * scene.dt;
                if (s.t - expected).abs() > 1e-9 {
                    return Err(CogError::Invariant(format!(
                        "future agent '{}' step {} not aligned to the scene grid",
                        fut.id, i
                    )));
                }
            }
        }
        Ok(())
    }
}
