//! Scenario file reader/writer (`cogdrive-scene/1`).
//!
//! The on-disk layout packs per-step states into arrays `[t, x, y, heading, v]`
//! (futures: `[t, x, y, heading]`) with all floats decimal, radians and
//! meters/seconds throughout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    AgentFuture, AgentHistory, AgentKind, AgentState, FutureState, GroundTruthFutures,
    MapPolyline, PolylineSemantics, Pose2, Scene, SCENE_FORMAT,
};
use crate::error::{CogError, Result};
use crate::util::atomic_write;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    format: String,
    dt: f64,
    ego_id: String,
    agents: Vec<AgentRecord>,
    map: Vec<PolylineRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    futures: Option<Vec<FutureRecord>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRecord {
    id: String,
    kind: AgentKind,
    states: Vec<[f64; 5]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolylineRecord {
    id: String,
    semantics: PolylineSemantics,
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FutureRecord {
    id: String,
    states: Vec<[f64; 4]>,
}

fn to_file(scene: &Scene, futures: Option<&GroundTruthFutures>) -> ScenarioFile {
    ScenarioFile {
        format: SCENE_FORMAT.to_string(),
        dt: scene.dt,
        ego_id: scene.ego_id.clone(),
        agents: scene
            .agents
            .iter()
            .map(|a| AgentRecord {
                id: a.id.clone(),
                kind: a.kind,
                states: a
                    .states
                    .iter()
                    .map(|s| [s.t, s.pose.x, s.pose.y, s.pose.heading, s.speed])
                    .collect(),
            })
            .collect(),
        map: scene
            .map
            .iter()
            .map(|p| PolylineRecord {
                id: p.id.clone(),
                semantics: p.semantics,
                points: p.points.clone(),
            })
            .collect(),
        futures: futures.map(|f| {
            f.futures
                .iter()
                .map(|af| FutureRecord {
                    id: af.id.clone(),
                    states: af.states.iter().map(|s| [s.t, s.x, s.y, s.heading]).collect(),
                })
                .collect()
        }),
    }
}

fn from_file(file: ScenarioFile, path: &str) -> Result<(Scene, Option<GroundTruthFutures>)> {
    if file.format != SCENE_FORMAT {
        return Err(CogError::Parse {
            path: path.to_string(),
            context: Some("format".into()),
            msg: format!("unsupported format '{}', expected '{}'", file.format, SCENE_FORMAT),
        });
    }
    let scene = Scene {
        agents: file
            .agents
            .into_iter()
            .map(|a| AgentHistory {
                id: a.id,
                kind: a.kind,
                states: a
                    .states
                    .into_iter()
                    .map(|s| AgentState {
                        t: s[0],
                        pose: Pose2 {
                            x: s[1],
                            y: s[2],
                            heading: s[3],
                        },
                        speed: s[4],
                    })
                    .collect(),
            })
            .collect(),
        map: file
            .map
            .into_iter()
            .map(|p| MapPolyline {
                id: p.id,
                semantics: p.semantics,
                points: p.points,
            })
            .collect(),
        ego_id: file.ego_id,
        dt: file.dt,
    };
    scene.validate()?;
    let futures = match file.futures {
        Some(records) => {
            let f = GroundTruthFutures {
                futures: records
                    .into_iter()
                    .map(|r| AgentFuture {
                        id: r.id,
                        states: r
                            .states
                            .into_iter()
                            .map(|s| FutureState {
                                t: s[0],
                                x: s[1],
                                y: s[2],
                                heading: s[3],
                            })
                            .collect(),
                    })
                    .collect(),
            };
            f.validate(&scene)?;
            Some(f)
        }
        None => None,
    };
    Ok((scene, futures))
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<(Scene, Option<GroundTruthFutures>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CogError::io(path.display().to_string(), e))?;
    let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| CogError::Parse {
        path: path.display().to_string(),
        context: Some(format!("line {}, column {}", e.line(), e.column())),
        msg: e.to_string(),
    })?;
    from_file(file, &path.display().to_string())
}

/// Serialize a scene (plus optional futures) to the canonical scenario text.
pub fn scenario_to_string(scene: &Scene, futures: Option<&GroundTruthFutures>) -> Result<String> {
    scene.validate()?;
    if let Some(f) = futures {
        f.validate(scene)?;
    }
    let file = to_file(scene, futures);
    Ok(serde_json::to_string_pretty(&file).expect("scenario serialization cannot fail") + "\n")
}

pub fn save_scenario(
    scene: &Scene,
    futures: Option<&GroundTruthFutures>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let text = scenario_to_string(scene, futures)?;
    atomic_write(path.as_ref(), &text)
}
