//! Closed-loop evaluation harness.
//!
//! Surrounding agents replay their scripted trajectories while the ego
//! re-predicts and re-plans every `replan_period` steps, executing only the
//! first segment of each tree's shared root through the exact vehicle
//! dynamics. Collisions are detected by an all-pairs disc check every step.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CogError, Result};
use crate::planner::{
    dynamics_step, plan_tree, replan_step, Control, EgoState, PlanStatus, PlannerConfig,
    SolveStatus, TrajectoryTree,
};
use crate::prednet::{predict, NetConfig};
use crate::scene::{AgentState, GroundTruthFutures, Pose2, Scene};
use crate::tensor::ParamStore;
use crate::util::{atomic_write, par_map, wrap_angle};

pub const SIMLOG_FORMAT: &str = "cogdrive-simlog/1";
pub const SIMREPORT_FORMAT: &str = "cogdrive-simreport/1";

/// Closed-loop simulation configuration. The replan period, branching time
/// and horizon live in the embedded planner config; its invariant
/// `replan_period < t_b` guarantees the executed segment is always covered
/// by the mode-agnostic root.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub planner: PlannerConfig,
    pub net: NetConfig,
    /// Disc overlap beyond this tolerance counts as a collision [m].
    pub collision_tol: f64,
    /// Hard cap on simulated steps; shorter scripted futures end earlier.
    pub max_steps: usize,
    /// Scenario seed, carried into the log for provenance.
    pub seed: u64,
    /// When false the ego holds zero controls (diagnostic mode: locked path,
    /// no prediction or planning).
    pub planning: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            planner: PlannerConfig::default(),
            net: NetConfig::default(),
            collision_tol: 0.0,
            max_steps: 400,
            seed: 0,
            planning: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        self.net.validate()?;
        if !(self.collision_tol.is_finite() && self.collision_tol >= 0.0) {
            return Err(CogError::Invariant(
                "collision_tol must be finite and >= 0".into(),
            ));
        }
        if self.max_steps == 0 {
            return Err(CogError::Invariant("max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimOutcome {
    /// Scripted futures exhausted without collision.
    Completed,
    Collision,
    /// `max_steps` reached before the scripted futures ended.
    Timeout,
    /// A prediction or planning call failed; the step index is in `error`.
    Infeasible,
}

/// One executed simulation step. `ego` is the state after applying
/// `control`; `min_separation` is the smallest ego-disc-to-agent-disc center
/// distance at that state (`None` with no other agents).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub ego: EgoState,
    pub control: Control,
    /// Identifier of the tree whose root produced `control` (0 before any
    /// plan exists, i.e. only when planning is disabled).
    pub tree_id: usize,
    pub mode_probs: Vec<f64>,
    pub min_separation: Option<f64>,
    pub solver: Option<SolveStatus>,
    pub plan_status: Option<PlanStatus>,
    /// Replan wall time in ms, only on steps that re-planned. Measured with
    /// a monotonic clock; excluded from serialization so logs stay
    /// byte-deterministic.
    #[serde(skip)]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLog {
    pub seed: u64,
    pub outcome: SimOutcome,
    pub error: Option<String>,
    pub records: Vec<StepRecord>,
}

impl SimLog {
    /// Number of fallback (emergency-braking) plans that were executed.
    pub fn fallback_count(&self) -> usize {
        let mut n = 0;
        let mut last = usize::MAX;
        for r in &self.records {
            if r.tree_id != last && r.plan_status == Some(PlanStatus::Fallback) {
                n += 1;
            }
            last = r.tree_id;
        }
        n
    }

    /// Smallest separation seen over the whole episode.
    pub fn min_separation(&self) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.min_separation)
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }

    /// Wall times of the replanning steps, in execution order.
    pub fn replan_times_ms(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.wall_ms).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if w[1].t <= w[0].t {
                return Err(CogError::Invariant(
                    "sim log timestamps must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Scripted (non-ego) agent timeline over the episode.
struct ScriptedAgent {
    /// `[x, y, heading]` at future step `s` (time `t0 + (s+1) dt`).
    future: Vec<[f64; 3]>,
}

/// Run one closed-loop episode. Scripted agents replay `futures`; the ego
/// executes planned root controls through the exact dynamics. Deterministic:
/// repeated calls produce identical logs.
pub fn run_episode(
    scene: &Scene,
    futures: &GroundTruthFutures,
    weights: &ParamStore,
    cfg: &SimConfig,
) -> Result<SimLog> {
    scene.validate()?;
    futures.validate(scene)?;
    cfg.validate()?;

    let dt = scene.dt;
    let t0 = scene.last_time();
    let geom = &cfg.planner.geom;
    let episode_len = futures.t_f();
    let steps = episode_len.min(cfg.max_steps);

    let scripted: Vec<ScriptedAgent> = scene
        .agents
        .iter()
        .filter(|a| a.id != scene.ego_id)
        .map(|a| {
            let fut = futures.agent(&a.id).expect("validated futures cover all agents");
            ScriptedAgent {
                future: fut.states.iter().map(|s| [s.x, s.y, s.heading]).collect(),
            }
        })
        .collect();

    let start = scene.ego().last_state();
    let mut ego = EgoState::new(start.pose.x, start.pose.y, start.speed, start.pose.heading);
    let mut executed: Vec<EgoState> = vec![ego];

    let mut tree: Option<TrajectoryTree> = None;
    let mut tree_id = 0usize;
    let mut records: Vec<StepRecord> = Vec::with_capacity(steps);
    let mut collided = false;

    for s in 0..steps {
        let mut wall_ms = None;
        if cfg.planning && s % cfg.planner.replan_period == 0 {
            let obs = observation_window(scene, futures, &executed, s);
            let clock = Instant::now();
            let planned = predict(weights, &cfg.net, &obs).and_then(|pred| match &tree {
                Some(prev) => replan_step(prev, &pred, &ego, &scene.map, &cfg.planner),
                None => plan_tree(&pred, &ego, &scene.map, &cfg.planner),
            });
            wall_ms = Some(clock.elapsed().as_secs_f64() * 1e3);
            match planned {
                Ok(t) => {
                    tree = Some(t);
                    tree_id += 1;
                }
                Err(e) => {
                    return Ok(SimLog {
                        seed: cfg.seed,
                        outcome: SimOutcome::Infeasible,
                        error: Some(format!("step {s}: {e}")),
                        records,
                    });
                }
            }
        }

        // executed controls come only from the active tree's root segment
        let control = match (&tree, cfg.planning) {
            (Some(t), true) => t.root_controls[s % cfg.planner.replan_period],
            _ => Control { a: 0.0, delta: 0.0 },
        };
        ego = dynamics_step(&ego, &control, geom, dt);
        executed.push(ego);

        let min_sep = min_separation_at(&ego, &scripted, s, cfg);
        if let Some(d) = min_sep {
            if d < 2.0 * geom.max_radius() - cfg.collision_tol {
                collided = true;
            }
        }
        records.push(StepRecord {
            step: s,
            t: t0 + (s + 1) as f64 * dt,
            ego,
            control,
            tree_id,
            mode_probs: tree
                .as_ref()
                .map(|t| t.branches.iter().map(|b| b.prob).collect())
                .unwrap_or_default(),
            min_separation: min_sep,
            solver: tree.as_ref().map(|t| t.solver),
            plan_status: tree.as_ref().map(|t| t.status),
            wall_ms,
        });
        if collided {
            break;
        }
    }

    let outcome = if collided {
        SimOutcome::Collision
    } else if steps < episode_len {
        SimOutcome::Timeout
    } else {
        SimOutcome::Completed
    };
    Ok(SimLog {
        seed: cfg.seed,
        outcome,
        error: None,
        records,
    })
}

/// Smallest center distance between any ego disc and any scripted-agent disc
/// at future step `s`; `None` when no scripted agent is present.
fn min_separation_at(
    ego: &EgoState,
    scripted: &[ScriptedAgent],
    s: usize,
    cfg: &SimConfig,
) -> Option<f64> {
    let geom = &cfg.planner.geom;
    let ego_discs = geom.disc_centers(ego.position(), ego.psi);
    let mut best: Option<f64> = None;
    for agent in scripted {
        let Some(&[x, y, h]) = agent.future.get(s) else {
            continue;
        };
        for nd in geom.disc_centers([x, y], h) {
            for ed in ego_discs {
                let d = ((ed[0] - nd[0]).powi(2) + (ed[1] - nd[1]).powi(2)).sqrt();
                best = Some(best.map_or(d, |b: f64| b.min(d)));
            }
        }
    }
    best
}

/// Observation scene for the replan at sim step `s`: the last `T_h` samples
/// ending at the current time, using the sim's own executed history for the
/// ego and the scripted history for everyone else.
fn observation_window(
    scene: &Scene,
    futures: &GroundTruthFutures,
    executed: &[EgoState],
    s: usize,
) -> Scene {
    let t_h = scene.t_h();
    let dt = scene.dt;
    let t0 = scene.last_time();
    let agents = scene
        .agents
        .iter()
        .map(|agent| {
            let mut timeline: Vec<AgentState> = if agent.id == scene.ego_id {
                // history up to (excluding) the last observed sample, which
                // `executed[0]` reproduces, then the executed states
                let mut tl: Vec<AgentState> =
                    agent.states[..t_h - 1].to_vec();
                tl.extend(executed.iter().enumerate().map(|(i, e)| AgentState {
                    t: t0 + i as f64 * dt,
                    pose: Pose2::new(e.x, e.y, e.psi),
                    speed: e.v,
                }));
                tl
            } else {
                let fut = futures.agent(&agent.id).expect("validated futures");
                let mut tl = agent.states.clone();
                let mut prev = *agent.last_state();
                for f in &fut.states {
                    let dist = ((f.x - prev.pose.x).powi(2) + (f.y - prev.pose.y).powi(2)).sqrt();
                    let st = AgentState {
                        t: f.t,
                        pose: Pose2::new(f.x, f.y, wrap_angle(f.heading)),
                        speed: dist / dt,
                    };
                    prev = st;
                    tl.push(st);
                }
                tl
            };
            timeline.truncate(t_h + s);
            crate::scene::AgentHistory {
                id: agent.id.clone(),
                kind: agent.kind,
                states: timeline.split_off(timeline.len() - t_h),
            }
        })
        .collect();
    Scene {
        agents,
        map: scene.map.clone(),
        ego_id: scene.ego_id.clone(),
        dt,
    }
}

// ---------------------------------------------------------------------------
// batch evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub index: usize,
    pub outcome: SimOutcome,
    pub steps: usize,
    pub min_separation: Option<f64>,
    pub fallbacks: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub episodes: Vec<EpisodeSummary>,
    pub collision_rate: f64,
    pub completion_rate: f64,
    pub mean_min_separation: Option<f64>,
    pub replan_ms_mean: Option<f64>,
    pub replan_ms_p95: Option<f64>,
}

/// Evaluate a set of episodes. Episodes run concurrently; summaries keep the
/// input ordering and per-episode failures are recorded, never fatal.
pub fn batch_eval(
    episodes: &[(Scene, GroundTruthFutures)],
    weights: &ParamStore,
    cfg: &SimConfig,
) -> Result<(SimReport, Vec<SimLog>)> {
    if episodes.is_empty() {
        return Err(CogError::Invariant("batch_eval needs at least one episode".into()));
    }
    let logs: Vec<SimLog> = par_map(episodes.iter().collect(), |(scene, futures)| {
        run_episode(scene, futures, weights, cfg).unwrap_or_else(|e| SimLog {
            seed: cfg.seed,
            outcome: SimOutcome::Infeasible,
            error: Some(e.to_string()),
            records: Vec::new(),
        })
    });
    Ok((summarize(&logs), logs))
}

/// Aggregate ordered episode logs into a report.
pub fn summarize(logs: &[SimLog]) -> SimReport {
    let n = logs.len() as f64;
    let episodes: Vec<EpisodeSummary> = logs
        .iter()
        .enumerate()
        .map(|(i, log)| EpisodeSummary {
            index: i,
            outcome: log.outcome,
            steps: log.records.len(),
            min_separation: log.min_separation(),
            fallbacks: log.fallback_count(),
            error: log.error.clone(),
        })
        .collect();
    let count = |o: SimOutcome| logs.iter().filter(|l| l.outcome == o).count() as f64;
    let seps: Vec<f64> = episodes.iter().filter_map(|e| e.min_separation).collect();
    let mut replan: Vec<f64> = logs.iter().flat_map(|l| l.replan_times_ms()).collect();
    replan.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let p95 = if replan.is_empty() {
        None
    } else {
        let idx = ((replan.len() as f64 * 0.95).ceil() as usize).clamp(1, replan.len()) - 1;
        Some(replan[idx])
    };
    SimReport {
        episodes,
        collision_rate: count(SimOutcome::Collision) / n,
        completion_rate: count(SimOutcome::Completed) / n,
        mean_min_separation: mean(&seps),
        replan_ms_mean: mean(&replan),
        replan_ms_p95: p95,
    }
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimLogHeader {
    format: String,
    seed: u64,
    outcome: SimOutcome,
    error: Option<String>,
}

/// Line-delimited log: a header line followed by one record per line.
pub fn simlog_to_string(log: &SimLog) -> Result<String> {
    let header = SimLogHeader {
        format: SIMLOG_FORMAT.to_string(),
        seed: log.seed,
        outcome: log.outcome,
        error: log.error.clone(),
    };
    let mut out = serde_json::to_string(&header).map_err(|e| CogError::Other(e.to_string()))?;
    out.push('\n');
    for r in &log.records {
        out.push_str(&serde_json::to_string(r).map_err(|e| CogError::Other(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_simlog(path: &Path, log: &SimLog) -> Result<()> {
    atomic_write(path, &simlog_to_string(log)?)
}

pub fn simlog_from_string(text: &str) -> Result<SimLog> {
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CogError::Invariant("empty sim log".into()))?;
    let header: SimLogHeader = serde_json::from_str(header_line)
        .map_err(|e| CogError::Other(format!("bad sim log header: {e}")))?;
    if header.format != SIMLOG_FORMAT {
        return Err(CogError::Invariant(format!(
            "unsupported sim log format '{}', expected '{SIMLOG_FORMAT}'",
            header.format
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(line)
            .map_err(|e| CogError::Other(format!("bad sim log record {i}: {e}")))?;
        records.push(rec);
    }
    let log = SimLog {
        seed: header.seed,
        outcome: header.outcome,
        error: header.error,
        records,
    };
    log.validate()?;
    Ok(log)
}

pub fn load_simlog(path: &Path) -> Result<SimLog> {
    let text = std::fs::read_to_string(path).map_err(|e| CogError::io(path.display().to_string(), e))?;
    simlog_from_string(&text)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportFile {
    format: String,
    report: SimReport,
}

pub fn save_report(path: &Path, report: &SimReport) -> Result<()> {
    let file = ReportFile {
        format: SIMREPORT_FORMAT.to_string(),
        report: report.clone(),
    };
    let mut text =
        serde_json::to_string_pretty(&file).map_err(|e| CogError::Other(e.to_string()))?;
    text.push('\n');
    atomic_write(path, &text)
}

pub fn load_report(path: &Path) -> Result<SimReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CogError::io(path.display().to_string(), e))?;
    let file: ReportFile =
        serde_json::from_str(&text).map_err(|e| CogError::Other(format!("bad sim report: {e}")))?;
    if file.format != SIMREPORT_FORMAT {
        return Err(CogError::Invariant(format!(
            "unsupported sim report format '{}', expected '{SIMREPORT_FORMAT}'",
            file.format
        )));
    }
    Ok(file.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prednet::init_params;
    use crate::scene::{
        synth_scene, AgentFuture, AgentHistory, AgentKind, FutureState, GenConfig, Template,
    };

    fn small_net() -> NetConfig {
        NetConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_modes: 2,
            n_neighbor: 2,
            t_f: 30,
        }
    }

    fn sim_cfg() -> SimConfig {
        SimConfig {
            net: small_net(),
            ..SimConfig::default()
        }
    }

    fn episode(template: Template, seed: u64) -> (Scene, GroundTruthFutures) {
        let res = synth_scene(&GenConfig::new(template), seed).unwrap();
        (res.scene, res.futures)
    }

    /// Stationary ego at the origin plus one scripted agent driving along
    /// `-x` through the origin; `t_f` future steps.
    fn locked_path_fixture(agent_y: f64, t_f: usize) -> (Scene, GroundTruthFutures) {
        let dt = 0.1;
        let t_h = 10;
        let mk_state = |t: f64, x: f64, y: f64, h: f64, v: f64| AgentState {
            t,
            pose: Pose2::new(x, y, h),
            speed: v,
        };
        let ego_hist: Vec<AgentState> = (0..t_h)
            .map(|i| mk_state(i as f64 * dt, 0.0, 0.0, 0.0, 0.0))
            .collect();
        let agent_hist: Vec<AgentState> = (0..t_h)
            .map(|i| {
                mk_state(
                    i as f64 * dt,
                    24.5 - 0.5 * i as f64,
                    agent_y,
                    std::f64::consts::PI,
                    5.0,
                )
            })
            .collect();
        let scene = Scene {
            agents: vec![
                AgentHistory {
                    id: "ego".into(),
                    kind: AgentKind::Vehicle,
                    states: ego_hist,
                },
                AgentHistory {
                    id: "a1".into(),
                    kind: AgentKind::Vehicle,
                    states: agent_hist,
                },
            ],
            map: Vec::new(),
            ego_id: "ego".into(),
            dt,
        };
        let t0 = scene.last_time();
        let futures = GroundTruthFutures {
            futures: vec![
                AgentFuture {
                    id: "ego".into(),
                    states: (0..t_f)
                        .map(|s| FutureState {
                            t: t0 + (s + 1) as f64 * dt,
                            x: 0.0,
                            y: 0.0,
                            heading: 0.0,
                        })
                        .collect(),
                },
                AgentFuture {
                    id: "a1".into(),
                    states: (0..t_f)
                        .map(|s| FutureState {
                            t: t0 + (s + 1) as f64 * dt,
                            x: 20.0 - 0.5 * (s + 1) as f64,
                            y: agent_y,
                            heading: std::f64::consts::PI,
                        })
                        .collect(),
                },
            ],
        };
        (scene, futures)
    }

    /// Weights whose trajectory head is zeroed: every mode predicts each
    /// agent holding its current pose, a calm well-behaved predictor.
    fn hold_position_weights(net: &NetConfig) -> ParamStore {
        let mut w = init_params(net, 7).unwrap();
        for v in w.get_mut("head.traj.1.w").unwrap() {
            *v = 0.0;
        }
        w
    }

    #[test]
    fn straight_follow_completes_and_tracks_lane() {
        let (scene, futures) = episode(Template::StraightFollow, 1);
        let cfg = sim_cfg();
        let weights = hold_position_weights(&cfg.net);
        let log = run_episode(&scene, &futures, &weights, &cfg).unwrap();
        assert_eq!(log.outcome, SimOutcome::Completed);
        assert_eq!(log.records.len(), futures.t_f());
        // the ego lane center is the x-axis; stay within the corridor
        for r in &log.records {
            assert!(
                r.ego.y.abs() <= 0.3,
                "lane deviation {} at step {}",
                r.ego.y,
                r.step
            );
        }
    }

    #[test]
    fn untrained_weights_still_complete_without_collision() {
        let (scene, futures) = episode(Template::StraightFollow, 1);
        let cfg = sim_cfg();
        let weights = init_params(&cfg.net, 7).unwrap();
        let log = run_episode(&scene, &futures, &weights, &cfg).unwrap();
        assert_eq!(log.outcome, SimOutcome::Completed);
        // stays between the road edges even with garbage predictions
        let road_limit = 2.5 - cfg.planner.geom.max_radius();
        for r in &log.records {
            assert!(r.ego.y.abs() <= road_limit + 1e-9, "off road at {}", r.step);
        }
    }

    #[test]
    fn executed_states_satisfy_exact_dynamics() {
        let (scene, futures) = episode(Template::Crossing, 3);
        let cfg = sim_cfg();
        let weights = init_params(&cfg.net, 7).unwrap();
        let log = run_episode(&scene, &futures, &weights, &cfg).unwrap();
        let start = scene.ego().last_state();
        let mut prev = EgoState::new(start.pose.x, start.pose.y, start.speed, start.pose.heading);
        for r in &log.records {
            let next = dynamics_step(&prev, &r.control, &cfg.planner.geom, scene.dt);
            assert!(
                (next.x - r.ego.x).abs() < 1e-12
                    && (next.y - r.ego.y).abs() < 1e-12
                    && (next.v - r.ego.v).abs() < 1e-12
                    && (next.psi - r.ego.psi).abs() < 1e-12,
                "closed-loop state continuity broken at step {}",
                r.step
            );
            prev = r.ego;
        }
    }

    #[test]
    fn replan_schedule_and_log_invariants() {
        let (scene, futures) = episode(Template::Merge, 5);
        let cfg = sim_cfg();
        let weights = init_params(&cfg.net, 7).unwrap();
        let log = run_episode(&scene, &futures, &weights, &cfg).unwrap();
        log.validate().unwrap();
        let period = cfg.planner.replan_period;
        let mut expected_tree = 0;
        for r in &log.records {
            assert!(r.min_separation.is_some(), "separation missing at {}", r.step);
            if r.step % period == 0 {
                expected_tree += 1;
                assert!(r.wall_ms.is_some(), "replan wall time missing at {}", r.step);
            } else {
                assert!(r.wall_ms.is_none());
            }
            assert_eq!(r.tree_id, expected_tree);
            assert_eq!(r.mode_probs.len(), cfg.net.n_modes);
        }
        assert_eq!(log.replan_times_ms().len(), futures.t_f().div_ceil(period));
    }

    #[test]
    fn same_seed_yields_bit_identical_logs() {
        let (scene, futures) = episode(Template::Crossing, 11);
        let cfg = sim_cfg();
        let weights = init_params(&cfg.net, 7).unwrap();
        let a = run_episode(&scene, &futures, &weights, &cfg).unwrap();
        let b = run_episode(&scene, &futures, &weights, &cfg).unwrap();
        assert_eq!(
            simlog_to_string(&a).unwrap(),
            simlog_to_string(&b).unwrap()
        );
    }

    #[test]
    fn locked_path_collision_detected_at_oracle_step() {
        let (scene, futures) = locked_path_fixture(0.0, 60);
        let cfg = SimConfig {
            planning: false,
            ..sim_cfg()
        };
        let weights = init_params(&cfg.net, 7).unwrap();
        let log = run_episode(&scene, &futures, &weights, &cfg).unwrap();
        assert_eq!(log.outcome, SimOutcome::Collision);

        // independent oracle: stationary ego discs vs scripted agent discs
        let geom = &cfg.planner.geom;
        let ego_discs = geom.disc_centers([0.0, 0.0], 0.0);
        let fut = futures.agent("a1").unwrap();
        let expected = fut
            .states
            .iter()
            .position(|f| {
                geom.disc_centers([f.x, f.y], f.heading)
                    .iter()
                    .any(|nd| {
                        ego_discs.iter().any(|ed| {
                            ((ed[0] - nd[0]).powi(2) + (ed[1] - nd[1]).powi(2)).sqrt()
                                < 2.0 * geom.max_radius()
                        })
                    })
            })
            .expect("fixture must collide");
        let last = log.records.last().unwrap();
        assert_eq!(last.step, expected, "collision at the wrong step");
        assert_eq!(log.records.len(), expected + 1);
        // ego never moved: controls were held at zero
        assert!(log.records.iter().all(|r| r.control.a == 0.0 && r.ego.v == 0.0));
    }

    #[test]
    fn max_steps_cap_yields_timeout() {
        let (scene, futures) = locked_path_fixture(0.0, 60);
        let cfg = SimConfig {
            planning: false,
            max_steps: 10,
            ..sim_cfg()
        };
        let weights = init_params(&cfg.net, 7).unwrap();
        let log = run_episode(&scene, &futures, &weights, &cfg).unwrap();
        assert_eq!(log.outcome, SimOutcome::Timeout);
        assert_eq!(log.records.len(), 10);
    }

    #[test]
    fn batch_eval_matches_hand_tally_and_is_order_invariant() {
        let hit = locked_path_fixture(0.0, 60);
        let miss = locked_path_fixture(50.0, 60);
        let cfg = SimConfig {
            planning: false,
            ..sim_cfg()
        };
        let weights = init_params(&cfg.net, 7).unwrap();
        let eps = vec![hit.clone(), miss.clone()];
        let (report, logs) = batch_eval(&eps, &weights, &cfg).unwrap();
        assert_eq!(logs.len(), 2);
        assert_eq!(report.episodes[0].outcome, SimOutcome::Collision);
        assert_eq!(report.episodes[1].outcome, SimOutcome::Completed);
        assert!((report.collision_rate - 0.5).abs() < 1e-15);
        assert!((report.completion_rate - 0.5).abs() < 1e-15);
        let hand_mean = (logs[0].min_separation().unwrap() + logs[1].min_separation().unwrap()) / 2.0;
        assert!((report.mean_min_separation.unwrap() - hand_mean).abs() < 1e-12);

        let (rev, _) = batch_eval(&[miss, hit], &weights, &cfg).unwrap();
        assert_eq!(rev.collision_rate, report.collision_rate);
        assert_eq!(rev.completion_rate, report.completion_rate);
        assert_eq!(rev.mean_min_separation, report.mean_min_separation);
    }

    #[test]
    fn single_completed_episode_has_zero_collision_rate() {
        let miss = locked_path_fixture(50.0, 30);
        let cfg = SimConfig {
            planning: false,
            ..sim_cfg()
        };
        let weights = init_params(&cfg.net, 7).unwrap();
        let (report, _) = batch_eval(&[miss], &weights, &cfg).unwrap();
        assert_eq!(report.collision_rate, 0.0);
        assert_eq!(report.completion_rate, 1.0);
    }

    #[test]
    fn simlog_roundtrips_through_disk() {
        let (scene, futures) = episode(Template::StraightFollow, 2);
        let cfg = sim_cfg();
        let weights = init_params(&cfg.net, 7).unwrap();
        let log = run_episode(&scene, &futures, &weights, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episode.simlog");
        save_simlog(&path, &log).unwrap();
        let loaded = load_simlog(&path).unwrap();
        // wall times are masked on disk; everything else is preserved exactly
        let mut masked = log.clone();
        for r in &mut masked.records {
            r.wall_ms = None;
        }
        assert_eq!(loaded, masked);
        // a second save produces identical bytes
        let path2 = dir.path().join("episode2.simlog");
        save_simlog(&path2, &log).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn bad_simlog_header_rejected() {
        assert!(simlog_from_string("").is_err());
        assert!(simlog_from_string(
            "{\"format\":\"cogdrive-simlog/9\",\"seed\":0,\"outcome\":\"completed\",\"error\":null}\n"
        )
        .is_err());
    }

    #[test]
    fn report_roundtrips_and_rejects_bad_format() {
        let miss = locked_path_fixture(50.0, 20);
        let cfg = SimConfig {
            planning: false,
            ..sim_cfg()
        };
        let weights = init_params(&cfg.net, 7).unwrap();
        let (report, _) = batch_eval(&[miss], &weights, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        save_report(&path, &report).unwrap();
        assert_eq!(load_report(&path).unwrap(), report);
        let bad = path.with_file_name("bad.json");
        std::fs::write(
            &bad,
            "{\"format\":\"cogdrive-simreport/9\",\"report\":{\"episodes\":[],\"collision_rate\":0.0,\"completion_rate\":0.0,\"mean_min_separation\":null,\"replan_ms_mean\":null,\"replan_ms_p95\":null}}",
        )
        .unwrap();
        assert!(load_report(&bad).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = sim_cfg();
        cfg.max_steps = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = sim_cfg();
        cfg.collision_tol = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = sim_cfg();
        cfg.planner.replan_period = cfg.planner.t_b;
        assert!(cfg.validate().is_err());
    }
}
