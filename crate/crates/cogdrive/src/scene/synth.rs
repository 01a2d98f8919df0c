//! Seeded synthetic scenario generator.
//!
//! Four templates (straight_follow, unprotected_left, merge, crossing), each
//! with two labeled interaction outcomes for the ego-conflict pair: the
//! conflict agent either yields to the ego or passes first. Histories are
//! authored so the outcome only becomes visible inside the future window,
//! keeping the prediction task genuinely multimodal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    AgentFuture, AgentHistory, AgentKind, AgentState, FutureState, GroundTruthFutures,
    MapPolyline, PolylineSemantics, Pose2, Scene,
};
use crate::error::{CogError, Result};
use crate::util::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    StraightFollow,
    UnprotectedLeft,
    Merge,
    Crossing,
}

impl Template {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "straight_follow" => Ok(Template::StraightFollow),
            "unprotected_left" => Ok(Template::UnprotectedLeft),
            "merge" => Ok(Template::Merge),
            "crossing" => Ok(Template::Crossing),
            other => Err(CogError::UnknownTemplate(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Template::StraightFollow => "straight_follow",
            Template::UnprotectedLeft => "unprotected_left",
            Template::Merge => "merge",
            Template::Crossing => "crossing",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub template: Template,
    /// Std-dev of Gaussian position jitter applied to observed histories [m].
    pub sigma: f64,
    pub t_h: usize,
    pub t_f: usize,
    pub dt: f64,
}

impl GenConfig {
    pub fn new(template: Template) -> Self {
        Self {
            template,
            sigma: 0.0,
            t_h: 10,
            t_f: 30,
            dt: 0.1,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }
}

/// Labeled interaction outcome of the ego-conflict pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// The conflict agent yields; the ego clears the conflict region first.
    Yield,
    /// The conflict agent passes first.
    Pass,
}

#[derive(Debug, Clone)]
pub struct SynthResult {
    pub scene: Scene,
    pub futures: GroundTruthFutures,
    pub outcome: Outcome,
    /// Id of the conflict agent the outcome refers to.
    pub conflict_id: String,
}

// ---------------------------------------------------------------------------
// path geometry and motion scripts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum PathGeom {
    Line {
        origin: [f64; 2],
        angle: f64,
    },
    /// Straight approach through `turn_start` at `approach_angle`, then a
    /// left quarter-circle of `radius`, then straight again. `s = 0` at the
    /// turn entry.
    LeftTurn {
        turn_start: [f64; 2],
        approach_angle: f64,
        radius: f64,
    },
    Polyline {
        pts: Vec<[f64; 2]>,
    },
}

impl PathGeom {
    fn pose_at(&self, s: f64) -> ([f64; 2], f64) {
        match self {
            PathGeom::Line { origin, angle } => {
                let (sin, cos) = angle.sin_cos();
                ([origin[0] + s * cos, origin[1] + s * sin], *angle)
            }
            PathGeom::LeftTurn {
                turn_start,
                approach_angle,
                radius,
            } => {
                let arc_len = radius * std::f64::consts::FRAC_PI_2;
                // local frame: approach along +x, turn entry at the origin
                let (lx, ly, lh) = if s <= 0.0 {
                    (s, 0.0, 0.0)
                } else if s <= arc_len {
                    let phi = s / radius;
                    (radius * phi.sin(), radius * (1.0 - phi.cos()), phi)
                } else {
                    let extra = s - arc_len;
                    (*radius, radius + extra, std::f64::consts::FRAC_PI_2)
                };
                let (sin, cos) = approach_angle.sin_cos();
                (
                    [
                        turn_start[0] + lx * cos - ly * sin,
                        turn_start[1] + lx * sin + ly * cos,
                    ],
                    wrap_angle(lh + approach_angle),
                )
            }
            PathGeom::Polyline { pts } => {
                // s < 0 extrapolates the first segment, s past the end the last
                let mut remaining = s;
                let n_seg = pts.len() - 1;
                for (k, w) in pts.windows(2).enumerate() {
                    let dx = w[1][0] - w[0][0];
                    let dy = w[1][1] - w[0][1];
                    let len = (dx * dx + dy * dy).sqrt();
                    if remaining <= len || k == n_seg - 1 {
                        let f = remaining / len;
                        return ([w[0][0] + f * dx, w[0][1] + f * dy], dy.atan2(dx));
                    }
                    remaining -= len;
                }
                unreachable!("polyline has >= 2 points")
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Script {
    id: String,
    path: PathGeom,
    /// Arc-length position at t = 0.
    s0: f64,
    /// Speed at t = 0.
    v0: f64,
    /// Piecewise-constant acceleration: (start time, accel). Sorted by time;
    /// zero before the first entry.
    accel: Vec<(f64, f64)>,
}

impl Script {
    fn accel_at(&self, t: f64) -> f64 {
        let mut a = 0.0;
        for &(from, acc) in &self.accel {
            if t >= from - 1e-12 {
                a = acc;
            }
        }
        a
    }

    /// Sample `n` steps at `dt` starting from t = 0: (pos, heading, speed).
    fn sample(&self, n: usize, dt: f64) -> Vec<([f64; 2], f64, f64)> {
        let mut out = Vec::with_capacity(n);
        let mut s = self.s0;
        let mut v = self.v0;
        for i in 0..n {
            let (pos, heading) = self.path.pose_at(s);
            out.push((pos, heading, v));
            let t = i as f64 * dt;
            s += v * dt;
            v = (v + self.accel_at(t) * dt).max(0.0);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// templates
// ---------------------------------------------------------------------------

struct TemplateScene {
    scripts: Vec<Script>,
    map: Vec<MapPolyline>,
    conflict_id: String,
}

fn line_pl(id: &str, semantics: PolylineSemantics, a: [f64; 2], b: [f64; 2]) -> MapPolyline {
    MapPolyline {
        id: id.to_string(),
        semantics,
        points: vec![a, b],
    }
}

fn straight_follow(rng: &mut ChaCha8Rng, outcome: Outcome) -> TemplateScene {
    let v_e = rng.gen_range(8.0..10.0);
    let v_l = v_e * rng.gen_range(0.9..1.1);
    let gap0 = 1.5 * v_l + 6.0;

    let ego = Script {
        id: "ego".into(),
        path: PathGeom::Line {
            origin: [0.0, 0.0],
            angle: 0.0,
        },
        s0: 0.0,
        v0: v_e,
        accel: match outcome {
            Outcome::Pass => vec![],
            // lead brakes; ego follows suit shortly after
            Outcome::Yield => vec![(1.5, -2.5), (1.5 + v_l / 5.0, 0.0)],
        },
    };
    let lead = Script {
        id: "a1".into(),
        path: PathGeom::Line {
            origin: [0.0, 0.0],
            angle: 0.0,
        },
        s0: gap0,
        v0: v_l,
        accel: match outcome {
            Outcome::Pass => vec![],
            Outcome::Yield => vec![(1.2, -2.5), (1.2 + v_l / 5.0, 0.0)],
        },
    };
    TemplateScene {
        scripts: vec![ego, lead],
        map: vec![
            line_pl("lane_main", PolylineSemantics::LaneCenter, [-20.0, 0.0], [80.0, 0.0]),
            line_pl("edge_n", PolylineSemantics::RoadEdge, [-20.0, 2.5], [80.0, 2.5]),
            line_pl("edge_s", PolylineSemantics::RoadEdge, [-20.0, -2.5], [80.0, -2.5]),
        ],
        conflict_id: "a1".into(),
    }
}

fn crossing(rng: &mut ChaCha8Rng, outcome: Outcome) -> TemplateScene {
    let v_e = rng.gen_range(4.0..6.0);
    let v_a = rng.gen_range(4.0..6.0);
    let v_b = rng.gen_range(3.0..5.0);
    // both reach the conflict point (origin) around t = 2.9 s if unperturbed
    let t_conflict = 2.9;

    let ego = Script {
        id: "ego".into(),
        path: PathGeom::Line {
            origin: [0.0, 0.0],
            angle: 0.0,
        },
        s0: -v_e * t_conflict,
        v0: v_e,
        accel: match outcome {
            // conflict agent yields; ego keeps speed
            Outcome::Yield => vec![],
            // agent goes first; ego brakes, then resumes once the agent clears
            Outcome::Pass => vec![(1.0, -3.0), (1.0 + v_e / 3.0, 0.0), (3.4, 2.0)],
        },
    };
    let agent = Script {
        id: "a1".into(),
        path: PathGeom::Line {
            origin: [0.0, 0.0],
            angle: std::f64::consts::FRAC_PI_2,
        },
        s0: -v_a * t_conflict,
        v0: v_a,
        accel: match outcome {
            Outcome::Yield => vec![(1.0, -3.0), (1.0 + v_a / 3.0, 0.0), (3.7, 2.0)],
            Outcome::Pass => vec![],
        },
    };
    // westbound traffic on the far side of the ego road, outside its edges
    let background = Script {
        id: "b1".into(),
        path: PathGeom::Line {
            origin: [30.0, 4.2],
            angle: std::f64::consts::PI,
        },
        s0: 0.0,
        v0: v_b,
        accel: vec![],
    };
    TemplateScene {
        scripts: vec![ego, agent, background],
        map: vec![
            line_pl("lane_ego", PolylineSemantics::LaneCenter, [-40.0, 0.0], [40.0, 0.0]),
            line_pl("lane_cross", PolylineSemantics::LaneCenter, [0.0, -40.0], [0.0, 40.0]),
            line_pl("edge_n", PolylineSemantics::RoadEdge, [-40.0, 2.6], [40.0, 2.6]),
            line_pl("edge_s", PolylineSemantics::RoadEdge, [-40.0, -2.6], [40.0, -2.6]),
        ],
        conflict_id: "a1".into(),
    }
}

fn merge(rng: &mut ChaCha8Rng, outcome: Outcome) -> TemplateScene {
    let v_e = rng.gen_range(6.0..8.0);
    let v_m = v_e * rng.gen_range(0.9..1.1);
    // merge point at x = 20 on the main lane; ego reaches it at t = 20 / v_e
    let t_ego_merge = 20.0 / v_e;
    let ramp_start = [-8.0, -6.0];
    let ramp = PathGeom::Polyline {
        pts: vec![ramp_start, [20.0, 0.0], [80.0, 0.0]],
    };
    let ramp_seg = ((20.0f64 - ramp_start[0]).powi(2) + 36.0).sqrt();

    // pass: agent hits the merge point ~2 s before the ego
    // yield: agent trails the ego and brakes on the ramp to drop further back
    let (s0_m, accel_m) = match outcome {
        Outcome::Pass => (ramp_seg - v_m * (t_ego_merge - 2.0), vec![]),
        Outcome::Yield => (
            ramp_seg - v_m * (t_ego_merge + 1.2),
            vec![(1.0, -2.5), (1.0 + v_m / 6.0, 0.0)],
        ),
    };
    let ego = Script {
        id: "ego".into(),
        path: PathGeom::Line {
            origin: [0.0, 0.0],
            angle: 0.0,
        },
        s0: 0.0,
        v0: v_e,
        accel: match outcome {
            // open a gap for the merging agent
            Outcome::Pass => vec![(1.2, -1.5), (2.2, 0.0)],
            Outcome::Yield => vec![],
        },
    };
    let agent = Script {
        id: "a1".into(),
        path: ramp,
        s0: s0_m,
        v0: v_m,
        accel: accel_m,
    };
    TemplateScene {
        scripts: vec![ego, agent],
        map: vec![
            line_pl("lane_main", PolylineSemantics::LaneCenter, [-20.0, 0.0], [80.0, 0.0]),
            MapPolyline {
                id: "lane_ramp".into(),
                semantics: PolylineSemantics::LaneCenter,
                points: vec![ramp_start, [20.0, 0.0]],
            },
            line_pl("edge_n", PolylineSemantics::RoadEdge, [-20.0, 2.5], [80.0, 2.5]),
            line_pl("edge_s", PolylineSemantics::RoadEdge, [-20.0, -2.5], [30.0, -2.5]),
        ],
        conflict_id: "a1".into(),
    }
}

fn unprotected_left(rng: &mut ChaCha8Rng, outcome: Outcome) -> TemplateScene {
    let v_e = rng.gen_range(4.0..5.5);
    let v_o = rng.gen_range(5.0..7.0);
    let radius = 6.0;
    // ego turn entry at (-3, 0); oncoming westbound on y = 3.5
    let turn_start = [-3.0, 0.0];
    // ego reaches the turn entry at t ~ 1.8 s when unperturbed
    let s0_e = -v_e * 1.8;
    // oncoming reaches x = 0 near the middle of the ego's turn
    let x0_o = v_o * 2.4;

    let ego = Script {
        id: "ego".into(),
        path: PathGeom::LeftTurn {
            turn_start,
            approach_angle: 0.0,
            radius,
        },
        s0: s0_e,
        v0: v_e,
        accel: match outcome {
            // oncoming yields; ego proceeds through the turn
            Outcome::Yield => vec![],
            // oncoming proceeds; ego stops short of the turn, then creeps
            Outcome::Pass => vec![(1.0, -3.0), (1.0 + v_e / 3.0, 0.0), (3.4, 1.5)],
        },
    };
    let oncoming = Script {
        id: "a1".into(),
        path: PathGeom::Line {
            origin: [0.0, 3.5],
            angle: std::f64::consts::PI,
        },
        s0: -x0_o,
        v0: v_o,
        accel: match outcome {
            Outcome::Yield => vec![(1.0, -3.0), (1.0 + v_o / 3.0, 0.0)],
            Outcome::Pass => vec![],
        },
    };
    TemplateScene {
        scripts: vec![ego, oncoming],
        map: vec![
            MapPolyline {
                id: "lane_turn".into(),
                semantics: PolylineSemantics::LaneCenter,
                points: vec![[-15.0, 0.0], [-3.0, 0.0], [1.24, 1.76], [3.0, 6.0], [3.0, 20.0]],
            },
            line_pl("lane_oncoming", PolylineSemantics::LaneCenter, [20.0, 3.5], [-20.0, 3.5]),
            line_pl("lane_north", PolylineSemantics::LaneCenter, [3.0, 0.0], [3.0, 25.0]),
        ],
        conflict_id: "a1".into(),
    }
}

// ---------------------------------------------------------------------------

/// Generate a deterministic synthetic scene with labeled futures.
pub fn synth_scene(config: &GenConfig, seed: u64) -> Result<SynthResult> {
    if !(config.sigma >= 0.0) {
        return Err(CogError::Invariant("noise level sigma must be >= 0".into()));
    }
    if config.t_h < 2 || config.t_f < 1 {
        return Err(CogError::Invariant("t_h >= 2 and t_f >= 1 required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcome = if rng.gen::<bool>() { Outcome::Yield } else { Outcome::Pass };
    let tpl = match config.template {
        Template::StraightFollow => straight_follow(&mut rng, outcome),
        Template::UnprotectedLeft => unprotected_left(&mut rng, outcome),
        Template::Merge => merge(&mut rng, outcome),
        Template::Crossing => crossing(&mut rng, outcome),
    };

    let n_total = config.t_h + config.t_f;
    let mut agents = Vec::new();
    let mut futures = Vec::new();
    for script in &tpl.scripts {
        let samples = script.sample(n_total, config.dt);
        let mut states = Vec::with_capacity(config.t_h);
        for (i, (pos, heading, speed)) in samples.iter().take(config.t_h).enumerate() {
            let (nx, ny) = if config.sigma > 0.0 {
                (
                    gaussian(&mut rng) * config.sigma,
                    gaussian(&mut rng) * config.sigma,
                )
            } else {
                (0.0, 0.0)
            };
            states.push(AgentState {
                t: i as f64 * config.dt,
                pose: Pose2::new(pos[0] + nx, pos[1] + ny, *heading),
                speed: *speed,
            });
        }
        agents.push(AgentHistory {
            id: script.id.clone(),
            kind: AgentKind::Vehicle,
            states,
        });
        futures.push(AgentFuture {
            id: script.id.clone(),
            states: samples
                .iter()
                .enumerate()
                .skip(config.t_h)
                .map(|(i, (pos, heading, _))| FutureState {
                    t: i as f64 * config.dt,
                    x: pos[0],
                    y: pos[1],
                    heading: *heading,
                })
                .collect(),
        });
    }

    let scene = Scene {
        agents,
        map: tpl.map,
        ego_id: "ego".into(),
        dt: config.dt,
    };
    scene.validate()?;
    let futures = GroundTruthFutures { futures };
    futures.validate(&scene)?;
    Ok(SynthResult {
        scene,
        futures,
        outcome,
        conflict_id: tpl.conflict_id,
    })
}

/// Box-Muller; two uniform draws per call keeps the draw count deterministic.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
