//! Safety-aware trajectory planning on top of multimodal predictions.
//!
//! The planner tracks a probability-weighted nominal trajectory with a
//! kinematic-bicycle ego model, separates the ego from predicted neighbor
//! occupancies with per-step hyperplanes, bounds it inside an
//! uncertainty-inflated drivable corridor, and refines controls with
//! sequential linearize-and-solve QP iterations. The output is a trajectory
//! tree: a shared root over `[0, T_b]` that is feasible against every
//! predicted mode at once, plus one branch per mode over `(T_b, T]`.

mod qp;
#[cfg(test)]
mod tests;
mod tree;

pub use tree::{
    load_plan, plan_tree, replan_step, save_plan, solve_qp, Branch, Obstacle, PlanReport,
    PlanResult, PlanStatus, SolveStatus, TrajectoryTree, PLAN_FORMAT,
};

use crate::error::{CogError, Result};
use crate::scene::{MapPolyline, PolylineSemantics};
use crate::util::wrap_angle;
use serde::{Deserialize, Serialize};

/// Ego vehicle state `[x, y, v, psi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    /// Speed in m/s, never negative.
    pub v: f64,
    /// Heading in radians, normalized to `(-pi, pi]`.
    pub psi: f64,
}

impl EgoState {
    pub fn new(x: f64, y: f64, v: f64, psi: f64) -> Self {
        EgoState {
            x,
            y,
            v: v.max(0.0),
            psi: wrap_angle(psi),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn as_vec4(&self) -> [f64; 4] {
        [self.x, self.y, self.v, self.psi]
    }
}

/// Control input `[a, delta]` (longitudinal acceleration, front steer angle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub a: f64,
    pub delta: f64,
}

/// Actuation bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub a_min: f64,
    pub a_max: f64,
    pub delta_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            a_min: -4.0,
            a_max: 2.5,
            delta_max: 0.6,
        }
    }
}

impl Limits {
    pub fn clamp(&self, u: Control) -> Control {
        Control {
            a: u.a.clamp(self.a_min, self.a_max),
            delta: u.delta.clamp(-self.delta_max, self.delta_max),
        }
    }
}

/// Two-disc collision envelope of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleGeometry {
    pub wheelbase: f64,
    /// Front / rear disc radii.
    pub r_f: f64,
    pub r_r: f64,
    /// Disc centers sit at `+-disc_offset_frac * wheelbase` along the body axis.
    pub disc_offset_frac: f64,
}

impl Default for VehicleGeometry {
    fn default() -> Self {
        VehicleGeometry {
            wheelbase: 2.8,
            r_f: 1.2,
            r_r: 1.2,
            disc_offset_frac: 0.35,
        }
    }
}

impl VehicleGeometry {
    /// Signed offsets of the two disc centers along the body axis.
    pub fn disc_offsets(&self) -> [f64; 2] {
        let o = self.disc_offset_frac * self.wheelbase;
        [o, -o]
    }

    pub fn max_radius(&self) -> f64 {
        self.r_f.max(self.r_r)
    }

    /// World positions of the two disc centers for a body pose.
    pub fn disc_centers(&self, pos: [f64; 2], heading: f64) -> [[f64; 2]; 2] {
        let (s, c) = heading.sin_cos();
        self.disc_offsets()
            .map(|o| [pos[0] + o * c, pos[1] + o * s])
    }
}

/// Planner configuration. Defaults cover the bundled desk-scale scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub geom: VehicleGeometry,
    pub limits: Limits,
    pub dt: f64,
    /// Shared-root (branching) horizon in steps.
    pub t_b: usize,
    /// Total planning horizon in steps (clipped to the prediction horizon).
    pub horizon: usize,
    /// Steps executed between replans; must be `< t_b`.
    pub replan_period: usize,
    /// State tracking weights `diag(q)` on `[x, y, v, psi]`.
    pub q: [f64; 4],
    /// Control tracking weights `diag(r)` on `[a, delta]`.
    pub r: [f64; 2],
    /// Corridor inflation gain on predicted positional uncertainty.
    pub kappa: f64,
    /// Base corridor half-extent, longitudinal / lateral.
    pub half_lon: f64,
    pub half_lat: f64,
    /// Extra clearance added to hyperplane offsets to absorb linearization error.
    pub safety_margin: f64,
    /// Sequential linearization cap and per-QP active-set cap.
    pub max_outer: usize,
    pub max_inner: usize,
    /// Outer-loop convergence threshold on reference change, meters.
    pub ref_tol: f64,
    /// Tolerance for the exact-rollout dynamic-feasibility check, m/step.
    pub rollout_tol: f64,
    /// Weight branch costs by mode probability instead of uniformly.
    pub weight_branches: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            geom: VehicleGeometry::default(),
            limits: Limits::default(),
            dt: 0.1,
            t_b: 10,
            horizon: 30,
            replan_period: 5,
            q: [1.0, 1.0, 0.1, 0.1],
            r: [0.5, 2.0],
            kappa: 2.0,
            half_lon: 15.0,
            half_lat: 4.0,
            safety_margin: 0.05,
            max_outer: 20,
            max_inner: 200,
            ref_tol: 1e-3,
            rollout_tol: 0.05,
            weight_branches: false,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dt <= 0.0 {
            return Err(CogError::Invariant("dt must be positive".into()));
        }
        if self.replan_period >= self.t_b {
            return Err(CogError::Invariant(format!(
                "branching horizon t_b = {} must exceed the replan period {}",
                self.t_b, self.replan_period
            )));
        }
        if self.horizon <= self.t_b {
            return Err(CogError::Invariant(format!(
                "horizon {} must exceed t_b = {}",
                self.horizon, self.t_b
            )));
        }
        if self.q.iter().any(|&w| w <= 0.0) || self.r.iter().any(|&w| w <= 0.0) {
            return Err(CogError::Invariant(
                "tracking weights must be positive definite".into(),
            ));
        }
        Ok(())
    }

    /// Minimum admissible center-to-center distance between an ego disc and a
    /// neighbor disc.
    pub fn clearance(&self) -> f64 {
        self.geom.r_f + self.geom.r_r
    }
}

/// One step of the discrete kinematic bicycle model.
pub fn dynamics_step(x: &EgoState, u: &Control, geom: &VehicleGeometry, dt: f64) -> EgoState {
    let (s, c) = x.psi.sin_cos();
    EgoState {
        x: x.x + x.v * c * dt,
        y: x.y + x.v * s * dt,
        v: (x.v + u.a * dt).max(0.0),
        psi: wrap_angle(x.psi + x.v / geom.wheelbase * u.delta.tan() * dt),
    }
}

/// Roll a control sequence through the exact dynamics; returns `controls.len() + 1`
/// states including the initial one.
pub fn rollout(x0: &EgoState, controls: &[Control], geom: &VehicleGeometry, dt: f64) -> Vec<EgoState> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x0);
    for u in controls {
        let next = dynamics_step(states.last().unwrap(), u, geom, dt);
        states.push(next);
    }
    states
}

/// Separating half-space `normal . (y - anchor) <= offset` keeping an ego disc
/// center `y` clear of one neighbor disc at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperplaneConstraint {
    /// Unit vector from ego toward the neighbor.
    pub normal: [f64; 2],
    /// Admissible advance toward the neighbor: `||d|| - (r_F + r_R)`.
    pub offset: f64,
    /// Ego reference position the plane was constructed from.
    pub anchor: [f64; 2],
    pub timestep: usize,
    pub neighbor_id: String,
}

impl HyperplaneConstraint {
    /// Signed violation at a point (positive = violated).
    pub fn violation(&self, y: [f64; 2]) -> f64 {
        self.normal[0] * (y[0] - self.anchor[0]) + self.normal[1] * (y[1] - self.anchor[1])
            - self.offset
    }
}

/// Build the separating hyperplane between an ego disc center and a neighbor
/// disc center at timestep `t`.
pub fn hyperplane(
    ego_pos: [f64; 2],
    neighbor_pos: [f64; 2],
    geom_i: &VehicleGeometry,
    geom_j: &VehicleGeometry,
    t: usize,
    neighbor_id: &str,
) -> Result<HyperplaneConstraint> {
    let d = [neighbor_pos[0] - ego_pos[0], neighbor_pos[1] - ego_pos[1]];
    let nd = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if nd <= 1e-6 {
        return Err(CogError::DegenerateGeometry(format!(
            "ego and neighbor '{neighbor_id}' nearly coincident at step {t} (distance {nd:.2e})"
        )));
    }
    Ok(HyperplaneConstraint {
        normal: [d[0] / nd, d[1] / nd],
        offset: nd - (geom_i.max_radius() + geom_j.max_radius()),
        anchor: ego_pos,
        timestep: t,
        neighbor_id: neighbor_id.to_string(),
    })
}

/// Per-step axis-aligned bounds on ego disc-center coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorridorStep {
    pub min: [f64; 2],
    pub max: [f64; 2],
    /// The `kappa * sigma` term that widened this step.
    pub inflation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub steps: Vec<CorridorStep>,
}

impl Corridor {
    pub fn contains(&self, step: usize, y: [f64; 2], tol: f64) -> bool {
        let b = &self.steps[step];
        (0..2).all(|a| y[a] >= b.min[a] - tol && y[a] <= b.max[a] + tol)
    }
}

/// Build a drivable corridor around a reference position sequence: a base box
/// widened by `kappa * sigma` per step, then clipped so no disc can cross a
/// road-edge polyline.
pub fn build_corridor(
    reference: &[[f64; 2]],
    map: &[MapPolyline],
    sigma: &[f64],
    cfg: &PlannerConfig,
) -> Result<Corridor> {
    if sigma.len() != reference.len() {
        return Err(CogError::ShapeMismatch {
            op: "build_corridor",
            lhs: vec![reference.len()],
            rhs: vec![sigma.len()],
        });
    }
    let margin = cfg.geom.max_radius();
    // the drivable side of each edge is taken as the side facing the overall
    // road interior, approximated by the centroid of all road-edge points
    let edge_points: Vec<[f64; 2]> = map
        .iter()
        .filter(|m| m.semantics == PolylineSemantics::RoadEdge)
        .flat_map(|m| m.points.iter().copied())
        .collect();
    let centroid = if edge_points.is_empty() {
        [0.0, 0.0]
    } else {
        let n = edge_points.len() as f64;
        [
            edge_points.iter().map(|p| p[0]).sum::<f64>() / n,
            edge_points.iter().map(|p| p[1]).sum::<f64>() / n,
        ]
    };
    let mut steps = Vec::with_capacity(reference.len());
    for (i, (&p, &s)) in reference.iter().zip(sigma).enumerate() {
        let inflation = cfg.kappa * s;
        let mut min = [p[0] - (cfg.half_lon + inflation), p[1] - (cfg.half_lat + inflation)];
        let mut max = [p[0] + (cfg.half_lon + inflation), p[1] + (cfg.half_lat + inflation)];
        for poly in map.iter().filter(|m| m.semantics == PolylineSemantics::RoadEdge) {
            let Some((q, along_x)) = nearest_on_polyline(&poly.points, p) else {
                continue;
            };
            // a segment running along one axis bounds the other coordinate
            let axis = if along_x { 1 } else { 0 };
            let interior_below = if (centroid[axis] - q[axis]).abs() > 1e-9 {
                centroid[axis] < q[axis]
            } else {
                p[axis] < q[axis]
            };
            if interior_below {
                max[axis] = max[axis].min(q[axis] - margin);
            } else {
                min[axis] = min[axis].max(q[axis] + margin);
            }
        }
        for a in 0..2 {
            if min[a] > max[a] {
                return Err(CogError::InfeasibleCorridor(format!(
                    "reference step {i} at ({:.2}, {:.2}) leaves no drivable width on axis {a}",
                    p[0], p[1]
                )));
            }
        }
        steps.push(CorridorStep { min, max, inflation });
    }
    Ok(Corridor { steps })
}

/// Closest point on a polyline to `p`, plus whether the closest segment runs
/// predominantly along the x axis. Returns `None` for polylines with fewer
/// than two points.
fn nearest_on_polyline(points: &[[f64; 2]], p: [f64; 2]) -> Option<([f64; 2], bool)> {
    let mut best: Option<(f64, [f64; 2], bool)> = None;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = if len2 > 0.0 {
            (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
        let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        let along_x = ab[0].abs() >= ab[1].abs();
        if best.map_or(true, |(bd, _, _)| d2 < bd) {
            best = Some((d2, q, along_x));
        }
    }
    best.map(|(_, q, ax)| (q, ax))
}

/// A tracking reference: target states and controls per step
/// (`states[t]` is the target after applying `controls[t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub states: Vec<[f64; 4]>,
    pub controls: Vec<[f64; 2]>,
}

impl Reference {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.states.iter().map(|s| [s[0], s[1]]).collect()
    }
}

/// Derive a full state/control reference from a position sequence: headings
/// and speeds from finite differences, controls inverted from the bicycle
/// model and clamped to the limits.
pub fn reference_from_positions(
    x0: &EgoState,
    positions: &[[f64; 2]],
    cfg: &PlannerConfig,
) -> Reference {
    let n = positions.len();
    let dt = cfg.dt;
    let mut states = Vec::with_capacity(n);
    let mut controls = Vec::with_capacity(n);
    let mut prev_pos = x0.position();
    let mut prev_psi = x0.psi;
    let mut prev_v = x0.v;
    for &p in positions {
        let dx = [p[0] - prev_pos[0], p[1] - prev_pos[1]];
        let dist = (dx[0] * dx[0] + dx[1] * dx[1]).sqrt();
        let psi = if dist > 1e-9 {
            dx[1].atan2(dx[0])
        } else {
            prev_psi
        };
        let v = dist / dt;
        let a = ((v - prev_v) / dt).clamp(cfg.limits.a_min, cfg.limits.a_max);
        let dpsi = wrap_angle(psi - prev_psi);
        let delta = if prev_v > 0.1 {
            (cfg.geom.wheelbase * dpsi / (prev_v * dt))
                .atan()
                .clamp(-cfg.limits.delta_max, cfg.limits.delta_max)
        } else {
            0.0
        };
        states.push([p[0], p[1], v, psi]);
        controls.push([a, delta]);
        prev_pos = p;
        prev_psi = psi;
        prev_v = v;
    }
    Reference { states, controls }
}

/// Nominal initialization: the probability-weighted mean of the per-mode ego
/// trajectories, plus deterministically perturbed candidates.
#[derive(Debug, Clone)]
pub struct NominalInit {
    pub nominal: Reference,
    /// Candidates (nominal first, then lateral/longitudinal perturbations).
    pub candidates: Vec<Reference>,
}

/// Lateral offsets (meters) and longitudinal scale factors used to generate
/// perturbed initialization candidates.
const LAT_OFFSETS: [f64; 3] = [0.0, 0.75, -0.75];
const LON_SCALES: [f64; 2] = [1.0, 0.8];

/// Walk the polyline `path` at the arc-length schedule of a braking speed
/// profile starting from the ego's current speed.
fn braking_positions(ego: &EgoState, path: &[[f64; 2]], cfg: &PlannerConfig) -> Vec<[f64; 2]> {
    // cumulative arc length of the path, measured from the ego position
    let mut cum = Vec::with_capacity(path.len() + 1);
    let mut total = 0.0;
    cum.push(0.0);
    let mut prev = ego.position();
    for p in path {
        total += ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
        cum.push(total);
        prev = *p;
    }
    let point_at = |s: f64| -> [f64; 2] {
        let s = s.min(total);
        let mut i = 1;
        while i < cum.len() - 1 && cum[i] < s {
            i += 1;
        }
        let (a, b) = (
            if i == 1 { ego.position() } else { path[i - 2] },
            path[i - 1],
        );
        let seg = cum[i] - cum[i - 1];
        let t = if seg > 1e-12 { (s - cum[i - 1]) / seg } else { 0.0 };
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    };
    let mut v = ego.v;
    let mut s = 0.0;
    path.iter()
        .map(|_| {
            v = (v + cfg.limits.a_min * cfg.dt).max(0.0);
            s += v * cfg.dt;
            point_at(s)
        })
        .collect()
}

pub fn nominal_init(
    pred: &crate::prednet::PredictionSet,
    ego: &EgoState,
    cfg: &PlannerConfig,
) -> Result<NominalInit> {
    let ego_id = pred
        .joint_ids
        .first()
        .ok_or_else(|| CogError::Invariant("prediction has no joint agents".into()))?;
    if pred.modes.is_empty() {
        return Err(CogError::Invariant("prediction has no modes".into()));
    }
    let mut per_mode: Vec<&Vec<[f64; 2]>> = Vec::with_capacity(pred.modes.len());
    for m in &pred.modes {
        let traj = m.trajs.get(ego_id).ok_or_else(|| {
            CogError::Invariant(format!("mode missing ego trajectory '{ego_id}'"))
        })?;
        per_mode.push(&traj.mu);
    }
    let t_total = cfg.horizon.min(per_mode.iter().map(|m| m.len()).min().unwrap());
    if t_total == 0 {
        return Err(CogError::Invariant("empty prediction horizon".into()));
    }
    let mut weighted = vec![[0.0; 2]; t_total];
    for (m, mu) in pred.modes.iter().zip(&per_mode) {
        for (t, w) in weighted.iter_mut().enumerate() {
            w[0] += m.prob * mu[t][0];
            w[1] += m.prob * mu[t][1];
        }
    }
    let nominal = reference_from_positions(ego, &weighted, cfg);

    let mut candidates = Vec::new();
    for &scale in &LON_SCALES {
        for &lat in &LAT_OFFSETS {
            let pos: Vec<[f64; 2]> = weighted
                .iter()
                .zip(&nominal.states)
                .map(|(p, s)| {
                    let (sn, cs) = s[3].sin_cos();
                    let q = [
                        ego.x + scale * (p[0] - ego.x),
                        ego.y + scale * (p[1] - ego.y),
                    ];
                    [q[0] - lat * sn, q[1] + lat * cs]
                })
                .collect();
            candidates.push(reference_from_positions(ego, &pos, cfg));
        }
    }
    // maximal-braking candidate: the nominal path reparameterized by the
    // arc length a braking speed profile covers; gives the optimizer a
    // yielding initialization to score against the obstacle set
    candidates.push(reference_from_positions(
        ego,
        &braking_positions(ego, &weighted, cfg),
        cfg,
    ));
    Ok(NominalInit { nominal, candidates })
}
