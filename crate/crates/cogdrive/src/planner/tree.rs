//! Sequential-QP refinement and the preparedness trajectory tree.
//!
//! One joint QP couples the shared root with all branches: the decision
//! vector stacks root controls and per-branch controls, branch states chain
//! off the root terminal state, so branch-root continuity holds by
//! construction and the root feels every branch's tracking cost.

use super::qp::{self, QpStatus};
use super::{
    build_corridor, nominal_init, reference_from_positions, rollout, Control, Corridor,
    CorridorStep, EgoState, PlannerConfig, Reference,
};
use crate::error::{CogError, Result};
use crate::prednet::PredictionSet;
use crate::util::{atomic_write, wrap_angle};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const PLAN_FORMAT: &str = "cogdrive-plan/1";

/// One neighbor disc center at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub pos: [f64; 2],
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Ok,
    /// Emergency maximal-braking plan; the optimizer could not produce a
    /// feasible tree.
    Fallback,
}

/// Diagnostics attached to every plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    /// Smallest ego-disc-to-neighbor-disc distance over the whole tree,
    /// checked by direct geometry against every applicable mode.
    pub min_separation: f64,
    /// Largest complementary-slackness residual of the final QP.
    pub slackness: f64,
    /// Merit value (exact tracking cost plus violation penalty) after each
    /// accepted outer iteration; nonincreasing by construction.
    pub costs: Vec<f64>,
    /// First violated constraint when the QP was infeasible.
    pub infeasible_detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub mode: usize,
    pub prob: f64,
    /// `states[0]` equals the root terminal state exactly.
    pub states: Vec<EgoState>,
    pub controls: Vec<Control>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTree {
    pub dt: f64,
    pub t_b: usize,
    /// `t_b + 1` states including the initial one.
    pub root_states: Vec<EgoState>,
    pub root_controls: Vec<Control>,
    pub branches: Vec<Branch>,
    pub status: PlanStatus,
    pub solver: SolveStatus,
    pub report: PlanReport,
}

impl TrajectoryTree {
    pub fn root_terminal(&self) -> &EgoState {
        self.root_states.last().unwrap()
    }
}

/// Result of a single-trajectory QP refinement.
#[derive(Debug, Clone)]
pub struct PlanResult {
    /// `controls.len() + 1` states including the initial one.
    pub states: Vec<EgoState>,
    pub controls: Vec<Control>,
    pub status: SolveStatus,
    pub costs: Vec<f64>,
    pub slackness: f64,
    pub infeasible_detail: Option<String>,
}

// ---------------------------------------------------------------------------
// internal problem description
// ---------------------------------------------------------------------------

struct Phase {
    xref: Vec<[f64; 4]>,
    uref: Vec<[f64; 2]>,
    corridor: Option<Corridor>,
    /// Obstacles per step (aligned with `xref`).
    obstacles: Vec<Vec<Obstacle>>,
    weight: f64,
}

impl Phase {
    fn steps(&self) -> usize {
        self.xref.len()
    }
}

struct SqpOutcome {
    root_states: Vec<EgoState>,
    root_controls: Vec<Control>,
    branch_states: Vec<Vec<EgoState>>,
    branch_controls: Vec<Vec<Control>>,
    status: SolveStatus,
    costs: Vec<f64>,
    slackness: f64,
    infeasible_detail: Option<String>,
}

/// Hyperplanes further than this from activity are not added to the QP.
const ACTIVATION_MARGIN: f64 = 3.0;
const COST_ACCEPT_TOL: f64 = 1e-12;
/// Quadratic penalty on hyperplane slack variables. Stiff enough that the
/// residual softness stays far below the configured safety margin.
const SLACK_QUAD: f64 = 1e4;

fn lin_dynamics(
    x: &EgoState,
    u: &Control,
    geom: &super::VehicleGeometry,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (s, c) = x.psi.sin_cos();
    let l = geom.wheelbase;
    let sv = if x.v + u.a * dt > 0.0 { 1.0 } else { 0.0 };
    let td = u.delta.tan();
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, c * dt, -x.v * s * dt, //
            0.0, 1.0, s * dt, x.v * c * dt, //
            0.0, 0.0, sv, 0.0, //
            0.0, 0.0, td * dt / l, 1.0,
        ],
    );
    let cd = u.delta.cos();
    let b = DMatrix::from_row_slice(
        4,
        2,
        &[
            0.0, 0.0, //
            0.0, 0.0, //
            dt * sv, 0.0, //
            0.0, x.v * dt / (l * cd * cd),
        ],
    );
    (a, b)
}

/// Jacobian of a disc center w.r.t. the state `[x, y, v, psi]`.
fn disc_jacobian(psi: f64, offset: f64) -> DMatrix<f64> {
    let (s, c) = psi.sin_cos();
    DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, -offset * s, 0.0, 1.0, 0.0, offset * c])
}

fn state_error(x: &EgoState, xref: &[f64; 4]) -> [f64; 4] {
    [
        x.x - xref[0],
        x.y - xref[1],
        x.v - xref[2],
        wrap_angle(x.psi - xref[3]),
    ]
}

/// Penalty weight turning constraint violation into the SQP merit function.
const MERIT_MU: f64 = 1e3;

/// Exact-rollout merit: tracking cost plus a penalty on nonlinear constraint
/// violation (disc separation deficits and corridor exits). Pure tracking
/// cost alone would reject every step that trades tracking error for safety.
fn merit(
    x0: &EgoState,
    cfg: &PlannerConfig,
    root: &Phase,
    branches: &[Phase],
    root_u: &[Control],
    branch_u: &[Vec<Control>],
) -> f64 {
    let mut cost = 0.0;
    let mut viol = 0.0;
    let root_states = rollout(x0, root_u, &cfg.geom, cfg.dt);
    cost += phase_cost(cfg, root, &root_states[1..], root_u);
    viol += phase_violation(cfg, root, &root_states);
    let terminal = *root_states.last().unwrap();
    for (ph, u) in branches.iter().zip(branch_u) {
        let states = rollout(&terminal, u, &cfg.geom, cfg.dt);
        cost += phase_cost(cfg, ph, &states[1..], u);
        viol += phase_violation(cfg, ph, &states);
    }
    cost + MERIT_MU * viol
}

/// Summed nonlinear constraint violation of a rolled-out phase.
fn phase_violation(cfg: &PlannerConfig, ph: &Phase, states: &[EgoState]) -> f64 {
    let clearance = cfg.clearance() + cfg.safety_margin;
    let mut v = 0.0;
    for i in 0..ph.steps() {
        let x = &states[i + 1];
        for y in cfg.geom.disc_centers(x.position(), x.psi) {
            if let Some(cor) = &ph.corridor {
                let CorridorStep { min, max, .. } = cor.steps[i];
                for a in 0..2 {
                    v += (min[a] - y[a]).max(0.0) + (y[a] - max[a]).max(0.0);
                }
            }
            for ob in &ph.obstacles[i] {
                let nd = ((ob.pos[0] - y[0]).powi(2) + (ob.pos[1] - y[1]).powi(2)).sqrt();
                v += (clearance - nd).max(0.0);
            }
        }
    }
    v
}

fn phase_cost(cfg: &PlannerConfig, ph: &Phase, states: &[EgoState], u: &[Control]) -> f64 {
    let mut c = 0.0;
    for (i, x) in states.iter().enumerate() {
        let e = state_error(x, &ph.xref[i]);
        c += (0..4).map(|j| cfg.q[j] * e[j] * e[j]).sum::<f64>();
        let du = [u[i].a - ph.uref[i][0], u[i].delta - ph.uref[i][1]];
        c += cfg.r[0] * du[0] * du[0] + cfg.r[1] * du[1] * du[1];
    }
    ph.weight * c
}

#[allow(clippy::too_many_arguments)]
fn sqp_solve(
    x0: &EgoState,
    cfg: &PlannerConfig,
    root: &Phase,
    branches: &[Phase],
    root_init: Vec<Control>,
    branch_init: Vec<Vec<Control>>,
) -> SqpOutcome {
    let t_b = root.steps();
    let bl = branches.first().map_or(0, |b| b.steps());
    let n_modes = branches.len();
    let n = 2 * t_b + 2 * n_modes * bl;

    let clamp_all = |r: &mut Vec<Control>, b: &mut Vec<Vec<Control>>| {
        for u in r.iter_mut() {
            *u = cfg.limits.clamp(*u);
        }
        for bu in b.iter_mut() {
            for u in bu.iter_mut() {
                *u = cfg.limits.clamp(*u);
            }
        }
    };
    let mut root_u = root_init;
    let mut branch_u = branch_init;
    clamp_all(&mut root_u, &mut branch_u);

    let mut costs = vec![merit(x0, cfg, root, branches, &root_u, &branch_u)];
    let mut status = SolveStatus::MaxIter;
    let mut slackness = 0.0;
    let mut infeasible_detail = None;
    let mut prev_positions: Option<Vec<[f64; 2]>> = None;
    // warm-start guess for the QP active set, carried across SQP iterations
    // together with the row count it was computed for
    let mut prev_active: Option<(usize, Vec<usize>)> = None;

    let clearance = cfg.clearance() + cfg.safety_margin;

    for _outer in 0..cfg.max_outer {
        // exact rollout about the current iterate
        let root_states = rollout(x0, &root_u, &cfg.geom, cfg.dt);
        let terminal = *root_states.last().unwrap();
        let branch_states: Vec<Vec<EgoState>> = branch_u
            .iter()
            .map(|u| rollout(&terminal, u, &cfg.geom, cfg.dt))
            .collect();

        // convergence: reference change below threshold
        let positions: Vec<[f64; 2]> = root_states[1..]
            .iter()
            .chain(branch_states.iter().flat_map(|s| s[1..].iter()))
            .map(|x| x.position())
            .collect();
        if let Some(prev) = &prev_positions {
            let delta = positions
                .iter()
                .zip(prev)
                .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                .fold(0.0, f64::max);
            if delta < cfg.ref_tol {
                status = SolveStatus::Optimal;
                break;
            }
        }
        prev_positions = Some(positions);

        // sensitivities of every state w.r.t. the stacked control deviations
        let mut root_s: Vec<DMatrix<f64>> = Vec::with_capacity(t_b + 1);
        root_s.push(DMatrix::zeros(4, n));
        for t in 0..t_b {
            let (a, b) = lin_dynamics(&root_states[t], &root_u[t], &cfg.geom, cfg.dt);
            let mut s_next = &a * &root_s[t];
            s_next.view_mut((0, 2 * t), (4, 2)).copy_from(&b);
            root_s.push(s_next);
        }
        let mut branch_s: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n_modes);
        for (k, states) in branch_states.iter().enumerate() {
            let base = 2 * t_b + 2 * k * bl;
            let mut ss = Vec::with_capacity(bl + 1);
            ss.push(root_s[t_b].clone());
            for t in 0..bl {
                let (a, b) = lin_dynamics(&states[t], &branch_u[k][t], &cfg.geom, cfg.dt);
                let mut s_next = &a * &ss[t];
                s_next.view_mut((0, base + 2 * t), (4, 2)).copy_from(&b);
                ss.push(s_next);
            }
            branch_s.push(ss);
        }

        // quadratic model: H du + g from tracking costs
        let mut h_mat = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for i in 0..n {
            h_mat[(i, i)] = 1e-9;
        }
        let add_phase = |ph: &Phase,
                             states: &[EgoState],
                             u: &[Control],
                             s_mats: &[DMatrix<f64>],
                             base: usize,
                             h_mat: &mut DMatrix<f64>,
                             g: &mut DVector<f64>| {
            let w = ph.weight;
            for i in 0..ph.steps() {
                let s = &s_mats[i + 1];
                let mut qs = s.clone();
                for row in 0..4 {
                    let scale = cfg.q[row];
                    qs.row_mut(row).scale_mut(scale);
                }
                *h_mat += 2.0 * w * s.transpose() * &qs;
                let e = state_error(&states[i + 1], &ph.xref[i]);
                let ev = DVector::from_row_slice(&e);
                *g += 2.0 * w * qs.transpose() * ev;
                let vb = base + 2 * i;
                h_mat[(vb, vb)] += 2.0 * w * cfg.r[0];
                h_mat[(vb + 1, vb + 1)] += 2.0 * w * cfg.r[1];
                g[vb] += 2.0 * w * cfg.r[0] * (u[i].a - ph.uref[i][0]);
                g[vb + 1] += 2.0 * w * cfg.r[1] * (u[i].delta - ph.uref[i][1]);
            }
        };
        add_phase(root, &root_states, &root_u, &root_s, 0, &mut h_mat, &mut g);
        for k in 0..n_modes {
            add_phase(
                &branches[k],
                &branch_states[k],
                &branch_u[k],
                &branch_s[k],
                2 * t_b + 2 * k * bl,
                &mut h_mat,
                &mut g,
            );
        }

        // linear inequality rows: G du <= h. Bounds and corridor rows are
        // hard; hyperplane rows are softened with penalized slack variables,
        // because a reference that already crosses an obstacle can make the
        // hard-constrained linearization inconsistent even though the
        // nonlinear problem is solvable (by braking earlier).
        struct Row {
            coeffs: DVector<f64>,
            rhs: f64,
            label: String,
            soft: bool,
        }
        let mut rows: Vec<Row> = Vec::new();
        let bound_rows = |u: &[Control], base: usize, rows: &mut Vec<Row>| {
            for (i, c) in u.iter().enumerate() {
                let vb = base + 2 * i;
                let mut push = |col: usize, sign: f64, bound: f64, what: &str| {
                    let mut r = DVector::zeros(n);
                    r[col] = sign;
                    rows.push(Row {
                        coeffs: r,
                        rhs: bound,
                        label: format!("bound {what} step {i}"),
                        soft: false,
                    });
                };
                push(vb, 1.0, cfg.limits.a_max - c.a, "a_max");
                push(vb, -1.0, c.a - cfg.limits.a_min, "a_min");
                push(vb + 1, 1.0, cfg.limits.delta_max - c.delta, "delta_max");
                push(vb + 1, -1.0, c.delta + cfg.limits.delta_max, "delta_min");
            }
        };
        bound_rows(&root_u, 0, &mut rows);
        for k in 0..n_modes {
            bound_rows(&branch_u[k], 2 * t_b + 2 * k * bl, &mut rows);
        }

        let geo_rows = |ph: &Phase,
                        states: &[EgoState],
                        s_mats: &[DMatrix<f64>],
                        tag: &str,
                        rows: &mut Vec<Row>| {
            for i in 0..ph.steps() {
                let x = &states[i + 1];
                let s = &s_mats[i + 1];
                for off in cfg.geom.disc_offsets() {
                    let j = disc_jacobian(x.psi, off);
                    let js = &j * s; // 2 x n
                    let (sn, cs) = x.psi.sin_cos();
                    let y = [x.x + off * cs, x.y + off * sn];
                    if let Some(cor) = &ph.corridor {
                        let CorridorStep { min, max, .. } = cor.steps[i];
                        for axis in 0..2 {
                            rows.push(Row {
                                coeffs: js.row(axis).transpose(),
                                rhs: max[axis] - y[axis],
                                label: format!("{tag} corridor max axis {axis} step {i}"),
                                soft: false,
                            });
                            rows.push(Row {
                                coeffs: -js.row(axis).transpose(),
                                rhs: y[axis] - min[axis],
                                label: format!("{tag} corridor min axis {axis} step {i}"),
                                soft: false,
                            });
                        }
                    }
                    for ob in &ph.obstacles[i] {
                        let d = [ob.pos[0] - y[0], ob.pos[1] - y[1]];
                        let nd = (d[0] * d[0] + d[1] * d[1]).sqrt();
                        if nd <= 1e-6 || nd - clearance > ACTIVATION_MARGIN {
                            continue; // coincident (caught by the post-check) or far away
                        }
                        let nrm = [d[0] / nd, d[1] / nd];
                        let row = nrm[0] * js.row(0) + nrm[1] * js.row(1);
                        rows.push(Row {
                            coeffs: row.transpose(),
                            rhs: nd - clearance,
                            label: format!("{tag} hyperplane vs {} step {i}", ob.id),
                            soft: true,
                        });
                    }
                }
            }
        };
        geo_rows(root, &root_states, &root_s, "root", &mut rows);
        for k in 0..n_modes {
            geo_rows(
                &branches[k],
                &branch_states[k],
                &branch_s[k],
                &format!("branch {k}"),
                &mut rows,
            );
        }

        // extend the system with one slack variable per soft row
        let m = rows.len();
        let n_soft = rows.iter().filter(|r| r.soft).count();
        let nx = n + n_soft;
        let mut g_ineq = DMatrix::zeros(m + n_soft, nx);
        let mut h_ineq = DVector::zeros(m + n_soft);
        let mut slack_col = n;
        for (i, r) in rows.iter().enumerate() {
            g_ineq
                .view_mut((i, 0), (1, n))
                .copy_from(&r.coeffs.transpose());
            h_ineq[i] = r.rhs;
            if r.soft {
                g_ineq[(i, slack_col)] = -1.0;
                g_ineq[(m + slack_col - n, slack_col)] = -1.0; // s >= 0
                slack_col += 1;
            }
        }
        let mut h_ext = DMatrix::zeros(nx, nx);
        h_ext.view_mut((0, 0), (n, n)).copy_from(&h_mat);
        let mut g_ext = DVector::zeros(nx);
        g_ext.rows_mut(0, n).copy_from(&g);
        for j in n..nx {
            h_ext[(j, j)] = 2.0 * SLACK_QUAD;
        }

        // the warm guess is only index-valid while the row layout is stable
        let warm: &[usize] = match &prev_active {
            Some((rows, set)) if *rows == m + n_soft => set,
            _ => &[],
        };
        let sol = qp::solve_qp_warm(&h_ext, &g_ext, &g_ineq, &h_ineq, cfg.max_inner, warm);
        prev_active = Some((
            m + n_soft,
            (0..sol.lambda.len()).filter(|&i| sol.lambda[i] > 0.0).collect(),
        ));
        if sol.status == QpStatus::Infeasible {
            status = SolveStatus::Infeasible;
            // report the constraint most violated at the current reference
            let worst = (0..m).min_by(|&a, &b| rows[a].rhs.partial_cmp(&rows[b].rhs).unwrap());
            infeasible_detail = worst.map(|i| rows[i].label.clone());
            break;
        }
        let slack_vec = &g_ineq * &sol.x - &h_ineq;
        slackness = (0..m + n_soft)
            .map(|i| (sol.lambda[i] * slack_vec[i]).abs())
            .fold(0.0, f64::max);

        // line search on the exact nonlinear cost
        let apply = |step: f64| -> (Vec<Control>, Vec<Vec<Control>>) {
            let pick = |base: usize, i: usize, u: &Control| {
                cfg.limits.clamp(Control {
                    a: u.a + step * sol.x[base + 2 * i],
                    delta: u.delta + step * sol.x[base + 2 * i + 1],
                })
            };
            let r: Vec<Control> = root_u
                .iter()
                .enumerate()
                .map(|(i, u)| pick(0, i, u))
                .collect();
            let b: Vec<Vec<Control>> = branch_u
                .iter()
                .enumerate()
                .map(|(k, bu)| {
                    bu.iter()
                        .enumerate()
                        .map(|(i, u)| pick(2 * t_b + 2 * k * bl, i, u))
                        .collect()
                })
                .collect();
            (r, b)
        };
        let mut accepted = false;
        for &step in &[1.0, 0.5, 0.25, 0.125] {
            let (r, b) = apply(step);
            let c = merit(x0, cfg, root, branches, &r, &b);
            if c <= costs.last().unwrap() + COST_ACCEPT_TOL {
                root_u = r;
                branch_u = b;
                costs.push(c);
                accepted = true;
                break;
            }
        }
        if !accepted {
            // no descent step: the linearized model is stationary here
            status = SolveStatus::Optimal;
            break;
        }
    }

    let root_states = rollout(x0, &root_u, &cfg.geom, cfg.dt);
    let terminal = *root_states.last().unwrap();
    let branch_states: Vec<Vec<EgoState>> = branch_u
        .iter()
        .map(|u| rollout(&terminal, u, &cfg.geom, cfg.dt))
        .collect();
    SqpOutcome {
        root_states,
        root_controls: root_u,
        branch_states,
        branch_controls: branch_u,
        status,
        costs,
        slackness,
        infeasible_detail,
    }
}

// ---------------------------------------------------------------------------
// public single-trajectory refinement
// ---------------------------------------------------------------------------

/// Refine a single trajectory against a reference, corridor, and per-step
/// obstacles by sequential linearize-and-solve iterations.
pub fn solve_qp(
    x0: &EgoState,
    reference: &Reference,
    corridor: Option<&Corridor>,
    obstacles: &[Vec<Obstacle>],
    cfg: &PlannerConfig,
) -> Result<PlanResult> {
    let steps = reference.len();
    if steps == 0 {
        return Err(CogError::Invariant("empty planning reference".into()));
    }
    if !obstacles.is_empty() && obstacles.len() != steps {
        return Err(CogError::ShapeMismatch {
            op: "solve_qp",
            lhs: vec![steps],
            rhs: vec![obstacles.len()],
        });
    }
    if let Some(c) = corridor {
        if c.steps.len() != steps {
            return Err(CogError::ShapeMismatch {
                op: "solve_qp",
                lhs: vec![steps],
                rhs: vec![c.steps.len()],
            });
        }
    }
    let obs = if obstacles.is_empty() {
        vec![Vec::new(); steps]
    } else {
        obstacles.to_vec()
    };
    let root = Phase {
        xref: reference.states.clone(),
        uref: reference.controls.clone(),
        corridor: corridor.cloned(),
        obstacles: obs,
        weight: 1.0,
    };
    let init: Vec<Control> = reference
        .controls
        .iter()
        .map(|c| Control {
            a: c[0],
            delta: c[1],
        })
        .collect();
    let out = sqp_solve(x0, cfg, &root, &[], init, Vec::new());
    Ok(PlanResult {
        states: out.root_states,
        controls: out.root_controls,
        status: out.status,
        costs: out.costs,
        slackness: out.slackness,
        infeasible_detail: out.infeasible_detail,
    })
}

// ---------------------------------------------------------------------------
// obstacle gathering and tree planning
// ---------------------------------------------------------------------------

struct GatheredObstacles {
    /// Per root step: union over every mode (plus constant-velocity agents).
    root: Vec<Vec<Obstacle>>,
    /// Per branch and step past `t_b`: that mode only (plus CV agents).
    branch: Vec<Vec<Vec<Obstacle>>>,
}

fn gather_obstacles(pred: &PredictionSet, cfg: &PlannerConfig, t_total: usize) -> GatheredObstacles {
    let t_b = cfg.t_b;
    let ego_id = &pred.joint_ids[0];
    let k_modes = pred.modes.len();
    let mut root = vec![Vec::new(); t_b];
    let mut branch = vec![vec![Vec::new(); t_total - t_b]; k_modes];

    let push_discs = |bucket: &mut Vec<Obstacle>, id: &str, pos: [f64; 2], heading: f64| {
        for c in cfg.geom.disc_centers(pos, heading) {
            bucket.push(Obstacle {
                pos: c,
                id: id.to_string(),
            });
        }
    };

    for (k, mode) in pred.modes.iter().enumerate() {
        for (id, traj) in &mode.trajs {
            if id == ego_id {
                continue;
            }
            for t in 0..t_total.min(traj.mu.len()) {
                let (pos, yaw) = (traj.mu[t], traj.yaw[t]);
                if t < t_b {
                    push_discs(&mut root[t], id, pos, yaw);
                } else {
                    push_discs(&mut branch[k][t - t_b], id, pos, yaw);
                }
            }
        }
    }
    // constant-velocity agents are mode-independent: once in the root, and in
    // every branch
    for (id, states) in &pred.others {
        for t in 0..t_total.min(states.len()) {
            let pos = [states[t][0], states[t][1]];
            let yaw = states[t][2];
            if t < t_b {
                push_discs(&mut root[t], id, pos, yaw);
            } else {
                for b in branch.iter_mut() {
                    push_discs(&mut b[t - t_b], id, pos, yaw);
                }
            }
        }
    }
    GatheredObstacles { root, branch }
}

/// Smallest ego-disc-to-obstacle distance over a phase, by direct geometry.
fn min_separation_phase(
    states: &[EgoState],
    obstacles: &[Vec<Obstacle>],
    cfg: &PlannerConfig,
) -> f64 {
    let mut best = f64::INFINITY;
    for (i, obs) in obstacles.iter().enumerate() {
        let x = &states[i + 1];
        for c in cfg.geom.disc_centers(x.position(), x.psi) {
            for ob in obs {
                let d = ((c[0] - ob.pos[0]).powi(2) + (c[1] - ob.pos[1]).powi(2)).sqrt();
                best = best.min(d);
            }
        }
    }
    best
}

fn ego_sigma_scalar(traj: &crate::prednet::PredTraj, t: usize) -> f64 {
    traj.sigma[t][0].max(traj.sigma[t][1])
}

/// Emergency plan: maximal braking along the current heading.
fn fallback_tree(
    ego: &EgoState,
    pred: &PredictionSet,
    cfg: &PlannerConfig,
    t_total: usize,
    solver: SolveStatus,
    detail: Option<String>,
    obstacles: &GatheredObstacles,
) -> TrajectoryTree {
    let brake = Control {
        a: cfg.limits.a_min,
        delta: 0.0,
    };
    let root_controls = vec![brake; cfg.t_b];
    let root_states = rollout(ego, &root_controls, &cfg.geom, cfg.dt);
    let terminal = *root_states.last().unwrap();
    let bl = t_total - cfg.t_b;
    let mut min_sep = min_separation_phase(&root_states, &obstacles.root, cfg);
    let branches: Vec<Branch> = pred
        .modes
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let controls = vec![brake; bl];
            let states = rollout(&terminal, &controls, &cfg.geom, cfg.dt);
            min_sep = min_sep.min(min_separation_phase(&states, &obstacles.branch[k], cfg));
            Branch {
                mode: k,
                prob: m.prob,
                states,
                controls,
            }
        })
        .collect();
    TrajectoryTree {
        dt: cfg.dt,
        t_b: cfg.t_b,
        root_states,
        root_controls,
        branches,
        status: PlanStatus::Fallback,
        solver,
        report: PlanReport {
            min_separation: min_sep,
            slackness: 0.0,
            costs: Vec::new(),
            infeasible_detail: detail,
        },
    }
}

struct TreeInit {
    root: Vec<Control>,
    branches: Vec<Vec<Control>>,
}

/// Plan a preparedness trajectory tree from the current prediction.
pub fn plan_tree(
    pred: &PredictionSet,
    ego: &EgoState,
    scene_map: &[crate::scene::MapPolyline],
    cfg: &PlannerConfig,
) -> Result<TrajectoryTree> {
    plan_with_init(pred, ego, scene_map, cfg, None)
}

/// Replan warm-started from the previous tree shifted by the replan period.
pub fn replan_step(
    prev: &TrajectoryTree,
    pred: &PredictionSet,
    ego: &EgoState,
    scene_map: &[crate::scene::MapPolyline],
    cfg: &PlannerConfig,
) -> Result<TrajectoryTree> {
    let elapsed = cfg.replan_period;
    // best (highest-probability) previous branch continues the root
    let best = prev
        .branches
        .iter()
        .max_by(|a, b| a.prob.partial_cmp(&b.prob).unwrap());
    let mut root: Vec<Control> = prev
        .root_controls
        .iter()
        .skip(elapsed)
        .copied()
        .collect();
    if let Some(b) = best {
        root.extend(b.controls.iter().take(cfg.t_b.saturating_sub(root.len())));
    }
    let pad = *root.last().unwrap_or(&Control { a: 0.0, delta: 0.0 });
    while root.len() < cfg.t_b {
        root.push(pad);
    }
    let branches: Vec<Vec<Control>> = (0..pred.modes.len())
        .map(|k| {
            prev.branches
                .get(k)
                .map(|b| {
                    let mut u: Vec<Control> = b.controls.iter().skip(elapsed).copied().collect();
                    let pad = *u.last().unwrap_or(&pad);
                    // length fixed up inside plan_with_init
                    u.push(pad);
                    u
                })
                .unwrap_or_default()
        })
        .collect();
    plan_with_init(pred, ego, scene_map, cfg, Some(TreeInit { root, branches }))
}

fn plan_with_init(
    pred: &PredictionSet,
    ego: &EgoState,
    scene_map: &[crate::scene::MapPolyline],
    cfg: &PlannerConfig,
    warm: Option<TreeInit>,
) -> Result<TrajectoryTree> {
    cfg.validate()?;
    let init_all = nominal_init(pred, ego, cfg)?;
    let nominal = &init_all.nominal;
    let t_total = nominal.len();
    if t_total <= cfg.t_b {
        return Err(CogError::Invariant(format!(
            "prediction horizon {t_total} does not exceed t_b = {}",
            cfg.t_b
        )));
    }
    let bl = t_total - cfg.t_b;
    let ego_id = &pred.joint_ids[0];
    let k_modes = pred.modes.len();
    let obstacles = gather_obstacles(pred, cfg, t_total);

    // corridors: root around the nominal with probability-weighted sigma,
    // branches around each mode's own trajectory with that mode's sigma
    let root_positions: Vec<[f64; 2]> = nominal.positions()[..cfg.t_b].to_vec();
    let root_sigma: Vec<f64> = (0..cfg.t_b)
        .map(|t| {
            pred.modes
                .iter()
                .map(|m| m.prob * ego_sigma_scalar(&m.trajs[ego_id], t))
                .sum()
        })
        .collect();
    let root_corridor = match build_corridor(&root_positions, scene_map, &root_sigma, cfg) {
        Ok(c) => c,
        Err(CogError::InfeasibleCorridor(msg)) => {
            return Ok(fallback_tree(
                ego,
                pred,
                cfg,
                t_total,
                SolveStatus::Infeasible,
                Some(format!("root corridor: {msg}")),
                &obstacles,
            ))
        }
        Err(e) => return Err(e),
    };

    // per-mode full-horizon references (branch tracking targets)
    let mode_refs: Vec<Reference> = pred
        .modes
        .iter()
        .map(|m| {
            let mu = &m.trajs[ego_id].mu;
            reference_from_positions(ego, &mu[..t_total], cfg)
        })
        .collect();

    let mut branches = Vec::with_capacity(k_modes);
    for (k, m) in pred.modes.iter().enumerate() {
        let traj = &m.trajs[ego_id];
        let pos: Vec<[f64; 2]> = traj.mu[cfg.t_b..t_total].to_vec();
        let sigma: Vec<f64> = (cfg.t_b..t_total).map(|t| ego_sigma_scalar(traj, t)).collect();
        let corridor = match build_corridor(&pos, scene_map, &sigma, cfg) {
            Ok(c) => c,
            Err(CogError::InfeasibleCorridor(msg)) => {
                return Ok(fallback_tree(
                    ego,
                    pred,
                    cfg,
                    t_total,
                    SolveStatus::Infeasible,
                    Some(format!("branch {k} corridor: {msg}")),
                    &obstacles,
                ))
            }
            Err(e) => return Err(e),
        };
        branches.push(Phase {
            xref: mode_refs[k].states[cfg.t_b..].to_vec(),
            uref: mode_refs[k].controls[cfg.t_b..].to_vec(),
            corridor: Some(corridor),
            obstacles: obstacles.branch[k].clone(),
            weight: if cfg.weight_branches { m.prob } else { 1.0 },
        });
    }
    let root = Phase {
        xref: nominal.states[..cfg.t_b].to_vec(),
        uref: nominal.controls[..cfg.t_b].to_vec(),
        corridor: Some(root_corridor),
        obstacles: obstacles.root.clone(),
        weight: 1.0,
    };

    let to_controls = |c: &[[f64; 2]]| -> Vec<Control> {
        c.iter()
            .map(|u| Control {
                a: u[0],
                delta: u[1],
            })
            .collect()
    };
    let fit = |mut u: Vec<Control>, len: usize, fill: Control| -> Vec<Control> {
        u.truncate(len);
        while u.len() < len {
            u.push(*u.last().unwrap_or(&fill));
        }
        u
    };
    let still = Control { a: 0.0, delta: 0.0 };

    let (root_init, branch_init) = match warm {
        Some(w) => {
            let root_init = fit(w.root, cfg.t_b, still);
            let branch_init: Vec<Vec<Control>> = (0..k_modes)
                .map(|k| {
                    let base = to_controls(&mode_refs[k].controls[cfg.t_b..]);
                    let prev = w.branches.get(k).cloned().unwrap_or_default();
                    if prev.is_empty() {
                        base
                    } else {
                        fit(prev, bl, still)
                    }
                })
                .collect();
            (root_init, branch_init)
        }
        None => {
            // score deterministic candidates by exact cost plus constraint
            // violation of their rollout, keep the best as initialization
            let branch_init: Vec<Vec<Control>> = (0..k_modes)
                .map(|k| to_controls(&mode_refs[k].controls[cfg.t_b..]))
                .collect();
            let mut best: Option<(f64, Vec<Control>)> = None;
            for cand in &init_all.candidates {
                let ru = fit(to_controls(&cand.controls[..cfg.t_b.min(cand.len())]), cfg.t_b, still);
                let cost = merit(ego, cfg, &root, &branches, &ru, &branch_init);
                let states = rollout(ego, &ru, &cfg.geom, cfg.dt);
                let sep = min_separation_phase(&states, &obstacles.root, cfg);
                let viol = (cfg.clearance() - sep).max(0.0);
                let score = cost + 1e4 * viol;
                if best.as_ref().map_or(true, |(b, _)| score < *b) {
                    best = Some((score, ru));
                }
            }
            (best.unwrap().1, branch_init)
        }
    };

    let out = sqp_solve(ego, cfg, &root, &branches, root_init, branch_init);
    if out.status == SolveStatus::Infeasible {
        return Ok(fallback_tree(
            ego,
            pred,
            cfg,
            t_total,
            SolveStatus::Infeasible,
            out.infeasible_detail,
            &obstacles,
        ));
    }

    // independent geometric safety post-check against every applicable mode
    let mut min_sep = min_separation_phase(&out.root_states, &obstacles.root, cfg);
    for (k, states) in out.branch_states.iter().enumerate() {
        min_sep = min_sep.min(min_separation_phase(states, &obstacles.branch[k], cfg));
    }
    if min_sep < cfg.clearance() - 1e-6 {
        return Ok(fallback_tree(
            ego,
            pred,
            cfg,
            t_total,
            out.status,
            Some(format!(
                "safety post-check failed: separation {min_sep:.3} m"
            )),
            &obstacles,
        ));
    }

    let branches_out: Vec<Branch> = pred
        .modes
        .iter()
        .enumerate()
        .map(|(k, m)| Branch {
            mode: k,
            prob: m.prob,
            states: out.branch_states[k].clone(),
            controls: out.branch_controls[k].clone(),
        })
        .collect();
    Ok(TrajectoryTree {
        dt: cfg.dt,
        t_b: cfg.t_b,
        root_states: out.root_states,
        root_controls: out.root_controls,
        branches: branches_out,
        status: PlanStatus::Ok,
        solver: out.status,
        report: PlanReport {
            min_separation: min_sep,
            slackness: out.slackness,
            costs: out.costs,
            infeasible_detail: None,
        },
    })
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    format: String,
    plan: TrajectoryTree,
}

pub fn save_plan(path: &Path, plan: &TrajectoryTree) -> Result<()> {
    let doc = PlanFile {
        format: PLAN_FORMAT.to_string(),
        plan: plan.clone(),
    };
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| CogError::Other(format!("plan serialization failed: {e}")))?;
    text.push('\n');
    atomic_write(path, &text)
}

pub fn load_plan(path: &Path) -> Result<TrajectoryTree> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CogError::io(path.display().to_string(), e))?;
    let doc: PlanFile = serde_json::from_str(&text).map_err(|e| CogError::Parse {
        path: path.display().to_string(),
        context: None,
        msg: e.to_string(),
    })?;
    if doc.format != PLAN_FORMAT {
        return Err(CogError::Parse {
            path: path.display().to_string(),
            context: Some("format".into()),
            msg: format!("expected '{PLAN_FORMAT}', found '{}'", doc.format),
        });
    }
    let plan = doc.plan;
    if plan.root_states.len() != plan.root_controls.len() + 1 {
        return Err(CogError::Invariant(
            "plan root states/controls length mismatch".into(),
        ));
    }
    for b in &plan.branches {
        if b.states.first() != Some(plan.root_terminal()) {
            return Err(CogError::Invariant(format!(
                "branch {} does not start at the root terminal state",
                b.mode
            )));
        }
    }
    Ok(plan)
}
