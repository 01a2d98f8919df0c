//! Multimodal joint trajectory prediction network.
//!
//! Agents and map polylines become instance tokens via per-token MLPs and max
//! pooling, all expressed in instance-local frames. A pairwise-feature
//! attention encoder mixes the tokens while staying invariant to global rigid
//! motions; a learnable-query decoder emits `K` joint futures with per-step
//! Gaussian positions, headings, and a probability per mode. Agents outside
//! the joint set are extrapolated at constant velocity.

mod output;
#[cfg(test)]
mod tests;

pub use output::{
    load_prediction, save_prediction, ModePrediction, PredTraj, PredictionSet, PRED_FORMAT,
};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CogError, Result};
use crate::frames::{agent_frame, point_to_global, point_to_local, polyline_frame, rel_features, to_local, LocalFrame};
use crate::modality::nearest_neighbors;
use crate::scene::{AgentHistory, AgentKind, PolylineSemantics, Scene};
use crate::tensor::{ParamStore, Tape, TensorRef};
use crate::util::wrap_angle;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Token width.
    pub d_model: usize,
    /// Attention heads (must divide `d_model`).
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Number of predicted joint modes `K`.
    pub n_modes: usize,
    /// Neighbors joining the ego in the joint prediction.
    pub n_neighbor: usize,
    /// Prediction horizon in steps.
    pub t_f: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_modes: 6,
            n_neighbor: 2,
            t_f: 30,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_heads == 0
            || self.n_modes == 0
            || self.t_f == 0
            || self.d_model % self.n_heads != 0
        {
            return Err(CogError::Invariant(format!(
                "bad network config: d_model {} must be a positive multiple of n_heads {}, n_modes {} and t_f {} positive",
                self.d_model, self.n_heads, self.n_modes, self.t_f
            )));
        }
        Ok(())
    }
}

const AGENT_FEAT: usize = 9; // x, y, cos h, sin h, speed, rel t, kind one-hot
const MAP_FEAT: usize = 5; // x, y, semantics one-hot
const REL_FEAT: usize = 5;
/// Per-step head output: mu x/y, log-sigma x/y, raw yaw sin/cos.
const STEP_OUT: usize = 6;
const SIGMA_BIAS: f64 = -0.693_147_180_559_945_3; // ln 0.5: sigma starts at 0.5
const YAW_EPS: f64 = 1e-9;
/// Initial half-range of the per-mode anchor endpoints [m].
const ANCHOR_SPREAD: f64 = 3.0;

fn reg_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) {
    store.insert_init(&format!("{name}.w"), vec![din, dout], din, rng);
    store.insert_const(&format!("{name}.b"), vec![dout], 0.0);
}

fn reg_mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dh: usize, dout: usize) {
    reg_linear(store, rng, &format!("{name}.0"), din, dh);
    reg_linear(store, rng, &format!("{name}.1"), dh, dout);
}

fn reg_ln(store: &mut ParamStore, name: &str, d: usize) {
    store.insert_const(&format!("{name}.g"), vec![d], 1.0);
    store.insert_const(&format!("{name}.b"), vec![d], 0.0);
}

fn reg_attn(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        reg_linear(store, rng, &format!("{name}.{p}"), d, d);
    }
}

/// Fresh parameter store for `cfg`, seeded deterministically.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut s = ParamStore::new();
    let d = cfg.d_model;

    reg_mlp(&mut s, rng, "embed.agent", AGENT_FEAT, d, d);
    reg_mlp(&mut s, rng, "embed.map", MAP_FEAT, d, d);
    reg_mlp(&mut s, rng, "embed.pe", REL_FEAT, d, d);
    for l in 0..cfg.n_enc_layers {
        reg_ln(&mut s, &format!("enc{l}.ln1"), d);
        reg_mlp(&mut s, rng, &format!("enc{l}.cagg"), 3 * d, d, d);
        reg_attn(&mut s, rng, &format!("enc{l}.attn"), d);
        reg_ln(&mut s, &format!("enc{l}.ln2"), d);
        reg_mlp(&mut s, rng, &format!("enc{l}.ffn"), d, 2 * d, d);
        reg_mlp(&mut s, rng, &format!("enc{l}.pe"), d, d, d);
    }
    s.insert_init("dec.q_anchor", vec![cfg.n_modes, d], d, rng);
    reg_mlp(&mut s, rng, "dec.qm", 2 * d, d, d);
    for l in 0..cfg.n_dec_layers {
        reg_ln(&mut s, &format!("dec{l}.self.ln"), d);
        reg_attn(&mut s, rng, &format!("dec{l}.self"), d);
        reg_ln(&mut s, &format!("dec{l}.cross.ln"), d);
        reg_attn(&mut s, rng, &format!("dec{l}.cross"), d);
        reg_ln(&mut s, &format!("dec{l}.ffn.ln"), d);
        reg_mlp(&mut s, rng, &format!("dec{l}.ffn"), d, 2 * d, d);
    }
    reg_mlp(&mut s, rng, "head.cls", d, d, 1);
    reg_mlp(&mut s, rng, "head.traj", 2 * d, 2 * d, cfg.t_f * STEP_OUT);
    // per-mode, per-joint-slot position anchors: smooth ramps toward a random
    // per-mode endpoint, large enough that the modes start visibly apart and
    // winner-takes-all regression can specialize them instead of collapsing
    // onto the dataset mean
    for a in 0..=cfg.n_neighbor {
        let name = format!("head.anchor{a}");
        s.insert_const(&name, vec![cfg.n_modes, cfg.t_f * 2], 0.0);
        let data = s.get_mut(&name).unwrap();
        // endpoints are centered across modes so no mode starts uniformly
        // closer to every target, which would let it win all scenes
        let mut ends: Vec<[f64; 2]> = (0..cfg.n_modes)
            .map(|_| [rng.gen_range(-ANCHOR_SPREAD..ANCHOR_SPREAD), rng.gen_range(-ANCHOR_SPREAD..ANCHOR_SPREAD)])
            .collect();
        let mean = ends.iter().fold([0.0, 0.0], |m, e| [m[0] + e[0], m[1] + e[1]]);
        for e in &mut ends {
            e[0] -= mean[0] / cfg.n_modes as f64;
            e[1] -= mean[1] / cfg.n_modes as f64;
        }
        for (k, e) in ends.iter().enumerate() {
            for t in 0..cfg.t_f {
                let ramp = (t + 1) as f64 / cfg.t_f as f64;
                data[k * cfg.t_f * 2 + 2 * t] = e[0] * ramp;
                data[k * cfg.t_f * 2 + 2 * t + 1] = e[1] * ramp;
            }
        }
    }
    // start yaw outputs near (sin, cos) = (0, 1) so normalization is
    // well-conditioned from the first step
    let bias = s.get_mut("head.traj.1.b").unwrap();
    for t in 0..cfg.t_f {
        bias[t * STEP_OUT + 5] = 1.0;
    }
    Ok(s)
}

/// All parameters of a store bound onto one tape as grad-requiring leaves.
pub struct TapeParams {
    map: BTreeMap<String, TensorRef>,
}

impl TapeParams {
    pub fn bind(tape: &Tape, store: &ParamStore) -> Self {
        let map = store
            .iter()
            .map(|(name, shape, data)| {
                (name.to_string(), tape.leaf(shape.to_vec(), data.to_vec(), true))
            })
            .collect();
        Self { map }
    }

    pub fn get(&self, name: &str) -> Result<TensorRef> {
        self.map.get(name).copied().ok_or_else(|| CogError::CheckpointMismatch {
            name: name.to_string(),
            expected: vec![],
            found: vec![],
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorRef)> {
        self.map.iter().map(|(n, &t)| (n.as_str(), t))
    }
}

fn lin(tape: &Tape, tp: &TapeParams, name: &str, x: TensorRef) -> Result<TensorRef> {
    tape.linear(x, tp.get(&format!("{name}.w"))?, tp.get(&format!("{name}.b"))?)
}

fn mlp(tape: &Tape, tp: &TapeParams, name: &str, x: TensorRef) -> Result<TensorRef> {
    let h = tape.relu(lin(tape, tp, &format!("{name}.0"), x)?);
    lin(tape, tp, &format!("{name}.1"), h)
}

fn ln_affine(tape: &Tape, tp: &TapeParams, name: &str, x: TensorRef) -> Result<TensorRef> {
    let y = tape.layer_norm(x);
    tape.add_b(
        tape.mul_b(y, tp.get(&format!("{name}.g"))?)?,
        tp.get(&format!("{name}.b"))?,
    )
}

/// Multi-head scaled dot-product attention over already-projected q/k/v,
/// heads taken as contiguous column blocks.
fn heads_attn(tape: &Tape, q: TensorRef, k: TensorRef, v: TensorRef, n_heads: usize) -> Result<TensorRef> {
    let d = tape.shape(q)[1];
    let dh = d / n_heads;
    let mut outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        outs.push(tape.scaled_dot_product_attention(qh, kh, vh)?);
    }
    tape.concat(&outs, 1)
}

fn kind_one_hot(kind: AgentKind) -> [f64; 3] {
    match kind {
        AgentKind::Vehicle => [1.0, 0.0, 0.0],
        AgentKind::Cyclist => [0.0, 1.0, 0.0],
        AgentKind::Pedestrian => [0.0, 0.0, 1.0],
    }
}

fn semantics_one_hot(s: PolylineSemantics) -> [f64; 3] {
    match s {
        PolylineSemantics::LaneCenter => [1.0, 0.0, 0.0],
        PolylineSemantics::LaneBoundary => [0.0, 1.0, 0.0],
        PolylineSemantics::RoadEdge => [0.0, 0.0, 1.0],
    }
}

fn agent_tokens(agent: &AgentHistory, frame: &LocalFrame) -> (Vec<usize>, Vec<f64>) {
    let t_last = agent.last_state().t;
    let kind = kind_one_hot(agent.kind);
    let mut data = Vec::with_capacity(agent.states.len() * AGENT_FEAT);
    for s in &agent.states {
        let local = to_local(frame, &s.pose);
        data.extend_from_slice(&[
            local.x,
            local.y,
            local.heading.cos(),
            local.heading.sin(),
            s.speed,
            s.t - t_last,
        ]);
        data.extend_from_slice(&kind);
    }
    (vec![agent.states.len(), AGENT_FEAT], data)
}

/// Per-mode per-agent decoder outputs, all in the agent's local frame.
pub struct AgentModeOut {
    /// Mean positions, `(t_f, 2)`.
    pub mu: TensorRef,
    /// Per-axis standard deviations, `(t_f, 2)`, strictly positive.
    pub sigma: TensorRef,
    /// Unit `(sin, cos)` heading pairs, `(t_f, 2)`.
    pub yaw_sincos: TensorRef,
}

pub struct NetOutput {
    /// Jointly predicted agents, ego first.
    pub joint_ids: Vec<String>,
    /// Local frame of each joint agent, aligned with `joint_ids`.
    pub joint_frames: Vec<LocalFrame>,
    /// Mode scores before the softmax, `(1, K)`.
    pub cls_logits: TensorRef,
    /// Mode probabilities on the simplex, `(1, K)`.
    pub probs: TensorRef,
    /// `modes[k][a]` for mode `k` and joint agent `a`.
    pub modes: Vec<Vec<AgentModeOut>>,
}

/// Full differentiable forward pass for one scene.
pub fn forward(tape: &Tape, tp: &TapeParams, cfg: &NetConfig, scene: &Scene) -> Result<NetOutput> {
    cfg.validate()?;
    let d = cfg.d_model;

    // instance frames: agents then map polylines
    let mut frames: Vec<LocalFrame> = scene.agents.iter().map(agent_frame).collect();
    frames.extend(scene.map.iter().map(polyline_frame));
    let n = frames.len();

    // token embedding, max-pooled per instance
    let mut rows = Vec::with_capacity(n);
    for (agent, frame) in scene.agents.iter().zip(&frames) {
        let (shape, data) = agent_tokens(agent, frame);
        let toks = tape.constant(shape, data);
        let h = mlp(tape, tp, "embed.agent", toks)?;
        rows.push(tape.reshape(tape.max_pool(h, 0)?, vec![1, d])?);
    }
    for (pl, frame) in scene.map.iter().zip(frames[scene.agents.len()..].iter()) {
        let sem = semantics_one_hot(pl.semantics);
        let mut data = Vec::with_capacity(pl.points.len() * MAP_FEAT);
        for &p in &pl.points {
            let local = point_to_local(frame, p);
            data.extend_from_slice(&[local[0], local[1]]);
            data.extend_from_slice(&sem);
        }
        let toks = tape.constant(vec![pl.points.len(), MAP_FEAT], data);
        let h = mlp(tape, tp, "embed.map", toks)?;
        rows.push(tape.reshape(tape.max_pool(h, 0)?, vec![1, d])?);
    }
    let mut f = tape.concat(&rows, 0)?; // (n, d)

    // pairwise relative positional embedding, row-major (i, j)
    let rel = rel_features(&frames);
    let mut pe = mlp(
        tape,
        tp,
        "embed.pe",
        tape.constant(vec![n * n, REL_FEAT], rel.flat()),
    )?;

    // encoder: pre-norm layers over pair-aggregated features
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc{l}");
        let fnorm = ln_affine(tape, tp, &format!("{p}.ln1"), f)?;
        let pair_in = tape.concat(
            &[tape.repeat_rows(fnorm, n)?, tape.tile_rows(fnorm, n)?, pe],
            1,
        )?;
        let cagg = mlp(tape, tp, &format!("{p}.cagg"), pair_in)?; // (n*n, d)

        let q_all = lin(tape, tp, &format!("{p}.attn.q"), fnorm)?;
        let k_all = lin(tape, tp, &format!("{p}.attn.k"), cagg)?;
        let v_all = lin(tape, tp, &format!("{p}.attn.v"), cagg)?;
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let qi = tape.slice(q_all, 0, i, 1)?;
            let ki = tape.slice(k_all, 0, i * n, n)?;
            let vi = tape.slice(v_all, 0, i * n, n)?;
            outs.push(heads_attn(tape, qi, ki, vi, cfg.n_heads)?);
        }
        let att = lin(tape, tp, &format!("{p}.attn.o"), tape.concat(&outs, 0)?)?;
        f = tape.add(f, att)?;
        let f2 = ln_affine(tape, tp, &format!("{p}.ln2"), f)?;
        f = tape.add(f, mlp(tape, tp, &format!("{p}.ffn"), f2)?)?;
        pe = tape.add(pe, mlp(tape, tp, &format!("{p}.pe"), cagg)?)?;
    }

    // joint set: ego plus nearest neighbors at the last observation
    let ego_idx = scene
        .agents
        .iter()
        .position(|a| a.id == scene.ego_id)
        .ok_or_else(|| CogError::Invariant("scene has no ego agent".into()))?;
    let mut joint_ids = vec![scene.ego_id.clone()];
    joint_ids.extend(nearest_neighbors(scene, cfg.n_neighbor));
    let joint_idx: Vec<usize> = joint_ids
        .iter()
        .map(|id| scene.agents.iter().position(|a| a.id == *id).unwrap())
        .collect();
    let joint_frames: Vec<LocalFrame> = joint_idx.iter().map(|&i| frames[i]).collect();

    // mode queries: anchors + a scene summary broadcast to all K
    let f_ego = tape.slice(f, 0, ego_idx, 1)?;
    let summary = if n > 1 {
        let mut w = vec![1.0 / (n - 1) as f64; n];
        w[ego_idx] = 0.0;
        tape.matmul(tape.constant(vec![1, n], w), f)?
    } else {
        tape.constant(vec![1, d], vec![0.0; d])
    };
    let qm = mlp(tape, tp, "dec.qm", tape.concat(&[f_ego, summary], 1)?)?;
    let q_pos = tape.add(tp.get("dec.q_anchor")?, tape.tile_rows(qm, cfg.n_modes)?)?;

    let mut x = tape.constant(vec![cfg.n_modes, d], vec![0.0; cfg.n_modes * d]);
    for l in 0..cfg.n_dec_layers {
        let p = format!("dec{l}");
        let t = ln_affine(tape, tp, &format!("{p}.self.ln"), x)?;
        let qk = tape.add(t, q_pos)?;
        let att = heads_attn(
            tape,
            lin(tape, tp, &format!("{p}.self.q"), qk)?,
            lin(tape, tp, &format!("{p}.self.k"), qk)?,
            lin(tape, tp, &format!("{p}.self.v"), t)?,
            cfg.n_heads,
        )?;
        x = tape.add(x, lin(tape, tp, &format!("{p}.self.o"), att)?)?;

        let t = ln_affine(tape, tp, &format!("{p}.cross.ln"), x)?;
        let att = heads_attn(
            tape,
            lin(tape, tp, &format!("{p}.cross.q"), tape.add(t, q_pos)?)?,
            lin(tape, tp, &format!("{p}.cross.k"), f)?,
            lin(tape, tp, &format!("{p}.cross.v"), f)?,
            cfg.n_heads,
        )?;
        x = tape.add(x, lin(tape, tp, &format!("{p}.cross.o"), att)?)?;

        let t = ln_affine(tape, tp, &format!("{p}.ffn.ln"), x)?;
        x = tape.add(x, mlp(tape, tp, &format!("{p}.ffn"), t)?)?;
    }

    let cls_logits = tape.transpose(mlp(tape, tp, "head.cls", x)?)?; // (1, K)
    let probs = tape.softmax(cls_logits);

    // the trajectory head predicts a residual on top of a constant-velocity
    // rollout in each joint agent's local frame (straight ahead at last speed)
    let cv_locals: Vec<TensorRef> = joint_idx
        .iter()
        .map(|&ai| {
            let v = scene.agents[ai].last_state().speed;
            let mut data = Vec::with_capacity(cfg.t_f * 2);
            for t in 1..=cfg.t_f {
                data.push(v * scene.dt * t as f64);
                data.push(0.0);
            }
            tape.constant(vec![cfg.t_f, 2], data)
        })
        .collect();

    let mut modes = Vec::with_capacity(cfg.n_modes);
    for k in 0..cfg.n_modes {
        let tok = tape.slice(x, 0, k, 1)?;
        let mut per_agent = Vec::with_capacity(joint_idx.len());
        for (a, &ai) in joint_idx.iter().enumerate() {
            let fa = tape.slice(f, 0, ai, 1)?;
            let out = mlp(tape, tp, "head.traj", tape.concat(&[tok, fa], 1)?)?;
            let steps = tape.reshape(out, vec![cfg.t_f, STEP_OUT])?;
            let anchor = tape.reshape(
                tape.slice(tp.get(&format!("head.anchor{a}"))?, 0, k, 1)?,
                vec![cfg.t_f, 2],
            )?;
            let mu = tape.add(
                tape.add(tape.slice(steps, 1, 0, 2)?, cv_locals[a])?,
                anchor,
            )?;
            let sigma = tape.exp(tape.add_scalar(tape.slice(steps, 1, 2, 2)?, SIGMA_BIAS));
            let sc_raw = tape.slice(steps, 1, 4, 2)?;
            let sq = tape.mul(sc_raw, sc_raw)?;
            let n2 = tape.add(tape.slice(sq, 1, 0, 1)?, tape.slice(sq, 1, 1, 1)?)?;
            let norm = tape.sqrt(tape.add_scalar(n2, YAW_EPS));
            let norm2 = tape.concat(&[norm, norm], 1)?;
            let yaw_sincos = tape.div(sc_raw, norm2)?;
            per_agent.push(AgentModeOut { mu, sigma, yaw_sincos });
        }
        modes.push(per_agent);
    }

    Ok(NetOutput {
        joint_ids,
        joint_frames,
        cls_logits,
        probs,
        modes,
    })
}

/// Rotate/translate agent-local mean positions `(t_f, 2)` into the global
/// frame, on-tape.
pub fn mu_to_global(tape: &Tape, mu_local: TensorRef, frame: &LocalFrame) -> Result<TensorRef> {
    let (s, c) = frame.heading.sin_cos();
    let rot = tape.constant(vec![2, 2], vec![c, s, -s, c]);
    tape.add_b(
        tape.matmul(mu_local, rot)?,
        tape.constant(vec![2], frame.origin.to_vec()),
    )
}

/// Constant-velocity, constant-heading rollout from an agent's last observed
/// state: `t_f` steps of `[x, y, heading]`.
pub fn constant_velocity_extrapolation(agent: &AgentHistory, t_f: usize, dt: f64) -> Vec<[f64; 3]> {
    let last = agent.last_state();
    let (sin, cos) = last.pose.heading.sin_cos();
    (1..=t_f)
        .map(|k| {
            let s = last.speed * dt * k as f64;
            [last.pose.x + s * cos, last.pose.y + s * sin, last.pose.heading]
        })
        .collect()
}

/// Numeric end-to-end prediction for one scene, outputs in global
/// coordinates. Sigma stays expressed along the agent's local axes.
pub fn predict(store: &ParamStore, cfg: &NetConfig, scene: &Scene) -> Result<PredictionSet> {
    let tape = Tape::new();
    let tp = TapeParams::bind(&tape, store);
    let out = forward(&tape, &tp, cfg, scene)?;

    let probs = tape.data(out.probs);
    let mut modes = Vec::with_capacity(cfg.n_modes);
    for (k, per_agent) in out.modes.iter().enumerate() {
        let mut trajs = BTreeMap::new();
        for (a, amo) in per_agent.iter().enumerate() {
            let frame = &out.joint_frames[a];
            let mu = tape.data(amo.mu);
            let sigma = tape.data(amo.sigma);
            let sc = tape.data(amo.yaw_sincos);
            let mut g_mu = Vec::with_capacity(cfg.t_f);
            let mut g_sigma = Vec::with_capacity(cfg.t_f);
            let mut g_yaw = Vec::with_capacity(cfg.t_f);
            for t in 0..cfg.t_f {
                g_mu.push(point_to_global(frame, [mu[2 * t], mu[2 * t + 1]]));
                g_sigma.push([sigma[2 * t], sigma[2 * t + 1]]);
                g_yaw.push(wrap_angle(sc[2 * t].atan2(sc[2 * t + 1]) + frame.heading));
            }
            trajs.insert(
                out.joint_ids[a].clone(),
                PredTraj {
                    mu: g_mu,
                    sigma: g_sigma,
                    yaw: g_yaw,
                },
            );
        }
        modes.push(ModePrediction {
            prob: probs[k],
            trajs,
        });
    }

    let mut others = BTreeMap::new();
    for agent in &scene.agents {
        if !out.joint_ids.contains(&agent.id) {
            others.insert(
                agent.id.clone(),
                constant_velocity_extrapolation(agent, cfg.t_f, scene.dt),
            );
        }
    }

    Ok(PredictionSet {
        dt: scene.dt,
        t0: scene.last_time(),
        joint_ids: out.joint_ids,
        modes,
        others,
    })
}
