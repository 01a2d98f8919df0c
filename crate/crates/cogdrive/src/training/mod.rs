//! Winner-takes-all training objective and the desk-scale optimizer loop.
//!
//! Per scene: the winner mode (lowest joint final displacement) receives
//! position and yaw regression, the mode probabilities get a max-margin
//! classification loss, and a squared difference of smooth modality
//! surrogates supervises the winner's interaction mode. Optimization is
//! adaptive moments with decoupled weight decay and cosine learning-rate
//! decay, fully deterministic for a given seed.


use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CogError, Result};
use crate::frames::{to_local, LocalFrame};
use crate::metrics;
use crate::modality::{self, ModalityConfig};
use crate::prednet::{self, forward, mu_to_global, NetConfig, NetOutput, TapeParams};
use crate::scene::{GroundTruthFutures, Pose2, Scene};
use crate::tensor::{ParamStore, Tape, TensorRef};
use crate::util::atomic_write;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Classification-loss weight (alpha_1).
    pub alpha1: f64,
    /// Modal-loss weight (alpha_2).
    pub alpha2: f64,
    /// Max-margin epsilon for the classification loss.
    pub eps_margin: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the dataset held out for validation (taken from the end).
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.2,
            alpha2: 0.01,
            eps_margin: 0.2,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 16,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Loss components for one scene or one averaged batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBreakdown {
    pub total: f64,
    pub reg_pos: f64,
    pub reg_yaw: f64,
    pub cls: f64,
    pub mode: f64,
    /// Winner mode index (meaningful per scene; for batches, the last one).
    pub winner: usize,
}

impl LossBreakdown {
    /// `total = reg_pos + reg_yaw + alpha1 * cls + alpha2 * mode` within 1e-9.
    pub fn check_identity(&self, cfg: &TrainConfig) -> Result<()> {
        let expect = self.reg_pos + self.reg_yaw + cfg.alpha1 * self.cls + cfg.alpha2 * self.mode;
        if (self.total - expect).abs() > 1e-9 {
            return Err(CogError::Invariant(format!(
                "loss decomposition mismatch: total {} vs components {}",
                self.total, expect
            )));
        }
        Ok(())
    }
}

/// Winner mode by summed final displacement across jointly predicted agents;
/// ties go to the lowest index.
pub fn wta_select(pred: &prednet::PredictionSet, futures: &GroundTruthFutures) -> Result<usize> {
    let mut best = f64::INFINITY;
    let mut best_k = 0;
    for (k, mode) in pred.modes.iter().enumerate() {
        let mut total = 0.0;
        for id in &pred.joint_ids {
            let traj = mode
                .trajs
                .get(id)
                .ok_or_else(|| CogError::Invariant(format!("mode {k} missing agent '{id}'")))?;
            let gt = futures
                .positions(id)
                .ok_or_else(|| CogError::Invariant(format!("ground truth missing '{id}'")))?;
            let p = *traj.mu.last().unwrap();
            let g = gt[traj.mu.len() - 1];
            total += ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
        }
        if total < best {
            best = total;
            best_k = k;
        }
    }
    Ok(best_k)
}

/// Numeric max-margin classification loss over the simplex.
pub fn loss_cls_value(probs: &[f64], k_star: usize, eps_margin: f64) -> f64 {
    probs
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != k_star)
        .map(|(_, &p)| (eps_margin + p - probs[k_star]).max(0.0))
        .sum()
}

fn winner_from_output(tape: &Tape, out: &NetOutput, futures: &GroundTruthFutures) -> Result<usize> {
    let mut best = f64::INFINITY;
    let mut best_k = 0;
    for (k, per_agent) in out.modes.iter().enumerate() {
        let mut total = 0.0;
        for (a, amo) in per_agent.iter().enumerate() {
            let mu = tape.data(amo.mu);
            let t_f = mu.len() / 2;
            let local = [mu[2 * (t_f - 1)], mu[2 * (t_f - 1) + 1]];
            let frame = &out.joint_frames[a];
            let global = crate::frames::point_to_global(frame, local);
            let gt = futures
                .positions(&out.joint_ids[a])
                .ok_or_else(|| CogError::Invariant(format!("ground truth missing '{}'", out.joint_ids[a])))?;
            let g = gt[t_f - 1];
            total += ((global[0] - g[0]).powi(2) + (global[1] - g[1]).powi(2)).sqrt();
        }
        if total < best {
            best = total;
            best_k = k;
        }
    }
    Ok(best_k)
}

fn gt_local_constants(
    futures: &GroundTruthFutures,
    id: &str,
    frame: &LocalFrame,
    t_f: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let fut = futures
        .agent(id)
        .ok_or_else(|| CogError::Invariant(format!("ground truth missing '{id}'")))?;
    if fut.states.len() < t_f {
        return Err(CogError::Invariant(format!(
            "ground truth horizon {} shorter than prediction horizon {t_f}",
            fut.states.len()
        )));
    }
    let mut pos = Vec::with_capacity(2 * t_f);
    let mut yaw_sc = Vec::with_capacity(2 * t_f);
    for s in &fut.states[..t_f] {
        let local = to_local(frame, &Pose2::new(s.x, s.y, s.heading));
        pos.extend_from_slice(&[local.x, local.y]);
        yaw_sc.extend_from_slice(&[local.heading.sin(), local.heading.cos()]);
    }
    Ok((pos, yaw_sc))
}

/// Smooth winding surrogate between two on-tape global trajectories `(t, 2)`.
/// Bearing increments come from the cross/dot arctangent of consecutive
/// relative vectors, which wraps automatically and stays differentiable.
fn soft_mode_on_tape(
    tape: &Tape,
    ego: TensorRef,
    other: TensorRef,
    mcfg: &ModalityConfig,
) -> Result<TensorRef> {
    let t_f = tape.shape(ego)[0];
    let r = tape.sub(ego, other)?; // relative vector per step
    let a = tape.slice(r, 0, 0, t_f - 1)?;
    let b = tape.slice(r, 0, 1, t_f - 1)?;
    let (ax, ay) = (tape.slice(a, 1, 0, 1)?, tape.slice(a, 1, 1, 1)?);
    let (bx, by) = (tape.slice(b, 1, 0, 1)?, tape.slice(b, 1, 1, 1)?);
    let cross = tape.sub(tape.mul(ax, by)?, tape.mul(ay, bx)?)?;
    let dot = tape.add(tape.mul(ax, bx)?, tape.mul(ay, by)?)?;
    let inc = tape.atan2(cross, dot)?;
    let delta = tape.sum(inc);
    let up = tape.logistic(tape.scale(tape.add_scalar(delta, -mcfg.theta_hat), 1.0 / mcfg.tau));
    let neg = tape.neg(delta);
    let dn = tape.logistic(tape.scale(tape.add_scalar(neg, -mcfg.theta_hat), 1.0 / mcfg.tau));
    tape.sub(up, dn)
}

/// Full training objective for one scene, on-tape. `frozen_winner` pins the
/// WTA choice (used by finite-difference checks, where the argmin must not
/// flip between perturbed evaluations).
pub fn build_loss(
    tape: &Tape,
    tp: &TapeParams,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    mcfg: &ModalityConfig,
    scene: &Scene,
    futures: &GroundTruthFutures,
    frozen_winner: Option<usize>,
) -> Result<(TensorRef, LossBreakdown)> {
    let out = forward(tape, tp, net_cfg, scene)?;
    build_loss_from_output(tape, &out, net_cfg, train_cfg, mcfg, futures, frozen_winner)
}

/// As [`build_loss`], but over an already-computed forward pass (useful when
/// the caller needs the raw head tensors alongside the loss).
pub fn build_loss_from_output(
    tape: &Tape,
    out: &NetOutput,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    mcfg: &ModalityConfig,
    futures: &GroundTruthFutures,
    frozen_winner: Option<usize>,
) -> Result<(TensorRef, LossBreakdown)> {
    let k_star = match frozen_winner {
        Some(k) => k,
        None => winner_from_output(tape, out, futures)?,
    };
    let t_f = net_cfg.t_f;
    let n_agents = out.joint_ids.len();

    // regression on the winner mode, in each agent's local frame
    let mut reg_pos_terms = Vec::with_capacity(n_agents);
    let mut cos_terms = Vec::with_capacity(n_agents);
    for (a, amo) in out.modes[k_star].iter().enumerate() {
        let frame = &out.joint_frames[a];
        let (gt_pos, gt_yaw) = gt_local_constants(futures, &out.joint_ids[a], frame, t_f)?;
        let gt_pos = tape.constant(vec![t_f, 2], gt_pos);
        let diff = tape.sub(amo.mu, gt_pos)?;
        reg_pos_terms.push(tape.mean(tape.mul(diff, diff)?));

        let gt_yaw = tape.constant(vec![t_f, 2], gt_yaw);
        // mean over elements of the products is half the mean cosine sim
        let prod = tape.mul(amo.yaw_sincos, gt_yaw)?;
        cos_terms.push(tape.scale(tape.mean(prod), 2.0));
    }
    let mut reg_pos = reg_pos_terms[0];
    let mut cos_sim = cos_terms[0];
    for i in 1..n_agents {
        reg_pos = tape.add(reg_pos, reg_pos_terms[i])?;
        cos_sim = tape.add(cos_sim, cos_terms[i])?;
    }
    let inv_a = 1.0 / n_agents as f64;
    reg_pos = tape.scale(reg_pos, inv_a);
    cos_sim = tape.scale(cos_sim, inv_a);
    // (1 - mean cos sim) / 2, in [0, 1]
    let reg_yaw = tape.scale(tape.add_scalar(tape.neg(cos_sim), 1.0), 0.5);

    // max-margin classification, excluding k*
    let k = net_cfg.n_modes;
    let p_star = tape.slice(out.probs, 1, k_star, 1)?;
    let mut cls = tape.constant(vec![1, 1], vec![0.0]);
    for j in 0..k {
        if j == k_star {
            continue;
        }
        let pj = tape.slice(out.probs, 1, j, 1)?;
        let margin = tape.relu(tape.add_scalar(tape.sub(pj, p_star)?, train_cfg.eps_margin));
        cls = tape.add(cls, margin)?;
    }
    let cls = tape.reshape(cls, vec![1])?;

    // modal surrogate on the winner mode, against ground-truth futures
    let neighbors = &out.joint_ids[1..];
    let mode_loss = if neighbors.is_empty() {
        tape.constant(vec![1], vec![0.0])
    } else {
        let ego_g = mu_to_global(tape, out.modes[k_star][0].mu, &out.joint_frames[0])?;
        let gt_ego: Vec<[f64; 2]> = futures.positions(&out.joint_ids[0]).unwrap()[..t_f].to_vec();
        let mut terms = Vec::with_capacity(neighbors.len());
        for (i, id) in neighbors.iter().enumerate() {
            let nb_g = mu_to_global(tape, out.modes[k_star][i + 1].mu, &out.joint_frames[i + 1])?;
            let soft_pred = soft_mode_on_tape(tape, ego_g, nb_g, mcfg)?;
            let gt_nb: Vec<[f64; 2]> = futures.positions(id).unwrap()[..t_f].to_vec();
            let soft_gt = modality::soft_mode(&gt_ego, &gt_nb, mcfg)?;
            let d = tape.add_scalar(soft_pred, -soft_gt);
            terms.push(tape.mul(d, d)?);
        }
        let mut s = terms[0];
        for t in &terms[1..] {
            s = tape.add(s, *t)?;
        }
        tape.scale(s, 1.0 / neighbors.len() as f64)
    };

    let total = tape.add(
        tape.add(reg_pos, reg_yaw)?,
        tape.add(
            tape.scale(cls, train_cfg.alpha1),
            tape.scale(mode_loss, train_cfg.alpha2),
        )?,
    )?;

    let breakdown = LossBreakdown {
        total: tape.scalar_value(total),
        reg_pos: tape.scalar_value(reg_pos),
        reg_yaw: tape.scalar_value(reg_yaw),
        cls: tape.scalar_value(cls),
        mode: tape.scalar_value(mode_loss),
        winner: k_star,
    };
    Ok((total, breakdown))
}

/// Adam with decoupled weight decay; state keyed by parameter name.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: std::collections::BTreeMap<String, Vec<f64>>,
    v: std::collections::BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Default::default(),
            v: Default::default(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &std::collections::BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, data) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
    }
}

/// Cosine learning-rate decay from `lr` to 0 across `epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    let frac = epoch as f64 / (epochs - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One line of the loss curve: per-epoch averaged loss components per split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub total: f64,
    pub reg_pos: f64,
    pub reg_yaw: f64,
    pub cls: f64,
    pub mode: f64,
    /// Validation minADE (validation split only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_ade: Option<f64>,
}

pub struct TrainResult {
    /// Weights with the best validation minADE.
    pub best: ParamStore,
    pub final_weights: ParamStore,
    pub curve: Vec<EpochRecord>,
    pub best_val_min_ade: f64,
}

pub type Example = (Scene, GroundTruthFutures);

fn scene_grads(
    store: &ParamStore,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    mcfg: &ModalityConfig,
    example: &Example,
) -> Result<(LossBreakdown, std::collections::BTreeMap<String, Vec<f64>>)> {
    let tape = Tape::new();
    let tp = TapeParams::bind(&tape, store);
    let (loss, breakdown) =
        build_loss(&tape, &tp, net_cfg, train_cfg, mcfg, &example.0, &example.1, None)?;
    let grads = tape.backward(loss)?;
    let by_name = tp
        .iter()
        .map(|(name, t)| (name.to_string(), grads.get(&tape, t)))
        .collect();
    Ok((breakdown, by_name))
}

fn val_min_ade(store: &ParamStore, net_cfg: &NetConfig, val: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for (scene, futures) in val {
        let pred = prednet::predict(store, net_cfg, scene)?;
        let m = metrics::evaluate_scene(&pred, futures)?;
        total += m.min_ade;
    }
    Ok(total / val.len() as f64)
}

/// Deterministic training loop. Returns the best-by-validation-minADE and
/// final weights plus the per-epoch loss curve.
pub fn train(
    dataset: &[Example],
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    mcfg: &ModalityConfig,
) -> Result<TrainResult> {
    if dataset.is_empty() {
        return Err(CogError::Invariant("training dataset is empty".into()));
    }
    let n_val = ((dataset.len() as f64 * train_cfg.val_fraction).round() as usize)
        .min(dataset.len().saturating_sub(1));
    let (train_set, val_set) = dataset.split_at(dataset.len() - n_val);
    let val_set = if val_set.is_empty() { train_set } else { val_set };

    let mut store = prednet::init_params(net_cfg, train_cfg.seed)?;
    let mut opt = Adam::new(train_cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(1));
    let mut curve = Vec::new();
    let mut best = store.clone();
    let mut best_val = f64::INFINITY;
    let mut batch_id = 0usize;

    for epoch in 0..train_cfg.epochs {
        let lr = cosine_lr(train_cfg.lr, epoch, train_cfg.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0; 5];
        let mut n_scenes = 0usize;
        for chunk in order.chunks(train_cfg.batch_size.max(1)) {
            let mut acc: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
            for &idx in chunk {
                let (b, g) = scene_grads(&store, net_cfg, train_cfg, mcfg, &train_set[idx])?;
                if !b.total.is_finite() {
                    return Err(CogError::Diverged { batch: batch_id });
                }
                sums[0] += b.total;
                sums[1] += b.reg_pos;
                sums[2] += b.reg_yaw;
                sums[3] += b.cls;
                sums[4] += b.mode;
                n_scenes += 1;
                for (name, gv) in g {
                    let slot = acc.entry(name).or_insert_with(|| vec![0.0; gv.len()]);
                    for (s, v) in slot.iter_mut().zip(&gv) {
                        *s += v / chunk.len() as f64;
                    }
                }
            }
            opt.step(&mut store, &acc, lr);
            batch_id += 1;
        }
        let n = n_scenes as f64;
        curve.push(EpochRecord {
            epoch,
            split: "train".into(),
            total: sums[0] / n,
            reg_pos: sums[1] / n,
            reg_yaw: sums[2] / n,
            cls: sums[3] / n,
            mode: sums[4] / n,
            min_ade: None,
        });

        let mut vsums = [0.0; 5];
        for (scene, futures) in val_set {
            let tape = Tape::new();
            let tp = TapeParams::bind(&tape, &store);
            let (_, b) =
                build_loss(&tape, &tp, net_cfg, train_cfg, mcfg, scene, futures, None)?;
            vsums[0] += b.total;
            vsums[1] += b.reg_pos;
            vsums[2] += b.reg_yaw;
            vsums[3] += b.cls;
            vsums[4] += b.mode;
        }
        let vn = val_set.len() as f64;
        let v_ade = val_min_ade(&store, net_cfg, val_set)?;
        curve.push(EpochRecord {
            epoch,
            split: "val".into(),
            total: vsums[0] / vn,
            reg_pos: vsums[1] / vn,
            reg_yaw: vsums[2] / vn,
            cls: vsums[3] / vn,
            mode: vsums[4] / vn,
            min_ade: Some(v_ade),
        });
        if v_ade < best_val {
            best_val = v_ade;
            best = store.clone();
        }
    }

    Ok(TrainResult {
        best,
        final_weights: store,
        curve,
        best_val_min_ade: best_val,
    })
}

/// Loss curve as line-delimited JSON records.
pub fn save_loss_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for rec in curve {
        text.push_str(&serde_json::to_string(rec).map_err(|e| CogError::Parse {
            path: path.display().to_string(),
            context: None,
            msg: e.to_string(),
        })?);
        text.push('\n');
    }
    atomic_write(path, &text)
}
