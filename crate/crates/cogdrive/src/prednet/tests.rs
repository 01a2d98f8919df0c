use super::*;
use crate::scene::{synth_scene, GenConfig, Template};
use crate::tensor::{load_weights, save_weights};

fn small_cfg() -> NetConfig {
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

#[test]
fn config_validation() {
    assert!(NetConfig::default().validate().is_ok());
    let bad = NetConfig {
        d_model: 10,
        n_heads: 4,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn output_shapes_and_constraints() {
    let cfg = small_cfg();
    let store = init_params(&cfg, 7).unwrap();
    let r = synth_scene(&GenConfig::new(Template::Crossing), 1).unwrap();

    let tape = Tape::new();
    let tp = TapeParams::bind(&tape, &store);
    let out = forward(&tape, &tp, &cfg, &r.scene).unwrap();

    assert_eq!(out.joint_ids[0], "ego");
    assert_eq!(out.joint_ids.len(), 3); // ego + 2 neighbors
    assert_eq!(tape.shape(out.probs), vec![1, cfg.n_modes]);
    let p = tape.data(out.probs);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(p.iter().all(|&v| v > 0.0));

    assert_eq!(out.modes.len(), cfg.n_modes);
    for per_agent in &out.modes {
        assert_eq!(per_agent.len(), out.joint_ids.len());
        for amo in per_agent {
            assert_eq!(tape.shape(amo.mu), vec![cfg.t_f, 2]);
            assert!(tape.data(amo.sigma).iter().all(|&s| s > 0.0));
            let sc = tape.data(amo.yaw_sincos);
            for t in 0..cfg.t_f {
                let n = (sc[2 * t].powi(2) + sc[2 * t + 1].powi(2)).sqrt();
                assert!((n - 1.0).abs() < 1e-4, "yaw pair not unit: {n}");
            }
        }
    }
}

#[test]
fn predict_is_deterministic() {
    let cfg = small_cfg();
    let store = init_params(&cfg, 3).unwrap();
    let r = synth_scene(&GenConfig::new(Template::Merge), 2).unwrap();
    let a = predict(&store, &cfg, &r.scene).unwrap();
    let b = predict(&store, &cfg, &r.scene).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rigid_motion_equivariance() {
    use crate::scene::Pose2;
    let cfg = small_cfg();
    let store = init_params(&cfg, 11).unwrap();
    let r = synth_scene(&GenConfig::new(Template::Crossing), 4).unwrap();
    let base = predict(&store, &cfg, &r.scene).unwrap();

    let phi: f64 = 0.83;
    let (s, c) = phi.sin_cos();
    let (tx, ty) = (37.0, -12.5);
    let move_pose = |p: &Pose2| Pose2::new(c * p.x - s * p.y + tx, s * p.x + c * p.y + ty, p.heading + phi);
    let move_pt = |p: [f64; 2]| [c * p[0] - s * p[1] + tx, s * p[0] + c * p[1] + ty];

    let mut scene = r.scene.clone();
    for a in &mut scene.agents {
        for st in &mut a.states {
            st.pose = move_pose(&st.pose);
        }
    }
    for pl in &mut scene.map {
        for p in &mut pl.points {
            *p = move_pt(*p);
        }
    }
    let moved = predict(&store, &cfg, &scene).unwrap();

    assert_eq!(base.joint_ids, moved.joint_ids);
    for (mb, mm) in base.modes.iter().zip(&moved.modes) {
        assert!((mb.prob - mm.prob).abs() < 1e-9);
        for (id, tb) in &mb.trajs {
            let tm = &mm.trajs[id];
            for (pb, pm) in tb.mu.iter().zip(&tm.mu) {
                let e = move_pt(*pb);
                assert!((e[0] - pm[0]).abs() < 1e-6 && (e[1] - pm[1]).abs() < 1e-6);
            }
            for (yb, ym) in tb.yaw.iter().zip(&tm.yaw) {
                let d = crate::util::wrap_angle(yb + phi - ym).abs();
                assert!(d < 1e-6 || (d - 2.0 * std::f64::consts::PI).abs() < 1e-6);
            }
            for (sb, sm) in tb.sigma.iter().zip(&tm.sigma) {
                assert!((sb[0] - sm[0]).abs() < 1e-6 && (sb[1] - sm[1]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn non_ego_permutation_equivariance() {
    let cfg = small_cfg();
    let store = init_params(&cfg, 5).unwrap();
    let r = synth_scene(&GenConfig::new(Template::Crossing), 6).unwrap();
    let base = predict(&store, &cfg, &r.scene).unwrap();

    let mut scene = r.scene.clone();
    // reverse non-ego agents and map polylines
    let ego_pos = scene.agents.iter().position(|a| a.id == scene.ego_id).unwrap();
    let ego = scene.agents.remove(ego_pos);
    scene.agents.reverse();
    scene.agents.push(ego);
    scene.map.reverse();
    let perm = predict(&store, &cfg, &scene).unwrap();

    assert_eq!(base.joint_ids, perm.joint_ids);
    for (mb, mp) in base.modes.iter().zip(&perm.modes) {
        assert!((mb.prob - mp.prob).abs() < 1e-9);
        for (id, tb) in &mb.trajs {
            let tp2 = &mp.trajs[id];
            for (a, b) in tb.mu.iter().zip(&tp2.mu) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
        }
    }
    assert_eq!(base.others, perm.others);
}

#[test]
fn cv_extrapolation_exact() {
    let r = synth_scene(&GenConfig::new(Template::Crossing), 8).unwrap();
    let agent = r.scene.agent("b1").unwrap();
    let roll = constant_velocity_extrapolation(agent, 5, r.scene.dt);
    let last = agent.last_state();
    for (k, p) in roll.iter().enumerate() {
        let s = last.speed * r.scene.dt * (k + 1) as f64;
        assert!((p[0] - (last.pose.x + s * last.pose.heading.cos())).abs() < 1e-12);
        assert!((p[1] - (last.pose.y + s * last.pose.heading.sin())).abs() < 1e-12);
        assert_eq!(p[2], last.pose.heading);
    }
}

#[test]
fn checkpoint_roundtrip_reproduces_outputs() {
    let cfg = small_cfg();
    let store = init_params(&cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    save_weights(&path, &store).unwrap();
    let loaded = load_weights(&path).unwrap();
    loaded.validate_against(&store).unwrap();

    let r = synth_scene(&GenConfig::new(Template::StraightFollow), 0).unwrap();
    let a = predict(&store, &cfg, &r.scene).unwrap();
    let b = predict(&loaded, &cfg, &r.scene).unwrap();
    assert_eq!(a, b);
}

#[test]
fn prediction_file_roundtrip() {
    let cfg = small_cfg();
    let store = init_params(&cfg, 2).unwrap();
    let r = synth_scene(&GenConfig::new(Template::UnprotectedLeft), 3).unwrap();
    let pred = predict(&store, &cfg, &r.scene).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.json");
    save_prediction(&path, &pred).unwrap();
    assert_eq!(load_prediction(&path).unwrap(), pred);
}

#[test]
fn missing_parameter_is_reported() {
    let cfg = small_cfg();
    let mut store = init_params(&cfg, 1).unwrap();
    // simulate a truncated checkpoint by validating a store with a key removed
    let full = store.clone();
    let name = store.names().next().unwrap().to_string();
    let mut pruned = crate::tensor::ParamStore::new();
    for (n, s, d) in store.iter() {
        if n != name {
            pruned.insert(n, s.to_vec(), d.to_vec());
        }
    }
    store = pruned;
    assert!(matches!(
        store.validate_against(&full),
        Err(crate::error::CogError::CheckpointMismatch { .. })
    ));
}
