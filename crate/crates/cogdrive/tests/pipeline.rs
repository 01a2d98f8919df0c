//! Cross-module integration: synthesize scenes, train briefly, predict,
//! plan against the prediction, close the loop, and score the results —
//! all through the public library API.

use cogdrive::metrics::{aggregate, evaluate_scene};
use cogdrive::modality::ModalityConfig;
use cogdrive::planner::{plan_tree, PlanStatus, PlannerConfig};
use cogdrive::prednet::{predict, NetConfig};
use cogdrive::scene::{synth_scene, GenConfig, Template};
use cogdrive::simloop::{run_episode, SimConfig, SimOutcome};
use cogdrive::training::{train, Example, TrainConfig};

fn net() -> NetConfig {
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

fn dataset(template: Template, sigma: f64, n: usize, seed0: u64) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let r = synth_scene(&GenConfig::new(template).with_sigma(sigma), seed0 + i as u64)
                .unwrap();
            (r.scene, r.futures)
        })
        .collect()
}

#[test]
fn train_predict_plan_sim_eval_chain() {
    let data = dataset(Template::Crossing, 0.1, 20, 100);
    let net_cfg = net();
    let train_cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let result = train(&data, &net_cfg, &train_cfg, &ModalityConfig::default()).unwrap();
    assert_eq!(result.curve.iter().filter(|r| r.split == "train").count(), 3);
    assert!(result.best_val_min_ade.is_finite());

    // predict on held-out scenes and check the output contract
    let held_out = dataset(Template::Crossing, 0.1, 4, 9_000);
    let mut per_scene = Vec::new();
    for (scene, futures) in &held_out {
        let pred = predict(&result.best, &net_cfg, scene).unwrap();
        assert_eq!(pred.modes.len(), net_cfg.n_modes);
        let psum: f64 = pred.modes.iter().map(|m| m.prob).sum();
        assert!((psum - 1.0).abs() < 1e-9, "mode probabilities must sum to 1");
        assert!(pred.joint_ids.contains(&scene.ego_id));

        // the planner consumes the same prediction object
        let ego = {
            let s = scene.ego().last_state();
            cogdrive::planner::EgoState::new(s.pose.x, s.pose.y, s.speed, s.pose.heading)
        };
        let cfg = PlannerConfig::default();
        let tree = plan_tree(&pred, &ego, &scene.map, &cfg).unwrap();
        assert_eq!(tree.branches.len(), net_cfg.n_modes);
        if tree.status == PlanStatus::Ok {
            assert!(
                tree.report.min_separation >= cfg.clearance() - 1e-6,
                "accepted plan must respect the separation invariant"
            );
        }

        per_scene.push(evaluate_scene(&pred, futures).unwrap());
    }
    let report = aggregate(&per_scene).unwrap();
    assert!(report.min_ade.is_finite() && report.min_ade >= 0.0);
    assert!(report.min_joint_ade >= 0.0);

    // close the loop on a fresh episode with the trained weights
    let (scene, futures) = &held_out[0];
    let sim_cfg = SimConfig {
        net: net_cfg,
        ..SimConfig::default()
    };
    let log = run_episode(scene, futures, &result.best, &sim_cfg).unwrap();
    assert_ne!(log.outcome, SimOutcome::Collision);
    log.validate().unwrap();
    assert_eq!(log.records.len(), futures.t_f().min(sim_cfg.max_steps));
}
