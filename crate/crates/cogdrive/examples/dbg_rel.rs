use cogdrive::modality::ModalityConfig;
use cogdrive::prednet::NetConfig;
use cogdrive::scene::{synth_scene, GenConfig, SynthResult, Template};
use cogdrive::training::{train, Example, TrainConfig};

fn main() {
    let gen = GenConfig::new(Template::Crossing).with_sigma(0.2);
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let results: Vec<SynthResult> = (0..n as u64).map(|i| synth_scene(&gen, i).unwrap()).collect();
    let dataset: Vec<Example> = results
        .iter()
        .map(|r| (r.scene.clone(), r.futures.clone()))
        .collect();
    let net = NetConfig {
        d_model: 32,
        n_heads: 4,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_modes: 2,
        n_neighbor: 2,
        t_f: 30,
    };
    let mut cv_ade = 0.0;
    for r in &results {
        let mut per_scene = 0.0;
        let mut n_agents = 0.0;
        for a in &r.scene.agents {
            let Some(gt) = r.futures.positions(&a.id) else { continue };
            let cv = cogdrive::prednet::constant_velocity_extrapolation(a, gt.len(), r.scene.dt);
            let mut s = 0.0;
            for (p, q) in cv.iter().zip(&gt) {
                s += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            }
            per_scene += s / gt.len() as f64;
            n_agents += 1.0;
        }
        cv_ade += per_scene / n_agents;
    }
    println!("CV baseline ADE {:.4}", cv_ade / results.len() as f64);
    let tcfg = TrainConfig { epochs, seed: 0, ..TrainConfig::default() };
    let mcfg = ModalityConfig::default();
    let t0 = std::time::Instant::now();
    let out = train(&dataset, &net, &tcfg, &mcfg).unwrap();
    for rec in &out.curve {
        println!(
            "epoch {:3} {:5} total {:.4} reg_pos {:.4} reg_yaw {:.4} cls {:.4} mode {:.4} min_ade {:?}",
            rec.epoch, rec.split, rec.total, rec.reg_pos, rec.reg_yaw, rec.cls, rec.mode, rec.min_ade
        );
    }
    println!("best_val_min_ade {:.4} in {:.1}s", out.best_val_min_ade, t0.elapsed().as_secs_f64());
}
