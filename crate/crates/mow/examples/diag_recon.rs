use mow_core::config::LATENT_CLASSES;
use mow_core::envsuite::Env;
use mow_core::numcore::ops;
use mow_core::rng::seeded;

fn main() {
    let (model, _) = mow::checkpoint::load(std::path::Path::new("/tmp/calib2-run/checkpoint")).unwrap();
    let suite = mow::orchestrator::build_suite(&model.cfg);
    for spec in suite.iter().take(2) {
        let mut env = Env::new(spec.clone());
        let mut err_agent = 0.0;
        let mut err_goal = 0.0;
        let mut err_bg = 0.0;
        let mut n = 0.0;
        for ep in 0..12 {
            let obs = env.reset(500 + ep);
            let frame = obs.to_tensor().reshape(&[1, 3, 16, 16]);
            let e = model.embed_row(spec.task_id);
            let cluster = model.cluster_of(spec.task_id).unwrap();
            let vae = model.vae(cluster);
            let logits = vae.encode_eval(&model.store, &frame, &e);
            let probs = ops::softmax_rows(&logits, LATENT_CLASSES);
            let mut rng = seeded(ep, "diag2");
            let z = mow_core::perceptual::sample_onehot(&probs, &mut rng).reshape(&[1, 1024]);
            let recon = vae.decode_eval(&model.store, &z, &e);
            // cell geometry: cell=2, off=2
            let cell_px = |cx: i32, cy: i32| -> Vec<usize> {
                let (x0, y0) = (2 + cx as usize * 2, 2 + cy as usize * 2);
                let mut v = Vec::new();
                for ch in 0..3 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            v.push(ch * 256 + (y0 + dy) * 16 + (x0 + dx));
                        }
                    }
                }
                v
            };
            let a = env.agent_pos();
            let g = env.goal_pos();
            let sq = |idx: &[usize]| -> f64 {
                idx.iter()
                    .map(|&i| (recon.data()[i] - frame.data()[i]).powi(2))
                    .sum::<f64>()
                    / idx.len() as f64
            };
            err_agent += sq(&cell_px(a.0, a.1));
            err_goal += sq(&cell_px(g.0, g.1));
            // a background cell away from both
            for cx in 0..6 {
                for cy in 0..6 {
                    if (cx, cy) != (a.0, a.1) && (cx, cy) != (g.0, g.1) {
                        err_bg += sq(&cell_px(cx, cy));
                        n += 1.0;
                        break;
                    }
                }
                break;
            }
        }
        println!(
            "task {}: recon MSE at agent cell {:.4}, goal cell {:.4}, background {:.4}",
            spec.task_id,
            err_agent / 12.0,
            err_goal / 12.0,
            err_bg / n
        );
    }
}
