use mow_core::config::{LATENT_CLASSES, LATENT_FLAT};
use mow_core::envsuite::Env;
use mow_core::numcore::{ops, Tensor};
use mow_core::rng::seeded;

fn main() {
    let (model, _) = mow::checkpoint::load(std::path::Path::new("/tmp/calib2-run/checkpoint")).unwrap();
    let cfg = model.cfg.clone();
    let suite = mow::orchestrator::build_suite(&cfg);
    use rand::Rng as _;

    for spec in &suite {
        // find a goal-ending episode of length >= 8, keep its last 8 steps
        let mut arng = seeded(5, "diag-act");
        let mut window: Option<(Vec<Vec<f64>>, Vec<u8>, Vec<f64>)> = None;
        'search: for ep in 0..400u64 {
            let mut env = Env::new(spec.clone());
            let mut obs = env.reset(1000 + ep);
            let mut frames = Vec::new();
            let mut acts = Vec::new();
            let mut rews = Vec::new();
            loop {
                let a = arng.gen_range(0..5usize);
                let tr = env.step(a).unwrap();
                frames.push(obs.pixels());
                acts.push(a as u8);
                rews.push(tr.reward);
                obs = tr.observation;
                if !tr.continuation {
                    if tr.reward > 0.5 && frames.len() >= 8 {
                        let n = frames.len();
                        window = Some((
                            frames[n - 8..].to_vec(),
                            acts[n - 8..].to_vec(),
                            rews[n - 8..].to_vec(),
                        ));
                        break 'search;
                    }
                    break;
                }
            }
        }
        let Some((frames, acts, rews)) = window else {
            println!("task {}: no goal episode found", spec.task_id);
            continue;
        };
        let mut obs_data = Vec::new();
        for f in &frames { obs_data.extend_from_slice(f); }
        let obs = Tensor::new(&[1, 8, 3, 16, 16], obs_data);
        let mut a1h = vec![0.0; 8 * 5];
        for (i, &a) in acts.iter().enumerate() { a1h[i * 5 + a as usize] = 1.0; }
        let actions = Tensor::new(&[1, 8, 5], a1h);

        let cluster = model.cluster_of(spec.task_id).unwrap();
        let vae = model.vae(cluster);
        let e = model.embed_row(spec.task_id);
        let logits = vae.encode_eval(&model.store, &obs.reshape(&[8, 3, 16, 16]), &e);
        let probs = ops::softmax_rows(&logits, LATENT_CLASSES);
        let mut rng = seeded(1, "diag");
        let z = mow_core::perceptual::sample_onehot(&probs, &mut rng).reshape(&[1, 8, LATENT_FLAT]);
        let decision = model.route_task(spec.task_id, 1.0);
        let h = model.core.forward_infer(&model.store, &z, &actions, &e, &decision.active_sorted(), None).unwrap();
        let h_flat = h.reshape(&[8, cfg.dim]);
        let e_rows = Tensor::from_fn(&[8, cfg.embed_dim], |i| e.data()[i % cfg.embed_dim]);
        let heads = mow_core::temporal::heads_eval(&model.store, cluster, &h_flat, &e_rows);
        let rew_probs = ops::softmax_rows(&heads.rew_logits, 255);
        let pred = model.grid.decode_rows(&rew_probs);
        let con: Vec<f64> = heads.con_logits.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        println!(
            "task {}: true r = {:?}\n        pred r = {:?}\n        pred c = {:?}",
            spec.task_id,
            rews,
            pred.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            con.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
    }
}
