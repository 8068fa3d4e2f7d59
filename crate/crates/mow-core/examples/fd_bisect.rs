use mow_core::config::ModelConfig;
use mow_core::envsuite::{make_suite, Env, ReplayBuffer};
use mow_core::model::MowModel;
use mow_core::numcore::{finite_diff_check, GradMap, ParamStore, Tape};
use mow_core::rng::{derive_seed, seeded};
use mow_core::trainer::{self, prefill_random, LatentPath, TaskRuntime};
use mow_core::Result;

fn main() {
    let mut cfg = ModelConfig::micro(2);
    cfg.wm_batch_length = 6;
    cfg.dropout = 0.0;
    let model = MowModel::init_replicated(cfg.clone(), 21).unwrap();
    let specs = make_suite(2, cfg.obs, 31);
    let mut rts: Vec<TaskRuntime> = specs.iter().map(|s| TaskRuntime::new(Env::new(s.clone()), derive_seed(31, &format!("env{}", s.task_id)))).collect();
    let mut bufs: Vec<ReplayBuffer> = specs.iter().map(|s| ReplayBuffer::new(s.task_id, 1000, 16, 16)).collect();
    prefill_random(&mut rts, &mut bufs, 80, derive_seed(31, "prefill")).unwrap();
    let batch = bufs[0].sample_trajectory(1, 6, 5).unwrap();
    let active = model.route_task(0, 2.0).active_sorted();

    let (frozen, frozen_sg) = {
        let mut rng = seeded(7, "fd-base");
        let mut tape = Tape::new();
        tape.freeze_capture();
        let built = trainer::build_task_loss(&mut tape, &model, &model.store, &batch, &active, 2.0, LatentPath::Sample(&mut rng), &mut None).unwrap();
        (built.st_pair, tape.take_frozen())
    };
    let wm = {
        let mut out = ParamStore::new();
        for (n, q) in model.store.iter() {
            if !n.starts_with("actor.") && !n.starts_with("critic") {
                if q.trainable { out.insert(n, q.tensor.clone()); } else { out.insert_buffer(n, q.tensor.clone()); }
            }
        }
        out
    };
    for (idx, name) in ["rec","rew","con","task","dyn","rep","total"].iter().enumerate() {
        let f = (
            |p: &ParamStore| -> Result<f64> {
                let mut tape = Tape::new();
                tape.freeze_replay(frozen_sg.clone());
                let b = trainer::build_task_loss(&mut tape, &model, p, &batch, &active, 2.0, LatentPath::Frozen(&frozen), &mut None)?;
                let var = if idx == 6 { b.total } else { b.comps[idx] };
                Ok(tape.value(var).item())
            },
            |p: &ParamStore| -> Result<GradMap> {
                let mut tape = Tape::new();
                tape.freeze_replay(frozen_sg.clone());
                let b = trainer::build_task_loss(&mut tape, &model, p, &batch, &active, 2.0, LatentPath::Frozen(&frozen), &mut None)?;
                let var = if idx == 6 { b.total } else { b.comps[idx] };
                Ok(tape.grads(var))
            },
        );
        for eps in [1e-5f64, 3e-5, 1e-4, 3e-4] {
            let mut rng = seeded(11, "fd");
            let err = finite_diff_check(&f, &wm, eps.min(1e-3), 40, &mut rng).unwrap();
            println!("{name} eps={eps:.0e}: {err:.3e}");
        }
    }
}
