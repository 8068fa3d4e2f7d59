use mow_core::config::ModelConfig;
use mow_core::envsuite::{make_suite, Env, ReplayBuffer};
use mow_core::model::MowModel;
use mow_core::trainer::*;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::micro(4);
    let mut model = MowModel::init(cfg.clone(), 11).unwrap();
    let specs = make_suite(4, cfg.obs, 5);
    let mut rts: Vec<TaskRuntime> = specs
        .iter()
        .map(|s| TaskRuntime::new(Env::new(s.clone()), s.task_id as u64))
        .collect();
    let mut bufs: Vec<ReplayBuffer> = specs
        .iter()
        .map(|s| ReplayBuffer::new(s.task_id, cfg.replay_capacity, 16, 16))
        .collect();
    prefill_random(&mut rts, &mut bufs, 200, 7).unwrap();

    // WM step timing
    let t0 = Instant::now();
    let n = 10;
    for step in 0..n {
        let mut batches = Vec::new();
        for buf in &bufs {
            batches.push(buf.sample_trajectory(cfg.wm_batch_size, cfg.wm_batch_length, step).unwrap());
        }
        wm_train_step(&mut model, &batches, 2.0, step).unwrap();
    }
    let wm_ms = t0.elapsed().as_millis() as f64 / n as f64;
    println!("wm step: {wm_ms:.1} ms");

    // imagination + agent step timing
    let t0 = Instant::now();
    for step in 0..n {
        let trajs = imagine_all(&model, &bufs, step).unwrap();
        agent_train_step(&mut model, &trajs).unwrap();
    }
    let ag_ms = t0.elapsed().as_millis() as f64 / n as f64;
    println!("agent step: {ag_ms:.1} ms");

    // collection timing
    let t0 = Instant::now();
    let mut rng = mow_core::rng::seeded(3, "bench");
    for _ in 0..n {
        for (rt, buf) in rts.iter_mut().zip(bufs.iter_mut()) {
            let a = act(&model, rt, ActionMode::Sample, &mut rng).unwrap();
            env_step_collect(rt, a, buf).unwrap();
        }
    }
    let col_ms = t0.elapsed().as_millis() as f64 / n as f64;
    println!("collect (4 tasks): {col_ms:.1} ms");
    println!("per-iteration estimate: {:.1} ms", wm_ms + ag_ms + col_ms);
    println!("30k iterations: {:.1} min", (wm_ms + ag_ms + col_ms) * 30_000.0 / 60_000.0);
}
