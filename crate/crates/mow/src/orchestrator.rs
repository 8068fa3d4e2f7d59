//! End-to-end training: random collection, offline warmup, gradient
//! clustering and replication, then interleaved world-model/agent updates
//! with metrics, checkpoints, and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use mow_core::agent;
use mow_core::clustering::{self, GradientFingerprint};
use mow_core::config::{LATENT_CLASSES, LATENT_FLAT};
use mow_core::envsuite::{make_suite_custom, Env, ReplayBuffer, TaskSpec, TrajectoryBatch};
use mow_core::model::MowModel;
use mow_core::numcore::Tensor;
use mow_core::rng::{derive_seed, seeded};
use mow_core::temporal::anneal_temperature;
use mow_core::trainer::{
    act, agent_train_step, env_step, env_step_collect, imagine_all, prefill_random, warmup_train,
    ActionMode, TaskRuntime,
};
use mow_core::ModelConfig;

use crate::checkpoint::{self, TrainState};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRecord, MetricsWriter, TaskLossRecord};

/// The synthetic suite a config describes.
pub fn build_suite(cfg: &ModelConfig) -> Vec<TaskSpec> {
    make_suite_custom(
        cfg.num_tasks,
        cfg.obs,
        cfg.grid_size,
        cfg.max_episode_steps,
        derive_seed(cfg.seed, "suite"),
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskEval {
    pub task_id: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskEval>,
}

impl EvalReport {
    pub fn mean_success(&self) -> f64 {
        if self.per_task.is_empty() {
            return 0.0;
        }
        self.per_task.iter().map(|t| t.success_rate).sum::<f64>() / self.per_task.len() as f64
    }
}

/// Roll `episodes` real episodes per task; deterministic in `seed`. Greedy
/// mode is the evaluation protocol; sampling mode exists for baseline
/// comparisons against the random policy.
pub fn evaluate(
    model: &MowModel,
    episodes: usize,
    seed: u64,
    mode: ActionMode,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    if episodes == 0 {
        return Ok(report);
    }
    let suite = build_suite(&model.cfg);
    for spec in suite {
        let task_id = spec.task_id;
        let mut rt = TaskRuntime::new(
            Env::new(spec),
            derive_seed(seed, &format!("eval-env{task_id}")),
        );
        let mut rng = seeded(seed, &format!("eval-act{task_id}"));
        let mut returns = Vec::with_capacity(episodes);
        while returns.len() < episodes {
            let a = act(model, &mut rt, mode, &mut rng)?;
            if let Some(ret) = env_step(&mut rt, a, None)? {
                returns.push(ret);
            }
        }
        let mean = returns.iter().sum::<f64>() / episodes as f64;
        let success = returns.iter().filter(|&&r| r >= 1.0).count() as f64 / episodes as f64;
        report.per_task.push(TaskEval {
            task_id,
            mean_return: mean,
            success_rate: success,
            episodes,
        });
    }
    Ok(report)
}

/// A single within-episode window of `length` random-policy steps for one
/// task: frames, executed actions, rewards, continuations. Deterministic in
/// `seed`; model-independent, so trained and untrained models can be scored
/// on identical contexts.
pub fn collect_window(spec: &TaskSpec, length: usize, seed: u64) -> Result<TrajectoryBatch> {
    use rand::Rng as _;
    let hw = spec.obs.obs_size();
    let mut rng = seeded(seed, &format!("window-task{}", spec.task_id));
    for attempt in 0..500u64 {
        let mut env = Env::new(spec.clone());
        let mut obs = env.reset(derive_seed(seed, &format!("window-ep{attempt}")));
        let mut frames: Vec<Vec<f64>> = Vec::new();
        let mut actions: Vec<u8> = Vec::new();
        let mut rewards = Vec::new();
        let mut conts = Vec::new();
        loop {
            let a = rng.gen_range(0..mow_core::envsuite::NUM_ACTIONS);
            let tr = env.step(a)?;
            frames.push(obs.pixels());
            actions.push(a as u8);
            rewards.push(tr.reward);
            conts.push(tr.continuation as u8 as f64);
            obs = tr.observation;
            if frames.len() == length {
                let mut data = Vec::with_capacity(length * 3 * hw * hw);
                for f in &frames {
                    data.extend_from_slice(f);
                }
                return Ok(TrajectoryBatch {
                    task_id: spec.task_id,
                    batch: 1,
                    length,
                    obs: Tensor::new(&[1, length, 3, hw, hw], data),
                    actions,
                    rewards: Tensor::new(&[1, length], rewards),
                    continuations: Tensor::new(&[1, length], conts),
                });
            }
            if !env_continues(&env) {
                break;
            }
        }
    }
    Err(Error::Invalid(format!(
        "no {length}-step window found for task {} in 500 episodes",
        spec.task_id
    )))
}

fn env_continues(env: &Env) -> bool {
    !env.is_done()
}

/// One sample of Fig-2-style imagination: real frames, posterior context
/// reconstructions, imagined decodes, and the per-frame MSE of the imagined
/// segment.
pub struct ImaginedStrip {
    pub real: Vec<Tensor>,
    pub recon: Vec<Tensor>,
    pub per_frame_mse: Vec<f64>,
}

/// Encode a context, replay the recorded actions through the dynamics prior,
/// and decode the imagined latents.
pub fn imagine_strip(model: &MowModel, window: &TrajectoryBatch, seed: u64) -> Result<ImaginedStrip> {
    let cfg = &model.cfg;
    let c = cfg.imag_context;
    let h = window.length - c;
    assert!(h >= 1, "window shorter than the context");
    let hw = cfg.obs.obs_size();
    let frame = 3 * hw * hw;
    let cluster = model.cluster_of(window.task_id)?;
    let vae = model.vae(cluster);
    let e = model.embed_row(window.task_id);

    // sub-batch: the context rows
    let ctx = TrajectoryBatch {
        task_id: window.task_id,
        batch: 1,
        length: c,
        obs: Tensor::new(
            &[1, c, 3, hw, hw],
            window.obs.data()[..c * frame].to_vec(),
        ),
        actions: window.actions[..c].to_vec(),
        rewards: Tensor::new(&[1, c], window.rewards.data()[..c].to_vec()),
        continuations: Tensor::new(&[1, c], window.continuations.data()[..c].to_vec()),
    };
    let forced: Vec<Vec<usize>> = (0..h)
        .map(|t| vec![window.actions[c - 1 + t] as usize])
        .collect();
    let mut rng = seeded(seed, "imagine-strip");
    let traj = agent::imagine_with(model, &ctx, h, Some(&forced), &mut rng)?;

    // real frames
    let real: Vec<Tensor> = (0..window.length)
        .map(|t| {
            Tensor::new(
                &[3, hw, hw],
                window.obs.data()[t * frame..(t + 1) * frame].to_vec(),
            )
        })
        .collect();

    // posterior-mode reconstructions of the context
    let mut recon = Vec::with_capacity(window.length);
    let ctx_frames = ctx.obs.reshape(&[c, 3, hw, hw]);
    let logits = vae.encode_eval(&model.store, &ctx_frames, &e);
    let z_mode = argmax_onehot(&logits);
    let dec = vae.decode_eval(&model.store, &z_mode.reshape(&[c, LATENT_FLAT]), &e);
    for t in 0..c {
        recon.push(Tensor::new(
            &[3, hw, hw],
            dec.data()[t * frame..(t + 1) * frame].to_vec(),
        ));
    }
    // imagined decodes: states[1..=h] carry the imagined latents
    let mut per_frame_mse = Vec::with_capacity(h);
    let s_dim = cfg.state_dim();
    for t in 1..=h {
        let state = &traj.states[t];
        debug_assert_eq!(state.shape(), &[1, s_dim]);
        let z = Tensor::new(&[1, LATENT_FLAT], state.data()[..LATENT_FLAT].to_vec());
        let dec = vae.decode_eval(&model.store, &z, &e);
        let real_t = &real[c + t - 1];
        let mse = dec
            .data()
            .iter()
            .zip(real_t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / frame as f64;
        per_frame_mse.push(mse);
        recon.push(dec.reshape(&[3, hw, hw]));
    }
    Ok(ImaginedStrip {
        real,
        recon,
        per_frame_mse,
    })
}

fn argmax_onehot(logits: &Tensor) -> Tensor {
    let classes = LATENT_CLASSES;
    let mut out = vec![0.0; logits.numel()];
    for (r, row) in logits.data().chunks(classes).enumerate() {
        let mut best = 0;
        for i in 1..classes {
            if row[i] > row[best] {
                best = i;
            }
        }
        out[r * classes + best] = 1.0;
    }
    Tensor::new(logits.shape(), out)
}

/// Mean imagined-frame MSE over `count` seeded random-policy windows.
pub fn imagination_mse(model: &MowModel, spec: &TaskSpec, count: usize, seed: u64) -> Result<f64> {
    let cfg = &model.cfg;
    let len = cfg.imag_context + cfg.imag_horizon;
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..count {
        let window = collect_window(spec, len, derive_seed(seed, &format!("mse-{i}")))?;
        let strip = imagine_strip(model, &window, derive_seed(seed, &format!("mse-roll-{i}")))?;
        total += strip.per_frame_mse.iter().sum::<f64>();
        n += strip.per_frame_mse.len();
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Serialize)]
pub struct ImagSampleStats {
    pub per_frame_mse: Vec<f64>,
    pub mean_mse: f64,
}

#[derive(Serialize)]
pub struct ImagReport {
    pub task_id: usize,
    pub context: usize,
    pub horizon: usize,
    pub samples: Vec<ImagSampleStats>,
    pub mean_mse: f64,
}

/// `count` strips plus a JSON stats file under `out_dir`.
pub fn export_imagination(
    model: &MowModel,
    task: usize,
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<ImagReport> {
    let cfg = &model.cfg;
    std::fs::create_dir_all(out_dir)?;
    let suite = build_suite(cfg);
    let spec = suite
        .into_iter()
        .find(|s| s.task_id == task)
        .ok_or_else(|| Error::Invalid(format!("task {task} out of range")))?;
    let len = cfg.imag_context + cfg.imag_horizon;
    let mut samples = Vec::new();
    let mut total = 0.0;
    for i in 0..count {
        let window = collect_window(&spec, len, derive_seed(seed, &format!("export-{i}")))?;
        let strip = imagine_strip(model, &window, derive_seed(seed, &format!("export-roll-{i}")))?;
        crate::viz::save_strip(
            &out_dir.join(format!("task{task}_sample{i}.png")),
            &[strip.real.clone(), strip.recon.clone()],
            4,
        )?;
        let mean = strip.per_frame_mse.iter().sum::<f64>() / strip.per_frame_mse.len() as f64;
        total += mean;
        samples.push(ImagSampleStats {
            per_frame_mse: strip.per_frame_mse,
            mean_mse: mean,
        });
    }
    let report = ImagReport {
        task_id: task,
        context: cfg.imag_context,
        horizon: cfg.imag_horizon,
        mean_mse: if count > 0 { total / count as f64 } else { 0.0 },
        samples,
    };
    std::fs::write(
        out_dir.join(format!("task{task}_stats.json")),
        serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(report)
}

/// Fingerprint similarity matrix plus the frozen assignment, as JSON.
pub fn cluster_report_json(model: &MowModel, state: &TrainState) -> serde_json::Value {
    let sim = state.fingerprints.as_ref().map(|fps| {
        let fps: Vec<GradientFingerprint> = fps
            .iter()
            .enumerate()
            .map(|(task_id, values)| GradientFingerprint {
                task_id,
                values: values.clone(),
            })
            .collect();
        clustering::similarity_matrix(&fps)
    });
    serde_json::json!({
        "num_tasks": model.cfg.num_tasks,
        "num_clusters": model.clusters,
        "assignment": model.assignment.as_slice(),
        "fingerprint_similarity": sim,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub env_steps: usize,
    pub warmup_first_objective: f64,
    pub warmup_last_objective: f64,
    pub assignment: Vec<usize>,
    pub final_eval: EvalReport,
    pub final_mean_success: f64,
    pub wall_seconds: f64,
    pub checkpoint_dir: PathBuf,
}

/// Algorithm-1 training: collect → warmup → cluster/replicate → interleaved
/// world-model and agent updates. Writes `config.toml`, `metrics.jsonl`,
/// `metrics.csv`, `summary.json`, and a checkpoint directory under `out`.
pub fn train(cfg: &ModelConfig, out: &Path, verbose: bool) -> Result<TrainSummary> {
    cfg.validate().map_err(Error::Core)?;
    std::fs::create_dir_all(out)?;
    crate::configfile::save_config(cfg, &out.join("config.toml"))?;
    let started = Instant::now();

    let suite = build_suite(cfg);
    let mut model = MowModel::init(cfg.clone(), derive_seed(cfg.seed, "model"))?;
    let mut runtimes: Vec<TaskRuntime> = suite
        .iter()
        .map(|s| {
            TaskRuntime::new(
                Env::new(s.clone()),
                derive_seed(cfg.seed, &format!("env{}", s.task_id)),
            )
        })
        .collect();
    let mut buffers: Vec<ReplayBuffer> = suite
        .iter()
        .map(|s| {
            ReplayBuffer::new(
                s.task_id,
                cfg.replay_capacity,
                cfg.obs.obs_size(),
                cfg.obs.obs_size(),
            )
        })
        .collect();
    let mut metrics = MetricsWriter::create(&out.join("metrics.jsonl"))?;

    // 1. random-policy prefill, then top up until every buffer is warm
    prefill_random(&mut runtimes, &mut buffers, cfg.prefill_steps, derive_seed(cfg.seed, "prefill"))?;
    {
        use rand::Rng as _;
        let mut rng = seeded(cfg.seed, "prefill-top-up");
        let mut guard = 0usize;
        while buffers.iter().any(|b| !b.is_warm(cfg.wm_batch_length)) {
            for (rt, buf) in runtimes.iter_mut().zip(buffers.iter_mut()) {
                let a = rng.gen_range(0..mow_core::envsuite::NUM_ACTIONS);
                env_step_collect(rt, a, buf)?;
            }
            guard += 1;
            if guard > 100_000 {
                return Err(Error::Invalid("prefill never produced warm buffers".into()));
            }
        }
    }
    if verbose {
        println!(
            "[mow] prefill done: {} transitions per task",
            buffers[0].len()
        );
    }

    // 2. offline warmup on frozen buffers
    let schedule_total = cfg.warmup_steps + cfg.total_env_steps * cfg.wm_updates_per_step;
    let warmup = warmup_train(
        &mut model,
        &buffers,
        cfg.warmup_steps,
        schedule_total,
        derive_seed(cfg.seed, "warmup"),
    )?;
    let (warmup_first, warmup_last) = (
        warmup.first().map(|o| o.objective).unwrap_or(0.0),
        warmup.last().map(|o| o.objective).unwrap_or(0.0),
    );
    for (i, o) in warmup.iter().enumerate() {
        if i % cfg.log_every.max(1) == 0 || i + 1 == warmup.len() {
            metrics.append(&outcome_record(i, "warmup", o, None, &runtimes, None))?;
        }
    }
    if verbose {
        println!("[mow] warmup: objective {warmup_first:.3} -> {warmup_last:.3}");
    }

    // 3. fingerprints, clustering, replication
    let fps: Vec<GradientFingerprint> = buffers
        .iter()
        .map(|buf| clustering::fingerprint(&model, buf, derive_seed(cfg.seed, "fingerprint")))
        .collect::<mow_core::Result<_>>()?;
    let assignment = clustering::cluster_tasks(&fps, cfg.num_clusters, derive_seed(cfg.seed, "cluster"))?;
    clustering::replicate_modules(&mut model, assignment.clone());
    if verbose {
        println!("[mow] cluster assignment: {:?}", assignment.as_slice());
    }
    let mut state = TrainState {
        env_step: 0,
        fingerprints: Some(fps.iter().map(|f| f.values.clone()).collect()),
        ..Default::default()
    };

    // 4. interleaved training
    let ckpt_dir = out.join("checkpoint");
    let mut collect_rng = seeded(cfg.seed, "collect");
    let mut wm_step_count = 0usize;
    for step in 0..cfg.total_env_steps {
        // collect one transition per task
        for (rt, buf) in runtimes.iter_mut().zip(buffers.iter_mut()) {
            let a = act(&model, rt, ActionMode::Sample, &mut collect_rng)?;
            env_step_collect(rt, a, buf)?;
        }
        // world-model updates
        let mut last_wm = None;
        for u in 0..cfg.wm_updates_per_step {
            let temperature = anneal_temperature(
                (cfg.warmup_steps + wm_step_count).min(schedule_total),
                schedule_total,
                cfg.tau0,
            );
            let step_seed = derive_seed(cfg.seed, &format!("wm-{step}-{u}"));
            let mut batches = Vec::with_capacity(buffers.len());
            for buf in &buffers {
                let s = derive_seed(step_seed, &format!("task{}", buf.task_id()));
                batches.push(buf.sample_trajectory(cfg.wm_batch_size, cfg.wm_batch_length, s)?);
            }
            last_wm = Some(mow_core::trainer::wm_train_step(
                &mut model,
                &batches,
                temperature,
                step_seed,
            )?);
            wm_step_count += 1;
        }
        // agent updates in imagination
        let mut last_agent = None;
        for u in 0..cfg.agent_updates_per_step {
            let step_seed = derive_seed(cfg.seed, &format!("agent-{step}-{u}"));
            let trajs = imagine_all(&model, &buffers, step_seed)?;
            last_agent = Some(agent_train_step(&mut model, &trajs)?);
        }
        state.env_step = step + 1;

        if step % cfg.log_every.max(1) == 0 {
            if let Some(wm) = &last_wm {
                metrics.append(&outcome_record(
                    cfg.warmup_steps + step,
                    "train",
                    wm,
                    last_agent.as_ref(),
                    &runtimes,
                    None,
                ))?;
            }
        }
        let do_eval = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if do_eval {
            let eval = evaluate(
                &model,
                cfg.eval_episodes.min(24).max(1),
                derive_seed(cfg.seed, &format!("eval-{step}")),
                ActionMode::Greedy,
            )?;
            let mut mses = Vec::new();
            for spec in &suite {
                mses.push(imagination_mse(
                    &model,
                    spec,
                    2,
                    derive_seed(cfg.seed, &format!("imagmse-{step}-{}", spec.task_id)),
                )?);
            }
            if verbose {
                let succ: Vec<String> = eval
                    .per_task
                    .iter()
                    .map(|t| format!("{:.0}%", t.success_rate * 100.0))
                    .collect();
                println!(
                    "[mow] step {}/{} success {} entropy {:.3} wall {:.0}s",
                    step + 1,
                    cfg.total_env_steps,
                    succ.join("/"),
                    last_agent.as_ref().map(|a| a.entropy).unwrap_or(f64::NAN),
                    started.elapsed().as_secs_f64(),
                );
            }
            if let Some(wm) = &last_wm {
                let mut rec = outcome_record(
                    cfg.warmup_steps + step,
                    "eval",
                    wm,
                    last_agent.as_ref(),
                    &runtimes,
                    Some(mses),
                );
                for (te, t) in eval.per_task.iter().zip(rec.episode_returns.iter_mut()) {
                    *t = Some(te.mean_return);
                }
                metrics.append(&rec)?;
            }
            state.episode_counters = runtimes.iter().map(|r| r.finished_returns.len() as u64).collect();
            state.rngs.insert("collect".into(), mow_core::rng::save_state(&collect_rng));
            checkpoint::save(&model, &state, &ckpt_dir)?;
        }
    }

    // 5. final evaluation, checkpoint, exports
    let final_eval = evaluate(
        &model,
        cfg.eval_episodes,
        derive_seed(cfg.seed, "final-eval"),
        ActionMode::Greedy,
    )?;
    state.rngs.insert("collect".into(), mow_core::rng::save_state(&collect_rng));
    checkpoint::save(&model, &state, &ckpt_dir)?;
    crate::metrics::export_csv(&out.join("metrics.jsonl"), &out.join("metrics.csv"))?;
    let summary = TrainSummary {
        env_steps: cfg.total_env_steps,
        warmup_first_objective: warmup_first,
        warmup_last_objective: warmup_last,
        assignment: model.assignment.as_slice().to_vec(),
        final_mean_success: final_eval.mean_success(),
        final_eval,
        wall_seconds: started.elapsed().as_secs_f64(),
        checkpoint_dir: ckpt_dir,
    };
    std::fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    if verbose {
        println!(
            "[mow] done in {:.0}s; mean success {:.1}%",
            summary.wall_seconds,
            summary.final_mean_success * 100.0
        );
    }
    Ok(summary)
}

fn outcome_record(
    step: usize,
    phase: &str,
    wm: &mow_core::trainer::WmStepOutcome,
    agent: Option<&mow_core::trainer::AgentStepOutcome>,
    runtimes: &[TaskRuntime],
    imag_mse: Option<Vec<f64>>,
) -> MetricsRecord {
    MetricsRecord {
        step,
        phase: phase.to_string(),
        per_task: wm
            .per_task
            .iter()
            .map(|b| TaskLossRecord {
                rec: b.rec,
                rew: b.rew,
                con: b.con,
                task: b.task,
                dyn_: b.dyn_,
                rep: b.rep,
                total: b.total,
            })
            .collect(),
        sigmas: wm.sigmas.clone(),
        balance: wm.balance,
        objective: wm.objective,
        wm_grad_norm: wm.grad_norm,
        router: wm.decisions.iter().map(|d| d.active_sorted()).collect(),
        actor_loss: agent.map(|a| a.actor_loss),
        critic_loss: agent.map(|a| a.critic_loss),
        entropy: agent.map(|a| a.entropy),
        mean_return: agent.map(|a| a.mean_return),
        episode_returns: runtimes
            .iter()
            .map(|r| {
                let tail = &r.finished_returns[r.finished_returns.len().saturating_sub(32)..];
                if tail.is_empty() {
                    None
                } else {
                    Some(tail.iter().sum::<f64>() / tail.len() as f64)
                }
            })
            .collect(),
        imag_mse,
    }
}
