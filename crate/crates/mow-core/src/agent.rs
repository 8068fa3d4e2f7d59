//! Actor-critic trained purely in imagination: state assembly, λ-returns,
//! symlog two-hot critic with an EMA regularizer, and the entropy-regularized
//! actor surrogate with percentile advantage scaling.

use rand::Rng as _;

use crate::config::{ModelConfig, LATENT_FLAT};
use crate::error::Result;
use crate::losses::{cross_entropy_mean, BucketGrid};
use crate::model::MowModel;
use crate::numcore::{ops, ParamStore, Tape, Tensor, Var};
use crate::perceptual::sample_onehot;
use crate::rng::MowRng;
use crate::temporal::heads_eval;

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Shared actor: 3-layer MLP over the agent state emitting action logits.
/// The output layer starts at zero, so the initial policy is exactly uniform.
pub fn init_actor(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut MowRng) {
    let s = cfg.state_dim();
    let d = cfg.dim;
    let a = cfg.num_actions();
    let b0 = bound(s);
    store.insert("actor.l0.w", Tensor::uniform(&[s, d], b0, rng));
    store.insert("actor.l0.b", Tensor::uniform(&[d], b0, rng));
    let b1 = bound(d);
    store.insert("actor.l1.w", Tensor::uniform(&[d, d], b1, rng));
    store.insert("actor.l1.b", Tensor::uniform(&[d], b1, rng));
    store.insert("actor.l2.w", Tensor::zeros(&[d, a]));
    store.insert("actor.l2.b", Tensor::zeros(&[a]));
}

/// Per-cluster critic (255-bucket head, zero-initialized output) plus its
/// EMA shadow buffers.
pub fn init_critic(store: &mut ParamStore, cluster: usize, cfg: &ModelConfig, rng: &mut MowRng) {
    let s = cfg.state_dim();
    let d = cfg.dim;
    let p = format!("critic{cluster}");
    let b0 = bound(s);
    store.insert(&format!("{p}.l0.w"), Tensor::uniform(&[s, d], b0, rng));
    store.insert(&format!("{p}.l0.b"), Tensor::uniform(&[d], b0, rng));
    let b1 = bound(d);
    store.insert(&format!("{p}.l1.w"), Tensor::uniform(&[d, d], b1, rng));
    store.insert(&format!("{p}.l1.b"), Tensor::uniform(&[d], b1, rng));
    store.insert(&format!("{p}.l2.w"), Tensor::zeros(&[d, crate::config::NUM_BUCKETS]));
    store.insert(&format!("{p}.l2.b"), Tensor::zeros(&[crate::config::NUM_BUCKETS]));
    // EMA shadow mirrors the live weights
    for layer in ["l0", "l1", "l2"] {
        for suffix in ["w", "b"] {
            let src = store.get(&format!("{p}.{layer}.{suffix}")).clone();
            store.insert_buffer(&format!("{p}.ema.{layer}.{suffix}"), src);
        }
    }
}

/// `ψ_EMA ← decay·ψ_EMA + (1-decay)·ψ` for every critic layer.
pub fn ema_update(store: &mut ParamStore, cluster: usize, decay: f64) {
    assert!((0.0..=1.0).contains(&decay), "decay in [0,1]");
    let p = format!("critic{cluster}");
    for layer in ["l0", "l1", "l2"] {
        for suffix in ["w", "b"] {
            let live = store.get(&format!("{p}.{layer}.{suffix}")).clone();
            let ema = store.get_mut(&format!("{p}.ema.{layer}.{suffix}"));
            let ed = ema.data_mut();
            for (e, l) in ed.iter_mut().zip(live.data()) {
                *e = decay * *e + (1.0 - decay) * l;
            }
        }
    }
}

fn mlp3_eval(store: &ParamStore, prefix: &str, x: &Tensor) -> Tensor {
    let lin = |name: &str, x: &Tensor| -> Tensor {
        let mut y = ops::matmul(x, store.get(&format!("{name}.w")));
        ops::add_bias_rows(y.data_mut(), store.get(&format!("{name}.b")).data());
        y
    };
    let h0 = lin(&format!("{prefix}.l0"), x).map(|v| v.max(0.0));
    let h1 = lin(&format!("{prefix}.l1"), &h0).map(|v| v.max(0.0));
    lin(&format!("{prefix}.l2"), &h1)
}

fn mlp3_train(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let lin = |tape: &mut Tape, name: &str, x: Var| -> Var {
        let w = tape.param(store, &format!("{name}.w"));
        let b = tape.param(store, &format!("{name}.b"));
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    };
    let h0 = lin(tape, &format!("{prefix}.l0"), x);
    let h0 = tape.relu(h0);
    let h1 = lin(tape, &format!("{prefix}.l1"), h0);
    let h1 = tape.relu(h1);
    lin(tape, &format!("{prefix}.l2"), h1)
}

/// Action logits of the shared actor, inference path.
pub fn actor_logits_eval(store: &ParamStore, states: &Tensor) -> Tensor {
    mlp3_eval(store, "actor", states)
}

/// Action logits on the tape.
pub fn actor_logits_train(tape: &mut Tape, store: &ParamStore, states: Var) -> Var {
    mlp3_train(tape, store, "actor", states)
}

/// Critic bucket logits, inference path (`ema` picks the shadow weights).
pub fn critic_logits_eval(store: &ParamStore, cluster: usize, states: &Tensor, ema: bool) -> Tensor {
    let prefix = if ema {
        format!("critic{cluster}.ema")
    } else {
        format!("critic{cluster}")
    };
    mlp3_eval(store, &prefix, states)
}

/// Decoded scalar values of a critic over a batch of states.
pub fn critic_values(
    store: &ParamStore,
    cluster: usize,
    states: &Tensor,
    grid: &BucketGrid,
    ema: bool,
) -> Vec<f64> {
    let logits = critic_logits_eval(store, cluster, states, ema);
    let probs = ops::softmax_rows(&logits, grid.len());
    grid.decode_rows(&probs)
}

pub fn critic_logits_train(tape: &mut Tape, store: &ParamStore, cluster: usize, states: Var) -> Var {
    mlp3_train(tape, store, &format!("critic{cluster}"), states)
}

/// Deterministic concatenation `[z, h, e]`.
pub fn assemble_state(z: &Tensor, h: &Tensor, e: &Tensor) -> Tensor {
    let n = z.numel() + h.numel() + e.numel();
    let mut data = Vec::with_capacity(n);
    data.extend_from_slice(z.data());
    data.extend_from_slice(h.data());
    data.extend_from_slice(e.data());
    Tensor::new(&[n], data)
}

/// Batched assembly: `z [b,1024]`, `h [b,d]`, `e [E]` -> `[b, 1024+d+E]`.
pub fn assemble_states(z: &Tensor, h: &Tensor, e: &Tensor) -> Tensor {
    let b = z.dim(0);
    let (zf, hf, ef) = (z.dim(1), h.dim(1), e.numel());
    let s = zf + hf + ef;
    let mut data = vec![0.0; b * s];
    for r in 0..b {
        data[r * s..r * s + zf].copy_from_slice(&z.data()[r * zf..(r + 1) * zf]);
        data[r * s + zf..r * s + zf + hf].copy_from_slice(&h.data()[r * hf..(r + 1) * hf]);
        data[r * s + zf + hf..(r + 1) * s].copy_from_slice(e.data());
    }
    Tensor::new(&[b, s], data)
}

/// λ-returns by backward recursion. `rewards`, `continuations` have length H,
/// `values` length H+1 (the last entry is the terminal bootstrap). With
/// `strict_paper` the bootstrap term is weighted by λ instead of γ.
pub fn lambda_returns(
    rewards: &[f64],
    continuations: &[f64],
    values: &[f64],
    lambda: f64,
    gamma: f64,
    strict_paper: bool,
) -> Vec<f64> {
    let h = rewards.len();
    assert_eq!(continuations.len(), h);
    assert_eq!(values.len(), h + 1);
    assert!((0.0..=1.0).contains(&lambda), "lambda in [0,1]");
    assert!((0.0..1.0).contains(&gamma), "gamma in [0,1)");
    let lead = if strict_paper { lambda } else { gamma };
    let mut returns = vec![0.0; h + 1];
    returns[h] = values[h];
    for t in (0..h).rev() {
        let mix = (1.0 - lambda) * values[t + 1] + lambda * returns[t + 1];
        returns[t] = rewards[t] + lead * continuations[t] * mix;
    }
    returns.truncate(h);
    returns
}

/// Linear-interpolation percentile (q in [0, 100]).
pub fn percentile_linear(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let w = rank - lo as f64;
    v[lo] * (1.0 - w) + v[hi] * w
}

/// Advantage normalizer S: the 95th minus 5th percentile of the pooled
/// λ-returns (floored at 1 where it is used).
pub fn return_scale(returns: &[f64]) -> f64 {
    percentile_linear(returns, 95.0) - percentile_linear(returns, 5.0)
}

/// One task's imagined rollout: `states[t]` for t = 0..=H (the last is the
/// bootstrap state), actions/log-probs/rewards/continuations for t = 0..H.
pub struct ImaginedTrajectory {
    pub task_id: usize,
    pub batch: usize,
    pub states: Vec<Tensor>,       // H+1 of [b, state_dim]
    pub actions: Vec<Vec<usize>>,  // H of [b]
    pub log_probs: Vec<Vec<f64>>,  // H of [b]
    pub rewards: Vec<Vec<f64>>,    // H of [b] (decoded)
    pub continuations: Vec<Vec<f64>>, // H of [b] (sigmoid probabilities)
}

/// Roll `horizon` imagined steps for one task from encoded context windows.
/// The context posterior seeds the latent; afterwards latents are sampled
/// from the dynamics prior, actions from the actor, rewards/continuations
/// decoded from the heads. Inference mode: no dropout, running batch-norm
/// statistics, KV caches across the whole window.
pub fn imagine(
    model: &MowModel,
    ctx: &crate::envsuite::TrajectoryBatch,
    horizon: usize,
    rng: &mut MowRng,
) -> Result<ImaginedTrajectory> {
    imagine_with(model, ctx, horizon, None, rng)
}

/// As [`imagine`], optionally replaying a fixed action sequence
/// (`forced[t][b]`) instead of sampling from the actor.
pub fn imagine_with(
    model: &MowModel,
    ctx: &crate::envsuite::TrajectoryBatch,
    horizon: usize,
    forced: Option<&[Vec<usize>]>,
    rng: &mut MowRng,
) -> Result<ImaginedTrajectory> {
    let cfg = &model.cfg;
    let task = ctx.task_id;
    let cluster = model.cluster_of(task)?;
    let vae = model.vae(cluster);
    let e = model.embed_row(task);
    let e_flat = Tensor::new(&[1, cfg.embed_dim], e.data().to_vec());
    let decision = model.route_task(task, 1.0);
    let active = decision.active_sorted();
    let (b, c) = (ctx.batch, ctx.length);
    let na = cfg.num_actions();

    // encode the context and sample posterior latents
    let frames = ctx
        .obs
        .reshape(&[b * c, 3, cfg.obs.obs_size(), cfg.obs.obs_size()]);
    let logits = vae.encode_eval(&model.store, &frames, &e);
    let probs = ops::softmax_rows(&logits, crate::config::LATENT_CLASSES);
    let z_ctx = sample_onehot(&probs, rng); // [b*c, 32, 32]

    let mut caches = model.core.make_caches(b, c.saturating_sub(1) + horizon);

    // prime the cache with the first c-1 (z, a) tokens
    let mut h_cur = Tensor::zeros(&[b, cfg.dim]);
    if c > 1 {
        let mut z_prefix = vec![0.0; b * (c - 1) * LATENT_FLAT];
        let mut a_prefix = vec![0.0; b * (c - 1) * na];
        for bi in 0..b {
            for t in 0..c - 1 {
                let src = (bi * c + t) * LATENT_FLAT;
                let dst = (bi * (c - 1) + t) * LATENT_FLAT;
                z_prefix[dst..dst + LATENT_FLAT]
                    .copy_from_slice(&z_ctx.data()[src..src + LATENT_FLAT]);
                a_prefix[(bi * (c - 1) + t) * na + ctx.actions[bi * c + t] as usize] = 1.0;
            }
        }
        let z_prefix = Tensor::new(&[b, c - 1, LATENT_FLAT], z_prefix);
        let a_prefix = Tensor::new(&[b, c - 1, na], a_prefix);
        let h_seq = model.core.forward_infer(
            &model.store,
            &z_prefix,
            &a_prefix,
            &e,
            &active,
            Some(&mut caches),
        )?;
        // last position's hidden state
        h_cur = Tensor::from_fn(&[b, cfg.dim], |i| {
            let (bi, f) = (i / cfg.dim, i % cfg.dim);
            h_seq.data()[(bi * (c - 1) + (c - 2)) * cfg.dim + f]
        });
    }

    // current latent = the last context frame's posterior sample
    let mut z_cur = Tensor::from_fn(&[b, LATENT_FLAT], |i| {
        let (bi, f) = (i / LATENT_FLAT, i % LATENT_FLAT);
        z_ctx.data()[(bi * c + (c - 1)) * LATENT_FLAT + f]
    });

    let mut out = ImaginedTrajectory {
        task_id: task,
        batch: b,
        states: Vec::with_capacity(horizon + 1),
        actions: Vec::with_capacity(horizon),
        log_probs: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        continuations: Vec::with_capacity(horizon),
    };

    for step in 0..horizon {
        let state = assemble_states(&z_cur, &h_cur, &e);
        // actions: replayed when forced, sampled from the actor otherwise
        let logits = actor_logits_eval(&model.store, &state);
        let lsm = ops::log_softmax_rows(&logits, na);
        let mut acts = Vec::with_capacity(b);
        let mut lps = Vec::with_capacity(b);
        for bi in 0..b {
            let row = &lsm.data()[bi * na..(bi + 1) * na];
            let a = match forced {
                Some(f) => f[step][bi],
                None => {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    let mut cum = 0.0;
                    let mut a = na - 1;
                    for (i, &lp) in row.iter().enumerate() {
                        cum += lp.exp();
                        if u < cum {
                            a = i;
                            break;
                        }
                    }
                    a
                }
            };
            acts.push(a);
            lps.push(row[a]);
        }
        out.states.push(state);

        // one temporal step with the chosen actions
        let z_step = z_cur.reshape(&[b, 1, LATENT_FLAT]);
        let mut a1h = vec![0.0; b * na];
        for (bi, &a) in acts.iter().enumerate() {
            a1h[bi * na + a] = 1.0;
        }
        let a_step = Tensor::new(&[b, 1, na], a1h);
        let h_new = model.core.forward_infer(
            &model.store,
            &z_step,
            &a_step,
            &e,
            &active,
            Some(&mut caches),
        )?;
        let h_new = h_new.reshape(&[b, cfg.dim]);

        // heads: reward, continuation, next-latent prior
        let heads = heads_eval(&model.store, cluster, &h_new, &tile_rows(&e_flat, b));
        let rew_probs = ops::softmax_rows(&heads.rew_logits, model.grid.len());
        let rewards = model.grid.decode_rows(&rew_probs);
        let conts: Vec<f64> = heads
            .con_logits
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let prior_probs = ops::softmax_rows(&heads.dyn_logits, crate::config::LATENT_CLASSES);
        let z_next = sample_onehot(&prior_probs, rng).reshape(&[b, LATENT_FLAT]);

        out.actions.push(acts);
        out.log_probs.push(lps);
        out.rewards.push(rewards);
        out.continuations.push(conts);
        h_cur = h_new;
        z_cur = z_next;
    }
    // bootstrap state
    out.states.push(assemble_states(&z_cur, &h_cur, &e));
    Ok(out)
}

fn tile_rows(row: &Tensor, n: usize) -> Tensor {
    let f = row.numel();
    let mut out = vec![0.0; n * f];
    for r in 0..n {
        out[r * f..(r + 1) * f].copy_from_slice(row.data());
    }
    Tensor::new(&[n, f], out)
}

/// Flattened (state, action, return, value) rows pooled across tasks.
pub struct AgentBatch {
    pub states: Tensor,       // [n, state_dim]
    pub actions: Vec<usize>,  // n
    pub returns: Vec<f64>,    // n (λ-returns, targets)
    pub values: Vec<f64>,     // n (current critic values)
    pub clusters: Vec<usize>, // n (critic index per row)
}

/// λ-returns and value baselines for a batch of imagined trajectories.
pub fn agent_batch(model: &MowModel, trajs: &[ImaginedTrajectory]) -> Result<AgentBatch> {
    let cfg = &model.cfg;
    let s_dim = cfg.state_dim();
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut returns = Vec::new();
    let mut values = Vec::new();
    let mut clusters = Vec::new();
    for traj in trajs {
        let cluster = model.cluster_of(traj.task_id)?;
        let h = traj.actions.len();
        let b = traj.batch;
        // critic values for every step incl. the bootstrap state
        let mut v = vec![vec![0.0; b]; h + 1];
        for (t, state) in traj.states.iter().enumerate() {
            v[t] = critic_values(&model.store, cluster, state, &model.grid, false);
        }
        for bi in 0..b {
            let r: Vec<f64> = (0..h).map(|t| traj.rewards[t][bi]).collect();
            let c: Vec<f64> = (0..h).map(|t| traj.continuations[t][bi]).collect();
            let vv: Vec<f64> = (0..=h).map(|t| v[t][bi]).collect();
            let ret = lambda_returns(
                &r,
                &c,
                &vv,
                cfg.lambda,
                cfg.gamma(),
                cfg.strict_paper_lambda,
            );
            for t in 0..h {
                states.extend_from_slice(
                    &traj.states[t].data()[bi * s_dim..(bi + 1) * s_dim],
                );
                actions.push(traj.actions[t][bi]);
                returns.push(ret[t]);
                values.push(vv[t]);
                clusters.push(cluster);
            }
        }
    }
    let n = actions.len();
    Ok(AgentBatch {
        states: Tensor::new(&[n, s_dim], states),
        actions,
        returns,
        values,
        clusters,
    })
}

/// Actor surrogate on the tape: −sg((R−V)/max(1,S))·ln π(a|s) − η·H(π),
/// batch mean. Returns `(loss, entropy)` nodes.
pub fn actor_loss_var(
    tape: &mut Tape,
    store: &ParamStore,
    batch: &AgentBatch,
    eta: f64,
    num_actions: usize,
) -> (Var, Var) {
    let n = batch.actions.len();
    let scale = return_scale(&batch.returns).max(1.0);
    let adv: Vec<f64> = batch
        .returns
        .iter()
        .zip(&batch.values)
        .map(|(r, v)| (r - v) / scale)
        .collect();

    let states = tape.constant(batch.states.clone());
    let logits = actor_logits_train(tape, store, states);
    let lsm = tape.log_softmax(logits);
    let onehot = Tensor::from_fn(&[n, num_actions], |i| {
        if i % num_actions == batch.actions[i / num_actions] {
            1.0
        } else {
            0.0
        }
    });
    let oh = tape.constant(onehot);
    let picked = tape.mul(oh, lsm);
    let logp = tape.sum_last(picked); // [n]
    let adv_t = tape.constant(Tensor::new(&[n], adv));
    let weighted = tape.mul(adv_t, logp);
    let pg = tape.mean(weighted);
    let pg = tape.scale(pg, -1.0);

    let probs = tape.softmax(logits);
    let plogp = tape.mul(probs, lsm);
    let neg_ent_rows = tape.sum_last(plogp);
    let ent_mean = tape.mean(neg_ent_rows);
    let entropy = tape.scale(ent_mean, -1.0);

    let ent_term = tape.scale(entropy, -eta);
    (tape.add(pg, ent_term), entropy)
}

/// Critic loss on the tape: symlog two-hot cross-entropy against sg(R^λ)
/// plus `ema_reg` times the same loss against the EMA critic's decoded
/// values. Rows are grouped per cluster; the result is the global batch mean.
pub fn critic_loss_var(
    tape: &mut Tape,
    model: &MowModel,
    batch: &AgentBatch,
) -> Var {
    let n = batch.actions.len();
    let s_dim = model.cfg.state_dim();
    let mut total: Option<Var> = None;
    let mut clusters: Vec<usize> = batch.clusters.clone();
    clusters.sort_unstable();
    clusters.dedup();
    for cluster in clusters {
        let rows: Vec<usize> = (0..n).filter(|&i| batch.clusters[i] == cluster).collect();
        let m = rows.len();
        let mut sdata = vec![0.0; m * s_dim];
        let mut targets = Vec::with_capacity(m);
        for (ri, &i) in rows.iter().enumerate() {
            sdata[ri * s_dim..(ri + 1) * s_dim]
                .copy_from_slice(&batch.states.data()[i * s_dim..(i + 1) * s_dim]);
            targets.push(batch.returns[i]);
        }
        let states_t = Tensor::new(&[m, s_dim], sdata);
        let ema_vals = critic_values(&model.store, cluster, &states_t, &model.grid, true);

        let sv = tape.constant(states_t);
        let logits = critic_logits_train(tape, &model.store, cluster, sv);
        let ce_ret = cross_entropy_mean(tape, logits, model.grid.encode_rows(&targets));
        let ce_ema = cross_entropy_mean(tape, logits, model.grid.encode_rows(&ema_vals));
        let ce_ema = tape.scale(ce_ema, model.cfg.ema_reg);
        let loss = tape.add(ce_ret, ce_ema);
        let weighted = tape.scale(loss, m as f64 / n as f64);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    }
    total.expect("non-empty batch")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_assembly_is_ordered_and_stable() {
        let z = Tensor::new(&[2], vec![1.0, 2.0]);
        let h = Tensor::new(&[2], vec![3.0, 4.0]);
        let e = Tensor::new(&[1], vec![5.0]);
        let s = assemble_state(&z, &h, &e);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(assemble_state(&z, &h, &e), s);
        let zero = assemble_state(&Tensor::zeros(&[2]), &Tensor::zeros(&[2]), &Tensor::zeros(&[1]));
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn micro_state_dim_arithmetic() {
        let cfg = ModelConfig::micro(2);
        assert_eq!(cfg.state_dim(), 1024 + 64 + 96);
    }

    #[test]
    fn one_step_lambda_return_reference() {
        // r=1, c=1, V(s2)=0.5, gamma=0.997, lambda=0.95:
        // R1 = 1 + 0.997·(0.05·0.5 + 0.95·0.5) = 1.4985
        let r = lambda_returns(&[1.0], &[1.0], &[0.0, 0.5], 0.95, 0.997, false);
        assert!((r[0] - 1.4985).abs() < 1e-12);
    }

    #[test]
    fn termination_cuts_the_bootstrap() {
        let r = lambda_returns(
            &[0.5, 0.25, 1.0],
            &[0.0, 0.0, 0.0],
            &[9.0, 9.0, 9.0, 9.0],
            0.95,
            0.997,
            false,
        );
        assert_eq!(r, vec![0.5, 0.25, 1.0]);
    }

    #[test]
    fn lambda_zero_is_the_one_step_td_target() {
        let (g, r, c, v) = (0.9, [0.3, 0.7], [1.0, 1.0], [0.0, 2.0, 5.0]);
        let ret = lambda_returns(&r, &c, &v, 0.0, g, false);
        assert!((ret[0] - (0.3 + g * 2.0)).abs() < 1e-12);
        assert!((ret[1] - (0.7 + g * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_is_monte_carlo_with_terminal_bootstrap() {
        let g = 0.9;
        let r = [1.0, 0.0, 2.0];
        let c = [1.0, 1.0, 1.0];
        let v = [0.0, 0.0, 0.0, 4.0];
        let ret = lambda_returns(&r, &c, &v, 1.0, g, false);
        let expect0 = 1.0 + g * (0.0 + g * (2.0 + g * 4.0));
        assert!((ret[0] - expect0).abs() < 1e-12);
    }

    #[test]
    fn strict_paper_flag_swaps_the_leading_weight() {
        let r = [1.0];
        let c = [1.0];
        let v = [0.0, 0.5];
        let strict = lambda_returns(&r, &c, &v, 0.95, 0.997, true);
        assert!((strict[0] - (1.0 + 0.95 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn percentile_on_the_integer_ramp() {
        let vals: Vec<f64> = (0..=100).map(|v| v as f64).collect();
        assert_eq!(percentile_linear(&vals, 95.0), 95.0);
        assert_eq!(percentile_linear(&vals, 5.0), 5.0);
        assert_eq!(return_scale(&vals), 90.0);
        // constant returns floor to 1 where S is used
        let consts = vec![2.5; 10];
        assert_eq!(return_scale(&consts), 0.0);
        assert_eq!(return_scale(&consts).max(1.0), 1.0);
    }

    #[test]
    fn ema_update_reference_values() {
        let cfg = ModelConfig::micro(2);
        let mut store = ParamStore::new();
        let mut rng = crate::rng::seeded(60, "ema");
        init_critic(&mut store, 0, &cfg, &mut rng);
        // force live = 1, ema = 0 on one layer
        store.set("critic0.l1.w", Tensor::full(&[cfg.dim, cfg.dim], 1.0));
        store.set("critic0.ema.l1.w", Tensor::zeros(&[cfg.dim, cfg.dim]));
        ema_update(&mut store, 0, 0.98);
        let v = store.get("critic0.ema.l1.w").data()[0];
        assert!((v - 0.02).abs() < 1e-12);
        // decay = 1 leaves the shadow untouched
        store.set("critic0.ema.l1.w", Tensor::zeros(&[cfg.dim, cfg.dim]));
        ema_update(&mut store, 0, 1.0);
        assert_eq!(store.get("critic0.ema.l1.w").data()[0], 0.0);
        // geometric series after n updates from zero against constant c
        store.set("critic0.ema.l1.w", Tensor::zeros(&[cfg.dim, cfg.dim]));
        for _ in 0..17 {
            ema_update(&mut store, 0, 0.98);
        }
        let expect = 1.0 * (1.0 - 0.98f64.powi(17));
        assert!((store.get("critic0.ema.l1.w").data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_policy_maximizes_the_entropy_term() {
        // gradient of the entropy at uniform logits is zero; any bias makes
        // the entropy smaller
        let cfg = ModelConfig::micro(2);
        let mut store = ParamStore::new();
        let mut rng = crate::rng::seeded(61, "ent");
        init_actor(&mut store, &cfg, &mut rng);
        let n = 4;
        let states = Tensor::gaussian(&[n, cfg.state_dim()], 0.3, &mut rng);
        let batch = AgentBatch {
            states,
            actions: vec![0; n],
            returns: vec![0.0; n],
            values: vec![0.0; n],
            clusters: vec![0; n],
        };
        let mut tape = Tape::new();
        let (_, ent) = actor_loss_var(&mut tape, &store, &batch, 3e-4, cfg.num_actions());
        // zero-initialized output layer -> exactly uniform policy -> ln 5
        assert!((tape.value(ent).item() - (5.0f64).ln()).abs() < 1e-12);
    }
}
