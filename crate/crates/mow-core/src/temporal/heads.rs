//! Prediction heads: next-latent distribution, two-hot reward, continuation,
//! and the shared auxiliary task predictor.

use crate::config::{ModelConfig, LATENT_CLASSES, LATENT_FLAT, LATENT_VARS, NUM_BUCKETS};
use crate::numcore::{ops, ParamStore, Tape, Tensor, Var};
use crate::rng::MowRng;

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn insert_linear(store: &mut ParamStore, name: &str, fi: usize, fo: usize, rng: &mut MowRng) {
    let b = bound(fi);
    store.insert(&format!("{name}.w"), Tensor::uniform(&[fi, fo], b, rng));
    store.insert(&format!("{name}.b"), Tensor::uniform(&[fo], b, rng));
}

fn insert_linear_zero(store: &mut ParamStore, name: &str, fi: usize, fo: usize) {
    store.insert(&format!("{name}.w"), Tensor::zeros(&[fi, fo]));
    store.insert(&format!("{name}.b"), Tensor::zeros(&[fo]));
}

/// Install one cluster's dynamics/reward/continuation heads. The reward and
/// continuation output layers start at zero so fresh models predict zero
/// reward and an even continuation chance.
pub fn init_cluster_heads(store: &mut ParamStore, cluster: usize, cfg: &ModelConfig, rng: &mut MowRng) {
    let de = cfg.dim + cfg.embed_dim;
    let d = cfg.dim;
    let p = format!("head{cluster}");
    insert_linear(store, &format!("{p}.dyn"), de, LATENT_FLAT, rng);
    insert_linear(store, &format!("{p}.rew.l0"), de, d, rng);
    insert_linear(store, &format!("{p}.rew.l1"), d, d, rng);
    insert_linear_zero(store, &format!("{p}.rew.l2"), d, NUM_BUCKETS);
    insert_linear(store, &format!("{p}.con.l0"), de, d, rng);
    insert_linear(store, &format!("{p}.con.l1"), d, d, rng);
    insert_linear_zero(store, &format!("{p}.con.l2"), d, 1);
}

/// The task predictor is shared across clusters.
pub fn init_task_head(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut MowRng) {
    insert_linear(store, "head.task", cfg.dim, cfg.num_tasks, rng);
}

/// Head outputs on the tape, flattened over `[rows, ..]`.
pub struct HeadVars {
    pub dyn_logits: Var,  // [rows, 32, 32]
    pub rew_logits: Var,  // [rows, 255]
    pub con_logits: Var,  // [rows]
    pub task_logits: Var, // [rows, K]
}

fn linear_var(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = tape.param(store, &format!("{name}.w"));
    let b = tape.param(store, &format!("{name}.b"));
    let y = tape.matmul(x, w);
    tape.add_bias(y, b)
}

fn mlp3_var(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let h0 = linear_var(tape, store, &format!("{prefix}.l0"), x);
    let h0 = tape.relu(h0);
    let h1 = linear_var(tape, store, &format!("{prefix}.l1"), h0);
    let h1 = tape.relu(h1);
    linear_var(tape, store, &format!("{prefix}.l2"), h1)
}

/// Training heads on hidden states `h_flat [rows, D]` with embeddings
/// `e_flat [rows, E]`.
pub fn heads_train(
    tape: &mut Tape,
    store: &ParamStore,
    cluster: usize,
    h_flat: Var,
    e_flat: Var,
) -> HeadVars {
    let rows = tape.shape(h_flat)[0];
    let p = format!("head{cluster}");
    let he = tape.concat_last(&[h_flat, e_flat]);
    let dyn_flat = linear_var(tape, store, &format!("{p}.dyn"), he);
    let dyn_logits = tape.reshape(dyn_flat, &[rows, LATENT_VARS, LATENT_CLASSES]);
    let rew_logits = mlp3_var(tape, store, &format!("{p}.rew"), he);
    let con = mlp3_var(tape, store, &format!("{p}.con"), he);
    let con_logits = tape.reshape(con, &[rows]);
    let task_logits = linear_var(tape, store, "head.task", h_flat);
    HeadVars {
        dyn_logits,
        rew_logits,
        con_logits,
        task_logits,
    }
}

/// Plain-inference head outputs.
pub struct HeadEval {
    pub dyn_logits: Tensor,  // [rows, 32, 32]
    pub rew_logits: Tensor,  // [rows, 255]
    pub con_logits: Tensor,  // [rows]
    pub task_logits: Tensor, // [rows, K]
}

fn linear_eval(store: &ParamStore, name: &str, x: &Tensor) -> Tensor {
    let mut y = ops::matmul(x, store.get(&format!("{name}.w")));
    ops::add_bias_rows(y.data_mut(), store.get(&format!("{name}.b")).data());
    y
}

fn mlp3_eval(store: &ParamStore, prefix: &str, x: &Tensor) -> Tensor {
    let h0 = linear_eval(store, &format!("{prefix}.l0"), x).map(|v| v.max(0.0));
    let h1 = linear_eval(store, &format!("{prefix}.l1"), &h0).map(|v| v.max(0.0));
    linear_eval(store, &format!("{prefix}.l2"), &h1)
}

pub fn heads_eval(store: &ParamStore, cluster: usize, h_flat: &Tensor, e_flat: &Tensor) -> HeadEval {
    let rows = h_flat.dim(0);
    let p = format!("head{cluster}");
    let he = {
        let (d, e) = (h_flat.dim(1), e_flat.dim(1));
        let mut out = vec![0.0; rows * (d + e)];
        for r in 0..rows {
            out[r * (d + e)..r * (d + e) + d].copy_from_slice(&h_flat.data()[r * d..(r + 1) * d]);
            out[r * (d + e) + d..(r + 1) * (d + e)]
                .copy_from_slice(&e_flat.data()[r * e..(r + 1) * e]);
        }
        Tensor::new(&[rows, d + e], out)
    };
    let dyn_logits = linear_eval(store, &format!("{p}.dyn"), &he).reshape(&[
        rows,
        LATENT_VARS,
        LATENT_CLASSES,
    ]);
    let rew_logits = mlp3_eval(store, &format!("{p}.rew"), &he);
    let con_logits = mlp3_eval(store, &format!("{p}.con"), &he).reshape(&[rows]);
    let task_logits = linear_eval(store, "head.task", h_flat);
    HeadEval {
        dyn_logits,
        rew_logits,
        con_logits,
        task_logits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn head_dimensions_follow_the_reference_tables() {
        let cfg = ModelConfig::micro(3);
        let mut store = ParamStore::new();
        let mut rng = seeded(30, "heads");
        init_cluster_heads(&mut store, 0, &cfg, &mut rng);
        init_task_head(&mut store, &cfg, &mut rng);
        let de = cfg.dim + cfg.embed_dim;
        assert_eq!(store.get("head0.dyn.w").shape(), &[de, 1024]);
        assert_eq!(store.get("head0.rew.l2.w").shape(), &[cfg.dim, 255]);
        assert_eq!(store.get("head0.con.l2.w").shape(), &[cfg.dim, 1]);
        assert_eq!(store.get("head.task.w").shape(), &[cfg.dim, 3]);
    }

    #[test]
    fn train_and_eval_heads_agree() {
        let cfg = ModelConfig::micro(2);
        let mut store = ParamStore::new();
        let mut rng = seeded(31, "heads");
        init_cluster_heads(&mut store, 0, &cfg, &mut rng);
        init_task_head(&mut store, &cfg, &mut rng);
        let h = Tensor::gaussian(&[5, cfg.dim], 1.0, &mut rng);
        let e = Tensor::gaussian(&[5, cfg.embed_dim], 1.0, &mut rng);

        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let ev = tape.constant(e.clone());
        let out = heads_train(&mut tape, &store, 0, hv, ev);
        let eval = heads_eval(&store, 0, &h, &e);
        assert_eq!(tape.shape(out.dyn_logits), &[5, 32, 32]);
        for (a, b) in tape
            .value(out.rew_logits)
            .data()
            .iter()
            .zip(eval.rew_logits.data())
        {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape
            .value(out.task_logits)
            .data()
            .iter()
            .zip(eval.task_logits.data())
        {
            assert!((a - b).abs() < 1e-12);
        }
        // zero-initialized output layers start flat
        assert!(eval.rew_logits.data().iter().all(|&v| v == 0.0));
        assert!(eval.con_logits.data().iter().all(|&v| v == 0.0));
    }
}
