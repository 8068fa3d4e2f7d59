//! The gradient contract: every differentiable tape operation matches central
//! finite differences at relative error < 1e-4 on random micro inputs.

use mow_core::numcore::{finite_diff_check, GradMap, ParamStore, Tape, Tensor, Var};
use mow_core::rng::seeded;
use mow_core::Result;

/// Check one loss builder against finite differences.
fn check(name: &str, params: &ParamStore, build: &dyn Fn(&mut Tape, &ParamStore) -> Var) {
    let f = (
        |p: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new();
            let loss = build(&mut tape, p);
            Ok(tape.value(loss).item())
        },
        |p: &ParamStore| -> Result<GradMap> {
            let mut tape = Tape::new();
            let loss = build(&mut tape, p);
            Ok(tape.grads(loss))
        },
    );
    let mut rng = seeded(777, name);
    let err = finite_diff_check(&f, params, 1e-5, 40, &mut rng).unwrap();
    assert!(err < 1e-4, "{name}: max relative error {err}");
}

/// Weighted sum against a fixed probe so symmetric reductions don't hide bugs.
fn probe_loss(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let mut rng = seeded(seed, "probe");
    let r = tape.constant(Tensor::uniform(&shape, 1.0, &mut rng));
    let weighted = tape.mul(x, r);
    tape.sum(weighted)
}

fn params_1(shape: &[usize], seed: u64) -> ParamStore {
    let mut rng = seeded(seed, "params");
    let mut p = ParamStore::new();
    p.insert("w", Tensor::uniform(shape, 1.0, &mut rng));
    p
}

#[test]
fn elementwise_chain() {
    let params = params_1(&[3, 4], 1);
    check("elementwise", &params, &|tape, p| {
        let w = tape.param(p, "w");
        let a = tape.scale(w, 1.7);
        let b = tape.add_scalar(a, 0.3);
        let c = tape.mul(b, w);
        let d = tape.sub(c, w);
        let e = tape.add(d, b);
        probe_loss(tape, e, 2)
    });
}

#[test]
fn relu_exp_softplus() {
    let params = params_1(&[24], 2);
    check("relu_exp_softplus", &params, &|tape, p| {
        let w = tape.param(p, "w");
        let r = tape.relu(w);
        let e = tape.exp(w);
        let s = tape.softplus(w);
        let re = tape.add(r, e);
        let all = tape.add(re, s);
        probe_loss(tape, all, 3)
    });
}

#[test]
fn max_scalar_floor() {
    // Mixture of floored and live coordinates.
    let params = params_1(&[30], 3);
    check("max_scalar", &params, &|tape, p| {
        let w = tape.param(p, "w");
        let y = tape.max_scalar(w, 0.25);
        probe_loss(tape, y, 4)
    });
}

#[test]
fn softmax_and_log_softmax() {
    let params = params_1(&[4, 6], 4);
    check("softmax", &params, &|tape, p| {
        let w = tape.param(p, "w");
        let s = tape.softmax(w);
        probe_loss(tape, s, 5)
    });
    check("log_softmax", &params, &|tape, p| {
        let w = tape.param(p, "w");
        let s = tape.log_softmax(w);
        probe_loss(tape, s, 6)
    });
}

#[test]
fn normalize_sum_rows() {
    // Keep entries positive so row sums stay away from zero.
    let mut rng = seeded(5, "params");
    let mut params = ParamStore::new();
    params.insert("w", Tensor::from_fn(&[3, 5], |_| 0.5 + rng.gen_range(0.0..1.0)));
    use rand::Rng as _;
    check("normalize_sum", &params, &|tape, p| {
        let w = tape.param(p, "w");
        let y = tape.normalize_sum(w);
        probe_loss(tape, y, 7)
    });
}

#[test]
fn matmul_family() {
    let mut rng = seeded(6, "params");
    let mut params = ParamStore::new();
    params.insert("a", Tensor::uniform(&[3, 4], 1.0, &mut rng));
    params.insert("b", Tensor::uniform(&[4, 5], 1.0, &mut rng));
    check("matmul", &params, &|tape, p| {
        let a = tape.param(p, "a");
        let b = tape.param(p, "b");
        let c = tape.matmul(a, b);
        probe_loss(tape, c, 8)
    });

    let mut params = ParamStore::new();
    params.insert("a", Tensor::uniform(&[2, 3, 4], 1.0, &mut rng));
    params.insert("b", Tensor::uniform(&[2, 4, 5], 1.0, &mut rng));
    params.insert("bt", Tensor::uniform(&[2, 5, 4], 1.0, &mut rng));
    check("bmm", &params, &|tape, p| {
        let a = tape.param(p, "a");
        let b = tape.param(p, "b");
        let c = tape.bmm(a, b);
        probe_loss(tape, c, 9)
    });
    check("bmm_nt", &params, &|tape, p| {
        let a = tape.param(p, "a");
        let bt = tape.param(p, "bt");
        let c = tape.bmm_nt(a, bt);
        probe_loss(tape, c, 10)
    });
}

#[test]
fn bias_tile_concat_slice() {
    let mut rng = seeded(7, "params");
    let mut params = ParamStore::new();
    params.insert("x", Tensor::uniform(&[4, 3], 1.0, &mut rng));
    params.insert("b", Tensor::uniform(&[3], 1.0, &mut rng));
    params.insert("e", Tensor::uniform(&[2], 1.0, &mut rng));
    check("bias_tile_concat_slice", &params, &|tape, p| {
        let x = tape.param(p, "x");
        let b = tape.param(p, "b");
        let e = tape.param(p, "e");
        let xb = tape.add_bias(x, b);
        let et = tape.tile(e, 4); // [4,2]
        let cat = tape.concat_last(&[xb, et]); // [4,5]
        let rows = tape.slice_rows(cat, 1, 2); // [2,5]
        let resh = tape.reshape(rows, &[2, 5]);
        probe_loss(tape, resh, 11)
    });
}

#[test]
fn slice_time_and_permute() {
    let mut rng = seeded(8, "params");
    let mut params = ParamStore::new();
    params.insert("x", Tensor::uniform(&[2, 5, 3], 1.0, &mut rng));
    check("slice_time_permute", &params, &|tape, p| {
        let x = tape.param(p, "x");
        let mid = tape.slice_time(x, 1, 3); // [2,3,3]
        let perm = tape.permute(mid, &[1, 0, 2]); // [3,2,3]
        probe_loss(tape, perm, 12)
    });
}

#[test]
fn reductions() {
    let params = params_1(&[3, 4], 9);
    check("sum_last", &params, &|tape, p| {
        let w = tape.param(p, "w");
        let s = tape.sum_last(w);
        probe_loss(tape, s, 13)
    });
    check("mean", &params, &|tape, p| {
        let w = tape.param(p, "w");
        let sq = tape.mul(w, w);
        tape.mean(sq)
    });
}

#[test]
fn conv2d_gradients() {
    let mut rng = seeded(10, "params");
    let mut params = ParamStore::new();
    params.insert("x", Tensor::uniform(&[2, 3, 6, 6], 1.0, &mut rng));
    params.insert("w", Tensor::uniform(&[4, 3, 4, 4], 0.5, &mut rng));
    params.insert("b", Tensor::uniform(&[4], 0.5, &mut rng));
    check("conv2d", &params, &|tape, p| {
        let x = tape.param(p, "x");
        let w = tape.param(p, "w");
        let b = tape.param(p, "b");
        let y = tape.conv2d(x, w, b, 2, 1);
        probe_loss(tape, y, 14)
    });
}

#[test]
fn conv_transpose2d_gradients() {
    let mut rng = seeded(11, "params");
    let mut params = ParamStore::new();
    params.insert("x", Tensor::uniform(&[2, 4, 3, 3], 1.0, &mut rng));
    params.insert("w", Tensor::uniform(&[4, 3, 4, 4], 0.5, &mut rng));
    params.insert("b", Tensor::uniform(&[3], 0.5, &mut rng));
    check("conv_transpose2d", &params, &|tape, p| {
        let x = tape.param(p, "x");
        let w = tape.param(p, "w");
        let b = tape.param(p, "b");
        let y = tape.conv_transpose2d(x, w, b, 2, 1);
        probe_loss(tape, y, 15)
    });
}

#[test]
fn batchnorm_gradients() {
    let mut rng = seeded(12, "params");
    let mut params = ParamStore::new();
    params.insert("x", Tensor::uniform(&[3, 2, 4, 4], 1.0, &mut rng));
    params.insert("g", Tensor::from_fn(&[2], |_| 1.0 + 0.1 * rng.gen_range(-1.0..1.0)));
    params.insert("b", Tensor::uniform(&[2], 0.2, &mut rng));
    use rand::Rng as _;
    check("batchnorm2d", &params, &|tape, p| {
        let x = tape.param(p, "x");
        let g = tape.param(p, "g");
        let b = tape.param(p, "b");
        let y = tape.batchnorm(x, g, b, 1e-5);
        probe_loss(tape, y, 16)
    });

    let mut params = ParamStore::new();
    params.insert("x", Tensor::uniform(&[6, 5], 1.0, &mut rng));
    params.insert("g", Tensor::full(&[5], 1.0));
    params.insert("b", Tensor::zeros(&[5]));
    check("batchnorm1d", &params, &|tape, p| {
        let x = tape.param(p, "x");
        let g = tape.param(p, "g");
        let b = tape.param(p, "b");
        let y = tape.batchnorm(x, g, b, 1e-5);
        probe_loss(tape, y, 17)
    });
}

#[test]
fn layernorm_gradients() {
    let mut rng = seeded(13, "params");
    let mut params = ParamStore::new();
    params.insert("x", Tensor::uniform(&[4, 6], 1.0, &mut rng));
    params.insert("g", Tensor::from_fn(&[6], |_| 1.0 + 0.1 * rng.gen_range(-1.0..1.0)));
    params.insert("b", Tensor::uniform(&[6], 0.2, &mut rng));
    use rand::Rng as _;
    check("layernorm", &params, &|tape, p| {
        let x = tape.param(p, "x");
        let g = tape.param(p, "g");
        let b = tape.param(p, "b");
        let y = tape.layernorm(x, g, b);
        probe_loss(tape, y, 18)
    });
}

#[test]
fn bce_with_logits_gradients() {
    let mut rng = seeded(14, "params");
    let mut params = ParamStore::new();
    params.insert("x", Tensor::uniform(&[12], 2.0, &mut rng));
    let targets = Tensor::from_fn(&[12], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    check("bce_with_logits", &params, &|tape, p| {
        let x = tape.param(p, "x");
        let l = tape.bce_with_logits(x, targets.clone());
        tape.mean(l)
    });
}

#[test]
fn dropout_with_fixed_mask() {
    let mut rng = seeded(15, "params");
    let params = params_1(&[5, 4], 15);
    let mask = Tensor::from_fn(&[5, 4], |_| {
        use rand::Rng as _;
        if rng.gen_bool(0.2) {
            0.0
        } else {
            1.0 / 0.8
        }
    });
    check("dropout", &params, &|tape, p| {
        let w = tape.param(p, "w");
        let y = tape.dropout(w, mask.clone());
        probe_loss(tape, y, 19)
    });
}

#[test]
fn straight_through_surrogate_path() {
    // The straight-through surrogate z(w) = onehot0 + probs(w) - probs0 is the
    // function whose exact gradient the ST backward computes; finite
    // differences on it must therefore agree with the analytic gradient.
    let mut rng = seeded(16, "params");
    let mut params = ParamStore::new();
    params.insert("w", Tensor::uniform(&[4, 4], 1.0, &mut rng));

    // base-point sample (fixed across fd evaluations)
    let base_probs = {
        let mut tape = Tape::new();
        let w = tape.param(&params, "w");
        let probs = tape.softmax(w);
        tape.value(probs).clone()
    };
    let onehot0 = Tensor::from_fn(&[4, 4], |i| if i % 4 == (i / 4) % 4 { 1.0 } else { 0.0 });

    check("straight_through_surrogate", &params, &|tape, p| {
        let w = tape.param(p, "w");
        let probs = tape.softmax(w);
        let pv = tape.value(probs).clone();
        let surrogate = Tensor::from_fn(&[4, 4], |i| {
            onehot0.data()[i] + pv.data()[i] - base_probs.data()[i]
        });
        let z = tape.straight_through(probs, surrogate);
        probe_loss(tape, z, 20)
    });
}

#[test]
fn attention_shaped_composite() {
    // A miniature causal attention block built from the primitives.
    let mut rng = seeded(17, "params");
    let (b, t, h, dh) = (2, 4, 2, 3);
    let d = h * dh;
    let mut params = ParamStore::new();
    params.insert("x", Tensor::uniform(&[b, t, d], 1.0, &mut rng));
    params.insert("wq", Tensor::uniform(&[d, d], 0.5, &mut rng));
    params.insert("wk", Tensor::uniform(&[d, d], 0.5, &mut rng));
    params.insert("wv", Tensor::uniform(&[d, d], 0.5, &mut rng));

    let mask = Tensor::from_fn(&[b * h, t, t], |i| {
        let (r, c) = ((i / t) % t, i % t);
        if c > r {
            -1e30
        } else {
            0.0
        }
    });

    check("attention_composite", &params, &|tape, p| {
        let x = tape.param(p, "x");
        let flat = tape.reshape(x, &[b * t, d]);
        let heads = |tape: &mut Tape, w: Var, flat: Var| {
            let y = tape.matmul(flat, w);
            let y = tape.reshape(y, &[b, t, h, dh]);
            let y = tape.permute(y, &[0, 2, 1, 3]);
            tape.reshape(y, &[b * h, t, dh])
        };
        let wq = tape.param(p, "wq");
        let wk = tape.param(p, "wk");
        let wv = tape.param(p, "wv");
        let q = heads(tape, wq, flat);
        let k = heads(tape, wk, flat);
        let v = heads(tape, wv, flat);
        let scores = tape.bmm_nt(q, k);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let m = tape.constant(mask.clone());
        let masked = tape.add(scaled, m);
        let attn = tape.softmax(masked);
        let ctx = tape.bmm(attn, v);
        probe_loss(tape, ctx, 21)
    });
}
