//! Post-norm causal Transformer blocks: training forward on the tape and a
//! plain inference forward with optional KV caching.

use crate::error::{Error, Result};
use crate::numcore::{ops, ParamStore, Tape, Tensor, Var};
use crate::rng::MowRng;

/// Dropout context for training-mode forwards.
pub struct Dropout<'a> {
    pub rng: &'a mut MowRng,
    pub p: f64,
}

impl Dropout<'_> {
    fn mask(&mut self, shape: &[usize]) -> Tensor {
        use rand::Rng as _;
        let keep = 1.0 - self.p;
        Tensor::from_fn(shape, |_| {
            if self.rng.gen_bool(self.p) {
                0.0
            } else {
                1.0 / keep
            }
        })
    }
}

fn apply_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Var {
    match dropout {
        Some(d) if d.p > 0.0 => {
            let mask = d.mask(tape.shape(x));
            tape.dropout(x, mask)
        }
        _ => x,
    }
}

pub fn init_stack_params(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    layers: usize,
    rng: &mut MowRng,
) {
    let b = 1.0 / (dim as f64).sqrt();
    let b2 = 1.0 / ((2 * dim) as f64).sqrt();
    for l in 0..layers {
        let p = format!("{prefix}.blk{l}");
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}.attn.{name}.w"), Tensor::uniform(&[dim, dim], b, rng));
            store.insert(&format!("{p}.attn.{name}.b"), Tensor::uniform(&[dim], b, rng));
        }
        store.insert(&format!("{p}.ln1.gamma"), Tensor::full(&[dim], 1.0));
        store.insert(&format!("{p}.ln1.beta"), Tensor::zeros(&[dim]));
        store.insert(&format!("{p}.ffn.w1.w"), Tensor::uniform(&[dim, 2 * dim], b, rng));
        store.insert(&format!("{p}.ffn.w1.b"), Tensor::uniform(&[2 * dim], b, rng));
        store.insert(&format!("{p}.ffn.w2.w"), Tensor::uniform(&[2 * dim, dim], b2, rng));
        store.insert(&format!("{p}.ffn.w2.b"), Tensor::uniform(&[dim], b2, rng));
        store.insert(&format!("{p}.ln2.gamma"), Tensor::full(&[dim], 1.0));
        store.insert(&format!("{p}.ln2.beta"), Tensor::zeros(&[dim]));
    }
}

fn linear_var(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = tape.param(store, &format!("{name}.w"));
    let b = tape.param(store, &format!("{name}.b"));
    let y = tape.matmul(x, w);
    tape.add_bias(y, b)
}

/// Causal additive mask `[groups, t, t]`.
fn causal_mask(groups: usize, t: usize) -> Tensor {
    Tensor::from_fn(&[groups, t, t], |i| {
        let r = (i / t) % t;
        let c = i % t;
        if c > r {
            -1e30
        } else {
            0.0
        }
    })
}

/// One post-norm block on the tape: MHSA + Linear + Dropout + residual + LN,
/// then FFN (2D expansion) + Dropout + residual + LN.
fn block_train(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
    dropout: &mut Option<Dropout<'_>>,
) -> Var {
    let shape = tape.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;

    let flat = tape.reshape(x, &[b * t, d]);
    let to_heads = |tape: &mut Tape, y: Var| {
        let y = tape.reshape(y, &[b, t, heads, dh]);
        let y = tape.permute(y, &[0, 2, 1, 3]);
        tape.reshape(y, &[b * heads, t, dh])
    };
    let q = linear_var(tape, store, &format!("{prefix}.attn.wq"), flat);
    let q = to_heads(tape, q);
    let k = linear_var(tape, store, &format!("{prefix}.attn.wk"), flat);
    let k = to_heads(tape, k);
    let v = linear_var(tape, store, &format!("{prefix}.attn.wv"), flat);
    let v = to_heads(tape, v);

    let scores = tape.bmm_nt(q, k);
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let mask = tape.constant(causal_mask(b * heads, t));
    let masked = tape.add(scaled, mask);
    let attn = tape.softmax(masked);
    let attn = apply_dropout(tape, attn, dropout);
    let ctx = tape.bmm(attn, v);
    let ctx = tape.reshape(ctx, &[b, heads, t, dh]);
    let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
    let ctx = tape.reshape(ctx, &[b * t, d]);

    let proj = linear_var(tape, store, &format!("{prefix}.attn.wo"), ctx);
    let proj = apply_dropout(tape, proj, dropout);
    let proj = tape.reshape(proj, &[b, t, d]);
    let res1 = tape.add(x, proj);
    let g1 = tape.param(store, &format!("{prefix}.ln1.gamma"));
    let b1 = tape.param(store, &format!("{prefix}.ln1.beta"));
    let x2 = tape.layernorm(res1, g1, b1);

    let flat2 = tape.reshape(x2, &[b * t, d]);
    let h1 = linear_var(tape, store, &format!("{prefix}.ffn.w1"), flat2);
    let h1 = tape.relu(h1);
    let h2 = linear_var(tape, store, &format!("{prefix}.ffn.w2"), h1);
    let h2 = apply_dropout(tape, h2, dropout);
    let h2 = tape.reshape(h2, &[b, t, d]);
    let res2 = tape.add(x2, h2);
    let g2 = tape.param(store, &format!("{prefix}.ln2.gamma"));
    let b2 = tape.param(store, &format!("{prefix}.ln2.beta"));
    tape.layernorm(res2, g2, b2)
}

/// Full training stack: `layers` blocks over `[b, t, d]`.
pub fn stack_train(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
    layers: usize,
    dropout: &mut Option<Dropout<'_>>,
) -> Var {
    let mut y = x;
    for l in 0..layers {
        y = block_train(tape, store, &format!("{prefix}.blk{l}"), y, heads, dropout);
    }
    y
}

/// Per-layer key/value cache for one Transformer stack. Appending new
/// positions never mutates earlier entries.
pub struct StackCache {
    k: Vec<Tensor>, // [b, heads, capacity, dh] per layer
    v: Vec<Tensor>,
    len: usize,
    capacity: usize,
}

impl StackCache {
    pub fn new(layers: usize, batch: usize, heads: usize, capacity: usize, dh: usize) -> Self {
        let zero = || Tensor::zeros(&[batch, heads, capacity, dh]);
        Self {
            k: (0..layers).map(|_| zero()).collect(),
            v: (0..layers).map(|_| zero()).collect(),
            len: 0,
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Raw cache planes of one layer (testing hook for the append-only
    /// invariant).
    pub fn layer_kv(&self, layer: usize) -> (&Tensor, &Tensor) {
        (&self.k[layer], &self.v[layer])
    }

    fn append(&mut self, layer: usize, b: usize, h: usize, rows: &[f64], dh: usize, new: usize, value: bool) {
        let cap = self.capacity;
        let t = if value { &mut self.v[layer] } else { &mut self.k[layer] };
        let heads = t.dim(1);
        let base = ((b * heads + h) * cap + self.len) * dh;
        t.data_mut()[base..base + new * dh].copy_from_slice(rows);
    }
}

fn linear_eval(store: &ParamStore, name: &str, x: &Tensor) -> Tensor {
    let mut y = ops::matmul(x, store.get(&format!("{name}.w")));
    ops::add_bias_rows(y.data_mut(), store.get(&format!("{name}.b")).data());
    y
}

fn ln_eval(store: &ParamStore, name: &str, x: &Tensor) -> Tensor {
    let f = *x.shape().last().unwrap();
    let (y, _, _) = ops::layernorm_fwd(
        x,
        f,
        store.get(&format!("{name}.gamma")).data(),
        store.get(&format!("{name}.beta")).data(),
        1e-5,
    );
    y
}

/// Inference forward over `layers` blocks. With a cache, the `l` new tokens
/// are appended after `cache.len()` and attend to everything cached; without
/// one, plain causal attention over the given sequence.
pub fn stack_infer(
    store: &ParamStore,
    prefix: &str,
    x: &Tensor,
    heads: usize,
    layers: usize,
    mut cache: Option<&mut StackCache>,
) -> Result<Tensor> {
    let (b, l, d) = (x.dim(0), x.dim(1), x.dim(2));
    let dh = d / heads;
    if let Some(c) = cache.as_ref() {
        if c.len + l > c.capacity {
            return Err(Error::CacheOverflow {
                len: c.len + l,
                capacity: c.capacity,
            });
        }
    }
    let mut y = x.clone();
    for layer in 0..layers {
        let p = format!("{prefix}.blk{layer}");
        let flat = y.reshape(&[b * l, d]);
        let q = linear_eval(store, &format!("{p}.attn.wq"), &flat);
        let k = linear_eval(store, &format!("{p}.attn.wk"), &flat);
        let v = linear_eval(store, &format!("{p}.attn.wv"), &flat);

        let past = cache.as_ref().map(|c| c.len).unwrap_or(0);
        let total = past + l;
        // gather keys/values per (batch, head): cached prefix plus new rows
        let mut ctx = vec![0.0; b * l * d];
        for bi in 0..b {
            for h in 0..heads {
                // new rows for this (b,h): from [b*l, d] via head offset
                let pick = |src: &Tensor, ti: usize| -> Vec<f64> {
                    src.data()[(bi * l + ti) * d + h * dh..(bi * l + ti) * d + (h + 1) * dh].to_vec()
                };
                let mut k_all = vec![0.0; total * dh];
                let mut v_all = vec![0.0; total * dh];
                if let Some(c) = cache.as_ref() {
                    let cap = c.capacity;
                    let kbase = ((bi * heads + h) * cap) * dh;
                    k_all[..past * dh].copy_from_slice(&c.k[layer].data()[kbase..kbase + past * dh]);
                    v_all[..past * dh].copy_from_slice(&c.v[layer].data()[kbase..kbase + past * dh]);
                }
                for ti in 0..l {
                    k_all[(past + ti) * dh..(past + ti + 1) * dh].copy_from_slice(&pick(&k, ti));
                    v_all[(past + ti) * dh..(past + ti + 1) * dh].copy_from_slice(&pick(&v, ti));
                }
                // scores [l, total]
                let mut scores = vec![0.0; l * total];
                for ti in 0..l {
                    let qrow = &q.data()[(bi * l + ti) * d + h * dh..(bi * l + ti) * d + (h + 1) * dh];
                    for s in 0..total {
                        if s > past + ti {
                            scores[ti * total + s] = f64::NEG_INFINITY;
                            continue;
                        }
                        let krow = &k_all[s * dh..(s + 1) * dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        scores[ti * total + s] = dot / (dh as f64).sqrt();
                    }
                }
                // softmax rows then mix values
                for ti in 0..l {
                    let row = &mut scores[ti * total..(ti + 1) * total];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                    let out = &mut ctx[(bi * l + ti) * d + h * dh..(bi * l + ti) * d + (h + 1) * dh];
                    for (s, &p_) in row.iter().enumerate() {
                        if p_ == 0.0 {
                            continue;
                        }
                        for (o, kv) in out.iter_mut().zip(&v_all[s * dh..(s + 1) * dh]) {
                            *o += p_ * kv;
                        }
                    }
                }
                // stash new rows into the cache
                if let Some(c) = cache.as_deref_mut() {
                    let mut krows = vec![0.0; l * dh];
                    let mut vrows = vec![0.0; l * dh];
                    for ti in 0..l {
                        krows[ti * dh..(ti + 1) * dh].copy_from_slice(&pick(&k, ti));
                        vrows[ti * dh..(ti + 1) * dh].copy_from_slice(&pick(&v, ti));
                    }
                    c.append(layer, bi, h, &krows, dh, l, false);
                    c.append(layer, bi, h, &vrows, dh, l, true);
                }
            }
        }
        let ctx = Tensor::new(&[b * l, d], ctx);
        let proj = linear_eval(store, &format!("{p}.attn.wo"), &ctx);
        let res1 = flat.zip_map(&proj, |a, b| a + b);
        let x2 = ln_eval(store, &format!("{p}.ln1"), &res1);
        let h1 = linear_eval(store, &format!("{p}.ffn.w1"), &x2).map(|v| v.max(0.0));
        let h2 = linear_eval(store, &format!("{p}.ffn.w2"), &h1);
        let res2 = x2.zip_map(&h2, |a, b| a + b);
        y = ln_eval(store, &format!("{p}.ln2"), &res2).reshape(&[b, l, d]);
    }
    if let Some(c) = cache {
        c.len += l;
    }
    Ok(y)
}
