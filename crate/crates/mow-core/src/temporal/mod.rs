//! Temporal module: per-expert action mixers, task-level routing, expert and
//! shared Transformer stacks, prediction heads, and KV-cached inference.

pub mod heads;
pub mod router;
pub mod transformer;

pub use heads::{heads_eval, heads_train, HeadEval, HeadVars};
pub use router::{anneal_temperature, route, route_weights_var, RouterDecision};
pub use transformer::{stack_infer, stack_train, Dropout, StackCache};

use crate::config::{ModelConfig, LATENT_FLAT};
use crate::error::Result;
use crate::numcore::{ops, ParamStore, Tape, Tensor, Var};
use crate::rng::MowRng;

const POS_EXPERT: &str = "temporal.pos_expert";
const POS_SHARED: &str = "temporal.pos_shared";

/// The mixture dynamics core: N_e action mixers and expert stacks feeding a
/// shared stack through a learned reshaping projection.
#[derive(Clone, Copy)]
pub struct MixtureCore {
    pub dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_experts: usize,
    pub num_actions: usize,
    pub active: usize,
    pub max_positions: usize,
}

impl MixtureCore {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            dim: cfg.dim,
            embed_dim: cfg.embed_dim,
            heads: cfg.heads,
            layers: cfg.layers,
            num_experts: cfg.num_experts,
            num_actions: cfg.num_actions(),
            active: cfg.active_experts,
            max_positions: cfg.max_positions(),
        }
    }

    /// Mixer input width: flattened latent + one-hot action + embedding.
    pub fn mixer_input(&self) -> usize {
        LATENT_FLAT + self.num_actions + self.embed_dim
    }

    /// Shared-stack input width before the learned reshape.
    pub fn shared_input(&self) -> usize {
        self.active * self.dim + self.embed_dim
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut MowRng) {
        let d = self.dim;
        for j in 0..self.num_experts {
            let fi = self.mixer_input();
            let b = 1.0 / (fi as f64).sqrt();
            store.insert(&format!("mixer{j}.l1.w"), Tensor::uniform(&[fi, d], b, rng));
            store.insert(&format!("mixer{j}.l1.b"), Tensor::uniform(&[d], b, rng));
            store.insert(&format!("mixer{j}.ln1.gamma"), Tensor::full(&[d], 1.0));
            store.insert(&format!("mixer{j}.ln1.beta"), Tensor::zeros(&[d]));
            let b2 = 1.0 / (d as f64).sqrt();
            store.insert(&format!("mixer{j}.l2.w"), Tensor::uniform(&[d, d], b2, rng));
            store.insert(&format!("mixer{j}.l2.b"), Tensor::uniform(&[d], b2, rng));
            store.insert(&format!("mixer{j}.ln2.gamma"), Tensor::full(&[d], 1.0));
            store.insert(&format!("mixer{j}.ln2.beta"), Tensor::zeros(&[d]));
            transformer::init_stack_params(store, &format!("expert{j}"), d, self.layers, rng);
        }
        let si = self.shared_input();
        let b = 1.0 / (si as f64).sqrt();
        store.insert("shared.proj.w", Tensor::uniform(&[si, d], b, rng));
        store.insert("shared.proj.b", Tensor::uniform(&[d], b, rng));
        transformer::init_stack_params(store, "shared", d, self.layers, rng);
        store.insert(POS_EXPERT, Tensor::gaussian(&[self.max_positions, d], 0.02, rng));
        store.insert(POS_SHARED, Tensor::gaussian(&[self.max_positions, d], 0.02, rng));
    }

    fn mix_train(&self, tape: &mut Tape, store: &ParamStore, j: usize, cat: Var) -> Var {
        let l1 = {
            let w = tape.param(store, &format!("mixer{j}.l1.w"));
            let b = tape.param(store, &format!("mixer{j}.l1.b"));
            let y = tape.matmul(cat, w);
            tape.add_bias(y, b)
        };
        let g = tape.param(store, &format!("mixer{j}.ln1.gamma"));
        let bt = tape.param(store, &format!("mixer{j}.ln1.beta"));
        let n1 = tape.layernorm(l1, g, bt);
        let a1 = tape.relu(n1);
        let l2 = {
            let w = tape.param(store, &format!("mixer{j}.l2.w"));
            let b = tape.param(store, &format!("mixer{j}.l2.b"));
            let y = tape.matmul(a1, w);
            tape.add_bias(y, b)
        };
        let g = tape.param(store, &format!("mixer{j}.ln2.gamma"));
        let bt = tape.param(store, &format!("mixer{j}.ln2.beta"));
        let n2 = tape.layernorm(l2, g, bt);
        tape.relu(n2)
    }

    fn mix_eval(&self, store: &ParamStore, j: usize, cat: &Tensor) -> Tensor {
        let lin = |name: &str, x: &Tensor| -> Tensor {
            let mut y = ops::matmul(x, store.get(&format!("{name}.w")));
            ops::add_bias_rows(y.data_mut(), store.get(&format!("{name}.b")).data());
            y
        };
        let ln = |name: &str, x: &Tensor| -> Tensor {
            let f = *x.shape().last().unwrap();
            let (y, _, _) = ops::layernorm_fwd(
                x,
                f,
                store.get(&format!("{name}.gamma")).data(),
                store.get(&format!("{name}.beta")).data(),
                1e-5,
            );
            y
        };
        let h = ln(&format!("mixer{j}.ln1"), &lin(&format!("mixer{j}.l1"), cat)).map(|v| v.max(0.0));
        ln(&format!("mixer{j}.ln2"), &lin(&format!("mixer{j}.l2"), &h)).map(|v| v.max(0.0))
    }

    /// Training forward over `[b, t]` windows: latents `[b,t,1024]`, one-hot
    /// actions `[b,t,A]`, one embedding row `[1,E]`; `active` must be sorted.
    /// Returns hidden states `[b, t, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        actions: Var,
        embed: Var,
        active: &[usize],
        dropout: &mut Option<Dropout<'_>>,
    ) -> Var {
        let shape = tape.shape(z).to_vec();
        let (b, t) = (shape[0], shape[1]);
        debug_assert!(active.windows(2).all(|w| w[0] < w[1]), "active must be sorted");
        assert_eq!(active.len(), self.active, "activated expert count");
        assert!(t <= self.max_positions, "sequence beyond positional table");

        let z_flat = tape.reshape(z, &[b * t, LATENT_FLAT]);
        let a_flat = tape.reshape(actions, &[b * t, self.num_actions]);
        let e_row = tape.reshape(embed, &[self.embed_dim]);
        let e_flat = tape.tile(e_row, b * t);
        let cat = tape.concat_last(&[z_flat, a_flat, e_flat]);

        let pos_table = tape.param(store, POS_EXPERT);
        let pos = tape.slice_rows(pos_table, 0, t);
        let pos = tape.tile(pos, b);
        let mut outs = Vec::with_capacity(active.len());
        for &j in active {
            let m = self.mix_train(tape, store, j, cat);
            let m3 = tape.reshape(m, &[b, t, self.dim]);
            let x = tape.add(m3, pos);
            let y = transformer::stack_train(
                tape,
                store,
                &format!("expert{j}"),
                x,
                self.heads,
                self.layers,
                dropout,
            );
            outs.push(y);
        }
        let e3 = tape.reshape(e_flat, &[b, t, self.embed_dim]);
        let mut parts = outs;
        parts.push(e3);
        let cat2 = tape.concat_last(&parts);
        let cat2 = tape.reshape(cat2, &[b * t, self.shared_input()]);
        let proj = {
            let w = tape.param(store, "shared.proj.w");
            let bb = tape.param(store, "shared.proj.b");
            let y = tape.matmul(cat2, w);
            tape.add_bias(y, bb)
        };
        let proj = tape.reshape(proj, &[b, t, self.dim]);
        let pos_table = tape.param(store, POS_SHARED);
        let pos = tape.slice_rows(pos_table, 0, t);
        let pos = tape.tile(pos, b);
        let x = tape.add(proj, pos);
        transformer::stack_train(tape, store, "shared", x, self.heads, self.layers, dropout)
    }

    /// Inference forward: appends `l` tokens to the caches (or recomputes the
    /// whole sequence when `caches` is `None`) and returns `[b, l, d]`.
    pub fn forward_infer(
        &self,
        store: &ParamStore,
        z: &Tensor,
        actions: &Tensor,
        embed_row: &Tensor,
        active: &[usize],
        mut caches: Option<&mut MixtureKvCache>,
    ) -> Result<Tensor> {
        let (b, l) = (z.dim(0), z.dim(1));
        debug_assert!(active.windows(2).all(|w| w[0] < w[1]), "active must be sorted");
        let pos0 = caches.as_ref().map(|c| c.len()).unwrap_or(0);

        // concat (z, a, e) rows
        let fi = self.mixer_input();
        let mut cat = vec![0.0; b * l * fi];
        for r in 0..b * l {
            cat[r * fi..r * fi + LATENT_FLAT]
                .copy_from_slice(&z.data()[r * LATENT_FLAT..(r + 1) * LATENT_FLAT]);
            cat[r * fi + LATENT_FLAT..r * fi + LATENT_FLAT + self.num_actions]
                .copy_from_slice(&actions.data()[r * self.num_actions..(r + 1) * self.num_actions]);
            cat[r * fi + LATENT_FLAT + self.num_actions..(r + 1) * fi]
                .copy_from_slice(embed_row.data());
        }
        let cat = Tensor::new(&[b * l, fi], cat);

        let pos_e = store.get(POS_EXPERT);
        let add_pos = |x: &Tensor, table: &Tensor| -> Tensor {
            let d = self.dim;
            let mut out = x.data().to_vec();
            for bi in 0..b {
                for ti in 0..l {
                    let row = &table.data()[(pos0 + ti) * d..(pos0 + ti + 1) * d];
                    for f in 0..d {
                        out[(bi * l + ti) * d + f] += row[f];
                    }
                }
            }
            Tensor::new(&[b, l, d], out)
        };

        let mut outs = Vec::with_capacity(active.len());
        for (slot, &j) in active.iter().enumerate() {
            let m = self.mix_eval(store, j, &cat).reshape(&[b, l, self.dim]);
            let x = add_pos(&m, pos_e);
            let cache = caches.as_deref_mut().map(|c| &mut c.experts[slot]);
            let y = transformer::stack_infer(
                store,
                &format!("expert{j}"),
                &x,
                self.heads,
                self.layers,
                cache,
            )?;
            outs.push(y);
        }
        // concat expert features + embedding, project, shared stack
        let si = self.shared_input();
        let mut cat2 = vec![0.0; b * l * si];
        for r in 0..b * l {
            for (slot, o) in outs.iter().enumerate() {
                cat2[r * si + slot * self.dim..r * si + (slot + 1) * self.dim]
                    .copy_from_slice(&o.data()[r * self.dim..(r + 1) * self.dim]);
            }
            cat2[r * si + outs.len() * self.dim..(r + 1) * si].copy_from_slice(embed_row.data());
        }
        let cat2 = Tensor::new(&[b * l, si], cat2);
        let mut proj = ops::matmul(&cat2, store.get("shared.proj.w"));
        ops::add_bias_rows(proj.data_mut(), store.get("shared.proj.b").data());
        let proj = proj.reshape(&[b, l, self.dim]);
        let x = add_pos(&proj, store.get(POS_SHARED));
        let cache = caches.as_deref_mut().map(|c| &mut c.shared);
        let h = transformer::stack_infer(store, "shared", &x, self.heads, self.layers, cache)?;
        if let Some(c) = caches {
            c.bump(l);
        }
        Ok(h)
    }

    /// Fresh caches sized for `capacity` positions.
    pub fn make_caches(&self, batch: usize, capacity: usize) -> MixtureKvCache {
        let dh = self.dim / self.heads;
        MixtureKvCache {
            experts: (0..self.active)
                .map(|_| StackCache::new(self.layers, batch, self.heads, capacity, dh))
                .collect(),
            shared: StackCache::new(self.layers, batch, self.heads, capacity, dh),
            len: 0,
        }
    }
}

/// KV caches for the activated experts (in sorted slot order) plus the
/// shared stack.
pub struct MixtureKvCache {
    pub experts: Vec<StackCache>,
    pub shared: StackCache,
    len: usize,
}

impl MixtureKvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn bump(&mut self, l: usize) {
        self.len += l;
    }
}
