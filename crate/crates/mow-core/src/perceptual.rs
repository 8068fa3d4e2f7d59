//! Perceptual module: task-clustered categorical VAEs and unit-norm task
//! embeddings. Latents are 32x32 one-hot samples with straight-through
//! gradients.

use rand::Rng as _;

use crate::config::{ModelConfig, ObsProfile, LATENT_CLASSES, LATENT_FLAT, LATENT_VARS};
use crate::error::{Error, Result};
use crate::numcore::{ops, ParamStore, Tape, Tensor, Var};
use crate::rng::{randn, MowRng};

/// Probabilities of 32 categorical variables with 32 classes each; every row
/// sums to one.
#[derive(Clone, Debug)]
pub struct CategoricalDist {
    probs: Tensor,
}

impl CategoricalDist {
    pub fn from_probs(probs: Tensor) -> Result<Self> {
        let shape = probs.shape();
        if shape.len() < 2
            || shape[shape.len() - 1] != LATENT_CLASSES
            || shape[shape.len() - 2] != LATENT_VARS
        {
            return Err(Error::ShapeMismatch {
                context: "categorical distribution".into(),
                expected: vec![LATENT_VARS, LATENT_CLASSES],
                got: shape.to_vec(),
            });
        }
        for row in probs.data().chunks(LATENT_CLASSES) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Invalid(format!(
                    "categorical row does not normalize: sum {s}"
                )));
            }
        }
        Ok(Self { probs })
    }

    /// Softmax over the class axis of raw logits `[.., 32, 32]`.
    pub fn from_logits(logits: &Tensor) -> Self {
        Self {
            probs: ops::softmax_rows(logits, LATENT_CLASSES),
        }
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    /// Uniform distribution over every class.
    pub fn uniform(lead: &[usize]) -> Self {
        let mut shape = lead.to_vec();
        shape.extend([LATENT_VARS, LATENT_CLASSES]);
        Self {
            probs: Tensor::full(&shape, 1.0 / LATENT_CLASSES as f64),
        }
    }
}

/// One-hot 32x32 latent.
#[derive(Clone, Debug)]
pub struct CategoricalLatent {
    onehot: Tensor,
}

impl CategoricalLatent {
    pub fn new(onehot: Tensor) -> Result<Self> {
        for row in onehot.data().chunks(LATENT_CLASSES) {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != LATENT_CLASSES - 1 {
                return Err(Error::Invalid("latent row is not one-hot".into()));
            }
        }
        Ok(Self { onehot })
    }

    pub fn onehot(&self) -> &Tensor {
        &self.onehot
    }
}

/// Draw a one-hot sample per categorical row (inverse-CDF on the given
/// probabilities).
pub fn sample_onehot(probs: &Tensor, rng: &mut MowRng) -> Tensor {
    let mut out = vec![0.0; probs.numel()];
    for (r, row) in probs.data().chunks(LATENT_CLASSES).enumerate() {
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut cum = 0.0;
        let mut hit = LATENT_CLASSES - 1;
        for (i, &p) in row.iter().enumerate() {
            cum += p;
            if u < cum {
                hit = i;
                break;
            }
        }
        out[r * LATENT_CLASSES + hit] = 1.0;
    }
    Tensor::new(probs.shape(), out)
}

/// Forward sample / straight-through backward, standalone form.
pub fn st_sample(dist: &CategoricalDist, rng: &mut MowRng) -> CategoricalLatent {
    CategoricalLatent {
        onehot: sample_onehot(dist.probs(), rng),
    }
}

/// Tape form: `probs_var` must hold class probabilities; emits a one-hot
/// sample whose backward pass is the identity onto the probabilities.
pub fn st_sample_var(tape: &mut Tape, probs_var: Var, rng: &mut MowRng) -> Var {
    let sample = sample_onehot(tape.value(probs_var), rng);
    tape.straight_through(probs_var, sample)
}

/// Surrogate form used by finite-difference checks: the node's forward value
/// is `onehot0 + probs - probs0`, whose exact gradient is the straight-through
/// gradient.
pub fn st_surrogate_var(tape: &mut Tape, probs_var: Var, onehot0: &Tensor, probs0: &Tensor) -> Var {
    let now = tape.value(probs_var).clone();
    let value = Tensor::from_fn(now.shape(), |i| {
        onehot0.data()[i] + now.data()[i] - probs0.data()[i]
    });
    tape.straight_through(probs_var, value)
}

/// Learnable task embeddings, one unit-norm row per task.
pub struct TaskEmbeddings;

pub const EMBED_PARAM: &str = "embed.task";

impl TaskEmbeddings {
    pub fn init(store: &mut ParamStore, num_tasks: usize, embed_dim: usize, rng: &mut MowRng) {
        let mut rows = Vec::with_capacity(num_tasks * embed_dim);
        for _ in 0..num_tasks {
            let mut row: Vec<f64> = (0..embed_dim).map(|_| randn(rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
            rows.extend(row);
        }
        store.insert(EMBED_PARAM, Tensor::new(&[num_tasks, embed_dim], rows));
    }

    /// The current embedding row of task `k` (stored rows are kept unit-norm).
    pub fn embed_task(store: &ParamStore, k: usize) -> Tensor {
        let table = store.get(EMBED_PARAM);
        let e = table.dim(1);
        Tensor::new(&[e], table.data()[k * e..(k + 1) * e].to_vec())
    }

    /// Project every row back to unit norm (run after each optimizer step).
    pub fn renormalize(store: &mut ParamStore) {
        let table = store.get_mut(EMBED_PARAM);
        let e = table.dim(1);
        let data = table.data_mut();
        for row in data.chunks_mut(e) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }

    /// Tape binding of one row, `[1, E]`; gradients flow into the table.
    pub fn embed_var(tape: &mut Tape, store: &ParamStore, k: usize) -> Var {
        let table = tape.param(store, EMBED_PARAM);
        tape.slice_rows(table, k, 1)
    }
}

fn linear_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn insert_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut MowRng) {
    let b = linear_bound(fan_in);
    store.insert(&format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], b, rng));
    store.insert(&format!("{name}.b"), Tensor::uniform(&[fan_out], b, rng));
}

fn insert_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut MowRng) {
    let b = linear_bound(cin * k * k);
    store.insert(&format!("{name}.w"), Tensor::uniform(&[cout, cin, k, k], b, rng));
    store.insert(&format!("{name}.b"), Tensor::uniform(&[cout], b, rng));
}

fn insert_deconv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut MowRng) {
    let b = linear_bound(cin * k * k);
    store.insert(&format!("{name}.w"), Tensor::uniform(&[cin, cout, k, k], b, rng));
    store.insert(&format!("{name}.b"), Tensor::uniform(&[cout], b, rng));
}

fn insert_bn(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(&format!("{name}.gamma"), Tensor::full(&[c], 1.0));
    store.insert(&format!("{name}.beta"), Tensor::zeros(&[c]));
    store.insert_buffer(&format!("{name}.run_mean"), Tensor::zeros(&[c]));
    store.insert_buffer(&format!("{name}.run_var"), Tensor::full(&[c], 1.0));
}

/// Encoder/decoder pair for one cluster. Conv stacks use kernel 4, stride 2,
/// padding 1; the task embedding is concatenated in front of the encoder's
/// final linear layer and alongside the flattened latent in the decoder.
#[derive(Clone, Copy)]
pub struct Vae {
    pub cluster: usize,
    pub obs: ObsProfile,
    pub embed_dim: usize,
}

/// Training-mode VAE output plus the batch-norm nodes that carry batch
/// statistics for running updates.
pub struct BnNodes(pub Vec<(String, Var)>);

impl Vae {
    pub fn new(cluster: usize, cfg: &ModelConfig) -> Self {
        Self {
            cluster,
            obs: cfg.obs,
            embed_dim: cfg.embed_dim,
        }
    }

    pub fn prefix(&self) -> String {
        format!("vae{}", self.cluster)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut MowRng) {
        let p = self.prefix();
        let chans = self.obs.enc_channels();
        let mut cin = 3;
        for (l, &cout) in chans.iter().enumerate() {
            insert_conv(store, &format!("{p}.enc.conv{l}"), cin, cout, 4, rng);
            insert_bn(store, &format!("{p}.enc.bn{l}"), cout);
            cin = cout;
        }
        insert_linear(
            store,
            &format!("{p}.enc.fc"),
            self.obs.enc_flat() + self.embed_dim,
            LATENT_FLAT,
            rng,
        );

        insert_linear(
            store,
            &format!("{p}.dec.fc"),
            LATENT_FLAT + self.embed_dim,
            self.obs.enc_flat(),
            rng,
        );
        insert_bn(store, &format!("{p}.dec.bn_fc"), self.obs.enc_flat());
        let mut cin = *chans.last().unwrap();
        for l in (1..chans.len()).rev() {
            let cout = chans[l - 1];
            insert_deconv(store, &format!("{p}.dec.deconv{l}"), cin, cout, 4, rng);
            insert_bn(store, &format!("{p}.dec.bn{l}"), cout);
            cin = cout;
        }
        insert_deconv(store, &format!("{p}.dec.deconv0"), cin, 3, 4, rng);
    }

    /// Training encoder: observations `[n,3,h,w]` and per-row embeddings
    /// `[n,e]` to latent logits `[n,32,32]`.
    pub fn encode_train(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: Var,
        embed: Var,
    ) -> (Var, BnNodes) {
        let p = self.prefix();
        let n = tape.shape(obs)[0];
        let mut bn_nodes = Vec::new();
        let mut x = obs;
        for l in 0..self.obs.enc_channels().len() {
            let w = tape.param(store, &format!("{p}.enc.conv{l}.w"));
            let b = tape.param(store, &format!("{p}.enc.conv{l}.b"));
            let conv = tape.conv2d(x, w, b, 2, 1);
            let gamma = tape.param(store, &format!("{p}.enc.bn{l}.gamma"));
            let beta = tape.param(store, &format!("{p}.enc.bn{l}.beta"));
            let bn = tape.batchnorm(conv, gamma, beta, 1e-5);
            bn_nodes.push((format!("{p}.enc.bn{l}"), bn));
            x = tape.relu(bn);
        }
        let flat = tape.reshape(x, &[n, self.obs.enc_flat()]);
        let cat = tape.concat_last(&[flat, embed]);
        let w = tape.param(store, &format!("{p}.enc.fc.w"));
        let b = tape.param(store, &format!("{p}.enc.fc.b"));
        let lin = tape.matmul(cat, w);
        let logits_flat = tape.add_bias(lin, b);
        let logits = tape.reshape(logits_flat, &[n, LATENT_VARS, LATENT_CLASSES]);
        (logits, BnNodes(bn_nodes))
    }

    /// Training decoder: flattened latents `[n,1024]` and embeddings `[n,e]`
    /// to reconstructions `[n,3,h,w]`.
    pub fn decode_train(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_flat: Var,
        embed: Var,
    ) -> (Var, BnNodes) {
        let p = self.prefix();
        let n = tape.shape(z_flat)[0];
        let chans = self.obs.enc_channels();
        let mut bn_nodes = Vec::new();

        let cat = tape.concat_last(&[z_flat, embed]);
        let w = tape.param(store, &format!("{p}.dec.fc.w"));
        let b = tape.param(store, &format!("{p}.dec.fc.b"));
        let lin = tape.matmul(cat, w);
        let lin = tape.add_bias(lin, b);
        let gamma = tape.param(store, &format!("{p}.dec.bn_fc.gamma"));
        let beta = tape.param(store, &format!("{p}.dec.bn_fc.beta"));
        let bn = tape.batchnorm(lin, gamma, beta, 1e-5);
        bn_nodes.push((format!("{p}.dec.bn_fc"), bn));
        let act = tape.relu(bn);
        let hw = self.obs.bottleneck_hw();
        let mut x = tape.reshape(act, &[n, *chans.last().unwrap(), hw, hw]);

        for l in (1..chans.len()).rev() {
            let w = tape.param(store, &format!("{p}.dec.deconv{l}.w"));
            let b = tape.param(store, &format!("{p}.dec.deconv{l}.b"));
            let de = tape.conv_transpose2d(x, w, b, 2, 1);
            let gamma = tape.param(store, &format!("{p}.dec.bn{l}.gamma"));
            let beta = tape.param(store, &format!("{p}.dec.bn{l}.beta"));
            let bn = tape.batchnorm(de, gamma, beta, 1e-5);
            bn_nodes.push((format!("{p}.dec.bn{l}"), bn));
            x = tape.relu(bn);
        }
        let w = tape.param(store, &format!("{p}.dec.deconv0.w"));
        let b = tape.param(store, &format!("{p}.dec.deconv0.b"));
        let recon = tape.conv_transpose2d(x, w, b, 2, 1);
        (recon, BnNodes(bn_nodes))
    }

    /// Inference encoder (running batch-norm statistics, no tape).
    pub fn encode_eval(&self, store: &ParamStore, obs: &Tensor, embed_row: &Tensor) -> Tensor {
        let p = self.prefix();
        let n = obs.dim(0);
        let mut x = obs.clone();
        for l in 0..self.obs.enc_channels().len() {
            let conv = ops::conv2d_fwd(
                &x,
                store.get(&format!("{p}.enc.conv{l}.w")),
                store.get(&format!("{p}.enc.conv{l}.b")),
                2,
                1,
            );
            let (bn_n, bn_c, bn_sp) = (conv.dim(0), conv.dim(1), conv.dim(2) * conv.dim(3));
            let bn = ops::batchnorm_eval(
                &conv,
                bn_n,
                bn_c,
                bn_sp,
                store.get(&format!("{p}.enc.bn{l}.gamma")).data(),
                store.get(&format!("{p}.enc.bn{l}.beta")).data(),
                store.get(&format!("{p}.enc.bn{l}.run_mean")).data(),
                store.get(&format!("{p}.enc.bn{l}.run_var")).data(),
                1e-5,
            );
            x = bn.map(|v| v.max(0.0));
        }
        let flat = x.reshape(&[n, self.obs.enc_flat()]);
        let cat = concat_embed(&flat, embed_row);
        let mut lin = ops::matmul(&cat, store.get(&format!("{p}.enc.fc.w")));
        ops::add_bias_rows(lin.data_mut(), store.get(&format!("{p}.enc.fc.b")).data());
        lin.reshape(&[n, LATENT_VARS, LATENT_CLASSES])
    }

    /// Inference decoder (running batch-norm statistics, no tape).
    pub fn decode_eval(&self, store: &ParamStore, z_flat: &Tensor, embed_row: &Tensor) -> Tensor {
        let p = self.prefix();
        let n = z_flat.dim(0);
        let chans = self.obs.enc_channels();
        let cat = concat_embed(z_flat, embed_row);
        let mut lin = ops::matmul(&cat, store.get(&format!("{p}.dec.fc.w")));
        ops::add_bias_rows(lin.data_mut(), store.get(&format!("{p}.dec.fc.b")).data());
        let bn = ops::batchnorm_eval(
            &lin,
            n,
            self.obs.enc_flat(),
            1,
            store.get(&format!("{p}.dec.bn_fc.gamma")).data(),
            store.get(&format!("{p}.dec.bn_fc.beta")).data(),
            store.get(&format!("{p}.dec.bn_fc.run_mean")).data(),
            store.get(&format!("{p}.dec.bn_fc.run_var")).data(),
            1e-5,
        );
        let hw = self.obs.bottleneck_hw();
        let mut x = bn
            .map(|v| v.max(0.0))
            .reshape(&[n, *chans.last().unwrap(), hw, hw]);
        for l in (1..chans.len()).rev() {
            let de = ops::conv_transpose2d_fwd(
                &x,
                store.get(&format!("{p}.dec.deconv{l}.w")),
                store.get(&format!("{p}.dec.deconv{l}.b")),
                2,
                1,
            );
            let (bn_n, bn_c, bn_sp) = (de.dim(0), de.dim(1), de.dim(2) * de.dim(3));
            let bn = ops::batchnorm_eval(
                &de,
                bn_n,
                bn_c,
                bn_sp,
                store.get(&format!("{p}.dec.bn{l}.gamma")).data(),
                store.get(&format!("{p}.dec.bn{l}.beta")).data(),
                store.get(&format!("{p}.dec.bn{l}.run_mean")).data(),
                store.get(&format!("{p}.dec.bn{l}.run_var")).data(),
                1e-5,
            );
            x = bn.map(|v| v.max(0.0));
        }
        ops::conv_transpose2d_fwd(
            &x,
            store.get(&format!("{p}.dec.deconv0.w")),
            store.get(&format!("{p}.dec.deconv0.b")),
            2,
            1,
        )
    }
}

/// Concatenate one embedding row onto every row of `x`.
fn concat_embed(x: &Tensor, embed_row: &Tensor) -> Tensor {
    let n = x.dim(0);
    let f = x.dim(1);
    let e = embed_row.numel();
    let mut out = vec![0.0; n * (f + e)];
    for r in 0..n {
        out[r * (f + e)..r * (f + e) + f].copy_from_slice(&x.data()[r * f..(r + 1) * f]);
        out[r * (f + e) + f..(r + 1) * (f + e)].copy_from_slice(embed_row.data());
    }
    Tensor::new(&[n, f + e], out)
}

/// Fold a tape's batch-norm statistics into the running buffers
/// (momentum 0.1, unbiased variance like the usual convention).
pub fn apply_bn_updates(tape: &Tape, store: &mut ParamStore, nodes: &BnNodes) {
    const MOMENTUM: f64 = 0.1;
    for (prefix, var) in &nodes.0 {
        let (mean, batch_var) = tape.bn_stats(*var);
        let count = {
            let shape = tape.shape(*var);
            let c = if shape.len() == 4 { shape[1] } else { shape[1] };
            (tape.value(*var).numel() / c) as f64
        };
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let mean = mean.to_vec();
        let batch_var = batch_var.to_vec();
        {
            let rm = store.get_mut(&format!("{prefix}.run_mean")).data_mut();
            for (r, m) in rm.iter_mut().zip(&mean) {
                *r = (1.0 - MOMENTUM) * *r + MOMENTUM * m;
            }
        }
        let rv = store.get_mut(&format!("{prefix}.run_var")).data_mut();
        for (r, v) in rv.iter_mut().zip(&batch_var) {
            *r = (1.0 - MOMENTUM) * *r + MOMENTUM * (v * unbias);
        }
    }
}
