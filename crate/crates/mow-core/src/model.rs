//! The assembled mixture world model: one parameter store holding the task
//! embeddings, router, mixers, expert/shared Transformers, per-cluster VAEs,
//! prediction heads, critics, the shared actor, and the harmonious scales.

use crate::agent;
use crate::clustering::ClusterAssignment;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::losses::{BucketGrid, HarmoniousState};
use crate::numcore::{AdamState, ParamStore, Tensor};
use crate::perceptual::{TaskEmbeddings, Vae};
use crate::rng::{seeded, MowRng};
use crate::temporal::{router, MixtureCore};

pub struct MowModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub core: MixtureCore,
    pub wm_opt: AdamState,
    pub ac_opt: AdamState,
    pub assignment: ClusterAssignment,
    /// Installed cluster-parameter sets (1 during warmup, N_m afterwards).
    pub clusters: usize,
    pub grid: BucketGrid,
}

impl MowModel {
    /// Warmup-shape model: the full mixture plus a single VAE/head/critic
    /// set that later replicates into `num_clusters` copies.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng: MowRng = seeded(seed, "model-init");
        let core = MixtureCore::new(&cfg);

        TaskEmbeddings::init(&mut store, cfg.num_tasks, cfg.embed_dim, &mut rng);
        router::init_router_params(&mut store, cfg.embed_dim, cfg.num_experts, &mut rng);
        core.init_params(&mut store, &mut rng);
        Vae::new(0, &cfg).init_params(&mut store, &mut rng);
        crate::temporal::heads::init_cluster_heads(&mut store, 0, &cfg, &mut rng);
        crate::temporal::heads::init_task_head(&mut store, &cfg, &mut rng);
        agent::init_actor(&mut store, &cfg, &mut rng);
        agent::init_critic(&mut store, 0, &cfg, &mut rng);
        HarmoniousState::new(cfg.num_tasks).install(&mut store);

        Ok(Self {
            assignment: ClusterAssignment::all_zero(cfg.num_tasks),
            core,
            cfg,
            store,
            wm_opt: AdamState::new(),
            ac_opt: AdamState::new(),
            clusters: 1,
            grid: BucketGrid::default(),
        })
    }

    /// Convenience constructor for tests: init plus round-robin replication
    /// into the configured cluster count.
    pub fn init_replicated(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let n_m = cfg.num_clusters;
        let k = cfg.num_tasks;
        let mut model = Self::init(cfg, seed)?;
        let assignment = ClusterAssignment::new((0..k).map(|t| t % n_m).collect(), n_m)?;
        crate::clustering::replicate_modules(&mut model, assignment);
        Ok(model)
    }

    pub fn vae(&self, cluster: usize) -> Vae {
        Vae::new(cluster, &self.cfg)
    }

    /// Cluster index of a task; errors when the task is out of range.
    pub fn cluster_of(&self, task: usize) -> Result<usize> {
        self.assignment.cluster_of(task)
    }

    pub fn embed_row(&self, task: usize) -> Tensor {
        TaskEmbeddings::embed_task(&self.store, task)
    }

    pub fn harmonious(&self) -> HarmoniousState {
        HarmoniousState::from_store(&self.store)
    }

    /// Current routing for one task at the given temperature.
    pub fn route_task(&self, task: usize, temperature: f64) -> router::RouterDecision {
        router::route(
            &self.store,
            &self.embed_row(task),
            self.cfg.active_experts,
            temperature,
        )
    }

    /// Deterministic scalar digest of a forward pass on a fixed synthetic
    /// batch; used as the checkpoint round-trip probe.
    pub fn probe_digest(&self) -> f64 {
        let mut rng = seeded(0xD16E57, "probe");
        let b = 1;
        let t = 3;
        let z = crate::perceptual::sample_onehot(
            crate::perceptual::CategoricalDist::uniform(&[b, t]).probs(),
            &mut rng,
        )
        .reshape(&[b, t, crate::config::LATENT_FLAT]);
        let a = Tensor::from_fn(&[b, t, self.cfg.num_actions()], |i| {
            if i % self.cfg.num_actions() == 0 {
                1.0
            } else {
                0.0
            }
        });
        let mut digest = 0.0;
        for task in 0..self.cfg.num_tasks.min(2) {
            let e = self.embed_row(task);
            let decision = self.route_task(task, 1.0);
            let h = self
                .core
                .forward_infer(&self.store, &z, &a, &e, &decision.active_sorted(), None)
                .expect("probe forward");
            let cluster = self.cluster_of(task).expect("probe cluster");
            let h_last = Tensor::new(
                &[b, self.cfg.dim],
                h.data()[(t - 1) * self.cfg.dim..t * self.cfg.dim].to_vec(),
            );
            let e_flat = Tensor::new(&[1, self.cfg.embed_dim], e.data().to_vec());
            let out = crate::temporal::heads_eval(&self.store, cluster, &h_last, &e_flat);
            digest += out.rew_logits.sum() + out.con_logits.sum() + out.dyn_logits.sum() * 1e-3
                + out.task_logits.sum();
            let recon = self.vae(cluster).decode_eval(
                &self.store,
                &z.reshape(&[b * t, crate::config::LATENT_FLAT]),
                &e,
            );
            digest += recon.sum() * 1e-6;
        }
        digest
    }

    /// Total trainable parameter scalars.
    pub fn num_params(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// Per-prefix parameter counts (the checkpoint manifest summary).
    pub fn param_manifest(&self) -> Vec<(String, usize)> {
        let mut groups: std::collections::BTreeMap<String, usize> = Default::default();
        for (name, p) in self.store.iter() {
            let group = name.split('.').next().unwrap_or(name).to_string();
            *groups.entry(group).or_default() += p.tensor.numel();
        }
        groups.into_iter().collect()
    }
}
