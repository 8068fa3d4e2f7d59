//! Model / training configuration. `full()` carries the reference
//! hyperparameters; `desk()` and `micro()` are the reduced profiles used for
//! verification and the end-to-end micro runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation rendering profile. The 64px profile matches the reference
/// encoder/decoder stacks; the 16px profile halves the conv stacks while
/// keeping the 1024-dim latent interface.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsProfile {
    Px16,
    Px64,
}

impl ObsProfile {
    pub fn obs_size(self) -> usize {
        match self {
            ObsProfile::Px16 => 16,
            ObsProfile::Px64 => 64,
        }
    }

    /// Encoder conv channel progression (kernel 4, stride 2, pad 1 each).
    pub fn enc_channels(self) -> &'static [usize] {
        match self {
            ObsProfile::Px16 => &[16, 32],
            ObsProfile::Px64 => &[32, 64, 128, 256],
        }
    }

    /// Spatial size after the encoder conv stack (each conv halves).
    pub fn bottleneck_hw(self) -> usize {
        self.obs_size() >> self.enc_channels().len()
    }

    /// Flattened encoder feature size in front of the final linear.
    pub fn enc_flat(self) -> usize {
        let hw = self.bottleneck_hw();
        self.enc_channels().last().unwrap() * hw * hw
    }
}

/// Latent layout: 32 categorical variables with 32 classes each.
pub const LATENT_VARS: usize = 32;
pub const LATENT_CLASSES: usize = 32;
pub const LATENT_FLAT: usize = LATENT_VARS * LATENT_CLASSES;

/// Reward/value bucket count for the symlog two-hot codec.
pub const NUM_BUCKETS: usize = 255;

/// All architecture and optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of tasks K.
    pub num_tasks: usize,
    /// Number of VAE/predictor/critic clusters N_m.
    pub num_clusters: usize,
    /// Number of expert Transformers N_e.
    pub num_experts: usize,
    /// Activated experts per task n_k.
    pub active_experts: usize,
    /// Transformer feature dimension D.
    pub dim: usize,
    /// Task embedding dimension E.
    pub embed_dim: usize,
    /// Observation profile (16px test / 64px full).
    pub obs: ObsProfile,
    /// Playfield grid size for the synthetic tasks.
    pub grid_size: usize,
    /// Episode step cap for the synthetic tasks.
    pub max_episode_steps: usize,
    /// Replay capacity per task (transitions).
    pub replay_capacity: usize,

    /// World-model training batch size (sequences per task).
    pub wm_batch_size: usize,
    /// World-model training batch length.
    pub wm_batch_length: usize,
    /// Imagination batch size (sequences per task).
    pub imag_batch_size: usize,
    /// Imagination context length.
    pub imag_context: usize,
    /// Imagination horizon.
    pub imag_horizon: usize,
    /// Context window while acting in the real environment.
    pub env_context: usize,
    /// Warmup world-model steps before clustering.
    pub warmup_steps: usize,
    /// Random-policy transitions per task collected before warmup.
    pub prefill_steps: usize,
    /// Total environment steps per task for the main loop.
    pub total_env_steps: usize,
    /// World-model updates per environment step.
    pub wm_updates_per_step: usize,
    /// Agent updates per environment step.
    pub agent_updates_per_step: usize,

    /// World-model learning rate.
    pub wm_lr: f64,
    /// World-model gradient clipping (global norm).
    pub wm_clip: f64,
    /// Actor-critic learning rate.
    pub ac_lr: f64,
    /// Actor-critic gradient clipping (global norm).
    pub ac_clip: f64,
    /// Adam epsilon.
    pub adam_eps: f64,

    /// Dynamics KL coefficient β1.
    pub beta_dyn: f64,
    /// Representation KL coefficient β2.
    pub beta_rep: f64,
    /// Balance-loss coefficient.
    pub balance_coef: f64,
    /// Initial router softmax temperature τ0 (annealed to 1).
    pub tau0: f64,

    /// Return mixing λ.
    pub lambda: f64,
    /// Discount horizon (γ = 1 - 1/horizon).
    pub discount_horizon: f64,
    /// Actor entropy scale η.
    pub entropy_scale: f64,
    /// Critic EMA decay.
    pub ema_decay: f64,
    /// Critic EMA regularizer weight.
    pub ema_reg: f64,
    /// Use the λ-in-place-of-γ bootstrap weighting exactly as printed.
    pub strict_paper_lambda: bool,

    /// Transformer blocks per expert stack and per shared stack.
    pub layers: usize,
    /// Attention heads.
    pub heads: usize,
    /// Dropout rate (training only).
    pub dropout: f64,

    /// Evaluate every this many environment steps (0 = never during training).
    pub eval_every: usize,
    /// Episodes per evaluation pass.
    pub eval_episodes: usize,
    /// Metrics record cadence in environment steps.
    pub log_every: usize,
    /// Root seed; all RNG streams derive from it.
    pub seed: u64,
}

impl ModelConfig {
    /// Reference configuration (26-task suite, 64px observations).
    pub fn full() -> Self {
        Self {
            num_tasks: 26,
            num_clusters: 12,
            num_experts: 12,
            active_experts: 3,
            dim: 512,
            embed_dim: 96,
            obs: ObsProfile::Px64,
            grid_size: 8,
            max_episode_steps: 64,
            replay_capacity: 100_000,
            wm_batch_size: 16,
            wm_batch_length: 64,
            imag_batch_size: 1024,
            imag_context: 8,
            imag_horizon: 16,
            env_context: 16,
            warmup_steps: 5000,
            prefill_steps: 4000,
            total_env_steps: 100_000,
            wm_updates_per_step: 1,
            agent_updates_per_step: 1,
            wm_lr: 1e-4,
            wm_clip: 1000.0,
            ac_lr: 3e-5,
            ac_clip: 100.0,
            adam_eps: 1e-8,
            beta_dyn: 0.5,
            beta_rep: 0.1,
            balance_coef: 0.1,
            tau0: 5.0,
            lambda: 0.95,
            discount_horizon: 333.0,
            entropy_scale: 3e-4,
            ema_decay: 0.98,
            ema_reg: 1.0,
            strict_paper_lambda: false,
            layers: 2,
            heads: 8,
            dropout: 0.1,
            eval_every: 2500,
            eval_episodes: 100,
            log_every: 100,
            seed: 0,
        }
    }

    /// Desk-scale test profile: 16px observations, D=256.
    pub fn desk(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            num_clusters: num_tasks.min(2),
            num_experts: 4,
            active_experts: 3,
            dim: 256,
            embed_dim: 96,
            obs: ObsProfile::Px16,
            grid_size: 6,
            max_episode_steps: 32,
            replay_capacity: 100_000,
            wm_batch_size: 4,
            wm_batch_length: 24,
            imag_batch_size: 16,
            warmup_steps: 1000,
            prefill_steps: 1000,
            total_env_steps: 10_000,
            ..Self::full()
        }
    }

    /// Micro profile for gradient checks and the end-to-end micro RL run:
    /// 16px observations, D=64, small batches.
    pub fn micro(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            num_clusters: num_tasks.min(2),
            num_experts: 4,
            active_experts: 2,
            dim: 64,
            embed_dim: 96,
            obs: ObsProfile::Px16,
            grid_size: 6,
            max_episode_steps: 32,
            wm_batch_size: 1,
            wm_batch_length: 24,
            imag_batch_size: 4,
            warmup_steps: 1500,
            prefill_steps: 1500,
            total_env_steps: 30_000,
            eval_every: 2500,
            eval_episodes: 40,
            log_every: 50,
            ..Self::desk(num_tasks)
        }
    }

    pub fn gamma(&self) -> f64 {
        1.0 - 1.0 / self.discount_horizon
    }

    /// Action-space size of the synthetic suite (up/down/left/right/no-op).
    pub fn num_actions(&self) -> usize {
        5
    }

    /// Agent state dimension: flattened latent + hidden + task embedding.
    pub fn state_dim(&self) -> usize {
        LATENT_FLAT + self.dim + self.embed_dim
    }

    /// Positional-embedding table size: training length plus the imagination
    /// window.
    pub fn max_positions(&self) -> usize {
        self.wm_batch_length + self.imag_context + self.imag_horizon
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::InvalidConfig("num_tasks must be >= 1".into()));
        }
        if self.active_experts == 0 || self.active_experts > self.num_experts {
            return Err(Error::InvalidConfig(format!(
                "active_experts {} must be in [1, num_experts {}]",
                self.active_experts, self.num_experts
            )));
        }
        if self.num_clusters == 0 || self.num_clusters > self.num_tasks {
            return Err(Error::InvalidConfig(format!(
                "num_clusters {} must be in [1, num_tasks {}]",
                self.num_clusters, self.num_tasks
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.imag_context == 0 {
            return Err(Error::InvalidConfig("imag_context must be >= 1".into()));
        }
        if self.imag_context + self.imag_horizon > self.max_positions() {
            return Err(Error::InvalidConfig(
                "imagination window exceeds positional table".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig("lambda must be in [0,1]".into()));
        }
        if self.discount_horizon <= 1.0 {
            return Err(Error::InvalidConfig("discount_horizon must exceed 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig("ema_decay must be in [0,1]".into()));
        }
        if self.wm_batch_length < 2 {
            return Err(Error::InvalidConfig("wm_batch_length must be >= 2".into()));
        }
        Ok(())
    }
}
