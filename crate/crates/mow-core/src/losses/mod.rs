//! The world-model loss stack: symlog/two-hot primitives, harmonious task
//! weighting, free-bits KL, and the expert balance penalty.

pub mod harmony;
pub mod symlog;
pub mod wm;

pub use harmony::{
    harmonize_value, harmonize_var, rectified_scale, sigma_star, HarmoniousState, RHO_PARAM,
};
pub use symlog::{symexp, symlog, BucketGrid};
pub use wm::{
    balance_loss, balance_loss_var, cross_entropy_mean, kl_categorical, kl_dyn_rep,
    kl_dyn_rep_probs, kl_dyn_rep_vars, TaskLossBreakdown, FREE_BITS,
};
