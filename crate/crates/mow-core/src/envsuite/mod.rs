//! Synthetic multi-task pixel POMDPs with heterogeneous visuals and
//! dynamics, plus per-task replay buffers.

pub mod env;
pub mod replay;
pub mod task;

pub use env::{Env, Observation, Transition};
pub use replay::{ReplayBuffer, TrajectoryBatch};
pub use task::{
    apply_dynamics, make_suite, make_suite_custom, DynamicsRule, GoalSpec, TaskSpec, NUM_ACTIONS,
};
