//! Task specifications and grid dynamics for the synthetic suite.

use serde::{Deserialize, Serialize};

use crate::config::ObsProfile;
use crate::rng::{derive_seed, seeded};
use rand::seq::SliceRandom as _;
use rand::Rng as _;

/// Discrete action set shared by every task.
pub const ACTION_UP: usize = 0;
pub const ACTION_DOWN: usize = 1;
pub const ACTION_LEFT: usize = 2;
pub const ACTION_RIGHT: usize = 3;
pub const ACTION_NOOP: usize = 4;
pub const NUM_ACTIONS: usize = 5;

/// Unit displacement of a move action (dx, dy); no-op is (0, 0).
pub fn action_delta(action: usize) -> (i32, i32) {
    match action {
        ACTION_UP => (0, -1),
        ACTION_DOWN => (0, 1),
        ACTION_LEFT => (-1, 0),
        ACTION_RIGHT => (1, 0),
        ACTION_NOOP => (0, 0),
        a => panic!("action {a} out of range"),
    }
}

/// Transition rule family. Rules differ in how an action maps to motion, so
/// tasks are heterogeneous in dynamics, not just appearance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DynamicsRule {
    /// Actions move the agent one cell in the named direction.
    DirectMove,
    /// Move actions are remapped through a fixed permutation of the four
    /// directions before being applied.
    PermutedActions { permutation: [usize; 4] },
    /// Move actions set a persistent velocity; no-op keeps drifting. Hitting
    /// a wall zeroes the velocity on that axis.
    Inertial,
    /// Direct movement followed by a one-cell downward pull.
    Gravity,
}

/// Goal-cell distribution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalSpec {
    Fixed { x: usize, y: usize },
    /// Uniform over cells distinct from the start cell, drawn per episode.
    AnyCell,
}

/// One synthetic POMDP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub palette_seed: u64,
    pub dynamics: DynamicsRule,
    pub grid_size: usize,
    pub goal: GoalSpec,
    pub max_episode_steps: usize,
    pub obs: ObsProfile,
}

/// Pure dynamics: `(pos, vel, action) -> (pos', vel')` on a `grid x grid`
/// board. Velocity is only live under the inertial rule.
pub fn apply_dynamics(
    rule: &DynamicsRule,
    grid: usize,
    pos: (i32, i32),
    vel: (i32, i32),
    action: usize,
) -> ((i32, i32), (i32, i32)) {
    let hi = grid as i32 - 1;
    let clamp = |v: i32| v.clamp(0, hi);
    match rule {
        DynamicsRule::DirectMove => {
            let (dx, dy) = action_delta(action);
            ((clamp(pos.0 + dx), clamp(pos.1 + dy)), (0, 0))
        }
        DynamicsRule::PermutedActions { permutation } => {
            let mapped = if action == ACTION_NOOP {
                ACTION_NOOP
            } else {
                permutation[action]
            };
            let (dx, dy) = action_delta(mapped);
            ((clamp(pos.0 + dx), clamp(pos.1 + dy)), (0, 0))
        }
        DynamicsRule::Inertial => {
            let mut v = if action == ACTION_NOOP {
                vel
            } else {
                action_delta(action)
            };
            let nx = pos.0 + v.0;
            let ny = pos.1 + v.1;
            let cx = clamp(nx);
            let cy = clamp(ny);
            if cx != nx {
                v.0 = 0;
            }
            if cy != ny {
                v.1 = 0;
            }
            ((cx, cy), v)
        }
        DynamicsRule::Gravity => {
            let (dx, dy) = action_delta(action);
            let x = clamp(pos.0 + dx);
            let y = clamp(clamp(pos.1 + dy) + 1);
            ((x, y), (0, 0))
        }
    }
}

/// Build `K` deterministic task specs. Same `(num_tasks, profile, seed)`
/// yields byte-identical suites; all palette seeds are pairwise distinct and
/// dynamics rules cycle through the four families.
pub fn make_suite(num_tasks: usize, profile: ObsProfile, seed: u64) -> Vec<TaskSpec> {
    let (grid, max_steps) = match profile {
        ObsProfile::Px16 => (6, 32),
        ObsProfile::Px64 => (8, 64),
    };
    make_suite_custom(num_tasks, profile, grid, max_steps, seed)
}

pub fn make_suite_custom(
    num_tasks: usize,
    profile: ObsProfile,
    grid: usize,
    max_episode_steps: usize,
    seed: u64,
) -> Vec<TaskSpec> {
    assert!(num_tasks >= 1, "need at least one task");
    assert!(grid >= 3, "grid too small");
    let mut specs = Vec::with_capacity(num_tasks);
    for k in 0..num_tasks {
        let mut rng = seeded(derive_seed(seed, "suite"), &format!("task{k}"));
        let dynamics = match k % 4 {
            0 => DynamicsRule::DirectMove,
            1 => {
                // a non-identity derangement of the four move directions
                let mut perm = [ACTION_UP, ACTION_DOWN, ACTION_LEFT, ACTION_RIGHT];
                loop {
                    perm.shuffle(&mut rng);
                    if perm.iter().enumerate().all(|(i, &p)| p != i) {
                        break;
                    }
                }
                DynamicsRule::PermutedActions { permutation: perm }
            }
            2 => DynamicsRule::Inertial,
            _ => DynamicsRule::Gravity,
        };
        let goal = match dynamics {
            // gravity tasks keep the goal reachable on the bottom row
            DynamicsRule::Gravity => GoalSpec::Fixed {
                x: rng.gen_range(0..grid),
                y: grid - 1,
            },
            _ => GoalSpec::Fixed {
                x: rng.gen_range(0..grid),
                y: rng.gen_range(0..grid),
            },
        };
        specs.push(TaskSpec {
            task_id: k,
            palette_seed: derive_seed(seed, &format!("palette{k}")),
            dynamics,
            grid_size: grid,
            goal,
            max_episode_steps,
            obs: profile,
        });
    }
    debug_assert!({
        let mut seeds: Vec<u64> = specs.iter().map(|s| s.palette_seed).collect();
        seeds.sort_unstable();
        seeds.windows(2).all(|w| w[0] != w[1])
    });
    specs
}
