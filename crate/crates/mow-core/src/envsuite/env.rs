//! Environment state, stepping, and the pixel renderer.

use rand::Rng as _;

use crate::envsuite::task::{apply_dynamics, DynamicsRule, GoalSpec, TaskSpec, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::{seeded, MowRng};

/// RGB frame, channel-major `[3, h, w]`, quantized to u8 so replay storage is
/// compact; `pixels()` exposes the `[0,1]` float view.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl Observation {
    pub fn from_raw(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), 3 * h * w);
        Self { h, w, data }
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    /// Float view in `[0, 1]`.
    pub fn pixels(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[3, self.h, self.w], self.pixels())
    }
}

/// One environment interaction: the observation the action was taken on,
/// the action, the reward, and the continuation flag (0 ends the episode).
#[derive(Clone, Debug)]
pub struct Transition {
    pub observation: Observation,
    pub action: usize,
    pub reward: f64,
    pub continuation: bool,
}

/// A running instance of one task.
pub struct Env {
    spec: TaskSpec,
    agent: (i32, i32),
    vel: (i32, i32),
    goal: (i32, i32),
    steps: usize,
    done: bool,
    started: bool,
}

impl Env {
    pub fn new(spec: TaskSpec) -> Self {
        Self {
            spec,
            agent: (0, 0),
            vel: (0, 0),
            goal: (0, 0),
            steps: 0,
            done: true,
            started: false,
        }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn agent_pos(&self) -> (i32, i32) {
        self.agent
    }

    pub fn velocity(&self) -> (i32, i32) {
        self.vel
    }

    pub fn goal_pos(&self) -> (i32, i32) {
        self.goal
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Start an episode: place the goal per spec and the agent uniformly on a
    /// non-goal cell. Deterministic in `seed`.
    pub fn reset(&mut self, seed: u64) -> Observation {
        let grid = self.spec.grid_size as i32;
        let mut rng: MowRng = seeded(seed, &format!("episode-task{}", self.spec.task_id));
        self.goal = match self.spec.goal {
            GoalSpec::Fixed { x, y } => (x as i32, y as i32),
            GoalSpec::AnyCell => (rng.gen_range(0..grid), rng.gen_range(0..grid)),
        };
        loop {
            self.agent = (rng.gen_range(0..grid), rng.gen_range(0..grid));
            if self.agent != self.goal {
                break;
            }
        }
        self.vel = (0, 0);
        self.steps = 0;
        self.done = false;
        self.started = true;
        self.render()
    }

    /// Advance one step. Reward is +1 exactly when the agent lands on the
    /// goal; continuation is false on goal or timeout.
    pub fn step(&mut self, action: usize) -> Result<Transition> {
        if !self.started || self.done {
            return Err(Error::EpisodeTerminated);
        }
        if action >= NUM_ACTIONS {
            return Err(Error::Invalid(format!("action {action} out of range")));
        }
        let (pos, vel) = apply_dynamics(
            &self.spec.dynamics,
            self.spec.grid_size,
            self.agent,
            self.vel,
            action,
        );
        self.agent = pos;
        self.vel = vel;
        self.steps += 1;
        let on_goal = self.agent == self.goal;
        let timeout = self.steps >= self.spec.max_episode_steps;
        let reward = if on_goal { 1.0 } else { 0.0 };
        self.done = on_goal || timeout;
        Ok(Transition {
            observation: self.render(),
            action,
            reward,
            continuation: !self.done,
        })
    }

    /// Render the current board.
    pub fn render(&self) -> Observation {
        render_board(&self.spec, self.agent, self.goal)
    }

    /// A goal-seeking action under this task's dynamics (test oracle and
    /// prefill helper).
    pub fn scripted_action(&self) -> usize {
        use crate::envsuite::task::{ACTION_DOWN, ACTION_LEFT, ACTION_NOOP, ACTION_RIGHT, ACTION_UP};
        let dx = self.goal.0 - self.agent.0;
        let dy = self.goal.1 - self.agent.1;
        let desired = if dx.abs() >= dy.abs() && dx != 0 {
            if dx > 0 {
                ACTION_RIGHT
            } else {
                ACTION_LEFT
            }
        } else if dy != 0 {
            if dy > 0 {
                ACTION_DOWN
            } else {
                ACTION_UP
            }
        } else {
            ACTION_NOOP
        };
        match &self.spec.dynamics {
            DynamicsRule::PermutedActions { permutation } => {
                if desired == ACTION_NOOP {
                    ACTION_NOOP
                } else {
                    // apply the inverse permutation
                    permutation
                        .iter()
                        .position(|&p| p == desired)
                        .expect("permutation is total")
                }
            }
            DynamicsRule::Gravity => {
                // goal sits on the bottom row; steer horizontally and let
                // gravity close the vertical gap
                if dx > 0 {
                    ACTION_RIGHT
                } else if dx < 0 {
                    ACTION_LEFT
                } else if dy < 0 {
                    ACTION_UP
                } else {
                    ACTION_NOOP
                }
            }
            _ => desired,
        }
    }
}

/// Per-task color scheme derived from the palette seed.
struct Palette {
    bg: [u8; 3],
    accent: [u8; 3],
    agent: [u8; 3],
    goal: [u8; 3],
}

fn palette(seed: u64) -> Palette {
    let mut rng = seeded(seed, "palette");
    let bg: [u8; 3] = [
        rng.gen_range(15..70),
        rng.gen_range(15..70),
        rng.gen_range(15..70),
    ];
    let accent = [
        bg[0].saturating_add(rng.gen_range(10..30)),
        bg[1].saturating_add(rng.gen_range(10..30)),
        bg[2].saturating_add(rng.gen_range(10..30)),
    ];
    // agent and goal get different dominant channels so they never blend
    let dominant = rng.gen_range(0..3usize);
    let mut agent = [rng.gen_range(40..90u8); 3];
    agent[dominant] = rng.gen_range(190..=255);
    let mut goal = [rng.gen_range(40..90u8); 3];
    goal[(dominant + 1 + rng.gen_range(0..2usize)) % 3] = rng.gen_range(190..=255);
    Palette {
        bg,
        accent,
        agent,
        goal,
    }
}

fn render_board(spec: &TaskSpec, agent: (i32, i32), goal: (i32, i32)) -> Observation {
    let size = spec.obs.obs_size();
    let grid = spec.grid_size;
    let cell = size / (grid + 2);
    assert!(cell >= 1, "observation too small for grid");
    let off = (size - grid * cell) / 2;
    let pal = palette(spec.palette_seed);

    let mut data = vec![0u8; 3 * size * size];
    let mut put = |x: usize, y: usize, c: [u8; 3]| {
        for (ch, v) in c.iter().enumerate() {
            data[ch * size * size + y * size + x] = *v;
        }
    };
    for y in 0..size {
        for x in 0..size {
            let inside = x >= off && x < off + grid * cell && y >= off && y < off + grid * cell;
            let color = if inside {
                let (cx, cy) = ((x - off) / cell, (y - off) / cell);
                if (cx + cy) % 2 == 0 {
                    pal.bg
                } else {
                    pal.accent
                }
            } else {
                // dimmed border frame
                [pal.bg[0] / 2, pal.bg[1] / 2, pal.bg[2] / 2]
            };
            put(x, y, color);
        }
    }
    let mut fill_cell = |cx: i32, cy: i32, c: [u8; 3]| {
        let x0 = off + cx as usize * cell;
        let y0 = off + cy as usize * cell;
        for y in y0..y0 + cell {
            for x in x0..x0 + cell {
                for (ch, v) in c.iter().enumerate() {
                    data[ch * size * size + y * size + x] = *v;
                }
            }
        }
    };
    fill_cell(goal.0, goal.1, pal.goal);
    fill_cell(agent.0, agent.1, pal.agent);
    Observation::from_raw(size, size, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ObsProfile;
    use crate::envsuite::task::{make_suite, ACTION_RIGHT};

    fn suite4() -> Vec<TaskSpec> {
        make_suite(4, ObsProfile::Px16, 0)
    }

    #[test]
    fn reset_is_deterministic_and_in_range() {
        let spec = suite4().remove(0);
        let mut env1 = Env::new(spec.clone());
        let mut env2 = Env::new(spec);
        let a = env1.reset(42);
        let b = env2.reset(42);
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn palettes_differ_across_tasks() {
        let specs = suite4();
        let mut e0 = Env::new(specs[0].clone());
        let mut e1 = Env::new(specs[1].clone());
        let o0 = e0.reset(1);
        let o1 = e1.reset(1);
        let diff: f64 = o0
            .pixels()
            .iter()
            .zip(o1.pixels())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1.0, "observations too similar: {diff}");
    }

    #[test]
    fn step_right_moves_agent() {
        let spec = suite4().remove(0); // direct-move task
        let mut env = Env::new(spec);
        env.reset(7);
        let before = env.agent_pos();
        env.step(ACTION_RIGHT).unwrap();
        let after = env.agent_pos();
        assert_eq!(after.0, (before.0 + 1).min(env.spec().grid_size as i32 - 1));
        assert_eq!(after.1, before.1);
    }

    #[test]
    fn goal_gives_reward_and_terminates() {
        let spec = suite4().remove(0);
        let mut env = Env::new(spec);
        env.reset(5);
        let mut reward = 0.0;
        for _ in 0..env.spec().max_episode_steps {
            let t = env.step(env.scripted_action()).unwrap();
            reward += t.reward;
            if !t.continuation {
                break;
            }
        }
        assert_eq!(reward, 1.0);
        assert!(env.is_done());
        assert!(matches!(env.step(0), Err(Error::EpisodeTerminated)));
    }

    #[test]
    fn scripted_policy_returns_one_on_every_task() {
        for spec in make_suite(8, ObsProfile::Px16, 11) {
            let mut env = Env::new(spec);
            for seed in 0..20 {
                env.reset(seed);
                let mut ret = 0.0;
                for _ in 0..env.spec().max_episode_steps {
                    let t = env.step(env.scripted_action()).unwrap();
                    ret += t.reward;
                    if !t.continuation {
                        break;
                    }
                }
                assert_eq!(
                    ret, 1.0,
                    "task {} seed {seed} return {ret}",
                    env.spec().task_id
                );
            }
        }
    }

    #[test]
    fn timeout_terminates_without_reward() {
        use crate::envsuite::task::ACTION_NOOP;
        let spec = suite4().remove(0); // direct-move: no-op never reaches the goal
        let mut env = Env::new(spec);
        env.reset(9);
        let mut last = None;
        for _ in 0..env.spec().max_episode_steps {
            let t = env.step(ACTION_NOOP).unwrap();
            last = Some(t);
            if !last.as_ref().unwrap().continuation {
                break;
            }
        }
        let last = last.unwrap();
        assert!(!last.continuation);
        assert_eq!(last.reward, 0.0);
    }
}
