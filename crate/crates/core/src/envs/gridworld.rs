use super::{Action, ActionKind, Env, EnvSpec, Step};
use crate::diffcore::Rng;
use crate::error::{contract_err, Result};

pub const GRID_SIZE: usize = 8;
const LIMIT: usize = 100;
const STEP_COST: f64 = 0.01;

pub(super) fn spec() -> EnvSpec {
    EnvSpec {
        name: "gridworld",
        obs_dim: 2 * GRID_SIZE * GRID_SIZE,
        action_kind: ActionKind::Discrete(4),
        reward_bounds: (-STEP_COST, 1.0),
        episode_limit: LIMIT,
        solve_threshold: 0.8,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridAction {
    Up,
    Down,
    Left,
    Right,
}

impl GridAction {
    pub const ALL: [GridAction; 4] = [GridAction::Up, GridAction::Down, GridAction::Left, GridAction::Right];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| contract_err!("grid action index {i} out of range 0..4"))
    }

    /// Cell reached from `(row, col)`; walls leave the position unchanged.
    pub fn apply(self, (r, c): (usize, usize)) -> (usize, usize) {
        let last = GRID_SIZE - 1;
        match self {
            GridAction::Up => (r.saturating_sub(1), c),
            GridAction::Down => ((r + 1).min(last), c),
            GridAction::Left => (r, c.saturating_sub(1)),
            GridAction::Right => (r, (c + 1).min(last)),
        }
    }
}

/// 8×8 navigation task. The goal sits in the bottom-right corner and each
/// episode starts from a uniformly drawn non-goal cell. Every move costs
/// 0.01 except the one entering the goal, which pays +1 and terminates.
#[derive(Clone, Debug)]
pub struct GridWorld {
    spec: EnvSpec,
    pub pos: (usize, usize),
    pub goal: (usize, usize),
    t: usize,
    rng: Rng,
}

impl GridWorld {
    pub fn new(rng: Rng) -> Self {
        let mut env = Self {
            spec: spec(),
            pos: (0, 0),
            goal: (GRID_SIZE - 1, GRID_SIZE - 1),
            t: 0,
            rng,
        };
        env.reset();
        env
    }

    pub fn set_state(&mut self, pos: (usize, usize), goal: (usize, usize)) {
        self.pos = pos;
        self.goal = goal;
        self.t = 0;
    }
}

impl Env for GridWorld {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        self.goal = (GRID_SIZE - 1, GRID_SIZE - 1);
        let cells = GRID_SIZE * GRID_SIZE;
        let goal_idx = self.goal.0 * GRID_SIZE + self.goal.1;
        let mut k = self.rng.below(cells - 1);
        if k >= goal_idx {
            k += 1;
        }
        self.pos = (k / GRID_SIZE, k % GRID_SIZE);
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: Action<'_>) -> Result<Step> {
        let Action::Discrete(i) = action else {
            return Err(contract_err!("gridworld takes discrete actions"));
        };
        self.pos = GridAction::from_index(i)?.apply(self.pos);
        self.t += 1;
        let terminated = self.pos == self.goal;
        Ok(Step {
            obs: self.observe(),
            reward: if terminated { 1.0 } else { -STEP_COST },
            terminated,
            truncated: !terminated && self.t >= LIMIT,
        })
    }

    fn observe(&self) -> Vec<f64> {
        let cells = GRID_SIZE * GRID_SIZE;
        let mut o = vec![0.0; 2 * cells];
        o[self.pos.0 * GRID_SIZE + self.pos.1] = 1.0;
        o[cells + self.goal.0 * GRID_SIZE + self.goal.1] = 1.0;
        o
    }

    fn elapsed(&self) -> usize {
        self.t
    }
}
