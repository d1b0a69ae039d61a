//! Seedable toy environments and the synthetic classification dataset.

mod gridworld;
mod pendulum;
mod pointmass;
mod synth;

pub use gridworld::{GridAction, GridWorld, GRID_SIZE};
pub use pendulum::Pendulum;
pub use pointmass::PointMass;
pub use synth::{synth_generate, SynthConfig, SynthDataset};

use serde::{Deserialize, Serialize};

use crate::diffcore::Rng;
use crate::error::{contract_err, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionKind {
    /// Box action space `[-1, 1]^dim`.
    Continuous(usize),
    Discrete(usize),
}

impl ActionKind {
    /// Width of the policy output: action dimension or number of logits.
    pub fn width(&self) -> usize {
        match *self {
            ActionKind::Continuous(d) | ActionKind::Discrete(d) => d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    pub obs_dim: usize,
    pub action_kind: ActionKind,
    /// Per-step reward bounds `(r_min, r_max)`.
    pub reward_bounds: (f64, f64),
    pub episode_limit: usize,
    pub solve_threshold: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum Action<'a> {
    Continuous(&'a [f64]),
    Discrete(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Reached a terminal state; the bootstrap value is zero.
    pub terminated: bool,
    /// Hit the episode limit; the state itself is not terminal.
    pub truncated: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    /// Starts a new episode using the environment's own random stream.
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: Action<'_>) -> Result<Step>;
    fn observe(&self) -> Vec<f64>;
    fn elapsed(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PointMass,
    Pendulum,
    Gridworld,
}

impl EnvKind {
    pub fn spec(self) -> EnvSpec {
        match self {
            EnvKind::PointMass => pointmass::spec(),
            EnvKind::Pendulum => pendulum::spec(),
            EnvKind::Gridworld => gridworld::spec(),
        }
    }

    pub fn make(self, rng: Rng) -> Box<dyn Env> {
        match self {
            EnvKind::PointMass => Box::new(PointMass::new(rng)),
            EnvKind::Pendulum => Box::new(Pendulum::new(rng)),
            EnvKind::Gridworld => Box::new(GridWorld::new(rng)),
        }
    }

    pub fn name(self) -> &'static str {
        self.spec().name
    }
}

impl std::str::FromStr for EnvKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_mass" | "pointmass" => Ok(EnvKind::PointMass),
            "pendulum" => Ok(EnvKind::Pendulum),
            "gridworld" => Ok(EnvKind::Gridworld),
            other => Err(crate::Error::Config(format!("unknown env {other:?}"))),
        }
    }
}

/// Outcome of one vectorized step for a single environment. When the episode
/// ended, `step.obs` is the final observation and `next_obs` is the first
/// observation of the freshly reset episode.
#[derive(Clone, Debug)]
pub struct VecStep {
    pub step: Step,
    pub next_obs: Vec<f64>,
    /// Undiscounted return of the episode that just finished.
    pub episode_return: Option<f64>,
}

/// A fixed set of independently seeded environments stepped together with
/// automatic resets.
pub struct VecEnv {
    envs: Vec<Box<dyn Env>>,
    obs: Vec<Vec<f64>>,
    running: Vec<f64>,
    spec: EnvSpec,
}

impl VecEnv {
    pub fn new(kind: EnvKind, n: usize, rng: &Rng) -> Result<Self> {
        if n == 0 {
            return Err(contract_err!("need at least one environment"));
        }
        let mut envs: Vec<Box<dyn Env>> = (0..n).map(|i| kind.make(rng.split(i as u64))).collect();
        let obs = envs.iter_mut().map(|e| e.reset()).collect();
        Ok(Self {
            envs,
            obs,
            running: vec![0.0; n],
            spec: kind.spec(),
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn observations(&self) -> &[Vec<f64>] {
        &self.obs
    }

    /// Row-major `[n, action_width]` continuous actions, or one index per env
    /// for discrete spaces.
    pub fn step_continuous(&mut self, actions: &[f64]) -> Result<Vec<VecStep>> {
        let w = self.spec.action_kind.width();
        if actions.len() != w * self.len() {
            return Err(contract_err!(
                "expected {} action values, got {}",
                w * self.len(),
                actions.len()
            ));
        }
        self.step_with(|i| Action::Continuous(&actions[i * w..(i + 1) * w]))
    }

    pub fn step_discrete(&mut self, actions: &[usize]) -> Result<Vec<VecStep>> {
        if actions.len() != self.len() {
            return Err(contract_err!("expected {} actions, got {}", self.len(), actions.len()));
        }
        self.step_with(|i| Action::Discrete(actions[i]))
    }

    fn step_with<'a, F>(&mut self, action: F) -> Result<Vec<VecStep>>
    where
        F: Fn(usize) -> Action<'a> + Sync + Send,
    {
        let out = par::map_mut(&mut self.envs, |i, env| -> Result<(Step, Vec<f64>)> {
            let step = env.step(action(i))?;
            let next = if step.done() { env.reset() } else { step.obs.clone() };
            Ok((step, next))
        });
        let mut steps = Vec::with_capacity(out.len());
        for (i, r) in out.into_iter().enumerate() {
            let (step, next_obs) = r?;
            self.running[i] += step.reward;
            let episode_return = if step.done() {
                Some(std::mem::take(&mut self.running[i]))
            } else {
                None
            };
            self.obs[i].clone_from(&next_obs);
            steps.push(VecStep {
                step,
                next_obs,
                episode_return,
            });
        }
        Ok(steps)
    }
}

/// Reads an action slice with defensive clipping to `[-1, 1]`.
pub(crate) fn clip_unit(a: &[f64], dim: usize) -> Result<Vec<f64>> {
    if a.len() != dim {
        return Err(contract_err!("action has {} entries, expected {dim}", a.len()));
    }
    if a.iter().any(|x| x.is_nan()) {
        return Err(contract_err!("action contains NaN"));
    }
    Ok(a.iter().map(|x| x.clamp(-1.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rollout(kind: EnvKind, seed: u64, steps: usize) -> Vec<(Vec<f64>, f64)> {
        let mut env = kind.make(Rng::new(seed));
        let mut arng = Rng::new(seed ^ 0xabc);
        env.reset();
        let spec = env.spec().clone();
        let mut out = Vec::new();
        for _ in 0..steps {
            let s = match spec.action_kind {
                ActionKind::Continuous(d) => env.step(Action::Continuous(&arng.uniform_vec(d, -1.0, 1.0))),
                ActionKind::Discrete(n) => env.step(Action::Discrete(arng.below(n))),
            }
            .unwrap();
            let done = s.done();
            out.push((s.obs, s.reward));
            if done {
                env.reset();
            }
        }
        out
    }

    #[test]
    fn trajectories_are_bit_exact_and_within_bounds() {
        for kind in [EnvKind::PointMass, EnvKind::Pendulum, EnvKind::Gridworld] {
            let spec = kind.spec();
            let a = rollout(kind, 7, 600);
            let b = rollout(kind, 7, 600);
            assert_eq!(a, b, "{kind:?}");
            for (obs, r) in &a {
                assert_eq!(obs.len(), spec.obs_dim);
                assert!(obs.iter().all(|x| x.is_finite()));
                assert!(*r >= spec.reward_bounds.0 && *r <= spec.reward_bounds.1, "{kind:?} {r}");
            }
        }
    }

    #[test]
    fn vec_env_resets_and_reports_returns() {
        let mut v = VecEnv::new(EnvKind::PointMass, 3, &Rng::new(1)).unwrap();
        let zeros = vec![0.0; 6];
        let mut finished = 0;
        for t in 0..200 {
            let steps = v.step_continuous(&zeros).unwrap();
            for s in &steps {
                assert_eq!(s.step.truncated, t == 199);
                finished += usize::from(s.episode_return.is_some());
            }
        }
        assert_eq!(finished, 3);
        assert!(v.step_continuous(&[0.0; 5]).is_err());
    }
}
