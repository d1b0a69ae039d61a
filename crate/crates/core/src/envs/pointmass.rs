use super::{clip_unit, Action, ActionKind, Env, EnvSpec, Step};
use crate::diffcore::Rng;
use crate::error::{contract_err, Result};

const DT: f64 = 0.05;
const LIMIT: usize = 200;

pub(super) fn spec() -> EnvSpec {
    EnvSpec {
        name: "point_mass",
        obs_dim: 6,
        action_kind: ActionKind::Continuous(2),
        reward_bounds: (-8.01, 0.0),
        episode_limit: LIMIT,
        solve_threshold: -5.0,
    }
}

/// Planar point mass driven by an acceleration command toward a goal.
///
/// The goal is drawn from `[-0.8, 0.8]^2` and the start position is placed
/// uniformly within half a unit of it per axis, at rest.
#[derive(Clone, Debug)]
pub struct PointMass {
    spec: EnvSpec,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
    t: usize,
    rng: Rng,
}

impl PointMass {
    pub fn new(rng: Rng) -> Self {
        let mut env = Self {
            spec: spec(),
            pos: [0.0; 2],
            vel: [0.0; 2],
            goal: [0.0; 2],
            t: 0,
            rng,
        };
        env.reset();
        env
    }

    /// Places the system in an explicit state with a fresh step counter.
    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2], goal: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.goal = goal;
        self.t = 0;
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        for k in 0..2 {
            self.goal[k] = self.rng.uniform_range(-0.8, 0.8);
        }
        for k in 0..2 {
            self.pos[k] = (self.goal[k] + self.rng.uniform_range(-0.5, 0.5)).clamp(-1.0, 1.0);
        }
        self.vel = [0.0; 2];
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: Action<'_>) -> Result<Step> {
        let Action::Continuous(a) = action else {
            return Err(contract_err!("point mass takes continuous actions"));
        };
        let a = clip_unit(a, 2)?;
        let mut dist2 = 0.0;
        for k in 0..2 {
            self.vel[k] = (self.vel[k] + a[k] * DT).clamp(-1.0, 1.0);
            self.pos[k] = (self.pos[k] + self.vel[k] * DT).clamp(-1.0, 1.0);
            dist2 += (self.pos[k] - self.goal[k]).powi(2);
        }
        self.t += 1;
        let reward = -dist2 - 0.01 * (a[0] * a[0] + a[1] * a[1]);
        Ok(Step {
            obs: self.observe(),
            reward,
            terminated: false,
            truncated: self.t >= LIMIT,
        })
    }

    fn observe(&self) -> Vec<f64> {
        vec![
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.goal[0],
            self.goal[1],
        ]
    }

    fn elapsed(&self) -> usize {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_action_at_rest() {
        let mut e = PointMass::new(Rng::new(0));
        e.set_state([0.3, -0.2], [0.0, 0.0], [0.5, 0.5]);
        let s = e.step(Action::Continuous(&[0.0, 0.0])).unwrap();
        assert_eq!(&s.obs[..2], &[0.3, -0.2]);
        assert!((s.reward + (0.2f64.powi(2) + 0.7f64.powi(2))).abs() < 1e-15);

        e.set_state([0.5, 0.5], [0.0, 0.0], [0.5, 0.5]);
        assert_eq!(e.step(Action::Continuous(&[0.0, 0.0])).unwrap().reward, 0.0);
    }

    #[test]
    fn done_exactly_at_limit() {
        let mut e = PointMass::new(Rng::new(3));
        for t in 1..=200 {
            let s = e.step(Action::Continuous(&[0.0, 0.0])).unwrap();
            assert_eq!(s.done(), t == 200);
        }
    }

    #[test]
    fn semi_implicit_update_and_clipping() {
        let mut e = PointMass::new(Rng::new(0));
        e.set_state([0.0, 0.99], [0.0, 0.99], [0.0, 0.0]);
        let s = e.step(Action::Continuous(&[1.0, 5.0])).unwrap();
        assert!((s.obs[2] - 0.05).abs() < 1e-15);
        assert!((s.obs[0] - 0.0025).abs() < 1e-15);
        assert_eq!(s.obs[3], 1.0);
        assert_eq!(s.obs[1], 1.0);
        assert!((s.reward + (0.0025f64.powi(2) + 1.0) + 0.02).abs() < 1e-12);
    }
}
