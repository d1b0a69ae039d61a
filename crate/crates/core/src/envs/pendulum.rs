use std::f64::consts::PI;

use super::{clip_unit, Action, ActionKind, Env, EnvSpec, Step};
use crate::diffcore::Rng;
use crate::error::{contract_err, Result};

const G: f64 = 10.0;
const M: f64 = 1.0;
const L: f64 = 1.0;
const DT: f64 = 0.05;
const MAX_SPEED: f64 = 8.0;
const MAX_TORQUE: f64 = 2.0;
const LIMIT: usize = 200;

pub(super) fn spec() -> EnvSpec {
    EnvSpec {
        name: "pendulum",
        obs_dim: 3,
        action_kind: ActionKind::Continuous(1),
        reward_bounds: (
            -(PI * PI + 0.1 * MAX_SPEED * MAX_SPEED + 0.001 * MAX_TORQUE * MAX_TORQUE),
            0.0,
        ),
        episode_limit: LIMIT,
        solve_threshold: -200.0,
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Torque-limited pendulum swing-up with `theta = 0` upright.
#[derive(Clone, Debug)]
pub struct Pendulum {
    spec: EnvSpec,
    pub theta: f64,
    pub theta_dot: f64,
    t: usize,
    rng: Rng,
}

impl Pendulum {
    pub fn new(rng: Rng) -> Self {
        let mut env = Self {
            spec: spec(),
            theta: 0.0,
            theta_dot: 0.0,
            t: 0,
            rng,
        };
        env.reset();
        env
    }

    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.t = 0;
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        self.theta = self.rng.uniform_range(-PI, PI);
        self.theta_dot = self.rng.uniform_range(-1.0, 1.0);
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: Action<'_>) -> Result<Step> {
        let Action::Continuous(a) = action else {
            return Err(contract_err!("pendulum takes continuous actions"));
        };
        let u = clip_unit(a, 1)?[0] * MAX_TORQUE;
        let th = wrap_angle(self.theta);
        // Cost is charged on the state the torque is applied in.
        let reward = -(th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u);
        let acc = 3.0 * G / (2.0 * L) * self.theta.sin() + 3.0 / (M * L * L) * u;
        self.theta_dot = (self.theta_dot + acc * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta += self.theta_dot * DT;
        self.t += 1;
        Ok(Step {
            obs: self.observe(),
            reward,
            terminated: false,
            truncated: self.t >= LIMIT,
        })
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    fn elapsed(&self) -> usize {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upright_equilibrium() {
        let mut p = Pendulum::new(Rng::new(0));
        p.set_state(0.0, 0.0);
        let s = p.step(Action::Continuous(&[0.0])).unwrap();
        assert_eq!(s.reward, 0.0);
        assert_eq!(s.obs, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn hanging_down_costs_pi_squared() {
        let mut p = Pendulum::new(Rng::new(0));
        p.set_state(PI, 0.0);
        let s = p.step(Action::Continuous(&[0.0])).unwrap();
        assert!((s.reward + PI * PI).abs() < 1e-12);
    }

    #[test]
    fn speed_stays_bounded() {
        let mut p = Pendulum::new(Rng::new(5));
        let mut r = Rng::new(6);
        for _ in 0..20_000 {
            let a = if r.uniform() < 0.5 { 1.0 } else { -1.0 };
            let s = p.step(Action::Continuous(&[a])).unwrap();
            assert!(s.obs[2].abs() <= MAX_SPEED);
            if s.done() {
                p.reset();
            }
        }
    }

    #[test]
    fn wrap_is_periodic() {
        for k in -3..=3 {
            let x = 0.4 + 2.0 * PI * f64::from(k);
            assert!((wrap_angle(x) - 0.4).abs() < 1e-12);
        }
    }
}
