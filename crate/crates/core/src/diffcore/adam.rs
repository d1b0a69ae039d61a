use super::params::ParamSet;
use crate::error::{contract_err, param_err, Result};

/// Bias-corrected Adam moments for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Result<Self> {
        Self::with_hyper(params, learning_rate, 0.9, 0.999, 1e-5)
    }

    pub fn with_hyper(params: &ParamSet, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(param_err!("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || beta1 == 0.0 || beta2 == 0.0 {
            return Err(param_err!("betas must lie in (0, 1)"));
        }
        if epsilon <= 0.0 {
            return Err(param_err!("epsilon must be > 0"));
        }
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Ok(Self {
            step_count: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            m: zeros(),
            v: zeros(),
        })
    }

    /// Applies one update using the gradients stored on `params`, then
    /// zeroes them.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(contract_err!("optimizer built for a different parameter set"));
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(contract_err!("parameter {name} has no gradient"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad().expect("checked").to_vec();
            let data = p.data_mut();
            for k in 0..data.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                data[k] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
