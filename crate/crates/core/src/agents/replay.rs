use crate::diffcore::{Rng, Tensor};
use crate::error::{contract_err, param_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// Terminal transition: no bootstrap from `s_next`.
    pub done: bool,
}

/// Column-stacked minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Tensor,
    pub act: Tensor,
    pub rew: Vec<f64>,
    pub next_obs: Tensor,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rew.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rew.is_empty()
    }
}

/// Fixed-capacity FIFO ring of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    obs: Vec<f64>,
    act: Vec<f64>,
    rew: Vec<f64>,
    next_obs: Vec<f64>,
    done: Vec<bool>,
    cursor: usize,
    len: usize,
    rng: Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize, rng: Rng) -> Result<Self> {
        if capacity == 0 {
            return Err(param_err!("replay capacity must be >= 1"));
        }
        Ok(Self {
            capacity,
            obs_dim,
            act_dim,
            obs: Vec::new(),
            act: Vec::new(),
            rew: Vec::new(),
            next_obs: Vec::new(),
            done: Vec::new(),
            cursor: 0,
            len: 0,
            rng,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.s.len() != self.obs_dim || t.s_next.len() != self.obs_dim || t.a.len() != self.act_dim {
            return Err(contract_err!(
                "transition widths ({}, {}, {}) do not match buffer ({}, {})",
                t.s.len(),
                t.a.len(),
                t.s_next.len(),
                self.obs_dim,
                self.act_dim
            ));
        }
        let (o, a, i) = (self.obs_dim, self.act_dim, self.cursor);
        if self.len < self.capacity {
            self.obs.extend_from_slice(&t.s);
            self.act.extend_from_slice(&t.a);
            self.rew.push(t.r);
            self.next_obs.extend_from_slice(&t.s_next);
            self.done.push(t.done);
            self.len += 1;
        } else {
            self.obs[i * o..(i + 1) * o].copy_from_slice(&t.s);
            self.act[i * a..(i + 1) * a].copy_from_slice(&t.a);
            self.rew[i] = t.r;
            self.next_obs[i * o..(i + 1) * o].copy_from_slice(&t.s_next);
            self.done[i] = t.done;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Slot indices drawn uniformly with replacement from the filled region.
    pub fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        if self.len == 0 {
            return Err(contract_err!("cannot sample from an empty buffer"));
        }
        Ok((0..n).map(|_| self.rng.below(self.len)).collect())
    }

    pub fn sample(&mut self, n: usize) -> Result<Batch> {
        let idx = self.sample_indices(n)?;
        Ok(self.gather(&idx))
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let (o, a) = (self.obs_dim, self.act_dim);
        let pick = |src: &[f64], w: usize| -> Tensor {
            let mut v = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                v.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
            Tensor::matrix(idx.len(), w, v).expect("non-empty batch")
        };
        Batch {
            obs: pick(&self.obs, o),
            act: pick(&self.act, a),
            rew: idx.iter().map(|&i| self.rew[i]).collect(),
            next_obs: pick(&self.next_obs, o),
            done: idx.iter().map(|&i| self.done[i]).collect(),
        }
    }

    /// Reward stored in slot `i`.
    pub fn reward_at(&self, i: usize) -> f64 {
        self.rew[i]
    }
}
