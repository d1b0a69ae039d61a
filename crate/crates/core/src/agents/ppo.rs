use serde::{Deserialize, Serialize};

use super::MetricsSink;
use crate::diagnostics::{self, MetricsRow};
use crate::diffcore::{AdamState, ParamSet, Rng, Tape, Tensor, Var};
use crate::envs::{ActionKind, EnvKind, VecEnv};
use crate::error::{param_err, shape_err, Error, Result};
use crate::heads::{HeadCtx, HeadKind, HeadMode};
use crate::networks::{Checkpoint, HeadedMlp, MlpSpec, OutputAct};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs_per_batch: usize,
    pub minibatch_size: usize,
    /// Steps per environment in one rollout.
    pub rollout_length: usize,
    pub num_envs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub hidden: usize,
    /// Initial log standard deviation of Gaussian policies.
    pub init_log_std: f64,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub diag_states: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs_per_batch: 4,
            minibatch_size: 256,
            rollout_length: 128,
            num_envs: 8,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 2.5e-4,
            hidden: 64,
            init_log_std: -0.5,
            total_steps: 200_000,
            eval_interval: 10_240,
            eval_episodes: 16,
            diag_states: 1024,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0) {
            return Err(param_err!("clip_eps must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(param_err!("gamma and gae_lambda must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(param_err!("learning_rate must be > 0"));
        }
        for (name, v) in [
            ("epochs_per_batch", self.epochs_per_batch),
            ("minibatch_size", self.minibatch_size),
            ("rollout_length", self.rollout_length),
            ("num_envs", self.num_envs),
            ("hidden", self.hidden),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return Err(param_err!("{name} must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Generalized advantage estimates for one trajectory segment.
///
/// `values` holds `V(s_0) … V(s_T)`, the last entry being the bootstrap
/// value after the segment. `dones[t]` marks that the episode ended at step
/// `t`, which cuts both the bootstrap and the trace. Returns raw
/// (unnormalized) advantages and `advantages + values[..T]`.
pub fn ppo_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = rewards.len();
    if values.len() != t + 1 || dones.len() != t {
        return Err(shape_err!(
            "gae needs T rewards, T dones and T+1 values; got {}, {}, {}",
            t,
            dones.len(),
            values.len()
        ));
    }
    let mut adv = vec![0.0; t];
    let mut acc = 0.0;
    for i in (0..t).rev() {
        let live = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + gamma * values[i + 1] * live - values[i];
        acc = delta + gamma * lambda * live * acc;
        adv[i] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Policy, value network and optional Gaussian log-std.
#[derive(Clone, Debug)]
pub struct PpoAgent {
    pub policy: HeadedMlp,
    pub value: HeadedMlp,
    /// `[1, action_dim]` log standard deviation for continuous actions.
    pub log_std: Option<ParamSet>,
    pub action_kind: ActionKind,
    opt_policy: AdamState,
    opt_value: AdamState,
    opt_std: Option<AdamState>,
}

fn head_ctx() -> HeadCtx<'static> {
    // Stochastic heads run noise-free so rollout and update log-probs agree.
    HeadCtx {
        mode: HeadMode::Train,
        rng: None,
        zero_noise: true,
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

impl PpoAgent {
    pub fn new(obs_dim: usize, action_kind: ActionKind, head: &HeadKind, cfg: &PpoConfig, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        let mut init = rng.split(0);
        let (out, act) = match action_kind {
            ActionKind::Discrete(n) => (n, OutputAct::Identity),
            ActionKind::Continuous(d) => (d, OutputAct::Tanh),
        };
        let policy = HeadedMlp::new(
            MlpSpec {
                in_dim: obs_dim,
                hidden: cfg.hidden,
                out_dim: out,
                head: head.clone(),
                output: act,
            },
            &mut init,
        )?;
        let value = HeadedMlp::new(
            MlpSpec {
                in_dim: obs_dim,
                hidden: cfg.hidden,
                out_dim: 1,
                head: HeadKind::Baseline,
                output: OutputAct::Identity,
            },
            &mut init,
        )?;
        let log_std = match action_kind {
            ActionKind::Continuous(d) => {
                let mut p = ParamSet::new();
                p.push("policy.log_std", Tensor::matrix(1, d, vec![cfg.init_log_std; d])?);
                Some(p)
            }
            ActionKind::Discrete(_) => None,
        };
        Ok(Self {
            opt_policy: AdamState::new(policy.params(), cfg.learning_rate)?,
            opt_value: AdamState::new(value.params(), cfg.learning_rate)?,
            opt_std: log_std
                .as_ref()
                .map(|p| AdamState::new(p, cfg.learning_rate))
                .transpose()?,
            policy,
            value,
            log_std,
            action_kind,
        })
    }

    fn forward_policy(&self, obs: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let b = self.policy.params().bind_frozen(&mut tape);
        let o = tape.constant(obs.clone());
        let f = self.policy.forward(&mut tape, &b, o, &mut head_ctx())?;
        Ok((tape.value(f.out).clone(), tape.value(f.penult).clone()))
    }

    pub fn values(&self, obs: &Tensor) -> Result<Vec<f64>> {
        Ok(self.value.infer(obs)?.0.into_data())
    }

    /// Samples actions; returns `(flat actions, log-probs)`. Discrete actions
    /// are stored as their index.
    pub fn sample(&self, obs: &Tensor, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        let (out, _) = self.forward_policy(obs)?;
        let (n, w) = out.dims2()?;
        let mut actions = Vec::new();
        let mut logp = Vec::with_capacity(n);
        match self.action_kind {
            ActionKind::Discrete(_) => {
                for i in 0..n {
                    let lp = log_softmax_row(out.row(i));
                    let u = rng.uniform();
                    let mut acc = 0.0;
                    let mut pick = w - 1;
                    for (k, l) in lp.iter().enumerate() {
                        acc += l.exp();
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    actions.push(pick as f64);
                    logp.push(lp[pick]);
                }
            }
            ActionKind::Continuous(_) => {
                let ls = self
                    .log_std
                    .as_ref()
                    .expect("continuous agent has log_std")
                    .get(0)
                    .data()
                    .to_vec();
                for i in 0..n {
                    let mut lp = 0.0;
                    for (j, &mu) in out.row(i).iter().enumerate() {
                        let e = rng.normal();
                        actions.push(mu + ls[j].exp() * e);
                        lp += -0.5 * e * e - ls[j] - 0.5 * LN_2PI;
                    }
                    logp.push(lp);
                }
            }
        }
        Ok((actions, logp))
    }

    /// Greedy action (argmax or mean) and penultimate policy features.
    pub fn act_greedy(&self, obs: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let (out, feat) = self.forward_policy(obs)?;
        let acts = match self.action_kind {
            ActionKind::Discrete(_) => (0..out.dims2()?.0)
                .map(|i| {
                    let r = out.row(i);
                    (0..r.len()).fold(0, |b, k| if r[k] > r[b] { k } else { b }) as f64
                })
                .collect(),
            ActionKind::Continuous(_) => out.data().to_vec(),
        };
        Ok((acts, feat))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_params("policy", self.policy.params());
        c.push_params("value", self.value.params());
        if let Some(p) = &self.log_std {
            c.push_params("std", p);
        }
        c
    }
}

fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Time-major on-policy batch: row `t * num_envs + e`.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub obs: Tensor,
    /// Flat actions: one index per row for discrete spaces.
    pub actions: Vec<f64>,
    pub logp: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the observation following the last step, per env.
    pub last_values: Vec<f64>,
    pub num_envs: usize,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Per-env GAE stitched back into time-major order.
    pub fn advantages(&self, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.num_envs;
        let t = self.len() / n;
        let mut adv = vec![0.0; self.len()];
        let mut ret = vec![0.0; self.len()];
        for e in 0..n {
            let r: Vec<f64> = (0..t).map(|k| self.rewards[k * n + e]).collect();
            let d: Vec<bool> = (0..t).map(|k| self.dones[k * n + e]).collect();
            let mut v: Vec<f64> = (0..t).map(|k| self.values[k * n + e]).collect();
            v.push(self.last_values[e]);
            let (a, g) = ppo_gae(&r, &v, &d, gamma, lambda)?;
            for k in 0..t {
                adv[k * n + e] = a[k];
                ret[k * n + e] = g[k];
            }
        }
        Ok((adv, ret))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpoLosses {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// Minibatches dropped because the probability ratio was not finite.
    pub skipped: usize,
}

struct MinibatchLoss {
    loss: Var,
    policy: Var,
    value: Var,
    entropy: Var,
}

/// Builds the clipped-surrogate objective for the rows `idx`.
#[allow(clippy::too_many_arguments)]
fn minibatch_loss(
    tape: &mut Tape,
    agent: &PpoAgent,
    bounds: (
        &crate::diffcore::Bound,
        &crate::diffcore::Bound,
        Option<&crate::diffcore::Bound>,
    ),
    rollout: &Rollout,
    idx: &[usize],
    adv: &[f64],
    ret: &[f64],
    cfg: &PpoConfig,
) -> Result<Option<MinibatchLoss>> {
    let m = idx.len();
    let obs_rows: Vec<Vec<f64>> = idx.iter().map(|&i| rollout.obs.row(i).to_vec()).collect();
    let obs = tape.constant(Tensor::from_rows(&obs_rows)?);
    let f = agent.policy.forward(tape, bounds.0, obs, &mut head_ctx())?;
    let (logp, entropy) = match agent.action_kind {
        ActionKind::Discrete(_) => {
            let lp = tape.log_softmax(f.out)?;
            let acts: Vec<usize> = idx.iter().map(|&i| rollout.actions[i] as usize).collect();
            let picked = tape.pick(lp, &acts)?;
            let p = tape.exp(lp)?;
            let plp = tape.mul(p, lp)?;
            let s = tape.sum(plp)?;
            (picked, tape.scale(s, -1.0 / m as f64)?)
        }
        ActionKind::Continuous(d) => {
            let ls = bounds.2.expect("continuous agent binds log_std").get(0);
            let ones = tape.constant(Tensor::full(&[m, 1], 1.0));
            let ls_rows = tape.matmul(ones, ls)?;
            let a_rows: Vec<f64> = idx
                .iter()
                .flat_map(|&i| rollout.actions[i * d..(i + 1) * d].iter().copied())
                .collect();
            let a = tape.constant(Tensor::matrix(m, d, a_rows)?);
            let diff = tape.sub(a, f.out)?;
            let neg_ls = tape.neg(ls_rows)?;
            let inv_std = tape.exp(neg_ls)?;
            let z = tape.mul(diff, inv_std)?;
            let z2 = tape.square(z)?;
            let half = tape.scale(z2, -0.5)?;
            let lp = tape.sub(half, ls_rows)?;
            let lp = tape.add_scalar(lp, -0.5 * LN_2PI)?;
            let logp = tape.row_sum(lp)?;
            let ent = tape.sum(ls)?;
            (logp, tape.add_scalar(ent, 0.5 * (LN_2PI + 1.0) * d as f64)?)
        }
    };
    let old = tape.constant(Tensor::matrix(m, 1, idx.iter().map(|&i| rollout.logp[i]).collect())?);
    let log_ratio = tape.sub(logp, old)?;
    let ratio = match tape.exp(log_ratio) {
        Ok(r) => r,
        Err(Error::Numeric(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !tape.value(ratio).is_finite() {
        return Ok(None);
    }
    let a = tape.constant(Tensor::matrix(m, 1, idx.iter().map(|&i| adv[i]).collect())?);
    let s1 = tape.mul(ratio, a)?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)?;
    let s2 = tape.mul(clipped, a)?;
    let surr = tape.minimum(s1, s2)?;
    let surr = tape.mean(surr)?;
    let policy = tape.neg(surr)?;

    let vf = agent.value.forward(tape, bounds.1, obs, &mut HeadCtx::eval())?;
    let r = tape.constant(Tensor::matrix(m, 1, idx.iter().map(|&i| ret[i]).collect())?);
    let vd = tape.sub(vf.out, r)?;
    let vsq = tape.square(vd)?;
    let value = tape.mean(vsq)?;

    let vterm = tape.scale(value, cfg.value_coef)?;
    let eterm = tape.scale(entropy, -cfg.entropy_coef)?;
    let mut loss = tape.add(policy, vterm)?;
    loss = tape.add(loss, eterm)?;
    if let Some(aux) = f.aux_loss {
        loss = tape.add(loss, aux)?;
    }
    Ok(Some(MinibatchLoss {
        loss,
        policy,
        value,
        entropy,
    }))
}

/// Several epochs of clipped-surrogate minibatch updates on one rollout.
/// Advantages are normalized over the whole rollout.
pub fn ppo_update(agent: &mut PpoAgent, rollout: &Rollout, cfg: &PpoConfig, rng: &mut Rng) -> Result<PpoLosses> {
    let (mut adv, ret) = rollout.advantages(cfg.gamma, cfg.gae_lambda)?;
    let n = adv.len();
    let mean = adv.iter().sum::<f64>() / n as f64;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));

    let mut out = PpoLosses::default();
    let mut counted = 0usize;
    for _ in 0..cfg.epochs_per_batch {
        let order = rng.permutation(n);
        for idx in order.chunks(cfg.minibatch_size) {
            let mut tape = Tape::new();
            let pb = agent.policy.params().bind(&mut tape);
            let vb = agent.value.params().bind(&mut tape);
            let sb = agent.log_std.as_ref().map(|p| p.bind(&mut tape));
            let Some(mb) = minibatch_loss(&mut tape, agent, (&pb, &vb, sb.as_ref()), rollout, idx, &adv, &ret, cfg)?
            else {
                out.skipped += 1;
                continue;
            };
            if !tape.value(mb.loss).item().is_finite() {
                out.skipped += 1;
                continue;
            }
            out.policy += tape.value(mb.policy).item();
            out.value += tape.value(mb.value).item();
            out.entropy += tape.value(mb.entropy).item();
            counted += 1;
            let g = tape.backward(mb.loss)?;
            agent.policy.params_mut().accumulate(&g, &pb)?;
            agent.opt_policy.step(agent.policy.params_mut())?;
            agent.value.params_mut().accumulate(&g, &vb)?;
            agent.opt_value.step(agent.value.params_mut())?;
            if let (Some(p), Some(b), Some(o)) = (agent.log_std.as_mut(), sb.as_ref(), agent.opt_std.as_mut()) {
                p.accumulate(&g, b)?;
                o.step(p)?;
            }
        }
    }
    if counted > 0 {
        let c = counted as f64;
        out.policy /= c;
        out.value /= c;
        out.entropy /= c;
    }
    Ok(out)
}

fn step_envs(envs: &mut VecEnv, kind: ActionKind, actions: &[f64]) -> Result<Vec<crate::envs::VecStep>> {
    match kind {
        ActionKind::Discrete(_) => envs.step_discrete(&actions.iter().map(|&a| a as usize).collect::<Vec<_>>()),
        ActionKind::Continuous(_) => envs.step_continuous(actions),
    }
}

/// Greedy-policy returns over `episodes` fresh episodes plus visited states.
pub fn evaluate_ppo(agent: &PpoAgent, env: EnvKind, episodes: usize, rng: &Rng) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut envs = VecEnv::new(env, episodes, rng)?;
    let mut returns: Vec<Option<f64>> = vec![None; episodes];
    let mut states = Vec::new();
    while returns.iter().any(Option::is_none) {
        let obs = Tensor::from_rows(envs.observations())?;
        for (i, r) in returns.iter().enumerate() {
            if r.is_none() {
                states.push(obs.row(i).to_vec());
            }
        }
        let (acts, _) = agent.act_greedy(&obs)?;
        for (i, s) in step_envs(&mut envs, agent.action_kind, &acts)?.into_iter().enumerate() {
            if returns[i].is_none() {
                returns[i] = s.episode_return;
            }
        }
    }
    Ok((
        returns.iter().map(|r| r.unwrap_or(0.0)).sum::<f64>() / episodes as f64,
        states,
    ))
}

#[derive(Clone, Debug)]
pub struct PpoRun {
    pub rows: Vec<MetricsRow>,
    pub agent: PpoAgent,
}

impl PpoRun {
    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.eval_return)
    }
}

fn ppo_diagnostics(agent: &PpoAgent, states: &Tensor, row: &mut MetricsRow) -> Result<()> {
    let (acts, feat) = agent.act_greedy(states)?;
    let (_, vfeat) = agent.value.infer(states)?;
    row.eff_rank_actor = Some(diagnostics::effective_rank(&feat, 0.99)? as f64);
    row.eff_rank_critic = Some(diagnostics::effective_rank(&vfeat, 0.99)? as f64);
    row.stable_rank = Some(diagnostics::stable_rank(&vfeat)?);
    row.dormant_frac = Some(diagnostics::dormant_fraction(&vfeat, 1e-5)?);
    row.weight_norm_actor = Some(diagnostics::weight_norm(agent.policy.params()).total);
    row.weight_norm_critic = Some(diagnostics::weight_norm(agent.value.params()).total);
    row.gini = Some(diagnostics::gini(&feat));
    if let HeadKind::Sem(c) = &agent.policy.spec().head {
        row.simplex_entropy = Some(diagnostics::simplex_entropy(&feat, c.groups, c.group_dim)?);
    }
    if let ActionKind::Continuous(d) = agent.action_kind {
        row.action_std = Some(diagnostics::action_std(&Tensor::matrix(acts.len() / d, d, acts)?)?);
    }
    Ok(())
}

/// Full PPO run on `env` with `head` at the policy's penultimate layer.
pub fn ppo_train(
    env: EnvKind,
    cfg: &PpoConfig,
    head: &HeadKind,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> Result<PpoRun> {
    cfg.validate()?;
    let spec = env.spec();
    let root = Rng::new(seed);
    let mut envs = VecEnv::new(env, cfg.num_envs, &root.split(1))?;
    let eval_rng = root.split(2);
    let mut agent = PpoAgent::new(spec.obs_dim, spec.action_kind, head, cfg, &root.split(3))?;
    let mut act_rng = root.split(4);
    let mut update_rng = root.split(5);
    let width = match spec.action_kind {
        ActionKind::Discrete(_) => 1,
        ActionKind::Continuous(d) => d,
    };

    let mut rows = Vec::new();
    let mut step = 0usize;
    let mut next_eval = cfg.eval_interval.min(cfg.total_steps);
    while step < cfg.total_steps {
        let rows_n = cfg.rollout_length * cfg.num_envs;
        let mut obs_rows = Vec::with_capacity(rows_n);
        let mut actions = Vec::with_capacity(rows_n * width);
        let mut logp = Vec::with_capacity(rows_n);
        let mut values = Vec::with_capacity(rows_n);
        let mut rewards = Vec::with_capacity(rows_n);
        let mut dones = Vec::with_capacity(rows_n);
        for _ in 0..cfg.rollout_length {
            let obs = Tensor::from_rows(envs.observations())?;
            let (a, lp) = agent.sample(&obs, &mut act_rng)?;
            values.extend(agent.values(&obs)?);
            let steps = step_envs(&mut envs, spec.action_kind, &a)?;
            for s in &steps {
                rewards.push(s.step.reward);
                dones.push(s.step.done());
            }
            for i in 0..cfg.num_envs {
                obs_rows.push(obs.row(i).to_vec());
            }
            actions.extend(a);
            logp.extend(lp);
        }
        let last = Tensor::from_rows(envs.observations())?;
        let rollout = Rollout {
            obs: Tensor::from_rows(&obs_rows)?,
            actions,
            logp,
            values,
            rewards,
            dones,
            last_values: agent.values(&last)?,
            num_envs: cfg.num_envs,
        };
        let losses = ppo_update(&mut agent, &rollout, cfg, &mut update_rng)?;
        step += rows_n;

        if step >= next_eval || step >= cfg.total_steps {
            let mut row = MetricsRow::at(step as u64);
            let (ret, states) = evaluate_ppo(&agent, env, cfg.eval_episodes, &eval_rng)?;
            row.eval_return = Some(ret);
            row.actor_loss = Some(losses.policy);
            row.critic_loss = Some(losses.value);
            let keep = states.len().min(cfg.diag_states);
            ppo_diagnostics(&agent, &Tensor::from_rows(&states[..keep])?, &mut row)?;
            sink.record(&row)?;
            sink.checkpoint(&agent.checkpoint())?;
            rows.push(row);
            while next_eval <= step {
                next_eval += cfg.eval_interval;
            }
        }
    }
    Ok(PpoRun { rows, agent })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(r: &[f64], v: &[f64], d: &[bool], g: f64, l: f64) -> Vec<f64> {
        let t = r.len();
        (0..t)
            .map(|s| {
                let mut total = 0.0;
                let mut w = 1.0;
                for k in s..t {
                    let live = if d[k] { 0.0 } else { 1.0 };
                    total += w * (r[k] + g * v[k + 1] * live - v[k]);
                    if d[k] {
                        break;
                    }
                    w *= g * l;
                }
                total
            })
            .collect()
    }

    #[test]
    fn gae_matches_brute_force() {
        let mut rng = Rng::new(0);
        for _ in 0..100 {
            let t = 1 + rng.below(40);
            let r = rng.normal_vec(t);
            let v = rng.normal_vec(t + 1);
            let d: Vec<bool> = (0..t).map(|_| rng.uniform() < 0.1).collect();
            let (g, l) = (rng.uniform(), rng.uniform());
            let (a, ret) = ppo_gae(&r, &v, &d, g, l).unwrap();
            for (x, y) in a.iter().zip(brute_force(&r, &v, &d, g, l)) {
                assert!((x - y).abs() < 1e-10);
            }
            for k in 0..t {
                assert!((ret[k] - a[k] - v[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gae_special_cases() {
        let r = [1.0, 2.0, 3.0];
        let v = [0.5, -1.0, 2.0, 4.0];
        let d = [false, true, false];
        let (a, _) = ppo_gae(&r, &v, &d, 0.9, 0.0).unwrap();
        assert!((a[0] - (1.0 + -0.9 - 0.5)).abs() < 1e-15);
        assert!((a[1] - (2.0 - (-1.0))).abs() < 1e-15);
        assert!((a[2] - (3.0 + 0.9 * 4.0 - 2.0)).abs() < 1e-15);
        let (a, _) = ppo_gae(&r, &[0.0; 4], &[false; 3], 1.0, 1.0).unwrap();
        assert_eq!(a, vec![6.0, 5.0, 3.0]);
        assert!(ppo_gae(&r, &v[..3], &d, 0.9, 0.9).is_err());
    }

    fn tiny_rollout(agent: &PpoAgent, rng: &mut Rng) -> Rollout {
        let obs = Tensor::matrix(8, 3, rng.normal_vec(24)).unwrap();
        let (actions, logp) = agent.sample(&obs, rng).unwrap();
        Rollout {
            values: agent.values(&obs).unwrap(),
            obs,
            actions,
            logp,
            rewards: rng.normal_vec(8),
            dones: vec![false; 8],
            last_values: vec![0.0; 2],
            num_envs: 2,
        }
    }

    #[test]
    fn unchanged_policy_has_unit_ratio_and_mean_advantage_surrogate() {
        let cfg = PpoConfig {
            hidden: 8,
            ..PpoConfig::default()
        };
        let mut rng = Rng::new(1);
        for kind in [ActionKind::Discrete(4), ActionKind::Continuous(2)] {
            let agent = PpoAgent::new(3, kind, &HeadKind::Baseline, &cfg, &Rng::new(2)).unwrap();
            let ro = tiny_rollout(&agent, &mut rng);
            let (adv, ret) = ro.advantages(cfg.gamma, cfg.gae_lambda).unwrap();
            let idx: Vec<usize> = (0..8).collect();
            let mut tape = Tape::new();
            let pb = agent.policy.params().bind(&mut tape);
            let vb = agent.value.params().bind(&mut tape);
            let sb = agent.log_std.as_ref().map(|p| p.bind(&mut tape));
            let mb = minibatch_loss(&mut tape, &agent, (&pb, &vb, sb.as_ref()), &ro, &idx, &adv, &ret, &cfg)
                .unwrap()
                .unwrap();
            let mean_adv = adv.iter().sum::<f64>() / 8.0;
            assert!((tape.value(mb.policy).item() + mean_adv).abs() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn clip_uses_upper_bound_for_positive_advantage() {
        let mut tape = Tape::new();
        let ratio = tape.constant(Tensor::scalar(2.0));
        let a = tape.constant(Tensor::scalar(3.0));
        let s1 = tape.mul(ratio, a).unwrap();
        let c = tape.clamp(ratio, 0.8, 1.2).unwrap();
        let s2 = tape.mul(c, a).unwrap();
        let m = tape.minimum(s1, s2).unwrap();
        assert!((tape.value(m).item() - 3.6).abs() < 1e-15);
    }

    #[test]
    fn uniform_discrete_policy_entropy_is_log_n() {
        let cfg = PpoConfig {
            hidden: 8,
            ..PpoConfig::default()
        };
        let mut agent = PpoAgent::new(3, ActionKind::Discrete(5), &HeadKind::Baseline, &cfg, &Rng::new(0)).unwrap();
        for name in ["out.weight", "out.bias"] {
            let i = agent.policy.params().names().iter().position(|n| n == name).unwrap();
            agent.policy.params_mut().get_mut(i).data_mut().fill(0.0);
        }
        let mut rng = Rng::new(3);
        let ro = tiny_rollout(&agent, &mut rng);
        let (adv, ret) = ro.advantages(0.99, 0.95).unwrap();
        let mut tape = Tape::new();
        let pb = agent.policy.params().bind(&mut tape);
        let vb = agent.value.params().bind(&mut tape);
        let idx: Vec<usize> = (0..8).collect();
        let mb = minibatch_loss(&mut tape, &agent, (&pb, &vb, None), &ro, &idx, &adv, &ret, &cfg)
            .unwrap()
            .unwrap();
        assert!((tape.value(mb.entropy).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn update_is_deterministic() {
        let cfg = PpoConfig {
            hidden: 8,
            minibatch_size: 4,
            ..PpoConfig::default()
        };
        let run = || {
            let mut agent =
                PpoAgent::new(3, ActionKind::Continuous(2), &HeadKind::Baseline, &cfg, &Rng::new(2)).unwrap();
            let ro = tiny_rollout(&agent, &mut Rng::new(5));
            let l = ppo_update(&mut agent, &ro, &cfg, &mut Rng::new(6)).unwrap();
            (l, agent.policy.params().flat())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.skipped, 0);
    }
}
