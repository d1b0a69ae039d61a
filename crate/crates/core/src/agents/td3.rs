use serde::{Deserialize, Serialize};

use super::replay::{Batch, ReplayBuffer, Transition};
use super::{finite_or_abort, HeadPlacement, MetricsSink};
use crate::diagnostics::{self, MetricsRow};
use crate::diffcore::{AdamState, Bound, Rng, Tape, Tensor, Var};
use crate::distrl::{self, CategoricalDist, Support};
use crate::envs::{ActionKind, EnvKind, EnvSpec, VecEnv};
use crate::error::{param_err, shape_err, Result};
use crate::heads::{HeadCtx, HeadKind};
use crate::networks::{target_update, ActorNet, Checkpoint, CriticNet, MlpForward, TargetMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3Config {
    pub gamma: f64,
    pub batch_size: usize,
    pub policy_delay: usize,
    pub sigma_explore: f64,
    pub sigma_target: f64,
    pub target_noise_clip: f64,
    pub use_cdq: bool,
    pub use_c51: bool,
    /// Target smoothing `ρ` in `target ← ρ·target + (1 − ρ)·online`.
    pub polyak: f64,
    pub num_envs: usize,
    /// Gradient updates per vectorized environment step.
    pub steps_per_iter: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: usize,
    pub num_atoms: usize,
    /// Support bounds; derived from the env's reward bounds when absent.
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    pub buffer_capacity: usize,
    /// Env steps taken with uniform random actions before learning starts.
    pub learning_starts: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub diag_states: usize,
    pub placement: HeadPlacement,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 256,
            policy_delay: 2,
            sigma_explore: 0.1,
            sigma_target: 0.2,
            target_noise_clip: 0.5,
            use_cdq: true,
            use_c51: true,
            polyak: 0.995,
            num_envs: 16,
            steps_per_iter: 1,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            hidden: 128,
            num_atoms: 51,
            v_min: None,
            v_max: None,
            buffer_capacity: 1_000_000,
            learning_starts: 2_000,
            total_steps: 100_000,
            eval_interval: 5_000,
            eval_episodes: 8,
            diag_states: 1024,
            placement: HeadPlacement::Actor,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        let positive = [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(param_err!("{name} must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(param_err!("gamma must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.polyak) {
            return Err(param_err!("polyak must lie in [0, 1]"));
        }
        if self.sigma_explore < 0.0 || self.sigma_target < 0.0 || self.target_noise_clip < 0.0 {
            return Err(param_err!("noise scales must be >= 0"));
        }
        for (name, v) in [
            ("policy_delay", self.policy_delay),
            ("batch_size", self.batch_size),
            ("num_envs", self.num_envs),
            ("steps_per_iter", self.steps_per_iter),
            ("hidden", self.hidden),
            ("buffer_capacity", self.buffer_capacity),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return Err(param_err!("{name} must be >= 1"));
            }
        }
        if self.use_c51 && self.num_atoms < 2 {
            return Err(param_err!("C51 needs at least 2 atoms"));
        }
        Ok(())
    }

    /// Atom grid for `spec`, or `None` in scalar-critic mode.
    pub fn support(&self, spec: &EnvSpec) -> Result<Option<Support>> {
        if !self.use_c51 {
            return Ok(None);
        }
        let horizon = if self.gamma < 1.0 {
            (1.0 - self.gamma.powi(spec.episode_limit as i32)) / (1.0 - self.gamma)
        } else {
            spec.episode_limit as f64
        };
        let lo = self.v_min.unwrap_or(spec.reward_bounds.0 * horizon);
        let hi = self.v_max.unwrap_or(spec.reward_bounds.1 * horizon);
        Support::new(lo, hi, self.num_atoms).map(Some)
    }
}

/// `clip(π(s) + ε, −1, 1)` with `ε ~ N(0, σ²I)`.
pub fn explore_action(actor: &ActorNet, obs: &Tensor, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(param_err!("sigma_explore must be >= 0"));
    }
    let mut a = actor.act(obs)?;
    if sigma > 0.0 {
        for x in a.data_mut() {
            *x = (*x + sigma * rng.normal()).clamp(-1.0, 1.0);
        }
    }
    Ok(a)
}

/// Bootstrapped critic target.
#[derive(Clone, Debug, PartialEq)]
pub enum CriticTarget {
    Dist(CategoricalDist),
    Scalar(Vec<f64>),
}

impl CriticTarget {
    pub fn values(&self) -> Vec<f64> {
        match self {
            CriticTarget::Dist(d) => distrl::expected_value(d),
            CriticTarget::Scalar(y) => y.clone(),
        }
    }
}

/// Scalar value of each row of critic output.
pub fn q_values(logits: &Tensor, support: Option<&Support>) -> Result<Vec<f64>> {
    match support {
        Some(s) => Ok(distrl::expected_value(&CategoricalDist::from_logits(
            s.clone(),
            logits,
        )?)),
        None => {
            let (_, w) = logits.dims2()?;
            if w != 1 {
                return Err(shape_err!("scalar critic must emit one value, got {w}"));
            }
            Ok(logits.data().to_vec())
        }
    }
}

/// Target-policy action `clip(π_targ(s') + clip(ε, ±c), −1, 1)`.
pub fn target_action(actor_t: &ActorNet, next_obs: &Tensor, cfg: &Td3Config, rng: &mut Rng) -> Result<Tensor> {
    let mut a = actor_t.act(next_obs)?;
    for x in a.data_mut() {
        let eps = (cfg.sigma_target * rng.normal()).clamp(-cfg.target_noise_clip, cfg.target_noise_clip);
        *x = (*x + eps).clamp(-1.0, 1.0);
    }
    Ok(a)
}

/// Clipped double-Q target for `batch`; also returns the smoothed next
/// actions it was evaluated at.
pub fn cdq_target(
    critic1_t: &CriticNet,
    critic2_t: &CriticNet,
    actor_t: &ActorNet,
    batch: &Batch,
    cfg: &Td3Config,
    support: Option<&Support>,
    rng: &mut Rng,
) -> Result<(CriticTarget, Tensor)> {
    let next_a = target_action(actor_t, &batch.next_obs, cfg, rng)?;
    let (l1, _) = critic1_t.infer(&batch.next_obs, &next_a)?;
    let l2 = if cfg.use_cdq {
        Some(critic2_t.infer(&batch.next_obs, &next_a)?.0)
    } else {
        None
    };
    let target = match support {
        Some(s) => {
            let d1 = CategoricalDist::from_logits(s.clone(), &l1)?;
            let chosen = match l2 {
                Some(l2) => {
                    let d2 = CategoricalDist::from_logits(s.clone(), &l2)?;
                    let (q1, q2) = (distrl::expected_value(&d1), distrl::expected_value(&d2));
                    let n = s.n_atoms();
                    let mut probs = Vec::with_capacity(d1.batch() * n);
                    for b in 0..d1.batch() {
                        probs.extend_from_slice(if q2[b] < q1[b] { d2.row(b) } else { d1.row(b) });
                    }
                    CategoricalDist::new(s.clone(), probs)?
                }
                None => d1,
            };
            CriticTarget::Dist(distrl::project(&chosen, &batch.rew, &batch.done, cfg.gamma)?)
        }
        None => {
            let q1 = q_values(&l1, None)?;
            let q = match l2 {
                Some(l2) => q1.iter().zip(q_values(&l2, None)?).map(|(a, b)| a.min(b)).collect(),
                None => q1,
            };
            CriticTarget::Scalar(scalar_backup(&batch.rew, &batch.done, &q, cfg.gamma))
        }
    };
    Ok((target, next_a))
}

/// `y = r + γ·(1 − done)·q`.
pub fn scalar_backup(rew: &[f64], done: &[bool], q: &[f64], gamma: f64) -> Vec<f64> {
    rew.iter()
        .zip(done)
        .zip(q)
        .map(|((&r, &d), &q)| if d { r } else { r + gamma * q })
        .collect()
}

/// Critic loss against a fixed target: C51 cross-entropy or squared error,
/// plus any head auxiliary loss. Returns `(loss, forward)`.
pub fn critic_loss(
    tape: &mut Tape,
    critic: &CriticNet,
    bound: &Bound,
    obs: Var,
    act: Var,
    target: &CriticTarget,
    ctx: &mut HeadCtx<'_>,
) -> Result<(Var, MlpForward)> {
    let f = critic.forward(tape, bound, obs, act, ctx)?;
    let mut loss = match target {
        CriticTarget::Dist(d) => distrl::cross_entropy(tape, f.out, d)?,
        CriticTarget::Scalar(y) => {
            let yv = tape.constant(Tensor::matrix(y.len(), 1, y.clone())?);
            let diff = tape.sub(f.out, yv)?;
            let sq = tape.square(diff)?;
            tape.mean(sq)?
        }
    };
    if let Some(aux) = f.aux_loss {
        loss = tape.add(loss, aux)?;
    }
    Ok((loss, f))
}

/// Deterministic policy-gradient loss `−mean Q₁(s, π(s))` plus the actor's
/// head auxiliary loss.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    tape: &mut Tape,
    actor: &ActorNet,
    actor_bound: &Bound,
    critic: &CriticNet,
    critic_bound: &Bound,
    obs: Var,
    support: Option<&Support>,
    ctx: &mut HeadCtx<'_>,
) -> Result<(Var, MlpForward)> {
    let af = actor.forward(tape, actor_bound, obs, ctx)?;
    let cf = critic.forward(tape, critic_bound, obs, af.out, ctx)?;
    let q = match support {
        Some(s) => distrl::expected_value_var(tape, cf.out, s)?,
        None => cf.out,
    };
    let mut loss = tape.mean(q)?;
    loss = tape.neg(loss)?;
    if let Some(aux) = af.aux_loss {
        loss = tape.add(loss, aux)?;
    }
    Ok((loss, af))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticStats {
    pub loss: f64,
    pub td_error: f64,
    pub disagreement: f64,
}

/// Online and target networks with their optimizers.
#[derive(Clone, Debug)]
pub struct Td3Agent {
    pub cfg: Td3Config,
    pub support: Option<Support>,
    pub actor: ActorNet,
    pub actor_target: ActorNet,
    pub critics: [CriticNet; 2],
    pub critic_targets: [CriticNet; 2],
    actor_opt: AdamState,
    critic_opt: [AdamState; 2],
    rng: Rng,
    pub critic_steps: u64,
}

impl Td3Agent {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        head: &HeadKind,
        cfg: &Td3Config,
        support: Option<Support>,
        rng: &Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (actor_head, critic_head) = cfg.placement.split(head);
        let out = support.as_ref().map_or(1, Support::n_atoms);
        let mut init = rng.split(0);
        let actor = ActorNet::new(obs_dim, action_dim, cfg.hidden, actor_head, &mut init)?;
        let c1 = CriticNet::new(obs_dim, action_dim, cfg.hidden, out, critic_head.clone(), &mut init)?;
        let c2 = CriticNet::new(obs_dim, action_dim, cfg.hidden, out, critic_head, &mut init)?;
        Ok(Self {
            actor_opt: AdamState::new(actor.params(), cfg.actor_lr)?,
            critic_opt: [
                AdamState::new(c1.params(), cfg.critic_lr)?,
                AdamState::new(c2.params(), cfg.critic_lr)?,
            ],
            actor_target: actor.clone(),
            critic_targets: [c1.clone(), c2.clone()],
            actor,
            critics: [c1, c2],
            cfg: cfg.clone(),
            support,
            rng: rng.split(1),
            critic_steps: 0,
        })
    }

    pub fn target(&mut self, batch: &Batch) -> Result<CriticTarget> {
        let [c1, c2] = &self.critic_targets;
        Ok(cdq_target(
            c1,
            c2,
            &self.actor_target,
            batch,
            &self.cfg,
            self.support.as_ref(),
            &mut self.rng,
        )?
        .0)
    }

    /// One gradient step on both critics toward the shared target.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<CriticStats> {
        let target = self.target(batch)?;
        let mut tape = Tape::new();
        let obs = tape.constant(batch.obs.clone());
        let act = tape.constant(batch.act.clone());
        let mut head_rng = self.rng.split(self.critic_steps.wrapping_mul(2));
        let mut losses = Vec::with_capacity(2);
        let mut qs = Vec::with_capacity(2);
        let mut bounds = Vec::with_capacity(2);
        for c in &self.critics {
            let bound = c.params().bind(&mut tape);
            let (loss, f) = critic_loss(
                &mut tape,
                c,
                &bound,
                obs,
                act,
                &target,
                &mut HeadCtx::train(&mut head_rng),
            )?;
            qs.push(q_values(tape.value(f.out), self.support.as_ref())?);
            losses.push(loss);
            bounds.push(bound);
        }
        let total = tape.add(losses[0], losses[1])?;
        let loss_value = tape.value(total).item();
        finite_or_abort(loss_value, self.critic_steps, "critic loss")?;
        let grads = tape.backward(total)?;
        for (i, c) in self.critics.iter_mut().enumerate() {
            c.params_mut().accumulate(&grads, &bounds[i])?;
            self.critic_opt[i].step(c.params_mut())?;
        }
        self.critic_steps += 1;
        let y = target.values();
        let n = y.len() as f64;
        Ok(CriticStats {
            loss: 0.5 * loss_value,
            td_error: qs[0].iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
            disagreement: qs[0].iter().zip(&qs[1]).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
        })
    }

    /// One actor step through critic 1, then Polyak updates of all targets.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let obs = tape.constant(batch.obs.clone());
        let ab = self.actor.params().bind(&mut tape);
        let cb = self.critics[0].params().bind_frozen(&mut tape);
        let mut head_rng = self.rng.split(self.critic_steps.wrapping_mul(2) + 1);
        let (loss, _) = actor_loss(
            &mut tape,
            &self.actor,
            &ab,
            &self.critics[0],
            &cb,
            obs,
            self.support.as_ref(),
            &mut HeadCtx::train(&mut head_rng),
        )?;
        let value = tape.value(loss).item();
        finite_or_abort(value, self.critic_steps, "actor loss")?;
        let grads = tape.backward(loss)?;
        self.actor.params_mut().accumulate(&grads, &ab)?;
        self.actor_opt.step(self.actor.params_mut())?;
        self.sync_targets(TargetMode::Polyak(self.cfg.polyak))?;
        Ok(value)
    }

    pub fn sync_targets(&mut self, mode: TargetMode) -> Result<()> {
        target_update(self.actor_target.params_mut(), self.actor.params(), mode)?;
        for (t, o) in self.critic_targets.iter_mut().zip(&self.critics) {
            target_update(t.params_mut(), o.params(), mode)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_params("actor", self.actor.params());
        c.push_params("critic1", self.critics[0].params());
        c.push_params("critic2", self.critics[1].params());
        c
    }
}

/// Outcome of a finished TD3 run.
#[derive(Clone, Debug)]
pub struct Td3Run {
    pub rows: Vec<MetricsRow>,
    pub agent: Td3Agent,
}

impl Td3Run {
    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.eval_return)
    }
}

/// Deterministic-policy returns over `episodes` fresh episodes, plus the
/// visited states in time-major order.
pub fn evaluate_policy(actor: &ActorNet, env: EnvKind, episodes: usize, rng: &Rng) -> Result<(f64, Vec<Vec<f64>>)> {
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
        let a = actor.act(&obs)?;
        for (i, s) in envs.step_continuous(a.data())?.into_iter().enumerate() {
            if returns[i].is_none() {
                returns[i] = s.episode_return;
            }
        }
    }
    let mean = returns.iter().map(|r| r.unwrap_or(0.0)).sum::<f64>() / episodes as f64;
    Ok((mean, states))
}

/// Representation diagnostics of the current networks on `states`.
pub fn td3_diagnostics(agent: &Td3Agent, states: &Tensor, row: &mut MetricsRow) -> Result<()> {
    let (actions, actor_feat) = agent.actor.net.infer(states)?;
    let (logits1, critic_feat) = agent.critics[0].infer(states, &actions)?;
    row.eff_rank_actor = Some(diagnostics::effective_rank(&actor_feat, 0.99)? as f64);
    row.eff_rank_critic = Some(diagnostics::effective_rank(&critic_feat, 0.99)? as f64);
    row.stable_rank = Some(diagnostics::stable_rank(&critic_feat)?);
    row.dormant_frac = Some(diagnostics::dormant_fraction(&critic_feat, 1e-5)?);
    row.weight_norm_actor = Some(diagnostics::weight_norm(agent.actor.params()).total);
    row.weight_norm_critic = Some(diagnostics::weight_norm(agent.critics[0].params()).total);
    row.gini = Some(diagnostics::gini(&actor_feat));
    if let HeadKind::Sem(c) = &agent.actor.net.spec().head {
        row.simplex_entropy = Some(diagnostics::simplex_entropy(&actor_feat, c.groups, c.group_dim)?);
    }
    row.action_std = Some(diagnostics::action_std(&actions)?);
    if let Some(s) = &agent.support {
        let (logits2, _) = agent.critics[1].infer(states, &actions)?;
        let d1 = CategoricalDist::from_logits(s.clone(), &logits1)?;
        let d2 = CategoricalDist::from_logits(s.clone(), &logits2)?;
        let cr = distrl::cramer_distance(&d1, &d2)?;
        row.cramer_discrepancy = Some(cr.iter().sum::<f64>() / cr.len() as f64);
    }
    Ok(())
}

#[derive(Default)]
struct Running {
    critic: f64,
    td: f64,
    disagreement: f64,
    n_critic: usize,
    actor: f64,
    n_actor: usize,
}

impl Running {
    fn fill(&mut self, row: &mut MetricsRow) {
        if self.n_critic > 0 {
            let n = self.n_critic as f64;
            row.critic_loss = Some(self.critic / n);
            row.td_error = Some(self.td / n);
            row.critic_disagreement = Some(self.disagreement / n);
        }
        if self.n_actor > 0 {
            row.actor_loss = Some(self.actor / self.n_actor as f64);
        }
        *self = Running::default();
    }
}

/// Full TD3 training run on `env`. Evaluation rows go to `sink` every
/// `eval_interval` environment steps and once more at the end.
pub fn td3_train(
    env: EnvKind,
    cfg: &Td3Config,
    head: &HeadKind,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> Result<Td3Run> {
    cfg.validate()?;
    let spec = env.spec();
    let ActionKind::Continuous(act_dim) = spec.action_kind else {
        return Err(param_err!(
            "TD3 needs a continuous action space; {} is discrete",
            spec.name
        ));
    };
    let root = Rng::new(seed);
    let mut envs = VecEnv::new(env, cfg.num_envs, &root.split(1))?;
    let eval_rng = root.split(2);
    let mut agent = Td3Agent::new(spec.obs_dim, act_dim, head, cfg, cfg.support(&spec)?, &root.split(3))?;
    let mut explore = root.split(4);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, spec.obs_dim, act_dim, root.split(5))?;

    let mut rows = Vec::new();
    let mut running = Running::default();
    let mut step = 0usize;
    let mut next_eval = cfg.eval_interval.min(cfg.total_steps);
    let mut updates = 0u64;
    while step < cfg.total_steps {
        let obs = Tensor::from_rows(envs.observations())?;
        let actions = if step < cfg.learning_starts {
            Tensor::matrix(
                cfg.num_envs,
                act_dim,
                explore.uniform_vec(cfg.num_envs * act_dim, -1.0, 1.0),
            )?
        } else {
            explore_action(&agent.actor, &obs, cfg.sigma_explore, &mut explore)?
        };
        let steps = envs.step_continuous(actions.data())?;
        for (i, s) in steps.iter().enumerate() {
            buffer.push(&Transition {
                s: obs.row(i).to_vec(),
                a: actions.row(i).to_vec(),
                r: s.step.reward,
                s_next: s.step.obs.clone(),
                done: s.step.terminated,
            })?;
        }
        step += cfg.num_envs;

        if step >= cfg.learning_starts {
            for _ in 0..cfg.steps_per_iter {
                let batch = buffer.sample(cfg.batch_size)?;
                let stats = agent.critic_update(&batch)?;
                running.critic += stats.loss;
                running.td += stats.td_error;
                running.disagreement += stats.disagreement;
                running.n_critic += 1;
                updates += 1;
                if updates.is_multiple_of(cfg.policy_delay as u64) {
                    running.actor += agent.actor_update(&batch)?;
                    running.n_actor += 1;
                }
            }
        }

        if step >= next_eval || step >= cfg.total_steps {
            let mut row = MetricsRow::at(step as u64);
            let (ret, states) = evaluate_policy(&agent.actor, env, cfg.eval_episodes, &eval_rng)?;
            row.eval_return = Some(ret);
            running.fill(&mut row);
            let keep = states.len().min(cfg.diag_states);
            td3_diagnostics(&agent, &Tensor::from_rows(&states[..keep])?, &mut row)?;
            sink.record(&row)?;
            sink.checkpoint(&agent.checkpoint())?;
            rows.push(row);
            while next_eval <= step {
                next_eval += cfg.eval_interval;
            }
        }
    }
    Ok(Td3Run { rows, agent })
}
