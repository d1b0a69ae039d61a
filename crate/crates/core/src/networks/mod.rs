//! Actor and critic MLPs with a configurable penultimate head.
//!
//! Both networks share one layout:
//!
//! ```text
//! x → Linear → ReLU → Linear → head → Linear → (tanh for the actor)
//! ```
//!
//! The head supplies the second nonlinearity, so a `Baseline` head gives the
//! plain `Linear→ReLU→Linear→ReLU→Linear` stack and a `Sem` head gives
//! `Linear→ReLU→Linear→SEM→Linear`.

mod checkpoint;

pub use checkpoint::{checkpoint_load, checkpoint_save, decode, encode, Checkpoint, Entry, FORMAT_VERSION};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, ParamSet, Rng, Tape, Tensor, Var};
use crate::error::{contract_err, param_err, shape_err, Result};
use crate::heads::{HeadCtx, HeadKind};

pub const L1_W: usize = 0;
pub const L1_B: usize = 1;
pub const L2_W: usize = 2;
pub const L2_B: usize = 3;
pub const OUT_W: usize = 4;
pub const OUT_B: usize = 5;
pub const CODEBOOK: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputAct {
    Identity,
    Tanh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub head: HeadKind,
    pub output: OutputAct,
}

/// Two-layer trunk, representation head and linear read-out.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadedMlp {
    spec: MlpSpec,
    params: ParamSet,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct MlpForward {
    pub out: Var,
    /// Head output (the penultimate representation).
    pub penult: Var,
    /// First hidden layer after its ReLU.
    pub hidden: Var,
    /// Second-layer pre-activation, shared by every head.
    pub trunk: Var,
    pub aux_loss: Option<Var>,
}

fn uniform_linear(rng: &mut Rng, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let a = 1.0 / (fan_in as f64).sqrt();
    let w = Tensor::matrix(fan_in, fan_out, rng.uniform_vec(fan_in * fan_out, -a, a)).expect("dims");
    let b = Tensor::new(&[fan_out], rng.uniform_vec(fan_out, -a, a)).expect("dims");
    (w, b)
}

impl HeadedMlp {
    pub fn new(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        if spec.in_dim == 0 || spec.hidden == 0 || spec.out_dim == 0 {
            return Err(param_err!("layer widths must be positive"));
        }
        spec.head.validate(spec.hidden)?;
        let head_width = spec.head.output_width(spec.hidden);
        let mut params = ParamSet::new();
        for (name, fan_in, fan_out) in [
            ("l1", spec.in_dim, spec.hidden),
            ("l2", spec.hidden, spec.hidden),
            ("out", head_width, spec.out_dim),
        ] {
            let (w, b) = uniform_linear(rng, fan_in, fan_out);
            params.push(format!("{name}.weight"), w);
            params.push(format!("{name}.bias"), b);
        }
        if let HeadKind::Vq(c) = &spec.head {
            params.push("head.codebook", c.init_codebook(rng)?);
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, ctx: &mut HeadCtx<'_>) -> Result<MlpForward> {
        match tape.shape(x) {
            [_, w] if *w == self.spec.in_dim => {}
            s => {
                return Err(shape_err!(
                    "network expects input width {}, got {s:?}",
                    self.spec.in_dim
                ))
            }
        }
        let h1 = tape.linear(x, bound.get(L1_W), bound.get(L1_B))?;
        let h1 = tape.relu(h1)?;
        let trunk = tape.linear(h1, bound.get(L2_W), bound.get(L2_B))?;
        let codebook = matches!(self.spec.head, HeadKind::Vq(_)).then(|| bound.get(CODEBOOK));
        let head = self.spec.head.apply(tape, trunk, codebook, ctx)?;
        let mut out = tape.linear(head.features, bound.get(OUT_W), bound.get(OUT_B))?;
        if self.spec.output == OutputAct::Tanh {
            out = tape.tanh(out)?;
        }
        Ok(MlpForward {
            out,
            penult: head.features,
            hidden: h1,
            trunk,
            aux_loss: head.aux_loss,
        })
    }

    /// Evaluation-mode forward pass without gradient tracking; returns
    /// `(output, penultimate features)`.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, &bound, xv, &mut HeadCtx::eval())?;
        Ok((tape.value(f.out).clone(), tape.value(f.penult).clone()))
    }

    /// Evaluation-mode activations of the first hidden layer.
    pub fn infer_hidden(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, &bound, xv, &mut HeadCtx::eval())?;
        Ok(tape.value(f.hidden).clone())
    }

    /// Per-layer Euclidean norms of weight matrices and biases.
    pub fn layer_norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|(n, t)| (n.to_string(), t.sq_norm().sqrt()))
            .collect()
    }
}

/// Deterministic policy `obs → tanh(...) ∈ (−1, 1)^action_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorNet {
    pub net: HeadedMlp,
}

impl ActorNet {
    pub fn new(obs_dim: usize, action_dim: usize, hidden: usize, head: HeadKind, rng: &mut Rng) -> Result<Self> {
        let spec = MlpSpec {
            in_dim: obs_dim,
            hidden,
            out_dim: action_dim,
            head,
            output: OutputAct::Tanh,
        };
        Ok(Self {
            net: HeadedMlp::new(spec, rng)?,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.net.spec.in_dim
    }

    pub fn action_dim(&self) -> usize {
        self.net.spec.out_dim
    }

    pub fn params(&self) -> &ParamSet {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.net.params_mut()
    }

    /// Action and penultimate features for a batch of observations.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, obs: Var, ctx: &mut HeadCtx<'_>) -> Result<MlpForward> {
        self.net.forward(tape, bound, obs, ctx)
    }

    pub fn act(&self, obs: &Tensor) -> Result<Tensor> {
        Ok(self.net.infer(obs)?.0)
    }
}

/// Distributional critic over `concat(obs, action)` emitting atom logits.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticNet {
    pub net: HeadedMlp,
    obs_dim: usize,
}

impl CriticNet {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden: usize,
        num_atoms: usize,
        head: HeadKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_atoms == 0 {
            return Err(param_err!("critic needs at least one output"));
        }
        let spec = MlpSpec {
            in_dim: obs_dim + action_dim,
            hidden,
            out_dim: num_atoms,
            head,
            output: OutputAct::Identity,
        };
        Ok(Self {
            net: HeadedMlp::new(spec, rng)?,
            obs_dim,
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.net.spec.out_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.net.spec.in_dim - self.obs_dim
    }

    pub fn params(&self) -> &ParamSet {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.net.params_mut()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        obs: Var,
        action: Var,
        ctx: &mut HeadCtx<'_>,
    ) -> Result<MlpForward> {
        let (o, a) = (tape.shape(obs).to_vec(), tape.shape(action).to_vec());
        if o.get(1) != Some(&self.obs_dim) || a.get(1) != Some(&self.action_dim()) {
            return Err(shape_err!(
                "critic expects obs width {} and action width {}, got {o:?} and {a:?}",
                self.obs_dim,
                self.action_dim()
            ));
        }
        let x = tape.concat_cols(&[obs, action])?;
        self.net.forward(tape, bound, x, ctx)
    }

    /// Logits and penultimate features without gradient tracking.
    pub fn infer(&self, obs: &Tensor, action: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params().bind_frozen(&mut tape);
        let o = tape.constant(obs.clone());
        let a = tape.constant(action.clone());
        let f = self.forward(&mut tape, &bound, o, a, &mut HeadCtx::eval())?;
        Ok((tape.value(f.out).clone(), tape.value(f.penult).clone()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetMode {
    Hard,
    /// `target ← ρ·target + (1 − ρ)·online`.
    Polyak(f64),
}

/// Moves `target` toward `online`.
pub fn target_update(target: &mut ParamSet, online: &ParamSet, mode: TargetMode) -> Result<()> {
    if !target.congruent(online) {
        return Err(contract_err!("target and online parameter shapes differ"));
    }
    let rho = match mode {
        TargetMode::Hard => 0.0,
        TargetMode::Polyak(r) if (0.0..=1.0).contains(&r) => r,
        TargetMode::Polyak(r) => return Err(param_err!("polyak coefficient {r} outside [0, 1]")),
    };
    for (t, o) in target.tensors_mut().iter_mut().zip(online.tensors()) {
        if rho == 0.0 {
            t.data_mut().copy_from_slice(o.data());
        } else {
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = rho * *a + (1.0 - rho) * b;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{GumbelConfig, SemConfig, VqConfig};

    fn zero_params(p: &mut ParamSet) {
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn all_heads(width: usize) -> Vec<HeadKind> {
        vec![
            HeadKind::Baseline,
            HeadKind::Sem(SemConfig::new(width / 4, 4, 1.0).unwrap()),
            HeadKind::GumbelSt(GumbelConfig {
                groups: width / 4,
                group_dim: 4,
                tau: 1.0,
                hard: true,
            }),
            HeadKind::Vq(VqConfig {
                codebook_size: 8,
                code_dim: 4,
                beta: 0.25,
            }),
            HeadKind::CRelu,
        ]
    }

    #[test]
    fn zero_actor_outputs_zero() {
        let mut rng = Rng::new(0);
        let mut a = ActorNet::new(4, 2, 16, HeadKind::Baseline, &mut rng).unwrap();
        zero_params(a.params_mut());
        let obs = Tensor::matrix(3, 4, rng.normal_vec(12)).unwrap();
        assert!(a.act(&obs).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn heads_share_trunk_activations() {
        let mut rng = Rng::new(1);
        let base = ActorNet::new(5, 2, 16, HeadKind::Baseline, &mut rng).unwrap();
        let obs = Tensor::matrix(4, 5, rng.normal_vec(20)).unwrap();
        let trunk_of = |net: &ActorNet| {
            let mut t = Tape::new();
            let b = net.params().bind_frozen(&mut t);
            let o = t.constant(obs.clone());
            let f = net.forward(&mut t, &b, o, &mut HeadCtx::eval()).unwrap();
            t.value(f.trunk).clone()
        };
        let reference = trunk_of(&base);
        for head in all_heads(16).into_iter().skip(1) {
            let mut other = ActorNet::new(5, 2, 16, head, &mut Rng::new(77)).unwrap();
            for i in [L1_W, L1_B, L2_W, L2_B] {
                *other.params_mut().get_mut(i) = base.params().get(i).clone();
                assert_eq!(other.params().get(i).shape(), base.params().get(i).shape());
            }
            assert_eq!(trunk_of(&other), reference);
        }
    }

    #[test]
    fn crelu_doubles_readout_input() {
        let a = ActorNet::new(3, 1, 8, HeadKind::CRelu, &mut Rng::new(0)).unwrap();
        assert_eq!(a.params().get(OUT_W).shape(), &[16, 1]);
    }

    #[test]
    fn actions_inside_open_box() {
        let mut rng = Rng::new(3);
        let a = ActorNet::new(6, 3, 32, HeadKind::Baseline, &mut rng).unwrap();
        let obs = Tensor::matrix(10_000, 6, rng.normal_vec(60_000).iter().map(|x| 3.0 * x).collect()).unwrap();
        let act = a.act(&obs).unwrap();
        assert!(act.data().iter().all(|&x| x > -1.0 && x < 1.0));
    }

    #[test]
    fn zero_critic_is_uniform() {
        let mut rng = Rng::new(4);
        let mut c = CriticNet::new(3, 2, 16, 11, HeadKind::Baseline, &mut rng).unwrap();
        zero_params(c.params_mut());
        let (logits, _) = c
            .infer(
                &Tensor::matrix(2, 3, rng.normal_vec(6)).unwrap(),
                &Tensor::zeros(&[2, 2]),
            )
            .unwrap();
        let s = crate::distrl::Support::new(-1.0, 1.0, 11).unwrap();
        let d = crate::distrl::CategoricalDist::from_logits(s, &logits).unwrap();
        for p in d.probs() {
            assert!((p - 1.0 / 11.0).abs() < 1e-15);
        }
    }

    #[test]
    fn critic_softmax_rows_normalised() {
        let mut rng = Rng::new(5);
        let c = CriticNet::new(6, 2, 32, 101, HeadKind::Baseline, &mut rng).unwrap();
        let (logits, _) = c
            .infer(
                &Tensor::matrix(8, 6, rng.normal_vec(48)).unwrap(),
                &Tensor::matrix(8, 2, rng.normal_vec(16)).unwrap(),
            )
            .unwrap();
        assert!(logits.is_finite());
        let s = crate::distrl::Support::new(-1.0, 1.0, 101).unwrap();
        let d = crate::distrl::CategoricalDist::from_logits(s, &logits).unwrap();
        for b in 0..8 {
            assert!((d.row(b).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let a = ActorNet::new(4, 2, 8, HeadKind::Baseline, &mut Rng::new(0)).unwrap();
        assert!(a.act(&Tensor::zeros(&[1, 5])).is_err());
    }

    #[test]
    fn target_update_cases() {
        let mk = |v: f64| {
            let mut p = ParamSet::new();
            p.push("w", Tensor::scalar(v));
            p
        };
        let online = mk(2.0);
        let mut t = mk(0.0);
        target_update(&mut t, &online, TargetMode::Polyak(0.5)).unwrap();
        assert_eq!(t.get(0).item(), 1.0);
        target_update(&mut t, &online, TargetMode::Polyak(1.0)).unwrap();
        assert_eq!(t.get(0).item(), 1.0);
        target_update(&mut t, &online, TargetMode::Polyak(0.0)).unwrap();
        assert_eq!(t.get(0).item(), 2.0);

        let mut bad = ParamSet::new();
        bad.push("w", Tensor::zeros(&[2]));
        assert!(target_update(&mut bad, &online, TargetMode::Hard).is_err());
    }

    #[test]
    fn polyak_is_exact_contraction() {
        let mut rng = Rng::new(6);
        let online = ActorNet::new(3, 2, 8, HeadKind::Baseline, &mut rng).unwrap();
        let mut target = ActorNet::new(3, 2, 8, HeadKind::Baseline, &mut rng).unwrap();
        let dist = |a: &ParamSet, b: &ParamSet| {
            a.flat()
                .iter()
                .zip(b.flat())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let before = dist(target.params(), online.params());
        target_update(target.params_mut(), online.params(), TargetMode::Polyak(0.7)).unwrap();
        let after = dist(target.params(), online.params());
        assert!((after - 0.7 * before).abs() < 1e-12);
    }
}
