//! Representation heads applied at the penultimate layer.
//!
//! Every head consumes the pre-activation `z` of the last hidden layer:
//!
//! * `Baseline` – plain ReLU.
//! * `Sem` – temperature softmax inside each of `L` blocks of `V` units; the
//!   output lives on a product of `L` probability simplices.
//! * `GumbelSt` – Gumbel-perturbed one-hot per block in the forward pass,
//!   softmax gradient in the backward pass.
//! * `Vq` – nearest-codebook quantization of each `code_dim` slice with a
//!   straight-through gradient and a commitment loss.
//! * `CRelu` – `[relu(z), relu(-z)]`, doubling the width.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Rng, Tape, Tensor, Var};
use crate::error::{contract_err, param_err, shape_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemConfig {
    /// Number of simplices `L`.
    pub groups: usize,
    /// Simplex dimension `V`.
    pub group_dim: usize,
    pub tau: f64,
}

impl SemConfig {
    pub fn new(groups: usize, group_dim: usize, tau: f64) -> Result<Self> {
        let c = Self { groups, group_dim, tau };
        c.validate()?;
        Ok(c)
    }

    /// `V = 64` blocks covering `width`, temperature 1.
    pub fn for_width(width: usize) -> Result<Self> {
        let v = 64.min(width);
        if !width.is_multiple_of(v) {
            return Err(param_err!("width {width} is not a multiple of {v}"));
        }
        Self::new(width / v, v, 1.0)
    }

    pub fn width(&self) -> usize {
        self.groups * self.group_dim
    }

    fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.group_dim == 0 {
            return Err(param_err!("L and V must be >= 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(param_err!("tau must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub groups: usize,
    pub group_dim: usize,
    pub tau: f64,
    /// Emit one-hot values in training (straight-through) instead of the
    /// relaxed sample.
    pub hard: bool,
}

impl GumbelConfig {
    pub fn for_width(width: usize) -> Result<Self> {
        let s = SemConfig::for_width(width)?;
        Ok(Self {
            groups: s.groups,
            group_dim: s.group_dim,
            tau: 1.0,
            hard: true,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Commitment weight.
    pub beta: f64,
}

impl VqConfig {
    /// 64 codes, 8 slices per row, `beta = 0.25`.
    pub fn for_width(width: usize) -> Result<Self> {
        if !width.is_multiple_of(8) {
            return Err(param_err!("width {width} does not split into 8 code slices"));
        }
        Ok(Self {
            codebook_size: 64,
            code_dim: width / 8,
            beta: 0.25,
        })
    }

    /// Initial codebook, uniform in `[-1/K, 1/K]`.
    pub fn init_codebook(&self, rng: &mut Rng) -> Result<Tensor> {
        if self.codebook_size == 0 || self.code_dim == 0 {
            return Err(param_err!("codebook must be non-empty"));
        }
        let a = 1.0 / self.codebook_size as f64;
        Tensor::matrix(
            self.codebook_size,
            self.code_dim,
            rng.uniform_vec(self.codebook_size * self.code_dim, -a, a),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Baseline,
    Sem(SemConfig),
    GumbelSt(GumbelConfig),
    Vq(VqConfig),
    CRelu,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Baseline => "baseline",
            HeadKind::Sem(_) => "sem",
            HeadKind::GumbelSt(_) => "gumbel_st",
            HeadKind::Vq(_) => "vq",
            HeadKind::CRelu => "crelu",
        }
    }

    /// Width of the head output for a hidden layer of `width` units.
    pub fn output_width(&self, width: usize) -> usize {
        match self {
            HeadKind::CRelu => 2 * width,
            _ => width,
        }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        match self {
            HeadKind::Baseline | HeadKind::CRelu => Ok(()),
            HeadKind::Sem(c) => {
                c.validate()?;
                check_blocks(width, c.groups, c.group_dim)
            }
            HeadKind::GumbelSt(c) => {
                SemConfig::new(c.groups, c.group_dim, c.tau)?;
                check_blocks(width, c.groups, c.group_dim)
            }
            HeadKind::Vq(c) => {
                if c.codebook_size == 0 || c.code_dim == 0 {
                    return Err(param_err!("codebook must be non-empty"));
                }
                if !width.is_multiple_of(c.code_dim) {
                    return Err(param_err!("code_dim {} does not divide width {width}", c.code_dim));
                }
                if c.beta < 0.0 {
                    return Err(param_err!("commitment weight must be >= 0"));
                }
                Ok(())
            }
        }
    }

    /// Applies the head to pre-activations `z: [batch × width]`.
    pub fn apply(&self, tape: &mut Tape, z: Var, codebook: Option<Var>, ctx: &mut HeadCtx<'_>) -> Result<HeadOutput> {
        let features = match self {
            HeadKind::Baseline => tape.relu(z)?,
            HeadKind::Sem(c) => sem_forward(tape, z, c)?,
            HeadKind::GumbelSt(c) => gumbel_st_forward(tape, z, c, ctx)?,
            HeadKind::CRelu => crelu_forward(tape, z)?,
            HeadKind::Vq(c) => {
                let cb = codebook.ok_or_else(|| contract_err!("VQ head needs its codebook"))?;
                let (q, loss) = vq_forward(tape, z, cb, c)?;
                return Ok(HeadOutput {
                    features: q,
                    aux_loss: Some(loss),
                });
            }
        };
        Ok(HeadOutput {
            features,
            aux_loss: None,
        })
    }
}

fn check_blocks(width: usize, groups: usize, group_dim: usize) -> Result<()> {
    if groups * group_dim != width {
        return Err(param_err!(
            "L*V = {groups}*{group_dim} does not match layer width {width}"
        ));
    }
    Ok(())
}

/// Output of a head: features plus an optional auxiliary loss (VQ).
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub features: Var,
    pub aux_loss: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    Eval,
    Train,
}

/// Per-call state for stochastic heads.
pub struct HeadCtx<'a> {
    pub mode: HeadMode,
    pub rng: Option<&'a mut Rng>,
    /// Test hook: use zero Gumbel noise in training mode.
    pub zero_noise: bool,
}

impl<'a> HeadCtx<'a> {
    pub fn eval() -> Self {
        Self {
            mode: HeadMode::Eval,
            rng: None,
            zero_noise: false,
        }
    }

    pub fn train(rng: &'a mut Rng) -> Self {
        Self {
            mode: HeadMode::Train,
            rng: Some(rng),
            zero_noise: false,
        }
    }
}

pub fn sem_forward(tape: &mut Tape, z: Var, cfg: &SemConfig) -> Result<Var> {
    tape.grouped_softmax(z, cfg.groups, cfg.group_dim, cfg.tau)
}

fn one_hot_argmax(values: &[f64], group_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (block, dst) in values.chunks(group_dim).zip(out.chunks_mut(group_dim)) {
        let mut best = 0;
        for (k, &v) in block.iter().enumerate() {
            if v > block[best] {
                best = k;
            }
        }
        dst[best] = 1.0;
    }
    out
}

pub fn gumbel_st_forward(tape: &mut Tape, z: Var, cfg: &GumbelConfig, ctx: &mut HeadCtx<'_>) -> Result<Var> {
    let width = tape.shape(z).get(1).copied().unwrap_or(0);
    check_blocks(width, cfg.groups, cfg.group_dim)?;
    SemConfig::new(cfg.groups, cfg.group_dim, cfg.tau)?;
    let shape = tape.shape(z).to_vec();
    if ctx.mode == HeadMode::Eval {
        let hard = one_hot_argmax(tape.value(z).data(), cfg.group_dim);
        return Ok(tape.constant(Tensor::new(&shape, hard)?));
    }
    let n = tape.value(z).numel();
    let noise = if ctx.zero_noise {
        vec![0.0; n]
    } else {
        let rng = ctx
            .rng
            .as_deref_mut()
            .ok_or_else(|| contract_err!("Gumbel head in training needs an rng"))?;
        (0..n).map(|_| rng.gumbel()).collect()
    };
    let g = tape.constant(Tensor::new(&shape, noise)?);
    let perturbed = tape.add(z, g)?;
    let soft = tape.grouped_softmax(perturbed, cfg.groups, cfg.group_dim, cfg.tau)?;
    if !cfg.hard {
        return Ok(soft);
    }
    let sv = tape.value(soft).data();
    let hard = one_hot_argmax(sv, cfg.group_dim);
    let correction: Vec<f64> = hard.iter().zip(sv).map(|(h, s)| h - s).collect();
    let correction = tape.frozen(Tensor::new(&shape, correction)?)?;
    let c = tape.constant(correction);
    tape.add(soft, c)
}

/// Index of the nearest codebook row to `x` (Euclidean); ties go to the
/// lowest index.
pub fn nearest_code(codebook: &Tensor, x: &[f64]) -> usize {
    let (k, _) = codebook.dims2().expect("matrix");
    let mut best = (0, f64::INFINITY);
    for j in 0..k {
        let d: f64 = codebook.row(j).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Vector quantization with a straight-through gradient.
///
/// Returns `(quantized, loss)` where `loss` is the batch mean over rows of
/// `Σ_slices ‖sg(z) − e‖² + β‖z − sg(e)‖²`.
pub fn vq_forward(tape: &mut Tape, z: Var, codebook: Var, cfg: &VqConfig) -> Result<(Var, Var)> {
    let (b, w) = match tape.shape(z) {
        [b, w] => (*b, *w),
        s => return Err(shape_err!("VQ input must be a matrix, got {s:?}")),
    };
    let (k, d) = tape.value(codebook).dims2()?;
    if k == 0 || cfg.codebook_size == 0 {
        return Err(param_err!("codebook is empty"));
    }
    if d != cfg.code_dim || w % d != 0 {
        return Err(shape_err!("code_dim {d} does not tile width {w}"));
    }
    let slices = w / d;
    let zr = tape.reshape(z, &[b * slices, d])?;
    let idx: Vec<f64> = {
        let cb = tape.value(codebook);
        tape.value(zr)
            .data()
            .chunks(d)
            .map(|x| nearest_code(cb, x) as f64)
            .collect()
    };
    let idx = tape.frozen(Tensor::new(&[b * slices], idx)?)?;
    let idx: Vec<usize> = idx.data().iter().map(|&i| i as usize).collect();
    let e = tape.gather_rows(codebook, &idx)?;

    let diff = tape.sub(e, zr)?;
    let st = tape.detach(diff)?;
    let q = tape.add(zr, st)?;
    let quantized = tape.reshape(q, &[b, w])?;

    let z_sg = tape.detach(zr)?;
    let e_sg = tape.detach(e)?;
    let codebook_term = tape.sub(z_sg, e)?;
    let codebook_term = tape.square(codebook_term)?;
    let commit = tape.sub(zr, e_sg)?;
    let commit = tape.square(commit)?;
    let commit = tape.scale(commit, cfg.beta)?;
    let total = tape.add(codebook_term, commit)?;
    let total = tape.sum(total)?;
    let loss = tape.scale(total, 1.0 / b as f64)?;
    Ok((quantized, loss))
}

pub fn crelu_forward(tape: &mut Tape, z: Var) -> Result<Var> {
    let pos = tape.relu(z)?;
    let neg = tape.unary(crate::diffcore::Unary::CReluPre, z)?;
    tape.concat_cols(&[pos, neg])
}
