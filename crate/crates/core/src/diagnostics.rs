//! Representation and learning-dynamics metrics over feature snapshots.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tensor};
use crate::error::{param_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Actor,
    Critic,
    SemLayer,
    Supervised,
}

/// `[N, d]` activations captured from one layer.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub features: Tensor,
    pub source: FeatureSource,
}

impl FeatureBatch {
    pub fn new(features: Tensor, source: FeatureSource) -> Result<Self> {
        features.dims2()?;
        if !features.is_finite() {
            return Err(param_err!("feature batch contains non-finite values"));
        }
        Ok(Self { features, source })
    }
}

fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (n, d) = t.dims2()?;
    Ok(DMatrix::from_row_slice(n, d, t.data()))
}

fn centered(t: &Tensor) -> Result<DMatrix<f64>> {
    let mut m = to_matrix(t)?;
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    Ok(m)
}

/// Smallest `k` whose leading squared singular values of the mean-centred
/// features hold at least a `tau` share of the total. Zero for a matrix with
/// no variance.
pub fn effective_rank(features: &Tensor, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(param_err!("tau must lie in (0, 1], got {tau}"));
    }
    let (n, _) = features.dims2()?;
    if n < 2 {
        return Err(shape_err!("effective rank needs at least two samples"));
    }
    let m = centered(features)?;
    let mut energy: Vec<f64> = m.singular_values().iter().map(|s| s * s).collect();
    energy.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = energy.iter().sum();
    if total <= f64::MIN_POSITIVE {
        return Ok(0);
    }
    let target = tau * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (i, e) in energy.iter().enumerate() {
        acc += e;
        if acc >= target {
            return Ok(i + 1);
        }
    }
    Ok(energy.len())
}

/// Feature covariance `(1/N) ZᵀZ − z̄z̄ᵀ`.
pub fn covariance(features: &Tensor) -> Result<DMatrix<f64>> {
    let (n, _) = features.dims2()?;
    if n < 2 {
        return Err(shape_err!("covariance needs at least two samples"));
    }
    let m = centered(features)?;
    Ok(m.transpose() * &m / n as f64)
}

/// `‖Σ‖_F² / ‖Σ‖₂²` of the feature covariance, or 0 when `Σ = 0`.
pub fn stable_rank(features: &Tensor) -> Result<f64> {
    let cov = covariance(features)?;
    let fro2 = cov.norm_squared();
    if fro2 <= f64::MIN_POSITIVE {
        return Ok(0.0);
    }
    let top = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    Ok(fro2 / (top * top))
}

/// Percentage of units whose batch-mean absolute activation is below `eps`.
pub fn dormant_fraction(features: &Tensor, eps: f64) -> Result<f64> {
    let (n, d) = features.dims2()?;
    let mut score = vec![0.0; d];
    for i in 0..n {
        for (s, x) in score.iter_mut().zip(features.row(i)) {
            *s += x.abs();
        }
    }
    let dormant = score.iter().filter(|&&s| s / (n as f64) < eps).count();
    Ok(100.0 * dormant as f64 / d as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightNorms {
    /// Layer name (parameter name up to the first `.`) and its norm.
    pub per_layer: Vec<(String, f64)>,
    pub total: f64,
}

/// Euclidean norms of a network's parameters, grouped by layer.
pub fn weight_norm(params: &ParamSet) -> WeightNorms {
    let mut per_layer: Vec<(String, f64)> = Vec::new();
    let mut total = 0.0;
    for (name, t) in params.iter() {
        let layer = name.split('.').next().unwrap_or(name);
        let sq = t.sq_norm();
        total += sq;
        match per_layer.last_mut() {
            Some((l, acc)) if l == layer => *acc += sq,
            _ => per_layer.push((layer.to_string(), sq)),
        }
    }
    for (_, v) in &mut per_layer {
        *v = v.sqrt();
    }
    WeightNorms {
        per_layer,
        total: total.sqrt(),
    }
}

/// Gini coefficient of the absolute activations, flattened.
pub fn gini(features: &Tensor) -> f64 {
    let mut v: Vec<f64> = features.data().iter().map(|x| x.abs()).collect();
    let sum: f64 = v.iter().sum();
    if sum <= 0.0 {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let weighted: f64 = v.iter().enumerate().map(|(i, x)| (n - i as f64) * x).sum();
    1.0 + 1.0 / n - 2.0 * weighted / (n * sum)
}

const ENTROPY_EPS: f64 = 1e-8;

/// Mean entropy of the `L` blocks of width `V` in each row.
pub fn simplex_entropy(features: &Tensor, groups: usize, group_dim: usize) -> Result<f64> {
    let (n, d) = features.dims2()?;
    if groups * group_dim != d {
        return Err(shape_err!("width {d} is not {groups} x {group_dim}"));
    }
    if features.data().iter().any(|&x| x < 0.0) {
        return Err(param_err!("simplex entropy needs non-negative inputs"));
    }
    let mut total = 0.0;
    for i in 0..n {
        for block in features.row(i).chunks_exact(group_dim) {
            let s: f64 = block.iter().sum::<f64>() + ENTROPY_EPS;
            total -= block
                .iter()
                .map(|&x| {
                    let p = x / s;
                    p * (p + ENTROPY_EPS).ln()
                })
                .sum::<f64>();
        }
    }
    Ok(total / (n * groups) as f64)
}

/// Mean over action dimensions of the population standard deviation.
pub fn action_std(actions: &Tensor) -> Result<f64> {
    let (n, d) = actions.dims2()?;
    if n < 2 {
        return Err(shape_err!("action std needs at least two samples"));
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| actions.row(i)[j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (actions.row(i)[j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientEnergy {
    /// Mean over samples of `‖∇_W (zW − y)²‖_F²`.
    pub measured: f64,
    /// `4 · mean ‖δ‖² · tr(E[zzᵀ])`.
    pub bound: f64,
}

/// Gradient energy of a linear head `ŷ = zW` under per-sample squared error.
///
/// `weights` is `[d, k]`, `z` is `[N, d]` and `targets` is `[N, k]`.
pub fn gradient_energy(weights: &Tensor, z: &Tensor, targets: &Tensor) -> Result<GradientEnergy> {
    let (d, k) = weights.dims2()?;
    let (n, dz) = z.dims2()?;
    let (ny, ky) = targets.dims2()?;
    if dz != d || ny != n || ky != k {
        return Err(shape_err!("gradient energy shapes: W {d}x{k}, z {n}x{dz}, y {ny}x{ky}"));
    }
    if n < 2 {
        return Err(shape_err!("gradient energy needs at least two samples"));
    }
    let w = weights.data();
    let mut measured = 0.0;
    let mut delta_sq = 0.0;
    let mut trace = 0.0;
    for i in 0..n {
        let zi = z.row(i);
        let zz: f64 = zi.iter().map(|x| x * x).sum();
        let mut dd = 0.0;
        for c in 0..k {
            let pred: f64 = (0..d).map(|j| zi[j] * w[j * k + c]).sum();
            dd += (pred - targets.row(i)[c]).powi(2);
        }
        measured += 4.0 * dd * zz;
        delta_sq += dd;
        trace += zz;
    }
    let nf = n as f64;
    Ok(GradientEnergy {
        measured: measured / nf,
        bound: 4.0 * (delta_sq / nf) * (trace / nf),
    })
}

/// One evaluation snapshot. Metrics that do not apply to a run stay `None`
/// and are written as empty fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub eval_return: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub td_error: Option<f64>,
    pub critic_disagreement: Option<f64>,
    pub cramer_discrepancy: Option<f64>,
    pub eff_rank_actor: Option<f64>,
    pub eff_rank_critic: Option<f64>,
    pub stable_rank: Option<f64>,
    pub dormant_frac: Option<f64>,
    pub weight_norm_actor: Option<f64>,
    pub weight_norm_critic: Option<f64>,
    pub gini: Option<f64>,
    pub simplex_entropy: Option<f64>,
    pub action_std: Option<f64>,
}

impl MetricsRow {
    pub const COLUMNS: [&'static str; 16] = [
        "step",
        "eval_return",
        "critic_loss",
        "actor_loss",
        "td_error",
        "critic_disagreement",
        "cramer_discrepancy",
        "eff_rank_actor",
        "eff_rank_critic",
        "stable_rank",
        "dormant_frac",
        "weight_norm_actor",
        "weight_norm_critic",
        "gini",
        "simplex_entropy",
        "action_std",
    ];

    pub fn at(step: u64) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }

    /// Metric fields in column order, excluding `step`.
    pub fn metrics(&self) -> [Option<f64>; 15] {
        [
            self.eval_return,
            self.critic_loss,
            self.actor_loss,
            self.td_error,
            self.critic_disagreement,
            self.cramer_discrepancy,
            self.eff_rank_actor,
            self.eff_rank_critic,
            self.stable_rank,
            self.dormant_frac,
            self.weight_norm_actor,
            self.weight_norm_critic,
            self.gini,
            self.simplex_entropy,
            self.action_std,
        ]
    }

    pub fn from_metrics(step: u64, m: [Option<f64>; 15]) -> Self {
        Self {
            step,
            eval_return: m[0],
            critic_loss: m[1],
            actor_loss: m[2],
            td_error: m[3],
            critic_disagreement: m[4],
            cramer_discrepancy: m[5],
            eff_rank_actor: m[6],
            eff_rank_critic: m[7],
            stable_rank: m[8],
            dormant_frac: m[9],
            weight_norm_actor: m[10],
            weight_norm_critic: m[11],
            gini: m[12],
            simplex_entropy: m[13],
            action_std: m[14],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Rng;
    use proptest::prelude::*;

    /// Cyclic Jacobi eigenvalues of a symmetric matrix stored row-major.
    fn jacobi_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
        let mut m = a.to_vec();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| m[i * n + j].powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = m[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = m[k * n + p];
                        let akq = m[k * n + q];
                        m[k * n + p] = c * akp - s * akq;
                        m[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = m[p * n + k];
                        let aqk = m[q * n + k];
                        m[p * n + k] = c * apk - s * aqk;
                        m[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| m[i * n + i]).collect()
    }

    fn centered_gram(x: &Tensor) -> (Vec<f64>, usize) {
        let (n, d) = x.dims2().unwrap();
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64)
            .collect();
        let mut g = vec![0.0; d * d];
        for i in 0..n {
            let r = x.row(i);
            for a in 0..d {
                for b in 0..d {
                    g[a * d + b] += (r[a] - mean[a]) * (r[b] - mean[b]);
                }
            }
        }
        (g, d)
    }

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::matrix(n, d, Rng::new(seed).normal_vec(n * d)).unwrap()
    }

    /// Rows `±c·e_i`: zero column means and `d` equal singular values.
    fn flat_spectrum(d: usize) -> Tensor {
        let mut data = vec![0.0; 2 * d * d];
        for i in 0..d {
            data[i * d + i] = 1.5;
            data[(d + i) * d + i] = -1.5;
        }
        Tensor::matrix(2 * d, d, data).unwrap()
    }

    #[test]
    fn effective_rank_closed_forms() {
        assert_eq!(effective_rank(&flat_spectrum(10), 0.99).unwrap(), 10);
        let u = Rng::new(1).normal_vec(30);
        let v = Rng::new(2).normal_vec(6);
        let rank1: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        assert_eq!(effective_rank(&Tensor::matrix(30, 6, rank1).unwrap(), 0.99).unwrap(), 1);
        assert_eq!(effective_rank(&Tensor::zeros(&[5, 3]), 0.99).unwrap(), 0);
    }

    #[test]
    fn effective_rank_matches_gram_oracle() {
        for seed in 0..20 {
            let mut x = random(50, 8, seed);
            // Uneven column scales give a spread spectrum.
            for i in 0..50 {
                for j in 0..8 {
                    x.data_mut()[i * 8 + j] *= 0.3f64.powi(j as i32);
                }
            }
            let (g, d) = centered_gram(&x);
            let mut ev = jacobi_eigenvalues(&g, d);
            ev.sort_by(|a, b| b.total_cmp(a));
            let total: f64 = ev.iter().sum();
            let mut acc = 0.0;
            let mut k = 0;
            for (i, e) in ev.iter().enumerate() {
                acc += e;
                if acc >= 0.99 * total {
                    k = i + 1;
                    break;
                }
            }
            assert_eq!(effective_rank(&x, 0.99).unwrap(), k, "seed {seed}");
        }
    }

    #[test]
    fn stable_rank_closed_forms_and_oracle() {
        let d = 7;
        let sr = stable_rank(&flat_spectrum(d)).unwrap();
        assert!((sr - d as f64).abs() < 1e-9, "{sr}");
        let mut line = Vec::new();
        for i in 0..20 {
            line.extend_from_slice(&[i as f64, 2.0 * i as f64, -(i as f64)]);
        }
        let sr1 = stable_rank(&Tensor::matrix(20, 3, line).unwrap()).unwrap();
        assert!((sr1 - 1.0).abs() < 1e-9);

        for seed in 0..10 {
            let x = random(40, 6, 100 + seed);
            let (g, d) = centered_gram(&x);
            let cov: Vec<f64> = g.iter().map(|v| v / 40.0).collect();
            let ev = jacobi_eigenvalues(&cov, d);
            let fro: f64 = ev.iter().map(|e| e * e).sum();
            let top = ev.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            let want = fro / (top * top);
            assert!((stable_rank(&x).unwrap() - want).abs() < 1e-8);
        }
        assert_eq!(stable_rank(&Tensor::full(&[4, 3], 2.0)).unwrap(), 0.0);
    }

    #[test]
    fn dormant_closed_forms() {
        assert_eq!(dormant_fraction(&Tensor::zeros(&[4, 6]), 1e-5).unwrap(), 100.0);
        assert_eq!(dormant_fraction(&Tensor::full(&[4, 6], 1.0), 1e-5).unwrap(), 0.0);
        let mut half = Tensor::zeros(&[3, 4]);
        for i in 0..3 {
            half.data_mut()[i * 4 + 1] = 1.0 + i as f64;
            half.data_mut()[i * 4 + 3] = 2.0;
        }
        assert_eq!(dormant_fraction(&half, 1e-5).unwrap(), 50.0);
    }

    #[test]
    fn weight_norm_closed_forms() {
        let mut p = ParamSet::new();
        p.push("a.weight", Tensor::zeros(&[2, 2]));
        assert_eq!(weight_norm(&p).total, 0.0);
        let mut p = ParamSet::new();
        p.push("a.weight", Tensor::scalar(3.0));
        assert_eq!(weight_norm(&p).total, 3.0);
        let mut p = ParamSet::new();
        p.push("l1.weight", Tensor::new(&[2], vec![3.0, 0.0]).unwrap());
        p.push("l2.weight", Tensor::new(&[1], vec![2.0]).unwrap());
        p.push("l2.bias", Tensor::new(&[2], vec![2.0, 2.0 * 2f64.sqrt()]).unwrap());
        let w = weight_norm(&p);
        assert_eq!(w.per_layer[0], ("l1".to_string(), 3.0));
        assert!((w.per_layer[1].1 - 4.0).abs() < 1e-12);
        assert!((w.total - 5.0).abs() < 1e-12);
    }

    /// Direct transcription with 1-based ranks.
    fn gini_reference(v: &[f64]) -> f64 {
        let mut s: Vec<f64> = v.iter().map(|x| x.abs()).collect();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len() as f64;
        let total: f64 = s.iter().sum();
        let mut acc = 0.0;
        for i in 1..=s.len() {
            acc += (n + 1.0 - i as f64) * s[i - 1];
        }
        1.0 + 1.0 / n - 2.0 / (n * total) * acc
    }

    #[test]
    fn gini_closed_forms_and_reference() {
        assert!(gini(&Tensor::full(&[3, 4], 0.7)).abs() < 1e-12);
        let mut one_hot = Tensor::zeros(&[1, 9]);
        one_hot.data_mut()[4] = 2.5;
        assert!((gini(&one_hot) - (1.0 - 1.0 / 9.0)).abs() < 1e-12);
        assert_eq!(gini(&Tensor::zeros(&[2, 2])), 0.0);
        for seed in 0..20 {
            let x = random(7, 5, seed);
            assert!((gini(&x) - gini_reference(x.data())).abs() < 1e-12);
        }
    }

    #[test]
    fn simplex_entropy_closed_forms() {
        let v = 8;
        let uniform = Tensor::full(&[3, 2 * v], 1.0 / v as f64);
        assert!((simplex_entropy(&uniform, 2, v).unwrap() - (v as f64).ln()).abs() < 1e-6);
        let mut hot = Tensor::zeros(&[2, 2 * v]);
        hot.data_mut()[0] = 1.0;
        hot.data_mut()[v + 3] = 1.0;
        hot.data_mut()[2 * v + 1] = 1.0;
        hot.data_mut()[3 * v + 7] = 1.0;
        assert!(simplex_entropy(&hot, 2, v).unwrap().abs() < 1e-6);
        assert!(simplex_entropy(&hot, 3, v).is_err());
        assert!(simplex_entropy(&Tensor::full(&[1, 4], -1.0), 1, 4).is_err());
    }

    #[test]
    fn action_std_closed_forms_and_two_pass() {
        assert_eq!(action_std(&Tensor::full(&[5, 2], 0.3)).unwrap(), 0.0);
        let a = Tensor::from_rows(&[vec![1.0, 3.0], vec![-1.0, -3.0]]).unwrap();
        assert!((action_std(&a).unwrap() - 2.0).abs() < 1e-15);
        let x = random(100, 3, 5);
        let mut want = 0.0;
        for j in 0..3 {
            let col: Vec<f64> = (0..100).map(|i| x.row(i)[j]).collect();
            let m = col.iter().sum::<f64>() / 100.0;
            want += (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 100.0).sqrt();
        }
        assert!((action_std(&x).unwrap() - want / 3.0).abs() < 1e-10);
    }

    #[test]
    fn gradient_energy_hand_cases() {
        let w = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let z = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let y = Tensor::matrix(2, 1, vec![-1.0, -1.0]).unwrap();
        let g = gradient_energy(&w, &z, &y).unwrap();
        assert_eq!((g.measured, g.bound), (4.0, 4.0));
        let y0 = Tensor::zeros(&[2, 1]);
        assert_eq!(gradient_energy(&w, &z, &y0).unwrap().measured, 0.0);
    }

    fn random_rotation(d: usize, rng: &mut Rng) -> Vec<f64> {
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v = rng.normal_vec(d);
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= dot * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                q.push(v.iter().map(|x| x / n).collect());
            }
        }
        q.concat()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ranks_are_rotation_invariant(seed in 0u64..10_000, n in 3usize..40, d in 1usize..8) {
            let mut rng = Rng::new(seed);
            let x = Tensor::matrix(n, d, rng.normal_vec(n * d)).unwrap();
            let q = random_rotation(d, &mut rng);
            let mut rotated = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    rotated[i * d + j] = (0..d).map(|k| x.row(i)[k] * q[k * d + j]).sum();
                }
            }
            let xr = Tensor::matrix(n, d, rotated).unwrap();
            let k = effective_rank(&x, 0.99).unwrap();
            prop_assert!(k <= (n - 1).min(d));
            let kr = effective_rank(&xr, 0.99).unwrap();
            prop_assert!(k.abs_diff(kr) <= 1);
            let s = stable_rank(&x).unwrap();
            prop_assert!(s <= d as f64 + 1e-9);
            prop_assert!((s - stable_rank(&xr).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn gini_is_scale_invariant(seed in 0u64..10_000, c in 0.01f64..100.0) {
            let x = random(4, 6, seed);
            let scaled = Tensor::matrix(4, 6, x.data().iter().map(|v| v * c).collect()).unwrap();
            prop_assert!((gini(&x) - gini(&scaled)).abs() < 1e-12);
        }
    }
}
