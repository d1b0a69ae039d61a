//! Categorical (C51) return distributions on a fixed atom grid.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{contract_err, param_err, shape_err, Result};

/// Uniform atom grid `z_i = v_min + i·Δz`.
#[derive(Clone, Debug, PartialEq)]
pub struct Support {
    v_min: f64,
    v_max: f64,
    delta_z: f64,
    atoms: Vec<f64>,
}

impl Support {
    pub fn new(v_min: f64, v_max: f64, n_atoms: usize) -> Result<Self> {
        if !(v_min < v_max) || !v_min.is_finite() || !v_max.is_finite() {
            return Err(param_err!("support needs finite v_min < v_max, got [{v_min}, {v_max}]"));
        }
        if n_atoms < 2 {
            return Err(param_err!("support needs at least 2 atoms"));
        }
        let delta_z = (v_max - v_min) / (n_atoms - 1) as f64;
        let mut atoms: Vec<f64> = (0..n_atoms).map(|i| v_min + i as f64 * delta_z).collect();
        atoms[n_atoms - 1] = v_max;
        Ok(Self {
            v_min,
            v_max,
            delta_z,
            atoms,
        })
    }

    /// Support spanning the discounted value range implied by per-step
    /// reward bounds: `[r_min/(1−γ), r_max/(1−γ)]`.
    pub fn from_reward_bounds(r_min: f64, r_max: f64, gamma: f64, n_atoms: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(param_err!("gamma must lie in [0, 1) to bound returns"));
        }
        Self::new(r_min / (1.0 - gamma), r_max / (1.0 - gamma), n_atoms)
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn delta_z(&self) -> f64 {
        self.delta_z
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    /// Atoms as an `n × 1` column, for expected values on a tape.
    pub fn atom_column(&self) -> Tensor {
        Tensor::matrix(self.atoms.len(), 1, self.atoms.clone()).expect("n >= 2")
    }
}

/// Batch of categorical distributions over a shared support.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDist {
    support: Support,
    probs: Vec<f64>,
}

impl CategoricalDist {
    /// Validates that every row is non-negative and sums to 1 within 1e-9.
    pub fn new(support: Support, probs: Vec<f64>) -> Result<Self> {
        let n = support.n_atoms();
        if probs.is_empty() || !probs.len().is_multiple_of(n) {
            return Err(shape_err!("{} probabilities do not tile {n} atoms", probs.len()));
        }
        for (i, row) in probs.chunks(n).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (s - 1.0).abs() > 1e-9 {
                return Err(contract_err!("row {i} is not a probability vector (sum {s})"));
            }
        }
        Ok(Self { support, probs })
    }

    /// Row-wise softmax of `batch × n_atoms` logits.
    pub fn from_logits(support: Support, logits: &Tensor) -> Result<Self> {
        let (_, n) = logits.dims2()?;
        if n != support.n_atoms() {
            return Err(shape_err!("{n} logits for {} atoms", support.n_atoms()));
        }
        let mut probs = logits.data().to_vec();
        for row in probs.chunks_mut(n) {
            crate::diffcore::softmax_in_place(row, 1.0);
        }
        Self::new(support, probs)
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn batch(&self) -> usize {
        self.probs.len() / self.support.n_atoms()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.support.n_atoms();
        &self.probs[i * n..(i + 1) * n]
    }

    /// Keeps the rows listed in `rows`, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let probs = rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self {
            support: self.support.clone(),
            probs,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.batch(), self.support.n_atoms(), self.probs.clone()).expect("valid")
    }
}

/// Projects the Bellman-shifted distribution `r + γ(1−done)·Z` back onto the
/// fixed support with the triangular (hat) kernel.
pub fn project(target: &CategoricalDist, rewards: &[f64], dones: &[bool], gamma: f64) -> Result<CategoricalDist> {
    let sup = target.support();
    let n = sup.n_atoms();
    let batch = target.batch();
    if rewards.len() != batch || dones.len() != batch {
        return Err(shape_err!("projection batch {batch} with {} rewards", rewards.len()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(param_err!("gamma must lie in [0, 1]"));
    }
    let mut out = vec![0.0; batch * n];
    for b in 0..batch {
        let p = target.row(b);
        let m = &mut out[b * n..(b + 1) * n];
        let disc = if dones[b] { 0.0 } else { gamma };
        for (j, &pj) in p.iter().enumerate() {
            if pj == 0.0 {
                continue;
            }
            let tz = (rewards[b] + disc * sup.atoms[j]).clamp(sup.v_min, sup.v_max);
            let pos = ((tz - sup.v_min) / sup.delta_z).clamp(0.0, (n - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            if lo == hi {
                m[lo] += pj;
            } else {
                m[lo] += pj * (hi as f64 - pos);
                m[hi] += pj * (pos - lo as f64);
            }
        }
        let s: f64 = m.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            m.iter_mut().for_each(|x| *x /= s);
        }
    }
    CategoricalDist::new(sup.clone(), out)
}

/// Batch-mean cross-entropy `−Σ_i m_i log softmax(ℓ)_i`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, target: &CategoricalDist) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape != [target.batch(), target.support().n_atoms()] {
        return Err(shape_err!(
            "logits {shape:?} vs target [{}x{}]",
            target.batch(),
            target.support().n_atoms()
        ));
    }
    let lp = tape.log_softmax(logits)?;
    let m = tape.constant(target.to_tensor());
    let prod = tape.mul(lp, m)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / target.batch() as f64)
}

/// `Σ_i p_i z_i` for every row.
pub fn expected_value(dist: &CategoricalDist) -> Vec<f64> {
    let z = dist.support().atoms();
    dist.probs
        .chunks(z.len())
        .map(|row| row.iter().zip(z).map(|(p, z)| p * z).sum())
        .collect()
}

/// Differentiable expected value of `softmax(logits)`, shape `batch × 1`.
pub fn expected_value_var(tape: &mut Tape, logits: Var, support: &Support) -> Result<Var> {
    let p = tape.softmax(logits)?;
    let z = tape.constant(support.atom_column());
    tape.matmul(p, z)
}

/// Squared L2 distance between CDFs, `Σ_j (F₁(z_j) − F₂(z_j))²·Δz`, per row.
pub fn cramer_distance(p1: &CategoricalDist, p2: &CategoricalDist) -> Result<Vec<f64>> {
    if p1.support() != p2.support() {
        return Err(contract_err!("Cramér distance needs a shared support"));
    }
    if p1.batch() != p2.batch() {
        return Err(shape_err!("batch {} vs {}", p1.batch(), p2.batch()));
    }
    let dz = p1.support().delta_z();
    Ok((0..p1.batch())
        .map(|b| {
            let (mut f1, mut f2, mut acc) = (0.0, 0.0, 0.0);
            for (a, c) in p1.row(b).iter().zip(p2.row(b)) {
                f1 += a;
                f2 += c;
                acc += (f1 - f2) * (f1 - f2);
            }
            acc * dz
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, ParamSet, Rng};

    fn point(sup: &Support, k: usize) -> CategoricalDist {
        let mut p = vec![0.0; sup.n_atoms()];
        p[k] = 1.0;
        CategoricalDist::new(sup.clone(), p).unwrap()
    }

    fn random_dist(sup: &Support, batch: usize, rng: &mut Rng) -> CategoricalDist {
        let logits = Tensor::matrix(batch, sup.n_atoms(), rng.normal_vec(batch * sup.n_atoms())).unwrap();
        CategoricalDist::from_logits(sup.clone(), &logits).unwrap()
    }

    /// Direct transcription of the hat-kernel sum over all atom pairs.
    fn brute_project(d: &CategoricalDist, r: &[f64], done: &[bool], gamma: f64) -> Vec<f64> {
        let s = d.support();
        let mut out = Vec::new();
        for b in 0..d.batch() {
            for zi in s.atoms() {
                let mut m = 0.0;
                for (pj, zj) in d.row(b).iter().zip(s.atoms()) {
                    let g = if done[b] { 0.0 } else { gamma };
                    let t = (r[b] + g * zj).clamp(s.v_min(), s.v_max());
                    m += pj * (1.0 - (t - zi).abs() / s.delta_z()).max(0.0);
                }
                out.push(m);
            }
        }
        out
    }

    #[test]
    fn support_layout() {
        let s = Support::new(-10.0, 10.0, 101).unwrap();
        assert_eq!(s.atoms()[0], -10.0);
        assert_eq!(s.atoms()[100], 10.0);
        assert!((s.delta_z() - 0.2).abs() < 1e-15);
        assert!(s.atoms().windows(2).all(|w| w[1] > w[0]));
        assert!(Support::new(1.0, 1.0, 5).is_err());
        assert!(Support::new(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn identity_shift() {
        let s = Support::new(-10.0, 10.0, 51).unwrap();
        let d = random_dist(&s, 4, &mut Rng::new(1));
        let m = project(&d, &[0.0; 4], &[false; 4], 1.0).unwrap();
        for (a, b) in m.probs().iter().zip(d.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_atom_landing_and_split() {
        let s = Support::new(0.0, 10.0, 11).unwrap();
        let m = project(&point(&s, 0), &[s.delta_z()], &[false], 1.0).unwrap();
        assert!((m.row(0)[1] - 1.0).abs() < 1e-12);

        let d = point(&s, 0);
        let r = [0.4 * s.delta_z()];
        let m = project(&d, &r, &[false], 1.0).unwrap();
        assert!((m.row(0)[0] - 0.6).abs() < 1e-12);
        assert!((m.row(0)[1] - 0.4).abs() < 1e-12);
        let brute = brute_project(&d, &r, &[false], 1.0);
        for (a, b) in m.probs().iter().zip(&brute) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_matches_brute_force() {
        let s = Support::new(-5.0, 3.0, 17).unwrap();
        let mut rng = Rng::new(4);
        let d = random_dist(&s, 8, &mut rng);
        let r: Vec<f64> = (0..8).map(|_| rng.uniform_range(-8.0, 8.0)).collect();
        let done: Vec<bool> = (0..8).map(|i| i % 3 == 0).collect();
        let m = project(&d, &r, &done, 0.9).unwrap();
        for (a, b) in m.probs().iter().zip(brute_project(&d, &r, &done, 0.9)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn terminal_collapses_to_reward() {
        let s = Support::new(-10.0, 10.0, 21).unwrap();
        let d = random_dist(&s, 1, &mut Rng::new(8));
        let m = project(&d, &[3.0], &[true], 0.99).unwrap();
        assert!((m.row(0)[13] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_rows_rejected() {
        let s = Support::new(0.0, 1.0, 2).unwrap();
        assert!(CategoricalDist::new(s.clone(), vec![0.7, 0.7]).is_err());
        assert!(CategoricalDist::new(s, vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let s = Support::new(-1.0, 1.0, 101).unwrap();
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[1, 101]));
        let u = CategoricalDist::new(s.clone(), vec![1.0 / 101.0; 101]).unwrap();
        let ce = cross_entropy(&mut t, l, &u).unwrap();
        assert!((t.value(ce).item() - 101f64.ln()).abs() < 1e-12);

        let mut rng = Rng::new(3);
        let logits = Tensor::matrix(2, 101, rng.normal_vec(202)).unwrap();
        let target = CategoricalDist::from_logits(s, &logits).unwrap();
        let entropy: f64 = target.probs().iter().map(|p| -p * p.ln()).sum::<f64>() / 2.0;
        let l = t.constant(logits);
        let ce = cross_entropy(&mut t, l, &target).unwrap();
        assert!((t.value(ce).item() - entropy).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_target() {
        let s = Support::new(-1.0, 1.0, 7).unwrap();
        let mut rng = Rng::new(12);
        let target = random_dist(&s, 3, &mut rng);
        let mut p = ParamSet::new();
        p.push("logits", Tensor::matrix(3, 7, rng.normal_vec(21)).unwrap());
        let err = finite_diff_check(|t, b| cross_entropy(t, b.get(0), &target), &p, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");

        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let ce = cross_entropy(&mut t, b.get(0), &target).unwrap();
        let g = t.backward(ce).unwrap();
        let sm = CategoricalDist::from_logits(s, p.get(0)).unwrap();
        for ((gk, pk), mk) in g.get(b.get(0)).unwrap().iter().zip(sm.probs()).zip(target.probs()) {
            assert!((gk - (pk - mk) / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn expected_value_cases() {
        let s = Support::new(-10.0, 10.0, 11).unwrap();
        assert_eq!(expected_value(&point(&s, 7)), vec![4.0]);
        let u = CategoricalDist::new(s.clone(), vec![1.0 / 11.0; 11]).unwrap();
        assert!(expected_value(&u)[0].abs() < 1e-12);

        let d = random_dist(&s, 5, &mut Rng::new(9));
        let ev = expected_value(&d);
        for b in 0..5 {
            let mut acc = 0.0;
            for i in 0..11 {
                acc += d.row(b)[i] * s.atoms()[i];
            }
            assert!((ev[b] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn cramer_cases() {
        let s = Support::new(0.0, 4.0, 5).unwrap();
        let d = cramer_distance(&point(&s, 0), &point(&s, 1)).unwrap();
        assert!((d[0] - s.delta_z()).abs() < 1e-15);

        let mut rng = Rng::new(2);
        let a = random_dist(&s, 4, &mut rng);
        let b = random_dist(&s, 4, &mut rng);
        assert!(cramer_distance(&a, &a).unwrap().iter().all(|&x| x == 0.0));
        assert_eq!(cramer_distance(&a, &b).unwrap(), cramer_distance(&b, &a).unwrap());

        let other = Support::new(0.0, 5.0, 5).unwrap();
        assert!(cramer_distance(&a, &point(&other, 0)).is_err());
    }
}
