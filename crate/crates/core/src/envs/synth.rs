use serde::{Deserialize, Serialize};

use crate::diffcore::{Rng, Tensor};
use crate::error::{param_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    /// Class means are drawn from `N(0, I) * mean_scale`.
    pub mean_scale: f64,
    pub train_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            input_dim: 32,
            n_classes: 10,
            mean_scale: 3.0,
            train_frac: 0.8,
        }
    }
}

/// Gaussian class clusters split once into train and eval parts.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub means: Tensor,
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub eval_x: Tensor,
    pub eval_y: Vec<usize>,
    pub n_classes: usize,
}

impl SynthDataset {
    pub fn input_dim(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn n_train(&self) -> usize {
        self.train_y.len()
    }
}

pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    if cfg.n_classes < 2 {
        return Err(param_err!("need at least two classes, got {}", cfg.n_classes));
    }
    if cfg.input_dim == 0 || cfg.n_samples < cfg.n_classes {
        return Err(param_err!("dataset needs input_dim >= 1 and n_samples >= n_classes"));
    }
    if !(cfg.train_frac > 0.0 && cfg.train_frac < 1.0) {
        return Err(param_err!("train_frac must lie in (0, 1)"));
    }
    let root = Rng::new(seed);
    let mut mean_rng = root.split(0);
    let mut sample_rng = root.split(1);
    let mut split_rng = root.split(2);

    let d = cfg.input_dim;
    let means: Vec<f64> = mean_rng
        .normal_vec(cfg.n_classes * d)
        .iter()
        .map(|x| x * cfg.mean_scale)
        .collect();

    let labels: Vec<usize> = (0..cfg.n_samples).map(|i| i % cfg.n_classes).collect();
    let mut xs = Vec::with_capacity(cfg.n_samples * d);
    for &y in &labels {
        for j in 0..d {
            xs.push(means[y * d + j] + sample_rng.normal());
        }
    }

    let order = split_rng.permutation(cfg.n_samples);
    let n_train = ((cfg.n_samples as f64) * cfg.train_frac).round() as usize;
    let gather = |idx: &[usize]| -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        let t = Tensor::matrix(idx.len(), d, data).expect("non-empty split");
        (t, idx.iter().map(|&i| labels[i]).collect())
    };
    let (train_x, train_y) = gather(&order[..n_train]);
    let (eval_x, eval_y) = gather(&order[n_train..]);
    Ok(SynthDataset {
        means: Tensor::matrix(cfg.n_classes, d, means)?,
        train_x,
        train_y,
        eval_x,
        eval_y,
        n_classes: cfg.n_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_balanced() {
        let cfg = SynthConfig::default();
        let a = synth_generate(&cfg, 4).unwrap();
        assert_eq!(a, synth_generate(&cfg, 4).unwrap());
        assert_ne!(a, synth_generate(&cfg, 5).unwrap());
        let mut counts = vec![0usize; cfg.n_classes];
        for &y in a.train_y.iter().chain(&a.eval_y) {
            counts[y] += 1;
        }
        let lo = *counts.iter().min().unwrap();
        let hi = *counts.iter().max().unwrap();
        assert!(hi - lo <= 1, "{counts:?}");
        assert_eq!(a.n_train(), 1600);
        assert_eq!(a.eval_y.len(), 400);
    }

    #[test]
    fn linear_probe_separates_classes() {
        let cfg = SynthConfig::default();
        let ds = synth_generate(&cfg, 9).unwrap();
        let (k, d) = (cfg.n_classes, cfg.input_dim);
        // Class-mean scores w_k . x + b_k estimated from the training split.
        let mut w = vec![0.0; k * d];
        let mut n = vec![0.0; k];
        for (i, &y) in ds.train_y.iter().enumerate() {
            for j in 0..d {
                w[y * d + j] += ds.train_x.row(i)[j];
            }
            n[y] += 1.0;
        }
        for c in 0..k {
            for j in 0..d {
                w[c * d + j] /= n[c];
            }
        }
        let b: Vec<f64> = (0..k)
            .map(|c| -0.5 * w[c * d..(c + 1) * d].iter().map(|x| x * x).sum::<f64>())
            .collect();
        let mut correct = 0;
        for (i, &y) in ds.eval_y.iter().enumerate() {
            let x = ds.eval_x.row(i);
            let pred = (0..k)
                .map(|c| {
                    (
                        c,
                        w[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[c],
                    )
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            correct += usize::from(pred == y);
        }
        let acc = correct as f64 / ds.eval_y.len() as f64;
        assert!(acc > 0.6, "{acc}");
    }

    #[test]
    fn rejects_single_class() {
        let cfg = SynthConfig {
            n_classes: 1,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&cfg, 0).is_err());
    }
}
