use serde::{Deserialize, Serialize};

use super::MetricsSink;
use crate::diagnostics::{self, MetricsRow};
use crate::diffcore::{AdamState, Rng, Tape, Tensor};
use crate::envs::{synth_generate, SynthConfig, SynthDataset};
use crate::error::{param_err, Result};
use crate::heads::{HeadCtx, HeadKind};
use crate::networks::{HeadedMlp, MlpSpec, OutputAct};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonstatConfig {
    /// Labels are re-permuted at the start of every epoch that is a positive
    /// multiple of this period.
    pub shuffle_period_epochs: usize,
    pub total_epochs: usize,
    pub dataset: SynthConfig,
    pub head: HeadKind,
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training inputs used for the per-epoch feature diagnostics.
    pub diag_samples: usize,
}

impl Default for NonstatConfig {
    fn default() -> Self {
        Self {
            shuffle_period_epochs: 20,
            total_epochs: 100,
            dataset: SynthConfig::default(),
            head: HeadKind::Baseline,
            hidden: 256,
            batch_size: 64,
            learning_rate: 1e-3,
            diag_samples: 1024,
        }
    }
}

impl NonstatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shuffle_period_epochs == 0 {
            return Err(param_err!("shuffle_period_epochs must be >= 1"));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.diag_samples < 2 {
            return Err(param_err!("batch_size and hidden must be >= 1, diag_samples >= 2"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(param_err!("learning_rate must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NonstatRun {
    pub rows: Vec<MetricsRow>,
    pub net: HeadedMlp,
    pub dataset: SynthDataset,
    /// Training labels in force at the end of the run.
    pub labels: Vec<usize>,
    /// Every permutation applied, in order.
    pub permutations: Vec<Vec<usize>>,
}

/// Fraction of rows of `x` whose argmax logit equals the label.
pub fn accuracy(net: &HeadedMlp, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let (logits, _) = net.infer(x)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let r = logits.row(i);
            (0..r.len()).fold(0, |b, k| if r[k] > r[b] { k } else { b }) == y
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Supervised classification on the synthetic dataset with periodic label
/// permutations. One row per epoch, in which `critic_loss` is the epoch's
/// mean training cross-entropy, `eval_return` the training accuracy under
/// the current labels, and the feature metrics describe the penultimate
/// layer on a fixed slice of training inputs.
pub fn nonstationary_train(cfg: &NonstatConfig, seed: u64, sink: &mut dyn MetricsSink) -> Result<NonstatRun> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let data = synth_generate(&cfg.dataset, seed)?;
    let spec = MlpSpec {
        in_dim: data.input_dim(),
        hidden: cfg.hidden,
        out_dim: data.n_classes,
        head: cfg.head.clone(),
        output: OutputAct::Identity,
    };
    let mut net = HeadedMlp::new(spec, &mut root.split(0))?;
    let mut opt = AdamState::new(net.params(), cfg.learning_rate)?;
    let mut order_rng = root.split(1);
    let mut perm_rng = root.split(2);
    let mut head_rng = root.split(3);

    let n = data.n_train();
    let d = data.input_dim();
    let diag_n = cfg.diag_samples.min(n);
    let diag_x = Tensor::matrix(diag_n, d, data.train_x.data()[..diag_n * d].to_vec())?;
    let mut labels = data.train_y.clone();
    let mut permutations = Vec::new();
    let mut rows = Vec::with_capacity(cfg.total_epochs);

    for epoch in 0..cfg.total_epochs {
        if epoch > 0 && epoch % cfg.shuffle_period_epochs == 0 {
            let p = perm_rng.permutation(data.n_classes);
            labels.iter_mut().for_each(|y| *y = p[*y]);
            permutations.push(p);
        }
        let order = order_rng.permutation(n);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let mut xs = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                xs.extend_from_slice(data.train_x.row(i));
            }
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let b = net.params().bind(&mut tape);
            let x = tape.constant(Tensor::matrix(idx.len(), d, xs)?);
            let f = net.forward(&mut tape, &b, x, &mut HeadCtx::train(&mut head_rng))?;
            let lp = tape.log_softmax(f.out)?;
            let picked = tape.pick(lp, &ys)?;
            let mean = tape.mean(picked)?;
            let mut loss = tape.neg(mean)?;
            if let Some(aux) = f.aux_loss {
                loss = tape.add(loss, aux)?;
            }
            let value = tape.value(loss).item();
            super::finite_or_abort(value, epoch as u64, "classification loss")?;
            loss_sum += value;
            batches += 1;
            let g = tape.backward(loss)?;
            net.params_mut().accumulate(&g, &b)?;
            opt.step(net.params_mut())?;
        }

        let mut row = MetricsRow::at(epoch as u64 + 1);
        row.critic_loss = Some(loss_sum / batches as f64);
        row.eval_return = Some(accuracy(&net, &data.train_x, &labels)?);
        let (_, feat) = net.infer(&diag_x)?;
        row.eff_rank_critic = Some(diagnostics::effective_rank(&feat, 0.99)? as f64);
        row.stable_rank = Some(diagnostics::stable_rank(&feat)?);
        row.dormant_frac = Some(diagnostics::dormant_fraction(&feat, 1e-5)?);
        row.weight_norm_critic = Some(diagnostics::weight_norm(net.params()).total);
        row.gini = Some(diagnostics::gini(&feat));
        if let HeadKind::Sem(c) = &cfg.head {
            row.simplex_entropy = Some(diagnostics::simplex_entropy(&feat, c.groups, c.group_dim)?);
        }
        sink.record(&row)?;
        rows.push(row);
    }
    Ok(NonstatRun {
        rows,
        net,
        dataset: data,
        labels,
        permutations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(period: usize, epochs: usize) -> NonstatConfig {
        NonstatConfig {
            shuffle_period_epochs: period,
            total_epochs: epochs,
            hidden: 32,
            dataset: SynthConfig {
                n_samples: 400,
                ..SynthConfig::default()
            },
            ..NonstatConfig::default()
        }
    }

    #[test]
    fn long_period_is_stationary() {
        let mut rows: Vec<MetricsRow> = Vec::new();
        let run = nonstationary_train(&small(100, 10), 0, &mut rows).unwrap();
        assert!(run.permutations.is_empty());
        assert_eq!(run.labels, run.dataset.train_y);
        assert_eq!(rows.len(), 10);
        assert!(rows[9].eval_return.unwrap() >= 0.99, "{:?}", rows[9].eval_return);
    }

    #[test]
    fn permutations_are_bijections_applied_on_schedule() {
        let mut rows: Vec<MetricsRow> = Vec::new();
        let run = nonstationary_train(&small(3, 10), 1, &mut rows).unwrap();
        assert_eq!(run.permutations.len(), 3);
        let mut composed = run.dataset.train_y.clone();
        for p in &run.permutations {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..10).collect::<Vec<_>>());
            composed.iter_mut().for_each(|y| *y = p[*y]);
        }
        assert_eq!(composed, run.labels);
    }
}
