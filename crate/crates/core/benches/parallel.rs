//! Sequential loops against the `par` helpers on the same workloads.
//!
//! Build with `--no-default-features` to see the helpers fall back to the
//! sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use semrl::agents::{Batch, Td3Agent, Td3Config};
use semrl::diffcore::{Rng, Tensor};
use semrl::distrl::Support;
use semrl::heads::{HeadKind, SemConfig};
use semrl::par;

fn batch(n: usize, rng: &mut Rng) -> Batch {
    Batch {
        obs: Tensor::matrix(n, 6, rng.normal_vec(n * 6)).unwrap(),
        act: Tensor::matrix(n, 2, rng.uniform_vec(n * 2, -1.0, 1.0)).unwrap(),
        rew: rng.uniform_vec(n, -1.0, 0.0),
        next_obs: Tensor::matrix(n, 6, rng.normal_vec(n * 6)).unwrap(),
        done: vec![false; n],
    }
}

/// Independent agents, one critic update each: the shape of a seed sweep.
fn agent_updates(c: &mut Criterion) {
    let cfg = Td3Config {
        hidden: 64,
        num_atoms: 51,
        ..Td3Config::default()
    };
    let head = HeadKind::Sem(SemConfig::new(8, 8, 1.0).unwrap());
    let support = Support::new(-100.0, 0.0, 51).unwrap();
    let mut rng = Rng::new(0);
    let b = batch(128, &mut rng);
    let mut group = c.benchmark_group("critic_update_per_agent");
    for n in [2usize, 8] {
        let agents: Vec<Td3Agent> = (0..n)
            .map(|i| Td3Agent::new(6, 2, &head, &cfg, Some(support.clone()), &Rng::new(i as u64)).unwrap())
            .collect();
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bch, _| {
            bch.iter(|| {
                let mut a = agents.clone();
                let s: Vec<f64> = a.iter_mut().map(|x| x.critic_update(&b).unwrap().loss).collect();
                black_box(s)
            })
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bch, _| {
            bch.iter(|| {
                let mut a = agents.clone();
                black_box(par::map_mut(&mut a, |_, x| x.critic_update(&b).unwrap().loss))
            })
        });
    }
    group.finish();
}

/// Monte-Carlo reduction of the kind used by the gradient-energy check.
fn chunked_sum(c: &mut Criterion) {
    let n = 1 << 20;
    let f = |i: usize| {
        let x = (i as f64 * 1e-6).sin();
        x * x
    };
    let mut group = c.benchmark_group("chunked_sum");
    group.bench_function("sequential", |bch| bch.iter(|| black_box((0..n).map(f).sum::<f64>())));
    group.bench_function("parallel", |bch| {
        bch.iter(|| black_box(par::sum_chunked(n, 1 << 14, f)))
    });
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = agent_updates, chunked_sum
}
criterion_main!(benches);
