use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use eemax_core::chanmodel::ChannelMatrix;
use eemax_core::inet::{mp_forward, net_forward, net_forward_batch, Head, ELL_MIN};
use eemax_core::objective::PowerModel;
use eemax_core::oracle::{grid_search, OracleConfig};
use eemax_core::trainer::{Trainer, TrainConfig};
use eemax_bench::{dataset, network};

fn forward(c: &mut Criterion) {
    let ds = dataset(4, 64);
    let net = network();
    let gs: Vec<&ChannelMatrix> = ds.samples().iter().collect();
    c.bench_function("net_forward_batch I=4 B=64", |b| {
        b.iter(|| net_forward_batch(&gs, &net, Head::Alpha, ELL_MIN).unwrap())
    });
    let g = &ds.samples()[0];
    c.bench_function("net_forward I=4", |b| b.iter(|| net_forward(g, &net, Head::Alpha, ELL_MIN).unwrap()));
    c.bench_function("mp_forward I=4", |b| b.iter(|| mp_forward(g, &net, Head::Alpha, ELL_MIN).unwrap()));
}

fn training(c: &mut Criterion) {
    let ds = dataset(4, 64);
    let trainer = Trainer::new(TrainConfig::default()).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("epoch I=4 n=64 batch=64 smc=16", |b| {
        b.iter_batched(|| trainer.clone(), |mut t| t.step_epoch(&ds).unwrap(), BatchSize::LargeInput)
    });
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let model = PowerModel::default();
    let mut group = c.benchmark_group("oracle");
    group.sample_size(10);
    for users in [2, 3, 4] {
        let ds = dataset(users, 1);
        let cfg = OracleConfig::for_users(users);
        group.bench_function(format!("grid I={users} k={}", cfg.grid_points), |b| {
            b.iter(|| grid_search(&ds.samples()[0], 1.0, &model, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, training, oracle);
criterion_main!(benches);
