use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use octopus_core::cd::CdConfig;
use octopus_core::dpo::{replay_pair, train_replayed, TrainConfig};
use octopus_core::exec::Execution;
use octopus_core::experiments::{analyze_enumerate, evaluate, EvalTask, Policy};
use octopus_core::head::{init_head, HeadConfig};
use octopus_core::preference::{build_preference_pairs, PrefBuildConfig};
use octopus_core::sim::{ModelConfig, SimModel};
use octopus_core::world::{gen_dataset, CauseMix, DatasetConfig};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn bench(c: &mut Criterion) {
    let model = SimModel::new(ModelConfig::default()).unwrap();
    let cd = CdConfig::default();
    let describe = gen_dataset(&DatasetConfig::describe(120, CauseMix::uniform()), 7).unwrap();

    let mut g = c.benchmark_group("eval-octopus");
    g.sample_size(10);
    let head = init_head(HeadConfig::default(), 0).unwrap();
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, &describe, &Policy::Octopus(Box::new(head.clone())), EvalTask::Gen, &cd, 0, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("enumerate-prefix-2");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| analyze_enumerate(&model, &describe, 2, &cd, exec).unwrap())
        });
    }
    g.finish();

    let pairs = build_preference_pairs(&model, &describe, &cd, &PrefBuildConfig::default()).unwrap();
    let replayed: Vec<_> = pairs.iter().take(32).map(|p| replay_pair(&model, &describe, p, &cd).unwrap()).collect();
    let mut g = c.benchmark_group("dpo-epoch");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig { epochs: 1, batch_size: 8, exec, ..TrainConfig::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut h = head.clone();
                train_replayed(&mut h, &replayed, &cfg).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
