use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gazesal::data::generate_synthetic;
use gazesal::eval::{bootstrap_auc, BootstrapConfig, ScoredExample};
use gazesal::model::UNetConfig;
use gazesal::train::{evaluate_loss, FrozenSaliency, Regime, TrainConfig};
use gazesal::{exec, BackwardRule, Execution, UNetModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("serial", Execution::Serial), ("parallel", Execution::Parallel)];

fn batch_gradients(c: &mut Criterion) {
    let examples = generate_synthetic(3, 64, 0).unwrap();
    let model = UNetModel::<f32>::build(UNetConfig { input_size: 64, encoder_channels: vec![4, 8, 16], seed: 0, ..Default::default() }).unwrap();
    let regime = Regime::Combined { rule: BackwardRule::Guided, alpha: 0.5 };
    let cfg = TrainConfig::default();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::new(name, examples.len()), |b| {
            b.iter(|| {
                exec::map(mode, &examples, |_, ex| {
                    let rec = model.forward_one(&ex.input()).unwrap();
                    let class = ex.label.index();
                    let frozen = FrozenSaliency::capture(&model, &rec, &regime, class).unwrap();
                    evaluate_loss(&model, &rec, &frozen, &regime, &cfg, class, &ex.gaze_static.values, true).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bootstrap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let scored: Vec<ScoredExample> = (0..300)
        .map(|i| ScoredExample {
            image_id: format!("s{i}"),
            scores: std::array::from_fn(|k| rng.random_range(0.0..1.0) + if k == i % 3 { 0.3 } else { 0.0 }),
            true_label: i % 3,
        })
        .collect();
    let cfg = BootstrapConfig { iterations: 200, ..Default::default() };
    let mut group = c.benchmark_group("bootstrap_auc");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::new(name, cfg.iterations), |b| b.iter(|| bootstrap_auc(&scored, &cfg, mode).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, bootstrap);
criterion_main!(benches);
