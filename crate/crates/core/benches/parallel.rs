//! Compares the rayon dispatch path against the always-sequential reference
//! on the two hot per-sample workloads: inference embedding and the
//! diversity gradient check.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bgs_core::bsnet::{channel_margins, diversity_loss_with_margins, DEFAULT_EPSILON};
use bgs_core::bsnet::Mode;
use bgs_core::dataforge::{synth_dataset, SynthConfig};
use bgs_core::numkit::{rng_from_seed, Tensor2};
use bgs_core::par;
use bgs_core::pipeline::{init_model, TrainPlan};
use rand::Rng as _;

fn bench_batch_inference(c: &mut Criterion) {
    let (ds, attrs) = synth_dataset(&SynthConfig {
        num_seen: 20,
        num_unseen: 5,
        per_class: 40,
        k: 32,
        d: 16,
        noise_sigma: 0.1,
        seed: 42,
    })
    .unwrap();
    let model = init_model(&TrainPlan::desk_default(42), ds.k, attrs.d).unwrap();
    let mut group = c.benchmark_group("batch_inference");
    group.bench_function(BenchmarkId::new("dispatch", ds.features.len()), |b| {
        b.iter(|| {
            par::map_collect(&ds.features, |x| {
                model.bsnet.bsnet_forward(x, 1, Mode::Infer, false, None).unwrap().0
            })
        })
    });
    group.bench_function(BenchmarkId::new("sequential", ds.features.len()), |b| {
        b.iter(|| {
            par::map_collect_seq(&ds.features, |x| {
                model.bsnet.bsnet_forward(x, 1, Mode::Infer, false, None).unwrap().0
            })
        })
    });
    group.finish();
}

fn bench_diversity_grad(c: &mut Criterion) {
    let mut rng = rng_from_seed(7);
    let mats: Vec<Tensor2> = (0..256)
        .map(|_| {
            let mut w = Tensor2::zeros(8, 64);
            w.data.iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.95));
            w
        })
        .collect();
    let grad_all = |w: &Tensor2| {
        let margins = channel_margins(w, 10, DEFAULT_EPSILON);
        diversity_loss_with_margins(w, &margins).0
    };
    let mut group = c.benchmark_group("diversity_grad");
    group.bench_function("dispatch", |b| b.iter(|| par::map_collect(&mats, grad_all)));
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_collect_seq(&mats, grad_all))
    });
    group.finish();
}

criterion_group!(benches, bench_batch_inference, bench_diversity_grad);
criterion_main!(benches);
