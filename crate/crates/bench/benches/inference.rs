use cirnas_core::controller::compute_phi;
use cirnas_core::eval::EvalGrid;
use cirnas_core::{ModulationModel, SearchState, SliceMode, Tensor, TrainConfig};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Desk-sized model whose consensus covers the first `prefix` sites.
fn model(prefix: usize) -> ModulationModel {
    let mut st = SearchState::new(TrainConfig::desk()).unwrap();
    st.consensus.za = vec![1.0; st.consensus.za.len()];
    st.consensus.s = (0..st.consensus.sites)
        .map(|i| if i < prefix { 0.99 } else { 0.0 })
        .collect();
    st.consensus.phi = compute_phi(&st.consensus.s, st.consensus.config.gamma);
    ModulationModel::from_search(&st, SliceMode::Full).unwrap()
}

fn inference(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f32>::randn([1, 3, 128, 128], 0.3, &mut rng);
    let tasks: Vec<_> = EvalGrid::standard().tasks().into_iter().take(8).collect();
    let m = model(10);
    for t in &tasks {
        m.tail(t).unwrap();
    }

    let mut group = c.benchmark_group("desk_128px");
    group.sample_size(20);
    group.bench_function("single_effect", |b| b.iter(|| m.run_single(&x, &tasks[0]).unwrap()));
    group.bench_function("8_effects_reuse", |b| b.iter(|| m.run(&x, &tasks).unwrap()));
    group.bench_function("8_effects_recompute", |b| {
        b.iter(|| {
            for t in &tasks {
                m.run_single(&x, t).unwrap();
            }
        })
    });
    let prepared = m.prepare(&x).unwrap();
    group.bench_function("tail_only", |b| b.iter(|| m.apply(&prepared, &tasks[1]).unwrap()));
    group.finish();
}

criterion_group!(benches, inference);
criterion_main!(benches);
