use criterion::{criterion_group, criterion_main, Criterion};
use trig::synthgen::{GenSpec, GlyphAtlas, ATLAS_SEED};
use trig::training::{batch_gradients, prepare_examples, Example};
use trig::{Exec, Model, ModelConfig};

fn toy_batch(n: usize) -> Vec<Example> {
    let cfg = ModelConfig::toy();
    let spec = GenSpec::digits(n, 1, cfg.input_h, cfg.input_w);
    let atlas = GlyphAtlas::new(ATLAS_SEED);
    let samples = (0..n)
        .map(|i| {
            let s = spec.render(i, &atlas).unwrap();
            trig::synthgen::LoadedSample {
                path: format!("{i}"),
                label: s.label,
                image: s.image,
            }
        })
        .collect();
    prepare_examples(samples, &cfg).unwrap()
}

fn bench(c: &mut Criterion) {
    let model = Model::<f32>::new(ModelConfig::toy(), 0).unwrap();
    let data = toy_batch(16);
    let batch: Vec<&Example> = data.iter().collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| batch_gradients(&model, &batch, Exec::Sequential)));
    group.bench_function("parallel", |b| b.iter(|| batch_gradients(&model, &batch, Exec::Parallel)));
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
