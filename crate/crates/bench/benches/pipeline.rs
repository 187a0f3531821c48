use criterion::{criterion_group, criterion_main, Criterion};
use labelmig::change::{irmad_stacks, IrmadOptions};
use labelmig::forest::{fit, predict_raster, ForestConfig};
use labelmig_bench::{scene, training_set};

fn irmad(c: &mut Criterion) {
    let s = scene("small", 1);
    let opts = IrmadOptions { max_iter: 10, tol: 0.0 };
    c.bench_function("irmad_128x128x6_10iter", |b| {
        b.iter(|| irmad_stacks(&s.t0, &s.t1, opts).unwrap())
    });
}

fn forest(c: &mut Criterion) {
    let s = scene("bench", 1);
    let (x, y) = training_set(&s);
    let config = ForestConfig::with_seed(3);
    c.bench_function("forest_fit_1500x6_100trees", |b| b.iter(|| fit(&x, &y, &config).unwrap()));
    let model = fit(&x, &y, &config).unwrap();
    let small = scene("small", 1);
    c.bench_function("predict_raster_128x128", |b| {
        b.iter(|| predict_raster(&model, &small.t0).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = irmad, forest
}
criterion_main!(benches);
