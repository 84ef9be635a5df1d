use cinecav::biomarkers::{self, BiomarkerConfig};
use cinecav::interp;
use cinecav::model::{self, Example, LossWeights, ModelConfig, ModelParams};
use cinecav::phantom::{self, CohortSpec, Dims, DiseaseEffect};
use cinecav::rng::{self, Domain};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn phantom_generation(c: &mut Criterion) {
    let mut rng = rng::stream(1, Domain::Subject, 0);
    let params = phantom::sample_params(&mut rng, Dims::DESK, true, &DiseaseEffect::default());
    c.bench_function("generate_subject desk", |b| {
        b.iter(|| phantom::generate_subject(0, black_box(&params), 20, Dims::DESK, Some(true)).unwrap())
    });
    let paper = phantom::sample_params(&mut rng, Dims::PAPER, true, &DiseaseEffect::default());
    c.bench_function("generate_subject paper dims", |b| {
        b.iter(|| phantom::generate_subject(0, black_box(&paper), 50, Dims::PAPER, Some(true)).unwrap())
    });
}

fn biomarker_measurement(c: &mut Criterion) {
    let cohort = phantom::generate_cohort(&CohortSpec::new(1, 1.0, 2)).unwrap();
    let seq = &cohort.dataset.subjects[0];
    let cfg = BiomarkerConfig::default();
    c.bench_function("measure desk", |b| b.iter(|| biomarkers::measure(black_box(seq), &cfg).unwrap()));
}

fn training_step(c: &mut Criterion) {
    let cohort = phantom::generate_cohort(&CohortSpec::new(8, 0.25, 3)).unwrap();
    let data = &cohort.dataset;
    let params = ModelParams::init(&ModelConfig::new(data.dims, data.frames), 3).unwrap();
    let batch: Vec<Example> = data.subjects.iter().map(Example::from_sequence).collect();
    let w = LossWeights { beta: 0.2, gamma: 1.0 };
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("gradients batch of 8", |b| b.iter(|| model::gradients(black_box(&params), &batch, w).unwrap()));
    group.bench_function("predict one subject", |b| b.iter(|| params.predict(black_box(&data.subjects[0])).unwrap()));
    group.finish();
}

fn pca(c: &mut Criterion) {
    use rand::Rng;
    let mut rng = rng::stream(4, Domain::Init, 0);
    let points: Vec<Vec<f64>> = (0..200).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    c.bench_function("pca 200x16", |b| b.iter(|| interp::pca_project(black_box(&points), 2).unwrap()));
}

criterion_group!(benches, phantom_generation, biomarker_measurement, training_step, pca);
criterion_main!(benches);
