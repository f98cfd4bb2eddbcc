use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spm_core::concept::WordTokenizer;
use spm_core::diffusion::standard_normal;
use spm_core::gating::permeability;
use spm_core::nn::Geometry;
use spm_core::toy::denoiser::{DenoiserConfig, ToyDenoiser};
use spm_core::toy::vocab::default_anchor_vocabulary;
use spm_core::toy::{ToyTextEncoder, ToyVocabulary};
use spm_core::{inject, intervened_forward, Applied, AnchorPool, LayerShape, ModelSignature, NoisePredictor, NoiseSchedule, TextEncoder};

fn perturbed(sig: &ModelSignature, d: usize) -> spm_core::Membrane {
    let mut m = inject(sig, d, 1).unwrap();
    let p: Vec<f64> = m.parameters().iter().enumerate().map(|(i, v)| v + 1e-3 * (i % 7) as f64).collect();
    m.set_parameters(&p).unwrap();
    m
}

fn intervened(c: &mut Criterion) {
    let mut group = c.benchmark_group("intervened_forward");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (label, shape, geometry) in [
        ("linear_320x320", LayerShape::new("fc", 320, 320, 1), Geometry::Linear),
        ("conv3x3_32ch_16x16", LayerShape::new("conv", 32, 32, 3), Geometry::Conv { kernel: 3, height: 16, width: 16 }),
    ] {
        let positions = geometry.positions();
        let sig = ModelSignature::new(vec![shape.clone()]);
        let x = standard_normal(8, shape.n * positions, &mut rng);
        let host = standard_normal(8, shape.m * positions, &mut rng);
        for k in [1usize, 4] {
            let ms: Vec<_> = (0..k).map(|_| perturbed(&sig, 1)).collect();
            let layers: Vec<_> = ms.iter().map(|m| (&m.layers()[0], 1.0)).collect();
            group.bench_with_input(BenchmarkId::new(label, format!("{k}_membranes")), &layers, |b, layers| {
                b.iter(|| intervened_forward(black_box(x.view()), black_box(&host), geometry, layers).unwrap())
            });
        }
    }
    group.finish();
}

fn gating(c: &mut Criterion) {
    let encoder = ToyTextEncoder::new(ToyVocabulary::new(0));
    let mut m = inject(&ModelSignature::new(vec![LayerShape::new("l", 2, 2, 1)]), 1, 0).unwrap();
    m.targets = vec!["red square".into(), "blue circle".into()];
    c.bench_function("gating/toy_encoder_two_targets", |b| {
        b.iter(|| permeability(&m, black_box("a photo of a red circle"), &encoder, &encoder).unwrap())
    });
    c.bench_function("gating/word_tokenizer_only", |b| {
        b.iter(|| spm_core::gating::token_similarity("Van Gogh", black_box("a starry night in the style of Van Gogh"), &WordTokenizer).unwrap())
    });
}

fn anchors(c: &mut Criterion) {
    let encoder = ToyTextEncoder::new(ToyVocabulary::new(0));
    let cands = default_anchor_vocabulary().iter().map(|v| encoder.encode(v).unwrap()).collect::<Vec<_>>();
    let target = encoder.encode("red square").unwrap();
    let pool = AnchorPool::from_encodings(cands.clone(), &target, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    c.bench_function("anchors/build_pool", |b| b.iter(|| AnchorPool::from_encodings(cands.clone(), black_box(&target), 1.0).unwrap()));
    c.bench_function("anchors/draw_4", |b| b.iter(|| pool.sample(4, &mut rng)));
}

fn denoiser(c: &mut Criterion) {
    let model = ToyDenoiser::new(DenoiserConfig::default(), NoiseSchedule::linear(50, 2e-3, 0.4), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = standard_normal(16, model.sample_width(), &mut rng);
    let cond: Array2<f64> = standard_normal(16, model.cond_width(), &mut rng);
    let t = vec![25; 16];
    let m = perturbed(&model.signature(), 1);
    let mut group = c.benchmark_group("denoiser_forward_batch16");
    group.bench_function("frozen", |b| b.iter(|| model.predict(black_box(&x), &cond, &t, &[]).unwrap()));
    group.bench_function("one_membrane", |b| b.iter(|| model.predict(black_box(&x), &cond, &t, &[Applied::new(&m, 1.0)]).unwrap()));
    group.finish();
}

criterion_group!(benches, intervened, gating, anchors, denoiser);
criterion_main!(benches);
