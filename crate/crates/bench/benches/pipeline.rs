use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textlip_core::align::{dtw_with, DtwOptions};
use textlip_core::audiofeat::{mel_features, mfcc_framelocked, AudioClip, SAMPLE_RATE};
use textlip_core::harness::corpus::{lip_samples, random_track, synthetic_landmark_tracks};
use textlip_core::harness::SyntheticSpeaker;
use textlip_core::lipspace;
use textlip_core::seq2lip::{loss_and_grad, Hyper};
use textlip_core::ttslite::{synthesize, PhonemeInventory};
use textlip_core::Seq2LipModel;

fn speech(seconds: f64) -> AudioClip {
    let inv = PhonemeInventory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let track = random_track(&mut rng, seconds, &inv, 118.0).unwrap();
    synthesize(&track, &inv, SAMPLE_RATE, 1).unwrap()
}

fn bench_dtw(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Array2::from_shape_fn((300, 40), |_| rng.gen::<f64>());
    let b = Array2::from_shape_fn((330, 40), |_| rng.gen::<f64>());
    c.bench_function("dtw_300x330x40", |bch| {
        bch.iter(|| dtw_with(a.view(), b.view(), DtwOptions::default()).unwrap())
    });
    c.bench_function("dtw_300x330x40_band30", |bch| {
        bch.iter(|| dtw_with(a.view(), b.view(), DtwOptions { band: Some(30) }).unwrap())
    });
}

fn bench_features(c: &mut Criterion) {
    let clip = speech(10.0);
    let hyper = Hyper::default();
    c.bench_function("mel_10s", |b| {
        b.iter(|| mel_features(black_box(&clip), &hyper.mel).unwrap())
    });
    c.bench_function("mfcc_framelocked_10s", |b| {
        b.iter(|| mfcc_framelocked(black_box(&clip), 30.0, 40).unwrap())
    });
}

fn bench_pca(c: &mut Criterion) {
    let tracks = synthetic_landmark_tracks(&SyntheticSpeaker::reference(), 3, 2, 120.0, 30.0).unwrap();
    let samples = lip_samples(&tracks).unwrap();
    c.bench_function("pca_fit_7200x40", |b| {
        b.iter(|| lipspace::fit(black_box(&samples), 8).unwrap())
    });
}

fn bench_model(c: &mut Criterion) {
    let hyper = Hyper::default();
    let model = Seq2LipModel::new(hyper.clone(), 4, "bench");
    let clip = speech(10.0);
    let mel = model.features(&clip).unwrap();
    c.bench_function("infer_10s", |b| {
        b.iter(|| model.infer_features(black_box(&mel), clip.duration()).unwrap())
    });

    let short = speech(4.0);
    let mel = model.normalize_features(&model.features(&short).unwrap().frames);
    let frames = (short.duration() * hyper.fps_out).round() as usize;
    let target = Array2::from_elem((frames, hyper.out_dim), 0.1);
    c.bench_function("loss_and_grad_4s", |b| {
        b.iter(|| loss_and_grad(&model.weights, &hyper, black_box(&mel), &target))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_dtw, bench_features, bench_pca, bench_model
}
criterion_main!(benches);
