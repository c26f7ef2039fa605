use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{self, Hyper};
use super::*;
use crate::audiofeat::MelConfig;

fn tiny() -> Hyper {
    Hyper {
        n_mels: 6,
        stack: 2,
        d_model: 16,
        heads: 2,
        ff_dim: 16,
        enc_layers: 2,
        dec_layers: 2,
        mel: MelConfig {
            n_mels: 6,
            ..MelConfig::default()
        },
        ..Hyper::default()
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, a: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.gen_range(-a..a))
}

#[test]
fn gradient_matches_finite_differences() {
    let h = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut w = net::init_weights(&h, 3);
    // Non-trivial norms and biases so every path carries gradient.
    for (k, v) in w.tensors.iter_mut() {
        if k.ends_with(".g") {
            *v = v.mapv(|x| x + rng.gen_range(-0.3..0.3));
        } else if v.nrows() == 1 {
            *v = rand_mat(&mut rng, 1, v.ncols(), 0.2);
        }
    }
    let mel = rand_mat(&mut rng, 11, h.n_mels, 1.0);
    let target = rand_mat(&mut rng, 5, h.out_dim, 1.0);
    let (_, grads) = loss_and_grad(&w, &h, &mel, &target);
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = w.tensors.keys().cloned().collect();
    for name in &names {
        let n = w.get(name).len();
        for idx in 0..n {
            let orig = w.get(name).as_slice().unwrap()[idx];
            w.get_mut(name).as_slice_mut().unwrap()[idx] = orig + eps;
            let (lp, _) = loss_and_grad(&w, &h, &mel, &target);
            w.get_mut(name).as_slice_mut().unwrap()[idx] = orig - eps;
            let (lm, _) = loss_and_grad(&w, &h, &mel, &target);
            w.get_mut(name).as_slice_mut().unwrap()[idx] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let ana = grads.get(name).as_slice().unwrap()[idx];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn incremental_decoding_matches_teacher_forcing() {
    let h = Hyper {
        n_mels: 10,
        mel: MelConfig {
            n_mels: 10,
            ..MelConfig::default()
        },
        ..Hyper::default()
    };
    let model = Seq2LipModel::new(h.clone(), 4, "fp");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mel = rand_mat(&mut rng, 40, h.n_mels, 1.0);
    let pred = model.predict_frames(&mel, 14);
    let (enc, _) = net::encode(&model.weights, &h, &mel);
    let prev = net::shift_right(&pred.view(), &model.decoder_start_frame());
    let (full, _) = net::decode(&model.weights, &h, &prev, &enc);
    for (a, b) in pred.iter().zip(full.iter()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn infer_length_law_and_overlap_mean() {
    let h = Hyper {
        n_mels: 8,
        d_model: 16,
        heads: 2,
        ff_dim: 16,
        enc_layers: 1,
        dec_layers: 1,
        mel: MelConfig {
            n_mels: 8,
            ..MelConfig::default()
        },
        ..Hyper::default()
    };
    let model = Seq2LipModel::new(h, 9, "fp");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples: Vec<f32> = (0..22050 * 22).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let full = AudioClip::new(22050, samples);
    for d in [0.5, 0.77, 3.3, 11.0, 12.9, 21.0] {
        let clip = full.slice_seconds(0.0, d);
        let traj = model.infer(&clip).unwrap();
        assert_eq!(traj.len(), (clip.duration() * 30.0).round() as usize, "duration {d}");
    }
    let clip = full.slice_seconds(0.0, 21.0);
    let mel = model.features(&clip).unwrap();
    let traj = model.infer(&clip).unwrap();
    let a = model.predict_chunk(&mel, (0.0, 11.0));
    let b = model.predict_chunk(&mel, (10.0, 21.0));
    assert_eq!(a.nrows(), 330);
    for t in 0..630 {
        for j in 0..8 {
            let expect = if t < 300 {
                a[[t, j]]
            } else if t < 330 {
                (a[[t, j]] + b[[t - 300, j]]) / 2.0
            } else {
                b[[t - 300, j]]
            };
            assert_eq!(traj.frames[[t, j]], expect);
        }
    }
    assert!(matches!(
        model.infer(&full.slice_seconds(0.0, 0.1)),
        Err(Error::TooShort(_))
    ));
}

fn toy_corpus(h: &Hyper, n: usize, seed: u64, constant: Option<f64>) -> Vec<TrainUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let frames = 30 + i * 3;
            let mel_frames = (frames as f64 * 22050.0 / 256.0 / 30.0).ceil() as usize;
            let mel = rand_mat(&mut rng, mel_frames, h.n_mels, 1.0);
            let target = match constant {
                Some(c) => Array2::from_elem((frames, 8), c),
                None => rand_mat(&mut rng, frames, 8, 1.0),
            };
            TrainUtterance {
                id: format!("u{i}"),
                mel: MelFeatures {
                    frames: mel,
                    hop_samples: 256,
                    window_samples: 1024,
                    sample_rate: 22050,
                },
                traj: Trajectory::new(30.0, target).unwrap(),
                lipspace_ref: "fp".into(),
            }
        })
        .collect()
}

#[test]
fn constant_target_converges() {
    let h = tiny();
    let data = toy_corpus(&h, 6, 1, Some(0.5));
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 1,
        warmup_steps: 20,
        peak_lr: 0.02,
        top_k_average: 1,
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    };
    let (_, report) = train(&data[..4], &data[4..], &h, &cfg, "fp", None).unwrap();
    let last = report.epochs.last().unwrap();
    assert!(last.train_loss < 1e-3, "train loss {}", last.train_loss);
    assert!(report.final_val_mse < 1e-3, "val {}", report.final_val_mse);
}

#[test]
fn training_is_deterministic_and_checks_fingerprints() {
    let h = tiny();
    let data = toy_corpus(&h, 4, 2, None);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        warmup_steps: 4,
        top_k_average: 2,
        input_noise: 0.1,
        ..TrainConfig::default()
    };
    let (a, _) = train(&data[..3], &data[3..], &h, &cfg, "fp", None).unwrap();
    let (b, _) = train(&data[..3], &data[3..], &h, &cfg, "fp", None).unwrap();
    assert_eq!(a.weights, b.weights);
    assert!(matches!(
        train(&data[..3], &data[3..], &h, &cfg, "other", None),
        Err(Error::FingerprintMismatch { .. })
    ));
    assert!(matches!(train(&[], &data, &h, &cfg, "fp", None), Err(Error::Empty(_))));
}

#[test]
fn frozen_encoder_is_untouched_and_pretraining_learns() {
    let h = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Class is decodable from which band is loud.
    let labeled: Vec<LabeledUtterance> = (0..8)
        .map(|_| {
            let t = 60;
            let labels: Vec<usize> = (0..t).map(|i| (i / 10 + rng.gen_range(0..2)) % 3).collect();
            let frames = Array2::from_shape_fn((t, h.n_mels), |(i, j)| if j == labels[i] * 2 { 3.0 } else { 0.0 });
            LabeledUtterance {
                mel: MelFeatures {
                    frames,
                    hop_samples: 256,
                    window_samples: 1024,
                    sample_rate: 22050,
                },
                labels,
            }
        })
        .collect();
    let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let pcfg = PretrainConfig {
        epochs: 30,
        batch_size: 2,
        warmup_steps: 10,
        peak_lr: 3e-3,
        ..PretrainConfig::default()
    };
    let (enc, report) = pretrain_encoder(&labeled[..6], &labeled[6..], &classes, &h, &pcfg).unwrap();
    assert!(report.heldout_accuracy > 0.9, "accuracy {}", report.heldout_accuracy);
    assert!(enc.weights.tensors.keys().all(|k| k.starts_with("enc.")));

    let data = toy_corpus(&h, 3, 3, None);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        warmup_steps: 2,
        top_k_average: 2,
        encoder_init: EncoderInit::Pretrained,
        encoder_trainable: false,
        ..TrainConfig::default()
    };
    let (model, _) = train(&data[..2], &data[2..], &h, &cfg, "fp", Some(&enc)).unwrap();
    assert_eq!(model.weights.filter_prefix("enc."), enc.weights);
}

#[test]
fn model_file_round_trip() {
    let model = Seq2LipModel::new(tiny(), 1, "abc");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    model.save(&p).unwrap();
    assert_eq!(Seq2LipModel::load(&p).unwrap(), model);
}
