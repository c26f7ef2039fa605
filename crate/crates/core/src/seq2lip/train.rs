//! Teacher-forced training, checkpoint selection and encoder pretraining.

use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::net::{self, Hyper};
use super::nn::{linear, linear_back, softmax_rows, Mat};
use super::params::{average_checkpoints, xavier, Weights};
use super::{chunk_spans, frame_range, lr_schedule, mel_range, EncoderInit, OptimizerKind, Seq2LipModel, TrainConfig};
use crate::audiofeat::MelFeatures;
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// One utterance of paired features and ground-truth coefficients.
#[derive(Debug, Clone)]
pub struct TrainUtterance {
    pub id: String,
    pub mel: MelFeatures,
    pub traj: Trajectory,
    pub lipspace_ref: String,
}

impl TrainUtterance {
    fn duration(&self) -> f64 {
        self.traj.len() as f64 / self.traj.fps
    }
}

/// Mel features with one class label per Mel frame.
#[derive(Debug, Clone)]
pub struct LabeledUtterance {
    pub mel: MelFeatures,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epochs whose checkpoints were averaged, best first.
    pub averaged_epochs: Vec<usize>,
    /// Validation MSE-8D of the averaged model.
    pub final_val_mse: f64,
    pub train_chunks: usize,
}

struct Chunk {
    mel: Mat,
    target: Mat,
}

fn chunk_utterances(model: &Seq2LipModel, utts: &[TrainUtterance], chunk: f64, overlap: f64) -> Vec<Chunk> {
    let fps = model.hyper.fps_out;
    let mut out = Vec::new();
    for u in utts {
        for span in chunk_spans(u.duration(), chunk, overlap) {
            let (m0, m1) = mel_range(span, u.mel.fps(), u.mel.num_frames());
            let (f0, f1) = frame_range(span, fps);
            let f1 = f1.min(u.traj.len());
            if f1 <= f0 {
                continue;
            }
            out.push(Chunk {
                mel: model.normalize_features(&u.mel.frames.slice(s![m0..m1, ..]).to_owned()),
                target: u.traj.frames.slice(s![f0..f1, ..]).to_owned(),
            });
        }
    }
    out
}

/// Per-band mean and standard deviation over all frames.
fn feature_stats(mels: &[&Mat], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    let mut count = 0.0f64;
    for m in mels {
        for row in m.rows() {
            for (j, v) in row.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            count += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count.max(1.0)).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count.max(1.0) - m * m).max(0.0).sqrt().max(1e-3))
        .collect();
    (mean, std)
}

/// Adds the gradient of `scale * sum((y - target)^2)` to `grads`; returns the
/// plain sum of squared errors.
fn accumulate(
    w: &Weights,
    h: &Hyper,
    mel: &Mat,
    prev: &Mat,
    target: &Mat,
    cached_enc: Option<&Mat>,
    scale: f64,
    grads: &mut Weights,
) -> f64 {
    let (enc_out, enc_cache) = match cached_enc {
        Some(e) => (e.clone(), None),
        None => {
            let (e, c) = net::encode(w, h, mel);
            (e, Some(c))
        }
    };
    let (y, dec_cache) = net::decode(w, h, prev, &enc_out);
    let diff = &y - target;
    let sse = diff.iter().map(|d| d * d).sum::<f64>();
    let dy = diff * (2.0 * scale);
    let d_enc = net::decode_back(w, h, &dy, &dec_cache, grads, enc_out.nrows());
    if let Some(c) = enc_cache {
        net::encode_back(w, h, &d_enc, &c, grads);
    }
    sse
}

/// Mean squared error of one teacher-forced chunk and its full gradient.
pub fn loss_and_grad(w: &Weights, h: &Hyper, mel_norm: &Mat, target: &Mat) -> (f64, Weights) {
    let start = vec![0.0; h.out_dim];
    let prev = net::shift_right(&target.view(), &start);
    let mut grads = w.zeros_like();
    let n = target.len() as f64;
    let sse = accumulate(w, h, mel_norm, &prev, target, None, 1.0 / n, &mut grads);
    (sse / n, grads)
}

struct Optimizer {
    kind: OptimizerKind,
    m: Weights,
    v: Weights,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, w: &Weights) -> Self {
        Self {
            kind,
            m: w.zeros_like(),
            v: w.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, w: &mut Weights, g: &Weights, lr: f64, frozen_prefix: Option<&str>) {
        self.t += 1;
        const B1: f64 = 0.9;
        const B2: f64 = 0.98;
        const EPS: f64 = 1e-9;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (name, p) in w.tensors.iter_mut() {
            if frozen_prefix.is_some_and(|f| name.starts_with(f)) {
                continue;
            }
            let grad = g.get(name);
            match self.kind {
                OptimizerKind::Sgd => p.scaled_add(-lr, grad),
                OptimizerKind::Adam => {
                    let m = self.m.get_mut(name);
                    let v = self.v.get_mut(name);
                    ndarray::Zip::from(p).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
                        *m = B1 * *m + (1.0 - B1) * g;
                        *v = B2 * *v + (1.0 - B2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                    });
                }
            }
        }
    }
}

fn clip_gradients(g: &mut Weights, max_norm: f64) {
    if max_norm > 0.0 {
        let norm = g.sq_norm().sqrt();
        if norm > max_norm {
            g.scale(max_norm / norm);
        }
    }
}

/// Free-running (greedy) validation MSE-8D pooled over all frames.
fn validation_mse(model: &Seq2LipModel, utts: &[TrainUtterance], chunk: f64, overlap: f64) -> Result<f64> {
    let mut sse = 0.0;
    let mut n = 0usize;
    for u in utts {
        let pred = model.infer_features_with(&u.mel, u.duration(), chunk, overlap)?;
        let len = pred.len().min(u.traj.len());
        let d = &pred.frames.slice(s![..len, ..]) - &u.traj.frames.slice(s![..len, ..]);
        sse += d.iter().map(|x| x * x).sum::<f64>();
        n += d.len();
    }
    Ok(if n == 0 { f64::INFINITY } else { sse / n as f64 })
}

fn check_corpus(utts: &[TrainUtterance], lipspace_ref: &str, h: &Hyper) -> Result<()> {
    for u in utts {
        if u.lipspace_ref != lipspace_ref {
            return Err(Error::FingerprintMismatch {
                expected: lipspace_ref.to_string(),
                got: u.lipspace_ref.clone(),
            });
        }
        if u.traj.dim() != h.out_dim {
            return Err(Error::DimensionMismatch {
                expected: h.out_dim,
                got: u.traj.dim(),
            });
        }
        if (u.traj.fps - h.fps_out).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "utterance {} has {} fps, model expects {}",
                u.id, u.traj.fps, h.fps_out
            )));
        }
        if u.mel.frames.ncols() != h.n_mels {
            return Err(Error::DimensionMismatch {
                expected: h.n_mels,
                got: u.mel.frames.ncols(),
            });
        }
    }
    Ok(())
}

/// Train a model on `train`, selecting and averaging the `top_k_average` best
/// epoch checkpoints by validation MSE.
pub fn train(
    train: &[TrainUtterance],
    val: &[TrainUtterance],
    hyper: &Hyper,
    cfg: &TrainConfig,
    lipspace_ref: &str,
    encoder: Option<&EncoderCheckpoint>,
) -> Result<(Seq2LipModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    check_corpus(train, lipspace_ref, hyper)?;
    check_corpus(val, lipspace_ref, hyper)?;
    let val = if val.is_empty() {
        log::warn!("no validation utterances; selecting checkpoints on the training set");
        train
    } else {
        val
    };

    let mut model = Seq2LipModel::new(hyper.clone(), cfg.seed, lipspace_ref);
    model.chunk_seconds = cfg.chunk_seconds;
    model.overlap_seconds = cfg.overlap_seconds;
    model.train_config = Some(cfg.clone());
    match (cfg.encoder_init, encoder) {
        (EncoderInit::Pretrained, Some(enc)) => model.load_encoder(enc)?,
        (EncoderInit::Pretrained, None) => {
            return Err(Error::Config(
                "encoder_init = pretrained needs an encoder checkpoint".into(),
            ))
        }
        (EncoderInit::Random, _) => {
            let mels: Vec<&Mat> = train.iter().map(|u| &u.mel.frames).collect();
            let (mean, std) = feature_stats(&mels, hyper.n_mels);
            model.feat_mean = mean;
            model.feat_std = std;
        }
    }

    run(model, train, val, cfg)
}

/// Continue training an existing model (e.g. on a new speaker), keeping its
/// feature normalization.
pub fn fine_tune(
    base: &Seq2LipModel,
    train: &[TrainUtterance],
    val: &[TrainUtterance],
    cfg: &TrainConfig,
) -> Result<(Seq2LipModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    check_corpus(train, &base.lipspace_ref, &base.hyper)?;
    check_corpus(val, &base.lipspace_ref, &base.hyper)?;
    let val = if val.is_empty() { train } else { val };
    let mut model = base.clone();
    model.chunk_seconds = cfg.chunk_seconds;
    model.overlap_seconds = cfg.overlap_seconds;
    model.train_config = Some(cfg.clone());
    run(model, train, val, cfg)
}

fn run(
    mut model: Seq2LipModel,
    train: &[TrainUtterance],
    val: &[TrainUtterance],
    cfg: &TrainConfig,
) -> Result<(Seq2LipModel, TrainReport)> {
    let hyper = &model.hyper.clone();
    let chunks = chunk_utterances(&model, train, cfg.chunk_seconds, cfg.overlap_seconds);
    let frozen = !cfg.encoder_trainable;
    let cached: Vec<Option<Mat>> = chunks
        .iter()
        .map(|c| frozen.then(|| net::encode(&model.weights, hyper, &c.mel).0))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let noise = Normal::new(0.0, cfg.input_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut opt = Optimizer::new(cfg.optimizer, &model.weights);
    let start = model.decoder_start_frame();
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut step = 0usize;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Vec<(f64, usize, Weights)> = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sse = 0.0;
        let mut epoch_n = 0usize;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps);
            let n: usize = batch.iter().map(|&i| chunks[i].target.len()).sum();
            let mut grads = model.weights.zeros_like();
            for &i in batch {
                let c = &chunks[i];
                let mut prev = net::shift_right(&c.target.view(), &start);
                if cfg.input_noise > 0.0 {
                    prev.slice_mut(s![1.., ..]).mapv_inplace(|v| v + noise.sample(&mut rng));
                }
                epoch_sse += accumulate(
                    &model.weights,
                    hyper,
                    &c.mel,
                    &prev,
                    &c.target,
                    cached[i].as_ref(),
                    1.0 / n as f64,
                    &mut grads,
                );
            }
            epoch_n += n;
            clip_gradients(&mut grads, cfg.grad_clip);
            opt.step(&mut model.weights, &grads, lr, frozen.then_some("enc."));
        }
        let val_mse = validation_mse(&model, val, cfg.chunk_seconds, cfg.overlap_seconds)?;
        let train_loss = epoch_sse / epoch_n.max(1) as f64;
        log::info!("epoch {epoch}: steps {step} lr {lr:.3e} train {train_loss:.5} val {val_mse:.5}");
        logs.push(EpochLog {
            epoch,
            steps: step,
            lr,
            train_loss,
            val_metric: val_mse,
        });
        best.push((val_mse, epoch, model.weights.clone()));
        best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        best.truncate(cfg.top_k_average);
    }

    let selected: Vec<Weights> = best.iter().map(|b| b.2.clone()).collect();
    model.weights = average_checkpoints(&selected)?;
    let final_val_mse = validation_mse(&model, val, cfg.chunk_seconds, cfg.overlap_seconds)?;
    Ok((
        model,
        TrainReport {
            epochs: logs,
            averaged_epochs: best.iter().map(|b| b.1).collect(),
            final_val_mse,
            train_chunks: chunks.len(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub chunk_seconds: f64,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 6,
            warmup_steps: 100,
            peak_lr: 1e-3,
            chunk_seconds: 11.0,
            optimizer: OptimizerKind::Adam,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Encoder weights (all `enc.*` tensors) plus the feature normalization they expect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub version: String,
    pub hyper: Hyper,
    pub weights: Weights,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
    pub classes: Vec<String>,
    pub heldout_accuracy: f64,
}

impl EncoderCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<EpochLog>,
    pub heldout_accuracy: f64,
    pub chance_accuracy: f64,
}

struct LabeledChunk {
    mel: Mat,
    /// One label per stacked encoder frame.
    labels: Vec<usize>,
}

fn labeled_chunks(utts: &[LabeledUtterance], h: &Hyper, mean: &[f64], std: &[f64], chunk: f64) -> Vec<LabeledChunk> {
    let mut out = Vec::new();
    for u in utts {
        let total = u.mel.num_frames();
        let duration = total as f64 / u.mel.fps();
        for span in chunk_spans(duration, chunk, 0.0) {
            let (m0, m1) = mel_range(span, u.mel.fps(), total);
            let mut mel = u.mel.frames.slice(s![m0..m1, ..]).to_owned();
            for mut row in mel.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[j]) / std[j];
                }
            }
            let groups = (m1 - m0).div_ceil(h.stack);
            let labels = (0..groups)
                .map(|k| u.labels[(m0 + k * h.stack + h.stack / 2).min(m1 - 1)])
                .collect();
            out.push(LabeledChunk { mel, labels });
        }
    }
    out
}

/// Cross-entropy over frames; returns (sum loss, correct count) and
/// accumulates gradients when `grads` is given.
fn classify(w: &Weights, h: &Hyper, c: &LabeledChunk, scale: f64, grads: Option<&mut Weights>) -> (f64, usize) {
    let (enc, cache) = net::encode(w, h, &c.mel);
    let mut p = linear(&enc.view(), w.get("asr.out.w"), w.get("asr.out.b"));
    softmax_rows(&mut p);
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &l) in p.rows().into_iter().zip(&c.labels) {
        loss -= row[l].max(1e-300).ln();
        let arg = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a })
            .0;
        correct += usize::from(arg == l);
    }
    if let Some(g) = grads {
        let mut dlogits = p;
        for (mut row, &l) in dlogits.rows_mut().into_iter().zip(&c.labels) {
            row[l] -= 1.0;
            row *= scale;
        }
        let mut gw = g.get("asr.out.w").clone();
        let mut gb = g.get("asr.out.b").clone();
        let d_enc = linear_back(&enc.view(), w.get("asr.out.w"), &dlogits, &mut gw, &mut gb);
        g.insert("asr.out.w", gw);
        g.insert("asr.out.b", gb);
        net::encode_back(w, h, &d_enc, &cache, g);
    }
    (loss, correct)
}

/// Train the encoder with a framewise phoneme-classification head, which is
/// discarded afterwards.
pub fn pretrain_encoder(
    train: &[LabeledUtterance],
    heldout: &[LabeledUtterance],
    classes: &[String],
    hyper: &Hyper,
    cfg: &PretrainConfig,
) -> Result<(EncoderCheckpoint, PretrainReport)> {
    if train.is_empty() {
        return Err(Error::Empty("pretraining corpus".into()));
    }
    if classes.is_empty() {
        return Err(Error::Empty("class list".into()));
    }
    for u in train.iter().chain(heldout) {
        if u.labels.len() != u.mel.num_frames() {
            return Err(Error::LengthMismatch {
                expected: u.mel.num_frames(),
                got: u.labels.len(),
            });
        }
        if let Some(&bad) = u.labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::OutOfRange {
                index: bad,
                limit: classes.len(),
            });
        }
    }
    let mels: Vec<&Mat> = train.iter().map(|u| &u.mel.frames).collect();
    let (mean, std) = feature_stats(&mels, hyper.n_mels);

    let full = net::init_weights(hyper, cfg.seed);
    let mut w = full.filter_prefix("enc.");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xa5a));
    w.insert("asr.out.w", xavier(&mut rng, hyper.d_model, classes.len()));
    w.insert("asr.out.b", Array2::zeros((1, classes.len())));

    let chunks = labeled_chunks(train, hyper, &mean, &std, cfg.chunk_seconds);
    let held = labeled_chunks(heldout, hyper, &mean, &std, cfg.chunk_seconds);
    let mut opt = Optimizer::new(cfg.optimizer, &w);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut step = 0;
    let mut logs = Vec::new();
    let accuracy = |w: &Weights, set: &[LabeledChunk]| {
        let (mut ok, mut n) = (0, 0);
        for c in set {
            ok += classify(w, hyper, c, 0.0, None).1;
            n += c.labels.len();
        }
        ok as f64 / n.max(1) as f64
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut count, mut lr) = (0.0, 0usize, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps);
            let n: usize = batch.iter().map(|&i| chunks[i].labels.len()).sum();
            let mut g = w.zeros_like();
            for &i in batch {
                loss += classify(&w, hyper, &chunks[i], 1.0 / n as f64, Some(&mut g)).0;
            }
            count += n;
            clip_gradients(&mut g, cfg.grad_clip);
            opt.step(&mut w, &g, lr, None);
        }
        let acc = if held.is_empty() {
            accuracy(&w, &chunks)
        } else {
            accuracy(&w, &held)
        };
        log::info!(
            "pretrain epoch {epoch}: loss {:.4} heldout acc {acc:.3}",
            loss / count.max(1) as f64
        );
        logs.push(EpochLog {
            epoch,
            steps: step,
            lr,
            train_loss: loss / count.max(1) as f64,
            val_metric: acc,
        });
    }
    let heldout_accuracy = logs.last().map_or(0.0, |l| l.val_metric);
    Ok((
        EncoderCheckpoint {
            version: super::MODEL_VERSION.into(),
            hyper: hyper.clone(),
            weights: w.filter_prefix("enc."),
            feat_mean: mean,
            feat_std: std,
            classes: classes.to_vec(),
            heldout_accuracy,
        },
        PretrainReport {
            epochs: logs,
            heldout_accuracy,
            chance_accuracy: 1.0 / classes.len() as f64,
        },
    ))
}
