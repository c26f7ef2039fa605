//! Speech-to-lip sequence model: Mel frames in, 8-dim PCA coefficient
//! trajectories out.

pub mod net;
pub mod nn;
pub mod params;
mod train;

use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::audiofeat::{mel_features, AudioClip, MelFeatures};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

pub use net::Hyper;
pub use params::{average_checkpoints, Weights};
pub use train::{
    fine_tune, loss_and_grad, pretrain_encoder, train, EncoderCheckpoint, EpochLog, LabeledUtterance, PretrainConfig,
    PretrainReport, TrainReport, TrainUtterance,
};

pub const MODEL_VERSION: &str = "textlip-seq2lip/1";
pub const MIN_INFER_SECONDS: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderInit {
    Random,
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub chunk_seconds: f64,
    pub overlap_seconds: f64,
    pub top_k_average: usize,
    pub encoder_init: EncoderInit,
    pub encoder_trainable: bool,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Std of Gaussian noise added to teacher-forced decoder inputs.
    pub input_noise: f64,
}

/// Settings sized for a 30-minute corpus on one CPU core: Adam, fewer
/// epochs, short warm-up and noisy teacher forcing.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            warmup_steps: 100,
            peak_lr: 3e-3,
            top_k_average: 3,
            optimizer: OptimizerKind::Adam,
            grad_clip: 1.0,
            input_noise: 0.3,
            ..Self::full_scale()
        }
    }
}

impl TrainConfig {
    /// The full-scale recipe: plain SGD, 100 epochs, 5000 warm-up steps,
    /// top-10 checkpoint averaging.
    pub fn full_scale() -> Self {
        Self {
            epochs: 100,
            batch_size: 6,
            warmup_steps: 5000,
            peak_lr: 0.02,
            chunk_seconds: 11.0,
            overlap_seconds: 1.0,
            top_k_average: 10,
            encoder_init: EncoderInit::Random,
            encoder_trainable: true,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            grad_clip: 0.0,
            input_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.overlap_seconds >= 0.0 && self.overlap_seconds < self.chunk_seconds) {
            return Err(Error::Config(format!(
                "overlap {} must be in [0, chunk {})",
                self.overlap_seconds, self.chunk_seconds
            )));
        }
        if self.top_k_average == 0 {
            return Err(Error::Config("top_k_average must be at least 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.warmup_steps == 0 || !(self.peak_lr > 0.0) {
            return Err(Error::Config("warmup_steps and peak_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Chunk boundaries in seconds: starts at multiples of `chunk - overlap`, the
/// last chunk ends at `duration`.
pub fn chunk_spans(duration: f64, chunk: f64, overlap: f64) -> Vec<(f64, f64)> {
    assert!(overlap < chunk, "overlap must be shorter than the chunk");
    if duration <= chunk {
        return vec![(0.0, duration)];
    }
    let stride = chunk - overlap;
    let mut spans = Vec::new();
    let mut k = 0usize;
    loop {
        let start = k as f64 * stride;
        let end = start + chunk;
        if end >= duration {
            spans.push((start, duration));
            break;
        }
        spans.push((start, end));
        k += 1;
    }
    spans
}

/// Linear warm-up to `peak`, then inverse square-root decay.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Output frame range `[round(start*fps), round(end*fps))` of a chunk.
pub fn frame_range(span: (f64, f64), fps: f64) -> (usize, usize) {
    ((span.0 * fps).round() as usize, (span.1 * fps).round() as usize)
}

/// Mel frame range of a chunk, clamped to `total` frames and never empty.
pub fn mel_range(span: (f64, f64), mel_fps: f64, total: usize) -> (usize, usize) {
    let start = ((span.0 * mel_fps).round() as usize).min(total.saturating_sub(1));
    let end = ((span.1 * mel_fps).round() as usize).clamp(start + 1, total);
    (start, end)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seq2LipModel {
    pub version: String,
    pub hyper: Hyper,
    pub weights: Weights,
    /// Per-band feature normalization applied before the encoder.
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
    pub lipspace_ref: String,
    pub chunk_seconds: f64,
    pub overlap_seconds: f64,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
}

impl Seq2LipModel {
    pub fn new(hyper: Hyper, seed: u64, lipspace_ref: impl Into<String>) -> Self {
        let weights = net::init_weights(&hyper, seed);
        let n = hyper.n_mels;
        Self {
            version: MODEL_VERSION.into(),
            hyper,
            weights,
            feat_mean: vec![0.0; n],
            feat_std: vec![1.0; n],
            lipspace_ref: lipspace_ref.into(),
            chunk_seconds: 11.0,
            overlap_seconds: 1.0,
            train_config: None,
        }
    }

    /// Autoregressive seed: the PCA mean shape, i.e. all-zero coefficients.
    pub fn decoder_start_frame(&self) -> Vec<f64> {
        vec![0.0; self.hyper.out_dim]
    }

    pub fn normalize_features(&self, mel: &Array2<f64>) -> Array2<f64> {
        let mut x = mel.clone();
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.feat_mean[j]) / self.feat_std[j];
            }
        }
        x
    }

    pub fn features(&self, clip: &AudioClip) -> Result<MelFeatures> {
        if clip.sample_rate != self.hyper.sample_rate {
            return Err(Error::Config(format!(
                "clip rate {} Hz differs from model rate {} Hz",
                clip.sample_rate, self.hyper.sample_rate
            )));
        }
        mel_features(clip, &self.hyper.mel)
    }

    /// Greedy decoding of `frames` outputs from normalized Mel frames.
    pub fn predict_frames(&self, mel_norm: &Array2<f64>, frames: usize) -> Array2<f64> {
        let (enc, _) = net::encode(&self.weights, &self.hyper, mel_norm);
        let mut dec = net::IncrementalDecoder::new(&self.weights, &self.hyper, &enc, frames);
        let mut out = Array2::zeros((frames, self.hyper.out_dim));
        let mut prev = self.decoder_start_frame();
        for t in 0..frames {
            let y = dec.next(&prev);
            out.row_mut(t).iter_mut().zip(&y).for_each(|(o, v)| *o = *v);
            prev = y;
        }
        out
    }

    /// Prediction for one chunk `span` (seconds) of an utterance's features.
    pub fn predict_chunk(&self, mel: &MelFeatures, span: (f64, f64)) -> Array2<f64> {
        let (m0, m1) = mel_range(span, mel.fps(), mel.num_frames());
        let (f0, f1) = frame_range(span, self.hyper.fps_out);
        let x = self.normalize_features(&mel.frames.slice(s![m0..m1, ..]).to_owned());
        self.predict_frames(&x, f1 - f0)
    }

    /// Chunked inference over precomputed features of a clip lasting `duration` seconds.
    pub fn infer_features(&self, mel: &MelFeatures, duration: f64) -> Result<Trajectory> {
        self.infer_features_with(mel, duration, self.chunk_seconds, self.overlap_seconds)
    }

    pub fn infer_features_with(
        &self,
        mel: &MelFeatures,
        duration: f64,
        chunk: f64,
        overlap: f64,
    ) -> Result<Trajectory> {
        if duration < MIN_INFER_SECONDS {
            return Err(Error::TooShort(format!(
                "{duration:.3} s is below the {MIN_INFER_SECONDS} s minimum"
            )));
        }
        if !(overlap >= 0.0 && overlap < chunk) {
            return Err(Error::Config(format!(
                "overlap {overlap} must be in [0, chunk {chunk})"
            )));
        }
        let fps = self.hyper.fps_out;
        let total = (duration * fps).round() as usize;
        let mut sum = Array2::<f64>::zeros((total, self.hyper.out_dim));
        let mut count = vec![0u32; total];
        for span in chunk_spans(duration, chunk, overlap) {
            let (f0, _) = frame_range(span, fps);
            let pred = self.predict_chunk(mel, span);
            for (i, row) in pred.rows().into_iter().enumerate() {
                let t = f0 + i;
                if t < total {
                    let mut dst = sum.row_mut(t);
                    dst += &row;
                    count[t] += 1;
                }
            }
        }
        for (mut row, &c) in sum.rows_mut().into_iter().zip(&count) {
            if c > 1 {
                row /= c as f64;
            }
        }
        Trajectory::new(fps, sum)
    }

    pub fn infer(&self, clip: &AudioClip) -> Result<Trajectory> {
        if clip.duration() < MIN_INFER_SECONDS {
            return Err(Error::TooShort(format!(
                "{:.3} s is below the {MIN_INFER_SECONDS} s minimum",
                clip.duration()
            )));
        }
        let mel = self.features(clip)?;
        self.infer_features(&mel, clip.duration())
    }

    /// Replace encoder weights and feature normalization with a pretrained encoder's.
    pub fn load_encoder(&mut self, enc: &EncoderCheckpoint) -> Result<()> {
        if enc.hyper.n_mels != self.hyper.n_mels
            || enc.hyper.stack != self.hyper.stack
            || enc.hyper.d_model != self.hyper.d_model
        {
            return Err(Error::Config(
                "pretrained encoder hyperparameters differ from the model".into(),
            ));
        }
        let mine = self.weights.filter_prefix("enc.");
        mine.same_shape(&enc.weights)?;
        for (k, v) in &enc.weights.tensors {
            self.weights.insert(k.clone(), v.clone());
        }
        self.feat_mean = enc.feat_mean.clone();
        self.feat_std = enc.feat_std.clone();
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_reader(std::io::BufReader::new(f))?;
        if m.version != MODEL_VERSION {
            return Err(Error::Parse(format!("unsupported model version {:?}", m.version)));
        }
        if m.hyper.out_dim != crate::lipspace::NUM_COEFFS {
            return Err(Error::DimensionMismatch {
                expected: crate::lipspace::NUM_COEFFS,
                got: m.hyper.out_dim,
            });
        }
        Ok(m)
    }
}


#[cfg(test)]
mod model_tests;
