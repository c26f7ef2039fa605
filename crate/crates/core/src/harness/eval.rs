//! Trajectory error metrics and end-to-end evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Utterance;
use crate::align::{dtw_with, warp_trajectory, DtwOptions, PhonemeEvent, PhonemeTrack};
use crate::audiofeat::{mfcc_framelocked, AudioClip};
use crate::error::{Error, Result};
use crate::lipspace::LipSpaceModel;
use crate::seq2lip::Seq2LipModel;
use crate::trajectory::Trajectory;
use crate::ttslite::{synthesize_voice, PhonemeInventory, VoiceParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MseSpace {
    #[serde(rename = "8d")]
    D8,
    #[serde(rename = "40d")]
    D40,
}

/// Mean squared error between equally long trajectories, either over the
/// coefficients or over the reconstructed lip vectors (each side with its own
/// lip space, so adapted means can differ).
pub fn evaluate_mse(
    pred: &Trajectory,
    truth: &Trajectory,
    pred_space: &LipSpaceModel,
    truth_space: &LipSpaceModel,
    space: MseSpace,
) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.dim() != truth.dim() {
        return Err(Error::DimensionMismatch {
            expected: truth.dim(),
            got: pred.dim(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("trajectory".into()));
    }
    let mut sse = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.frames.rows().into_iter().zip(truth.frames.rows()) {
        match space {
            MseSpace::D8 => {
                sse += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                n += p.len();
            }
            MseSpace::D40 => {
                let a = pred_space.reconstruct(p.as_slice().expect("contiguous row"));
                let b = truth_space.reconstruct(t.as_slice().expect("contiguous row"));
                sse += a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                n += a.0.len();
            }
        }
    }
    Ok(sse / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    None,
    Dtw,
    PhoneDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub frames: usize,
    pub mse_8d: f64,
    pub mse_40d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean of per-utterance MSEs (each segment weighted equally).
    pub mse_8d: f64,
    pub mse_40d: f64,
    /// Frame-pooled MSEs.
    pub pooled_mse_8d: f64,
    pub pooled_mse_40d: f64,
    pub alignment_mode: AlignmentMode,
    pub per_utterance: Vec<UtteranceScore>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn from_scores(scores: Vec<UtteranceScore>, mode: AlignmentMode, config: serde_json::Value) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("no utterances evaluated".into()));
        }
        let n = scores.len() as f64;
        let frames: usize = scores.iter().map(|s| s.frames).sum();
        let pooled =
            |f: fn(&UtteranceScore) -> f64| scores.iter().map(|s| f(s) * s.frames as f64).sum::<f64>() / frames as f64;
        Ok(Self {
            mse_8d: scores.iter().map(|s| s.mse_8d).sum::<f64>() / n,
            mse_40d: scores.iter().map(|s| s.mse_40d).sum::<f64>() / n,
            pooled_mse_8d: pooled(|s| s.mse_8d),
            pooled_mse_40d: pooled(|s| s.mse_40d),
            alignment_mode: mode,
            per_utterance: scores,
            config,
        })
    }

    /// Headline 8-dim MSE under the chosen weighting.
    pub fn headline_8d(&self, pooled: bool) -> f64 {
        if pooled {
            self.pooled_mse_8d
        } else {
            self.mse_8d
        }
    }
}

pub fn score(
    id: &str,
    pred: &Trajectory,
    truth: &Trajectory,
    pred_space: &LipSpaceModel,
    truth_space: &LipSpaceModel,
) -> Result<UtteranceScore> {
    Ok(UtteranceScore {
        id: id.to_string(),
        frames: truth.len(),
        mse_8d: evaluate_mse(pred, truth, pred_space, truth_space, MseSpace::D8)?,
        mse_40d: evaluate_mse(pred, truth, pred_space, truth_space, MseSpace::D40)?,
    })
}

/// Model prediction for an utterance's recorded audio, sized to its track.
pub fn predict_natural(model: &Seq2LipModel, u: &Utterance) -> Result<Trajectory> {
    let mel = model.features(&u.audio)?;
    model.infer_features(&mel, u.duration())
}

/// Score the model on recorded corpus audio (no synthesis, no alignment).
pub fn evaluate_natural(
    model: &Seq2LipModel,
    utts: &[&Utterance],
    pred_space: &LipSpaceModel,
    truth_space: &LipSpaceModel,
) -> Result<EvalReport> {
    let scores = utts
        .iter()
        .map(|u| score(&u.id, &predict_natural(model, u)?, &u.traj, pred_space, truth_space))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(scores, AlignmentMode::None, serde_json::Value::Null)
}

/// Which audio DTW aligns the synthesized speech against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtwReference {
    /// The utterance's recorded audio.
    Natural,
    /// A synthesis with ground-truth durations.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct E2eConfig {
    pub seed: u64,
    /// Range of the per-phoneme duration factor in DTW mode.
    pub perturb_low: f64,
    pub perturb_high: f64,
    /// Flat F0 for voiced phonemes in the synthesized speech; 0 keeps the track's F0.
    pub tts_f0: f64,
    /// Synthesis voice; by default it differs from the corpus speaker, as a
    /// TTS voice differs from the recorded one.
    pub voice: VoiceParams,
    pub dtw_reference: DtwReference,
    pub n_mfcc: usize,
    pub band: Option<usize>,
}

impl Default for E2eConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            perturb_low: 0.8,
            perturb_high: 1.25,
            tts_f0: 105.0,
            voice: VoiceParams {
                formant_scale: 1.04,
                ..VoiceParams::default()
            },
            dtw_reference: DtwReference::Natural,
            n_mfcc: 40,
            band: None,
        }
    }
}

fn tts_track(track: &PhonemeTrack, f0: f64) -> PhonemeTrack {
    PhonemeTrack {
        events: track
            .events
            .iter()
            .map(|e| PhonemeEvent {
                phoneme: e.phoneme.clone(),
                duration: e.duration,
                f0: if f0 > 0.0 && e.f0 > 0.0 { f0 } else { e.f0 },
            })
            .collect(),
    }
}

/// Durations scaled by seeded factors drawn uniformly from `[low, high]`,
/// rounded to the millisecond and never below 1 ms.
pub fn perturb_durations(track: &PhonemeTrack, low: f64, high: f64, seed: u64) -> Result<PhonemeTrack> {
    if !(low > 0.0 && high >= low) {
        return Err(Error::Config(format!("bad perturbation range [{low}, {high}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = track
        .events
        .iter()
        .map(|e| {
            let f = if high > low { rng.gen_range(low..=high) } else { low };
            PhonemeEvent {
                phoneme: e.phoneme.clone(),
                duration: ((e.duration * f * 1000.0).round() / 1000.0).max(0.001),
                f0: e.f0,
            }
        })
        .collect();
    PhonemeTrack::new(events)
}

fn utterance_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ (index as u64 + 1)
}

/// Text-to-lip evaluation: synthesize speech from each utterance's phoneme
/// track, predict lips, and compare with the ground truth.
///
/// `PhoneDelta` synthesizes with the ground-truth durations so frames line up
/// directly. `Dtw` synthesizes with perturbed durations and warps the
/// prediction onto the reference timeline via DTW over frame-locked MFCCs.
pub fn end_to_end_eval(
    model: &Seq2LipModel,
    utts: &[&Utterance],
    inventory: &PhonemeInventory,
    space: &LipSpaceModel,
    mode: AlignmentMode,
    cfg: &E2eConfig,
) -> Result<EvalReport> {
    let fps = model.hyper.fps_out;
    let sr = model.hyper.sample_rate;
    let mut scores = Vec::with_capacity(utts.len());
    for (k, u) in utts.iter().enumerate() {
        let seed = utterance_seed(cfg.seed, k);
        let gt = tts_track(&u.track, cfg.tts_f0);
        let pred = match mode {
            AlignmentMode::None => predict_natural(model, u)?,
            AlignmentMode::PhoneDelta => {
                let audio = synthesize_voice(&gt, inventory, sr, seed, &cfg.voice)?;
                let mel = model.features(&audio)?;
                model.infer_features(&mel, gt.total_duration())?
            }
            AlignmentMode::Dtw => {
                let perturbed = perturb_durations(&gt, cfg.perturb_low, cfg.perturb_high, seed ^ 0xd7)?;
                let audio = synthesize_voice(&perturbed, inventory, sr, seed, &cfg.voice)?;
                let mel = model.features(&audio)?;
                let pred = model.infer_features(&mel, perturbed.total_duration())?;
                let reference: AudioClip = match cfg.dtw_reference {
                    DtwReference::Natural => u.audio.clone(),
                    DtwReference::Synthetic => synthesize_voice(&gt, inventory, sr, seed, &cfg.voice)?,
                };
                let a = fit_frames(mfcc_framelocked(&reference, fps, cfg.n_mfcc)?.frames, u.traj.len());
                let b = fit_frames(mfcc_framelocked(&audio, fps, cfg.n_mfcc)?.frames, pred.len());
                let path = dtw_with(a.view(), b.view(), DtwOptions { band: cfg.band })?;
                warp_trajectory(&pred, &path)?
            }
        };
        scores.push(score(&u.id, &pred, &u.traj, space, space)?);
    }
    EvalReport::from_scores(scores, mode, serde_json::to_value(cfg)?)
}

/// Truncate or replicate the last row so a feature matrix has `len` rows.
fn fit_frames(m: ndarray::Array2<f64>, len: usize) -> ndarray::Array2<f64> {
    if m.nrows() == len {
        return m;
    }
    let last = m.nrows() - 1;
    ndarray::Array2::from_shape_fn((len, m.ncols()), |(t, c)| m[[t.min(last), c]])
}
