//! Audio ingestion and feature extraction.
//!
//! Two feature paths share one STFT: log-Mel filterbanks feed the model, and
//! 40-dim MFCCs whose hop is locked to the video frame rate feed the DTW
//! evaluation.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default working sample rate.
pub const SAMPLE_RATE: u32 = 22050;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(sample_rate: u32, samples: Vec<f32>) -> Self {
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Self { sample_rate, samples }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples `[round(start*sr), round(end*sr))`, clamped to the clip.
    pub fn slice_seconds(&self, start: f64, end: f64) -> AudioClip {
        let sr = self.sample_rate as f64;
        let a = ((start * sr).round() as usize).min(self.samples.len());
        let b = ((end * sr).round() as usize).clamp(a, self.samples.len());
        AudioClip {
            sample_rate: self.sample_rate,
            samples: self.samples[a..b].to_vec(),
        }
    }

    /// The clip as it reads back after a PCM16 write.
    pub fn pcm16_round_trip(&self) -> AudioClip {
        AudioClip {
            sample_rate: self.sample_rate,
            samples: self.samples.iter().map(|&s| quantize(s) as f32 / 32768.0).collect(),
        }
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

/// Read a PCM16 WAV file, downmix to mono and resample to `target_rate`.
pub fn ingest_audio(path: &Path, target_rate: u32) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM, found {}-bit {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::Format(format!("{} channels not supported", spec.channels)));
    }
    let raw = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(e.to_string()))?;
    let samples: Vec<f32> = if spec.channels == 2 {
        raw.chunks_exact(2)
            .map(|c| (c[0] as f32 / 32768.0 + c[1] as f32 / 32768.0) * 0.5)
            .collect()
    } else {
        raw.iter().map(|&s| s as f32 / 32768.0).collect()
    };
    let clip = AudioClip::new(spec.sample_rate, samples);
    Ok(resample(&clip, target_rate))
}

/// Write a clip as mono PCM16.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })?;
    for &s in &clip.samples {
        w.write_sample(quantize(s))?;
    }
    w.finalize()?;
    Ok(())
}

/// PCM16 code of a sample; the inverse of the reader's `code / 32768`.
pub(crate) fn quantize(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    if clip.sample_rate == target_rate || clip.samples.is_empty() {
        return AudioClip {
            sample_rate: target_rate,
            samples: clip.samples.clone(),
        };
    }
    const ZERO_CROSSINGS: f64 = 24.0;
    let ratio = target_rate as f64 / clip.sample_rate as f64;
    let cutoff = ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let n_out = (clip.samples.len() as f64 * ratio).round() as usize;
    let x = &clip.samples;
    let samples = (0..n_out)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let tau = t - k as f64;
                let arg = cutoff * tau;
                let sinc = if arg == 0.0 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                let w = 0.5 * (1.0 + (PI * tau / half_width).cos());
                acc += xk as f64 * cutoff * sinc * w;
            }
            acc as f32
        })
        .collect();
    AudioClip::new(target_rate, samples)
}

const TRIM_BLOCK: usize = 512;
const TARGET_PEAK: f32 = 0.99;

/// Peak-normalize to 0.99 and drop leading/trailing blocks whose peak is
/// more than `silence_db` below the clip peak.
pub fn trim_normalize(clip: &AudioClip, silence_db: f64) -> Result<AudioClip> {
    if clip.samples.is_empty() {
        return Err(Error::Empty("audio clip".into()));
    }
    let peak = clip.peak();
    if peak <= 0.0 {
        return Err(Error::EmptyAfterTrim);
    }
    let gain = TARGET_PEAK / peak;
    let scaled: Vec<f32> = clip.samples.iter().map(|s| s * gain).collect();
    let threshold = TARGET_PEAK as f64 * 10f64.powf(silence_db / 20.0);
    let loud: Vec<bool> = scaled
        .chunks(TRIM_BLOCK)
        .map(|b| b.iter().any(|s| s.abs() as f64 >= threshold))
        .collect();
    let first = loud.iter().position(|&l| l).ok_or(Error::EmptyAfterTrim)?;
    let last = loud.iter().rposition(|&l| l).unwrap();
    let start = first * TRIM_BLOCK;
    let end = ((last + 1) * TRIM_BLOCK).min(scaled.len());
    Ok(AudioClip {
        sample_rate: clip.sample_rate,
        samples: scaled[start..end].to_vec(),
    })
}

/// Log-Mel feature configuration. Keys match the pipeline config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub hop: usize,
    pub window: usize,
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            hop: 256,
            window: 1024,
            floor: 1e-10,
        }
    }
}

impl MelConfig {
    fn validate(&self) -> Result<()> {
        if self.hop == 0 {
            return Err(Error::Config("hop must be positive".into()));
        }
        if self.window < self.hop {
            return Err(Error::Config(format!(
                "window {} is shorter than hop {}",
                self.window, self.hop
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        if self.floor <= 0.0 {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFeatures {
    /// `T x n_mels` log-Mel energies.
    pub frames: Array2<f64>,
    pub hop_samples: usize,
    pub window_samples: usize,
    pub sample_rate: u32,
}

impl MelFeatures {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Frame rate of the feature sequence.
    pub fn fps(&self) -> f64 {
        self.sample_rate as f64 / self.hop_samples as f64
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the HTK triangular filters.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// `n_mels x (n_fft/2 + 1)` HTK-style triangular filterbank with unit peaks.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    Array2::from_shape_fn((n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let up = (f - lo) / (c - lo);
        let down = (hi - f) / (hi - c);
        up.min(down).max(0.0)
    })
}

struct Stft {
    window: Vec<f64>,
    n_fft: usize,
    hop: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new(window: usize, hop: usize, n_fft: usize) -> Self {
        let hann = (0..window)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / window as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self {
            window: hann,
            n_fft,
            hop,
            fft,
        }
    }

    /// Centre-padded magnitude spectrogram with `ceil(N / hop)` frames.
    fn magnitudes(&self, samples: &[f32]) -> Array2<f64> {
        let n = samples.len();
        let frames = n.div_ceil(self.hop);
        let win = self.window.len();
        let half = (win / 2) as isize;
        let n_bins = self.n_fft / 2 + 1;
        let mut out = Array2::zeros((frames, n_bins));
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            let start = (t * self.hop) as isize - half;
            for (i, b) in buf.iter_mut().enumerate() {
                let v = if i < win {
                    let idx = start + i as isize;
                    if idx >= 0 && (idx as usize) < n {
                        samples[idx as usize] as f64 * self.window[i]
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                *b = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (k, o) in out.row_mut(t).iter_mut().enumerate() {
                *o = buf[k].norm();
            }
        }
        out
    }
}

fn log_mel(clip: &AudioClip, n_mels: usize, window: usize, hop: usize, n_fft: usize, floor: f64) -> Array2<f64> {
    let stft = Stft::new(window, hop, n_fft);
    let mags = stft.magnitudes(&clip.samples);
    let fb = mel_filterbank(n_mels, n_fft, clip.sample_rate);
    mags.dot(&fb.t()).mapv(|e| e.max(floor).ln())
}

pub fn mel_features(clip: &AudioClip, cfg: &MelConfig) -> Result<MelFeatures> {
    cfg.validate()?;
    if clip.samples.is_empty() {
        return Err(Error::Empty("audio clip".into()));
    }
    let frames = log_mel(clip, cfg.n_mels, cfg.window, cfg.hop, cfg.window, cfg.floor);
    Ok(MelFeatures {
        frames,
        hop_samples: cfg.hop,
        window_samples: cfg.window,
        sample_rate: clip.sample_rate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfccMatrix {
    /// `T x n_mfcc`.
    pub frames: Array2<f64>,
    pub fps_locked: f64,
}

impl MfccMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

const MFCC_MELS: usize = 80;

/// Orthonormal DCT-II of each row, keeping the first `n_out` coefficients.
pub fn dct2(rows: &Array2<f64>, n_out: usize) -> Array2<f64> {
    let m = rows.ncols();
    let basis = Array2::from_shape_fn((m, n_out), |(i, k)| {
        let norm = if k == 0 {
            (1.0 / m as f64).sqrt()
        } else {
            (2.0 / m as f64).sqrt()
        };
        norm * (PI * k as f64 * (2 * i + 1) as f64 / (2 * m) as f64).cos()
    });
    rows.dot(&basis)
}

/// MFCCs with `hop = round(sr / fps)`, one vector per video frame.
///
/// The frame count is forced to `round(N * fps / sr)` by dropping or
/// replicating the final frame when `ceil(N / hop)` disagrees.
pub fn mfcc_framelocked(clip: &AudioClip, fps: f64, n_mfcc: usize) -> Result<MfccMatrix> {
    if !(fps > 0.0) {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    if n_mfcc == 0 || n_mfcc > MFCC_MELS {
        return Err(Error::Config(format!("n_mfcc must be in [1, {MFCC_MELS}]")));
    }
    let sr = clip.sample_rate as f64;
    let hop = (sr / fps).round() as usize;
    if hop == 0 || clip.samples.len() < hop {
        return Err(Error::TooShort(format!(
            "{} samples is shorter than one hop of {hop}",
            clip.samples.len()
        )));
    }
    let window = 2 * hop;
    let n_fft = window.next_power_of_two();
    let logmel = log_mel(clip, MFCC_MELS, window, hop, n_fft, 1e-10);
    let mut mfcc = dct2(&logmel, n_mfcc);

    let target = (clip.samples.len() as f64 * fps / sr).round().max(1.0) as usize;
    let have = mfcc.nrows();
    if have != target {
        log::debug!("frame-locked MFCC: adjusting {have} frames to {target}");
        let last = mfcc.row(have - 1).to_owned();
        mfcc = Array2::from_shape_fn((target, n_mfcc), |(t, c)| if t < have { mfcc[[t, c]] } else { last[c] });
    }
    Ok(MfccMatrix {
        frames: mfcc,
        fps_locked: fps,
    })
}

/// Write a feature matrix as CSV, one frame per row.
pub fn write_feature_csv(path: &Path, frames: &Array2<f64>) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for row in frames.rows() {
        let line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_write_read_matches_pcm16_round_trip() {
        let clip = AudioClip::new(22050, vec![0.0, 0.5, -0.25, 0.999_99, -1.0, 1e-5, 0.123_456]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &clip).unwrap();
        let back = ingest_audio(&p, 22050).unwrap();
        assert_eq!(back, clip.pcm16_round_trip());
        assert_eq!(back.pcm16_round_trip(), back);
    }

    fn tone(freq: f64, sr: u32, seconds: f64, amp: f64) -> AudioClip {
        let n = (sr as f64 * seconds).round() as usize;
        AudioClip::new(
            sr,
            (0..n)
                .map(|i| (amp * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32)
                .collect(),
        )
    }

    fn peak_frequency(clip: &AudioClip) -> f64 {
        let n = clip.samples.len();
        let mut buf: Vec<Complex<f64>> = clip.samples.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let k = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap();
        k as f64 * clip.sample_rate as f64 / n as f64
    }

    #[test]
    fn wav_identity_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let raw: Vec<i16> = (0..1000).map(|i| ((i * 97) % 65536 - 32768) as i16).collect();
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        raw.iter().for_each(|&s| w.write_sample(s).unwrap());
        w.finalize().unwrap();
        let clip = ingest_audio(&p, 22050).unwrap();
        assert_eq!(clip.samples.len(), raw.len());
        for (a, &b) in clip.samples.iter().zip(&raw) {
            assert_eq!(*a, b as f32 / 32768.0);
        }
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(1000i16).unwrap();
            w.write_sample(3000i16).unwrap();
        }
        w.finalize().unwrap();
        let clip = ingest_audio(&p, 16000).unwrap();
        assert_eq!(clip.samples.len(), 10);
        assert!((clip.samples[0] - 2000.0 / 32768.0).abs() < 1e-7);
    }

    #[test]
    fn eight_bit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        (0..100).for_each(|i| w.write_sample((i % 100) as i8).unwrap());
        w.finalize().unwrap();
        assert!(matches!(ingest_audio(&p, 22050), Err(Error::Format(_))));
    }

    #[test]
    fn downsampled_tone_keeps_frequency() {
        let clip = tone(1000.0, 44100, 1.0, 0.5);
        let out = resample(&clip, 22050);
        assert_eq!(out.samples.len(), 22050);
        assert!((peak_frequency(&out) - 1000.0).abs() <= 1.0);
        let up = resample(&tone(440.0, 16000, 0.5, 0.5), 22050);
        assert!((up.samples.len() as f64 - 0.5 * 22050.0).abs() <= 1.0);
    }

    #[test]
    fn trim_and_normalize() {
        let clip = tone(440.0, 22050, 0.5, 0.5);
        let out = trim_normalize(&clip, -40.0).unwrap();
        assert!((out.peak() - 0.99).abs() < 1e-3);

        let mut samples = vec![0.0f32; 5000];
        samples.extend(tone(300.0, 22050, 0.3, 0.8).samples);
        let tone_len = samples.len() - 5000;
        samples.extend(vec![0.0f32; 7000]);
        let out = trim_normalize(&AudioClip::new(22050, samples), -40.0).unwrap();
        assert!(out.samples.len() >= tone_len);
        assert!(out.samples.len() <= tone_len + 2 * TRIM_BLOCK);

        let silent = AudioClip::new(22050, vec![0.0; 1000]);
        assert!(matches!(trim_normalize(&silent, -40.0), Err(Error::EmptyAfterTrim)));
    }

    #[test]
    fn silence_hits_floor_and_frame_count() {
        let cfg = MelConfig::default();
        let mel = mel_features(&AudioClip::new(22050, vec![0.0; 22050]), &cfg).unwrap();
        assert_eq!(mel.num_frames(), 87);
        assert_eq!(mel.frames.ncols(), 80);
        let floor = 1e-10f64.ln();
        assert!(mel.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn bad_config() {
        let clip = AudioClip::new(22050, vec![0.0; 100]);
        let bad = MelConfig {
            hop: 0,
            ..MelConfig::default()
        };
        assert!(matches!(mel_features(&clip, &bad), Err(Error::Config(_))));
        let bad = MelConfig {
            hop: 512,
            window: 256,
            ..MelConfig::default()
        };
        assert!(matches!(mel_features(&clip, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn tone_at_band_centre_peaks_in_that_band() {
        let cfg = MelConfig::default();
        let centres = mel_center_frequencies(cfg.n_mels, 22050);
        let bin_hz = 22050.0 / cfg.window as f64;
        let mut checked = 0;
        for (b, &f) in centres.iter().enumerate() {
            // Bands narrower than ~3 FFT bins cannot be resolved by a 1024-point STFT.
            let width = if b + 1 < centres.len() {
                centres[b + 1] - f
            } else {
                continue;
            };
            if width < 3.0 * bin_hz {
                continue;
            }
            let mel = mel_features(&tone(f, 22050, 0.3, 0.5), &cfg).unwrap();
            let t = mel.num_frames() / 2;
            let row = mel.frames.row(t);
            let arg = (0..cfg.n_mels).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
            assert_eq!(arg, b, "tone at {f:.1} Hz");
            checked += 1;
        }
        assert!(checked > 40);
    }

    #[test]
    fn framelocked_mfcc_counts() {
        let clip = AudioClip::new(22050, vec![0.0; 220500]);
        let m = mfcc_framelocked(&clip, 30.0, 40).unwrap();
        assert_eq!(m.num_frames(), 300);
        assert_eq!(m.frames.ncols(), 40);
        let first = m.frames.row(0).to_owned();
        assert!(m.frames.rows().into_iter().all(|r| r == first));

        assert!(matches!(
            mfcc_framelocked(&AudioClip::new(22050, vec![0.0; 700]), 30.0, 40),
            Err(Error::TooShort(_))
        ));
        for n in [22050usize, 22051, 22785, 23000, 44100 + 367] {
            let clip = tone(200.0, 22050, n as f64 / 22050.0, 0.3);
            let m = mfcc_framelocked(&clip, 30.0, 40).unwrap();
            assert_eq!(m.num_frames(), (n as f64 * 30.0 / 22050.0).round() as usize);
        }
    }

    #[test]
    fn amplitude_does_not_change_shapes() {
        let a = tone(330.0, 22050, 0.7, 0.9);
        let b = AudioClip::new(22050, a.samples.iter().map(|s| s * 0.1).collect());
        let cfg = MelConfig::default();
        assert_eq!(
            mel_features(&a, &cfg).unwrap().frames.dim(),
            mel_features(&b, &cfg).unwrap().frames.dim()
        );
        assert_eq!(
            mfcc_framelocked(&a, 30.0, 40).unwrap().frames.dim(),
            mfcc_framelocked(&b, 30.0, 40).unwrap().frames.dim()
        );
    }
}
