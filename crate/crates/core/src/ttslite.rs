//! Minimal parametric phoneme synthesizer with exact control over
//! per-phoneme duration and F0, plus the viseme trajectory generator used as
//! ground truth for synthetic corpora.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{durations_to_frames, PhonemeTrack};
use crate::audiofeat::AudioClip;
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

pub const INVENTORY_VERSION: u32 = 1;
pub const VISEME_TABLE_VERSION: u32 = 1;
pub const REST_SYMBOL: &str = "sil";
/// Cross-fade length at phoneme boundaries, seconds.
pub const CROSSFADE_S: f64 = 0.010;
/// Width of the coarticulation smoothing window, frames.
pub const SMOOTHING_FRAMES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhonemeClass {
    Vowel,
    VoicedConsonant,
    UnvoicedConsonant,
    Silence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub freq: f64,
    pub amp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeSpec {
    pub symbol: String,
    pub class: PhonemeClass,
    #[serde(default)]
    pub formants: Vec<Formant>,
    #[serde(default)]
    pub noise_band: Option<(f64, f64)>,
}

impl PhonemeSpec {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("phoneme {:?}: {msg}", self.symbol)));
        if self.formants.len() > 3 {
            return bad("at most 3 formants");
        }
        match self.class {
            PhonemeClass::Vowel if self.formants.len() < 2 => bad("vowels need at least 2 formants"),
            PhonemeClass::Silence if !self.formants.is_empty() || self.noise_band.is_some() => {
                bad("silence has neither formants nor noise")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    pub version: u32,
    pub phonemes: BTreeMap<String, PhonemeSpec>,
}

fn spec(symbol: &str, class: PhonemeClass, formants: &[(f64, f64)], noise: Option<(f64, f64)>) -> PhonemeSpec {
    PhonemeSpec {
        symbol: symbol.into(),
        class,
        formants: formants.iter().map(|&(freq, amp)| Formant { freq, amp }).collect(),
        noise_band: noise,
    }
}

impl Default for PhonemeInventory {
    /// Five vowels, twelve consonants and three pause symbols.
    fn default() -> Self {
        use PhonemeClass::*;
        let list = [
            spec("a", Vowel, &[(730.0, 1.0), (1090.0, 0.5), (2440.0, 0.25)], None),
            spec("e", Vowel, &[(530.0, 1.0), (1840.0, 0.45), (2480.0, 0.25)], None),
            spec("i", Vowel, &[(270.0, 1.0), (2290.0, 0.35), (3010.0, 0.2)], None),
            spec("o", Vowel, &[(570.0, 1.0), (840.0, 0.6), (2410.0, 0.2)], None),
            spec("u", Vowel, &[(300.0, 1.0), (870.0, 0.4), (2240.0, 0.15)], None),
            spec("b", VoicedConsonant, &[(250.0, 0.6), (1000.0, 0.15)], None),
            spec("d", VoicedConsonant, &[(300.0, 0.6), (1700.0, 0.2)], None),
            spec("m", VoicedConsonant, &[(250.0, 0.7), (1200.0, 0.1)], None),
            spec("n", VoicedConsonant, &[(280.0, 0.7), (1500.0, 0.12)], None),
            spec(
                "l",
                VoicedConsonant,
                &[(360.0, 0.7), (1300.0, 0.3), (2700.0, 0.15)],
                None,
            ),
            spec("v", VoicedConsonant, &[(250.0, 0.4)], Some((2000.0, 6000.0))),
            spec("z", VoicedConsonant, &[(280.0, 0.35)], Some((4000.0, 8000.0))),
            spec("p", UnvoicedConsonant, &[], Some((500.0, 2000.0))),
            spec("t", UnvoicedConsonant, &[], Some((3000.0, 6000.0))),
            spec("k", UnvoicedConsonant, &[], Some((1500.0, 3000.0))),
            spec("f", UnvoicedConsonant, &[], Some((2500.0, 7500.0))),
            spec("s", UnvoicedConsonant, &[], Some((4500.0, 9000.0))),
            spec("sil", Silence, &[], None),
            spec("sp", Silence, &[], None),
            spec("pau", Silence, &[], None),
        ];
        Self {
            version: INVENTORY_VERSION,
            phonemes: list.into_iter().map(|s| (s.symbol.clone(), s)).collect(),
        }
    }
}

impl PhonemeInventory {
    pub fn get(&self, symbol: &str) -> Result<&PhonemeSpec> {
        self.phonemes
            .get(symbol)
            .ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
    }

    /// Symbols in a stable order; the index doubles as a class label.
    pub fn symbols(&self) -> Vec<String> {
        self.phonemes.keys().cloned().collect()
    }

    pub fn symbols_of(&self, class: PhonemeClass) -> Vec<String> {
        self.phonemes
            .values()
            .filter(|p| p.class == class)
            .map(|p| p.symbol.clone())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != INVENTORY_VERSION {
            return Err(Error::Config(format!("unsupported inventory version {}", self.version)));
        }
        if !self.phonemes.contains_key(REST_SYMBOL) {
            return Err(Error::Config("inventory must contain \"sil\"".into()));
        }
        self.phonemes.values().try_for_each(PhonemeSpec::validate)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let inv: Self = serde_json::from_str(&text)?;
        inv.validate()?;
        Ok(inv)
    }
}

/// Voice-level knobs that do not change timing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoiceParams {
    /// Multiplies every formant frequency.
    pub formant_scale: f64,
    pub gain: f64,
}

impl Default for VoiceParams {
    fn default() -> Self {
        Self {
            formant_scale: 1.0,
            gain: 0.3,
        }
    }
}

/// RBJ band-pass biquad with 0 dB peak gain.
struct BandPass {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl BandPass {
    fn new(lo: f64, hi: f64, sr: f64) -> Self {
        let nyq = 0.49 * sr;
        let (lo, hi) = (lo.min(nyq * 0.9), hi.min(nyq));
        let centre = (lo * hi).sqrt();
        let q = centre / (hi - lo).max(1.0);
        let w0 = TAU * centre / sr;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn event_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Render a phoneme track to audio.
///
/// Event `k` occupies samples `[round(sr*T_k), round(sr*T_{k+1}))` where
/// `T_k` is the cumulative duration; adjacent events overlap by a 10 ms
/// linear cross-fade centred on each internal boundary.
pub fn synthesize(
    track: &PhonemeTrack,
    inventory: &PhonemeInventory,
    sample_rate: u32,
    seed: u64,
) -> Result<AudioClip> {
    synthesize_voice(track, inventory, sample_rate, seed, &VoiceParams::default())
}

pub fn synthesize_voice(
    track: &PhonemeTrack,
    inventory: &PhonemeInventory,
    sample_rate: u32,
    seed: u64,
    voice: &VoiceParams,
) -> Result<AudioClip> {
    track.validate()?;
    let specs = track
        .events
        .iter()
        .map(|e| inventory.get(&e.phoneme))
        .collect::<Result<Vec<_>>>()?;
    let sr = sample_rate as f64;
    let mut bounds = Vec::with_capacity(track.events.len() + 1);
    bounds.push(0usize);
    let mut cum = 0.0;
    for e in &track.events {
        cum += e.duration;
        bounds.push((sr * cum).round() as usize);
    }
    let total = *bounds.last().unwrap();
    let half = ((CROSSFADE_S / 2.0) * sr).round() as isize;
    let ramp =
        |n: usize, b: usize| -> f64 { ((n as isize - b as isize + half) as f64 / (2 * half) as f64).clamp(0.0, 1.0) };

    let mut out = vec![0.0f64; total];
    let last = track.events.len() - 1;
    for (k, (ev, spec)) in track.events.iter().zip(&specs).enumerate() {
        if spec.class == PhonemeClass::Silence {
            continue;
        }
        let lo = if k == 0 {
            0
        } else {
            (bounds[k] as isize - half).max(0) as usize
        };
        let hi = if k == last {
            total
        } else {
            (bounds[k + 1] + half as usize).min(total)
        };
        let weight = |n: usize| {
            let up = if k == 0 { 1.0 } else { ramp(n, bounds[k]) };
            let down = if k == last { 0.0 } else { ramp(n, bounds[k + 1]) };
            up - down
        };
        let mut rng = ChaCha8Rng::seed_from_u64(event_seed(seed, k));
        let mut filter = spec.noise_band.map(|(a, b)| BandPass::new(a, b, sr));
        let voiced = !spec.formants.is_empty();
        let (formant_gain, noise_gain) = match spec.class {
            PhonemeClass::Vowel => (1.0, 0.0),
            PhonemeClass::VoicedConsonant => (0.6, 1.5),
            _ => (0.0, 2.0),
        };
        let amp_sum: f64 = spec.formants.iter().map(|f| f.amp).sum::<f64>().max(1e-9);
        for (n, slot) in out.iter_mut().enumerate().take(hi).skip(lo) {
            let w = weight(n);
            if w <= 0.0 {
                continue;
            }
            let t = n as f64 / sr;
            let mut s = 0.0;
            if voiced {
                // Decaying pulse at every glottal period; steady when F0 is 0.
                let pulse = if ev.f0 > 0.0 {
                    let phase = (ev.f0 * t).fract();
                    (-8.0 * phase).exp()
                } else {
                    0.5
                };
                let tone: f64 = spec
                    .formants
                    .iter()
                    .map(|f| f.amp * (TAU * f.freq * voice.formant_scale * t).sin())
                    .sum();
                s += formant_gain * pulse * tone / amp_sum;
            }
            if let Some(bp) = filter.as_mut() {
                let white: f64 = rng.gen_range(-1.0..1.0);
                s += noise_gain * bp.step(white);
            }
            *slot += w * voice.gain * s;
        }
    }
    Ok(AudioClip::new(
        sample_rate,
        out.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(),
    ))
}

/// Per-symbol mouth-shape targets in PCA coefficient space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisemeTable {
    pub version: u32,
    /// Symbol of the closed-mouth rest pose.
    pub rest: String,
    pub targets: BTreeMap<String, Vec<f64>>,
}

impl VisemeTable {
    pub fn target(&self, symbol: &str) -> Result<&[f64]> {
        self.targets
            .get(symbol)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
    }

    pub fn dim(&self) -> usize {
        self.targets.values().next().map_or(0, Vec::len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Self = serde_json::from_str(&text)?;
        if table.version != VISEME_TABLE_VERSION {
            return Err(Error::Config(format!(
                "unsupported viseme table version {}",
                table.version
            )));
        }
        table.target(&table.rest)?;
        Ok(table)
    }
}

/// Ground-truth lip trajectory: each frame takes its phoneme's target, then
/// a centred moving average (edges replicated) models coarticulation.
pub fn gen_viseme_trajectory(track: &PhonemeTrack, fps: f64, table: &VisemeTable) -> Result<Trajectory> {
    let spans = durations_to_frames(track, fps)?;
    let total = spans.last().map_or(0, |s| s.end);
    let dim = table.dim();
    let mut raw = Array2::<f64>::zeros((total, dim));
    for s in &spans {
        let target = table.target(&s.phoneme)?;
        for t in s.start..s.end {
            raw.row_mut(t).iter_mut().zip(target).for_each(|(o, v)| *o = *v);
        }
    }
    let half = (SMOOTHING_FRAMES / 2) as isize;
    let mut smooth = Array2::<f64>::zeros((total, dim));
    for t in 0..total as isize {
        let mut row = smooth.row_mut(t as usize);
        for o in -half..=half {
            let src = (t + o).clamp(0, total as isize - 1) as usize;
            row += &raw.row(src);
        }
        row /= SMOOTHING_FRAMES as f64;
    }
    Trajectory::new(fps, smooth)
}

/// Hann window used by tests and plotting helpers.
#[allow(dead_code)]
pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}
