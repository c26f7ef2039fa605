//! Seeded synthetic audio-visual corpora.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::speaker::{landmark_track, phoneme_weights, SyntheticSpeaker, NUM_MODES};
use crate::align::{durations_to_frames, PhonemeEvent, PhonemeTrack};
use crate::audiofeat::{ingest_audio, write_wav, AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::geometry::{normalize_frame, repair_track, LipVector40, TrackRecord};
use crate::lipspace::{self, FitReport, LipSpaceModel, NUM_COEFFS};
use crate::trajectory::Trajectory;
use crate::ttslite::{
    gen_viseme_trajectory, synthesize_voice, PhonemeClass, PhonemeInventory, VisemeTable, VoiceParams, REST_SYMBOL,
    SMOOTHING_FRAMES, VISEME_TABLE_VERSION,
};

pub const CORPUS_VERSION: u32 = 1;
pub const MIN_UTTERANCE_S: f64 = 1.0;
pub const MAX_UTTERANCE_S: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub minutes: f64,
    pub fps: f64,
    pub sample_rate: u32,
    /// Nominal video length; shortened when needed to reach `min_videos`.
    pub video_seconds: f64,
    pub min_videos: usize,
    pub f0_hz: f64,
    pub voice: VoiceParams,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            minutes: 30.0,
            fps: 30.0,
            sample_rate: SAMPLE_RATE,
            video_seconds: 300.0,
            min_videos: 10,
            f0_hz: 118.0,
            voice: VoiceParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub video_id: usize,
    pub split: Split,
    pub track: PhonemeTrack,
    pub audio: AudioClip,
    /// Ground-truth coefficients in the corpus lip space.
    pub traj: Trajectory,
}

impl Utterance {
    pub fn duration(&self) -> f64 {
        self.track.total_duration()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub config: CorpusConfig,
    pub speaker: SyntheticSpeaker,
    pub lipspace_fingerprint: String,
    pub inventory: PhonemeInventory,
    /// Targets in the lip space (8-dim).
    pub visemes: VisemeTable,
    /// The same targets as full normalized lip vectors (40-dim).
    pub visemes40: VisemeTable,
    pub utterances: Vec<Utterance>,
}

fn round_ms(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// A random utterance of CV/CVC words with pauses, lasting exactly `target` seconds
/// (to the millisecond).
pub fn random_track(rng: &mut impl Rng, target: f64, inventory: &PhonemeInventory, f0_hz: f64) -> Result<PhonemeTrack> {
    let vowels = inventory.symbols_of(PhonemeClass::Vowel);
    let mut consonants = inventory.symbols_of(PhonemeClass::VoicedConsonant);
    let unvoiced = inventory.symbols_of(PhonemeClass::UnvoicedConsonant);
    consonants.extend(unvoiced.iter().cloned());
    if vowels.is_empty() || consonants.is_empty() {
        return Err(Error::Config("inventory needs vowels and consonants".into()));
    }
    let unvoiced: BTreeSet<String> = unvoiced.into_iter().collect();
    let target = round_ms(target);
    let base_f0 = f0_hz * rng.gen_range(0.9..1.1);
    let jitter = Normal::new(0.0, 0.04).expect("valid std");
    let mut events: Vec<PhonemeEvent> = Vec::new();
    let mut t = 0.0;
    let push = |events: &mut Vec<PhonemeEvent>, t: &mut f64, sym: &str, d: f64, f0: f64| {
        let d = round_ms(d);
        *t += d;
        events.push(PhonemeEvent {
            phoneme: sym.to_string(),
            duration: d,
            f0,
        });
    };
    let lead = rng.gen_range(0.1..0.3f64).min(target / 4.0);
    push(&mut events, &mut t, REST_SYMBOL, lead, 0.0);
    let tail_reserve = 0.1f64.min(target / 4.0);
    'words: loop {
        let syllables = rng.gen_range(1..=3);
        let mut word = Vec::new();
        for _ in 0..syllables {
            word.push((consonants.choose(rng).unwrap().clone(), rng.gen_range(0.05..0.12)));
            word.push((vowels.choose(rng).unwrap().clone(), rng.gen_range(0.08..0.22)));
            if rng.gen_bool(0.3) {
                word.push((consonants.choose(rng).unwrap().clone(), rng.gen_range(0.05..0.12)));
            }
        }
        let pause = rng.gen_bool(0.6).then(|| rng.gen_range(0.06..0.25));
        let need: f64 = word.iter().map(|w| w.1).sum::<f64>() + pause.unwrap_or(0.0);
        if t + need > target - tail_reserve {
            break 'words;
        }
        for (sym, d) in word {
            let progress = t / target;
            let f0 = if unvoiced.contains(&sym) {
                0.0
            } else {
                let f = base_f0 * (1.0 - 0.15 * progress) * (1.0 + jitter.sample(rng));
                ((f * 10.0).round() / 10.0).max(40.0)
            };
            push(&mut events, &mut t, &sym, d, f0);
        }
        if let Some(p) = pause {
            push(&mut events, &mut t, "sp", p, 0.0);
        }
    }
    let rest = round_ms(target - t);
    if rest > 0.0 {
        push(&mut events, &mut t, REST_SYMBOL, rest, 0.0);
    }
    PhonemeTrack::new(events)
}

/// Random video-frame articulation weights for `seconds` of speech:
/// phoneme targets smoothed like the viseme generator, plus per-frame style noise.
pub fn speech_weights(
    rng: &mut impl Rng,
    seconds: f64,
    fps: f64,
    speaker: &SyntheticSpeaker,
    inventory: &PhonemeInventory,
) -> Result<Vec<[f64; NUM_MODES]>> {
    let track = random_track(rng, seconds, inventory, 120.0)?;
    let spans = durations_to_frames(&track, fps)?;
    let total = spans.last().map_or(0, |s| s.end);
    let mut raw = vec![[0.0; NUM_MODES]; total];
    for s in &spans {
        let w = phoneme_weights(&s.phoneme);
        raw[s.start..s.end].iter_mut().for_each(|r| *r = w);
    }
    let half = (SMOOTHING_FRAMES / 2) as isize;
    let noise = Normal::new(0.0, speaker.style_noise.max(1e-12)).expect("valid std");
    Ok((0..total as isize)
        .map(|t| {
            let mut acc = [0.0; NUM_MODES];
            for o in -half..=half {
                let src = (t + o).clamp(0, total as isize - 1) as usize;
                acc.iter_mut()
                    .zip(&raw[src])
                    .for_each(|(a, r)| *a += r / SMOOTHING_FRAMES as f64);
            }
            acc.iter_mut().for_each(|a| *a += noise.sample(rng));
            acc
        })
        .collect())
}

/// Raw landmark tracks of a synthetic speaker, one per "video".
pub fn synthetic_landmark_tracks(
    speaker: &SyntheticSpeaker,
    seed: u64,
    videos: usize,
    seconds_per_video: f64,
    fps: f64,
) -> Result<Vec<Vec<TrackRecord>>> {
    let inventory = PhonemeInventory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..videos)
        .map(|v| {
            let w = speech_weights(&mut rng, seconds_per_video, fps, speaker, &inventory)?;
            Ok(landmark_track(
                speaker,
                &w,
                fps,
                seed ^ ((v as u64 + 1) * 0x51_7cc1),
                0.3,
            ))
        })
        .collect()
}

/// Repair and normalize tracks into lip vectors.
pub fn lip_samples(tracks: &[Vec<TrackRecord>]) -> Result<Vec<LipVector40>> {
    let mut out = Vec::new();
    for t in tracks {
        for f in repair_track(t)? {
            out.push(normalize_frame(&f)?.0);
        }
    }
    Ok(out)
}

/// Fit the lip space of a synthetic speaker from generated landmark video.
pub fn fit_speaker_lipspace(speaker: &SyntheticSpeaker, seed: u64, seconds: f64) -> Result<(LipSpaceModel, FitReport)> {
    let videos = 4;
    let tracks = synthetic_landmark_tracks(speaker, seed, videos, seconds / videos as f64, 30.0)?;
    lipspace::fit(&lip_samples(&tracks)?, NUM_COEFFS)
}

/// Per-symbol targets of `speaker`: full normalized vectors and their
/// projections into `space`.
pub fn build_viseme_tables(
    speaker: &SyntheticSpeaker,
    space: &LipSpaceModel,
    inventory: &PhonemeInventory,
) -> Result<(VisemeTable, VisemeTable)> {
    let mut t8 = VisemeTable {
        version: VISEME_TABLE_VERSION,
        rest: REST_SYMBOL.into(),
        targets: Default::default(),
    };
    let mut t40 = t8.clone();
    for sym in inventory.symbols() {
        let v = speaker.normalized(&phoneme_weights(&sym))?;
        t8.targets.insert(sym.clone(), space.project(&v));
        t40.targets.insert(sym, v.0);
    }
    Ok((t8, t40))
}

/// Split video ids 80/10/10 with at least one video in validation and test.
fn assign_splits(videos: usize, rng: &mut impl Rng) -> Vec<Split> {
    let mut ids: Vec<usize> = (0..videos).collect();
    ids.shuffle(rng);
    let n_val = ((videos as f64 * 0.1).round() as usize).max(1);
    let n_test = ((videos as f64 * 0.1).round() as usize).max(1);
    let n_train = videos.saturating_sub(n_val + n_test).max(1);
    let mut splits = vec![Split::Train; videos];
    for (rank, &v) in ids.iter().enumerate() {
        splits[v] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    splits
}

/// Build a corpus: random utterances of 1-20 s rendered to audio and
/// ground-truth trajectories, grouped into videos with video-level splits.
pub fn make_corpus(
    seed: u64,
    cfg: &CorpusConfig,
    speaker: &SyntheticSpeaker,
    inventory: &PhonemeInventory,
    lipspace: &LipSpaceModel,
) -> Result<Corpus> {
    if !(cfg.minutes > 0.0) {
        return Err(Error::Config(format!("minutes must be positive, got {}", cfg.minutes)));
    }
    inventory.validate()?;
    let (visemes, visemes40) = build_viseme_tables(speaker, lipspace, inventory)?;
    let total = cfg.minutes * 60.0;
    let video_len = cfg.video_seconds.min(total / cfg.min_videos.max(1) as f64);
    let videos = ((total / video_len).round() as usize).max(cfg.min_videos.max(3));
    let video_len = total / videos as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splits = assign_splits(videos, &mut rng);
    let mut utterances = Vec::new();
    for (v, &split) in splits.iter().enumerate() {
        let mut filled = 0.0;
        let mut k = 0;
        while filled < video_len - 1e-9 {
            let remaining = video_len - filled;
            let mut d = rng.gen_range(MIN_UTTERANCE_S..=MAX_UTTERANCE_S);
            if remaining < MIN_UTTERANCE_S {
                break;
            }
            if remaining - d < MIN_UTTERANCE_S {
                d = remaining.min(MAX_UTTERANCE_S);
            }
            let track = random_track(&mut rng, d, inventory, cfg.f0_hz)?;
            let render_seed = rng.gen::<u64>();
            let audio =
                synthesize_voice(&track, inventory, cfg.sample_rate, render_seed, &cfg.voice)?.pcm16_round_trip();
            let traj = gen_viseme_trajectory(&track, cfg.fps, &visemes)?;
            filled += track.total_duration();
            utterances.push(Utterance {
                id: format!("v{v:03}_u{k:03}"),
                video_id: v,
                split,
                track,
                audio,
                traj,
            });
            k += 1;
        }
    }
    Ok(Corpus {
        seed,
        config: cfg.clone(),
        speaker: speaker.clone(),
        lipspace_fingerprint: lipspace.train_fingerprint.clone(),
        inventory: inventory.clone(),
        visemes,
        visemes40,
        utterances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    video_id: usize,
    split: Split,
    duration_s: f64,
    audio: String,
    track: String,
    trajectory: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    config: CorpusConfig,
    speaker: SyntheticSpeaker,
    lipspace_fingerprint: String,
    fingerprint: String,
    utterances: Vec<ManifestEntry>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }

    pub fn video_ids(&self, split: Split) -> Vec<usize> {
        let set: BTreeSet<usize> = self.split(split).iter().map(|u| u.video_id).collect();
        set.into_iter().collect()
    }

    pub fn total_seconds(&self) -> f64 {
        self.utterances.iter().map(|u| u.duration()).sum()
    }

    /// Ground-truth full lip vectors of an utterance (`T x 40`).
    pub fn truth40(&self, u: &Utterance) -> Result<Trajectory> {
        gen_viseme_trajectory(&u.track, self.config.fps, &self.visemes40)
    }

    /// SHA-256 over the seed, configuration and every utterance's content.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        h.update(self.lipspace_fingerprint.as_bytes());
        h.update(serde_json::to_vec(&self.visemes).unwrap_or_default());
        for u in &self.utterances {
            h.update(u.id.as_bytes());
            h.update((u.video_id as u64).to_le_bytes());
            h.update(format!("{:?}", u.split).as_bytes());
            for e in &u.track.events {
                h.update(e.phoneme.as_bytes());
                h.update(e.duration.to_le_bytes());
                h.update(e.f0.to_le_bytes());
            }
            for s in &u.audio.samples {
                h.update(s.to_le_bytes());
            }
            for v in u.traj.frames.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Write the corpus as WAV, TSV and CSV files plus a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["audio", "tracks", "traj"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut entries = Vec::with_capacity(self.utterances.len());
        for u in &self.utterances {
            let e = ManifestEntry {
                id: u.id.clone(),
                video_id: u.video_id,
                split: u.split,
                duration_s: u.duration(),
                audio: format!("audio/{}.wav", u.id),
                track: format!("tracks/{}.tsv", u.id),
                trajectory: format!("traj/{}.csv", u.id),
            };
            write_wav(&dir.join(&e.audio), &u.audio)?;
            u.track.write_tsv(&dir.join(&e.track))?;
            u.traj.write_csv(&dir.join(&e.trajectory))?;
            entries.push(e);
        }
        self.inventory.save(&dir.join("inventory.json"))?;
        self.visemes.save(&dir.join("visemes.json"))?;
        self.visemes40.save(&dir.join("visemes40.json"))?;
        let manifest = Manifest {
            version: CORPUS_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            speaker: self.speaker.clone(),
            lipspace_fingerprint: self.lipspace_fingerprint.clone(),
            fingerprint: self.fingerprint(),
            utterances: entries,
        };
        let path = dir.join("corpus.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("corpus.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != CORPUS_VERSION {
            return Err(Error::Parse(format!("unsupported corpus version {}", m.version)));
        }
        let mut utterances = Vec::with_capacity(m.utterances.len());
        for e in &m.utterances {
            utterances.push(Utterance {
                id: e.id.clone(),
                video_id: e.video_id,
                split: e.split,
                track: PhonemeTrack::read_tsv(&dir.join(&e.track))?,
                audio: ingest_audio(&dir.join(&e.audio), m.config.sample_rate)?,
                traj: Trajectory::read_csv(&dir.join(&e.trajectory), m.config.fps)?,
            });
        }
        let corpus = Corpus {
            seed: m.seed,
            config: m.config,
            speaker: m.speaker,
            lipspace_fingerprint: m.lipspace_fingerprint,
            inventory: PhonemeInventory::load(&dir.join("inventory.json"))?,
            visemes: VisemeTable::load(&dir.join("visemes.json"))?,
            visemes40: VisemeTable::load(&dir.join("visemes40.json"))?,
            utterances,
        };
        let fp = corpus.fingerprint();
        if fp != m.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: m.fingerprint,
                got: fp,
            });
        }
        Ok(corpus)
    }

    /// A sub-corpus holding only the first `fraction` of training videos
    /// (validation and test are kept whole).
    pub fn subsample_videos(&self, fraction: f64) -> Result<Corpus> {
        let train = self.video_ids(Split::Train);
        let keep = (train.len() as f64 * fraction).round() as usize;
        if keep == 0 {
            return Err(Error::Empty(format!(
                "fraction {fraction} of {} training videos keeps none",
                train.len()
            )));
        }
        let kept: BTreeSet<usize> = train[..keep].iter().copied().collect();
        let mut out = self.clone();
        out.utterances
            .retain(|u| u.split != Split::Train || kept.contains(&u.video_id));
        Ok(out)
    }
}

/// Per-frame class index of each Mel frame centre.
pub fn frame_labels(track: &PhonemeTrack, frames: usize, frame_rate: f64, classes: &[String]) -> Result<Vec<usize>> {
    let mut bounds = Vec::with_capacity(track.events.len());
    let mut t = 0.0;
    for e in &track.events {
        t += e.duration;
        let idx = classes
            .iter()
            .position(|c| *c == e.phoneme)
            .ok_or_else(|| Error::UnknownSymbol(e.phoneme.clone()))?;
        bounds.push((t, idx));
    }
    let mut out = Vec::with_capacity(frames);
    let mut k = 0;
    for f in 0..frames {
        let centre = f as f64 / frame_rate;
        while k + 1 < bounds.len() && centre >= bounds[k].0 {
            k += 1;
        }
        out.push(bounds[k].1);
    }
    Ok(out)
}

/// Per-coefficient mean of all training frames: the constant predictor.
pub fn mean_trajectory_frame(utts: &[&Utterance]) -> Vec<f64> {
    let dim = utts.first().map_or(NUM_COEFFS, |u| u.traj.dim());
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for u in utts {
        for row in u.traj.frames.rows() {
            sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            n += 1;
        }
    }
    sum.iter().map(|s| s / n.max(1) as f64).collect()
}

/// A trajectory repeating `frame` for `len` frames.
pub fn constant_trajectory(frame: &[f64], len: usize, fps: f64) -> Result<Trajectory> {
    Trajectory::new(fps, Array2::from_shape_fn((len, frame.len()), |(_, j)| frame[j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Corpus, LipSpaceModel) {
        let sp = SyntheticSpeaker::reference();
        let (space, _) = fit_speaker_lipspace(&sp, 1, 60.0).unwrap();
        let cfg = CorpusConfig {
            minutes: 1.0,
            ..CorpusConfig::default()
        };
        (
            make_corpus(4, &cfg, &sp, &PhonemeInventory::default(), &space).unwrap(),
            space,
        )
    }

    #[test]
    fn tracks_have_exact_length_and_valid_symbols() {
        let inv = PhonemeInventory::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for target in [1.0, 1.37, 5.0, 19.999, 20.0] {
            let t = random_track(&mut rng, target, &inv, 120.0).unwrap();
            assert!((t.total_duration() - round_ms(target)).abs() < 1e-9, "{target}");
            assert!(t.events.iter().all(|e| inv.get(&e.phoneme).is_ok()));
            assert_eq!(t.events[0].phoneme, "sil");
        }
    }

    #[test]
    fn corpus_contract() {
        let (c, space) = small();
        assert!(c.utterances.len() > 3);
        for u in &c.utterances {
            let d = u.duration();
            assert!((MIN_UTTERANCE_S - 1e-9..=MAX_UTTERANCE_S + 1e-9).contains(&d), "{d}");
            assert_eq!(u.traj.len(), (d * 30.0).round() as usize);
            assert_eq!(u.audio.samples.len(), (d * 22050.0).round() as usize);
        }
        let mut seen = std::collections::HashMap::new();
        for u in &c.utterances {
            assert_eq!(*seen.entry(u.video_id).or_insert(u.split), u.split);
        }
        for s in [Split::Train, Split::Validation, Split::Test] {
            assert!(!c.split(s).is_empty());
        }
        let again = make_corpus(4, &c.config, &c.speaker, &c.inventory, &space).unwrap();
        assert_eq!(again.fingerprint(), c.fingerprint());
    }

    #[test]
    fn corpus_disk_round_trip() {
        let (c, _) = small();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn viseme_tables_agree_through_the_lip_space() {
        let (c, space) = small();
        for (sym, v40) in &c.visemes40.targets {
            let p = space.project(&LipVector40(v40.clone()));
            for (a, b) in p.iter().zip(c.visemes.target(sym).unwrap()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn labels_follow_durations() {
        let track = PhonemeTrack::new(vec![
            PhonemeEvent {
                phoneme: "a".into(),
                duration: 0.1,
                f0: 100.0,
            },
            PhonemeEvent {
                phoneme: "sil".into(),
                duration: 0.1,
                f0: 0.0,
            },
        ])
        .unwrap();
        let classes: Vec<String> = ["sil", "a"].iter().map(|s| s.to_string()).collect();
        let l = frame_labels(&track, 20, 100.0, &classes).unwrap();
        assert_eq!(&l[..10], &[1; 10]);
        assert_eq!(&l[10..], &[0; 10]);
    }
}
