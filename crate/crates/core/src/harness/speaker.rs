//! Synthetic talking-face generator.
//!
//! A speaker is a linear lip-shape model in canonical coordinates (eye
//! distance 5, lip centroid at the origin): a rest shape plus articulation
//! modes. Phonemes map to mode weights; full 68-point faces are produced by
//! placing the lips under a random similarity transform with pixel jitter.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{
    normalize_frame, Candidate, LandmarkFrame, LipVector40, Point2D, TrackRecord, LIP_DIM, NUM_LANDMARKS,
    NUM_LIP_POINTS,
};

pub const NUM_MODES: usize = 10;

/// Outer contour (12 points, from the left corner over the top) then the
/// inner contour (8 points), in the 68-point lip ordering.
const REST: [(f64, f64); NUM_LIP_POINTS] = [
    (-2.0, 0.0),
    (-1.2, 0.55),
    (-0.5, 0.68),
    (0.0, 0.58),
    (0.5, 0.68),
    (1.2, 0.55),
    (2.0, 0.0),
    (1.2, -0.6),
    (0.6, -0.76),
    (0.0, -0.8),
    (-0.6, -0.76),
    (-1.2, -0.6),
    (-1.5, 0.0),
    (-0.6, 0.1),
    (0.0, 0.12),
    (0.6, 0.1),
    (1.5, 0.0),
    (0.6, -0.1),
    (0.0, -0.12),
    (-0.6, -0.1),
];

fn is_upper(i: usize) -> bool {
    (1..=5).contains(&i) || (13..=15).contains(&i)
}

fn is_lower(i: usize) -> bool {
    (7..=11).contains(&i) || (17..=19).contains(&i)
}

fn is_inner(i: usize) -> bool {
    i >= 12
}

/// Displacement of point `i` (rest position `x`, `y`) under mode `m`.
fn mode_displacement(m: usize, i: usize, x: f64, y: f64) -> (f64, f64) {
    let bell = 1.0 - (x / 2.0).powi(2);
    match m {
        // jaw opening
        0 => {
            if is_lower(i) {
                (0.0, -bell)
            } else if is_upper(i) {
                (0.0, 0.15 * bell)
            } else {
                (0.0, -0.3)
            }
        }
        // spread
        1 => (0.25 * x, -0.1 * y),
        // rounding
        2 => (-0.3 * x, 0.25 * y),
        // upper lip raise
        3 => (0.0, if is_upper(i) && !is_inner(i) { 0.2 } else { 0.0 }),
        // lower lip drop
        4 => (0.0, if is_lower(i) && !is_inner(i) { -0.2 } else { 0.0 }),
        // smile: corners up
        5 => (0.0, 0.3 * (x / 2.0).powi(2)),
        // lopsided opening
        6 => (0.0, 0.2 * (x / 2.0) * if is_lower(i) { -1.0 } else { 1.0 }),
        // lip press: inner contour closes, outer thins
        7 => {
            if is_inner(i) {
                (0.0, -y)
            } else {
                (0.0, -0.3 * y)
            }
        }
        // mouth roll relative to the eye line
        8 => (0.0, 0.15 * x),
        // pucker of the inner opening
        _ => {
            if is_inner(i) {
                (-0.3 * x, 0.3 * y)
            } else {
                (0.0, 0.0)
            }
        }
    }
}

/// Articulation weights per phoneme symbol; silences are the rest pose.
pub fn phoneme_weights(symbol: &str) -> [f64; NUM_MODES] {
    let mut w = [0.0; NUM_MODES];
    let set = |w: &mut [f64; NUM_MODES], pairs: &[(usize, f64)]| pairs.iter().for_each(|&(m, v)| w[m] = v);
    match symbol {
        "a" => set(&mut w, &[(0, 0.9), (1, 0.2), (3, 0.2)]),
        "e" => set(&mut w, &[(0, 0.5), (1, 0.6), (5, 0.2)]),
        "i" => set(&mut w, &[(0, 0.25), (1, 1.0), (5, 0.4)]),
        "o" => set(&mut w, &[(0, 0.6), (2, 0.8), (9, 0.5)]),
        "u" => set(&mut w, &[(0, 0.2), (2, 1.0), (9, 0.9)]),
        "b" | "p" | "m" => set(&mut w, &[(7, 1.0), (0, -0.05)]),
        "f" | "v" => set(&mut w, &[(4, -0.6), (0, 0.15), (3, 0.2)]),
        "s" | "z" => set(&mut w, &[(0, 0.1), (1, 0.6), (5, 0.1)]),
        "k" => set(&mut w, &[(0, 0.4), (1, 0.1)]),
        "l" => set(&mut w, &[(0, 0.35), (6, 0.2)]),
        "d" | "t" | "n" => set(&mut w, &[(0, 0.25), (1, 0.2), (8, 0.1)]),
        _ => {}
    }
    w
}

/// A speaker-specific lip model in canonical coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub name: String,
    /// Rest shape, interleaved x/y.
    pub rest: Vec<f64>,
    /// `NUM_MODES` displacement fields.
    pub modes: Vec<Vec<f64>>,
    /// Per-mode articulation gain.
    pub gain: Vec<f64>,
    /// Std of the per-frame idiosyncratic mode noise.
    pub style_noise: f64,
}

impl SyntheticSpeaker {
    /// The reference speaker.
    pub fn reference() -> Self {
        let mut rest = Vec::with_capacity(LIP_DIM);
        for (x, y) in REST {
            rest.push(x);
            rest.push(y);
        }
        let modes = (0..NUM_MODES)
            .map(|m| {
                REST.iter()
                    .enumerate()
                    .flat_map(|(i, &(x, y))| {
                        let (dx, dy) = mode_displacement(m, i, x, y);
                        [dx, dy]
                    })
                    .collect()
            })
            .collect();
        Self {
            name: "A".into(),
            rest,
            modes,
            gain: vec![1.0; NUM_MODES],
            style_noise: 0.05,
        }
    }

    /// A second speaker: wider mouth, fuller lower lip, a seeded per-point
    /// offset and stronger jaw motion.
    pub fn shifted(seed: u64, magnitude: f64) -> Self {
        let mut s = Self::reference();
        s.name = "B".into();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).expect("valid std");
        for (i, &(x, _)) in REST.iter().enumerate() {
            let lower_outer = is_lower(i) && !is_inner(i);
            s.rest[2 * i] += magnitude * (0.15 * x + noise.sample(&mut rng) * 0.2);
            s.rest[2 * i + 1] += magnitude * ((if lower_outer { -0.25 } else { 0.0 }) + noise.sample(&mut rng) * 0.2);
        }
        s.gain[0] = 1.2;
        s.gain[1] = 0.85;
        s
    }

    /// Canonical (un-normalized) lip coordinates for mode weights `w`.
    pub fn lips(&self, w: &[f64]) -> Vec<f64> {
        let mut out = self.rest.clone();
        for (m, &wm) in w.iter().enumerate().take(NUM_MODES) {
            let g = wm * self.gain[m];
            out.iter_mut().zip(&self.modes[m]).for_each(|(o, d)| *o += g * d);
        }
        out
    }

    /// A full 68-point face whose lips are `lips`, posed by `pose`.
    pub fn face(
        &self,
        lips: &[f64],
        pose: &Pose,
        frame_index: usize,
        rng: &mut impl Rng,
        jitter_px: f64,
    ) -> LandmarkFrame {
        let canon = canonical_face(lips);
        let noise = Normal::new(0.0, jitter_px.max(1e-12)).expect("valid std");
        let points = canon
            .iter()
            .map(|p| {
                let q = pose.apply(*p);
                if jitter_px > 0.0 {
                    Point2D::new(q.x + noise.sample(rng), q.y + noise.sample(rng))
                } else {
                    q
                }
            })
            .collect();
        LandmarkFrame {
            frame_index,
            points,
            confidence: Some(0.9 + 0.1 * rng.gen::<f64>()),
        }
    }

    /// Normalized lip vector of mode weights `w` (no pose, no jitter).
    pub fn normalized(&self, w: &[f64]) -> Result<LipVector40> {
        let frame = LandmarkFrame {
            frame_index: 0,
            points: canonical_face(&self.lips(w)),
            confidence: None,
        };
        Ok(normalize_frame(&frame)?.0)
    }
}

/// Image placement of a canonical face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub scale: f64,
    pub angle: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Pose {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            scale: rng.gen_range(18.0..40.0),
            angle: rng.gen_range(-0.25..0.25),
            tx: rng.gen_range(200.0..440.0),
            ty: rng.gen_range(150.0..330.0),
        }
    }

    pub fn apply(&self, p: Point2D) -> Point2D {
        let (s, c) = self.angle.sin_cos();
        Point2D::new(
            self.tx + self.scale * (c * p.x - s * p.y),
            self.ty + self.scale * (s * p.x + c * p.y),
        )
    }
}

/// 68 canonical points: jaw, brows, nose, eyes around fixed positions and
/// the given lips.
fn canonical_face(lips: &[f64]) -> Vec<Point2D> {
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..17 {
        let a = std::f64::consts::PI * (i as f64 / 16.0);
        pts.push(Point2D::new(-4.2 * a.cos(), 3.0 - 5.5 * a.sin()));
    }
    for i in 0..10 {
        let x = if i < 5 {
            -3.8 + 0.6 * i as f64
        } else {
            1.4 + 0.6 * (i - 5) as f64
        };
        pts.push(Point2D::new(x, 7.0 + 0.3 * (1.0 - ((x.abs() - 2.6) / 1.2).powi(2))));
    }
    for i in 0..4 {
        pts.push(Point2D::new(0.0, 5.5 - 0.9 * i as f64));
    }
    for i in 0..5 {
        pts.push(Point2D::new(
            -1.0 + 0.5 * i as f64,
            1.9 - 0.2 * (2.0 - (i as f64 - 2.0).abs()),
        ));
    }
    for cx in [-2.5, 2.5] {
        for j in 0..6 {
            let a = std::f64::consts::TAU * j as f64 / 6.0;
            pts.push(Point2D::new(cx - 0.6 * a.cos(), 5.5 + 0.25 * a.sin()));
        }
    }
    for p in lips.chunks_exact(2) {
        pts.push(Point2D::new(p[0], p[1]));
    }
    pts
}

/// Random articulation weights drawn the way speech visits them: a phoneme
/// target plus idiosyncratic noise.
pub fn speech_like_weights(rng: &mut impl Rng, symbols: &[String], noise: f64) -> [f64; NUM_MODES] {
    let sym = &symbols[rng.gen_range(0..symbols.len())];
    let mut w = phoneme_weights(sym);
    let n = Normal::new(0.0, noise.max(1e-12)).expect("valid std");
    w.iter_mut().for_each(|v| *v += n.sample(rng));
    w
}

/// A landmark track for `frames` frames of one speaker, with a fixed head
/// pose, occasional missed detections and spurious low-confidence faces.
pub fn landmark_track(
    speaker: &SyntheticSpeaker,
    weights: &[[f64; NUM_MODES]],
    fps: f64,
    seed: u64,
    jitter_px: f64,
) -> Vec<TrackRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = Pose::random(&mut rng);
    let n = weights.len();
    weights
        .iter()
        .enumerate()
        .map(|(t, w)| {
            let mut candidates = Vec::new();
            // Never drop the first or last frame so the track stays repairable.
            let missed = t > 0 && t + 1 < n && rng.gen_bool(0.02);
            if !missed {
                let face = speaker.face(&speaker.lips(w), &pose, t, &mut rng, jitter_px);
                candidates.push(Candidate::from_frame(&face));
            }
            if rng.gen_bool(0.03) {
                let other = Pose::random(&mut rng);
                let mut ghost = speaker.face(&speaker.rest, &other, t, &mut rng, jitter_px);
                ghost.confidence = Some(0.3 * rng.gen::<f64>());
                candidates.push(Candidate::from_frame(&ghost));
            }
            TrackRecord {
                frame: t,
                fps: (t == 0).then_some(fps),
                candidates,
            }
        })
        .collect()
}
