//! Facial landmark ingestion, track repair and the canonical lip space.
//!
//! Landmarks follow the 68-point convention: eyes occupy `[36, 48)` and the
//! lips `[48, 68)`. Normalization centres the lips on their centroid, rotates
//! the eye line horizontal and scales the eye distance to [`EYE_DISTANCE`].

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 68;
pub const NUM_LIP_POINTS: usize = 20;
pub const LIP_DIM: usize = 2 * NUM_LIP_POINTS;
pub const LIP_RANGE: std::ops::Range<usize> = 48..68;
pub const LEFT_EYE_RANGE: std::ops::Range<usize> = 36..42;
pub const RIGHT_EYE_RANGE: std::ops::Range<usize> = 42..48;

/// Eye-centre distance in the canonical space.
pub const EYE_DISTANCE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

fn centroid(points: &[Point2D]) -> Point2D {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    Point2D::new(sx / n, sy / n)
}

/// One video frame's landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFrame {
    pub frame_index: usize,
    pub points: Vec<Point2D>,
    pub confidence: Option<f64>,
}

impl LandmarkFrame {
    pub fn new(frame_index: usize, points: Vec<Point2D>, confidence: Option<f64>) -> Result<Self> {
        let frame = Self {
            frame_index,
            points,
            confidence,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != NUM_LANDMARKS {
            return Err(Error::Structural(format!(
                "frame {} has {} landmarks, expected {NUM_LANDMARKS}",
                self.frame_index,
                self.points.len()
            )));
        }
        if let Some(p) = self.points.iter().find(|p| !p.is_finite()) {
            return Err(Error::Structural(format!(
                "frame {} has a non-finite landmark {p:?}",
                self.frame_index
            )));
        }
        Ok(())
    }

    pub fn left_eye_center(&self) -> Point2D {
        centroid(&self.points[LEFT_EYE_RANGE])
    }

    pub fn right_eye_center(&self) -> Point2D {
        centroid(&self.points[RIGHT_EYE_RANGE])
    }

    fn bbox_area(&self) -> f64 {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }
}

/// Lip points in canonical units, laid out `(x1, y1, ..., x20, y20)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LipVector40(pub Vec<f64>);

impl LipVector40 {
    pub fn zeros() -> Self {
        Self(vec![0.0; LIP_DIM])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.len() != LIP_DIM {
            return Err(Error::DimensionMismatch {
                expected: LIP_DIM,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Structural("non-finite lip coordinate".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn points(&self) -> Vec<Point2D> {
        self.0.chunks_exact(2).map(|c| Point2D::new(c[0], c[1])).collect()
    }
}

/// Invertible similarity mapping image coordinates to the canonical lip space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub center: Point2D,
    pub angle: f64,
    pub scale: f64,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            center: Point2D::default(),
            angle: 0.0,
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: Point2D) -> Point2D {
        let (s, c) = self.angle.sin_cos();
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        Point2D::new(self.scale * (c * dx - s * dy), self.scale * (s * dx + c * dy))
    }

    pub fn invert(&self, q: Point2D) -> Point2D {
        let (s, c) = self.angle.sin_cos();
        let x = q.x / self.scale;
        let y = q.y / self.scale;
        Point2D::new(c * x + s * y + self.center.x, -s * x + c * y + self.center.y)
    }
}

/// The 20 lip landmarks of a frame, in order.
pub fn select_lips(frame: &LandmarkFrame) -> Result<Vec<Point2D>> {
    frame.validate()?;
    Ok(frame.points[LIP_RANGE].to_vec())
}

pub fn estimate_transform(frame: &LandmarkFrame) -> Result<SimilarityTransform> {
    frame.validate()?;
    let left = frame.left_eye_center();
    let right = frame.right_eye_center();
    let (dx, dy) = (right.x - left.x, right.y - left.y);
    let dist = dx.hypot(dy);
    if dist <= 0.0 || !dist.is_finite() {
        return Err(Error::DegenerateGeometry(format!(
            "eye centres coincide in frame {}",
            frame.frame_index
        )));
    }
    Ok(SimilarityTransform {
        center: centroid(&frame.points[LIP_RANGE]),
        angle: -dy.atan2(dx),
        scale: EYE_DISTANCE / dist,
    })
}

pub fn normalize(lips: &[Point2D], t: &SimilarityTransform) -> Result<LipVector40> {
    if lips.len() != NUM_LIP_POINTS {
        return Err(Error::Structural(format!(
            "expected {NUM_LIP_POINTS} lip points, got {}",
            lips.len()
        )));
    }
    let values = lips
        .iter()
        .flat_map(|&p| {
            let q = t.apply(p);
            [q.x, q.y]
        })
        .collect();
    Ok(LipVector40(values))
}

pub fn denormalize(v: &LipVector40, t: &SimilarityTransform) -> Vec<Point2D> {
    v.points().into_iter().map(|q| t.invert(q)).collect()
}

/// Select the lips of a frame and map them to the canonical space.
pub fn normalize_frame(frame: &LandmarkFrame) -> Result<(LipVector40, SimilarityTransform)> {
    let t = estimate_transform(frame)?;
    let v = normalize(&select_lips(frame)?, &t)?;
    Ok((v, t))
}

/// A detector candidate for a single frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl Candidate {
    pub fn to_frame(&self, frame_index: usize) -> Result<LandmarkFrame> {
        LandmarkFrame::new(
            frame_index,
            self.points.iter().map(|p| Point2D::new(p[0], p[1])).collect(),
            self.confidence,
        )
    }

    pub fn from_frame(frame: &LandmarkFrame) -> Self {
        Self {
            points: frame.points.iter().map(|p| [p.x, p.y]).collect(),
            confidence: frame.confidence,
        }
    }
}

/// All detections for one frame index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    pub candidates: Vec<Candidate>,
}

/// Best candidate by confidence; ties go to the larger face box, then the
/// earlier candidate.
fn pick_candidate(frames: &[LandmarkFrame]) -> Option<&LandmarkFrame> {
    let key = |f: &LandmarkFrame| f.confidence.unwrap_or(f64::NEG_INFINITY);
    let mut best: Option<&LandmarkFrame> = None;
    for f in frames {
        best = match best {
            None => Some(f),
            Some(b) => {
                let (kf, kb) = (key(f), key(b));
                if kf > kb || (kf == kb && f.bbox_area() > b.bbox_area()) {
                    Some(f)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Resolve a raw detector track to exactly one face per frame.
///
/// Frames with several candidates keep the most confident one; frames with
/// none are filled by per-coordinate linear interpolation between the nearest
/// detected neighbours, or by replicating the nearest detection at the ends.
pub fn repair_track(records: &[TrackRecord]) -> Result<Vec<LandmarkFrame>> {
    for w in records.windows(2) {
        if w[1].frame <= w[0].frame {
            return Err(Error::Structural(format!(
                "frame indices not strictly increasing at {}",
                w[1].frame
            )));
        }
    }
    let mut picked: Vec<Option<LandmarkFrame>> = Vec::with_capacity(records.len());
    for rec in records {
        let frames = rec
            .candidates
            .iter()
            .map(|c| c.to_frame(rec.frame))
            .collect::<Result<Vec<_>>>()?;
        picked.push(pick_candidate(&frames).cloned());
    }
    let detected: Vec<usize> = (0..picked.len()).filter(|&i| picked[i].is_some()).collect();
    if detected.is_empty() {
        return Err(Error::UnrecoverableTrack);
    }

    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        if let Some(f) = &picked[i] {
            out.push(f.clone());
            continue;
        }
        let next = detected.partition_point(|&d| d < i);
        let frame = match (next.checked_sub(1).map(|k| detected[k]), detected.get(next)) {
            (Some(a), Some(&b)) => {
                let fa = picked[a].as_ref().unwrap();
                let fb = picked[b].as_ref().unwrap();
                let (ia, ib) = (records[a].frame as f64, records[b].frame as f64);
                let w = (rec.frame as f64 - ia) / (ib - ia);
                let points = fa
                    .points
                    .iter()
                    .zip(&fb.points)
                    .map(|(p, q)| Point2D::new(p.x + w * (q.x - p.x), p.y + w * (q.y - p.y)))
                    .collect();
                LandmarkFrame {
                    frame_index: rec.frame,
                    points,
                    confidence: None,
                }
            }
            (Some(a), None) => replicate(picked[a].as_ref().unwrap(), rec.frame),
            (None, Some(&b)) => replicate(picked[b].as_ref().unwrap(), rec.frame),
            (None, None) => unreachable!(),
        };
        out.push(frame);
    }
    Ok(out)
}

fn replicate(src: &LandmarkFrame, frame_index: usize) -> LandmarkFrame {
    LandmarkFrame {
        frame_index,
        points: src.points.clone(),
        confidence: None,
    }
}

/// Read a JSON-lines landmark track. Returns the records and the fps carried
/// by the first record, if any.
pub fn read_track(path: &Path) -> Result<(Vec<TrackRecord>, Option<f64>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrackRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        records.push(rec);
    }
    let fps = records.first().and_then(|r| r.fps);
    Ok((records, fps))
}

pub fn write_track(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame_with(f: impl Fn(usize) -> Point2D) -> LandmarkFrame {
        LandmarkFrame::new(0, (0..NUM_LANDMARKS).map(f).collect(), Some(1.0)).unwrap()
    }

    /// Eyes at the given centres, lips scattered around `lip_c`.
    fn face(left: Point2D, right: Point2D, lip_c: Point2D) -> LandmarkFrame {
        frame_with(|i| match i {
            36..=41 => left,
            42..=47 => right,
            48..=67 => {
                let a = (i - 48) as f64 / 20.0 * std::f64::consts::TAU;
                Point2D::new(lip_c.x + a.cos(), lip_c.y + 0.5 * a.sin())
            }
            _ => Point2D::new(i as f64, 2.0 * i as f64),
        })
    }

    #[test]
    fn select_lips_takes_half_open_range() {
        let f = frame_with(|i| Point2D::new(i as f64, 0.0));
        let lips = select_lips(&f).unwrap();
        assert_eq!(lips.len(), 20);
        assert_eq!(lips[0], Point2D::new(48.0, 0.0));
        assert_eq!(lips[19], Point2D::new(67.0, 0.0));
    }

    #[test]
    fn malformed_frame_is_rejected() {
        let err = LandmarkFrame::new(0, vec![Point2D::default(); 67], None).unwrap_err();
        assert!(matches!(err, Error::Structural(_)));
        let bad = LandmarkFrame {
            frame_index: 0,
            points: vec![Point2D::default(); 67],
            confidence: None,
        };
        assert!(select_lips(&bad).is_err());
    }

    #[test]
    fn axis_aligned_transform() {
        let f = face(Point2D::new(0.0, 0.0), Point2D::new(10.0, 0.0), Point2D::new(5.0, 5.0));
        let t = estimate_transform(&f).unwrap();
        assert!(t.angle.abs() < 1e-12);
        assert!((t.scale - 0.5).abs() < 1e-12);
        assert!((t.center.x - 5.0).abs() < 1e-12 && (t.center.y - 5.0).abs() < 1e-12);

        let v = normalize(&select_lips(&f).unwrap(), &t).unwrap();
        let c = centroid(&v.points());
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12);
        let l = t.apply(f.left_eye_center());
        let r = t.apply(f.right_eye_center());
        assert!(((r.x - l.x).hypot(r.y - l.y) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn vertical_eye_line() {
        let f = face(Point2D::new(0.0, 0.0), Point2D::new(0.0, 10.0), Point2D::new(3.0, 5.0));
        let t = estimate_transform(&f).unwrap();
        assert!((t.angle + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let l = t.apply(f.left_eye_center());
        let r = t.apply(f.right_eye_center());
        assert!((r.y - l.y).abs() < 1e-12);
        assert!(r.x > l.x);
    }

    #[test]
    fn coincident_eyes_are_degenerate() {
        let p = Point2D::new(1.0, 1.0);
        let f = face(p, p, Point2D::new(0.0, 5.0));
        assert!(matches!(estimate_transform(&f), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn centre_maps_to_zero_and_back() {
        let t = SimilarityTransform {
            center: Point2D::new(3.0, -2.0),
            angle: 0.7,
            scale: 2.5,
        };
        let v = normalize(&vec![t.center; 20], &t).unwrap();
        assert!(v.as_slice().iter().all(|x| x.abs() < 1e-12));
        let back = denormalize(&LipVector40::zeros(), &t);
        assert!(back.iter().all(|p| *p == t.center));
    }

    #[test]
    fn identity_transform_reinterprets_values() {
        let v = LipVector40((0..40).map(|i| i as f64 * 0.25).collect());
        let pts = denormalize(&v, &SimilarityTransform::identity());
        for (k, p) in pts.iter().enumerate() {
            assert_eq!(p.x, v.0[2 * k]);
            assert_eq!(p.y, v.0[2 * k + 1]);
        }
    }

    #[test]
    fn repair_interpolates_gaps() {
        let a = face(Point2D::new(0.0, 0.0), Point2D::new(10.0, 0.0), Point2D::new(5.0, 5.0));
        let b = face(Point2D::new(2.0, 4.0), Point2D::new(12.0, 4.0), Point2D::new(7.0, 9.0));
        let rec = |i, c: Vec<&LandmarkFrame>| TrackRecord {
            frame: i,
            fps: None,
            candidates: c.into_iter().map(Candidate::from_frame).collect(),
        };
        let out = repair_track(&[rec(0, vec![&a]), rec(1, vec![]), rec(2, vec![&b])]).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].points, a.points);
        assert_eq!(out[2].points, b.points);
        for k in 0..NUM_LANDMARKS {
            let (p, q, m) = (a.points[k], b.points[k], out[1].points[k]);
            assert!((m.x - (p.x + q.x) / 2.0).abs() < 1e-12);
            assert!((m.y - (p.y + q.y) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn repair_keeps_most_confident_and_fills_ends() {
        let mut lo = face(Point2D::new(0.0, 0.0), Point2D::new(10.0, 0.0), Point2D::new(5.0, 5.0));
        lo.confidence = Some(0.4);
        let mut hi = face(Point2D::new(1.0, 0.0), Point2D::new(11.0, 0.0), Point2D::new(6.0, 5.0));
        hi.confidence = Some(0.9);
        let recs = vec![
            TrackRecord {
                frame: 0,
                fps: Some(30.0),
                candidates: vec![],
            },
            TrackRecord {
                frame: 1,
                fps: None,
                candidates: vec![Candidate::from_frame(&lo), Candidate::from_frame(&hi)],
            },
            TrackRecord {
                frame: 2,
                fps: None,
                candidates: vec![],
            },
        ];
        let out = repair_track(&recs).unwrap();
        assert_eq!(out[1].points, hi.points);
        assert_eq!(out[0].points, hi.points);
        assert_eq!(out[2].points, hi.points);
        assert_eq!(out[2].frame_index, 2);
    }

    #[test]
    fn confidence_tie_prefers_larger_face() {
        let small = face(Point2D::new(0.0, 0.0), Point2D::new(10.0, 0.0), Point2D::new(5.0, 5.0));
        let big = frame_with(|i| {
            let p = small.points[i];
            Point2D::new(p.x * 2.0, p.y * 2.0)
        });
        let recs = vec![TrackRecord {
            frame: 0,
            fps: None,
            candidates: vec![Candidate::from_frame(&small), Candidate::from_frame(&big)],
        }];
        assert_eq!(repair_track(&recs).unwrap()[0].points, big.points);
    }

    #[test]
    fn empty_track_is_unrecoverable() {
        let recs = vec![
            TrackRecord {
                frame: 0,
                fps: None,
                candidates: vec![],
            },
            TrackRecord {
                frame: 1,
                fps: None,
                candidates: vec![],
            },
        ];
        assert!(matches!(repair_track(&recs), Err(Error::UnrecoverableTrack)));
    }

    #[test]
    fn track_file_round_trip() {
        let a = face(Point2D::new(0.0, 0.0), Point2D::new(10.0, 0.0), Point2D::new(5.0, 5.0));
        let recs = vec![
            TrackRecord {
                frame: 0,
                fps: Some(30.0),
                candidates: vec![Candidate::from_frame(&a)],
            },
            TrackRecord {
                frame: 1,
                fps: None,
                candidates: vec![],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.jsonl");
        write_track(&path, &recs).unwrap();
        let (back, fps) = read_track(&path).unwrap();
        assert_eq!(back, recs);
        assert_eq!(fps, Some(30.0));
    }

    fn arb_face() -> impl Strategy<Value = LandmarkFrame> {
        (
            prop::collection::vec((-200.0..200.0f64, -200.0..200.0f64), NUM_LANDMARKS),
            (-3.0..3.0f64, 5.0..100.0f64),
        )
            .prop_map(|(pts, (ang, dist))| {
                let mut points: Vec<Point2D> = pts.into_iter().map(|(x, y)| Point2D::new(x, y)).collect();
                // Pin the right eye relative to the left so the eye distance stays sane.
                let l = centroid(&points[LEFT_EYE_RANGE]);
                let r = centroid(&points[RIGHT_EYE_RANGE]);
                let target = Point2D::new(l.x + dist * ang.cos(), l.y + dist * ang.sin());
                for p in &mut points[RIGHT_EYE_RANGE] {
                    p.x += target.x - r.x;
                    p.y += target.y - r.y;
                }
                LandmarkFrame::new(0, points, None).unwrap()
            })
    }

    proptest! {
        #[test]
        fn round_trip_and_canonical_form(f in arb_face()) {
            let (v, t) = normalize_frame(&f).unwrap();
            let lips = select_lips(&f).unwrap();
            for (p, q) in lips.iter().zip(denormalize(&v, &t)) {
                prop_assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
            }
            let l = t.apply(f.left_eye_center());
            let r = t.apply(f.right_eye_center());
            prop_assert!(((r.x - l.x).hypot(r.y - l.y) - EYE_DISTANCE).abs() < 1e-9);
            prop_assert!((r.y - l.y).abs() < 1e-9);
            let c = centroid(&v.points());
            prop_assert!(c.x.abs() < 1e-9 && c.y.abs() < 1e-9);
        }

        #[test]
        fn similarity_invariance(
            f in arb_face(),
            ang in -3.1..3.1f64,
            s in 0.2..5.0f64,
            tx in -500.0..500.0f64,
            ty in -500.0..500.0f64,
        ) {
            let (sn, cs) = ang.sin_cos();
            let moved = LandmarkFrame::new(
                0,
                f.points
                    .iter()
                    .map(|p| Point2D::new(s * (cs * p.x - sn * p.y) + tx, s * (sn * p.x + cs * p.y) + ty))
                    .collect(),
                None,
            )
            .unwrap();
            let (a, _) = normalize_frame(&f).unwrap();
            let (b, _) = normalize_frame(&moved).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-7);
            }
        }
    }
}
