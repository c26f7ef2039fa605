//! Alignment and text metrics: DTW over MFCCs, trajectory warping,
//! phoneme-duration to frame mapping and word error rate.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::audiofeat::MfccMatrix;
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl AlignmentPath {
    /// Check the monotone step-pattern invariants against sequence lengths.
    pub fn is_valid(&self, len_a: usize, len_b: usize) -> bool {
        let Some(&first) = self.pairs.first() else {
            return false;
        };
        if first != (0, 0) || *self.pairs.last().unwrap() != (len_a - 1, len_b - 1) {
            return false;
        }
        self.pairs.windows(2).all(|w| {
            let (di, dj) = (w[1].0 as isize - w[0].0 as isize, w[1].1 as isize - w[0].1 as isize);
            matches!((di, dj), (1, 0) | (0, 1) | (1, 1))
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DtwOptions {
    /// Sakoe-Chiba band half-width in frames around the scaled diagonal.
    pub band: Option<usize>,
}

pub(crate) fn euclidean(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn dtw(a: &MfccMatrix, b: &MfccMatrix) -> Result<AlignmentPath> {
    dtw_with(a.frames.view(), b.frames.view(), DtwOptions::default())
}

/// Minimal-cost monotone alignment with steps (1,0), (0,1), (1,1) and
/// Euclidean frame distance. Ties prefer the diagonal, then (1,0).
pub fn dtw_with(a: ArrayView2<f64>, b: ArrayView2<f64>, opts: DtwOptions) -> Result<AlignmentPath> {
    let (n, m) = (a.nrows(), b.nrows());
    if n == 0 || m == 0 {
        return Err(Error::Empty("DTW input sequence".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    let in_band = |i: usize, j: usize| match opts.band {
        None => true,
        Some(w) => {
            let centre = if n == 1 {
                0.0
            } else {
                i as f64 * (m - 1) as f64 / (n - 1) as f64
            };
            (j as f64 - centre).abs() <= w as f64
        }
    };
    let mut acc = Array2::from_elem((n, m), f64::INFINITY);
    for i in 0..n {
        for j in 0..m {
            if !in_band(i, j) {
                continue;
            }
            let d = euclidean(a.row(i), b.row(j));
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[[i - 1, j - 1]]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
                let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[[i, j]] = d + prev;
        }
    }
    let total_cost = acc[[n - 1, m - 1]];
    if !total_cost.is_finite() {
        return Err(Error::Config("DTW band too narrow to connect the endpoints".into()));
    }

    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let diag = if i > 0 && j > 0 {
            acc[[i - 1, j - 1]]
        } else {
            f64::INFINITY
        };
        let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
        let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(AlignmentPath { pairs, total_cost })
}

/// Resample a prediction onto the reference time axis of `path`: each
/// reference frame becomes the mean of the prediction frames paired with it.
pub fn warp_trajectory(pred: &Trajectory, path: &AlignmentPath) -> Result<Trajectory> {
    let &(last_i, last_j) = path.pairs.last().ok_or_else(|| Error::Empty("alignment path".into()))?;
    if last_j + 1 != pred.len() {
        return Err(Error::LengthMismatch {
            expected: last_j + 1,
            got: pred.len(),
        });
    }
    let ref_len = last_i + 1;
    let mut sum = Array2::<f64>::zeros((ref_len, pred.dim()));
    let mut count = vec![0usize; ref_len];
    for &(i, j) in &path.pairs {
        let mut row = sum.row_mut(i);
        row += &pred.frame(j);
        count[i] += 1;
    }
    for (mut row, c) in sum.rows_mut().into_iter().zip(&count) {
        row /= *c as f64;
    }
    Trajectory::new(pred.fps, sum)
}

/// One phoneme with its duration (seconds) and F0 (Hz, 0 = unvoiced).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeEvent {
    pub phoneme: String,
    pub duration: f64,
    pub f0: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhonemeTrack {
    pub events: Vec<PhonemeEvent>,
}

impl PhonemeTrack {
    pub fn new(events: Vec<PhonemeEvent>) -> Result<Self> {
        let t = Self { events };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.events {
            if !(e.duration > 0.0) || !e.duration.is_finite() {
                return Err(Error::InvalidDuration(e.duration));
            }
            if !(e.f0 >= 0.0) {
                return Err(Error::Parse(format!("negative F0 {} for {}", e.f0, e.phoneme)));
            }
        }
        Ok(())
    }

    pub fn total_duration(&self) -> f64 {
        self.events.iter().map(|e| e.duration).sum()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "phoneme\tduration_s\tf0_hz").map_err(io)?;
        for e in &self.events {
            writeln!(w, "{}\t{}\t{}", e.phoneme, e.duration, e.f0).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{}: empty duration file", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
        let idx = |name: &str| {
            cols.iter()
                .position(|c| *c == name)
                .ok_or_else(|| Error::Parse(format!("{}: missing column {name}", path.display())))
        };
        let (ip, id, ifr) = (idx("phoneme")?, idx("duration_s")?, idx("f0_hz")?);
        let mut events = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let get = |i: usize| {
                f.get(i)
                    .copied()
                    .ok_or_else(|| Error::Parse(format!("{}: line {} is short", path.display(), n + 2)))
            };
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{}: line {}: {e}", path.display(), n + 2)))
            };
            events.push(PhonemeEvent {
                phoneme: get(ip)?.to_string(),
                duration: num(get(id)?)?,
                f0: num(get(ifr)?)?,
            });
        }
        PhonemeTrack::new(events)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSpan {
    pub phoneme: String,
    pub start: usize,
    pub end: usize,
}

/// Map phoneme durations to half-open video-frame spans using cumulative
/// rounding, so the total never drifts.
pub fn durations_to_frames(track: &PhonemeTrack, fps: f64) -> Result<Vec<FrameSpan>> {
    if !(fps > 0.0) {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    track.validate()?;
    let mut spans = Vec::with_capacity(track.events.len());
    let mut cum = 0.0;
    let mut start = 0usize;
    for e in &track.events {
        cum += e.duration;
        let end = (fps * cum).round() as usize;
        spans.push(FrameSpan {
            phoneme: e.phoneme.clone(),
            start,
            end,
        });
        start = end;
    }
    Ok(spans)
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate: token edit distance over reference length.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("WER reference".into()));
    }
    let r: Vec<&str> = reference.iter().map(|s| s.as_ref()).collect();
    let h: Vec<&str> = hypothesis.iter().map(|s| s.as_ref()).collect();
    Ok(levenshtein(&r, &h) as f64 / r.len() as f64)
}

pub fn wer_str(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h)
}
