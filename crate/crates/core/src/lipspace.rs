//! PCA lip-shape model.
//!
//! A lip shape is `mean + sum_i alpha_i * components[i]`. Zero-shot speaker
//! adaptation swaps the mean for one estimated on the target speaker and
//! keeps the components untouched.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{LipVector40, LIP_DIM};
use crate::linalg::symmetric_eigen;
use crate::trajectory::Trajectory;

/// Number of PCA coefficients used throughout the pipeline.
pub const NUM_COEFFS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipSpaceModel {
    pub dim: usize,
    pub k: usize,
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    pub train_fingerprint: String,
}

/// Extra statistics from a fit that are not part of the model file.
#[derive(Debug, Clone)]
pub struct FitReport {
    /// All eigenvalues of the (population) covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Cumulative explained-variance ratio for 1..=k components.
    pub cumulative_ratio: Vec<f64>,
    /// Fraction of centred sample energy retained by the reconstruction.
    pub reconstruction_energy: f64,
    pub rank: usize,
}

/// SHA-256 over the little-endian bytes of every sample, hex encoded.
pub fn fingerprint_samples(samples: &[LipVector40]) -> String {
    let mut h = Sha256::new();
    h.update((samples.len() as u64).to_le_bytes());
    for s in samples {
        for v in s.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Population covariance (divides by `n`) and mean of the samples.
pub(crate) fn mean_and_covariance(samples: &[LipVector40]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let mut mean = vec![0.0; LIP_DIM];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.as_slice()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; LIP_DIM * LIP_DIM];
    let mut centred = [0.0; LIP_DIM];
    for s in samples {
        for (c, (v, m)) in centred.iter_mut().zip(s.as_slice().iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..LIP_DIM {
            for j in i..LIP_DIM {
                cov[i * LIP_DIM + j] += centred[i] * centred[j];
            }
        }
    }
    for i in 0..LIP_DIM {
        for j in i..LIP_DIM {
            let v = cov[i * LIP_DIM + j] / n;
            cov[i * LIP_DIM + j] = v;
            cov[j * LIP_DIM + i] = v;
        }
    }
    (mean, cov)
}

pub fn fit(samples: &[LipVector40], target_dim: usize) -> Result<(LipSpaceModel, FitReport)> {
    if !(1..=LIP_DIM).contains(&target_dim) {
        return Err(Error::Config(format!(
            "target_dim must be in [1, {LIP_DIM}], got {target_dim}"
        )));
    }
    if samples.len() < target_dim + 1 {
        return Err(Error::Structural(format!(
            "need at least {} samples, got {}",
            target_dim + 1,
            samples.len()
        )));
    }
    let (mean, cov) = mean_and_covariance(samples);
    let (eigenvalues, vectors) = symmetric_eigen(&cov, LIP_DIM);
    let eigenvalues: Vec<f64> = eigenvalues.into_iter().map(|l| l.max(0.0)).collect();

    let scale =
        samples.iter().flat_map(|s| s.as_slice()).map(|v| v * v).sum::<f64>() / (samples.len() * LIP_DIM) as f64;
    let lmax = eigenvalues[0];
    let rank = if lmax <= 1e-24 * (1.0 + scale) {
        0
    } else {
        eigenvalues.iter().filter(|&&l| l > lmax * 1e-9).count()
    };
    if rank < target_dim {
        return Err(Error::RankDeficient {
            rank,
            requested: target_dim,
        });
    }

    let trace: f64 = eigenvalues.iter().sum();
    let components: Vec<Vec<f64>> = vectors
        .into_iter()
        .take(target_dim)
        .map(|mut v| {
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let ratios: Vec<f64> = eigenvalues[..target_dim].iter().map(|l| l / trace).collect();
    let cumulative_ratio = ratios
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r;
            Some(*acc)
        })
        .collect();

    let model = LipSpaceModel {
        dim: LIP_DIM,
        k: target_dim,
        mean,
        components,
        explained_variance_ratio: ratios,
        train_fingerprint: fingerprint_samples(samples),
    };

    let mut kept = 0.0;
    let mut total = 0.0;
    for s in samples {
        let alpha = model.project(s);
        kept += alpha.iter().map(|a| a * a).sum::<f64>();
        total += s
            .as_slice()
            .iter()
            .zip(&model.mean)
            .map(|(v, m)| (v - m) * (v - m))
            .sum::<f64>();
    }
    let report = FitReport {
        eigenvalues,
        cumulative_ratio,
        reconstruction_energy: if total > 0.0 { kept / total } else { 1.0 },
        rank,
    };
    Ok((model, report))
}

impl LipSpaceModel {
    pub fn project(&self, v: &LipVector40) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(v.as_slice().iter().zip(&self.mean))
                    .map(|(ci, (vi, mi))| ci * (vi - mi))
                    .sum()
            })
            .collect()
    }

    /// `mean + sum_i alpha_i * v_i`.
    pub fn reconstruct(&self, alpha: &[f64]) -> LipVector40 {
        debug_assert_eq!(alpha.len(), self.k);
        let mut out = self.mean.clone();
        for (a, c) in alpha.iter().zip(&self.components) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += a * ci;
            }
        }
        LipVector40(out)
    }

    /// Reconstruct every frame of a coefficient trajectory into a 40-column one.
    pub fn reconstruct_trajectory(&self, traj: &Trajectory) -> Result<Trajectory> {
        if traj.dim() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: traj.dim(),
            });
        }
        let mut out = Array2::zeros((traj.len(), self.dim));
        for (t, row) in traj.frames.rows().into_iter().enumerate() {
            let v = self.reconstruct(&row.to_vec());
            out.row_mut(t).assign(&ArrayView1::from(&v.0));
        }
        Trajectory::new(traj.fps, out)
    }

    /// Project every frame of a 40-column trajectory.
    pub fn project_trajectory(&self, traj: &Trajectory) -> Result<Trajectory> {
        if traj.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: traj.dim(),
            });
        }
        let mut out = Array2::zeros((traj.len(), self.k));
        for (t, row) in traj.frames.rows().into_iter().enumerate() {
            let a = self.project(&LipVector40(row.to_vec()));
            out.row_mut(t).assign(&ArrayView1::from(&a));
        }
        Trajectory::new(traj.fps, out)
    }

    /// Same components and ratios, new mean. No refitting.
    pub fn adapt_mean(&self, new_mean: &LipVector40) -> Result<Self> {
        if new_mean.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Structural("adapted mean is not finite".into()));
        }
        Ok(Self {
            mean: new_mean.as_slice().to_vec(),
            ..self.clone()
        })
    }

    /// `mean + s * v_index` for each scale.
    pub fn component_sweep(&self, component_index: usize, scales: &[f64]) -> Result<Vec<LipVector40>> {
        if component_index >= self.k {
            return Err(Error::OutOfRange {
                index: component_index,
                limit: self.k,
            });
        }
        let c = &self.components[component_index];
        Ok(scales
            .iter()
            .map(|s| LipVector40(self.mean.iter().zip(c).map(|(m, v)| m + s * v).collect()))
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != LIP_DIM || self.mean.len() != LIP_DIM {
            return Err(Error::DimensionMismatch {
                expected: LIP_DIM,
                got: self.mean.len(),
            });
        }
        if self.components.len() != self.k || self.explained_variance_ratio.len() != self.k {
            return Err(Error::Structural(format!(
                "model declares k = {} but stores {} components",
                self.k,
                self.components.len()
            )));
        }
        if self.components.iter().any(|c| c.len() != LIP_DIM) {
            return Err(Error::Structural("component length is not 40".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }
}

/// Per-coordinate mean of a set of frames.
pub fn estimate_mean(frames: &[LipVector40]) -> Result<LipVector40> {
    if frames.is_empty() {
        return Err(Error::Empty("no frames to estimate a mean from".into()));
    }
    let n = frames.len() as f64;
    let mut m = vec![0.0; LIP_DIM];
    for f in frames {
        for (a, v) in m.iter_mut().zip(f.as_slice()) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= n);
    Ok(LipVector40(m))
}

/// Evenly spaced scales over `[-1.5, 1.5]`, inclusive.
pub fn default_sweep_scales(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count).map(|i| -1.5 + 3.0 * i as f64 / (count - 1) as f64).collect(),
    }
}

pub const DEFAULT_SWEEP_STEPS: usize = 8;
