use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Time-indexed PCA coefficient vectors at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub fps: f64,
    /// `T x k` coefficients.
    pub frames: Array2<f64>,
}

impl Trajectory {
    pub fn new(fps: f64, frames: Array2<f64>) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { fps, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f64> {
        self.frames.row(t)
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        Trajectory {
            fps: self.fps,
            frames: self.frames.slice(ndarray::s![start..end, ..]).to_owned(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let header: Vec<String> = std::iter::once("frame".to_string())
            .chain((1..=self.dim()).map(|i| format!("a{i}")))
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        for (t, row) in self.frames.rows().into_iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{t},{}", vals.join(",")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, fps: f64) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{}: empty trajectory file", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"frame") || cols.len() < 2 {
            return Err(Error::Parse(format!("{}: bad header {header:?}", path.display())));
        }
        let dim = cols.len() - 1;
        let mut data = Vec::new();
        let mut rows = 0;
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::Parse(format!(
                    "{}: row {rows} has {} fields",
                    path.display(),
                    fields.len()
                )));
            }
            for f in &fields[1..] {
                data.push(
                    f.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?,
                );
            }
            rows += 1;
        }
        let frames = Array2::from_shape_vec((rows, dim), data).expect("row lengths checked");
        Trajectory::new(fps, frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let t = Trajectory::new(
            30.0,
            Array2::from_shape_fn((5, 8), |(i, j)| i as f64 * 0.1 - j as f64 / 3.0),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("frame,a1,a2,a3,a4,a5,a6,a7,a8\n0,"));
        assert_eq!(Trajectory::read_csv(&p, 30.0).unwrap(), t);
    }
}
