//! Named parameter sets.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer name to weight matrix. Biases and gains are stored as `1 x n`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl Weights {
    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Weights) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch {
                name: "<parameter count>".into(),
                expected: vec![self.tensors.len()],
                got: vec![other.tensors.len()],
            });
        }
        for (k, v) in &self.tensors {
            match other.tensors.get(k) {
                Some(o) if o.shape() == v.shape() => {}
                Some(o) => {
                    return Err(Error::ShapeMismatch {
                        name: k.clone(),
                        expected: v.shape().to_vec(),
                        got: o.shape().to_vec(),
                    })
                }
                None => {
                    return Err(Error::ShapeMismatch {
                        name: k.clone(),
                        expected: v.shape().to_vec(),
                        got: vec![],
                    })
                }
            }
        }
        Ok(())
    }

    /// `self += scale * other`, key by key.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for (k, v) in self.tensors.iter_mut() {
            v.scaled_add(scale, other.get(k));
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.values_mut().for_each(|v| *v *= s);
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// Sub-map of every tensor whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Weights {
        Weights {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

pub(crate) fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..a))
}

/// Element-wise arithmetic mean of equally shaped weight sets.
pub fn average_checkpoints(checkpoints: &[Weights]) -> Result<Weights> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Empty("no checkpoints to average".into()))?;
    for c in checkpoints {
        first.same_shape(c)?;
    }
    // Running mean: identical inputs come back bitwise unchanged.
    let mut mean = first.clone();
    for (k, c) in checkpoints.iter().enumerate().skip(1) {
        let inv = 1.0 / (k + 1) as f64;
        for (name, m) in mean.tensors.iter_mut() {
            m.zip_mut_with(c.get(name), |m, &x| *m += (x - *m) * inv);
        }
    }
    Ok(mean)
}

#[derive(Serialize, Deserialize)]
pub(crate) struct StoredTensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Serialize for Weights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<&String, StoredTensor> = self
            .tensors
            .iter()
            .map(|(k, v)| {
                (
                    k,
                    StoredTensor {
                        shape: [v.nrows(), v.ncols()],
                        data: v.iter().copied().collect(),
                    },
                )
            })
            .collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Weights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, StoredTensor>::deserialize(d)?;
        let mut tensors = BTreeMap::new();
        for (k, t) in map {
            let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                .map_err(|e| serde::de::Error::custom(format!("{k}: {e}")))?;
            tensors.insert(k, arr);
        }
        Ok(Weights { tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample(seed: u64) -> Weights {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::default();
        w.insert("a.w", xavier(&mut rng, 3, 4));
        w.insert("a.b", xavier(&mut rng, 1, 4));
        w
    }

    #[test]
    fn averaging() {
        let w = sample(1);
        assert_eq!(average_checkpoints(&[w.clone(), w.clone(), w.clone()]).unwrap(), w);
        let mut neg = w.clone();
        neg.scale(-1.0);
        assert!(average_checkpoints(&[w.clone(), neg]).unwrap().sq_norm() == 0.0);

        let (a, b, c) = (sample(1), sample(2), sample(3));
        let x = average_checkpoints(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = average_checkpoints(&[c, a, b]).unwrap();
        for (p, q) in x.tensors.values().zip(y.tensors.values()) {
            for (u, v) in p.iter().zip(q) {
                assert!((u - v).abs() < 1e-15);
            }
        }
        assert!(average_checkpoints(&[]).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = sample(1);
        let mut b = sample(2);
        b.insert("a.b", Array2::zeros((1, 5)));
        assert!(matches!(average_checkpoints(&[a, b]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn serde_round_trip() {
        let w = sample(4);
        let text = serde_json::to_string(&w).unwrap();
        let back: Weights = serde_json::from_str(&text).unwrap();
        assert_eq!(back, w);
    }
}
