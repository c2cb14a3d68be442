use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelError, Reader, Result};

const MAGIC: &[u8; 8] = b"APDATA\0\0";
const FORMAT_VERSION: u32 = 1;

/// `n × d` feature matrix (row-major) with binary labels. `true` marks a
/// true alert.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<bool>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            features: Vec::with_capacity(dim * rows),
            labels: Vec::with_capacity(rows),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R], labels: &[bool]) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(ModelError::LengthMismatch {
                scores: rows.len(),
                labels: labels.len(),
            });
        }
        let mut ds = Self::with_capacity(dim, rows.len());
        for (row, &label) in rows.iter().zip(labels) {
            ds.push(row.as_ref(), label)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, row: &[f64], label: bool) -> Result<()> {
        if row.len() != self.dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim,
                found: row.len(),
            });
        }
        if let Some(column) = row.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFeature {
                row: self.labels.len(),
                column,
            });
        }
        self.features.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim.max(1)).take(self.len())
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let p = self.positives();
        p > 0 && p < self.len()
    }

    /// Rows in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::with_capacity(self.dim, indices.len());
        for &i in indices {
            out.features.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Seeded random split into `(train, holdout)`.
    pub fn split(&self, holdout_fraction: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((1.0 - holdout_fraction.clamp(0.0, 1.0)) * self.len() as f64).round() as usize;
        (self.select(&idx[..cut]), self.select(&idx[cut..]))
    }

    /// Versioned little-endian encoding: magic, version, n, d, labels as
    /// bytes, then row-major `f64` features.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.len() + 8 * self.features.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend(self.labels.iter().map(|&l| l as u8));
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let n = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let cells = n
            .checked_mul(dim)
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| ModelError::Corrupt("dataset size overflows".into()))?;
        let labels = r
            .take(n)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(ModelError::Corrupt(format!("label byte {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let raw = r.take(cells * 8)?;
        r.finish()?;
        let features: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFeature {
                row: pos / dim.max(1),
                column: pos % dim.max(1),
            });
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_validates_shape_and_finiteness() {
        let mut ds = Dataset::new(2);
        ds.push(&[1.0, 2.0], true).unwrap();
        assert!(matches!(
            ds.push(&[1.0], false),
            Err(ModelError::DimensionMismatch { expected: 2, found: 1 })
        ));
        assert!(matches!(
            ds.push(&[1.0, f64::NAN], false),
            Err(ModelError::NonFiniteFeature { row: 1, column: 1 })
        ));
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn encoding_round_trips_and_rejects_damage() {
        let ds = Dataset::from_rows(3, &[[0.5, -1.0, 1e300], [0.0, 2.0, -0.0]], &[true, false])
            .unwrap();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 1]),
            Err(ModelError::Corrupt(_))
        ));
        let mut future = bytes.clone();
        future[8] = 9;
        assert!(matches!(
            Dataset::from_bytes(&future),
            Err(ModelError::FormatVersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn split_partitions_rows() {
        let rows: Vec<[f64; 1]> = (0..100).map(|i| [i as f64]).collect();
        let labels: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
        let ds = Dataset::from_rows(1, &rows, &labels).unwrap();
        let (train, test) = ds.split(0.2, 7);
        assert_eq!((train.len(), test.len()), (80, 20));
        let mut all: Vec<i64> = train.rows().chain(test.rows()).map(|r| r[0] as i64).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
