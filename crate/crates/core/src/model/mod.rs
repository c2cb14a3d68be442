//! Alert classifier: a random forest grown from scratch, its training data
//! container, and ROC analysis.

mod dataset;
mod forest;
mod roc;

pub use dataset::Dataset;
pub use forest::{train_forest, Forest, ForestParams, Node, Tree};
pub use roc::{roc_points, RocCurve};

#[doc(hidden)]
pub use forest::train_forest_unchecked;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dataset has no examples")]
    EmptyDataset,
    #[error("only one class present")]
    SingleClass,
    #[error("non-finite feature at row {row}, column {column}")]
    NonFiniteFeature { row: usize, column: usize },
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("expected {expected} features, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("forest has no trees")]
    EmptyForest,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unsupported format version {found} (supported: {supported})")]
    FormatVersionMismatch { found: u32, supported: u32 },
    #[error("corrupt encoding: {0}")]
    Corrupt(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.take(magic.len())? != magic {
            return Err(ModelError::Corrupt("bad magic header".into()));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, supported: u32) -> Result<()> {
        let found = self.u32()?;
        if found != supported {
            return Err(ModelError::FormatVersionMismatch { found, supported });
        }
        Ok(())
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(ModelError::Corrupt(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
