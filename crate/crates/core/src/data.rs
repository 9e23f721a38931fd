//! Batch data plumbing between storage and the training loops.
//!
//! Training consumes data partition by partition. A partition arrives as a
//! [`LabeledFrames`] chunk: a feature matrix plus parallel label and
//! (utterance, frame) id vectors. The storage side (file readers, in-memory
//! fixtures) implements [`DataSource`]; the trainers only ever see the trait.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One loaded partition: row i of `features` belongs to class `labels[i]`
/// and came from utterance/frame `ids[i]`.
#[derive(Clone, Debug)]
pub struct LabeledFrames {
    pub features: Matrix,
    pub labels: Vec<u32>,
    pub ids: Vec<(u32, u32)>,
}

impl LabeledFrames {
    pub fn new(features: Matrix, labels: Vec<u32>, ids: Vec<(u32, u32)>) -> Result<Self> {
        if labels.len() != features.rows() || ids.len() != features.rows() {
            return Err(Error::Data(format!(
                "labels ({}) and ids ({}) must match feature rows ({})",
                labels.len(),
                ids.len(),
                features.rows()
            )));
        }
        Ok(LabeledFrames {
            features,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A resettable sequence of partitions.
///
/// `start_pass` rewinds to the beginning of the data; implementations that
/// shuffle may produce a different order each pass, but the multiset of
/// frames must be identical every time.
pub trait DataSource {
    fn feature_dim(&self) -> usize;

    fn start_pass(&mut self) -> Result<()>;

    /// Next partition of the current pass, or `None` when exhausted.
    fn next_partition(&mut self) -> Result<Option<LabeledFrames>>;
}

/// Everything resident in one chunk; the simplest possible source.
///
/// `partition_rows` caps the rows handed out per partition so tests can
/// exercise multi-partition behavior without files.
pub struct MemorySource {
    frames: LabeledFrames,
    partition_rows: usize,
    cursor: usize,
}

impl MemorySource {
    pub fn new(frames: LabeledFrames) -> Self {
        let rows = frames.len().max(1);
        MemorySource {
            frames,
            partition_rows: rows,
            cursor: 0,
        }
    }

    pub fn with_partition_rows(frames: LabeledFrames, partition_rows: usize) -> Self {
        MemorySource {
            frames,
            partition_rows: partition_rows.max(1),
            cursor: 0,
        }
    }

    /// Convenience for unlabeled fixtures: labels and ids are zero-filled.
    pub fn from_features(features: Matrix) -> Self {
        let n = features.rows();
        let frames = LabeledFrames {
            features,
            labels: alloc::vec![0; n],
            ids: alloc::vec![(0, 0); n],
        };
        MemorySource::new(frames)
    }
}

impl DataSource for MemorySource {
    fn feature_dim(&self) -> usize {
        self.frames.features.cols()
    }

    fn start_pass(&mut self) -> Result<()> {
        self.cursor = 0;
        Ok(())
    }

    fn next_partition(&mut self) -> Result<Option<LabeledFrames>> {
        if self.cursor >= self.frames.len() {
            return Ok(None);
        }
        let end = (self.cursor + self.partition_rows).min(self.frames.len());
        let chunk = LabeledFrames {
            features: self.frames.features.slice_rows(self.cursor, end),
            labels: self.frames.labels[self.cursor..end].to_vec(),
            ids: self.frames.ids[self.cursor..end].to_vec(),
        };
        self.cursor = end;
        Ok(Some(chunk))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_source_partitions_and_resets() {
        let features = Matrix::from_vec(5, 2, (0..10).map(f64::from).collect()).unwrap();
        let frames = LabeledFrames::new(features, vec![0, 1, 2, 3, 4], vec![(0, 0); 5]).unwrap();
        let mut src = MemorySource::with_partition_rows(frames, 2);

        for _ in 0..2 {
            src.start_pass().unwrap();
            let mut seen = Vec::new();
            while let Some(chunk) = src.next_partition().unwrap() {
                seen.extend(chunk.labels);
            }
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
    }
}
