//! Fixed-length training windows over sequences.

use super::Sequence;

/// Frames `start..start + len` of `sequences[sequence]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingSample {
    pub sequence: usize,
    pub start: usize,
    pub len: usize,
}

impl TrainingSample {
    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Every window of `sample_len` consecutive frames, stride one. Sequences
/// shorter than a window are skipped with a warning.
pub fn make_training_samples(sequences: &[Sequence], sample_len: usize) -> Vec<TrainingSample> {
    let mut out = Vec::new();
    for (i, s) in sequences.iter().enumerate() {
        if sample_len == 0 || s.len() < sample_len {
            log::warn!(
                "skipping sequence {} ({} frames < {sample_len})",
                s.id,
                s.len()
            );
            continue;
        }
        out.extend((0..=s.len() - sample_len).map(|start| TrainingSample {
            sequence: i,
            start,
            len: sample_len,
        }));
    }
    out
}
