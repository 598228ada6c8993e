//! Word error rate.

use crate::error::{Error, Result};

/// Minimum number of substitutions, deletions and insertions turning `a`
/// into `b`.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

/// Edit distance over the reference length, as a fraction (can exceed 1).
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric("WER of an empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Accumulates errors and reference words for corpus-level WER.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorCount {
    pub errors: usize,
    pub words: usize,
}

impl ErrorCount {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) {
        self.errors += edit_distance(reference, hypothesis);
        self.words += reference.len();
    }

    pub fn wer(&self) -> Result<f64> {
        if self.words == 0 {
            return Err(Error::UndefinedMetric("WER over zero reference words".into()));
        }
        Ok(self.errors as f64 / self.words as f64)
    }
}
