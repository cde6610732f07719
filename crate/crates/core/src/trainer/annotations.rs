//! Majority-vote aggregation of per-sample quality labels in `{0, 1, 2}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub labels: Vec<u8>,
}

impl AnnotationRecord {
    /// Most frequent label; ties go to the lower label.
    pub fn consensus(&self) -> Result<u8> {
        if self.labels.is_empty() {
            return Err(Error::InvalidArgument(format!("sample {} has no labels", self.sample_id)));
        }
        let mut counts = [0usize; LABELS];
        for &l in &self.labels {
            let slot = counts
                .get_mut(l as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {}: label {l} outside 0..=2", self.sample_id)))?;
            *slot += 1;
        }
        let best = *counts.iter().max().expect("nonempty");
        Ok(counts.iter().position(|&c| c == best).expect("max exists") as u8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub total: usize,
    /// Samples per consensus label, indexed by label.
    pub counts: [usize; LABELS],
    /// Fraction per label.
    pub ratios: [f64; LABELS],
    /// Fraction with consensus label ≥ 1.
    pub at_least_one: f64,
}

impl AnnotationSummary {
    /// Percentage for `label`, computed as `100·count / total`.
    pub fn percent(&self, label: usize) -> f64 {
        self.counts[label] as f64 * 100.0 / self.total as f64
    }

    pub fn percent_at_least_one(&self) -> f64 {
        (self.counts[1] + self.counts[2]) as f64 * 100.0 / self.total as f64
    }
}

pub fn aggregate_annotations(records: &[AnnotationRecord]) -> Result<AnnotationSummary> {
    if records.is_empty() {
        return Err(Error::Empty("annotation records"));
    }
    let mut counts = [0usize; LABELS];
    for r in records {
        counts[r.consensus()? as usize] += 1;
    }
    let total = records.len();
    let ratios = counts.map(|c| c as f64 / total as f64);
    Ok(AnnotationSummary {
        total,
        counts,
        ratios,
        at_least_one: (counts[1] + counts[2]) as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(labels: &[u8]) -> AnnotationRecord {
        AnnotationRecord { sample_id: "s".into(), labels: labels.to_vec() }
    }

    #[test]
    fn majority_and_ties() {
        assert_eq!(rec(&[1, 2, 2]).consensus().unwrap(), 2);
        assert_eq!(rec(&[0, 2]).consensus().unwrap(), 0);
        assert_eq!(rec(&[2, 1, 0]).consensus().unwrap(), 0);
        assert_eq!(rec(&[1]).consensus().unwrap(), 1);
        assert!(rec(&[]).consensus().is_err());
        assert!(rec(&[3]).consensus().is_err());
    }

    #[test]
    fn unanimous_records_reproduce_raw_counts() {
        let recs: Vec<_> = [2u8, 2, 1, 0].iter().map(|&l| rec(&[l, l, l])).collect();
        let s = aggregate_annotations(&recs).unwrap();
        assert_eq!(s.counts, [1, 1, 2]);
        assert_eq!(s.ratios, [0.25, 0.25, 0.5]);
        assert!(aggregate_annotations(&[]).is_err());
    }
}
