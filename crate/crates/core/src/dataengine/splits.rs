use std::fmt;

use serde::{Deserialize, Serialize};

use crate::record::{Sample, Split};

use super::ingest::ingest;
use super::manifest::{DatasetManifest, SplitCounts};
use super::DataError;

/// One split whose ingested size differs from the declared size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMismatch {
    pub split: Split,
    pub expected: u64,
    pub actual: u64,
}

impl fmt::Display for SplitMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: expected {}, found {}", self.split, self.expected, self.actual)
    }
}

/// Counts samples per split in one pass. Nothing is retained.
pub fn tally_splits<I>(samples: I) -> Result<SplitCounts, DataError>
where
    I: IntoIterator<Item = Result<Sample, DataError>>,
{
    let mut counts = SplitCounts::default();
    for s in samples {
        counts.add(s?.split, 1);
    }
    Ok(counts)
}

/// Ingests every split of `m` and counts it.
pub fn count_splits(m: &DatasetManifest) -> Result<SplitCounts, DataError> {
    tally_splits(ingest(m)?)
}

/// Exact per-split comparison, in train/valid/test order.
pub fn check_splits(actual: &SplitCounts, expected: &SplitCounts) -> Vec<SplitMismatch> {
    Split::ALL
        .iter()
        .filter(|s| actual.get(**s) != expected.get(**s))
        .map(|&split| SplitMismatch { split, expected: expected.get(split), actual: actual.get(split) })
        .collect()
}
