use rand::seq::SliceRandom;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Seeded uniform split into `(train, val)` with `|val| = round(f·N)`.
/// Both parts keep the parent's example order and record parent indices
/// in [`Dataset::origin`].
pub fn split(dataset: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(Error::domain(format!(
            "validation fraction {} outside [0, 1)",
            spec.val_fraction
        )));
    }
    let n = dataset.len();
    let n_val = (spec.val_fraction * n as f64).round() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(spec.seed, Stream::Split, 0));
    let mut val = perm[..n_val].to_vec();
    let mut train = perm[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((dataset.subset(&train)?, dataset.subset(&val)?))
}
