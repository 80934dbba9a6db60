//! Train/test partitioning of the observed units.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ArealDataset;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Split the units with observed targets into disjoint train and test sets.
/// Units with missing targets belong to neither side. The train size is the
/// rounded `train_fraction · n_observed` (clamped so both sides are
/// nonempty), and the partition is deterministic in the seed.
pub fn train_test_split<T: Real>(
    ds: &ArealDataset<T>,
    train_fraction: f64,
    seed: u64,
) -> Result<(ArealDataset<T>, ArealDataset<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let observed = ds.observed_indices();
    let n = observed.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 observed units to split, found {n}"
        )));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = observed;
    shuffled.shuffle(&mut rng);
    let mut train_idx: Vec<usize> = shuffled[..n_train].to_vec();
    let mut test_idx: Vec<usize> = shuffled[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}
