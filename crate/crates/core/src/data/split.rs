use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Stratified train/test partition. Each label contributes
/// `round(n * train_fraction)` instances to the training side, clamped so
/// that a label with at least two instances lands on both sides. Both
/// outputs keep the input order.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::precondition(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if dataset.len() < 2 {
        return Err(Error::precondition("split needs at least 2 instances"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; dataset.len()];
    for label in dataset.taxonomy.labels() {
        let mut members: Vec<usize> = dataset
            .instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.label == label)
            .map(|(i, _)| i)
            .collect();
        let n = members.len();
        if n == 0 {
            continue;
        }
        members.shuffle(&mut rng);
        let mut n_train = (n as f64 * train_fraction).round() as usize;
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        }
        for &i in &members[..n_train] {
            in_train[i] = true;
        }
    }
    let pick = |want: bool| {
        dataset
            .instances
            .iter()
            .zip(&in_train)
            .filter(|(_, &t)| t == want)
            .map(|(inst, _)| inst.clone())
            .collect()
    };
    Ok((
        Dataset {
            instances: pick(true),
            taxonomy: dataset.taxonomy.clone(),
        },
        Dataset {
            instances: pick(false),
            taxonomy: dataset.taxonomy.clone(),
        },
    ))
}
