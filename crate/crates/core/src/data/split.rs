use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::types::AlignedSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<AlignedSample>,
    pub valid: Vec<AlignedSample>,
    pub test: Vec<AlignedSample>,
}

/// Seeded shuffle followed by a train/valid/test cut at `ratios`
/// (normalised to sum to one).
pub fn split(dataset: &[AlignedSample], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if dataset.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || !(total > 0.0) {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let n = dataset.len();
    let n_train = ((ratios[0] / total) * n as f64).round() as usize;
    let n_valid = (((ratios[1] / total) * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect();
    Ok(Split {
        train: pick(&order[..n_train]),
        valid: pick(&order[n_train..n_train + n_valid]),
        test: pick(&order[n_train + n_valid..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use std::collections::HashSet;

    fn data(n: usize) -> Vec<AlignedSample> {
        synth_generate(&SynthSpec { samples: n, seed: 3, ..Default::default() }).unwrap()
    }

    #[test]
    fn ten_samples_split_eight_one_one() {
        let s = split(&data(10), [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn partition_and_determinism() {
        let d = data(37);
        let a = split(&d, [0.8, 0.1, 0.1], 5).unwrap();
        let b = split(&d, [0.8, 0.1, 0.1], 5).unwrap();
        let ids = |v: &[AlignedSample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.train), ids(&b.train));
        let all: Vec<String> = [ids(&a.train), ids(&a.valid), ids(&a.test)].concat();
        let set: HashSet<_> = all.iter().collect();
        assert_eq!(all.len(), 37);
        assert_eq!(set.len(), 37);
        for (got, frac) in [(a.train.len(), 0.8), (a.valid.len(), 0.1), (a.test.len(), 0.1)] {
            assert!((got as f64 - frac * 37.0).abs() <= 1.0);
        }
    }

    #[test]
    fn empty_is_an_error() {
        assert!(split(&[], [0.8, 0.1, 0.1], 0).is_err());
    }
}
