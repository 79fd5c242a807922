use rand::Rng;

use super::MultimodalDataset;
use crate::error::{Error, Result};
use crate::objectives::PairLabel;
use crate::seed::rng_for;

/// One example of the image-text matching task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffledPair {
    pub image: usize,
    pub text: usize,
    pub label: PairLabel,
}

/// A permutation with no fixed points, drawn with Sattolo's algorithm
/// (a uniformly random single cycle).
pub fn seeded_derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::param(
            "n",
            format!("no derangement exists for {n} items"),
        ));
    }
    let mut rng = rng_for(seed, "pairs/derangement");
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    Ok(perm)
}

/// Every aligned pair `(i, i)` plus one mismatched pair `(sigma(i), i)` per
/// text, where `sigma` is a seeded derangement.
pub fn build_shuffled_pairs(dataset: &MultimodalDataset, seed: u64) -> Result<Vec<ShuffledPair>> {
    let n = dataset.len();
    let sigma = seeded_derangement(n, seed)?;
    let positives = (0..n).map(|i| ShuffledPair {
        image: i,
        text: i,
        label: PairLabel::ALIGNED,
    });
    let negatives = sigma.iter().enumerate().map(|(i, &s)| ShuffledPair {
        image: s,
        text: i,
        label: PairLabel::MISMATCHED,
    });
    Ok(positives.chain(negatives).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_items_swap() {
        assert_eq!(seeded_derangement(2, 0).unwrap(), vec![1, 0]);
        assert!(seeded_derangement(1, 0).is_err());
        assert!(seeded_derangement(0, 0).is_err());
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        for n in 2..40 {
            for seed in 0..5 {
                let p = seeded_derangement(n, seed).unwrap();
                let mut sorted = p.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
                assert!(p.iter().enumerate().all(|(i, &s)| i != s));
            }
        }
    }
}
