use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{recent, splitmix64};

/// Keeps the `max` most recent behaviors (the list is oldest first).
pub fn filter_behaviors<T: Clone>(behaviors: &[T], max: usize) -> Vec<T> {
    recent(behaviors, max).to_vec()
}

/// Shuffled index batches for one epoch; the final batch may be short.
pub fn minibatches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(epoch)));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_examples() {
        let short = vec![1, 2, 3];
        assert_eq!(filter_behaviors(&short, 32), short);
        let long: Vec<u32> = (0..200).collect();
        assert_eq!(filter_behaviors(&long, 32), (168..200).collect::<Vec<_>>());
    }

    #[test]
    fn batch_sizes_and_short_tail() {
        let b = minibatches(10, 3, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
    }

    #[test]
    fn same_seed_same_order_other_epoch_differs() {
        assert_eq!(minibatches(50, 7, 3, 2), minibatches(50, 7, 3, 2));
        assert_ne!(minibatches(50, 7, 3, 2), minibatches(50, 7, 3, 3));
    }

    #[test]
    fn epoch_covers_dataset_once() {
        let mut all: Vec<usize> = minibatches(101, 8, 9, 0).concat();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
    }
}
