use rand::seq::SliceRandom;
use rand::Rng;

/// Shuffled minibatches covering `0..n` once. A trailing batch of a single
/// sample is merged into the previous one so every batch has BN-valid size.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    chunk(order, batch_size)
}

pub fn chunk(order: Vec<usize>, batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn covers_every_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(21, 4, &mut rng);
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..21).collect::<Vec<_>>());
        assert_eq!(b.last().unwrap().len(), 5);
        assert!(b.iter().all(|x| x.len() >= 2));
    }
}
