use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Every batch is full; the short tail is dropped.
    Contrastive,
    /// The short tail is kept.
    Keep,
}

/// Index batches for one epoch. The order is a seeded shuffle of `0..len`
/// that depends only on `(seed, epoch)`.
pub fn epoch_batches(
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    mode: BatchMode,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || (mode == BatchMode::Contrastive && batch_size < 2) {
        return Err(Error::Config(format!(
            "batch size {batch_size} is too small for {mode:?} batching"
        )));
    }
    if batch_size > len {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds dataset size {len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if mode == BatchMode::Contrastive && batches.last().is_some_and(|b| b.len() < batch_size) {
        batches.pop();
    }
    Ok(batches)
}
