//! Deterministic epoch batching.
//!
//! Pretraining uses an epoch-seeded shuffle with drop-last, and every sample
//! carries an augmentation seed derived from (epoch seed, sample index) so
//! batch ordering never changes a sample's augmentation outcome.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{make_views, AugmentParams, ChannelStats, DataError, Result, Split};
use crate::tensor::Tensor;
use crate::util;

/// Epoch-seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, epoch_seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    idx.shuffle(&mut rng);
    idx
}

/// Shuffled index batches with the trailing partial batch dropped.
pub fn pretrain_batches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(DataError::BatchTooLarge { batch: batch_size, available: n });
    }
    let idx = shuffled_indices(n, epoch_seed);
    Ok(idx
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// In-order index batches keeping the partial tail (evaluation order).
pub fn eval_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Augmentation seed of one sample within an epoch.
pub fn sample_seed(epoch_seed: u64, index: usize) -> u64 {
    util::subseed(epoch_seed, index as u64)
}

/// Stacks the two augmented views of every index into a pair of
/// `[B, 3, S, S]` batches. Labels never leave this function: pretraining
/// consumers only ever see pixels.
pub fn make_view_batch(
    split: &Split,
    indices: &[usize],
    p1: &AugmentParams,
    p2: &AugmentParams,
    epoch_seed: u64,
    stats: &ChannelStats,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let b = indices.len();
    let s = p1.crop_size;
    let per = 3 * s * s;
    let mut v1 = vec![0.0f32; b * per];
    let mut v2 = vec![0.0f32; b * per];
    for (row, &i) in indices.iter().enumerate() {
        let pair = make_views(&split.images[i], p1, p2, sample_seed(epoch_seed, i), stats)?;
        v1[row * per..(row + 1) * per].copy_from_slice(pair.x1.values());
        v2[row * per..(row + 1) * per].copy_from_slice(pair.x2.values());
    }
    let dims = [b, 3, s, s];
    Ok((
        Tensor::from_vec(&dims, v1).expect("stacked view shape"),
        Tensor::from_vec(&dims, v2).expect("stacked view shape"),
    ))
}
