//! Synthetic images and the parameterized augmentation pipeline.

mod aug;
mod dataset;

pub use aug::normalize_params;
pub use aug::{apply_aug, param_stats, sample_aug_params, AugConfig, AugParams, ParamStats, AUG_DIM, STD_FLOOR};
pub use dataset::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetSpec, Image, ShapeClass, CHANNELS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Counter-style RNG: every `(seed, epoch, index, view)` tuple gets its own
/// independent stream, so results never depend on iteration order.
pub fn keyed_rng(seed: u64, epoch: u64, index: u64, view: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_exact_mut(8).zip([seed, epoch, index, view]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
