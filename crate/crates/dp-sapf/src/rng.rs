//! Seeded RNG substreams.
//!
//! A single root seed fans out into independent, deterministic streams,
//! one per purpose, so a run is reproducible regardless of how work is
//! scheduled. Per-sample streams are keyed by sample index, which keeps
//! the draws of shared samples identical across neighboring datasets.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Purposes for which the pipeline draws randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Dataset synthesis.
    Data = 1,
    /// Model parameter initialization.
    Init = 2,
    /// LoRA adapter initialization.
    AdapterInit = 3,
    /// Per-sample (timestep, noise) draws during the selection pass.
    Selection = 4,
    /// Gaussian noise added to the selection query.
    SelectionNoise = 5,
    /// Poisson batch sampling during training.
    BatchSampling = 6,
    /// Per-sample (timestep, noise) draws during training steps.
    TrainSample = 7,
    /// Gaussian noise added to the aggregated training gradient.
    TrainNoise = 8,
    /// Ancestral sampling of synthetic images.
    ImageSampling = 9,
    /// Random-variant parameter selection.
    RandomSelect = 10,
    /// Replacement values for the noisy variant.
    NoisyVariant = 11,
}

/// A deterministic substream of the root seed.
pub fn substream(seed: u64, stream: Stream) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A substream further keyed by an index (sample, step, or image id).
pub fn substream_indexed(seed: u64, stream: Stream, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Streams are 64-bit; pack the purpose into the high bits.
    rng.set_stream(((stream as u64) << 48) ^ index.wrapping_add(1));
    rng
}
