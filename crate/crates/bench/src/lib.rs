//! Seeded inputs shared by the kernel benchmarks.

use pni_core::coreset::{kcenter_greedy, DistributionCoreset, EmbeddingCoreset, Provenance, VectorSet};
use pni_core::features::FeatureMap;
use pni_core::map::ScoreMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn vectors(n: usize, dim: usize, seed: u64) -> VectorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VectorSet::new(dim, (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn feature_map(channels: usize, height: usize, width: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::from_fn(channels, height, width, |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap()
}

pub fn score_map(height: usize, width: usize, seed: u64) -> ScoreMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScoreMap::from_fn(height, width, |_, _| rng.random())
}

/// An embedding coreset of `n` random vectors with a greedy distribution
/// coreset of `k` members.
pub fn coresets(n: usize, dim: usize, k: usize, seed: u64) -> (VectorSet, DistributionCoreset) {
    let vectors = vectors(n, dim, seed);
    let emb = EmbeddingCoreset {
        bank_indices: (0..n).collect(),
        provenance: vec![Provenance::default(); n],
        vectors: vectors.clone(),
    };
    let members = kcenter_greedy(&vectors, k, seed, None).unwrap();
    let dist = DistributionCoreset::new(&emb, members).unwrap();
    (vectors, dist)
}
