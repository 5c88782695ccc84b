//! Bag-of-words hashing for free-text reports.

use std::hash::Hasher;

use fnv::FnvHasher;

/// Default number of hash buckets for report features.
pub const DEFAULT_BUCKETS: usize = 1024;

/// 64-bit FNV-1a of the raw token bytes.
pub fn token_hash(token: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(token.as_bytes());
    h.finish()
}

/// Lowercased alphanumeric tokens of `text`.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Hashed token counts, L2-normalized. Empty text gives the zero vector.
///
/// # Panics
/// If `buckets` is zero.
pub fn hash_text_features(text: &str, buckets: usize) -> Vec<f64> {
    assert!(buckets >= 1, "at least one bucket is required");
    let mut counts = vec![0.0; buckets];
    for token in tokens(text) {
        counts[(token_hash(&token) % buckets as u64) as usize] += 1.0;
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm > 0.0 {
        counts.iter_mut().for_each(|c| *c /= norm);
    }
    counts
}
