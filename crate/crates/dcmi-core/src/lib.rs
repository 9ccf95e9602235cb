//! Domain-aware contrastive knowledge transfer for multi-domain imbalanced
//! learning, on a small from-scratch differentiable text encoder.
//!
//! The pieces, bottom up:
//! - [`autodiff`]: reverse-mode differentiation with gradient gating and
//!   per-parameter gradient transforms.
//! - [`encoder`]: tokenizer, vocabulary, and a mean-pool MLP encoder.
//! - [`model`]: domain masks, gradient compensation, soft domain
//!   assignments, the contrastive transfer objective, and loss routing.
//! - [`data`]: dataset model, JSONL ingestion, splits, down-sampling,
//!   deferred re-sampling, and a synthetic multi-domain generator.
//! - [`eval`]: rank-statistic AUC and macro/micro evaluation.
//! - [`train`]: Adam, the training loop, and the baseline variants.

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod model;
pub mod train;

/// Derive a child seed from a base seed and a stream label.
///
/// Streams keep shared components (encoder init, dropout, batch order)
/// bit-identical across model variants that differ only in extra
/// parameters. FNV-1a + SplitMix64 so the mapping is stable across
/// platforms and releases.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
