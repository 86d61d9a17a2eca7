//! Small deterministic PRNG used for every random decision in the toolkit.
//!
//! The generator is SplitMix64: a 64-bit counter advanced by the golden-ratio
//! increment and passed through a fixed finalizer. It is trivially portable,
//! so splits, shuffles, masks and initializations can be reproduced by any
//! implementation that follows the same stream rules.
//!
//! # Stream splitting
//!
//! One user-visible seed fans out into independent streams with
//! [`derive_seed`]: `derive_seed(root, tag) = mix(root ^ mix(tag + GOLDEN))`.
//! Tags used by the toolkit are listed in [`streams`].

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of an independent child stream.
pub fn derive_seed(root: u64, tag: u64) -> u64 {
    mix(root ^ mix(tag.wrapping_add(GOLDEN)))
}

/// Stream tags. Per-fold streams add the fold index to the base tag.
pub mod streams {
    pub const SPLIT: u64 = 0x5350_4C49_5400_0000;
    pub const FOLD_INIT: u64 = 0x494E_4954_0000_0000;
    pub const FOLD_SHUFFLE: u64 = 0x5348_5546_0000_0000;
    pub const FOLD_DROPOUT: u64 = 0x4452_4F50_0000_0000;
    pub const PAIR_SAMPLING: u64 = 0x5041_4952_0000_0000;
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[low, high)`.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    /// Unbiased integer in `[0, bound)` by rejection sampling.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % bound;
            }
        }
    }

    /// Fisher-Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
