//! Seedable 64-bit counter generator and seed derivation.
//!
//! The generator is SplitMix64: a Weyl counter stepped by the golden-ratio
//! constant, finalized by a 64-bit mixer. Substreams for clips, grid cells and
//! purposes are derived with [`derive_seed`], so work can be split across
//! threads without changing any draw.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Tag for trace-sampling substreams.
pub const TRACE_TAG: u64 = u64::from_le_bytes(*b"trace\0\0\0");
/// Tag for synthetic-data substreams.
pub const SYNTH_TAG: u64 = u64::from_le_bytes(*b"synth\0\0\0");

/// SplitMix64 output finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `parent`, one mixing round per part.
pub fn derive_seed(parent: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(parent), |acc, &p| {
        mix64(acc ^ mix64(p.wrapping_add(GOLDEN_GAMMA)))
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Generator for substream `parts` of `parent`.
    pub fn derive(parent: u64, parts: &[u64]) -> Self {
        Self::new(derive_seed(parent, parts))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `0..n` by rejection, no modulo bias. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal via Box–Muller. Each call consumes two uniforms and
    /// returns the cosine branch.
    pub fn next_normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1]
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
