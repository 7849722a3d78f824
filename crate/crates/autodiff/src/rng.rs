//! Stateless counter-based random numbers.
//!
//! `uniform(i)` depends only on `(key, i)`, so masks can be regenerated in
//! any order and are identical across runs.

#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key: mix(key ^ 0x9e37_79b9_7f4a_7c15) }
    }

    /// Derives an independent stream for a sub-key.
    pub fn fork(&self, sub: u64) -> Self {
        Self::new(self.key ^ mix(sub.wrapping_add(0x632b_e59b_d9b4_e019)))
    }

    pub fn bits(&self, counter: u64) -> u64 {
        mix(self.key.wrapping_add(counter.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&self, counter: u64) -> f64 {
        (self.bits(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}
