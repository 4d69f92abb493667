//! Keyed 64-bit mixing primitives shared by the partition functions and the
//! seed-derivation code. The exact bit behaviour is pinned in
//! `docs/partition.md`; changing anything here changes every green list.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer (Stafford variant 13).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Avalanche hash of a key and a 64-bit value.
#[inline]
pub fn keyed_hash(key: u64, value: u64) -> u64 {
    mix64(key ^ mix64(value.wrapping_add(GOLDEN)))
}

/// Counter-based generator: output `i` is `mix64(seed + (i + 1) * GOLDEN)`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Value in `[0, bound)` by 128-bit multiply-high.
    #[inline]
    pub fn below(&mut self, bound: u64) -> u64 {
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Uniform in `[-1, 1)` with 53 bits of precision.
    #[inline]
    pub fn symmetric_unit(&mut self) -> f64 {
        let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        2.0 * u - 1.0
    }
}

/// Derives an independent seed for a named stage from a root seed.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = mix64(root);
    for b in label.bytes() {
        h = keyed_hash(h, b as u64);
    }
    h
}
