//! Seeded randomness for splits, shuffles, and weight init. Everything routes
//! through one 64-bit mixer so runs are reproducible bit-for-bit across
//! platforms without pulling in an external RNG.

/// Stafford-mix generator with a golden-ratio increment. One `u64` of state,
/// full 64-bit output per step.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Independent stream for a named consumer. Derivation hashes the tag with
    /// FNV-1a and folds in the base seed, so adding or removing one consumer
    /// never shifts the stream another consumer sees.
    pub fn for_tag(seed: u64, tag: &str) -> Self {
        let mut h: u64 = 0xCBF29CE484222325;
        for b in tag.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001B3);
        }
        let mut boot = SplitMix64::new(seed ^ h);
        let derived = boot.next_u64();
        SplitMix64::new(derived)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in (0, 1]; never exactly zero so it is safe under `ln`.
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (self.next_f64() - f64::EPSILON).max(0.0)
    }

    /// Uniform integer in [0, bound). Modulo reduction; the bias at these bound
    /// sizes is far below anything observable and keeps the draw one-step.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below(0)");
        self.next_u64() % bound
    }

    /// Standard normal via Box-Muller, two uniforms per draw, no cached spare.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// In-place Fisher-Yates walking the index down from the top. Each position i
/// swaps with a draw from [0, i], so every permutation is reachable and the
/// result is a pure function of the seed stream.
pub fn shuffle<T>(v: &mut [T], rng: &mut SplitMix64) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        v.swap(i, j);
    }
}
