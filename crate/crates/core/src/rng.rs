//! Counter-based deterministic random numbers.
//!
//! [`CounterRng`] is SplitMix64 viewed as a counter-mode generator: the
//! `n`-th output of a stream keyed by `key` is
//!
//! ```text
//! z = key + (n + 1) * 0x9E3779B97F4A7C15          (wrapping)
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! out = z ^ (z >> 31)
//! ```
//!
//! Floats use the top 53 bits: `u = (out >> 11) * 2^-53`, so `u ∈ [0, 1)`.
//! Gaussians use the Box–Muller cosine branch on two consecutive uniforms
//! `(u1, u2)`: `sqrt(-2 ln(1 - u1)) * cos(2π u2)`.
//!
//! Streams are derived with [`CounterRng::stream`], which keys a child
//! generator by `mix(key ^ mix(stream_id + GAMMA))`. A run owns its streams;
//! nothing is shared between runs.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX2: u64 = 0x94D0_49BB_1331_11EB;

/// The SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX2);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { key: seed, counter: 0 }
    }

    /// Independent child stream; does not advance `self`.
    pub fn stream(&self, stream_id: u64) -> Self {
        Self {
            key: mix64(self.key ^ mix64(stream_id.wrapping_add(GAMMA))),
            counter: 0,
        }
    }

    /// Number of 64-bit words drawn so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, bound)`. Panics if `bound == 0`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "bound must be non-zero");
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Standard normal draw.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
