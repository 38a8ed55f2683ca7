//! The reference pseudo-random stream.
//!
//! splitmix64 drives everything: integers in `[0, m)` use rejection
//! sampling, floats use the top 53 bits, geometric widths use the inverse
//! CDF on one uniform draw. The recipe is fixed so sampled masks are
//! reproducible from `(seed, n, lambda)` alone.

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `[0, m)`.
    pub fn below(&mut self, m: u64) -> u64 {
        assert!(m > 0, "empty range");
        let limit = u64::MAX - u64::MAX % m;
        loop {
            let x = self.next_u64();
            if x < limit {
                return x % m;
            }
        }
    }

    /// Uniform float in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Geometric on `{1, 2, ...}` with the given mean (success probability `1/mean`).
    pub fn geometric(&mut self, mean: f64) -> u64 {
        let u = self.next_f64();
        let p = 1.0 / mean;
        if p >= 1.0 {
            return 1;
        }
        1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as u64
    }

    /// Standard normal via Box-Muller (one value per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Mixes several stream coordinates (seed, utterance, epoch, ...) into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| {
        SplitMix64::new(acc ^ p).next_u64()
    })
}

/// 64-bit FNV-1a, used to turn utterance ids and tensor names into stream coordinates.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}
