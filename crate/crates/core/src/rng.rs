//! Seeded, platform-independent pseudorandom generator.
//!
//! The core stream is SplitMix64 (Steele, Lea & Flood 2014): a 64-bit counter
//! advanced by the golden-ratio increment and scrambled by two xor-multiply
//! rounds. Every derived draw is defined in terms of that stream with IEEE-754
//! basic operations only (`+ - * /`, `sqrt`, comparisons), so a given seed
//! produces bit-identical sequences on every platform.
//!
//! Stream contract:
//! - `next_u64` advances the state exactly once.
//! - `next_f64` consumes one `next_u64` and returns `(x >> 11) * 2^-53`,
//!   uniform on [0, 1).
//! - `uniform(lo, hi)` consumes one `next_u64`.
//! - `normal` consumes a seed-determined number of `next_u64` draws (two per
//!   Marsaglia polar rejection round) and discards the second variate of the
//!   accepted pair.
//!
//! An `Rng` is single-owner: concurrent use of one instance is forbidden by
//! contract (it is `Send` but deliberately not shared behind locks here).

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN: u64 = 0x9E3779B97F4A7C15;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Deterministic sub-stream seed for a pipeline stage: the parent seed is
    /// xored with an FNV-1a hash of the stage tag and scrambled once.
    pub fn derive(seed: u64, tag: &str) -> u64 {
        splitmix(seed ^ fnv1a64(tag.as_bytes()))
    }

    pub fn substream(&self, tag: &str) -> Rng {
        Rng::new(Self::derive(self.state, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        splitmix(self.state)
    }

    /// Uniform on [0, 1) with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is below 2^-53 for the sizes used here.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via the Marsaglia polar method. Uses [`det_ln`] instead
    /// of the platform `ln` so the draw is bit-identical across platforms.
    pub fn normal(&mut self) -> f64 {
        loop {
            let x = self.uniform(-1.0, 1.0);
            let y = self.uniform(-1.0, 1.0);
            let s = x * x + y * y;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * det_ln(s) / s).sqrt();
                return x * f;
            }
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64], sigma: f64) {
        for v in out.iter_mut() {
            *v = sigma * self.normal();
        }
    }
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Natural logarithm built from IEEE basic operations only.
///
/// Decomposes x = m * 2^e with m in [sqrt(1/2), sqrt(2)), then evaluates
/// ln(m) = 2 * atanh((m-1)/(m+1)) by its odd power series. The reduced
/// argument satisfies |(m-1)/(m+1)| <= 0.1716, so eleven terms bound the
/// truncation error below 1e-17 relative.
pub fn det_ln(x: f64) -> f64 {
    assert!(x > 0.0 && x.is_finite(), "det_ln domain");
    const LN2: f64 = std::f64::consts::LN_2;
    let bits = x.to_bits();
    let mut exp = ((bits >> 52) & 0x7FF) as i64 - 1023;
    let mut mant = f64::from_bits((bits & 0x000F_FFFF_FFFF_FFFF) | 0x3FF0_0000_0000_0000);
    // Subnormals: renormalize by scaling up 2^52.
    if exp == -1023 {
        let scaled = x * (1u64 << 52) as f64;
        let sb = scaled.to_bits();
        exp = ((sb >> 52) & 0x7FF) as i64 - 1023 - 52;
        mant = f64::from_bits((sb & 0x000F_FFFF_FFFF_FFFF) | 0x3FF0_0000_0000_0000);
    }
    // Shift mantissa into [sqrt(1/2), sqrt(2)).
    if mant > std::f64::consts::SQRT_2 {
        mant *= 0.5;
        exp += 1;
    }
    let s = (mant - 1.0) / (mant + 1.0);
    let s2 = s * s;
    let mut term = s;
    let mut sum = 0.0;
    for k in 0..11 {
        sum += term / (2 * k + 1) as f64;
        term *= s2;
    }
    exp as f64 * LN2 + 2.0 * sum
}
