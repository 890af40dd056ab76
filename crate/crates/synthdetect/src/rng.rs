//! Deterministic, purpose-keyed random streams.
//!
//! Every random decision in the toolkit draws from an [`RngStream`] derived
//! from `(seed, purpose, epoch, index)`. Identical keys always replay the
//! same sequence; distinct keys yield independent streams. This makes every
//! pipeline a pure function of its top-level seed, no matter how work is
//! scheduled.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the purpose tag so unrelated tags land on unrelated keys.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A counter-based random stream keyed by `(seed, purpose, epoch, index)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    /// Derive the stream for one purpose at one `(epoch, index)` coordinate.
    pub fn derive(seed: u64, purpose: &str, epoch: u64, index: u64) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&tag_hash(purpose).to_le_bytes());
        key[16..24].copy_from_slice(&epoch.to_le_bytes());
        key[24..32].copy_from_slice(&index.to_le_bytes());
        RngStream {
            rng: ChaCha8Rng::from_seed(key),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer draw in `[0, n)` by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller; the paired draw is cached.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z = match self.spare_normal.take() {
            Some(z) => z,
            None => {
                let (u1, u2) = loop {
                    let u1 = self.uniform();
                    if u1 > 0.0 {
                        break (u1, self.uniform());
                    }
                };
                let r = (-2.0 * u1.ln()).sqrt();
                let theta = 2.0 * std::f64::consts::PI * u2;
                self.spare_normal = Some(r * theta.sin());
                r * theta.cos()
            }
        };
        mean + std * z
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Sample `k` distinct indices from `0..n` (order randomized).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} from {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: the first k slots become the sample.
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
