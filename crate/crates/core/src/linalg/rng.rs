use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Reproducible random stream keyed by `(seed, stream_id)`.
///
/// Backed by the ChaCha8 stream cipher, whose 64-bit stream selector gives
/// independent, non-overlapping sequences for distinct ids. Float conversion
/// and the Gaussian transform are done here so the output never depends on a
/// distribution crate's sampling algorithm.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a structured key (purpose tag, epoch, batch, ...) into one stream id.
pub fn stream_id_for(path: &[u64]) -> u64 {
    path.iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &k| splitmix(acc ^ splitmix(k)))
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
            spare_normal: None,
        }
    }

    /// Stream for a structured key such as `[MASKS, epoch, batch]`.
    pub fn keyed(seed: u64, path: &[u64]) -> Self {
        Self::new(seed, stream_id_for(path))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    pub fn uniform_one(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        let v = lo + (hi - lo) * self.next_f64();
        if v >= hi {
            hi.next_down()
        } else {
            v
        }
    }

    /// `n` draws on `[lo, hi)`; a degenerate interval returns `lo`.
    pub fn uniform(&mut self, n: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::Domain(format!("invalid uniform interval [{lo}, {hi})")));
        }
        Ok((0..n).map(|_| self.uniform_one(lo, hi)).collect())
    }

    pub fn bernoulli_one(&mut self, p_one: f64) -> bool {
        self.next_f64() < p_one
    }

    pub fn bernoulli(&mut self, n: usize, p_one: f64) -> Result<Vec<bool>> {
        if !(0.0..=1.0).contains(&p_one) {
            return Err(Error::Domain(format!("probability {p_one} outside [0, 1]")));
        }
        Ok((0..n).map(|_| self.bernoulli_one(p_one)).collect())
    }

    /// Standard normal via the Box-Muller transform; the second variate is cached.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the logarithm is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussian(&mut self, n: usize, mu: f64, sigma: f64) -> Result<Vec<f64>> {
        if !(sigma >= 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(Error::Domain(format!("invalid normal parameters mu={mu}, sigma={sigma}")));
        }
        Ok((0..n).map(|_| mu + sigma * self.standard_normal()).collect())
    }
}
