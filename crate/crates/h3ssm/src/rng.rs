//! Counter-based pseudo-random generator.
//!
//! Output i of a stream is `mix64(key + i * GOLDEN)` where `mix64` is the
//! SplitMix64 finalizer and `key` is derived from the user seed and a
//! stream tag. Streams are independent by construction, so e.g. adding a
//! baseline model (which draws from the init stream) cannot perturb task
//! data (drawn from the data stream).

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Purpose tag selecting an independent stream for a given seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Model parameter initialization.
    Init,
    /// Task/dataset generation.
    Data,
    /// Per-epoch batch shuffling.
    Shuffle,
    /// Dropout masks.
    Dropout,
    /// Benchmark inputs.
    Bench,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x11,
            Stream::Data => 0x22,
            Stream::Shuffle => 0x33,
            Stream::Dropout => 0x44,
            Stream::Bench => 0x55,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    ctr: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        // Two mixing rounds decorrelate nearby seeds across streams.
        let key = mix64(mix64(seed ^ GOLDEN).wrapping_add(stream.tag().wrapping_mul(GOLDEN)));
        Rng {
            key,
            ctr: 0,
            spare_normal: None,
        }
    }

    /// A child stream, e.g. one per epoch, independent of the parent position.
    pub fn substream(&self, index: u64) -> Rng {
        Rng {
            key: mix64(self.key ^ mix64(index.wrapping_mul(GOLDEN) ^ 0xd6e8_feb8_6659_fd93)),
            ctr: 0,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.ctr.wrapping_mul(GOLDEN)));
        self.ctr += 1;
        out
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n) without modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        loop {
            let u1 = self.uniform();
            if u1 <= f64::MIN_POSITIVE {
                continue;
            }
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            self.spare_normal = Some(r * theta.sin());
            return r * theta.cos();
        }
    }

    pub fn normal_scaled(&mut self, std: f64) -> f64 {
        self.normal() * std
    }

    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i + 1);
            slice.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed_and_stream() {
        let mut a = Rng::new(7, Stream::Data);
        let mut b = Rng::new(7, Stream::Data);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(7, Stream::Init);
        let first_data = Rng::new(7, Stream::Data).next_u64();
        assert_ne!(c.next_u64(), first_data);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::new(3, Stream::Bench);
        for _ in 0..10_000 {
            let v = r.uniform();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn below_is_unbiased_enough() {
        let mut r = Rng::new(11, Stream::Shuffle);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[r.below(5)] += 1;
        }
        for &c in &counts {
            assert!((c as f64 - 10_000.0).abs() < 600.0, "counts {counts:?}");
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(5, Stream::Init);
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let v = r.normal();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
