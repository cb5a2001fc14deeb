//! Discrete Fourier transforms: an O(N^2) direct evaluation used as the
//! correctness oracle, and an iterative radix-2 FFT for power-of-two sizes.
//! Composite sizes go through `block_fft`.

use crate::error::{Error, Result};
use crate::flops;

/// Split-storage complex vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexBuffer {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexBuffer {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::shape(
                "complex",
                format!("re {} vs im {}", re.len(), im.len()),
            ));
        }
        Ok(ComplexBuffer { re, im })
    }

    pub fn zeros(n: usize) -> Self {
        ComplexBuffer {
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn from_real(x: &[f64]) -> Self {
        ComplexBuffer {
            re: x.to_vec(),
            im: vec![0.0; x.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn max_abs_diff(&self, other: &ComplexBuffer) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.len() {
            m = m.max((self.re[i] - other.re[i]).abs());
            m = m.max((self.im[i] - other.im[i]).abs());
        }
        m
    }
}

/// X[k] = sum_j x[j] exp(-2 pi i j k / N), by the definition.
pub fn dft_direct(x: &ComplexBuffer) -> ComplexBuffer {
    let n = x.len();
    let mut out = ComplexBuffer::zeros(n);
    let w = -2.0 * std::f64::consts::PI / n as f64;
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for j in 0..n {
            // exp(i * w * j * k); reduce j*k mod n to keep the angle small
            let ang = w * ((j * k) % n) as f64;
            let (s, c) = ang.sin_cos();
            sr += x.re[j] * c - x.im[j] * s;
            si += x.re[j] * s + x.im[j] * c;
        }
        out.re[k] = sr;
        out.im[k] = si;
    }
    flops::add(4 * (n * n) as u64);
    out
}

/// Inverse of `dft_direct`, by the definition (conjugate kernel, 1/N).
pub fn idft_direct(x: &ComplexBuffer) -> ComplexBuffer {
    let n = x.len();
    let mut out = ComplexBuffer::zeros(n);
    let w = 2.0 * std::f64::consts::PI / n as f64;
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for j in 0..n {
            let ang = w * ((j * k) % n) as f64;
            let (s, c) = ang.sin_cos();
            sr += x.re[j] * c - x.im[j] * s;
            si += x.re[j] * s + x.im[j] * c;
        }
        out.re[k] = sr / n as f64;
        out.im[k] = si / n as f64;
    }
    flops::add(4 * (n * n) as u64);
    out
}

/// Precomputed radix-2 machinery for one power-of-two size, reusable
/// across many transforms of that size.
#[derive(Debug, Clone)]
pub struct Radix2 {
    n: usize,
    // twiddles for each stage, forward sign; stage s uses entries
    // [tw_off[s] .. tw_off[s] + half) with half = 2^s
    tw_re: Vec<f64>,
    tw_im: Vec<f64>,
    tw_off: Vec<usize>,
    rev: Vec<u32>,
}

impl Radix2 {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Config(format!(
                "radix-2 FFT needs a power-of-two length, got {n}"
            )));
        }
        let stages = n.trailing_zeros() as usize;
        let mut tw_re = Vec::with_capacity(n.max(1));
        let mut tw_im = Vec::with_capacity(n.max(1));
        let mut tw_off = Vec::with_capacity(stages);
        for s in 0..stages {
            let half = 1usize << s;
            tw_off.push(tw_re.len());
            let step = -std::f64::consts::PI / half as f64;
            for j in 0..half {
                let (sin, cos) = (step * j as f64).sin_cos();
                tw_re.push(cos);
                tw_im.push(sin);
            }
        }
        let bits = stages as u32;
        let rev = (0..n as u32)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (32 - bits) })
            .collect();
        Ok(Radix2 {
            n,
            tw_re,
            tw_im,
            tw_off,
            rev,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn transform(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.n;
        assert_eq!(re.len(), n, "fft length mismatch");
        assert_eq!(im.len(), n, "fft length mismatch");
        for i in 0..n {
            let j = self.rev[i] as usize;
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let stages = n.trailing_zeros() as usize;
        for s in 0..stages {
            let half = 1usize << s;
            let span = half << 1;
            let off = self.tw_off[s];
            let mut base = 0;
            while base < n {
                for j in 0..half {
                    let wr = self.tw_re[off + j];
                    let wi = if inverse {
                        -self.tw_im[off + j]
                    } else {
                        self.tw_im[off + j]
                    };
                    let a = base + j;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
                base += span;
            }
        }
        if inverse {
            let inv = 1.0 / n as f64;
            for v in re.iter_mut() {
                *v *= inv;
            }
            for v in im.iter_mut() {
                *v *= inv;
            }
        }
        // one complex mul-add per butterfly
        flops::add(4 * (n as u64 / 2) * stages as u64);
    }

    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        self.transform(re, im, false);
    }

    pub fn inverse(&self, re: &mut [f64], im: &mut [f64]) {
        self.transform(re, im, true);
    }
}

/// O(N log N) FFT for power-of-two N.
pub fn fft(x: &ComplexBuffer) -> Result<ComplexBuffer> {
    let plan = Radix2::new(x.len())?;
    let mut out = x.clone();
    plan.forward(&mut out.re, &mut out.im);
    Ok(out)
}

/// Inverse FFT (scales by 1/N).
pub fn ifft(x: &ComplexBuffer) -> Result<ComplexBuffer> {
    let plan = Radix2::new(x.len())?;
    let mut out = x.clone();
    plan.inverse(&mut out.re, &mut out.im);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, Stream};

    fn random_buffer(n: usize, seed: u64) -> ComplexBuffer {
        let mut rng = Rng::new(seed, Stream::Bench);
        ComplexBuffer {
            re: (0..n).map(|_| rng.normal()).collect(),
            im: (0..n).map(|_| rng.normal()).collect(),
        }
    }

    #[test]
    fn impulse_transforms_to_all_ones() {
        let mut x = ComplexBuffer::zeros(4);
        x.re[0] = 1.0;
        let direct = dft_direct(&x);
        let fast = fft(&x).unwrap();
        for k in 0..4 {
            assert!((direct.re[k] - 1.0).abs() < 1e-12);
            assert!(direct.im[k].abs() < 1e-12);
            assert!((fast.re[k] - 1.0).abs() < 1e-12);
            assert!(fast.im[k].abs() < 1e-12);
        }
    }

    #[test]
    fn constant_transforms_to_spike() {
        let c = 0.7;
        let n = 8;
        let x = ComplexBuffer::from_real(&vec![c; n]);
        let direct = dft_direct(&x);
        assert!((direct.re[0] - n as f64 * c).abs() < 1e-10);
        for k in 1..n {
            assert!(direct.re[k].abs() < 1e-10, "k={k}");
            assert!(direct.im[k].abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn direct_inverse_recovers_input() {
        let x = random_buffer(8, 3);
        let back = idft_direct(&dft_direct(&x));
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn fft_matches_direct_oracle() {
        let x = random_buffer(64, 5);
        let fast = fft(&x).unwrap();
        let direct = dft_direct(&x);
        let scale = direct.re.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(fast.max_abs_diff(&direct) / scale < 1e-10);
    }

    #[test]
    fn ifft_inverts_fft() {
        let x = random_buffer(128, 7);
        let back = ifft(&fft(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn parseval_identity_holds() {
        let x = random_buffer(64, 11);
        let spec = fft(&x).unwrap();
        let t: f64 = (0..64).map(|i| x.re[i] * x.re[i] + x.im[i] * x.im[i]).sum();
        let f: f64 = (0..64)
            .map(|i| spec.re[i] * spec.re[i] + spec.im[i] * spec.im[i])
            .sum();
        assert!((t - f / 64.0).abs() < 1e-10 * t.max(1.0));
    }

    #[test]
    fn conjugate_reversal_for_real_input() {
        // For real x: FFT(x)*[k] == FFT(x)[N-k mod N]
        let mut rng = Rng::new(13, Stream::Bench);
        let x = ComplexBuffer::from_real(&(0..32).map(|_| rng.normal()).collect::<Vec<_>>());
        let spec = fft(&x).unwrap();
        for k in 0..32 {
            let j = (32 - k) % 32;
            assert!((spec.re[k] - spec.re[j]).abs() < 1e-10);
            assert!((spec.im[k] + spec.im[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn non_power_of_two_is_rejected() {
        let x = ComplexBuffer::zeros(12);
        assert!(fft(&x).is_err());
    }
}
