//! Causal convolution via FFT, and its analytic gradients.
//!
//! Both signals are zero-padded to length 2N (rounded up to a power of
//! two) so the circular convolution over the padded length agrees with
//! the causal linear convolution on the first N outputs. Gradients reuse
//! the same transforms through the conjugation identity FFT(x)*[k] =
//! FFT(x)[-k] for real x.

use crate::block_fft::{make_block_plan, pow2_factors, BlockFftPlan};
use crate::error::{Error, Result};
use crate::fft::Radix2;
use crate::flops;

/// Reference O(N^2) causal convolution: y[i] = sum_{j<=i} f[j] u[i-j].
/// The filter may be shorter than the signal; missing taps are zero.
pub fn direct_conv(u: &[f64], f: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; u.len()];
    let mut macs = 0u64;
    for i in 0..u.len() {
        let taps = i.min(f.len().saturating_sub(1));
        let mut acc = 0.0;
        for j in 0..=taps {
            acc += f[j] * u[i - j];
        }
        macs += taps as u64 + 1;
        y[i] = acc;
    }
    flops::add(macs);
    y
}

/// (re, im) halves of a padded-length spectrum.
pub type Spectrum = (Vec<f64>, Vec<f64>);

enum Backend {
    Radix(Radix2),
    Block(BlockFftPlan),
}

/// Transform plan for causal convolutions of a fixed signal length.
pub struct ConvPlan {
    n: usize,
    padded: usize,
}

/// Internal executor holding the chosen transform backend.
pub struct ConvExec {
    plan: ConvPlan,
    backend: Backend,
}

impl ConvPlan {
    fn padded_len(n: usize) -> usize {
        (2 * n).next_power_of_two().max(2)
    }
}

impl ConvExec {
    /// Radix-2 backend.
    pub fn radix(n: usize) -> Result<ConvExec> {
        let padded = ConvPlan::padded_len(n);
        Ok(ConvExec {
            plan: ConvPlan { n, padded },
            backend: Backend::Radix(Radix2::new(padded)?),
        })
    }

    /// Block-FFT backend when the padded length decomposes; falls back to
    /// radix for lengths too short to factor.
    pub fn block(n: usize) -> Result<ConvExec> {
        let padded = ConvPlan::padded_len(n);
        match pow2_factors(padded) {
            Some(factors) => Ok(ConvExec {
                plan: ConvPlan { n, padded },
                backend: Backend::Block(make_block_plan(padded, &factors)?),
            }),
            None => ConvExec::radix(n),
        }
    }

    pub fn signal_len(&self) -> usize {
        self.plan.n
    }

    pub fn padded_len(&self) -> usize {
        self.plan.padded
    }

    fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        match &self.backend {
            Backend::Radix(p) => p.forward(re, im),
            Backend::Block(p) => p.forward_rows(re, im, 1),
        }
    }

    fn inverse(&self, re: &mut [f64], im: &mut [f64]) {
        match &self.backend {
            Backend::Radix(p) => p.inverse(re, im),
            Backend::Block(p) => p.inverse_rows(re, im, 1),
        }
    }

    /// Spectrum of a real signal zero-padded to the plan length.
    pub fn real_spectrum(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert!(x.len() <= self.plan.padded);
        let mut re = vec![0.0; self.plan.padded];
        re[..x.len()].copy_from_slice(x);
        let mut im = vec![0.0; self.plan.padded];
        self.forward(&mut re, &mut im);
        (re, im)
    }

    /// iFFT(a . b), truncated to `out_len` real samples.
    pub fn mul_inverse(
        &self,
        a: (&[f64], &[f64]),
        b: (&[f64], &[f64]),
        out_len: usize,
    ) -> Vec<f64> {
        let p = self.plan.padded;
        let mut re = vec![0.0; p];
        let mut im = vec![0.0; p];
        for i in 0..p {
            re[i] = a.0[i] * b.0[i] - a.1[i] * b.1[i];
            im[i] = a.0[i] * b.1[i] + a.1[i] * b.0[i];
        }
        flops::add(4 * p as u64);
        self.inverse(&mut re, &mut im);
        check_imaginary_residue(&re, &im);
        re.truncate(out_len);
        re
    }

    /// Inverse transform of an explicit spectrum, truncated to `out_len`
    /// real samples.
    pub fn spectrum_inverse_real(&self, mut re: Vec<f64>, mut im: Vec<f64>, out_len: usize) -> Vec<f64> {
        assert_eq!(re.len(), self.plan.padded, "spectrum length mismatch");
        self.inverse(&mut re, &mut im);
        check_imaginary_residue(&re, &im);
        re.truncate(out_len);
        re
    }

    /// iFFT(conj(a) . b), truncated to `out_len` real samples.
    pub fn conj_mul_inverse(
        &self,
        a: (&[f64], &[f64]),
        b: (&[f64], &[f64]),
        out_len: usize,
    ) -> Vec<f64> {
        let p = self.plan.padded;
        let mut re = vec![0.0; p];
        let mut im = vec![0.0; p];
        for i in 0..p {
            re[i] = a.0[i] * b.0[i] + a.1[i] * b.1[i];
            im[i] = a.0[i] * b.1[i] - a.1[i] * b.0[i];
        }
        flops::add(4 * p as u64);
        self.inverse(&mut re, &mut im);
        check_imaginary_residue(&re, &im);
        re.truncate(out_len);
        re
    }
}

/// After the inverse transform of a real convolution the imaginary part
/// must be numerical noise; anything above tolerance is a logic error.
fn check_imaginary_residue(re: &[f64], im: &[f64]) {
    let scale = re.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let residue = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(
        residue <= 1e-8 * scale,
        "imaginary residue {residue:e} exceeds tolerance at scale {scale:e}"
    );
}

/// Causal convolution y[i] = sum_{j<=i} f[j] u[i-j] for equal-length inputs.
pub fn fft_conv(u: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    if u.len() != f.len() {
        return Err(Error::shape(
            "fft_conv",
            format!("u has {} samples, f has {}", u.len(), f.len()),
        ));
    }
    let exec = ConvExec::radix(u.len())?;
    let uf = exec.real_spectrum(u);
    let ff = exec.real_spectrum(f);
    Ok(exec.mul_inverse((&uf.0, &uf.1), (&ff.0, &ff.1), u.len()))
}

/// Same convolution driven by an explicit executor (radix or block).
pub fn fft_conv_with(exec: &ConvExec, u: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    if u.len() != f.len() || u.len() != exec.signal_len() {
        return Err(Error::shape(
            "fft_conv",
            format!(
                "u {} / f {} vs plan {}",
                u.len(),
                f.len(),
                exec.signal_len()
            ),
        ));
    }
    let uf = exec.real_spectrum(u);
    let ff = exec.real_spectrum(f);
    Ok(exec.mul_inverse((&uf.0, &uf.1), (&ff.0, &ff.1), u.len()))
}

/// Gradients of y = fft_conv(u, f) + D u under upstream dy:
/// df = iFFT(conj(FFT(u')) FFT(dy'))[:N],
/// du = iFFT(conj(FFT(f')) FFT(dy'))[:N] + D dy,
/// dD = sum_i dy_i u_i.
pub fn fft_conv_grad(u: &[f64], f: &[f64], dy: &[f64], d: f64) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let n = u.len();
    if f.len() != n || dy.len() != n {
        return Err(Error::shape(
            "fft_conv_grad",
            format!("u {} / f {} / dy {}", n, f.len(), dy.len()),
        ));
    }
    let exec = ConvExec::radix(n)?;
    let uf = exec.real_spectrum(u);
    let ff = exec.real_spectrum(f);
    let dyf = exec.real_spectrum(dy);
    let df = exec.conj_mul_inverse((&uf.0, &uf.1), (&dyf.0, &dyf.1), n);
    let mut du = exec.conj_mul_inverse((&ff.0, &ff.1), (&dyf.0, &dyf.1), n);
    for i in 0..n {
        du[i] += d * dy[i];
    }
    let dd: f64 = u.iter().zip(dy).map(|(a, b)| a * b).sum();
    flops::add(3 * n as u64);
    Ok((du, df, dd))
}
