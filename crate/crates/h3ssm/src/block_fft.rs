//! Cooley-Tukey block decomposition of the DFT.
//!
//! For N = N1*N2, F_N factors into permutations, a twiddle diagonal, and
//! block-diagonal applications of the small dense DFT matrices F_N1 and
//! F_N2. The small transforms are executed as explicit dense complex
//! matrix multiplications; that structure (not speed on a CPU) is the
//! point, so it is preserved even though a radix FFT would be cheaper
//! here. Three-factor plans nest: the length-N2*N3 blocks are themselves
//! evaluated by a two-factor plan.

use crate::error::{Error, Result};
use crate::fft::ComplexBuffer;
use crate::flops;

/// Dense DFT matrix of size n (symmetric).
#[derive(Debug, Clone)]
struct DenseDft {
    n: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl DenseDft {
    fn new(n: usize) -> Self {
        let w = -2.0 * std::f64::consts::PI / n as f64;
        let mut re = vec![0.0; n * n];
        let mut im = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                let (s, c) = (w * ((j * k) % n) as f64).sin_cos();
                re[j * n + k] = c;
                im[j * n + k] = s;
            }
        }
        DenseDft { n, re, im }
    }

    /// rows x F_n for `rows` contiguous complex rows of length n.
    fn apply_rows(&self, re: &mut [f64], im: &mut [f64], rows: usize) {
        let n = self.n;
        let mut out_re = vec![0.0; n];
        let mut out_im = vec![0.0; n];
        for r in 0..rows {
            let row_re = &mut re[r * n..(r + 1) * n];
            let row_im = &mut im[r * n..(r + 1) * n];
            out_re.fill(0.0);
            out_im.fill(0.0);
            for j in 0..n {
                let (a, b) = (row_re[j], row_im[j]);
                let f_re = &self.re[j * n..(j + 1) * n];
                let f_im = &self.im[j * n..(j + 1) * n];
                for k in 0..n {
                    out_re[k] += a * f_re[k] - b * f_im[k];
                    out_im[k] += a * f_im[k] + b * f_re[k];
                }
            }
            row_re.copy_from_slice(&out_re);
            row_im.copy_from_slice(&out_im);
        }
        flops::add(4 * (rows * n * n) as u64);
    }
}

#[derive(Debug, Clone)]
enum Stage {
    /// Apply the dense DFT matrix directly.
    Leaf(DenseDft),
    /// n = n1 * rest; three transposes, F_n1 blocks, twiddles, then the
    /// inner stage on length-`rest` rows.
    Split {
        n: usize,
        n1: usize,
        rest: usize,
        f1: DenseDft,
        /// w_N^{j*k1} at index j*n1 + k1 (layout of the transposed array).
        tw_re: Vec<f64>,
        tw_im: Vec<f64>,
        /// [n1][rest] -> [rest][n1]; out[i] = in[perm[i]].
        perm: Vec<usize>,
        /// [rest][n1] -> [n1][rest]; inverse of `perm`.
        perm_inv: Vec<usize>,
        inner: Box<Stage>,
    },
}

impl Stage {
    fn build(factors: &[usize]) -> Stage {
        if factors.len() == 1 {
            return Stage::Leaf(DenseDft::new(factors[0]));
        }
        let n1 = factors[0];
        let rest: usize = factors[1..].iter().product();
        let n = n1 * rest;
        let w = -2.0 * std::f64::consts::PI / n as f64;
        let mut tw_re = vec![0.0; n];
        let mut tw_im = vec![0.0; n];
        for j in 0..rest {
            for k1 in 0..n1 {
                let (s, c) = (w * ((j * k1) % n) as f64).sin_cos();
                tw_re[j * n1 + k1] = c;
                tw_im[j * n1 + k1] = s;
            }
        }
        let mut perm = vec![0usize; n];
        let mut perm_inv = vec![0usize; n];
        for i in 0..n {
            perm[i] = (i % n1) * rest + i / n1;
        }
        for j in 0..n {
            perm_inv[j] = (j % rest) * n1 + j / rest;
        }
        Stage::Split {
            n,
            n1,
            rest,
            f1: DenseDft::new(n1),
            tw_re,
            tw_im,
            perm,
            perm_inv,
            inner: Box::new(Stage::build(&factors[1..])),
        }
    }

    /// Transform `rows` contiguous complex rows of length `self.len()`.
    fn apply_rows(&self, re: &mut [f64], im: &mut [f64], rows: usize) {
        match self {
            Stage::Leaf(f) => f.apply_rows(re, im, rows),
            Stage::Split {
                n,
                n1,
                rest,
                f1,
                tw_re,
                tw_im,
                perm,
                perm_inv,
                inner,
            } => {
                let n = *n;
                let mut s_re = vec![0.0; n];
                let mut s_im = vec![0.0; n];
                for r in 0..rows {
                    let row_re = &mut re[r * n..(r + 1) * n];
                    let row_im = &mut im[r * n..(r + 1) * n];

                    // P: reshape as [n1][rest] and transpose.
                    for i in 0..n {
                        s_re[i] = row_re[perm[i]];
                        s_im[i] = row_im[perm[i]];
                    }
                    // (I_rest x F_n1) on contiguous rows of length n1.
                    f1.apply_rows(&mut s_re, &mut s_im, *rest);
                    // Twiddle diagonal; unit entries need no multiply.
                    let mut twiddled = 0u64;
                    for i in 0..n {
                        let (wr, wi) = (tw_re[i], tw_im[i]);
                        if wr == 1.0 && wi == 0.0 {
                            continue;
                        }
                        let (a, b) = (s_re[i], s_im[i]);
                        s_re[i] = a * wr - b * wi;
                        s_im[i] = a * wi + b * wr;
                        twiddled += 1;
                    }
                    flops::add(4 * twiddled);
                    // P^T back to [n1][rest].
                    for j in 0..n {
                        row_re[j] = s_re[perm_inv[j]];
                        row_im[j] = s_im[perm_inv[j]];
                    }
                    // (I_n1 x F_rest) via the inner stage.
                    inner.apply_rows(row_re, row_im, *n1);
                    // Final P: out[k1 + n1*k2] = v[k1][k2].
                    for i in 0..n {
                        s_re[i] = row_re[perm[i]];
                        s_im[i] = row_im[perm[i]];
                    }
                    row_re.copy_from_slice(&s_re);
                    row_im.copy_from_slice(&s_im);
                }
            }
        }
    }
}

/// Factorized DFT plan. Immutable and shareable after construction.
#[derive(Debug, Clone)]
pub struct BlockFftPlan {
    n: usize,
    factors: Vec<usize>,
    root: Stage,
}

/// Builds a plan for `n` = product(factors), two or three factors, each >= 2.
pub fn make_block_plan(n: usize, factors: &[usize]) -> Result<BlockFftPlan> {
    if !(2..=3).contains(&factors.len()) {
        return Err(Error::Config(format!(
            "block FFT takes two or three factors, got {factors:?}"
        )));
    }
    if factors.iter().any(|&f| f < 2) {
        return Err(Error::Config(format!("factors must be >= 2: {factors:?}")));
    }
    let prod: usize = factors.iter().product();
    if prod != n {
        return Err(Error::Config(format!(
            "factor product {prod} does not match N = {n}"
        )));
    }
    Ok(BlockFftPlan {
        n,
        factors: factors.to_vec(),
        root: Stage::build(factors),
    })
}

impl BlockFftPlan {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    /// Twiddle diagonal of the outermost split (length N).
    pub fn twiddle(&self) -> ComplexBuffer {
        match &self.root {
            Stage::Split { tw_re, tw_im, .. } => ComplexBuffer {
                re: tw_re.clone(),
                im: tw_im.clone(),
            },
            Stage::Leaf(_) => unreachable!("plans always have >= 2 factors"),
        }
    }

    /// Outermost reshape-transpose permutation and its inverse.
    pub fn permutations(&self) -> (Vec<usize>, Vec<usize>) {
        match &self.root {
            Stage::Split { perm, perm_inv, .. } => (perm.clone(), perm_inv.clone()),
            Stage::Leaf(_) => unreachable!("plans always have >= 2 factors"),
        }
    }

    /// Forward transform of a batch laid out as contiguous rows.
    pub fn forward_rows(&self, re: &mut [f64], im: &mut [f64], rows: usize) {
        assert_eq!(re.len(), rows * self.n, "block fft row size mismatch");
        self.root.apply_rows(re, im, rows);
    }

    /// Inverse transform via conj(F(conj(x)))/N.
    pub fn inverse_rows(&self, re: &mut [f64], im: &mut [f64], rows: usize) {
        for v in im.iter_mut() {
            *v = -*v;
        }
        self.root.apply_rows(re, im, rows);
        let inv = 1.0 / self.n as f64;
        for v in re.iter_mut() {
            *v *= inv;
        }
        for v in im.iter_mut() {
            *v = -*v * inv;
        }
    }
}

/// One forward transform through the plan.
pub fn block_fft(x: &ComplexBuffer, plan: &BlockFftPlan) -> Result<ComplexBuffer> {
    if x.len() != plan.n {
        return Err(Error::shape(
            "block_fft",
            format!("input {} vs plan {}", x.len(), plan.n),
        ));
    }
    let mut out = x.clone();
    plan.forward_rows(&mut out.re, &mut out.im, 1);
    Ok(out)
}

/// One inverse transform through the plan.
pub fn block_ifft(x: &ComplexBuffer, plan: &BlockFftPlan) -> Result<ComplexBuffer> {
    if x.len() != plan.n {
        return Err(Error::shape(
            "block_ifft",
            format!("input {} vs plan {}", x.len(), plan.n),
        ));
    }
    let mut out = x.clone();
    plan.inverse_rows(&mut out.re, &mut out.im, 1);
    Ok(out)
}

/// Splits a power-of-two length into 2-3 block factors when it is large
/// enough to decompose; lengths below 4 have no valid plan.
pub fn pow2_factors(n: usize) -> Option<Vec<usize>> {
    if !n.is_power_of_two() || n < 4 {
        return None;
    }
    let p = n.trailing_zeros() as usize;
    let parts = if p <= 2 { 2 } else { 3 };
    let base = p / parts;
    let mut exps = vec![base; parts];
    for e in exps.iter_mut().take(p - base * parts) {
        *e += 1;
    }
    Some(exps.into_iter().map(|e| 1usize << e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::{dft_direct, fft};
    use crate::rng::{Rng, Stream};

    fn random_buffer(n: usize, seed: u64) -> ComplexBuffer {
        let mut rng = Rng::new(seed, Stream::Bench);
        ComplexBuffer {
            re: (0..n).map(|_| rng.normal()).collect(),
            im: (0..n).map(|_| rng.normal()).collect(),
        }
    }

    fn check_against_direct(n: usize, factors: &[usize], seed: u64) {
        let plan = make_block_plan(n, factors).unwrap();
        let x = random_buffer(n, seed);
        let got = block_fft(&x, &plan).unwrap();
        let want = dft_direct(&x);
        let scale = want.re.iter().chain(&want.im).fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(
            got.max_abs_diff(&want) / scale < 1e-10,
            "plan {factors:?} for N={n} disagrees with dft_direct"
        );
    }

    #[test]
    fn impulse_is_all_ones_for_any_plan() {
        for (n, factors) in [(4usize, vec![2, 2]), (16, vec![4, 4]), (8, vec![2, 2, 2])] {
            let plan = make_block_plan(n, &factors).unwrap();
            let mut x = ComplexBuffer::zeros(n);
            x.re[0] = 1.0;
            let out = block_fft(&x, &plan).unwrap();
            for k in 0..n {
                assert!((out.re[k] - 1.0).abs() < 1e-12, "{factors:?} k={k}");
                assert!(out.im[k].abs() < 1e-12, "{factors:?} k={k}");
            }
        }
    }

    #[test]
    fn two_factor_matches_direct() {
        check_against_direct(16, &[4, 4], 1);
        check_against_direct(64, &[8, 8], 2);
        check_against_direct(12, &[3, 4], 3);
        check_against_direct(20, &[5, 4], 4);
    }

    #[test]
    fn three_factor_matches_direct() {
        check_against_direct(64, &[4, 4, 4], 5);
        check_against_direct(512, &[8, 8, 8], 6);
        check_against_direct(30, &[2, 3, 5], 7);
    }

    #[test]
    fn matches_radix_fft_at_512() {
        let plan = make_block_plan(512, &[8, 8, 8]).unwrap();
        let x = random_buffer(512, 8);
        let got = block_fft(&x, &plan).unwrap();
        let want = fft(&x).unwrap();
        let scale = want.re.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(got.max_abs_diff(&want) / scale < 1e-9);
    }

    #[test]
    fn inverse_round_trips() {
        let plan = make_block_plan(64, &[4, 4, 4]).unwrap();
        let x = random_buffer(64, 9);
        let back = block_ifft(&block_fft(&x, &plan).unwrap(), &plan).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn plan_invariants() {
        let plan = make_block_plan(64, &[8, 8]).unwrap();
        let tw = plan.twiddle();
        for i in 0..64 {
            let mag = (tw.re[i] * tw.re[i] + tw.im[i] * tw.im[i]).sqrt();
            assert!((mag - 1.0).abs() < 1e-12);
        }
        let (perm, perm_inv) = plan.permutations();
        let mut seen = vec![false; 64];
        for &p in &perm {
            assert!(!seen[p]);
            seen[p] = true;
        }
        for i in 0..64 {
            assert_eq!(perm[perm_inv[i]], i);
        }
    }

    #[test]
    fn bad_factorizations_are_rejected() {
        assert!(make_block_plan(16, &[4, 3]).is_err());
        assert!(make_block_plan(16, &[16]).is_err());
        assert!(make_block_plan(16, &[2, 2, 2, 2]).is_err());
        assert!(make_block_plan(16, &[1, 16]).is_err());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let plan = make_block_plan(16, &[4, 4]).unwrap();
        let x = ComplexBuffer::zeros(8);
        assert!(block_fft(&x, &plan).is_err());
    }

    #[test]
    fn flop_count_matches_uniform_radix_formula() {
        // For N = r^p the block matmuls cost N*r*p complex MACs (4 real
        // multiply-adds each); twiddles add a few percent.
        for (n, factors) in [
            (64usize, vec![8usize, 8]),
            (512, vec![8, 8, 8]),
            (4096, vec![16, 16, 16]),
        ] {
            let plan = make_block_plan(n, &factors).unwrap();
            let x = random_buffer(n, 10);
            let (_, measured) = flops::measure(|| block_fft(&x, &plan).unwrap());
            let r = factors[0];
            let p = factors.len();
            let formula = 4.0 * (n * r * p) as f64;
            let ratio = measured as f64 / formula;
            assert!(
                (1.0..1.10).contains(&ratio),
                "N={n} r={r}: measured {measured}, formula {formula}, ratio {ratio}"
            );
        }
    }

    #[test]
    fn pow2_factor_helper() {
        assert_eq!(pow2_factors(4), Some(vec![2, 2]));
        assert_eq!(pow2_factors(64), Some(vec![4, 4, 4]));
        assert_eq!(pow2_factors(128), Some(vec![8, 4, 4]));
        assert_eq!(pow2_factors(2), None);
        assert_eq!(pow2_factors(24), None);
        for p in 2..14 {
            let n = 1usize << p;
            let f = pow2_factors(n).unwrap();
            assert_eq!(f.iter().product::<usize>(), n);
            check_against_direct(n.min(1024), &pow2_factors(n.min(1024)).unwrap(), 42);
        }
    }
}
