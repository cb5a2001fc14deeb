//! Discrete state-space models.
//!
//! Two flavors: a shift SSM whose transition matrix is the lower shift
//! (never stored densely; its state is a sliding window of inputs), and a
//! diagonal SSM stored as m/2 conjugate pairs so kernels stay real with
//! half the parameters. Both admit a convolution view (materialize the
//! filter f = [CB, CAB, CA^2B, ...]) and an exact recurrence; the two
//! must agree, and tests enforce it.

use crate::conv;
use crate::error::{Error, Result};
use crate::flops;
use crate::rng::Rng;

/// Materialized length-N convolution filter of an SSM.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmKernel {
    pub f: Vec<f64>,
}

/// Shift SSM: A is the lower shift matrix, B defaults to e_1.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSsm {
    pub m: usize,
    /// None means B fixed to e_1.
    pub b: Option<Vec<f64>>,
    pub c: Vec<f64>,
    pub d: f64,
}

impl ShiftSsm {
    pub fn new(c: Vec<f64>, d: f64) -> Self {
        ShiftSsm {
            m: c.len(),
            b: None,
            c,
            d,
        }
    }

    pub fn with_b(b: Vec<f64>, c: Vec<f64>, d: f64) -> Result<Self> {
        if b.len() != c.len() {
            return Err(Error::shape(
                "shift_ssm",
                format!("B has {} entries, C has {}", b.len(), c.len()),
            ));
        }
        Ok(ShiftSsm {
            m: c.len(),
            b: Some(b),
            c,
            d,
        })
    }

    /// f[k] = C shift^k B = sum_i C[i+k] B[i]; at most m nonzero taps.
    pub fn kernel(&self, n: usize) -> SsmKernel {
        let mut f = vec![0.0; n];
        match &self.b {
            None => {
                let taps = self.m.min(n);
                f[..taps].copy_from_slice(&self.c[..taps]);
            }
            Some(b) => {
                for (k, fk) in f.iter_mut().enumerate().take(self.m.min(n)) {
                    let mut acc = 0.0;
                    for i in 0..self.m - k {
                        acc += self.c[i + k] * b[i];
                    }
                    *fk = acc;
                }
            }
        }
        SsmKernel { f }
    }

    fn b_at(&self, i: usize) -> f64 {
        match &self.b {
            None => {
                if i == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            Some(b) => b[i],
        }
    }
}

/// Diagonal SSM in conjugate-pair storage: m/2 complex modes, kernel
/// f[k] = 2 Re(sum_n C_n Bbar_n Abar_n^k).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagSsm {
    /// Full (even) state size; pairs() = m / 2 stored modes.
    pub m: usize,
    pub a_re: Vec<f64>,
    pub a_im: Vec<f64>,
    pub log_dt: f64,
    pub b_re: Vec<f64>,
    pub b_im: Vec<f64>,
    pub c_re: Vec<f64>,
    pub c_im: Vec<f64>,
    pub d: f64,
}

/// (e^z - 1)/z with a series branch near zero.
pub fn phi1(re: f64, im: f64) -> (f64, f64) {
    let mag = (re * re + im * im).sqrt();
    if mag < 1e-4 {
        // 1 + z/2 + z^2/6 + z^3/24 + z^4/120
        let (mut sr, mut si) = (0.0, 0.0);
        for &inv in &[1.0 / 120.0, 1.0 / 24.0, 1.0 / 6.0, 0.5, 1.0] {
            let (tr, ti) = (sr * re - si * im, sr * im + si * re);
            sr = tr + inv;
            si = ti;
        }
        (sr, si)
    } else {
        let er = re.exp();
        let (num_re, num_im) = (er * im.cos() - 1.0, er * im.sin());
        let den = re * re + im * im;
        (
            (num_re * re + num_im * im) / den,
            (num_im * re - num_re * im) / den,
        )
    }
}

impl DiagSsm {
    pub fn pairs(&self) -> usize {
        self.m / 2
    }

    /// Discretized (Abar, Bbar) under zero-order hold:
    /// Abar = exp(dt a), Bbar = (Abar - 1)/a B = dt phi1(dt a) B.
    pub fn discretize(&self) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let dt = self.log_dt.exp();
        let n = self.pairs();
        let mut abar = Vec::with_capacity(n);
        let mut bbar = Vec::with_capacity(n);
        for i in 0..n {
            let (zr, zi) = (dt * self.a_re[i], dt * self.a_im[i]);
            let er = zr.exp();
            abar.push((er * zi.cos(), er * zi.sin()));
            let (pr, pi) = phi1(zr, zi);
            let (gr, gi) = (dt * pr, dt * pi);
            bbar.push((
                gr * self.b_re[i] - gi * self.b_im[i],
                gr * self.b_im[i] + gi * self.b_re[i],
            ));
        }
        (abar, bbar)
    }

    /// Rebuilds continuous parameters from a discrete (Abar, Bbar) pair
    /// with dt = 1, so explicit constructions (e.g. Abar = 1, Bbar = e_1)
    /// can be expressed exactly.
    pub fn from_discrete(
        abar: &[(f64, f64)],
        bbar: &[(f64, f64)],
        c: &[(f64, f64)],
        d: f64,
    ) -> Result<Self> {
        let n = abar.len();
        if bbar.len() != n || c.len() != n {
            return Err(Error::shape(
                "diag_ssm",
                format!("abar {} / bbar {} / c {}", n, bbar.len(), c.len()),
            ));
        }
        let mut s = DiagSsm {
            m: 2 * n,
            a_re: Vec::with_capacity(n),
            a_im: Vec::with_capacity(n),
            log_dt: 0.0,
            b_re: Vec::with_capacity(n),
            b_im: Vec::with_capacity(n),
            c_re: c.iter().map(|p| p.0).collect(),
            c_im: c.iter().map(|p| p.1).collect(),
            d,
        };
        for i in 0..n {
            let (ar, ai) = abar[i];
            // a = log(abar) with dt = 1
            let mag = (ar * ar + ai * ai).sqrt();
            if mag <= 0.0 {
                return Err(Error::Numeric("Abar = 0 has no continuous log".into()));
            }
            let (zr, zi) = (mag.ln(), ai.atan2(ar));
            s.a_re.push(zr);
            s.a_im.push(zi);
            // Bbar = phi1(a) b  =>  b = Bbar / phi1(a)
            let (pr, pi) = phi1(zr, zi);
            let den = pr * pr + pi * pi;
            let (br, bi) = bbar[i];
            s.b_re.push((br * pr + bi * pi) / den);
            s.b_im.push((bi * pr - br * pi) / den);
        }
        Ok(s)
    }

    /// Kernel f[k] = 2 Re(sum_n C_n Bbar_n Abar_n^k) for k = 0..N.
    pub fn kernel(&self, n: usize) -> Result<SsmKernel> {
        let (abar, bbar) = self.discretize();
        let np = self.pairs();
        // w_n = C_n Bbar_n
        let mut w: Vec<(f64, f64)> = (0..np)
            .map(|i| {
                (
                    self.c_re[i] * bbar[i].0 - self.c_im[i] * bbar[i].1,
                    self.c_re[i] * bbar[i].1 + self.c_im[i] * bbar[i].0,
                )
            })
            .collect();
        let mut f = vec![0.0; n];
        for fk in f.iter_mut() {
            let mut acc = 0.0;
            for i in 0..np {
                acc += w[i].0;
            }
            *fk = 2.0 * acc;
            for i in 0..np {
                let (wr, wi) = w[i];
                let (ar, ai) = abar[i];
                w[i] = (wr * ar - wi * ai, wr * ai + wi * ar);
            }
        }
        flops::add(5 * (n * np) as u64);
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(
                "diagonal SSM kernel overflowed; check a_re <= 0".into(),
            ));
        }
        Ok(SsmKernel { f })
    }
}

/// S4D-Lin initialization: a_n = -1/2 + i pi n over conjugate-pair halves,
/// B = 1, C complex normal, log dt uniform in [ln 1e-3, ln 1e-1].
pub fn s4d_init(m: usize, rng: &mut Rng) -> Result<DiagSsm> {
    if m == 0 || m % 2 != 0 {
        return Err(Error::Config(format!(
            "diagonal state size must be even and positive, got {m}"
        )));
    }
    let np = m / 2;
    Ok(DiagSsm {
        m,
        a_re: vec![-0.5; np],
        a_im: (0..np).map(|n| std::f64::consts::PI * n as f64).collect(),
        log_dt: rng.uniform_range(0.001f64.ln(), 0.1f64.ln()),
        b_re: vec![1.0; np],
        b_im: vec![0.0; np],
        c_re: (0..np).map(|_| rng.normal()).collect(),
        c_im: (0..np).map(|_| rng.normal()).collect(),
        d: rng.normal(),
    })
}

/// Either SSM flavor behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Ssm {
    Shift(ShiftSsm),
    Diag(DiagSsm),
}

/// Recurrent state of either flavor, for chaining across calls.
#[derive(Debug, Clone, PartialEq)]
pub enum SsmState {
    Shift(Vec<f64>),
    /// Complex conjugate-pair state.
    Diag(Vec<(f64, f64)>),
}

impl Ssm {
    pub fn d(&self) -> f64 {
        match self {
            Ssm::Shift(s) => s.d,
            Ssm::Diag(s) => s.d,
        }
    }

    pub fn kernel(&self, n: usize) -> Result<SsmKernel> {
        match self {
            Ssm::Shift(s) => Ok(s.kernel(n)),
            Ssm::Diag(s) => s.kernel(n),
        }
    }

    pub fn zero_state(&self) -> SsmState {
        match self {
            Ssm::Shift(s) => SsmState::Shift(vec![0.0; s.m]),
            Ssm::Diag(s) => SsmState::Diag(vec![(0.0, 0.0); s.pairs()]),
        }
    }
}

/// y = f * u + D u with zero initial state.
pub fn ssm_apply_conv(kernel: &SsmKernel, u: &[f64], d: f64) -> Result<Vec<f64>> {
    let mut y = conv::fft_conv(u, &kernel.f)?;
    for (yi, ui) in y.iter_mut().zip(u) {
        *yi += d * ui;
    }
    flops::add(u.len() as u64);
    Ok(y)
}

/// Exact recurrence x_i = A x_{i-1} + B u_i, y_i = C x_i + D u_i,
/// starting from `x0`; returns the outputs and the final state.
pub fn ssm_apply_recurrent(ssm: &Ssm, u: &[f64], x0: &SsmState) -> Result<(Vec<f64>, SsmState)> {
    match (ssm, x0) {
        (Ssm::Shift(s), SsmState::Shift(x0)) => {
            if x0.len() != s.m {
                return Err(Error::shape(
                    "ssm_apply_recurrent",
                    format!("state {} vs m {}", x0.len(), s.m),
                ));
            }
            let mut x = x0.clone();
            let mut y = Vec::with_capacity(u.len());
            for &ut in u {
                // shift down, inject B u
                for i in (1..s.m).rev() {
                    x[i] = x[i - 1];
                }
                x[0] = 0.0;
                for i in 0..s.m {
                    x[i] += s.b_at(i) * ut;
                }
                let mut out = s.d * ut;
                for i in 0..s.m {
                    out += s.c[i] * x[i];
                }
                y.push(out);
            }
            flops::add((u.len() * 2 * s.m) as u64);
            Ok((y, SsmState::Shift(x)))
        }
        (Ssm::Diag(s), SsmState::Diag(x0)) => {
            if x0.len() != s.pairs() {
                return Err(Error::shape(
                    "ssm_apply_recurrent",
                    format!("state {} vs pairs {}", x0.len(), s.pairs()),
                ));
            }
            let (abar, bbar) = s.discretize();
            let mut x = x0.clone();
            let mut y = Vec::with_capacity(u.len());
            for &ut in u {
                let mut out = s.d * ut;
                for i in 0..s.pairs() {
                    let (xr, xi) = x[i];
                    let (ar, ai) = abar[i];
                    let nr = xr * ar - xi * ai + bbar[i].0 * ut;
                    let ni = xr * ai + xi * ar + bbar[i].1 * ut;
                    x[i] = (nr, ni);
                    out += 2.0 * (s.c_re[i] * nr - s.c_im[i] * ni);
                }
                y.push(out);
            }
            flops::add((u.len() * 8 * s.pairs()) as u64);
            Ok((y, SsmState::Diag(x)))
        }
        _ => Err(Error::Config("state flavor does not match SSM flavor".into())),
    }
}
