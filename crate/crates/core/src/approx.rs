//! Reference nonlinearities and their Chebyshev least-squares approximations.
//!
//! A [`ChebyshevSeries`] lives on an interval `[a, b]` and is expressed in the
//! basis `T_0..T_n` of the mapped variable `t = (2x - a - b) / (b - a)`.
//! Fitting uses a deterministic uniform grid over the interval and solves the
//! normal equations of the Chebyshev-basis design matrix. Evaluation outside
//! the interval is the plain polynomial value, never clamped.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sample count of the fitting grid.
pub const DEFAULT_SAMPLES: usize = 10_001;

/// Default ELU slope parameter.
pub const DEFAULT_ELU_ALPHA: f64 = 1.0;

/// The original nonlinearities a network is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Elu {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
}

fn default_alpha() -> f64 {
    DEFAULT_ELU_ALPHA
}

impl ActivationKind {
    pub fn elu() -> Self {
        ActivationKind::Elu {
            alpha: DEFAULT_ELU_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::Elu { alpha } if !(alpha > 0.0 && alpha.is_finite()) => Err(
                Error::InvalidArgument(format!("ELU alpha must be positive, got {alpha}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Elu { .. } => "elu",
        }
    }

    #[inline]
    pub fn activate(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Elu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
        }
    }

    /// Derivative; at the origin both functions take the right-hand branch.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Elu { alpha } => {
                if x >= 0.0 {
                    1.0
                } else {
                    alpha * x.exp()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSeries")]
pub struct ChebyshevSeries {
    degree: usize,
    interval: (f64, f64),
    coeffs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawSeries {
    degree: usize,
    interval: (f64, f64),
    coeffs: Vec<f64>,
}

impl TryFrom<RawSeries> for ChebyshevSeries {
    type Error = Error;

    fn try_from(raw: RawSeries) -> Result<Self> {
        let s = ChebyshevSeries::new(raw.interval, raw.coeffs)?;
        if s.degree != raw.degree {
            return Err(Error::InvalidArgument(format!(
                "series declares degree {} but carries {} coefficients",
                raw.degree,
                s.coeffs.len()
            )));
        }
        Ok(s)
    }
}

impl ChebyshevSeries {
    /// Series with the given Chebyshev coefficients; the degree is
    /// `coeffs.len() - 1`.
    pub fn new(interval: (f64, f64), coeffs: Vec<f64>) -> Result<Self> {
        let (a, b) = interval;
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::DegenerateInterval { a, b });
        }
        if coeffs.is_empty() {
            return Err(Error::InvalidArgument("series needs at least one coefficient".into()));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("chebyshev coefficients".into()));
        }
        Ok(Self {
            degree: coeffs.len() - 1,
            interval,
            coeffs,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    #[inline]
    fn to_unit(&self, x: f64) -> f64 {
        let (a, b) = self.interval;
        (2.0 * x - a - b) / (b - a)
    }

    /// Clenshaw evaluation at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        clenshaw(&self.coeffs, self.to_unit(x))
    }

    /// Analytic derivative with respect to `x`.
    pub fn derivative(&self) -> ChebyshevSeries {
        let n = self.degree;
        let (a, b) = self.interval;
        if n == 0 {
            return ChebyshevSeries {
                degree: 0,
                interval: self.interval,
                coeffs: vec![0.0],
            };
        }
        // d/dt sum c_k T_k(t) expressed in T_0..T_{n-1}
        let mut d = vec![0.0; n + 1];
        for k in (1..=n).rev() {
            d[k - 1] = d.get(k + 1).copied().unwrap_or(0.0) + 2.0 * k as f64 * self.coeffs[k];
        }
        d.truncate(n);
        d[0] *= 0.5;
        let chain = 2.0 / (b - a);
        for c in &mut d {
            *c *= chain;
        }
        ChebyshevSeries {
            degree: n - 1,
            interval: self.interval,
            coeffs: d,
        }
    }

    /// Power-basis coefficients `c_0..c_n` in `x`.
    pub fn to_monomial(&self) -> Vec<f64> {
        let n = self.degree;
        // power-basis coefficients of T_k(t), built by T_{k+1} = 2t T_k - T_{k-1}
        let mut in_t = vec![0.0; n + 1];
        let mut prev = vec![1.0];
        let mut cur = vec![0.0, 1.0];
        in_t[0] += self.coeffs[0];
        if n >= 1 {
            for (dst, &c) in in_t.iter_mut().zip(&cur) {
                *dst += self.coeffs[1] * c;
            }
        }
        for k in 2..=n {
            let mut next = vec![0.0; k + 1];
            for (i, &c) in cur.iter().enumerate() {
                next[i + 1] += 2.0 * c;
            }
            for (i, &c) in prev.iter().enumerate() {
                next[i] -= c;
            }
            for (dst, &c) in in_t.iter_mut().zip(&next) {
                *dst += self.coeffs[k] * c;
            }
            prev = std::mem::replace(&mut cur, next);
        }

        // substitute t = scale*x + shift with Horner on polynomials
        let (a, b) = self.interval;
        let scale = 2.0 / (b - a);
        let shift = -(a + b) / (b - a);
        let mut out = vec![0.0; n + 1];
        for &c in in_t.iter().rev() {
            // out <- out * (scale*x + shift) + c
            let mut next = vec![0.0; n + 1];
            for i in 0..=n {
                if out[i] == 0.0 {
                    continue;
                }
                next[i] += out[i] * shift;
                if i < n {
                    next[i + 1] += out[i] * scale;
                }
            }
            next[0] += c;
            out = next;
        }
        out
    }
}

#[inline]
fn clenshaw(coeffs: &[f64], t: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &c in coeffs.iter().skip(1).rev() {
        let b0 = 2.0 * t * b1 - b2 + c;
        b2 = b1;
        b1 = b0;
    }
    t * b1 - b2 + coeffs[0]
}

/// Evaluates a power-basis polynomial with Horner's rule.
pub fn eval_monomial(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// `count` evenly spaced points from `lo` to `hi`, both included.
pub fn uniform_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (count - 1) as f64;
    (0..count)
        .map(|i| if i + 1 == count { hi } else { lo + step * i as f64 })
        .collect()
}

/// Least-squares Chebyshev fit of an arbitrary function.
pub fn fit_chebyshev_fn(
    f: impl Fn(f64) -> f64,
    degree: usize,
    interval: (f64, f64),
    num_samples: usize,
) -> Result<ChebyshevSeries> {
    let (a, b) = interval;
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::DegenerateInterval { a, b });
    }
    let need = 10 * (degree + 1);
    if num_samples < need {
        return Err(Error::InsufficientSamples {
            degree,
            got: num_samples,
            need,
        });
    }
    let m = degree + 1;
    let mut gram = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    let mut basis = vec![0.0; m];
    for x in uniform_grid(a, b, num_samples) {
        let t = ((2.0 * x - a - b) / (b - a)).clamp(-1.0, 1.0);
        chebyshev_basis(t, &mut basis);
        let y = f(x);
        for i in 0..m {
            rhs[i] += basis[i] * y;
            for j in 0..=i {
                gram[i * m + j] += basis[i] * basis[j];
            }
        }
    }
    for i in 0..m {
        for j in 0..i {
            gram[j * m + i] = gram[i * m + j];
        }
    }
    let coeffs = cholesky_solve(&mut gram, &mut rhs, m)?;
    ChebyshevSeries::new(interval, coeffs)
}

/// Least-squares Chebyshev fit of an activation.
pub fn fit_chebyshev(
    kind: ActivationKind,
    degree: usize,
    interval: (f64, f64),
    num_samples: usize,
) -> Result<ChebyshevSeries> {
    kind.validate()?;
    fit_chebyshev_fn(|x| kind.activate(x), degree, interval, num_samples)
}

fn chebyshev_basis(t: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = t;
    }
    for k in 2..out.len() {
        out[k] = 2.0 * t * out[k - 1] - out[k - 2];
    }
}

/// Solves `A x = b` for a symmetric positive-definite `A` in place.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::InvalidArgument(
                "fitting system is not positive definite".into(),
            ));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    // L y = b
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    // L^T x = y
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Ok(b.to_vec())
}

/// Sum of squared residuals of `series` against `f` on `grid`.
pub fn residual_sum_of_squares(
    series: &ChebyshevSeries,
    f: impl Fn(f64) -> f64,
    grid: &[f64],
) -> f64 {
    grid.iter().map(|&x| (series.eval(x) - f(x)).powi(2)).sum()
}

/// One row of an error profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample {
    pub x: f64,
    pub abs_error: f64,
}

/// Absolute approximation error of `series` against `kind` on an evenly
/// spaced grid, in ascending `x`.
pub fn error_profile(
    series: &ChebyshevSeries,
    kind: ActivationKind,
    grid: (f64, f64, usize),
) -> Result<Vec<ErrorSample>> {
    let (lo, hi, count) = grid;
    if count < 2 || !(lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "profile grid needs lo < hi and at least 2 points, got ({lo}, {hi}, {count})"
        )));
    }
    kind.validate()?;
    Ok(uniform_grid(lo, hi, count)
        .into_iter()
        .map(|x| ErrorSample {
            x,
            abs_error: (series.eval(x) - kind.activate(x)).abs(),
        })
        .collect())
}

/// Largest absolute error over the profile rows with `lo <= x <= hi`.
pub fn max_error_within(profile: &[ErrorSample], lo: f64, hi: f64) -> f64 {
    profile
        .iter()
        .filter(|s| s.x >= lo && s.x <= hi)
        .map(|s| s.abs_error)
        .fold(0.0, f64::max)
}

/// Writes a profile as `x,abs_error` CSV.
pub fn write_profile_csv(profile: &[ErrorSample], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "x,abs_error")?;
    for s in profile {
        writeln!(out, "{:e},{:e}", s.x, s.abs_error)?;
    }
    Ok(())
}
