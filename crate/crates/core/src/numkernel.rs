//! Scalar and vector numerical primitives.
//!
//! Robust univariate estimators (median, MAD, weighted median, tau-scale),
//! normal and chi-squared quantiles, and the leading singular triple used by
//! the deflation loops.

use nalgebra::DMatrix;
use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{invalid, CrtbError, Result};

/// Gaussian consistency factor of the median absolute deviation.
pub const MAD_CONSISTENCY: f64 = 1.4826;

/// Tuning constant of the tau-scale rho function.
pub const TAU_C: f64 = 3.0;

/// Column scale estimator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobustScaleKind {
    Std,
    Mad,
    Tau2,
}

/// Column location estimator family.
///
/// Column-wise, the spatial (l1) median coincides with the univariate
/// median, so `Median` also covers that choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationKind {
    Mean,
    Median,
}

impl std::str::FromStr for RobustScaleKind {
    type Err = CrtbError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "std" => Ok(Self::Std),
            "mad" => Ok(Self::Mad),
            "tau2" | "tau" => Ok(Self::Tau2),
            other => Err(invalid(format!("unknown scale kind '{other}'"))),
        }
    }
}

impl std::str::FromStr for LocationKind {
    type Err = CrtbError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "median" | "l1median" => Ok(Self::Median),
            other => Err(invalid(format!("unknown location kind '{other}'"))),
        }
    }
}

fn require_nonempty(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(invalid(format!("{what} of an empty vector")));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

pub fn mean(v: &[f64]) -> Result<f64> {
    require_nonempty(v, "mean")?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Sample standard deviation with divisor `n - 1` (0 for a singleton).
pub fn std_dev(v: &[f64]) -> Result<f64> {
    let m = mean(v)?;
    if v.len() < 2 {
        return Ok(0.0);
    }
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    Ok((ss / (v.len() - 1) as f64).sqrt())
}

/// Median; even lengths average the two central order statistics.
pub fn median(v: &[f64]) -> Result<f64> {
    require_nonempty(v, "median")?;
    let s = sorted(v);
    let n = s.len();
    Ok(if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    })
}

/// Consistency-scaled median absolute deviation. Returns 0 for constant input.
pub fn mad(v: &[f64]) -> Result<f64> {
    let m = median(v)?;
    let dev: Vec<f64> = v.iter().map(|x| (x - m).abs()).collect();
    Ok(MAD_CONSISTENCY * median(&dev)?)
}

/// Lower weighted median: the smallest value whose cumulative weight reaches
/// half of the total.
pub fn weighted_median(v: &[f64], w: &[f64]) -> Result<f64> {
    require_nonempty(v, "weighted median")?;
    if v.len() != w.len() {
        return Err(invalid(format!(
            "weighted median: {} values but {} weights",
            v.len(),
            w.len()
        )));
    }
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(invalid("weighted median: weights must be finite and nonnegative"));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(invalid("weighted median: all weights are zero"));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let half = 0.5 * total;
    let mut acc = 0.0;
    for &i in &idx {
        acc += w[i];
        if acc >= half {
            return Ok(v[i]);
        }
    }
    // Rounding in the running sum can leave acc a hair below half.
    Ok(v[*idx.last().expect("nonempty")])
}

/// E[min(Z^2, c^2)] for standard normal Z.
pub fn tau_consistency(c: f64) -> f64 {
    let upper = normal_sf(c);
    let central = 1.0 - 2.0 * upper;
    central - 2.0 * c * normal_pdf(c) + 2.0 * c * c * upper
}

/// Tau-scale with a MAD initial scale and a truncated-quadratic rho (c = 3).
pub fn tau2_scale(v: &[f64]) -> Result<f64> {
    let s0 = mad(v)?;
    if s0 <= 0.0 {
        return Err(CrtbError::DegenerateScale(
            "tau2 scale undefined: MAD is zero".into(),
        ));
    }
    let m = median(v)?;
    let c2 = TAU_C * TAU_C;
    let rho_sum: f64 = v
        .iter()
        .map(|x| {
            let r = (x - m) / s0;
            (r * r).min(c2)
        })
        .sum();
    let tau_sq = s0 * s0 * rho_sum / (v.len() as f64 * tau_consistency(TAU_C));
    Ok(tau_sq.sqrt())
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail 1 - Phi(x), without cancellation for large x.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
///
/// Rational approximation (relative error about 1e-9) polished by one Halley
/// step against the erfc-based CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("normal quantile: p = {p} outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley refinement; the residual is taken on the tail that avoids cancellation.
    let e = if x <= 0.0 {
        normal_cdf(x) - p
    } else {
        (1.0 - p) - normal_sf(x)
    };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// Chi-squared CDF with `k` degrees of freedom.
pub fn chi2_cdf(x: f64, k: usize) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(0.5 * k as f64, 0.5 * x)
    }
}

fn chi2_pdf(x: f64, k: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let a = 0.5 * k as f64;
    ((a - 1.0) * x.ln() - 0.5 * x - a * std::f64::consts::LN_2 - ln_gamma(a)).exp()
}

/// Chi-squared quantile: Wilson-Hilferty start, safeguarded Newton on the
/// regularized incomplete gamma function.
pub fn chi2_quantile(p: f64, k: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("chi2 quantile: p = {p} outside (0, 1)")));
    }
    if k == 0 {
        return Err(invalid("chi2 quantile: degrees of freedom must be >= 1"));
    }
    let kf = k as f64;
    let z = normal_quantile(p)?;
    let h = 2.0 / (9.0 * kf);
    let mut x = kf * (1.0 - h + z * h.sqrt()).powi(3);
    if !(x > 0.0) || !x.is_finite() {
        x = kf.max(1e-3) * 0.1;
    }

    // Bracket the root, then Newton with bisection fallback.
    let mut lo = 0.0;
    let mut hi = x.max(1.0);
    while chi2_cdf(hi, k) < p {
        lo = hi;
        hi *= 2.0;
    }
    if x <= lo || x >= hi {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let f = chi2_cdf(x, k) - p;
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = chi2_pdf(x, k);
        let mut next = if d > 0.0 { x - f / d } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.abs().max(1e-300) {
            return Ok(next);
        }
        x = next;
        if (hi - lo) <= 1e-15 * hi {
            break;
        }
    }
    Ok(x)
}

/// Leading singular triple `(u, s, v)` with `M v = s u`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriple {
    pub u: Array1<f64>,
    pub s: f64,
    pub v: Array1<f64>,
}

/// Leading singular triple of a dense matrix.
///
/// The sign is fixed so that the largest-magnitude entry of `u` is positive
/// (first such entry on ties), which makes the result reproducible.
pub fn svd_leading(m: ArrayView2<'_, f64>) -> Result<SingularTriple> {
    let (r, c) = m.dim();
    if r == 0 || c == 0 {
        return Err(CrtbError::DegenerateMatrix("empty matrix".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(invalid("svd_leading: non-finite entries"));
    }
    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if scale == 0.0 {
        return Err(CrtbError::DegenerateMatrix("all-zero matrix".into()));
    }

    let dm = DMatrix::from_fn(r, c, |i, j| m[[i, j]] / scale);
    let svd = dm.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| CrtbError::DegenerateMatrix("SVD did not converge".into()))?;
    let lead = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &s)| if s > best.1 { (i, s) } else { best })
        .0;

    let mut v = Array1::from_iter((0..c).map(|j| v_t[(lead, j)]));
    let vn = v.dot(&v).sqrt();
    v /= vn;
    let mut u = m.dot(&v);
    let s = u.dot(&u).sqrt();
    if s == 0.0 {
        return Err(CrtbError::DegenerateMatrix("leading singular value is zero".into()));
    }
    u /= s;

    let mut pivot = 0;
    for (i, x) in u.iter().enumerate() {
        if x.abs() > u[pivot].abs() {
            pivot = i;
        }
    }
    if u[pivot] < 0.0 {
        u.mapv_inplace(|x| -x);
        v.mapv_inplace(|x| -x);
    }
    Ok(SingularTriple { u, s, v })
}

/// Column view to owned vector, used by the per-column estimators.
pub(crate) fn column_vec(col: ArrayView1<'_, f64>) -> Vec<f64> {
    col.iter().copied().collect()
}
