//! Dense and sparse twoblock estimator.
//!
//! Components of each block are extracted by sequential SVD deflation of the
//! cross-covariance with the other block. The X loop deflates X against the
//! fixed Y block and the Y loop deflates Y against the fixed X block; the two
//! loops are independent. Soft-thresholding of the weight vectors gives the
//! sparse variant.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, CrtbError, Result};
use crate::numkernel::svd_leading;

/// Relative singular-value floor below which extraction stops early.
const EARLY_STOP_RATIO: f64 = 1e-12;
/// Absolute floor on the squared score norm.
const MIN_SCORE_SS: f64 = 1e-24;

/// Fitted twoblock model on centered (standardized) data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoblockModel {
    /// X weights `W`, p x k_x.
    pub x_weights: Array2<f64>,
    /// X loadings `P`, p x k_x.
    pub x_loadings: Array2<f64>,
    /// X deflation scores `T`, n x k_x.
    pub x_scores: Array2<f64>,
    /// Y weights `V`, q x k_y.
    pub y_weights: Array2<f64>,
    /// Y loadings `Q`, q x k_y.
    pub y_loadings: Array2<f64>,
    /// Y deflation scores `U`, n x k_y.
    pub y_scores: Array2<f64>,
    /// Coefficients in standardized units, p x q.
    pub coefficients: Array2<f64>,
    pub eta_x: f64,
    pub eta_y: f64,
    /// Requested component counts.
    pub k_x: usize,
    pub k_y: usize,
}

impl TwoblockModel {
    /// Number of X components actually extracted (may be below `k_x`).
    pub fn effective_k_x(&self) -> usize {
        self.x_weights.ncols()
    }

    pub fn effective_k_y(&self) -> usize {
        self.y_weights.ncols()
    }

    /// Indices of X variables with a nonzero weight in any component.
    pub fn selected_x_variables(&self) -> Vec<usize> {
        self.x_weights
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(_, row)| row.iter().any(|&v| v != 0.0))
            .map(|(j, _)| j)
            .collect()
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(invalid(format!("sparsity eta = {eta} outside [0, 1)")));
    }
    Ok(())
}

/// Soft-thresholds a unit weight vector at `eta * max|w|` and renormalizes.
///
/// `eta = 0` returns the input unchanged.
pub fn soft_threshold(w: ArrayView1<'_, f64>, eta: f64) -> Result<Array1<f64>> {
    check_eta(eta)?;
    if eta == 0.0 {
        return Ok(w.to_owned());
    }
    let linf = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let thr = eta * linf;
    let out = w.mapv(|v| v.signum() * (v.abs() - thr).max(0.0));
    let norm = out.dot(&out).sqrt();
    // The max-magnitude entry keeps (1 - eta) * linf > 0.
    assert!(norm > 0.0, "soft-thresholding removed every entry");
    Ok(out / norm)
}

struct BlockComponents {
    weights: Vec<Array1<f64>>,
    loadings: Vec<Array1<f64>>,
    scores: Vec<Array1<f64>>,
}

/// Deflation loop for one block against a fixed partner block.
fn extract_components(
    block: ArrayView2<'_, f64>,
    partner: ArrayView2<'_, f64>,
    k: usize,
    eta: f64,
    label: &str,
) -> Result<BlockComponents> {
    let n = block.nrows() as f64;
    let mut deflated = block.to_owned();
    let mut out = BlockComponents {
        weights: Vec::with_capacity(k),
        loadings: Vec::with_capacity(k),
        scores: Vec::with_capacity(k),
    };
    let mut first_s = 0.0;
    for h in 0..k {
        let cross = deflated.t().dot(&partner) / n;
        let triple = match svd_leading(cross.view()) {
            Ok(t) => t,
            Err(CrtbError::DegenerateMatrix(_)) if h > 0 => break,
            Err(CrtbError::DegenerateMatrix(msg)) => {
                return Err(CrtbError::NoAssociation(format!("{label} block: {msg}")))
            }
            Err(e) => return Err(e),
        };
        if h == 0 {
            first_s = triple.s;
        } else if triple.s < EARLY_STOP_RATIO * first_s {
            break;
        }
        let w = soft_threshold(triple.u.view(), eta)?;
        let t = deflated.dot(&w);
        let tt = t.dot(&t);
        if tt < MIN_SCORE_SS {
            return Err(CrtbError::RankDeficiency(format!(
                "{label} block component {}: score sum of squares {tt:e}",
                h + 1
            )));
        }
        let p = deflated.t().dot(&t) / tt;
        for (mut row, &ti) in deflated.axis_iter_mut(Axis(0)).zip(t.iter()) {
            row.scaled_add(-ti, &p);
        }
        out.weights.push(w);
        out.loadings.push(p);
        out.scores.push(t);
    }
    Ok(out)
}

fn stack_columns(cols: &[Array1<f64>], len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((len, cols.len()));
    for (j, c) in cols.iter().enumerate() {
        m.column_mut(j).assign(c);
    }
    m
}

/// Fits the twoblock model. Inputs must already be centered.
pub fn fit_twoblock(
    xc: ArrayView2<'_, f64>,
    yc: ArrayView2<'_, f64>,
    k_x: usize,
    k_y: usize,
    eta_x: f64,
    eta_y: f64,
) -> Result<TwoblockModel> {
    let (n, p) = xc.dim();
    let q = yc.ncols();
    if yc.nrows() != n {
        return Err(mismatch(format!("X has {n} rows but Y has {} rows", yc.nrows())));
    }
    check_eta(eta_x)?;
    check_eta(eta_y)?;
    if n < 2 {
        return Err(invalid("twoblock needs at least 2 rows"));
    }
    if k_x == 0 || k_x > (n - 1).min(p) {
        return Err(invalid(format!("k_x = {k_x} must lie in 1..={}", (n - 1).min(p))));
    }
    if k_y == 0 || k_y > (n - 1).min(q) {
        return Err(invalid(format!("k_y = {k_y} must lie in 1..={}", (n - 1).min(q))));
    }

    let xcomp = extract_components(xc, yc, k_x, eta_x, "X")?;
    let ycomp = extract_components(yc, xc, k_y, eta_y, "Y")?;

    let mut model = TwoblockModel {
        x_weights: stack_columns(&xcomp.weights, p),
        x_loadings: stack_columns(&xcomp.loadings, p),
        x_scores: stack_columns(&xcomp.scores, n),
        y_weights: stack_columns(&ycomp.weights, q),
        y_loadings: stack_columns(&ycomp.loadings, q),
        y_scores: stack_columns(&ycomp.scores, n),
        coefficients: Array2::zeros((p, q)),
        eta_x,
        eta_y,
        k_x,
        k_y,
    };
    model.coefficients = coefficients(&model, yc)?;
    Ok(model)
}

/// Bilinear coefficient matrix `W (T'X W)^{-1} T'Y V V'`.
///
/// With regression-loading deflation `X W = T (P'W)`, so `T'X W` is formed
/// from the stored model as `(T'T)(P'W)` without the original X.
pub fn coefficients(model: &TwoblockModel, yc: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let t = &model.x_scores;
    if yc.nrows() != t.nrows() {
        return Err(mismatch(format!(
            "Y has {} rows but the model has {} scores",
            yc.nrows(),
            t.nrows()
        )));
    }
    if yc.ncols() != model.y_weights.nrows() {
        return Err(mismatch(format!(
            "Y has {} columns but the model has {} Y weights",
            yc.ncols(),
            model.y_weights.nrows()
        )));
    }
    let w = &model.x_weights;
    let k = w.ncols();
    let gram = t.t().dot(t).dot(&model.x_loadings.t().dot(w));
    let rhs = t.t().dot(&yc);
    let g = DMatrix::from_fn(k, k, |i, j| gram[[i, j]]);
    let r = DMatrix::from_fn(k, rhs.ncols(), |i, j| rhs[[i, j]]);
    let sol = g
        .lu()
        .solve(&r)
        .ok_or_else(|| CrtbError::RankDeficiency("T'XW is singular".into()))?;
    let inner = Array2::from_shape_fn((k, rhs.ncols()), |(i, j)| sol[(i, j)]);
    if inner.iter().any(|v| !v.is_finite()) {
        return Err(CrtbError::RankDeficiency("T'XW is numerically singular".into()));
    }
    let v = &model.y_weights;
    Ok(w.dot(&inner).dot(&v.dot(&v.t())))
}

/// Standardized-scale prediction `Xc Bs`.
pub fn predict_std(model: &TwoblockModel, xc: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if xc.ncols() != model.coefficients.nrows() {
        return Err(mismatch(format!(
            "X has {} columns, model expects {}",
            xc.ncols(),
            model.coefficients.nrows()
        )));
    }
    Ok(xc.dot(&model.coefficients))
}

/// Scores of new standardized data on the first `k` weight vectors, `Z W`.
pub fn project(z: ArrayView2<'_, f64>, weights: &Array2<f64>) -> Array2<f64> {
    z.dot(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    fn center(m: &Array2<f64>) -> Array2<f64> {
        let mean = m.mean_axis(Axis(0)).unwrap();
        m - &mean
    }

    #[test]
    fn soft_threshold_examples() {
        let w = array![0.6, -0.8, 0.0];
        assert_eq!(soft_threshold(w.view(), 0.0).unwrap(), w);

        let r = soft_threshold(array![0.8, 0.6, 0.0].view(), 0.5).unwrap();
        let expect = [2.0 / 5f64.sqrt(), 1.0 / 5f64.sqrt(), 0.0];
        for (a, b) in r.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r[0] - 0.8944).abs() < 1e-4 && (r[1] - 0.4472).abs() < 1e-4);

        let r = soft_threshold(array![-0.8, 0.6, 0.0].view(), 0.5).unwrap();
        assert!((r[0] + 0.8944).abs() < 1e-4 && (r[1] - 0.4472).abs() < 1e-4 && r[2] == 0.0);

        assert!(soft_threshold(w.view(), 1.0).is_err());
        assert!(soft_threshold(w.view(), -0.1).is_err());
    }

    #[test]
    fn rank_one_noiseless_reconstruction() {
        let n = 25;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Array1<f64> = Array1::from_shape_fn(n, |_| StandardNormal.sample(&mut rng));
        let t = &t - t.mean().unwrap();
        let p = array![0.5, -0.5, 0.5, 0.5];
        let c = array![0.6, 0.8];
        let x = Array2::from_shape_fn((n, 4), |(i, j)| t[i] * p[j]);
        let y = Array2::from_shape_fn((n, 2), |(i, j)| t[i] * c[j]);
        let m = fit_twoblock(x.view(), y.view(), 1, 1, 0.0, 0.0).unwrap();
        let w = m.x_weights.column(0);
        let sign = w.dot(&p).signum();
        for (a, b) in w.iter().zip(p.iter()) {
            assert!((a - sign * b).abs() < 1e-8);
        }
        let pred = predict_std(&m, x.view()).unwrap();
        for (a, b) in pred.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        // B reproduces Y through coefficients() as well.
        let b = coefficients(&m, y.view()).unwrap();
        assert_eq!(b, m.coefficients);
    }

    #[test]
    fn first_weight_matches_power_iteration() {
        for seed in 0..5 {
            let x = center(&gaussian(20, 5, 100 + seed));
            let y = center(&gaussian(20, 3, 200 + seed));
            let m = fit_twoblock(x.view(), y.view(), 1, 1, 0.0, 0.0).unwrap();
            let sxy = x.t().dot(&y);
            let a = sxy.dot(&sxy.t());
            let mut v = Array1::from_elem(5, 1.0);
            for _ in 0..500 {
                let nv = a.dot(&v);
                v = &nv / nv.dot(&nv).sqrt();
            }
            let w = m.x_weights.column(0);
            let sign = w.dot(&v).signum();
            for (a, b) in w.iter().zip(v.iter()) {
                assert!((a - sign * b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_response_column_gets_zero_coefficients() {
        let x = center(&gaussian(30, 4, 11));
        let b = array![[1.0, -0.5], [0.5, 0.2], [0.0, 1.0], [-1.0, 0.3]];
        let y2 = x.dot(&b);
        let mut y = Array2::zeros((30, 3));
        y.slice_mut(s![.., ..2]).assign(&y2);
        let m = fit_twoblock(x.view(), y.view(), 2, 2, 0.0, 0.0).unwrap();
        assert!(m.coefficients.column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_y_gives_no_association_error() {
        let x = center(&gaussian(10, 3, 1));
        let y = Array2::zeros((10, 2));
        assert!(matches!(
            fit_twoblock(x.view(), y.view(), 1, 1, 0.0, 0.0),
            Err(CrtbError::NoAssociation(_))
        ));
    }

    #[test]
    fn zero_y_coefficients_are_zero() {
        let x = center(&gaussian(10, 3, 2));
        let y = center(&gaussian(10, 2, 3));
        let m = fit_twoblock(x.view(), y.view(), 2, 2, 0.0, 0.0).unwrap();
        let b = coefficients(&m, Array2::zeros((10, 2)).view()).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_rank_y_reduces_to_reduced_rank_regression() {
        let x = center(&gaussian(40, 6, 5));
        let y = center(&gaussian(40, 2, 6));
        let m = fit_twoblock(x.view(), y.view(), 3, 2, 0.0, 0.0).unwrap();
        let v = &m.y_weights;
        let vvt = v.dot(&v.t());
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((vvt[[i, j]] - e).abs() < 1e-12);
            }
        }
        // X B equals the projection of Y onto span(T).
        let t = &m.x_scores;
        let tt = t.t().dot(t);
        let tinv = DMatrix::from_fn(3, 3, |i, j| tt[[i, j]]).try_inverse().unwrap();
        let tinv = Array2::from_shape_fn((3, 3), |(i, j)| tinv[(i, j)]);
        let proj = t.dot(&tinv).dot(&t.t().dot(&y));
        let fit = x.dot(&m.coefficients);
        for (a, b) in fit.iter().zip(proj.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn early_stop_records_effective_components() {
        let n = 15;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t: Array1<f64> = Array1::from_shape_fn(n, |_| StandardNormal.sample(&mut rng));
        let x = Array2::from_shape_fn((n, 3), |(i, j)| t[i] * (j as f64 + 1.0));
        let y = Array2::from_shape_fn((n, 2), |(i, j)| t[i] * (1.0 - 2.0 * j as f64));
        let m = fit_twoblock(x.view(), y.view(), 2, 2, 0.0, 0.0).unwrap();
        assert_eq!(m.effective_k_x(), 1);
        assert_eq!(m.effective_k_y(), 1);
        assert_eq!(m.k_x, 2);
    }

    #[test]
    fn dimension_and_parameter_errors() {
        let x = gaussian(10, 3, 1);
        let y = gaussian(9, 2, 2);
        assert!(matches!(
            fit_twoblock(x.view(), y.view(), 1, 1, 0.0, 0.0),
            Err(CrtbError::DimensionMismatch(_))
        ));
        let y = gaussian(10, 2, 2);
        assert!(fit_twoblock(x.view(), y.view(), 4, 1, 0.0, 0.0).is_err());
        assert!(fit_twoblock(x.view(), y.view(), 1, 3, 0.0, 0.0).is_err());
        assert!(fit_twoblock(x.view(), y.view(), 1, 1, 1.0, 0.0).is_err());
        let m = fit_twoblock(x.view(), y.view(), 1, 1, 0.0, 0.0).unwrap();
        assert!(predict_std(&m, gaussian(4, 2, 9).view()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn soft_threshold_zero_is_identity(v in prop::collection::vec(-1.0f64..1.0, 1..20)) {
            let a = Array1::from(v);
            prop_assert_eq!(soft_threshold(a.view(), 0.0).unwrap(), a);
        }

        #[test]
        fn x_scores_orthogonal(seed in 0u64..1000, eta in 0.0f64..0.8) {
            let x = center(&gaussian(25, 6, seed));
            let y = center(&gaussian(25, 3, seed + 7));
            let m = fit_twoblock(x.view(), y.view(), 3, 2, eta, eta).unwrap();
            let t = &m.x_scores;
            for i in 0..t.ncols() {
                for j in 0..i {
                    let ti = t.column(i);
                    let tj = t.column(j);
                    let rel = ti.dot(&tj).abs() / (ti.dot(&ti).sqrt() * tj.dot(&tj).sqrt());
                    prop_assert!(rel < 1e-8);
                }
            }
            for c in m.x_weights.axis_iter(Axis(1)) {
                prop_assert!((c.dot(&c) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn single_component_sparsity_monotone(seed in 0u64..1000) {
            let x = center(&gaussian(20, 8, seed));
            let y = center(&gaussian(20, 3, seed + 3));
            let mut prev = 0;
            for eta in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9] {
                let m = fit_twoblock(x.view(), y.view(), 1, 1, eta, 0.0).unwrap();
                let zeros = m.x_weights.iter().filter(|&&v| v == 0.0).count();
                prop_assert!(zeros >= prev);
                prev = zeros;
            }
        }

        #[test]
        fn coefficients_scale_with_response(seed in 0u64..1000, c in 0.1f64..10.0) {
            let x = center(&gaussian(18, 5, seed));
            let y = center(&gaussian(18, 3, seed + 5));
            let a = fit_twoblock(x.view(), y.view(), 2, 2, 0.0, 0.0).unwrap();
            let yc = y.mapv(|v| v * c);
            let b = fit_twoblock(x.view(), yc.view(), 2, 2, 0.0, 0.0).unwrap();
            let scale = a.coefficients.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (u, v) in a.coefficients.iter().zip(b.coefficients.iter()) {
                prop_assert!((c * u - v).abs() <= 1e-9 * c * scale);
            }
        }

        #[test]
        fn prediction_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = center(&gaussian(12, 4, seed));
            let y = center(&gaussian(12, 2, seed + 1));
            let m = fit_twoblock(x.view(), y.view(), 2, 1, 0.0, 0.0).unwrap();
            let x1 = gaussian(5, 4, seed + 2);
            let x2 = gaussian(5, 4, seed + 3);
            let lhs = predict_std(&m, (&x1 * a + &x2 * b).view()).unwrap();
            let rhs = predict_std(&m, x1.view()).unwrap() * a + predict_std(&m, x2.view()).unwrap() * b;
            for (u, v) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((u - v).abs() < 1e-10);
            }
            prop_assert!(predict_std(&m, Array2::zeros((3, 4)).view()).unwrap().iter().all(|&v| v == 0.0));
        }
    }
}
