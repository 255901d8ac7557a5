//! Column standardization and the model-free column-wise cellwise pre-filter.

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::numkernel::{
    self, column_vec, normal_quantile, LocationKind, RobustScaleKind, MAD_CONSISTENCY,
};

/// Per-column location and scale estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingModel {
    pub centers: Array1<f64>,
    pub scales: Array1<f64>,
    pub location_kind: LocationKind,
    pub scale_kind: RobustScaleKind,
    /// Constant columns whose scale was replaced by 1.
    #[serde(default)]
    pub degenerate_columns: Vec<usize>,
}

impl ScalingModel {
    /// Identity scaler (centers 0, scales 1) for `p` columns.
    pub fn identity(p: usize) -> Self {
        Self {
            centers: Array1::zeros(p),
            scales: Array1::ones(p),
            location_kind: LocationKind::Mean,
            scale_kind: RobustScaleKind::Std,
            degenerate_columns: Vec::new(),
        }
    }

    pub fn ncols(&self) -> usize {
        self.centers.len()
    }
}

/// Fits column centers and scales.
///
/// A zero scale estimate falls back to the column standard deviation, and a
/// zero standard deviation to 1 (the column is recorded as degenerate).
pub fn fit_scaler(
    x: ArrayView2<'_, f64>,
    location: LocationKind,
    scale: RobustScaleKind,
) -> Result<ScalingModel> {
    let (n, p) = x.dim();
    if n < 2 {
        return Err(invalid(format!("fit_scaler needs at least 2 rows, got {n}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("fit_scaler: non-finite entries"));
    }
    let mut centers = Array1::zeros(p);
    let mut scales = Array1::ones(p);
    let mut degenerate_columns = Vec::new();
    for (j, col) in x.axis_iter(Axis(1)).enumerate() {
        let v = column_vec(col);
        centers[j] = match location {
            LocationKind::Mean => numkernel::mean(&v)?,
            LocationKind::Median => numkernel::median(&v)?,
        };
        let est = match scale {
            RobustScaleKind::Std => numkernel::std_dev(&v)?,
            RobustScaleKind::Mad => numkernel::mad(&v)?,
            RobustScaleKind::Tau2 => numkernel::tau2_scale(&v).unwrap_or(0.0),
        };
        scales[j] = if est > 0.0 {
            est
        } else {
            let sd = numkernel::std_dev(&v)?;
            if sd > 0.0 {
                warn!("column {j}: {scale:?} scale is zero, using standard deviation");
                sd
            } else {
                warn!("column {j} is constant; scale set to 1");
                degenerate_columns.push(j);
                1.0
            }
        };
    }
    Ok(ScalingModel {
        centers,
        scales,
        location_kind: location,
        scale_kind: scale,
        degenerate_columns,
    })
}

fn check_cols(x: &ArrayView2<'_, f64>, s: &ScalingModel) -> Result<()> {
    if x.ncols() != s.ncols() {
        return Err(mismatch(format!(
            "block has {} columns, scaler expects {}",
            x.ncols(),
            s.ncols()
        )));
    }
    Ok(())
}

pub fn transform(x: ArrayView2<'_, f64>, s: &ScalingModel) -> Result<Array2<f64>> {
    check_cols(&x, s)?;
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        Zip::from(&mut row)
            .and(&s.centers)
            .and(&s.scales)
            .for_each(|v, &c, &sc| *v = (*v - c) / sc);
    }
    Ok(out)
}

pub fn inverse_transform(xs: ArrayView2<'_, f64>, s: &ScalingModel) -> Result<Array2<f64>> {
    check_cols(&xs, s)?;
    let mut out = xs.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        Zip::from(&mut row)
            .and(&s.centers)
            .and(&s.scales)
            .for_each(|v, &c, &sc| *v = *v * sc + c);
    }
    Ok(out)
}

/// Binary cell status matrix: 1 = clean, 0 = flagged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellMask {
    pub entries: Array2<u8>,
}

impl CellMask {
    pub fn all_clean(n: usize, p: usize) -> Self {
        Self { entries: Array2::ones((n, p)) }
    }

    pub fn from_entries(entries: Array2<u8>) -> Result<Self> {
        if entries.iter().any(|&v| v > 1) {
            return Err(invalid("cell mask entries must be 0 or 1"));
        }
        Ok(Self { entries })
    }

    /// Builds a mask from an outlier indicator (1 = outlying).
    pub fn from_flags(flags: ArrayView2<'_, u8>) -> Result<Self> {
        if flags.iter().any(|&v| v > 1) {
            return Err(invalid("flag matrix entries must be 0 or 1"));
        }
        Ok(Self { entries: flags.mapv(|v| 1 - v) })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.entries.dim()
    }

    #[inline]
    pub fn is_clean(&self, i: usize, j: usize) -> bool {
        self.entries[[i, j]] == 1
    }

    pub fn n_flagged(&self) -> usize {
        self.entries.iter().filter(|&&v| v == 0).count()
    }

    pub fn flag_rate(&self) -> f64 {
        let total = self.entries.len();
        if total == 0 {
            0.0
        } else {
            self.n_flagged() as f64 / total as f64
        }
    }

    /// Outlier indicator, 1 = flagged.
    pub fn flags(&self) -> Array2<u8> {
        self.entries.mapv(|v| 1 - v)
    }

    /// Copy of `z` with flagged cells set to zero.
    pub fn zero_flagged(&self, z: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = z.to_owned();
        Zip::from(&mut out).and(&self.entries).for_each(|v, &c| {
            if c == 0 {
                *v = 0.0;
            }
        });
        out
    }
}

/// Column-wise pre-filter on an already standardized block.
///
/// Cell (i, j) is flagged when `|x_ij| / (1.4826 * med_i |x_ij|)` exceeds the
/// normal quantile at `(1 + alpha) / 2`. Columns whose median absolute value
/// is zero flag nothing.
pub fn prefilter(xs: ArrayView2<'_, f64>, alpha: f64) -> Result<CellMask> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("prefilter: alpha = {alpha} outside (0, 1)")));
    }
    let cutoff = normal_quantile(0.5 * (1.0 + alpha))?;
    let (n, p) = xs.dim();
    let mut mask = CellMask::all_clean(n, p);
    if n == 0 {
        return Ok(mask);
    }
    for (j, col) in xs.axis_iter(Axis(1)).enumerate() {
        let abs: Vec<f64> = col.iter().map(|v| v.abs()).collect();
        let m_hat = numkernel::median(&abs)?;
        if !(m_hat > 0.0) {
            warn!("prefilter: column {j} has zero median absolute value; no cells flagged");
            continue;
        }
        let denom = MAD_CONSISTENCY * m_hat;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() / denom > cutoff {
                mask.entries[[i, j]] = 0;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn fit_scaler_examples() {
        let x = array![[1.0], [2.0], [3.0], [4.0], [5.0]];
        let s = fit_scaler(x.view(), LocationKind::Median, RobustScaleKind::Mad).unwrap();
        assert_eq!(s.centers[0], 3.0);
        assert!((s.scales[0] - 1.4826).abs() < 1e-15);

        let c = array![[5.0], [5.0], [5.0], [5.0]];
        for kind in [RobustScaleKind::Std, RobustScaleKind::Mad, RobustScaleKind::Tau2] {
            let s = fit_scaler(c.view(), LocationKind::Median, kind).unwrap();
            assert_eq!(s.centers[0], 5.0);
            assert_eq!(s.scales[0], 1.0);
            assert_eq!(s.degenerate_columns, vec![0]);
        }

        let x = array![[1.0], [2.0], [3.0]];
        let s = fit_scaler(x.view(), LocationKind::Mean, RobustScaleKind::Std).unwrap();
        assert_eq!(s.centers[0], 2.0);
        assert!((s.scales[0] - 1.0).abs() < 1e-15);

        assert!(fit_scaler(array![[1.0, 2.0]].view(), LocationKind::Mean, RobustScaleKind::Std).is_err());
    }

    #[test]
    fn zero_mad_falls_back_to_std() {
        let x = array![[0.0], [0.0], [0.0], [10.0]];
        let s = fit_scaler(x.view(), LocationKind::Median, RobustScaleKind::Mad).unwrap();
        assert!((s.scales[0] - 5.0).abs() < 1e-12);
        assert!(s.degenerate_columns.is_empty());
    }

    #[test]
    fn transform_examples() {
        let x = array![[1.0, 10.0], [2.0, 20.0], [3.0, 35.0], [9.0, 40.0]];
        let s = fit_scaler(x.view(), LocationKind::Median, RobustScaleKind::Mad).unwrap();
        let probe = array![[s.centers[0], s.centers[1] + s.scales[1]]];
        let t = transform(probe.view(), &s).unwrap();
        assert_eq!(t[[0, 0]], 0.0);
        assert!((t[[0, 1]] - 1.0).abs() < 1e-15);
        let back = inverse_transform(array![[0.0, 1.0]].view(), &s).unwrap();
        assert_eq!(back[[0, 0]], s.centers[0]);
        assert!((back[[0, 1]] - (s.centers[1] + s.scales[1])).abs() < 1e-12);
        assert!(transform(x.slice(s![.., ..1]), &s).is_err());
        assert!(inverse_transform(x.slice(s![.., ..1]), &s).is_err());
    }

    #[test]
    fn prefilter_examples() {
        // Column with med |x| = 1 and a spike of 5.
        let col = array![[-1.0], [1.0], [1.0], [-1.0], [5.0], [0.0], [1.0]];
        let m = prefilter(col.view(), 0.99).unwrap();
        assert!(!m.is_clean(4, 0));
        assert!(m.is_clean(5, 0));
        assert_eq!(m.n_flagged(), 1);
        for alpha in [0.01, 0.5, 0.99, 0.999999] {
            assert!(prefilter(col.view(), alpha).unwrap().is_clean(5, 0));
        }
        assert!(prefilter(col.view(), 0.0).is_err());
        assert!(prefilter(col.view(), 1.0).is_err());
    }

    #[test]
    fn prefilter_zero_median_flags_nothing() {
        let col = array![[0.0], [0.0], [0.0], [0.0], [100.0]];
        assert_eq!(prefilter(col.view(), 0.99).unwrap().n_flagged(), 0);
    }

    #[test]
    fn prefilter_gaussian_flag_rate() {
        let mut total = 0.0;
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = Array2::from_shape_fn((200, 10), |_| StandardNormal.sample(&mut rng));
            let s = fit_scaler(x.view(), LocationKind::Median, RobustScaleKind::Mad).unwrap();
            let xs = transform(x.view(), &s).unwrap();
            total += prefilter(xs.view(), 0.99).unwrap().flag_rate();
        }
        let rate = total / 50.0;
        assert!((rate - 0.01).abs() <= 0.01, "mean flag rate {rate}");
    }

    fn block() -> impl Strategy<Value = Array2<f64>> {
        (2usize..12, 1usize..4).prop_flat_map(|(n, p)| {
            prop::collection::vec(-20.0f64..20.0, n * p)
                .prop_map(move |v| Array2::from_shape_vec((n, p), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn transform_round_trip(x in block()) {
            for (loc, sc) in [(LocationKind::Median, RobustScaleKind::Mad), (LocationKind::Mean, RobustScaleKind::Std)] {
                let s = fit_scaler(x.view(), loc, sc).unwrap();
                prop_assert!(s.scales.iter().all(|&v| v > 0.0));
                let back = inverse_transform(transform(x.view(), &s).unwrap().view(), &s).unwrap();
                for (a, b) in back.iter().zip(x.iter()) {
                    prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                }
            }
        }

        #[test]
        fn prefilter_monotone_in_alpha(x in block(), a in 0.05f64..0.9, gap in 0.0f64..0.09) {
            let lo = prefilter(x.view(), a).unwrap();
            let hi = prefilter(x.view(), a + gap).unwrap();
            prop_assert!(hi.n_flagged() <= lo.n_flagged());
        }

        #[test]
        fn prefilter_scale_invariant_per_column(x in block(), c in 0.01f64..100.0) {
            let scaled = x.mapv(|v| v * c);
            // The ratio form cancels c up to rounding; compare away from the cutoff.
            let m1 = prefilter(x.view(), 0.9).unwrap();
            let m2 = prefilter(scaled.view(), 0.9).unwrap();
            let cutoff = normal_quantile(0.95).unwrap();
            for j in 0..x.ncols() {
                let abs: Vec<f64> = x.column(j).iter().map(|v| v.abs()).collect();
                let mh = numkernel::median(&abs).unwrap();
                for i in 0..x.nrows() {
                    let r = if mh > 0.0 { x[[i, j]].abs() / (MAD_CONSISTENCY * mh) } else { 0.0 };
                    if (r - cutoff).abs() > 1e-9 {
                        prop_assert_eq!(m1.entries[[i, j]], m2.entries[[i, j]]);
                    }
                }
            }
        }

        #[test]
        fn prefilter_row_permutation_equivariant(x in block(), seed in any::<u64>()) {
            let mut order: Vec<usize> = (0..x.nrows()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let px = x.select(Axis(0), &order);
            let m = prefilter(x.view(), 0.8).unwrap();
            let pm = prefilter(px.view(), 0.8).unwrap();
            prop_assert_eq!(m.entries.select(Axis(0), &order), pm.entries);
        }
    }
}
