//! K-fold cross-validation over sparsity and component grids, and weighted
//! prediction error.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crtb::CrtbConfig;
use crate::error::{invalid, mismatch, Result};
use crate::estimator::{fit_method, Method};

/// Two mean CV errors within `TIE_ATOL + TIE_RTOL * max` count as tied.
pub const TIE_RTOL: f64 = 1e-9;
pub const TIE_ATOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WmseMode {
    /// Mean over columns of `MSE_j / Var_j`.
    MeanRatio,
    /// `sum_j w_j MSE_j` with `w_j` proportional to `1 / Var_j`, summing to 1.
    InverseVariance,
}

pub fn inverse_variance_weights(col_vars: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if col_vars.is_empty() {
        return Err(invalid("no column variances"));
    }
    if let Some(v) = col_vars.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(invalid(format!("column variance {v} is not positive")));
    }
    let inv = col_vars.mapv(|v| 1.0 / v);
    let total = inv.sum();
    Ok(inv / total)
}

pub fn wmse(
    y: ArrayView2<'_, f64>,
    yhat: ArrayView2<'_, f64>,
    col_vars: ArrayView1<'_, f64>,
    mode: WmseMode,
) -> Result<f64> {
    if y.dim() != yhat.dim() || y.ncols() != col_vars.len() {
        return Err(mismatch(format!(
            "Y {:?}, Yhat {:?}, {} variances",
            y.dim(),
            yhat.dim(),
            col_vars.len()
        )));
    }
    if y.nrows() == 0 {
        return Err(invalid("empty response block"));
    }
    let weights = inverse_variance_weights(col_vars)?;
    let mse = (&y - &yhat).mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty");
    Ok(match mode {
        WmseMode::MeanRatio => (&mse / &col_vars).mean().expect("nonempty"),
        WmseMode::InverseVariance => weights.dot(&mse),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    /// Sparsity values, applied to both blocks.
    pub etas: Vec<f64>,
    /// Candidate `(k_x, k_y)` pairs; empty means the template's pair.
    pub components: Vec<(usize, usize)>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for CvGrid {
    fn default() -> Self {
        Self {
            etas: vec![0.3, 0.5, 0.7],
            components: Vec::new(),
            folds: 3,
            seed: 0,
        }
    }
}

impl CvGrid {
    pub fn validate(&self) -> Result<()> {
        if self.etas.is_empty() {
            return Err(invalid("empty eta grid"));
        }
        if let Some(e) = self.etas.iter().find(|e| !(0.0..1.0).contains(*e)) {
            return Err(invalid(format!("eta {e} outside [0, 1)")));
        }
        if self.folds < 2 {
            return Err(invalid("need at least 2 folds"));
        }
        if self.components.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(invalid("component counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub eta_x: f64,
    pub eta_y: f64,
    pub k_x: usize,
    pub k_y: usize,
    /// Held-out error per fold; `+inf` for a failed fit.
    pub fold_errors: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best: CrtbConfig,
    pub best_index: usize,
    pub table: Vec<CvCell>,
    /// Fold index per row.
    pub folds: Vec<usize>,
}

impl CvResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eta_x,eta_y,k_x,k_y,mean,sd,n_failed\n");
        for c in &self.table {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.eta_x, c.eta_y, c.k_x, c.k_y, c.mean, c.sd, c.n_failed
            )
            .expect("write to String");
        }
        s
    }
}

/// Shuffled assignment of `n` rows to `folds` folds of near-equal size.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        out[row] = pos % folds;
    }
    out
}

fn take_rows(m: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

fn sample_variances(y: &Array2<f64>) -> Array1<f64> {
    y.var_axis(Axis(0), 1.0)
}

fn fold_error(
    method: Method,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    assignment: &[usize],
    fold: usize,
    cfg: &CrtbConfig,
) -> f64 {
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..assignment.len()).partition(|&i| assignment[i] == fold);
    let (xtr, ytr) = (take_rows(x, &train), take_rows(y, &train));
    let (xte, yte) = (take_rows(x, &test), take_rows(y, &test));
    let run = || -> Result<f64> {
        let model = fit_method(method, xtr.view(), ytr.view(), cfg)?;
        let pred = model.predict(xte.view())?;
        wmse(yte.view(), pred.view(), sample_variances(&ytr).view(), WmseMode::MeanRatio)
    };
    match run() {
        Ok(e) if e.is_finite() => e,
        Ok(_) => f64::INFINITY,
        Err(e) => {
            log::debug!("fold {fold} failed for eta {}: {e}", cfg.eta_x);
            f64::INFINITY
        }
    }
}

fn tied(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= TIE_ATOL + TIE_RTOL * a.abs().max(b.abs())
}

/// Index of the best cell: minimal mean, ties toward larger eta and then
/// smaller component counts.
fn select_best(table: &[CvCell]) -> usize {
    let min = table.iter().map(|c| c.mean).fold(f64::INFINITY, f64::min);
    let mut best: Option<usize> = None;
    for (i, c) in table.iter().enumerate() {
        if !tied(c.mean, min) {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let o = &table[b];
                let key = |c: &CvCell| (c.eta_x + c.eta_y, std::cmp::Reverse(c.k_x + c.k_y));
                if key(c) > key(o) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.unwrap_or(0)
}

/// Grid search by k-fold cross-validation. Dense methods collapse the eta
/// grid to zero.
pub fn kfold_cv(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    grid: &CvGrid,
    method: Method,
    template: &CrtbConfig,
) -> Result<CvResult> {
    grid.validate()?;
    let n = x.nrows();
    if y.nrows() != n {
        return Err(mismatch(format!("X has {n} rows but Y has {} rows", y.nrows())));
    }
    if n < 2 * grid.folds {
        return Err(invalid(format!("{n} rows is too few for {} folds", grid.folds)));
    }
    let etas = if method.is_sparse() { grid.etas.clone() } else { vec![0.0] };
    let comps = if grid.components.is_empty() {
        vec![(template.k_x, template.k_y)]
    } else {
        grid.components.clone()
    };
    let configs: Vec<CrtbConfig> = comps
        .iter()
        .flat_map(|&(k_x, k_y)| {
            etas.iter().map(move |&eta| CrtbConfig {
                k_x,
                k_y,
                eta_x: eta,
                eta_y: eta,
                ..template.clone()
            })
        })
        .collect();
    let assignment = fold_assignment(n, grid.folds, grid.seed);
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..grid.folds).map(move |f| (c, f)))
        .collect();
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, f)| fold_error(method, x, y, &assignment, f, &configs[c]))
        .collect();

    let table: Vec<CvCell> = configs
        .iter()
        .enumerate()
        .map(|(c, cfg)| {
            let fold_errors = errors[c * grid.folds..(c + 1) * grid.folds].to_vec();
            let v = Array1::from(fold_errors.clone());
            let sd = if v.iter().all(|e| e.is_finite()) { v.std(1.0) } else { f64::NAN };
            CvCell {
                eta_x: cfg.eta_x,
                eta_y: cfg.eta_y,
                k_x: cfg.k_x,
                k_y: cfg.k_y,
                mean: v.mean().expect("folds >= 2"),
                sd,
                n_failed: fold_errors.iter().filter(|e| e.is_infinite()).count(),
                fold_errors,
            }
        })
        .collect();
    let best_index = select_best(&table);
    if table[best_index].mean.is_infinite() {
        log::warn!("every grid cell failed on at least one fold");
    }
    Ok(CvResult {
        best: configs[best_index].clone(),
        best_index,
        table,
        folds: assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{LocationKind, RobustScaleKind};
    use ndarray::array;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn wmse_examples() {
        let y = gaussian(10, 2, 1);
        let v = array![1.0, 2.0];
        assert_eq!(wmse(y.view(), y.view(), v.view(), WmseMode::MeanRatio).unwrap(), 0.0);
        assert_eq!(wmse(y.view(), y.view(), v.view(), WmseMode::InverseVariance).unwrap(), 0.0);

        let w = inverse_variance_weights(array![5.67, 134.76].view()).unwrap();
        assert!((w[0] - 0.960).abs() < 5e-4 && (w[1] - 0.040).abs() < 5e-4, "{w}");

        let y1 = gaussian(10, 1, 2);
        let yh = gaussian(10, 1, 3);
        let v1 = array![2.5];
        let a = wmse(y1.view(), yh.view(), v1.view(), WmseMode::MeanRatio).unwrap();
        let b = wmse(y1.view(), yh.view(), v1.view(), WmseMode::InverseVariance).unwrap();
        let mse = (&y1 - &yh).mapv(|e| e * e).mean().unwrap();
        // A single column has weight 1, so the weighted form is the raw MSE.
        assert!((a - mse / 2.5).abs() < 1e-14 && (b - mse).abs() < 1e-14);

        // Per-column errors 0.338 and 31.65 under the variances above.
        let two = wmse(
            array![[0.0, 0.0]].view(),
            array![[0.338f64.sqrt(), 31.65f64.sqrt()]].view(),
            array![5.67, 134.76].view(),
            WmseMode::InverseVariance,
        )
        .unwrap();
        assert!((two - 1.602).abs() < 1e-3, "{two}");

        assert!(wmse(y.view(), y.view(), array![1.0, 0.0].view(), WmseMode::MeanRatio).is_err());
        assert!(wmse(y.view(), y.view(), array![1.0].view(), WmseMode::MeanRatio).is_err());
    }

    #[test]
    fn fold_assignment_is_deterministic() {
        assert_eq!(fold_assignment(31, 3, 7), fold_assignment(31, 3, 7));
        assert_ne!(fold_assignment(31, 3, 7), fold_assignment(31, 3, 8));
    }

    fn latent(n: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let t = gaussian(n, 2, seed);
        let x = t.dot(&gaussian(2, 8, seed + 1)) + gaussian(n, 8, seed + 2) * 0.3;
        let y = t.dot(&gaussian(2, 2, seed + 3)) + gaussian(n, 2, seed + 4) * 0.3;
        (x, y)
    }

    fn template() -> CrtbConfig {
        CrtbConfig { k_x: 2, k_y: 2, ..CrtbConfig::default() }
    }

    #[test]
    fn single_cell_grid_is_best() {
        let (x, y) = latent(30, 1);
        let grid = CvGrid { etas: vec![0.4], ..CvGrid::default() };
        let r = kfold_cv(x.view(), y.view(), &grid, Method::TbSparse, &template()).unwrap();
        assert_eq!(r.table.len(), 1);
        assert_eq!(r.best_index, 0);
        assert_eq!(r.best.eta_x, 0.4);
    }

    #[test]
    fn dense_method_ignores_eta_grid() {
        let (x, y) = latent(30, 2);
        let r = kfold_cv(x.view(), y.view(), &CvGrid::default(), Method::Crtb, &template()).unwrap();
        assert_eq!(r.table.len(), 1);
        assert_eq!(r.best.eta_x, 0.0);
    }

    #[test]
    fn noiseless_rank_one_prefers_sparse_on_tie() {
        // Constant noise columns get exactly zero weight at every eta, so
        // both grid cells produce identical held-out errors.
        let n = 24;
        let s = gaussian(n, 1, 11);
        let mut x = Array2::from_elem((n, 6), 2.0);
        x.column_mut(0).assign(&s.column(0));
        let y = ndarray::concatenate![Axis(1), s.clone() * 2.0, s * -1.0];
        let tpl = CrtbConfig {
            k_x: 1,
            k_y: 1,
            location: LocationKind::Mean,
            scale: RobustScaleKind::Std,
            ..CrtbConfig::default()
        };
        let grid = CvGrid { etas: vec![0.0, 0.5], ..CvGrid::default() };
        let r = kfold_cv(x.view(), y.view(), &grid, Method::TbSparse, &tpl).unwrap();
        assert!(tied(r.table[0].mean, r.table[1].mean), "{:?}", r.table);
        assert!(r.table[0].mean < 1e-20);
        assert_eq!(r.best.eta_x, 0.5);

        // With genuine noise columns the sparse cell wins outright.
        let x = ndarray::concatenate![Axis(1), x.slice(ndarray::s![.., ..1]), gaussian(n, 5, 12)];
        let r = kfold_cv(x.view(), y.view(), &grid, Method::TbSparse, &tpl).unwrap();
        assert_eq!(r.best.eta_x, 0.5);
    }

    #[test]
    fn failing_cells_score_infinite() {
        let (x, y) = latent(12, 3);
        let tpl = CrtbConfig { k_x: 9, k_y: 2, ..CrtbConfig::default() };
        let r = kfold_cv(x.view(), y.view(), &CvGrid::default(), Method::TbSparse, &tpl).unwrap();
        assert!(r.table.iter().all(|c| c.mean.is_infinite() && c.n_failed == 3));
    }

    #[test]
    fn components_grid_and_csv() {
        let (x, y) = latent(30, 4);
        let grid = CvGrid {
            etas: vec![0.3, 0.5],
            components: vec![(1, 1), (2, 2)],
            folds: 3,
            seed: 5,
        };
        let r = kfold_cv(x.view(), y.view(), &grid, Method::TbSparse, &template()).unwrap();
        assert_eq!(r.table.len(), 4);
        let min = r.table.iter().map(|c| c.mean).fold(f64::INFINITY, f64::min);
        assert!(tied(r.table[r.best_index].mean, min));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("eta_x,eta_y,k_x,k_y,mean,sd,n_failed"));
        let again = kfold_cv(x.view(), y.view(), &grid, Method::TbSparse, &template()).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn rejects_bad_grids() {
        let (x, y) = latent(30, 5);
        let t = template();
        for g in [
            CvGrid { etas: vec![], ..CvGrid::default() },
            CvGrid { folds: 1, ..CvGrid::default() },
            CvGrid { etas: vec![1.0], ..CvGrid::default() },
        ] {
            assert!(kfold_cv(x.view(), y.view(), &g, Method::TbSparse, &t).is_err());
        }
        let small = x.slice(ndarray::s![..5, ..]).to_owned();
        let small_y = y.slice(ndarray::s![..5, ..]).to_owned();
        assert!(kfold_cv(small.view(), small_y.view(), &CvGrid::default(), Method::Tb, &t).is_err());
    }

    fn cell(eta: f64, k: usize, mean: f64) -> CvCell {
        CvCell {
            eta_x: eta,
            eta_y: eta,
            k_x: k,
            k_y: k,
            fold_errors: vec![],
            mean,
            sd: 0.0,
            n_failed: 0,
        }
    }

    #[test]
    fn tie_break_order() {
        let t = vec![cell(0.3, 1, 1.0), cell(0.7, 2, 1.0), cell(0.7, 1, 1.0), cell(0.5, 1, 0.5)];
        assert_eq!(select_best(&t), 3);
        let t = vec![cell(0.3, 1, 1.0), cell(0.7, 2, 1.0), cell(0.7, 1, 1.0 + 1e-12)];
        assert_eq!(select_best(&t), 2);
    }

    proptest! {
        #[test]
        fn folds_partition_rows(n in 4usize..200, folds in 2usize..6, seed in any::<u64>()) {
            prop_assume!(n >= folds);
            let a = fold_assignment(n, folds, seed);
            prop_assert_eq!(a.len(), n);
            let mut sizes = vec![0usize; folds];
            for &f in &a {
                prop_assert!(f < folds);
                sizes[f] += 1;
            }
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }

        #[test]
        fn uniform_variance_modes_agree(seed in 0u64..1000, q in 1usize..6, var in 0.1f64..10.0) {
            let y = gaussian(15, q, seed);
            let yh = gaussian(15, q, seed + 1);
            let v = Array1::from_elem(q, var);
            let a = wmse(y.view(), yh.view(), v.view(), WmseMode::MeanRatio).unwrap();
            let b = wmse(y.view(), yh.view(), v.view(), WmseMode::InverseVariance).unwrap();
            // Mean of MSE_j / var equals (sum_j MSE_j / q) / var.
            prop_assert!((a * var - b).abs() <= 1e-12 * b.max(1.0));
        }

        #[test]
        fn best_is_minimal(means in prop::collection::vec(0.0f64..10.0, 1..8)) {
            let t: Vec<CvCell> = means.iter().enumerate().map(|(i, &m)| cell(0.1 * i as f64, 1, m)).collect();
            let b = select_best(&t);
            let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(tied(t[b].mean, min));
        }
    }
}
