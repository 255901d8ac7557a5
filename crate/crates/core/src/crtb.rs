//! Cellwise robust twoblock estimator.
//!
//! The fit standardizes both blocks robustly, flags gross cellwise outliers
//! with the column-wise pre-filter, and then alternates between a twoblock fit
//! on case-weighted, cell-imputed data and an update of the case weights and
//! the imputed cells. Flagged cells stay flagged for the whole loop.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, CrtbError, Result};
use crate::numkernel::{self, column_vec, LocationKind, RobustScaleKind};
use crate::preprocess::{fit_scaler, prefilter, transform, CellMask, ScalingModel};
use crate::robustweights::{case_weights, starting_weights, CaseWeights, PsiSpec};
use crate::twoblock::{fit_twoblock, TwoblockModel};

/// Per-cell weights below this value are reported as outlying.
pub const CELL_FLAG_THRESHOLD: f64 = 0.5;

/// Source of the persistent floor masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initializer {
    Prefilter,
    /// Masks supplied by the caller (any external cellwise detector).
    ExternalMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrtbConfig {
    pub k_x: usize,
    pub k_y: usize,
    pub eta_x: f64,
    pub eta_y: f64,
    pub location: LocationKind,
    pub scale: RobustScaleKind,
    /// Cellwise critical probability of the pre-filter.
    pub alpha_cell: f64,
    pub psi: PsiSpec,
    /// Tolerance on the relative change of the squared Frobenius norm of Bs.
    pub tol: f64,
    pub max_iter: usize,
    pub initializer: Initializer,
}

impl Default for CrtbConfig {
    fn default() -> Self {
        Self {
            k_x: 3,
            k_y: 3,
            eta_x: 0.0,
            eta_y: 0.0,
            location: LocationKind::Median,
            scale: RobustScaleKind::Mad,
            alpha_cell: 0.99,
            psi: PsiSpec::default(),
            tol: 1e-4,
            max_iter: 25,
            initializer: Initializer::Prefilter,
        }
    }
}

impl CrtbConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, eta) in [("eta_x", self.eta_x), ("eta_y", self.eta_y)] {
            if !(0.0..1.0).contains(&eta) {
                return Err(invalid(format!("{name} = {eta} outside [0, 1)")));
            }
        }
        if !(self.alpha_cell > 0.0 && self.alpha_cell < 1.0) {
            return Err(invalid(format!("alpha_cell = {} outside (0, 1)", self.alpha_cell)));
        }
        if !(self.tol > 0.0) {
            return Err(invalid(format!("tol = {} must be positive", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        if self.k_x == 0 || self.k_y == 0 {
            return Err(invalid("component counts must be positive"));
        }
        self.psi.validate()
    }
}

/// Converged CRTB fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrtbFit {
    pub config: CrtbConfig,
    /// Twoblock model from the final weighted fit.
    pub model: TwoblockModel,
    pub scaler_x: ScalingModel,
    pub scaler_y: ScalingModel,
    pub floor_x: CellMask,
    pub floor_y: CellMask,
    pub wx: CaseWeights,
    pub wy: CaseWeights,
    pub xs_imputed: Array2<f64>,
    pub ys_imputed: Array2<f64>,
    /// Original-scale coefficients, p x q.
    pub coefficients: Array2<f64>,
    pub intercept: Array1<f64>,
    pub n_iter: usize,
    pub converged: bool,
    /// Squared Frobenius norm of Bs after each iteration.
    pub trace: Vec<f64>,
}

/// Replaces flagged cells by their reconstruction `t P'`, where the partial
/// score `t = z_clean W` uses only the clean cells of the row.
pub fn impute_cells(
    zs_init: ArrayView2<'_, f64>,
    mask: &CellMask,
    weights: &Array2<f64>,
    loadings: &Array2<f64>,
) -> Result<Array2<f64>> {
    let (n, p) = zs_init.dim();
    if mask.dim() != (n, p) {
        return Err(mismatch(format!("block {:?} vs mask {:?}", (n, p), mask.dim())));
    }
    if weights.nrows() != p || loadings.nrows() != p || weights.ncols() != loadings.ncols() {
        return Err(mismatch(format!(
            "weights {:?} and loadings {:?} do not fit {p} columns",
            weights.dim(),
            loadings.dim()
        )));
    }
    let mut out = zs_init.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let flagged: Vec<usize> = (0..p).filter(|&j| !mask.is_clean(i, j)).collect();
        if flagged.is_empty() {
            continue;
        }
        for &j in &flagged {
            row[j] = 0.0;
        }
        let t = row.dot(weights);
        for &j in &flagged {
            row[j] = loadings.row(j).dot(&t);
        }
    }
    Ok(out)
}

pub fn frobenius_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Relative change of the squared Frobenius norm below `tol`.
pub fn converged(bs_prev: &Array2<f64>, bs_curr: &Array2<f64>, tol: f64) -> Result<bool> {
    if bs_prev.dim() != bs_curr.dim() {
        return Err(mismatch("coefficient matrices differ in shape"));
    }
    let prev = frobenius_sq(bs_prev);
    if !(prev > 0.0) {
        return Err(CrtbError::DegenerateMatrix(
            "previous coefficient matrix has zero norm".into(),
        ));
    }
    Ok(relative_change(prev, frobenius_sq(bs_curr)) < tol)
}

fn relative_change(prev: f64, curr: f64) -> f64 {
    (curr - prev).abs() / prev
}

/// `B_jl = (sigma^Y_l / sigma^X_j) Bs_jl`.
pub fn rescale_coefficients(
    bs: &Array2<f64>,
    scaler_x: &ScalingModel,
    scaler_y: &ScalingModel,
) -> Result<Array2<f64>> {
    if bs.dim() != (scaler_x.ncols(), scaler_y.ncols()) {
        return Err(mismatch(format!(
            "coefficients {:?} vs scalers ({}, {})",
            bs.dim(),
            scaler_x.ncols(),
            scaler_y.ncols()
        )));
    }
    Ok(Array2::from_shape_fn(bs.dim(), |(j, l)| {
        scaler_y.scales[l] / scaler_x.scales[j] * bs[[j, l]]
    }))
}

/// Column centers of the residuals `Y - X B`.
pub fn intercept(
    y: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    b: &Array2<f64>,
    location: LocationKind,
) -> Result<Array1<f64>> {
    if x.nrows() != y.nrows() || x.ncols() != b.nrows() || y.ncols() != b.ncols() {
        return Err(mismatch(format!(
            "X {:?}, Y {:?}, B {:?}",
            x.dim(),
            y.dim(),
            b.dim()
        )));
    }
    let resid = &y - &x.dot(b);
    resid
        .axis_iter(Axis(1))
        .map(|col| {
            let v = column_vec(col);
            match location {
                LocationKind::Mean => numkernel::mean(&v),
                LocationKind::Median => numkernel::median(&v),
            }
        })
        .collect()
}

fn scale_rows(z: &Array2<f64>, w: &CaseWeights) -> Array2<f64> {
    let mut out = z.clone();
    for (mut row, &wi) in out.axis_iter_mut(Axis(0)).zip(w.values.iter()) {
        let s = wi.sqrt();
        row.mapv_inplace(|v| s * v);
    }
    out
}

fn check_data(x: &ArrayView2<'_, f64>, y: &ArrayView2<'_, f64>, cfg: &CrtbConfig) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(mismatch(format!(
            "X has {} rows but Y has {} rows",
            x.nrows(),
            y.nrows()
        )));
    }
    let need = cfg.k_x.max(cfg.k_y) + 2;
    if x.nrows() < need {
        return Err(invalid(format!(
            "need at least {need} rows for k_x = {}, k_y = {}",
            cfg.k_x, cfg.k_y
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(invalid("data contain non-finite values"));
    }
    Ok(())
}

/// Fits CRTB with pre-filter floor masks.
pub fn fit_crtb(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, cfg: &CrtbConfig) -> Result<CrtbFit> {
    if cfg.initializer == Initializer::ExternalMask {
        return Err(invalid(
            "external_mask initializer requires masks; use fit_crtb_with_masks",
        ));
    }
    fit_impl(x, y, cfg, None)
}

/// Fits CRTB with caller-supplied floor masks (1 = clean).
pub fn fit_crtb_with_masks(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    cfg: &CrtbConfig,
    mask_x: CellMask,
    mask_y: CellMask,
) -> Result<CrtbFit> {
    if mask_x.dim() != x.dim() || mask_y.dim() != y.dim() {
        return Err(mismatch(format!(
            "masks {:?}/{:?} do not match blocks {:?}/{:?}",
            mask_x.dim(),
            mask_y.dim(),
            x.dim(),
            y.dim()
        )));
    }
    let cfg = CrtbConfig {
        initializer: Initializer::ExternalMask,
        ..cfg.clone()
    };
    fit_impl(x, y, &cfg, Some((mask_x, mask_y)))
}

fn fit_impl(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    cfg: &CrtbConfig,
    masks: Option<(CellMask, CellMask)>,
) -> Result<CrtbFit> {
    cfg.validate()?;
    check_data(&x, &y, cfg)?;

    let scaler_x = fit_scaler(x, cfg.location, cfg.scale)?;
    let scaler_y = fit_scaler(y, cfg.location, cfg.scale)?;
    let xs = transform(x, &scaler_x)?;
    let ys = transform(y, &scaler_y)?;

    let (floor_x, floor_y) = match masks {
        Some(m) => m,
        None => (
            prefilter(xs.view(), cfg.alpha_cell)?,
            prefilter(ys.view(), cfg.alpha_cell)?,
        ),
    };

    let mut xs_init = floor_x.zero_flagged(xs.view());
    let mut ys_init = floor_y.zero_flagged(ys.view());
    let mut wx = starting_weights(xs.view(), &floor_x, &cfg.psi, cfg.k_x)?;
    let mut wy = starting_weights(ys.view(), &floor_y, &cfg.psi, cfg.k_y)?;

    let mut trace = Vec::with_capacity(cfg.max_iter);
    let mut is_converged = false;
    let mut model = None;
    for iter in 1..=cfg.max_iter {
        let xw = scale_rows(&xs_init, &wx);
        let yw = scale_rows(&ys_init, &wy);
        let fit = fit_twoblock(xw.view(), yw.view(), cfg.k_x, cfg.k_y, cfg.eta_x, cfg.eta_y)?;
        let norm = frobenius_sq(&fit.coefficients);

        let t_ref = xs_init.dot(&fit.x_weights);
        let t_cont = xs.dot(&fit.x_weights);
        let u_ref = ys_init.dot(&fit.y_weights);
        let u_cont = ys.dot(&fit.y_weights);
        wx = case_weights(t_ref.view(), t_cont.view(), &cfg.psi, &wx)?;
        wy = case_weights(u_ref.view(), u_cont.view(), &cfg.psi, &wy)?;

        xs_init = impute_cells(xs_init.view(), &floor_x, &fit.x_weights, &fit.x_loadings)?;
        ys_init = impute_cells(ys_init.view(), &floor_y, &fit.y_weights, &fit.y_loadings)?;

        if iter > 1 {
            let prev = *trace.last().expect("trace nonempty after first iteration");
            if !(prev > 0.0) {
                return Err(CrtbError::DegenerateMatrix(
                    "coefficient norm collapsed to zero".into(),
                ));
            }
            is_converged = relative_change(prev, norm) < cfg.tol;
        }
        trace.push(norm);
        model = Some(fit);
        if is_converged {
            break;
        }
    }
    let model = model.expect("max_iter >= 1");

    let coefficients = rescale_coefficients(&model.coefficients, &scaler_x, &scaler_y)?;
    let icpt = intercept(y, x, &coefficients, cfg.location)?;
    Ok(CrtbFit {
        config: cfg.clone(),
        model,
        scaler_x,
        scaler_y,
        floor_x,
        floor_y,
        wx,
        wy,
        xs_imputed: xs_init,
        ys_imputed: ys_init,
        coefficients,
        intercept: icpt,
        n_iter: trace.len(),
        converged: is_converged,
        trace,
    })
}

/// Original-scale prediction `X B + intercept`.
pub fn predict_linear(
    coefficients: &Array2<f64>,
    intercept: &Array1<f64>,
    xnew: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if xnew.ncols() != coefficients.nrows() {
        return Err(mismatch(format!(
            "X has {} columns, model expects {}",
            xnew.ncols(),
            coefficients.nrows()
        )));
    }
    Ok(xnew.dot(coefficients) + intercept)
}

pub fn predict(fit: &CrtbFit, xnew: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    predict_linear(&fit.coefficients, &fit.intercept, xnew)
}

/// Per-cell weights (case weight times clean indicator) and the derived flags.
#[derive(Debug, Clone, PartialEq)]
pub struct CellWeightReport {
    pub x_weights: Array2<f64>,
    pub y_weights: Array2<f64>,
    /// 1 where the cell weight is below [`CELL_FLAG_THRESHOLD`].
    pub x_flags: Array2<u8>,
    pub y_flags: Array2<u8>,
}

fn cell_weights(mask: &CellMask, w: &CaseWeights) -> Array2<f64> {
    let mut out = Array2::zeros(mask.dim());
    Zip::indexed(&mut out).for_each(|(i, j), v| {
        *v = w.values[i] * f64::from(mask.entries[[i, j]]);
    });
    out
}

pub fn cell_weight_report(fit: &CrtbFit) -> CellWeightReport {
    let x_weights = cell_weights(&fit.floor_x, &fit.wx);
    let y_weights = cell_weights(&fit.floor_y, &fit.wy);
    let flag = |m: &Array2<f64>| m.mapv(|v| u8::from(v < CELL_FLAG_THRESHOLD));
    CellWeightReport {
        x_flags: flag(&x_weights),
        y_flags: flag(&y_weights),
        x_weights,
        y_weights,
    }
}
