//! Simulation study: latent-variable data, contamination injectors, metrics,
//! the replicate runner, and the shipped scenario presets.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crtb::CrtbConfig;
use crate::error::{invalid, mismatch, Result};
use crate::estimator::{fit_method, FittedModel, Method};
use crate::modelselect::{kfold_cv, CvGrid};
use crate::numkernel::{LocationKind, RobustScaleKind};
use crate::robustweights::CaseWeights;
use crate::twoblock::TwoblockModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub p_signal: usize,
    pub p_noise: usize,
    pub sigma_e: f64,
    pub sigma_f: f64,
    pub seed: u64,
}

impl Default for DgpParams {
    fn default() -> Self {
        Self {
            n: 100,
            k: 3,
            q: 4,
            p_signal: 20,
            p_noise: 10,
            sigma_e: 0.5,
            sigma_f: 0.5,
            seed: 0,
        }
    }
}

impl DgpParams {
    pub fn p(&self) -> usize {
        self.p_signal + self.p_noise
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.q == 0 || self.p_signal == 0 {
            return Err(invalid("n, k, q and p_signal must be positive"));
        }
        if self.k > self.p_signal {
            return Err(invalid(format!("k = {} exceeds p_signal = {}", self.k, self.p_signal)));
        }
        if !(self.sigma_e > 0.0 && self.sigma_f > 0.0) {
            return Err(invalid("noise levels must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpSample {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub b_true: Array2<f64>,
    pub p_signal: Array2<f64>,
    pub c: Array2<f64>,
}

fn gaussian(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = Normal::new(0.0, sd).expect("positive sd");
    Array2::from_shape_fn((rows, cols), |_| d.sample(rng))
}

/// Orthonormal `p x k` factor from the QR decomposition of a Gaussian matrix.
fn random_orthonormal(p: usize, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = DMatrix::from_fn(p, k, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    Array2::from_shape_fn((p, k), |(i, j)| q[(i, j)])
}

/// Latent-variable model `X_signal = T P' + E`, independent noise columns,
/// `Y = T C + F`. The true coefficients are the population best linear
/// predictor, `P C / (1 + sigma_e^2)` on the signal rows and zero elsewhere.
pub fn generate_dgp(params: &DgpParams) -> Result<DgpSample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let DgpParams { n, k, q, p_signal: ps, p_noise: pn, sigma_e, sigma_f, .. } = *params;
    let t = gaussian(n, k, 1.0, &mut rng);
    let p_sig = random_orthonormal(ps, k, &mut rng);
    let c = gaussian(k, q, 1.0, &mut rng);
    let e = gaussian(n, ps, sigma_e, &mut rng);
    let noise = gaussian(n, pn, sigma_e, &mut rng);
    let f = gaussian(n, q, sigma_f, &mut rng);

    let mut x = Array2::zeros((n, ps + pn));
    x.slice_mut(s![.., ..ps]).assign(&(t.dot(&p_sig.t()) + e));
    x.slice_mut(s![.., ps..]).assign(&noise);
    let y = t.dot(&c) + f;
    let mut b_true = Array2::zeros((ps + pn, q));
    b_true
        .slice_mut(s![..ps, ..])
        .assign(&(p_sig.dot(&c) / (1.0 + sigma_e * sigma_e)));
    Ok(DgpSample { x, y, b_true, p_signal: p_sig, c })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Cellwise,
    Rowwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContaminationSpec {
    pub regime: Regime,
    /// Fraction of rows with at least one shifted cell (cellwise regime).
    pub row_rate: f64,
    pub cell_pct: f64,
    /// Fraction of fully shifted rows (rowwise regime).
    pub row_pct: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for ContaminationSpec {
    fn default() -> Self {
        Self {
            regime: Regime::Cellwise,
            row_rate: 0.70,
            cell_pct: 0.0,
            row_pct: 0.0,
            delta: 10.0,
            seed: 0,
        }
    }
}

impl ContaminationSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("row_rate", self.row_rate),
            ("cell_pct", self.cell_pct),
            ("row_pct", self.row_pct),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !self.delta.is_finite() {
            return Err(invalid("delta must be finite"));
        }
        Ok(())
    }

    /// Contamination level on the regime's own axis.
    pub fn level(&self) -> f64 {
        match self.regime {
            Regime::Cellwise => self.cell_pct,
            Regime::Rowwise => self.row_pct,
        }
    }

    pub fn with_level(self, level: f64) -> Self {
        match self.regime {
            Regime::Cellwise => Self { cell_pct: level, ..self },
            Regime::Rowwise => Self { row_pct: level, ..self },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contaminated {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    /// 1 marks an injected cell.
    pub truth_x: Array2<u8>,
    pub truth_y: Array2<u8>,
}

impl Contaminated {
    /// Per-row indicator of any injected cell in either block.
    pub fn truth_rows(&self) -> Array1<u8> {
        Array1::from_shape_fn(self.x.nrows(), |i| {
            u8::from(self.truth_x.row(i).iter().chain(self.truth_y.row(i)).any(|&v| v == 1))
        })
    }
}

fn affected_rows(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = ((rate * n as f64).ceil() as usize).min(n);
    let mut rows = rand::seq::index::sample(rng, n, m).into_vec();
    rows.sort_unstable();
    rows
}

/// Poisson draw clamped to `[1, max]`.
fn truncated_count(mean: f64, max: usize, rng: &mut ChaCha8Rng) -> usize {
    let draw = Poisson::new(mean).map_or(0.0, |d| d.sample(rng));
    (draw as usize).clamp(1, max)
}

fn shift_cells(
    z: &mut Array2<f64>,
    truth: &mut Array2<u8>,
    row: usize,
    ncols: usize,
    mean: f64,
    delta: f64,
    rng: &mut ChaCha8Rng,
) {
    let count = truncated_count(mean, ncols, rng);
    for j in rand::seq::index::sample(rng, ncols, count) {
        z[[row, j]] += delta;
        truth[[row, j]] = 1;
    }
}

/// Additive `+delta` shifts on a Poisson number of signal-X and Y cells in
/// each of `ceil(row_rate * n)` rows.
pub fn contaminate_cellwise(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    spec: &ContaminationSpec,
    p_signal: usize,
) -> Result<Contaminated> {
    spec.validate()?;
    check_blocks(&x, &y, p_signal)?;
    let mut out = Contaminated {
        x: x.to_owned(),
        y: y.to_owned(),
        truth_x: Array2::zeros(x.dim()),
        truth_y: Array2::zeros(y.dim()),
    };
    if spec.cell_pct == 0.0 {
        return Ok(out);
    }
    let q = y.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in affected_rows(x.nrows(), spec.row_rate, &mut rng) {
        let (mx, my) = (spec.cell_pct * p_signal as f64, spec.cell_pct * q as f64);
        shift_cells(&mut out.x, &mut out.truth_x, i, p_signal, mx, spec.delta, &mut rng);
        shift_cells(&mut out.y, &mut out.truth_y, i, q, my, spec.delta, &mut rng);
    }
    Ok(out)
}

/// Shifts every signal-X and every Y cell of `ceil(row_pct * n)` rows.
pub fn contaminate_rowwise(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    spec: &ContaminationSpec,
    p_signal: usize,
) -> Result<Contaminated> {
    spec.validate()?;
    check_blocks(&x, &y, p_signal)?;
    let mut out = Contaminated {
        x: x.to_owned(),
        y: y.to_owned(),
        truth_x: Array2::zeros(x.dim()),
        truth_y: Array2::zeros(y.dim()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in affected_rows(x.nrows(), spec.row_pct, &mut rng) {
        out.x.slice_mut(s![i, ..p_signal]).mapv_inplace(|v| v + spec.delta);
        out.truth_x.slice_mut(s![i, ..p_signal]).fill(1);
        out.y.row_mut(i).mapv_inplace(|v| v + spec.delta);
        out.truth_y.row_mut(i).fill(1);
    }
    Ok(out)
}

pub fn contaminate(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    spec: &ContaminationSpec,
    p_signal: usize,
) -> Result<Contaminated> {
    match spec.regime {
        Regime::Cellwise => contaminate_cellwise(x, y, spec, p_signal),
        Regime::Rowwise => contaminate_rowwise(x, y, spec, p_signal),
    }
}

fn check_blocks(x: &ArrayView2<'_, f64>, y: &ArrayView2<'_, f64>, p_signal: usize) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(mismatch(format!("X has {} rows but Y has {}", x.nrows(), y.nrows())));
    }
    if p_signal > x.ncols() {
        return Err(invalid(format!("p_signal = {p_signal} exceeds {} columns", x.ncols())));
    }
    Ok(())
}

pub fn mse_b(b_hat: &Array2<f64>, b_true: &Array2<f64>) -> Result<f64> {
    if b_hat.dim() != b_true.dim() {
        return Err(mismatch(format!("{:?} vs {:?}", b_hat.dim(), b_true.dim())));
    }
    let (p, q) = b_hat.dim();
    Ok((b_hat - b_true).mapv(|v| v * v).sum() / (p * q) as f64)
}

/// Precision, recall and F1 of the selected X variables against the signal
/// indices `0..p_signal`.
pub fn selection_f1(model: &TwoblockModel, p_signal: usize, p_noise: usize) -> Result<(f64, f64, f64)> {
    let p = model.x_weights.nrows();
    if p != p_signal + p_noise {
        return Err(mismatch(format!("model has {p} variables, expected {}", p_signal + p_noise)));
    }
    let selected = model.selected_x_variables();
    if selected.is_empty() {
        log::warn!("no variables selected; selection metrics set to 0");
        return Ok((0.0, 0.0, 0.0));
    }
    let tp = selected.iter().filter(|&&j| j < p_signal).count() as f64;
    let precision = tp / selected.len() as f64;
    let recall = tp / p_signal as f64;
    let f1 = if tp > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok((precision, recall, f1))
}

/// Confusion-matrix metrics. A metric with a zero denominator is absent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Detection {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl Detection {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Self {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

/// Cellwise (or rowwise, for `n x 1` inputs) detection quality.
pub fn detection_metrics(flagged: ArrayView2<'_, u8>, truth: ArrayView2<'_, u8>) -> Result<Detection> {
    if flagged.dim() != truth.dim() {
        return Err(mismatch(format!("flags {:?} vs truth {:?}", flagged.dim(), truth.dim())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&f, &t) in flagged.iter().zip(truth.iter()) {
        match (f != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(Detection::from_counts(tp, fp, fn_))
}

/// Per-method settings of the replicate runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSettings {
    pub k_x: usize,
    pub k_y: usize,
    /// Fixed sparsity for TB sparse; `None` selects it by CV like CRTB sparse.
    pub tb_sparse_eta: Option<f64>,
    pub cv: CvGrid,
    /// Robust loop settings; components and sparsity are overridden.
    pub crtb: CrtbConfig,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            k_x: 3,
            k_y: 3,
            tb_sparse_eta: Some(0.5),
            cv: CvGrid::default(),
            crtb: CrtbConfig::default(),
        }
    }
}

impl MethodSettings {
    fn config(&self, method: Method) -> CrtbConfig {
        let base = CrtbConfig { k_x: self.k_x, k_y: self.k_y, ..self.crtb.clone() };
        if method.is_robust() {
            base
        } else {
            CrtbConfig {
                location: LocationKind::Mean,
                scale: RobustScaleKind::Std,
                ..base
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: Method,
    pub level: f64,
    pub mse_b: Option<f64>,
    pub selection: Option<(f64, f64, f64)>,
    pub det_x: Detection,
    pub det_y: Detection,
    pub eta_chosen: Option<f64>,
    pub n_iter: Option<usize>,
    pub converged: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub regime: Regime,
    pub level: f64,
    /// Sorted by replicate, then by the order of the requested methods.
    pub records: Vec<ReplicateRecord>,
}

/// Seed of replicate `idx`: first output of ChaCha8 seeded with `master` on
/// stream `idx`.
pub fn replicate_seed(master: u64, idx: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(idx as u64);
    rng.next_u64()
}

fn weight_flags(w: &CaseWeights) -> Array2<u8> {
    w.values.mapv(|v| u8::from(v < crate::crtb::CELL_FLAG_THRESHOLD)).insert_axis(Axis(1))
}

fn detection_for(model: &FittedModel, data: &Contaminated, regime: Regime) -> Result<(Detection, Detection)> {
    let Some(fit) = model.as_crtb() else {
        return Ok((Detection::default(), Detection::default()));
    };
    match regime {
        Regime::Cellwise => Ok((
            detection_metrics(fit.floor_x.flags().view(), data.truth_x.view())?,
            detection_metrics(fit.floor_y.flags().view(), data.truth_y.view())?,
        )),
        Regime::Rowwise => {
            let rows = data.truth_rows().insert_axis(Axis(1));
            Ok((
                detection_metrics(weight_flags(&fit.wx).view(), rows.view())?,
                detection_metrics(weight_flags(&fit.wy).view(), rows.view())?,
            ))
        }
    }
}

fn fit_one(
    method: Method,
    data: &Contaminated,
    settings: &MethodSettings,
    cv_seed: u64,
) -> Result<(FittedModel, Option<f64>)> {
    let cfg = settings.config(method);
    let cv_eta = match (method, settings.tb_sparse_eta) {
        (Method::TbSparse, Some(eta)) => return fit_with_eta(method, data, &cfg, eta),
        (Method::TbSparse, None) | (Method::CrtbSparse, _) => true,
        _ => false,
    };
    if cv_eta {
        let grid = CvGrid { seed: cv_seed, ..settings.cv.clone() };
        let cv = kfold_cv(data.x.view(), data.y.view(), &grid, method, &cfg)?;
        let model = fit_method(method, data.x.view(), data.y.view(), &cv.best)?;
        Ok((model, Some(cv.best.eta_x)))
    } else {
        Ok((fit_method(method, data.x.view(), data.y.view(), &cfg)?, None))
    }
}

fn fit_with_eta(
    method: Method,
    data: &Contaminated,
    cfg: &CrtbConfig,
    eta: f64,
) -> Result<(FittedModel, Option<f64>)> {
    let cfg = CrtbConfig { eta_x: eta, eta_y: eta, ..cfg.clone() };
    Ok((fit_method(method, data.x.view(), data.y.view(), &cfg)?, Some(eta)))
}

fn evaluate(
    method: Method,
    data: &Contaminated,
    sample: &DgpSample,
    dgp: &DgpParams,
    spec: &ContaminationSpec,
    settings: &MethodSettings,
    cv_seed: u64,
) -> Result<ReplicateRecord> {
    let (model, eta_chosen) = fit_one(method, data, settings, cv_seed)?;
    let selection = if method.is_sparse() {
        Some(selection_f1(model.twoblock(), dgp.p_signal, dgp.p_noise)?)
    } else {
        None
    };
    let has_truth = data.truth_x.iter().chain(data.truth_y.iter()).any(|&v| v == 1);
    let (det_x, det_y) = if has_truth {
        detection_for(&model, data, spec.regime)?
    } else {
        (Detection::default(), Detection::default())
    };
    Ok(ReplicateRecord {
        replicate: 0,
        method,
        level: spec.level(),
        mse_b: Some(mse_b(model.coefficients(), &sample.b_true)?),
        selection,
        det_x,
        det_y,
        eta_chosen,
        n_iter: Some(model.n_iter()),
        converged: Some(model.converged()),
        error: None,
    })
}

fn run_replicate(
    idx: usize,
    dgp: &DgpParams,
    spec: &ContaminationSpec,
    methods: &[Method],
    master: u64,
    settings: &MethodSettings,
) -> Vec<ReplicateRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(master, idx));
    let dgp = DgpParams { seed: rng.random(), ..*dgp };
    let spec = ContaminationSpec { seed: rng.random(), ..*spec };
    let cv_seed: u64 = rng.random();
    let failed = |method: Method, e: String| ReplicateRecord {
        replicate: idx,
        method,
        level: spec.level(),
        mse_b: None,
        selection: None,
        det_x: Detection::default(),
        det_y: Detection::default(),
        eta_chosen: None,
        n_iter: None,
        converged: None,
        error: Some(e),
    };
    let prepared = generate_dgp(&dgp)
        .and_then(|s| contaminate(s.x.view(), s.y.view(), &spec, dgp.p_signal).map(|c| (s, c)));
    let (sample, data) = match prepared {
        Ok(v) => v,
        Err(e) => return methods.iter().map(|&m| failed(m, e.to_string())).collect(),
    };
    methods
        .iter()
        .map(|&m| match evaluate(m, &data, &sample, &dgp, &spec, settings, cv_seed) {
            Ok(r) => ReplicateRecord { replicate: idx, ..r },
            Err(e) => {
                log::warn!("replicate {idx} method {m} failed: {e}");
                failed(m, e.to_string())
            }
        })
        .collect()
}

/// Runs `replicates` independent replicates in parallel. Replicate `i`
/// draws its data, contamination and CV seeds from [`replicate_seed`], so
/// the same index sees the same clean sample at every contamination level.
pub fn run_scenario(
    dgp: &DgpParams,
    spec: &ContaminationSpec,
    methods: &[Method],
    replicates: usize,
    seed: u64,
    settings: &MethodSettings,
) -> Result<ScenarioResult> {
    dgp.validate()?;
    spec.validate()?;
    if methods.is_empty() || replicates == 0 {
        return Err(invalid("need at least one method and one replicate"));
    }
    let records = (0..replicates)
        .into_par_iter()
        .map(|i| run_replicate(i, dgp, spec, methods, seed, settings))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(ScenarioResult { regime: spec.regime, level: spec.level(), records })
}

impl ScenarioResult {
    pub fn values(&self, method: Method, f: impl Fn(&ReplicateRecord) -> Option<f64>) -> Vec<f64> {
        self.records.iter().filter(|r| r.method == method).filter_map(f).collect()
    }

    pub fn mse(&self, method: Method) -> Vec<f64> {
        self.values(method, |r| r.mse_b)
    }
}

pub fn median_of(v: &[f64]) -> Option<f64> {
    crate::numkernel::median(v).ok()
}

pub fn mean_of(v: &[f64]) -> Option<f64> {
    crate::numkernel::mean(v).ok()
}

/// `mean MSE(level) / mean MSE(first level) - 1` per level of a sweep.
pub fn relative_increase(results: &[ScenarioResult], method: Method) -> Vec<(f64, Option<f64>)> {
    let base = results.first().and_then(|r| mean_of(&r.mse(method)));
    results
        .iter()
        .map(|r| {
            let inc = match (mean_of(&r.mse(method)), base) {
                (Some(m), Some(b)) if b > 0.0 => Some(m / b - 1.0),
                _ => None,
            };
            (r.level, inc)
        })
        .collect()
}

pub const RECORD_COLUMNS: [&str; 17] = [
    "replicate",
    "method",
    "cell_pct",
    "mse_b",
    "sel_precision",
    "sel_recall",
    "sel_f1",
    "det_precision_x",
    "det_recall_x",
    "det_f1_x",
    "det_precision_y",
    "det_recall_y",
    "det_f1_y",
    "eta_chosen",
    "n_iter",
    "converged",
    "error",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per (replicate, method). The `cell_pct` column carries the
/// contamination level of the regime (row fraction for rowwise runs).
pub fn records_csv(results: &[ScenarioResult]) -> String {
    let mut s = RECORD_COLUMNS.join(",");
    s.push('\n');
    for res in results {
        for r in &res.records {
            let sel = r.selection.map(|(p, rc, f)| [p, rc, f]);
            let fields = [
                r.replicate.to_string(),
                r.method.to_string(),
                r.level.to_string(),
                opt(r.mse_b),
                opt(sel.map(|v| v[0])),
                opt(sel.map(|v| v[1])),
                opt(sel.map(|v| v[2])),
                opt(r.det_x.precision),
                opt(r.det_x.recall),
                opt(r.det_x.f1),
                opt(r.det_y.precision),
                opt(r.det_y.recall),
                opt(r.det_y.f1),
                opt(r.eta_chosen),
                opt(r.n_iter),
                opt(r.converged),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            ];
            s.push_str(&fields.join(","));
            s.push('\n');
        }
    }
    s
}

/// Aggregate table: one row per (level, method).
pub fn summary_csv(results: &[ScenarioResult], methods: &[Method]) -> String {
    let mut s = String::from(
        "method,cell_pct,n_ok,n_failed,mse_b_mean,mse_b_sd,mse_b_median,sel_f1_mean,det_f1_x_mean,det_f1_y_mean,n_iter_mean,converged_rate\n",
    );
    for res in results {
        for &m in methods {
            let mse = res.mse(m);
            let total = res.records.iter().filter(|r| r.method == m).count();
            let sd = (mse.len() > 1).then(|| Array1::from(mse.clone()).std(1.0));
            let sel = res.values(m, |r| r.selection.map(|v| v.2));
            let dx = res.values(m, |r| r.det_x.f1);
            let dy = res.values(m, |r| r.det_y.f1);
            let it = res.values(m, |r| r.n_iter.map(|v| v as f64));
            let conv = res.values(m, |r| r.converged.map(|c| f64::from(u8::from(c))));
            writeln!(
                s,
                "{m},{},{},{},{},{},{},{},{},{},{},{}",
                res.level,
                mse.len(),
                total - mse.len(),
                opt(mean_of(&mse)),
                opt(sd),
                opt(median_of(&mse)),
                opt(mean_of(&sel)),
                opt(mean_of(&dx)),
                opt(mean_of(&dy)),
                opt(mean_of(&it)),
                opt(mean_of(&conv)),
            )
            .expect("write to String");
        }
    }
    s
}

/// A complete simulation study: one scenario per contamination level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub dgp: DgpParams,
    pub contamination: ContaminationSpec,
    pub levels: Vec<f64>,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub seed: u64,
    pub settings: MethodSettings,
}

pub const PRESET_NAMES: [&str; 4] = ["cellwise-p30", "cellwise-p100", "rowwise-p30", "sweep-p100"];

fn grid(step: f64, last: usize) -> Vec<f64> {
    (0..=last).map(|i| (i as f64 * step * 100.0).round() / 100.0).collect()
}

pub fn preset(name: &str) -> Option<Scenario> {
    let base = Scenario {
        name: name.to_string(),
        dgp: DgpParams::default(),
        contamination: ContaminationSpec::default(),
        levels: grid(0.05, 4),
        methods: vec![Method::Tb, Method::Crtb, Method::TbSparse, Method::CrtbSparse],
        replicates: 50,
        seed: 2024,
        settings: MethodSettings::default(),
    };
    let p100 = DgpParams { p_noise: 80, ..DgpParams::default() };
    Some(match name {
        "cellwise-p30" => base,
        "cellwise-p100" => Scenario { dgp: p100, ..base },
        "rowwise-p30" => Scenario {
            contamination: ContaminationSpec { regime: Regime::Rowwise, ..ContaminationSpec::default() },
            levels: grid(0.05, 5),
            ..base
        },
        "sweep-p100" => Scenario {
            dgp: p100,
            levels: grid(0.05, 7),
            methods: vec![Method::Tb, Method::Crtb],
            ..base
        },
        _ => return None,
    })
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.contamination.validate()?;
        if self.levels.is_empty() {
            return Err(invalid("scenario has no contamination levels"));
        }
        for &l in &self.levels {
            self.contamination.with_level(l).validate()?;
        }
        Ok(())
    }

    pub fn run(&self) -> Result<Vec<ScenarioResult>> {
        self.validate()?;
        self.levels
            .iter()
            .map(|&l| {
                run_scenario(
                    &self.dgp,
                    &self.contamination.with_level(l),
                    &self.methods,
                    self.replicates,
                    self.seed,
                    &self.settings,
                )
            })
            .collect()
    }
}
