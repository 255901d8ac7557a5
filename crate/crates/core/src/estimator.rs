//! Method dispatch over the plain and robust estimators, plus the on-disk
//! model artifact.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::crtb::{fit_crtb, intercept, predict_linear, rescale_coefficients, CrtbConfig, CrtbFit};
use crate::error::{invalid, mismatch, CrtbError, Result};
use crate::numkernel::{LocationKind, RobustScaleKind};
use crate::preprocess::{fit_scaler, transform, ScalingModel};
use crate::twoblock::{fit_twoblock, TwoblockModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Tb,
    TbSparse,
    Crtb,
    CrtbSparse,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Tb, Method::Crtb, Method::TbSparse, Method::CrtbSparse];

    pub fn is_sparse(self) -> bool {
        matches!(self, Method::TbSparse | Method::CrtbSparse)
    }

    pub fn is_robust(self) -> bool {
        matches!(self, Method::Crtb | Method::CrtbSparse)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Tb => "tb",
            Method::TbSparse => "tb-sparse",
            Method::Crtb => "crtb",
            Method::CrtbSparse => "crtb-sparse",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CrtbError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method '{s}' (tb, tb-sparse, crtb, crtb-sparse)")))
    }
}

/// Non-robust twoblock fit on standardized data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TbFit {
    pub location: LocationKind,
    pub scale: RobustScaleKind,
    pub model: TwoblockModel,
    pub scaler_x: ScalingModel,
    pub scaler_y: ScalingModel,
    pub coefficients: Array2<f64>,
    pub intercept: Array1<f64>,
}

pub fn fit_tb(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    k_x: usize,
    k_y: usize,
    eta_x: f64,
    eta_y: f64,
    location: LocationKind,
    scale: RobustScaleKind,
) -> Result<TbFit> {
    if x.nrows() != y.nrows() {
        return Err(mismatch(format!(
            "X has {} rows but Y has {} rows",
            x.nrows(),
            y.nrows()
        )));
    }
    let scaler_x = fit_scaler(x, location, scale)?;
    let scaler_y = fit_scaler(y, location, scale)?;
    let xs = transform(x, &scaler_x)?;
    let ys = transform(y, &scaler_y)?;
    let model = fit_twoblock(xs.view(), ys.view(), k_x, k_y, eta_x, eta_y)?;
    let coefficients = rescale_coefficients(&model.coefficients, &scaler_x, &scaler_y)?;
    let icpt = intercept(y, x, &coefficients, location)?;
    Ok(TbFit {
        location,
        scale,
        model,
        scaler_x,
        scaler_y,
        coefficients,
        intercept: icpt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedModel {
    Tb(TbFit),
    Crtb(Box<CrtbFit>),
}

impl FittedModel {
    pub fn twoblock(&self) -> &TwoblockModel {
        match self {
            FittedModel::Tb(f) => &f.model,
            FittedModel::Crtb(f) => &f.model,
        }
    }

    pub fn coefficients(&self) -> &Array2<f64> {
        match self {
            FittedModel::Tb(f) => &f.coefficients,
            FittedModel::Crtb(f) => &f.coefficients,
        }
    }

    pub fn intercept(&self) -> &Array1<f64> {
        match self {
            FittedModel::Tb(f) => &f.intercept,
            FittedModel::Crtb(f) => &f.intercept,
        }
    }

    pub fn predict(&self, xnew: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        predict_linear(self.coefficients(), self.intercept(), xnew)
    }

    pub fn as_crtb(&self) -> Option<&CrtbFit> {
        match self {
            FittedModel::Crtb(f) => Some(f),
            FittedModel::Tb(_) => None,
        }
    }

    /// Iterations of the reweighting loop; 1 for the one-shot fit.
    pub fn n_iter(&self) -> usize {
        self.as_crtb().map_or(1, |f| f.n_iter)
    }

    pub fn converged(&self) -> bool {
        self.as_crtb().is_none_or(|f| f.converged)
    }
}

/// Fits `method` using the components, sparsity and standardization of
/// `cfg`. Dense methods ignore the sparsity parameters.
pub fn fit_method(
    method: Method,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    cfg: &CrtbConfig,
) -> Result<FittedModel> {
    let (eta_x, eta_y) = if method.is_sparse() {
        (cfg.eta_x, cfg.eta_y)
    } else {
        (0.0, 0.0)
    };
    if method.is_robust() {
        let cfg = CrtbConfig { eta_x, eta_y, ..cfg.clone() };
        Ok(FittedModel::Crtb(Box::new(fit_crtb(x, y, &cfg)?)))
    } else {
        fit_tb(x, y, cfg.k_x, cfg.k_y, eta_x, eta_y, cfg.location, cfg.scale).map(FittedModel::Tb)
    }
}

const ARTIFACT_FORMAT: &str = "crtb-model";
const ARTIFACT_VERSION: u32 = 1;

/// Self-describing JSON model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub version: u32,
    pub method: Method,
    pub model: FittedModel,
    /// Predictor and response column names, when known.
    #[serde(default)]
    pub x_names: Vec<String>,
    #[serde(default)]
    pub y_names: Vec<String>,
}

impl ModelArtifact {
    pub fn new(method: Method, model: FittedModel) -> Self {
        Self {
            format: ARTIFACT_FORMAT.to_string(),
            version: ARTIFACT_VERSION,
            method,
            model,
            x_names: Vec::new(),
            y_names: Vec::new(),
        }
    }

    pub fn with_names(mut self, x_names: Vec<String>, y_names: Vec<String>) -> Self {
        self.x_names = x_names;
        self.y_names = y_names;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| CrtbError::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let a: Self =
            serde_json::from_str(s).map_err(|e| CrtbError::Serialization(e.to_string()))?;
        if a.format != ARTIFACT_FORMAT || a.version != ARTIFACT_VERSION {
            return Err(CrtbError::Serialization(format!(
                "unsupported artifact {} v{}",
                a.format, a.version
            )));
        }
        Ok(a)
    }
}
