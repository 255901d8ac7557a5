//! Psi-function case weights with chi-squared calibrated cutoffs.
//!
//! Distances are always normalized by a (weighted) median before they reach
//! the psi function, so the cutoffs are expressed relative to the chi-squared
//! median: `c = sqrt(chi2_k^{-1}(alpha) / chi2_k^{-1}(0.5))`.

use log::warn;
use ndarray::{Array1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, CrtbError, Result};
use crate::numkernel::{self, chi2_quantile, weighted_median, LocationKind, RobustScaleKind};
use crate::preprocess::{fit_scaler, CellMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiFamily {
    Hampel,
    Huber,
    Fair,
    /// Every case weight is 1 (no reweighting).
    Constant,
}

impl std::str::FromStr for PsiFamily {
    type Err = CrtbError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hampel" => Ok(Self::Hampel),
            "huber" => Ok(Self::Huber),
            "fair" => Ok(Self::Fair),
            "constant" | "none" => Ok(Self::Constant),
            other => Err(invalid(format!("unknown psi family '{other}'"))),
        }
    }
}

/// Psi family plus the probabilities its cutoffs derive from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiSpec {
    pub family: PsiFamily,
    /// (alpha1, alpha2, alpha3); Huber and Fair use only alpha1.
    pub probs: [f64; 3],
}

impl Default for PsiSpec {
    fn default() -> Self {
        Self {
            family: PsiFamily::Hampel,
            probs: [0.75, 0.90, 0.95],
        }
    }
}

impl PsiSpec {
    pub fn new(family: PsiFamily, probs: [f64; 3]) -> Result<Self> {
        let spec = Self { family, probs };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let [a1, a2, a3] = self.probs;
        if !(0.0 < a1 && a1 < a2 && a2 < a3 && a3 < 1.0) {
            return Err(invalid(format!(
                "psi probabilities must satisfy 0 < a1 < a2 < a3 < 1, got {:?}",
                self.probs
            )));
        }
        Ok(())
    }
}

/// Median-relative cutoffs `a < b < r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub a: f64,
    pub b: f64,
    pub r: f64,
}

pub fn hampel_cutoffs(spec: &PsiSpec, k: usize) -> Result<Cutoffs> {
    spec.validate()?;
    let med = chi2_quantile(0.5, k)?;
    let c = |alpha: f64| -> Result<f64> { Ok((chi2_quantile(alpha, k)? / med).sqrt()) };
    let [a1, a2, a3] = spec.probs;
    Ok(Cutoffs {
        a: if a1 == 0.5 { 1.0 } else { c(a1)? },
        b: c(a2)?,
        r: c(a3)?,
    })
}

/// Weight in [0, 1] for a normalized distance `d`.
pub fn psi_weight(d: f64, cut: &Cutoffs, family: PsiFamily) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(invalid(format!("psi weight of negative or NaN distance {d}")));
    }
    let Cutoffs { a, b, r } = *cut;
    Ok(match family {
        PsiFamily::Constant => 1.0,
        PsiFamily::Huber => {
            if d <= a {
                1.0
            } else {
                a / d
            }
        }
        PsiFamily::Fair => {
            let x = 1.0 + d / a;
            1.0 / (x * x)
        }
        PsiFamily::Hampel => {
            if d <= a {
                1.0
            } else if d <= b {
                a / d
            } else if d <= r {
                a * (r - d) / (d * (r - b))
            } else {
                0.0
            }
        }
    })
}

/// Case weights, each in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseWeights {
    pub values: Array1<f64>,
}

impl CaseWeights {
    pub fn ones(n: usize) -> Self {
        Self { values: Array1::ones(n) }
    }

    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(invalid("case weights must lie in [0, 1]"));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn weights_from_distances(
    dist: &[f64],
    norm: f64,
    spec: &PsiSpec,
    k: usize,
) -> Result<CaseWeights> {
    let cut = hampel_cutoffs(spec, k)?;
    let values = dist
        .iter()
        .map(|&d| psi_weight(d / norm, &cut, spec.family))
        .collect::<Result<Array1<f64>>>()?;
    Ok(CaseWeights { values })
}

/// Starting case weights from root-mean-square row distances over the clean
/// cells of a standardized block.
///
/// Rows with every cell flagged carry no evidence and get distance 0.
pub fn starting_weights(
    zs: ArrayView2<'_, f64>,
    mask: &CellMask,
    spec: &PsiSpec,
    k: usize,
) -> Result<CaseWeights> {
    if zs.dim() != mask.dim() {
        return Err(mismatch(format!(
            "block is {:?} but mask is {:?}",
            zs.dim(),
            mask.dim()
        )));
    }
    let n = zs.nrows();
    let mut dist = Vec::with_capacity(n);
    let mut empty_rows = 0;
    for (i, row) in zs.axis_iter(Axis(0)).enumerate() {
        let mut ss = 0.0;
        let mut m = 0usize;
        for (j, &z) in row.iter().enumerate() {
            if mask.is_clean(i, j) {
                ss += z * z;
                m += 1;
            }
        }
        if m == 0 {
            empty_rows += 1;
            dist.push(0.0);
        } else {
            dist.push((ss / m as f64).sqrt());
        }
    }
    if n > 0 && empty_rows == n {
        return Err(CrtbError::DegenerateInitialization(
            "every row has all cells flagged".into(),
        ));
    }
    if empty_rows > 0 {
        warn!("starting weights: {empty_rows} fully flagged rows given weight 1");
    }
    let mut norm = numkernel::median(&dist)?;
    if norm == 0.0 {
        // Over half the rows sit exactly at the center; fall back to the
        // positive distances, or give everyone full weight when there are none.
        let positive: Vec<f64> = dist.iter().copied().filter(|&d| d > 0.0).collect();
        if positive.is_empty() {
            return Ok(CaseWeights::ones(n));
        }
        norm = numkernel::median(&positive)?;
    }
    weights_from_distances(&dist, norm, spec, k)
}

fn score_distances(t: ArrayView2<'_, f64>, centers: &Array1<f64>, scales: &Array1<f64>) -> Vec<f64> {
    t.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .zip(centers.iter().zip(scales.iter()))
                .map(|(&v, (&c, &s))| {
                    let z = (v - c) / s;
                    z * z
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Dual-reference case-weight update.
///
/// A median/MAD scaler fitted on the reference scores standardizes both score
/// sets; contaminated-score distances are divided by the weighted median of
/// the reference distances (weighted by `prior`) and passed through the psi
/// function.
pub fn case_weights(
    t_ref: ArrayView2<'_, f64>,
    t_cont: ArrayView2<'_, f64>,
    spec: &PsiSpec,
    prior: &CaseWeights,
) -> Result<CaseWeights> {
    if t_ref.dim() != t_cont.dim() {
        return Err(mismatch(format!(
            "reference scores {:?} vs contaminated scores {:?}",
            t_ref.dim(),
            t_cont.dim()
        )));
    }
    if prior.len() != t_ref.nrows() {
        return Err(mismatch(format!(
            "{} prior weights for {} rows",
            prior.len(),
            t_ref.nrows()
        )));
    }
    let k = t_ref.ncols();
    let scaler = fit_scaler(t_ref, LocationKind::Median, RobustScaleKind::Mad)?;
    let d_ref = score_distances(t_ref, &scaler.centers, &scaler.scales);
    let d_cont = score_distances(t_cont, &scaler.centers, &scaler.scales);
    let prior_w = prior.values.to_vec();
    let norm = weighted_median(&d_ref, &prior_w)
        .map_err(|e| CrtbError::DegenerateScores(e.to_string()))?;
    if !(norm > 0.0) {
        return Err(CrtbError::DegenerateScores(
            "weighted median of reference distances is zero".into(),
        ));
    }
    weights_from_distances(&d_cont, norm, spec, k)
}
