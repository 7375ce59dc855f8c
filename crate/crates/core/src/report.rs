use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Law, LossGrid, ScalingLaw};
use crate::piecewise::PiecewiseDetails;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Piecewise,
    Nonlinear,
}

impl fmt::Display for FitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitMethod::Piecewise => "piecewise",
            FitMethod::Nonlinear => "nonlinear",
        })
    }
}

impl std::str::FromStr for FitMethod {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "piecewise" => Ok(FitMethod::Piecewise),
            "nonlinear" => Ok(FitMethod::Nonlinear),
            other => Err(crate::Error::InvalidInput(format!("unknown fit method '{other}'"))),
        }
    }
}

/// Something a fit skipped or could not guarantee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitWarning {
    /// A model size left out of a stage.
    ModelSizeExcluded {
        n: f64,
        stage: String,
        reason: String,
    },
    /// Loss differences that were zero or negative and could not enter a log fit.
    DroppedDifferences {
        n: f64,
        count: usize,
    },
    /// Data points without a partner at `λ·d`.
    UnpairedPoints {
        n: f64,
        count: usize,
    },
    /// The named exponent has no influence on the fit.
    Unidentifiable {
        parameter: String,
    },
    RefinementNotConverged {
        iterations: usize,
    },
    CapSkipped {
        cap: f64,
        reason: String,
    },
    StartsFailed {
        failed: usize,
        total: usize,
    },
}

impl fmt::Display for FitWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitWarning::ModelSizeExcluded { n, stage, reason } => {
                write!(f, "n={n:e} excluded from {stage}: {reason}")
            }
            FitWarning::DroppedDifferences { n, count } => {
                write!(f, "n={n:e}: {count} non-positive loss differences dropped")
            }
            FitWarning::UnpairedPoints { n, count } => {
                write!(f, "n={n:e}: {count} points have no partner at lambda*d")
            }
            FitWarning::Unidentifiable { parameter } => {
                write!(f, "{parameter} is not identifiable from the data")
            }
            FitWarning::RefinementNotConverged { iterations } => {
                write!(
                    f,
                    "exponent refinement stopped after {iterations} iterations without converging"
                )
            }
            FitWarning::CapSkipped { cap, reason } => write!(f, "cap {cap:e} skipped: {reason}"),
            FitWarning::StartsFailed { failed, total } => {
                write!(f, "{failed} of {total} starts failed to evaluate")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointResidual {
    pub n: f64,
    pub d: f64,
    pub actual: f64,
    pub predicted: f64,
    pub rel_err: f64,
}

/// A fitted law together with how well it reproduces its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub law: Law,
    pub method: FitMethod,
    pub points: Vec<PointResidual>,
    pub mean_rel_err: f64,
    pub max_rel_err: f64,
    /// Sum of squared loss-space residuals over the grid.
    pub objective: f64,
    pub warnings: Vec<FitWarning>,
    /// Free-form provenance notes (optimizer choices, objective space).
    pub notes: Vec<String>,
    pub piecewise: Option<PiecewiseDetails>,
}

pub fn relative_error(predicted: f64, actual: f64) -> f64 {
    (predicted - actual).abs() / actual
}

impl FitReport {
    /// Evaluates `law` on every grid point.
    pub fn from_law(law: Law, grid: &LossGrid, method: FitMethod) -> Result<Self> {
        let points = grid
            .points()
            .iter()
            .map(|p| {
                let predicted = law.loss(p.n, p.d)?;
                Ok(PointResidual {
                    n: p.n,
                    d: p.d,
                    actual: p.loss,
                    predicted,
                    rel_err: relative_error(predicted, p.loss),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_rel_err = points.iter().map(|p| p.rel_err).sum::<f64>() / points.len() as f64;
        let max_rel_err = points.iter().map(|p| p.rel_err).fold(0.0, f64::max);
        let objective = points.iter().map(|p| (p.predicted - p.actual).powi(2)).sum();
        Ok(Self {
            law,
            method,
            points,
            mean_rel_err,
            max_rel_err,
            objective,
            warnings: Vec::new(),
            notes: Vec::new(),
            piecewise: None,
        })
    }
}
