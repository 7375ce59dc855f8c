//! Straight-line fits in transformed coordinates and the transform search
//! used to linearize `y = f(x)` relationships.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A concrete coordinate transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "exponent", rename_all = "lowercase")]
pub enum TransformKind {
    Identity,
    Log,
    Power(f64),
}

/// A dictionary entry; [`TransformFamily::Power`] stands for every exponent of a [`PowerGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformFamily {
    Identity,
    Log,
    Power,
}

impl TransformFamily {
    pub const ALL: [TransformFamily; 3] = [TransformFamily::Identity, TransformFamily::Log, TransformFamily::Power];
}

impl TransformKind {
    pub fn family(&self) -> TransformFamily {
        match self {
            TransformKind::Identity => TransformFamily::Identity,
            TransformKind::Log => TransformFamily::Log,
            TransformKind::Power(_) => TransformFamily::Power,
        }
    }

    /// Number of free parameters the transform itself carries.
    pub fn free_parameters(&self) -> usize {
        match self {
            TransformKind::Power(_) => 1,
            _ => 0,
        }
    }

    pub fn apply(&self, v: f64) -> Result<f64> {
        apply_transform(*self, v)
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformKind::Identity => f.write_str("identity"),
            TransformKind::Log => f.write_str("log"),
            TransformKind::Power(e) => write!(f, "power({e})"),
        }
    }
}

pub fn apply_transform(t: TransformKind, v: f64) -> Result<f64> {
    let domain = || Error::TransformDomain {
        transform: t.to_string(),
        value: v,
    };
    if !v.is_finite() {
        return Err(domain());
    }
    let out = match t {
        TransformKind::Identity => v,
        TransformKind::Log => {
            if v <= 0.0 {
                return Err(domain());
            }
            v.ln()
        }
        TransformKind::Power(e) => {
            if !e.is_finite() || e == 0.0 {
                return Err(domain());
            }
            let integral = e.fract() == 0.0;
            if v < 0.0 && !integral || v == 0.0 && e < 0.0 {
                return Err(domain());
            }
            v.powf(e)
        }
    };
    if out.is_finite() {
        Ok(out)
    } else {
        Err(domain())
    }
}

/// Least-squares line `y ≈ slope·x + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
    pub rss: f64,
    pub r2: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

fn centered_mean(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    m + v.iter().map(|x| x - m).sum::<f64>() / n
}

/// Ordinary least squares through the 2×2 normal equations, with `x` mean-centred.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!(
            "xs and ys differ in length ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Singular(format!("{} points cannot determine a line", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite regression input".into()));
    }
    let x_mean = centered_mean(xs);
    let y_mean = centered_mean(ys);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - x_mean;
        sxx += dx * dx;
        sxy += dx * (y - y_mean);
    }
    let x_scale = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if sxx == 0.0 || sxx <= xs.len() as f64 * (1e-14 * x_scale).powi(2) {
        return Err(Error::Singular("abscissae have zero variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let residuals: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| y - (slope * (x - x_mean) + y_mean))
        .collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let tss: f64 = ys.iter().map(|y| (y - y_mean).powi(2)).sum();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    if !(slope.is_finite() && intercept.is_finite() && rss.is_finite()) {
        return Err(Error::Singular("normal equations produced non-finite values".into()));
    }
    Ok(LinearFit {
        slope,
        intercept,
        residuals,
        rss,
        r2,
    })
}

/// Exponent candidates for power transforms: a coarse lattice, optionally
/// refined around its best point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerGrid {
    coarse: Vec<f64>,
    /// Spacing of the coarse lattice; the refinement spans one coarse step each side.
    coarse_step: f64,
    fine_step: Option<f64>,
}

impl Default for PowerGrid {
    /// `[-1, 1]` at step 0.01 (zero excluded), refined at step 0.001.
    fn default() -> Self {
        Self::lattice(-1.0, 1.0, 0.01, 0.005, Some(0.001))
    }
}

/// `k·step` computed as `k / (1/step)` when `1/step` is integral, so that
/// decimal lattices hit values like 0.123 exactly.
fn lattice_value(k: i64, step: f64) -> f64 {
    let inv = 1.0 / step;
    if (inv - inv.round()).abs() < 1e-9 {
        k as f64 / inv.round()
    } else {
        k as f64 * step
    }
}

impl PowerGrid {
    /// Lattice `k·step` over `[lo, hi]`, skipping `|e| < exclude_below`.
    pub fn lattice(lo: f64, hi: f64, step: f64, exclude_below: f64, fine_step: Option<f64>) -> Self {
        assert!(lo < hi && step > 0.0, "invalid power lattice");
        let k_lo = (lo / step - 1e-9).ceil() as i64;
        let k_hi = (hi / step + 1e-9).floor() as i64;
        let coarse = (k_lo..=k_hi)
            .map(|k| lattice_value(k, step))
            .filter(|e| e.abs() >= exclude_below && *e != 0.0)
            .collect();
        Self {
            coarse,
            coarse_step: step,
            fine_step,
        }
    }

    /// Exactly the given exponents, no refinement.
    pub fn from_points(points: Vec<f64>) -> Self {
        let points: Vec<f64> = points.into_iter().filter(|e| e.is_finite() && *e != 0.0).collect();
        Self {
            coarse: points,
            coarse_step: 0.0,
            fine_step: None,
        }
    }

    pub fn coarse_points(&self) -> &[f64] {
        &self.coarse
    }

    fn fine_points(&self, center: f64) -> Vec<f64> {
        let Some(fine) = self.fine_step else {
            return Vec::new();
        };
        if fine <= 0.0 || self.coarse_step <= fine {
            return Vec::new();
        }
        let radius = (self.coarse_step / fine).round() as i64;
        let center_k = (center / fine).round() as i64;
        (center_k - radius..=center_k + radius)
            .filter(|&k| k != center_k && k != 0)
            .map(|k| lattice_value(k, fine))
            .collect()
    }

    /// Minimizes `objective` over the lattice then over the refinement
    /// around the coarse winner. `None` marks an infeasible exponent.
    /// Ties keep the earlier candidate.
    pub fn search(&self, mut objective: impl FnMut(f64) -> Option<f64>) -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        let mut consider = |e: f64, best: &mut Option<(f64, f64)>| {
            if let Some(v) = objective(e).filter(|v| v.is_finite()) {
                if best.is_none_or(|(_, b)| v < b) {
                    *best = Some((e, v));
                }
            }
        };
        for &e in &self.coarse {
            consider(e, &mut best);
        }
        let (center, _) = best?;
        for e in self.fine_points(center) {
            consider(e, &mut best);
        }
        best
    }
}

/// Result of a transform search: `gy(y) ≈ slope·gx(x) + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSelection {
    pub gy: TransformKind,
    pub gx: TransformKind,
    pub fit: LinearFit,
    /// Residual sum of squares in the projected space; equals `fit.rss`.
    pub loss: f64,
}

fn transformed(t: TransformKind, v: &[f64]) -> Option<Vec<f64>> {
    v.iter().map(|&x| apply_transform(t, x).ok()).collect()
}

/// Best fit for one `(gy, gx)` family pair; power families on `x` are searched over `grid`.
/// Returns `None` when every candidate is infeasible.
pub fn fit_transform_pair(
    xs: &[f64],
    ys: &[f64],
    gy: TransformFamily,
    gx: TransformFamily,
    grid: &PowerGrid,
) -> Option<TransformSelection> {
    let gy = match gy {
        TransformFamily::Identity => TransformKind::Identity,
        TransformFamily::Log => TransformKind::Log,
        // rss is compared across response spaces, so a response power with a
        // small exponent would win purely by shrinking the scale
        TransformFamily::Power => return None,
    };
    let y = transformed(gy, ys)?;
    let fit_with = |gx: TransformKind| -> Option<TransformSelection> {
        let x = transformed(gx, xs)?;
        let fit = linear_fit(&x, &y).ok()?;
        Some(TransformSelection {
            gy,
            gx,
            loss: fit.rss,
            fit,
        })
    };
    match gx {
        TransformFamily::Identity => fit_with(TransformKind::Identity),
        TransformFamily::Log => fit_with(TransformKind::Log),
        TransformFamily::Power => {
            let (e, _) = grid.search(|e| fit_with(TransformKind::Power(e)).map(|s| s.loss))?;
            fit_with(TransformKind::Power(e))
        }
    }
}

fn preference_key(s: &TransformSelection) -> (usize, TransformFamily, TransformFamily) {
    (
        s.gy.free_parameters() + s.gx.free_parameters(),
        s.gy.family(),
        s.gx.family(),
    )
}

fn rss_tie_tolerance(a: &TransformSelection, b: &TransformSelection, ys: &[f64]) -> f64 {
    // roundoff floor for exact fits, on the larger of the two response scales
    let scale = [a.gy, b.gy]
        .iter()
        .filter_map(|&t| transformed(t, ys))
        .map(|v| v.iter().map(|x| x * x).sum::<f64>())
        .fold(0.0f64, f64::max);
    1e-12 * a.loss.max(b.loss) + 1e2 * f64::EPSILON * f64::EPSILON * scale
}

/// Exhaustive search over every `(gy, gx)` pair drawn from `dict`.
///
/// Power entries apply to the abscissa only and are expanded over `power_grid`.
/// The minimal-rss pair wins; pairs within 1e-12 relative rss are resolved
/// towards fewer transform parameters, then by family order
/// (identity < log < power) on `gy` and then `gx`.
pub fn select_transforms(
    xs: &[f64],
    ys: &[f64],
    dict: &[TransformFamily],
    power_grid: &PowerGrid,
) -> Result<TransformSelection> {
    let mut families: Vec<TransformFamily> = dict.to_vec();
    families.sort();
    families.dedup();
    let mut candidates: Vec<TransformSelection> = families
        .iter()
        .flat_map(|&gy| families.iter().map(move |&gx| (gy, gx)))
        .filter_map(|(gy, gx)| fit_transform_pair(xs, ys, gy, gx, power_grid))
        .collect();
    candidates.sort_by_key(preference_key);
    let mut best: Option<TransformSelection> = None;
    for c in candidates {
        match &best {
            Some(b) if c.loss >= b.loss - rss_tie_tolerance(b, &c, ys) => {}
            _ => best = Some(c),
        }
    }
    best.ok_or(Error::NoFeasibleTransform)
}

/// Joint choice for two arrays sharing an abscissa, scored by `ℓ_first + ℓ_second`.
///
/// The two choices do not interact, so the joint minimum is the pair of
/// per-array minima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSelection {
    pub first: TransformSelection,
    pub second: TransformSelection,
    pub joint_loss: f64,
}

pub fn select_joint_transforms(
    xs: &[f64],
    first: &[f64],
    second: &[f64],
    dict: &[TransformFamily],
    power_grid: &PowerGrid,
) -> Result<JointSelection> {
    let first = select_transforms(xs, first, dict, power_grid)?;
    let second = select_transforms(xs, second, dict, power_grid)?;
    Ok(JointSelection {
        joint_loss: first.loss + second.loss,
        first,
        second,
    })
}
