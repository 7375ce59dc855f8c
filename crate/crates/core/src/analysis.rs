//! Downstream products of a fitted law: compute-optimal allocation, held-out
//! evaluation, robustness curves, monotonicity checks, differential
//! diagnostics and surface comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Family, Law, LossGrid, LossPoint, ScalingLaw};
use crate::nonlinear::{fit_nonlinear, MultiStartConfig};
use crate::piecewise::{fit_farseer_with, ratio_differences, PiecewiseConfig, PAIRING_TOLERANCE};
use crate::regression::linear_fit;
use crate::report::{relative_error, FitMethod, FitWarning, PointResidual};

/// FLOPs per parameter per token in `C = k·N·D`.
pub const FLOPS_PER_PARAM_TOKEN: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationConfig {
    pub flops_factor: f64,
    pub n_min: f64,
    pub n_max: f64,
    /// Final bracket width, relative in `n`.
    pub rel_width: f64,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        Self {
            flops_factor: FLOPS_PER_PARAM_TOKEN,
            n_min: 1e6,
            n_max: 1e14,
            rel_width: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationPoint {
    pub c: f64,
    pub n_star: f64,
    pub d_star: f64,
    /// `d_star / n_star`.
    pub ratio: f64,
    pub loss_at_opt: f64,
    /// The minimum sits at an end of the search bracket.
    pub at_boundary: bool,
}

const BRACKET_SCAN: usize = 200;

/// Loss along the budget line, `+inf` where the law cannot be evaluated.
fn budget_loss(law: &impl ScalingLaw, c: f64, k: f64, ln_n: f64) -> f64 {
    let n = ln_n.exp();
    law.loss(n, c / (k * n)).unwrap_or(f64::INFINITY)
}

pub fn optimal_allocation(law: &impl ScalingLaw, c: f64) -> Result<AllocationPoint> {
    optimal_allocation_with(law, c, &AllocationConfig::default())
}

/// Minimizes `L(n, c/(k·n))` over the bracket: a coarse scan of `ln n`
/// picks the best cell pair, then golden-section search refines it.
pub fn optimal_allocation_with(law: &impl ScalingLaw, c: f64, cfg: &AllocationConfig) -> Result<AllocationPoint> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidInput(format!("compute budget must be positive, got {c}")));
    }
    if !(cfg.n_min > 0.0 && cfg.n_max > cfg.n_min && cfg.flops_factor > 0.0 && cfg.rel_width > 0.0) {
        return Err(Error::InvalidInput("invalid allocation search configuration".into()));
    }
    let k = cfg.flops_factor;
    let f = |x: f64| budget_loss(law, c, k, x);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (lo0, hi0) = (cfg.n_min.ln(), cfg.n_max.ln());
    // the budget line need not be unimodal, so bracket the best scan point first
    let scan: Vec<f64> = (0..=BRACKET_SCAN)
        .map(|i| lo0 + (hi0 - lo0) * i as f64 / BRACKET_SCAN as f64)
        .collect();
    let best = (0..scan.len())
        .min_by(|&i, &j| f(scan[i]).total_cmp(&f(scan[j])))
        .expect("non-empty scan");
    let (mut lo, mut hi) = (scan[best.saturating_sub(1)], scan[(best + 1).min(BRACKET_SCAN)]);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > cfg.rel_width {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let ln_n = 0.5 * (lo + hi);
    let n_star = ln_n.exp();
    let d_star = c / (k * n_star);
    let loss_at_opt = law.loss(n_star, d_star)?;
    let at_boundary = ln_n - lo0 <= 2.0 * cfg.rel_width || hi0 - ln_n <= 2.0 * cfg.rel_width;
    Ok(AllocationPoint {
        c,
        n_star,
        d_star,
        ratio: d_star / n_star,
        loss_at_opt,
        at_boundary,
    })
}

pub fn allocation_sweep(law: &(impl ScalingLaw + Sync), c_values: &[f64]) -> Result<Vec<AllocationPoint>> {
    if c_values.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("compute budgets must be sorted".into()));
    }
    c_values.par_iter().map(|&c| optimal_allocation(law, c)).collect()
}

/// An externally supplied training configuration to set against the optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub label: String,
    pub n: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedAllocation {
    pub annotation: Annotation,
    /// `k·n·d` for the annotated configuration.
    pub c: f64,
    pub loss: f64,
    pub optimum: AllocationPoint,
}

/// Compares each configuration with the law's optimum at the same compute.
pub fn annotate_allocations(
    law: &(impl ScalingLaw + Sync),
    annotations: &[Annotation],
) -> Result<Vec<AnnotatedAllocation>> {
    annotations
        .par_iter()
        .map(|a| {
            let c = FLOPS_PER_PARAM_TOKEN * a.n * a.d;
            Ok(AnnotatedAllocation {
                annotation: a.clone(),
                c,
                loss: law.loss(a.n, a.d)?,
                optimum: optimal_allocation(law, c)?,
            })
        })
        .collect()
}

/// `per_decade` log-spaced budgets from `c_min` to `c_max` inclusive.
pub fn budget_ladder(c_min: f64, c_max: f64, per_decade: usize) -> Result<Vec<f64>> {
    if !(c_min > 0.0 && c_max >= c_min && per_decade > 0) {
        return Err(Error::InvalidInput("invalid budget range".into()));
    }
    let steps = ((c_max / c_min).log10() * per_decade as f64).round() as usize;
    Ok((0..=steps)
        .map(|i| c_min * 10f64.powf(i as f64 / per_decade as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub held_out: Vec<PointResidual>,
    pub mean_rel_err: f64,
    pub max_rel_err: f64,
    pub fit_subset_description: String,
}

pub fn evaluate_held_out(law: &impl ScalingLaw, points: &[LossPoint]) -> Result<EvalReport> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no held-out points to evaluate".into()));
    }
    let held_out = points
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
    let mean_rel_err = held_out.iter().map(|p| p.rel_err).sum::<f64>() / held_out.len() as f64;
    let max_rel_err = held_out.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(EvalReport {
        held_out,
        mean_rel_err,
        max_rel_err,
        fit_subset_description: String::new(),
    })
}

/// Fits `family` to `grid` with `method`.
pub fn fit_with_method(
    grid: &LossGrid,
    method: FitMethod,
    family: Family,
    piecewise: &PiecewiseConfig,
    nonlinear: &MultiStartConfig,
) -> Result<Law> {
    match (method, family) {
        (FitMethod::Piecewise, Family::Farseer) => Ok(Law::Farseer(fit_farseer_with(grid, piecewise)?.0)),
        (FitMethod::Piecewise, Family::Chinchilla) => Err(Error::InvalidInput(
            "piecewise fitting is only defined for the farseer family".into(),
        )),
        (FitMethod::Nonlinear, family) => Ok(fit_nonlinear(family, grid, nonlinear)?.law),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RobustnessConfig {
    pub piecewise: PiecewiseConfig,
    pub nonlinear: MultiStartConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub held_out_n: f64,
    pub entries: Vec<(f64, EvalReport)>,
    pub warnings: Vec<FitWarning>,
}

/// Relative tolerance for matching a requested model size to grid values.
pub const MODEL_SIZE_MATCH: f64 = 1e-9;

/// Fits on `{n ≤ cap}` (same tolerance) for each cap, excluding `held_out_n`, and evaluates
/// every point at `held_out_n` (matched within [`MODEL_SIZE_MATCH`]).
pub fn robustness_curve(
    grid: &LossGrid,
    held_out_n: f64,
    caps: &[f64],
    method: FitMethod,
    family: Family,
    cfg: &RobustnessConfig,
) -> Result<RobustnessCurve> {
    let is_held = |n: f64| (n / held_out_n - 1.0).abs() <= MODEL_SIZE_MATCH;
    let held: Vec<LossPoint> = grid.points().iter().copied().filter(|p| is_held(p.n)).collect();
    if held.is_empty() {
        return Err(Error::InvalidInput(format!("grid has no points at n={held_out_n:e}")));
    }
    let outcomes: Vec<(f64, Result<EvalReport>)> = caps
        .par_iter()
        .map(|&cap| {
            let result = grid
                .filter(|p| p.n <= cap * (1.0 + MODEL_SIZE_MATCH) && !is_held(p.n))
                .and_then(|subset| {
                    let law = fit_with_method(&subset, method, family, &cfg.piecewise, &cfg.nonlinear)?;
                    let mut report = evaluate_held_out(&law, &held)?;
                    report.fit_subset_description = format!(
                        "{method} {family} fit on {} points with n <= {cap:e} ({} model sizes)",
                        subset.len(),
                        subset.model_sizes().len()
                    );
                    Ok(report)
                });
            (cap, result)
        })
        .collect();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for (cap, outcome) in outcomes {
        match outcome {
            Ok(report) => entries.push((cap, report)),
            Err(
                e @ (Error::InsufficientData(_)
                | Error::FitFailed(_)
                | Error::ResidualSign { .. }
                | Error::NoFeasibleTransform
                | Error::Singular(_)),
            ) => warnings.push(FitWarning::CapSkipped {
                cap,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(RobustnessCurve {
        held_out_n,
        entries,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    N,
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityViolation {
    pub n: f64,
    pub d: f64,
    pub axis: Axis,
    /// `∂L/∂ln x`; `None` when the law could not be evaluated.
    pub derivative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub samples_per_axis: usize,
    pub checked: usize,
    pub violations: Vec<MonotonicityViolation>,
}

/// `samples` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, samples: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..samples)
        .map(|i| {
            if i == 0 {
                lo
            } else if i + 1 == samples {
                hi
            } else {
                (a + (b - a) * i as f64 / (samples - 1) as f64).exp()
            }
        })
        .collect()
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if lo > 0.0 && hi > lo && hi.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("invalid {name} range [{lo}, {hi}]")))
    }
}

const LOG_STEP: f64 = 1e-4;

/// Central differences of `L` in `ln n` and `ln d` on a log lattice; any
/// non-negative estimate is a violation.
pub fn monotonicity_check(
    law: &(impl ScalingLaw + Sync),
    n_range: (f64, f64),
    d_range: (f64, f64),
    samples_per_axis: usize,
) -> Result<MonotonicityReport> {
    check_range("n", n_range)?;
    check_range("d", d_range)?;
    if samples_per_axis < 2 {
        return Err(Error::InvalidInput("at least 2 samples per axis are required".into()));
    }
    let ns = log_space(n_range.0, n_range.1, samples_per_axis);
    let ds = log_space(d_range.0, d_range.1, samples_per_axis);
    let (up, down) = (LOG_STEP.exp(), (-LOG_STEP).exp());
    let derivative = |f: &dyn Fn(f64) -> Result<f64>, x: f64| -> Option<f64> {
        Some((f(x * up).ok()? - f(x * down).ok()?) / (2.0 * LOG_STEP))
    };
    let violations: Vec<MonotonicityViolation> = ns
        .par_iter()
        .flat_map_iter(|&n| {
            ds.iter().flat_map(move |&d| {
                let dn = derivative(&|x| law.loss(x, d), n);
                let dd = derivative(&|x| law.loss(n, x), d);
                [(Axis::N, dn), (Axis::D, dd)]
                    .into_iter()
                    .filter(|(_, v)| !matches!(v, Some(g) if *g < 0.0))
                    .map(move |(axis, derivative)| MonotonicityViolation { n, d, axis, derivative })
            })
        })
        .collect();
    Ok(MonotonicityReport {
        samples_per_axis,
        checked: ns.len() * ds.len(),
        violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perspective {
    /// `L(n, d) − L(n, λd)` against `d` at fixed `n`.
    DataDiffVsData,
    /// `L(n, d) − L(n, λd)` against `n` at fixed `d`.
    DataDiffVsModel,
    /// `L(n, d) − L(λn, d)` against `d` at fixed `n`.
    ModelDiffVsData,
    /// `L(n, d) − L(λn, d)` against `n` at fixed `d`.
    ModelDiffVsModel,
}

impl Perspective {
    pub const ALL: [Perspective; 4] = [
        Perspective::DataDiffVsData,
        Perspective::DataDiffVsModel,
        Perspective::ModelDiffVsData,
        Perspective::ModelDiffVsModel,
    ];
}

/// One log-log regression of differences against the free axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveFit {
    /// Value of the held-fixed coordinate.
    pub fixed: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveSummary {
    pub perspective: Perspective,
    pub fits: Vec<PerspectiveFit>,
    /// `None` when no slice had three positive differences.
    pub mean_r2: Option<f64>,
    /// `(n, d, difference)` for every matched pair, including non-positive ones.
    pub differences: Vec<(f64, f64, f64)>,
}

impl PerspectiveSummary {
    pub fn available(&self) -> bool {
        self.mean_r2.is_some()
    }
}

fn group_by<K: Fn(&(f64, f64, f64)) -> (f64, f64)>(triples: &[(f64, f64, f64)], key: K) -> Vec<(f64, Vec<(f64, f64)>)> {
    let mut groups: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    for t in triples {
        let (fixed, free) = key(t);
        match groups.iter_mut().find(|g| g.0 == fixed) {
            Some(g) => g.1.push((free, t.2)),
            None => groups.push((fixed, vec![(free, t.2)])),
        }
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    groups
}

fn summarize(perspective: Perspective, differences: Vec<(f64, f64, f64)>) -> PerspectiveSummary {
    let against_data = matches!(perspective, Perspective::DataDiffVsData | Perspective::ModelDiffVsData);
    let groups = if against_data {
        group_by(&differences, |t| (t.0, t.1))
    } else {
        group_by(&differences, |t| (t.1, t.0))
    };
    let fits: Vec<PerspectiveFit> = groups
        .into_iter()
        .filter_map(|(fixed, samples)| {
            let positive: Vec<(f64, f64)> = samples.into_iter().filter(|s| s.1 > 0.0).collect();
            if positive.len() < 3 {
                return None;
            }
            let x: Vec<f64> = positive.iter().map(|s| s.0.ln()).collect();
            let y: Vec<f64> = positive.iter().map(|s| s.1.ln()).collect();
            let fit = linear_fit(&x, &y).ok()?;
            Some(PerspectiveFit {
                fixed,
                slope: fit.slope,
                intercept: fit.intercept,
                r2: fit.r2,
                points: positive.len(),
            })
        })
        .collect();
    let mean_r2 = (!fits.is_empty()).then(|| fits.iter().map(|f| f.r2).sum::<f64>() / fits.len() as f64);
    PerspectiveSummary {
        perspective,
        fits,
        mean_r2,
        differences,
    }
}

/// The four difference-regression views of a grid, differencing both axes by the grid's `λ`.
pub fn differential_perspectives(grid: &LossGrid) -> Result<Vec<PerspectiveSummary>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty grid".into()));
    }
    let lambda = grid.lambda();
    let mut data_diffs = Vec::new();
    for row in grid.by_model_size() {
        let (diffs, _) = ratio_differences(&row.points, lambda, PAIRING_TOLERANCE);
        data_diffs.extend(diffs.into_iter().map(|(d, r)| (row.n, d, r)));
    }
    let mut columns: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    for p in grid.points() {
        match columns.iter_mut().find(|c| c.0 == p.d) {
            Some(c) => c.1.push((p.n, p.loss)),
            None => columns.push((p.d, vec![(p.n, p.loss)])),
        }
    }
    let mut model_diffs = Vec::new();
    for (d, mut samples) in columns {
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (diffs, _) = ratio_differences(&samples, lambda, PAIRING_TOLERANCE);
        model_diffs.extend(diffs.into_iter().map(|(n, r)| (n, d, r)));
    }
    Ok(Perspective::ALL
        .into_iter()
        .map(|p| {
            let diffs = match p {
                Perspective::DataDiffVsData | Perspective::DataDiffVsModel => data_diffs.clone(),
                _ => model_diffs.clone(),
            };
            summarize(p, diffs)
        })
        .collect())
}

/// A point where the relative difference changes sign along a lattice edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroCrossing {
    pub n: f64,
    pub d: f64,
    /// Direction of the edge the crossing lies on.
    pub axis: Axis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDelta {
    pub ns: Vec<f64>,
    pub ds: Vec<f64>,
    /// `delta[i][j] = (L_a − L_b)/L_b` at `(ns[i], ds[j])`; `None` where either law fails.
    pub delta: Vec<Vec<Option<f64>>>,
    pub zero_crossings: Vec<ZeroCrossing>,
}

impl SurfaceDelta {
    /// `(n, d, delta)` for every evaluable lattice point.
    pub fn cells(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.ns.iter().enumerate().flat_map(move |(i, &n)| {
            self.ds
                .iter()
                .enumerate()
                .filter_map(move |(j, &d)| self.delta[i][j].map(|v| (n, d, v)))
        })
    }
}

fn interpolate_log(x0: f64, x1: f64, v0: f64, v1: f64) -> f64 {
    let t = v0 / (v0 - v1);
    (x0.ln() + t * (x1.ln() - x0.ln())).exp()
}

pub fn surface_compare(
    law_a: &(impl ScalingLaw + Sync),
    law_b: &(impl ScalingLaw + Sync),
    n_range: (f64, f64),
    d_range: (f64, f64),
    resolution: usize,
) -> Result<SurfaceDelta> {
    check_range("n", n_range)?;
    check_range("d", d_range)?;
    if resolution < 2 {
        return Err(Error::InvalidInput("resolution must be at least 2".into()));
    }
    let ns = log_space(n_range.0, n_range.1, resolution);
    let ds = log_space(d_range.0, d_range.1, resolution);
    let delta: Vec<Vec<Option<f64>>> = ns
        .par_iter()
        .map(|&n| {
            ds.iter()
                .map(|&d| {
                    let (a, b) = (law_a.loss(n, d).ok()?, law_b.loss(n, d).ok()?);
                    let v = (a - b) / b;
                    v.is_finite().then_some(v)
                })
                .collect()
        })
        .collect();
    let mut zero_crossings = Vec::new();
    for i in 0..ns.len() {
        for j in 0..ds.len() {
            let Some(v0) = delta[i][j] else { continue };
            if let Some(Some(v1)) = delta.get(i + 1).map(|r| r[j]) {
                if v0 * v1 < 0.0 {
                    zero_crossings.push(ZeroCrossing {
                        n: interpolate_log(ns[i], ns[i + 1], v0, v1),
                        d: ds[j],
                        axis: Axis::N,
                    });
                }
            }
            if let Some(&Some(v1)) = delta[i].get(j + 1) {
                if v0 * v1 < 0.0 {
                    zero_crossings.push(ZeroCrossing {
                        n: ns[i],
                        d: interpolate_log(ds[j], ds[j + 1], v0, v1),
                        axis: Axis::D,
                    });
                }
            }
        }
    }
    Ok(SurfaceDelta {
        ns,
        ds,
        delta,
        zero_crossings,
    })
}
