//! Differential piecewise fitting of the stretched-exponential law.
//!
//! The fit runs in three stages:
//!
//! 1. For each model size, the loss difference `r = L(n, d) − L(n, λd)` is
//!    regressed in log-log space. The difference removes every term that does
//!    not depend on `d`, leaving `B(n)(1 − λ^(−A(n)))·d^(−A(n))`, so the slope
//!    gives `A_n` and the intercept gives `B_n`.
//! 2. The discrete `{A_n}` and `{B_n}` are fitted by stretched exponentials
//!    `exp(a·n^p + b)`. The exponents `α` and `β` are then refined in
//!    alternation against the global difference loss `ℓ_R`.
//! 3. The data term is subtracted from every observation and the per-model
//!    average `G(n)` is fitted by a third stretched exponential.
//!
//! Sign convention: `r` is the loss at `d` minus the loss at `λd`, positive on
//! surfaces that decrease with data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FarseerParams, LossGrid};
use crate::regression::{
    linear_fit, select_joint_transforms, select_transforms, JointSelection, LinearFit, PowerGrid, TransformFamily,
    TransformSelection,
};
use crate::report::{FitMethod, FitReport, FitWarning};

/// Relative tolerance when matching `λ·d` to an existing grid point.
pub const PAIRING_TOLERANCE: f64 = 0.01;

/// Minimum number of positive differences for a per-model regression.
pub const MIN_PAIRS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConfig {
    pub power_grid: PowerGrid,
    pub pairing_tolerance: f64,
    pub max_iterations: usize,
    /// Refinement stops once the relative improvement of `ℓ_R` drops below this.
    pub tolerance: f64,
}

impl Default for PiecewiseConfig {
    fn default() -> Self {
        Self {
            power_grid: PowerGrid::default(),
            pairing_tolerance: PAIRING_TOLERANCE,
            max_iterations: 10,
            tolerance: 1e-6,
        }
    }
}

/// `exp(a·n^exponent + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StretchedExp {
    pub a: f64,
    pub b: f64,
    pub exponent: f64,
}

impl StretchedExp {
    pub fn eval(&self, n: f64) -> f64 {
        (self.a * n.powf(self.exponent) + self.b).exp()
    }

    /// Fits `ln(values) ≈ a·n^exponent + b` by least squares.
    pub fn fit(ns: &[f64], values: &[f64], exponent: f64) -> Option<(Self, LinearFit)> {
        let x: Vec<f64> = ns.iter().map(|n| n.powf(exponent)).collect();
        let y: Option<Vec<f64>> = values
            .iter()
            .map(|&v| (v > 0.0 && v.is_finite()).then(|| v.ln()))
            .collect();
        let fit = linear_fit(&x, &y?).ok()?;
        Some((
            Self {
                a: fit.slope,
                b: fit.intercept,
                exponent,
            },
            fit,
        ))
    }

    /// Best exponent on `grid` for the log-space fit.
    pub fn fit_over_grid(ns: &[f64], values: &[f64], grid: &PowerGrid) -> Option<(Self, LinearFit)> {
        let (e, _) = grid.search(|e| Self::fit(ns, values, e).map(|(_, f)| f.rss))?;
        Self::fit(ns, values, e)
    }
}

/// Loss differences along `d` for one model size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffSeries {
    pub n: f64,
    /// `(d, r)` with `r > 0`, sorted by `d`.
    pub pairs: Vec<(f64, f64)>,
    /// Non-positive differences left out.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffSeriesSet {
    pub series: Vec<DiffSeries>,
    pub warnings: Vec<FitWarning>,
}

/// Differences `loss(x) − loss(x')` where `x'` is the sample nearest to `λ·x`
/// within `tolerance` (relative). Input sorted by abscissa.
///
/// Returns every matched difference (including non-positive ones) and the
/// number of samples without a partner.
pub fn ratio_differences(samples: &[(f64, f64)], lambda: f64, tolerance: f64) -> (Vec<(f64, f64)>, usize) {
    let mut out = Vec::with_capacity(samples.len());
    let mut unpaired = 0;
    for &(x, loss) in samples {
        let target = lambda * x;
        let partner = samples
            .iter()
            .filter(|(x2, _)| *x2 != x)
            .min_by(|a, b| (a.0 / target).ln().abs().total_cmp(&(b.0 / target).ln().abs()));
        match partner {
            Some(&(x2, loss2)) if (x2 / target - 1.0).abs() <= tolerance => {
                out.push((x, loss - loss2));
            }
            _ => unpaired += 1,
        }
    }
    (out, unpaired)
}

fn unpaired_is_expected(samples: &[(f64, f64)], lambda: f64, tolerance: f64) -> usize {
    // the top rung never has a partner
    let max = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    usize::from(samples.iter().any(|s| s.0 * lambda > max * (1.0 + tolerance)))
}

pub fn build_diff_series(grid: &LossGrid) -> Result<DiffSeriesSet> {
    build_diff_series_with(grid, PAIRING_TOLERANCE)
}

pub fn build_diff_series_with(grid: &LossGrid, tolerance: f64) -> Result<DiffSeriesSet> {
    let lambda = grid.lambda();
    let mut series = Vec::new();
    let mut warnings = Vec::new();
    for row in grid.by_model_size() {
        let (diffs, unpaired) = ratio_differences(&row.points, lambda, tolerance);
        let expected_unpaired = unpaired_is_expected(&row.points, lambda, tolerance);
        if unpaired > expected_unpaired {
            warnings.push(FitWarning::UnpairedPoints {
                n: row.n,
                count: unpaired - expected_unpaired,
            });
        }
        let total = diffs.len();
        let pairs: Vec<(f64, f64)> = diffs.into_iter().filter(|&(_, r)| r > 0.0).collect();
        let dropped = total - pairs.len();
        if dropped > 0 {
            warnings.push(FitWarning::DroppedDifferences {
                n: row.n,
                count: dropped,
            });
        }
        if pairs.len() < MIN_PAIRS {
            warnings.push(FitWarning::ModelSizeExcluded {
                n: row.n,
                stage: "differencing".into(),
                reason: format!("{} positive differences, {MIN_PAIRS} required", pairs.len()),
            });
            continue;
        }
        series.push(DiffSeries {
            n: row.n,
            pairs,
            dropped,
        });
    }
    if series.is_empty() {
        return Err(Error::InsufficientData(
            "no model size has enough positive loss differences along d".into(),
        ));
    }
    Ok(DiffSeriesSet { series, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneEntry {
    pub n: f64,
    /// Data exponent `A_n`.
    pub a_n: f64,
    /// Coefficient of the difference series, `B̂_n`.
    pub b_hat_n: f64,
    /// Coefficient of the loss itself, `B̂_n / (1 − λ^(−A_n))`.
    pub b_n: f64,
    pub fit: LinearFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneResult {
    pub per_n: Vec<StageOneEntry>,
    pub lambda: f64,
    pub warnings: Vec<FitWarning>,
}

impl StageOneResult {
    pub fn model_sizes(&self) -> Vec<f64> {
        self.per_n.iter().map(|e| e.n).collect()
    }
}

/// Undoes the `λ` differencing: `B = B̂ / (1 − λ^(−A))`.
pub fn coefficient_from_difference(b_hat: f64, a: f64, lambda: f64) -> f64 {
    b_hat / (1.0 - lambda.powf(-a))
}

pub fn stage1_fit(series: &[DiffSeries], lambda: f64) -> Result<StageOneResult> {
    let mut per_n = Vec::new();
    let mut warnings = Vec::new();
    for s in series {
        let exclude = |reason: String| FitWarning::ModelSizeExcluded {
            n: s.n,
            stage: "stage 1".into(),
            reason,
        };
        if s.pairs.len() < MIN_PAIRS || s.pairs.iter().any(|p| p.1 <= 0.0) {
            warnings.push(exclude("fewer than 3 positive differences".into()));
            continue;
        }
        let x: Vec<f64> = s.pairs.iter().map(|p| p.0.ln()).collect();
        let y: Vec<f64> = s.pairs.iter().map(|p| p.1.ln()).collect();
        let fit = match linear_fit(&x, &y) {
            Ok(f) => f,
            Err(e) => {
                warnings.push(exclude(e.to_string()));
                continue;
            }
        };
        let a_n = -fit.slope;
        if a_n <= 0.0 {
            warnings.push(exclude(format!("non-positive data exponent A_n={a_n}")));
            continue;
        }
        let b_hat_n = fit.intercept.exp();
        per_n.push(StageOneEntry {
            n: s.n,
            a_n,
            b_hat_n,
            b_n: coefficient_from_difference(b_hat_n, a_n, lambda),
            fit,
        });
    }
    if per_n.is_empty() {
        return Err(Error::InsufficientData("stage 1 retained no model sizes".into()));
    }
    Ok(StageOneResult {
        per_n,
        lambda,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementStep {
    pub alpha: f64,
    pub beta: f64,
    pub ell_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    /// The initial estimate followed by one entry per refinement pass.
    pub iterations: Vec<RefinementStep>,
    pub converged: bool,
    pub alpha_identifiable: bool,
    pub beta_identifiable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoResult {
    pub theta_a: StretchedExp,
    pub theta_b: StretchedExp,
    pub trace: RefinementTrace,
    /// Transform search over the dictionary for `{A_n}` and `{B_n}`, reported for reference.
    pub selection: Option<JointSelection>,
}

/// Global squared error of the modelled differences.
pub fn difference_loss(series: &[&DiffSeries], theta_a: &StretchedExp, theta_b: &StretchedExp, lambda: f64) -> f64 {
    series
        .iter()
        .map(|s| {
            let a = theta_a.eval(s.n);
            let scale = theta_b.eval(s.n) * (1.0 - lambda.powf(-a));
            s.pairs
                .iter()
                .map(|&(d, r)| (r - scale * d.powf(-a)).powi(2))
                .sum::<f64>()
        })
        .sum()
}

fn is_flat(values: &[f64]) -> bool {
    let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let (lo, hi) = logs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    hi - lo <= 1e-9 * mean.abs().max(1.0)
}

pub fn stage2_parameterize(
    s1: &StageOneResult,
    series: &[DiffSeries],
    cfg: &PiecewiseConfig,
) -> Result<StageTwoResult> {
    if s1.per_n.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "stage 2 needs at least 3 model sizes, stage 1 retained {}",
            s1.per_n.len()
        )));
    }
    let ns = s1.model_sizes();
    let a_vals: Vec<f64> = s1.per_n.iter().map(|e| e.a_n).collect();
    let b_vals: Vec<f64> = s1.per_n.iter().map(|e| e.b_n).collect();
    let used: Vec<&DiffSeries> = series.iter().filter(|s| ns.contains(&s.n)).collect();
    let grid = &cfg.power_grid;
    let lambda = s1.lambda;

    let no_fit = |what: &str| Error::FitFailed(format!("no feasible exponent for {what}"));
    let (mut theta_a, _) = StretchedExp::fit_over_grid(&ns, &a_vals, grid).ok_or_else(|| no_fit("A(n)"))?;
    let (mut theta_b, _) = StretchedExp::fit_over_grid(&ns, &b_vals, grid).ok_or_else(|| no_fit("B(n)"))?;
    let selection = select_joint_transforms(&ns, &a_vals, &b_vals, &TransformFamily::ALL, grid).ok();

    let mut ell = difference_loss(&used, &theta_a, &theta_b, lambda);
    let mut iterations = vec![RefinementStep {
        alpha: theta_a.exponent,
        beta: theta_b.exponent,
        ell_r: ell,
    }];
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let previous = ell;

        let candidate = grid.search(|alpha| {
            StretchedExp::fit(&ns, &a_vals, alpha).map(|(ta, _)| difference_loss(&used, &ta, &theta_b, lambda))
        });
        if let Some((alpha, value)) = candidate {
            if value < ell {
                theta_a = StretchedExp::fit(&ns, &a_vals, alpha).expect("feasible in search").0;
                ell = value;
            }
        }

        let candidate = grid.search(|beta| {
            StretchedExp::fit(&ns, &b_vals, beta).map(|(tb, _)| difference_loss(&used, &theta_a, &tb, lambda))
        });
        if let Some((beta, value)) = candidate {
            if value < ell {
                theta_b = StretchedExp::fit(&ns, &b_vals, beta).expect("feasible in search").0;
                ell = value;
            }
        }

        iterations.push(RefinementStep {
            alpha: theta_a.exponent,
            beta: theta_b.exponent,
            ell_r: ell,
        });
        if previous == 0.0 || (previous - ell) / previous < cfg.tolerance {
            converged = true;
            break;
        }
    }

    Ok(StageTwoResult {
        theta_a,
        theta_b,
        trace: RefinementTrace {
            iterations,
            converged,
            alpha_identifiable: !is_flat(&a_vals),
            beta_identifiable: !is_flat(&b_vals),
        },
        selection,
    })
}

/// Per-point residuals after the data term is removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    /// `(n, d, O)` with `O = L − B(n)·d^(−A(n))`.
    pub o_values: Vec<(f64, f64, f64)>,
    /// `(n, G)` with `G` the mean of `O` over `d`.
    pub g_values: Vec<(f64, f64)>,
    /// `(n, d, O − G)`.
    pub centered: Vec<(f64, f64, f64)>,
}

fn exact_mean(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    m + v.iter().map(|x| x - m).sum::<f64>() / n
}

/// Residual decomposition for a given data term, without fitting.
pub fn residual_diagnostics(
    grid: &LossGrid,
    theta_a: &StretchedExp,
    theta_b: &StretchedExp,
) -> Result<ResidualDiagnostics> {
    let mut o_values = Vec::with_capacity(grid.len());
    let mut g_values = Vec::new();
    let mut centered = Vec::with_capacity(grid.len());
    for row in grid.by_model_size() {
        let a = theta_a.eval(row.n);
        let b = theta_b.eval(row.n);
        let os: Vec<f64> = row.points.iter().map(|&(d, l)| l - b * d.powf(-a)).collect();
        if os.iter().any(|o| !o.is_finite()) {
            return Err(Error::Evaluation {
                term: "data",
                n: row.n,
                d: f64::NAN,
                reason: "non-finite residual".into(),
            });
        }
        let g = exact_mean(&os);
        for (&(d, _), &o) in row.points.iter().zip(&os) {
            o_values.push((row.n, d, o));
            centered.push((row.n, d, o - g));
        }
        g_values.push((row.n, g));
    }
    Ok(ResidualDiagnostics {
        o_values,
        g_values,
        centered,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageThreeResult {
    pub theta_u: StretchedExp,
    pub fit: LinearFit,
    pub diagnostics: ResidualDiagnostics,
    pub selection: Option<TransformSelection>,
}

pub fn stage3_fit_residual(
    grid: &LossGrid,
    theta_a: &StretchedExp,
    theta_b: &StretchedExp,
    power_grid: &PowerGrid,
) -> Result<StageThreeResult> {
    let diagnostics = residual_diagnostics(grid, theta_a, theta_b)?;
    if let Some(&(n, value)) = diagnostics.g_values.iter().find(|(_, g)| *g <= 0.0) {
        return Err(Error::ResidualSign { n, value });
    }
    if diagnostics.g_values.len() < 2 {
        return Err(Error::InsufficientData("stage 3 needs at least 2 model sizes".into()));
    }
    let ns: Vec<f64> = diagnostics.g_values.iter().map(|g| g.0).collect();
    let gs: Vec<f64> = diagnostics.g_values.iter().map(|g| g.1).collect();
    let (theta_u, fit) = StretchedExp::fit_over_grid(&ns, &gs, power_grid)
        .ok_or_else(|| Error::FitFailed("no feasible exponent for the residual term".into()))?;
    let selection = select_transforms(&ns, &gs, &TransformFamily::ALL, power_grid).ok();
    Ok(StageThreeResult {
        theta_u,
        fit,
        diagnostics,
        selection,
    })
}

/// Intermediate products of a piecewise fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseDetails {
    pub stage_one: Vec<StageOneEntry>,
    pub ell_r: f64,
    pub trace: RefinementTrace,
    pub diagnostics: ResidualDiagnostics,
    pub data_selection: Option<JointSelection>,
    pub residual_selection: Option<TransformSelection>,
}

pub fn fit_farseer(grid: &LossGrid) -> Result<(FarseerParams, FitReport)> {
    fit_farseer_with(grid, &PiecewiseConfig::default())
}

pub fn fit_farseer_with(grid: &LossGrid, cfg: &PiecewiseConfig) -> Result<(FarseerParams, FitReport)> {
    grid.validate_for_piecewise()?;
    let diffs = build_diff_series_with(grid, cfg.pairing_tolerance)?;
    let s1 = stage1_fit(&diffs.series, grid.lambda())?;
    let s2 = stage2_parameterize(&s1, &diffs.series, cfg)?;
    let s3 = stage3_fit_residual(grid, &s2.theta_a, &s2.theta_b, &cfg.power_grid)?;

    let params = FarseerParams {
        a1: s2.theta_a.a,
        b1: s2.theta_a.b,
        alpha: s2.theta_a.exponent,
        a2: s2.theta_b.a,
        b2: s2.theta_b.b,
        beta: s2.theta_b.exponent,
        a3: s3.theta_u.a,
        b3: s3.theta_u.b,
        gamma: s3.theta_u.exponent,
    };
    params.validate()?;

    let mut report = FitReport::from_law(params.into(), grid, FitMethod::Piecewise)?;
    report.warnings.extend(diffs.warnings);
    report.warnings.extend(s1.warnings);
    if !s2.trace.converged {
        report.warnings.push(FitWarning::RefinementNotConverged {
            iterations: s2.trace.iterations.len() - 1,
        });
    }
    if !s2.trace.alpha_identifiable {
        report.warnings.push(FitWarning::Unidentifiable {
            parameter: "alpha".into(),
        });
    }
    if !s2.trace.beta_identifiable {
        report.warnings.push(FitWarning::Unidentifiable {
            parameter: "beta".into(),
        });
    }
    report.notes.push(format!(
        "differences paired at lambda={} with {} relative tolerance",
        grid.lambda(),
        cfg.pairing_tolerance
    ));
    let ell_r = s2.trace.iterations.last().map_or(f64::NAN, |s| s.ell_r);
    report.piecewise = Some(PiecewiseDetails {
        stage_one: s1.per_n,
        ell_r,
        trace: s2.trace,
        diagnostics: s3.diagnostics,
        data_selection: s2.selection,
        residual_selection: s3.selection,
    });
    Ok((params, report))
}

/// Fits several grids independently.
pub fn fit_farseer_many(grids: &[LossGrid], cfg: &PiecewiseConfig) -> Vec<Result<(FarseerParams, FitReport)>> {
    grids.par_iter().map(|g| fit_farseer_with(g, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{eval_farseer, LossPoint, DEFAULT_LAMBDA};
    use approx::assert_relative_eq;

    const REF: FarseerParams = FarseerParams::reference();

    fn ladder(lo: f64, hi: f64, ratio: f64) -> Vec<f64> {
        let mut v = vec![lo];
        while *v.last().unwrap() * ratio <= hi * 1.02 {
            let next = lo * ratio.powi(v.len() as i32);
            v.push(next);
        }
        v
    }

    fn surface(f: impl Fn(f64, f64) -> f64, ns: &[f64], ds: &[f64]) -> LossGrid {
        let pts = ns
            .iter()
            .flat_map(|&n| ds.iter().map(move |&d| (n, d)))
            .map(|(n, d)| LossPoint::new(n, d, f(n, d)).unwrap())
            .collect();
        LossGrid::with_default_lambda(pts).unwrap()
    }

    fn reference_grid() -> LossGrid {
        let ns = ladder(2.01e8, 6.37e9, DEFAULT_LAMBDA);
        let ds = ladder(1e9, 4.31e11, DEFAULT_LAMBDA);
        surface(|n, d| eval_farseer(&REF, n, d).unwrap(), &ns, &ds)
    }

    #[test]
    fn constant_surface_has_no_differences() {
        let grid = surface(|_, _| 0.8, &[1e8, 2e8, 4e8], &ladder(1e9, 1e11, DEFAULT_LAMBDA));
        assert!(matches!(build_diff_series(&grid), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn model_only_surface_cancels() {
        let grid = surface(
            |n, _| 0.2 + REF.residual_term(n).unwrap(),
            &[1e8, 2e8, 4e8],
            &ladder(1e9, 1e11, DEFAULT_LAMBDA),
        );
        assert!(matches!(build_diff_series(&grid), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn difference_of_pure_power_law() {
        let ds = ladder(1.0, 64.0, DEFAULT_LAMBDA);
        let grid = surface(|_, d| d.powf(-0.5), &[1.0, 2.0], &ds);
        let set = build_diff_series(&grid).unwrap();
        let s = &set.series[0];
        let at4 = s.pairs.iter().find(|p| (p.0 - 4.0).abs() < 1e-9).unwrap();
        // (1 − 2^(−1/4))·4^(−1/2), evaluated to 40 digits
        assert_relative_eq!(at4.1, 0.079_551_792_373_142_73, max_relative = 1e-12);
        assert_eq!(s.dropped, 0);
        assert_eq!(s.pairs.len(), ds.len() - 1);
    }

    #[test]
    fn pairing_tolerates_rounded_token_counts() {
        let ds = [1.0e9, 1.414e9, 2.0e9, 2.83e9, 4.0e9];
        let grid = surface(|_, d| 1.0 + d.powf(-0.3), &[1e8, 2e8], &ds);
        let set = build_diff_series(&grid).unwrap();
        assert_eq!(set.series[0].pairs.len(), 4);
    }

    #[test]
    fn exact_power_law_recovered_by_stage_one() {
        let s = DiffSeries {
            n: 1.0,
            pairs: [1e9, 2e9, 4e9, 8e9]
                .iter()
                .map(|&d: &f64| (d, 3.0 * d.powf(-0.4)))
                .collect(),
            dropped: 0,
        };
        let r = stage1_fit(&[s], DEFAULT_LAMBDA).unwrap();
        assert_relative_eq!(r.per_n[0].a_n, 0.4, max_relative = 1e-12);
        assert_relative_eq!(r.per_n[0].b_hat_n, 3.0, max_relative = 1e-10);
    }

    #[test]
    fn coefficient_correction() {
        assert_eq!(coefficient_from_difference(0.5, 1.0, 2.0), 1.0);
    }

    #[test]
    fn stage_one_tracks_generator_exponent() {
        let grid = reference_grid();
        let set = build_diff_series(&grid).unwrap();
        let s1 = stage1_fit(&set.series, grid.lambda()).unwrap();
        assert_eq!(s1.per_n.len(), grid.model_sizes().len());
        for e in &s1.per_n {
            let truth = REF.exponent_term(e.n).unwrap();
            assert!(
                (e.a_n / truth - 1.0).abs() < 0.01,
                "n={} A_n={} truth={}",
                e.n,
                e.a_n,
                truth
            );
            let b_truth = REF.coefficient_term(e.n).unwrap();
            assert_relative_eq!(e.b_n, b_truth, max_relative = 1e-8);
        }
    }

    #[test]
    fn stage_two_recovers_exponents() {
        let grid = reference_grid();
        let set = build_diff_series(&grid).unwrap();
        let s1 = stage1_fit(&set.series, grid.lambda()).unwrap();
        let s2 = stage2_parameterize(&s1, &set.series, &PiecewiseConfig::default()).unwrap();
        assert!((s2.theta_a.exponent - REF.alpha).abs() <= 0.005);
        assert!((s2.theta_b.exponent - REF.beta).abs() <= 0.005);
        let last = s2.trace.iterations.last().unwrap();
        assert!(last.ell_r < 1e-10);
        assert!(s2.trace.iterations.len() <= 2);
        assert!(s2.trace.converged);
        assert!(s2.trace.iterations.windows(2).all(|w| w[1].ell_r <= w[0].ell_r));
    }

    #[test]
    fn flat_exponent_is_flagged() {
        let p = FarseerParams {
            a1: 0.0,
            b1: (0.3f64).ln(),
            ..REF
        };
        let ns = ladder(2.01e8, 6.37e9, DEFAULT_LAMBDA);
        let ds = ladder(1e9, 4.31e11, DEFAULT_LAMBDA);
        let grid = surface(|n, d| eval_farseer(&p, n, d).unwrap(), &ns, &ds);
        let (fit, report) = fit_farseer(&grid).unwrap();
        assert!(fit.a1.abs() < 1e-6, "a1={}", fit.a1);
        let trace = &report.piecewise.as_ref().unwrap().trace;
        assert!(!trace.alpha_identifiable);
        assert!(report
            .warnings
            .iter()
            .any(|w| matches!(w, FitWarning::Unidentifiable { parameter } if parameter == "alpha")));
        assert!(report.max_rel_err < 1e-3);
    }

    #[test]
    fn stage_three_exact_decomposition() {
        let grid = reference_grid();
        let ta = StretchedExp {
            a: REF.a1,
            b: REF.b1,
            exponent: REF.alpha,
        };
        let tb = StretchedExp {
            a: REF.a2,
            b: REF.b2,
            exponent: REF.beta,
        };
        let s3 = stage3_fit_residual(&grid, &ta, &tb, &PowerGrid::default()).unwrap();
        for &(n, _, o) in &s3.diagnostics.o_values {
            assert_relative_eq!(o, REF.residual_term(n).unwrap(), max_relative = 1e-12);
        }
        assert!(s3.diagnostics.centered.iter().all(|c| c.2.abs() < 1e-12));
        assert!((s3.theta_u.a - REF.a3).abs() <= 0.005);
        assert!((s3.theta_u.b - REF.b3).abs() <= 0.005);
        assert!((s3.theta_u.exponent - REF.gamma).abs() <= 0.005);
    }

    #[test]
    fn centered_residuals_are_mean_zero() {
        let grid = reference_grid();
        let ta = StretchedExp {
            a: -0.1,
            b: 0.3,
            exponent: 0.15,
        };
        let tb = StretchedExp {
            a: 80.0,
            b: -6.0,
            exponent: -0.1,
        };
        let diag = residual_diagnostics(&grid, &ta, &tb).unwrap();
        for (n, _) in &diag.g_values {
            let c: Vec<f64> = diag.centered.iter().filter(|c| c.0 == *n).map(|c| c.2).collect();
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            assert!(mean.abs() < 1e-12, "mean {mean}");
        }
    }

    #[test]
    fn negative_residual_average_is_an_error() {
        let grid = reference_grid();
        let ta = StretchedExp {
            a: REF.a1,
            b: REF.b1,
            exponent: REF.alpha,
        };
        let tb = StretchedExp {
            a: REF.a2,
            b: REF.b2 + 3.0,
            exponent: REF.beta,
        };
        assert!(matches!(
            stage3_fit_residual(&grid, &ta, &tb, &PowerGrid::default()),
            Err(Error::ResidualSign { .. })
        ));
    }

    #[test]
    fn two_model_sizes_are_not_enough() {
        let ds = ladder(1e9, 4.31e11, DEFAULT_LAMBDA);
        let grid = surface(|n, d| eval_farseer(&REF, n, d).unwrap(), &[2.01e8, 2.84e8], &ds);
        assert!(matches!(fit_farseer(&grid), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn noiseless_reference_fit() {
        let grid = reference_grid();
        let (p, report) = fit_farseer(&grid).unwrap();
        assert!(report.max_rel_err <= 1e-3, "max rel err {}", report.max_rel_err);
        assert!((p.alpha - REF.alpha).abs() <= 0.02);
        assert!((p.beta - REF.beta).abs() <= 0.02);
        assert!((p.gamma - REF.gamma).abs() <= 0.02);
    }

    #[test]
    fn refitting_a_fitted_surface_is_stable() {
        let grid = reference_grid();
        let (p, _) = fit_farseer(&grid).unwrap();
        let ns = grid.model_sizes();
        let ds: Vec<f64> = grid.by_model_size()[0].points.iter().map(|p| p.0).collect();
        let regen = surface(|n, d| eval_farseer(&p, n, d).unwrap(), &ns, &ds);
        let (q, _) = fit_farseer(&regen).unwrap();
        for pt in regen.points() {
            let a = eval_farseer(&p, pt.n, pt.d).unwrap();
            let b = eval_farseer(&q, pt.n, pt.d).unwrap();
            assert!((a - b).abs() / a <= 1e-6);
        }
    }
}
