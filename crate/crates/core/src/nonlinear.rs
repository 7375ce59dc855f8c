//! Multi-start nonlinear least squares for both law families.
//!
//! Each start runs a box-projected Levenberg–Marquardt descent from a
//! randomly drawn initial point. A step is only taken when it lowers the
//! objective, so every local run is monotone. Starts draw from independent
//! random streams keyed by `(seed, start_index)`; results do not depend on
//! scheduling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChinchillaParams, Family, FarseerParams, Law, LossGrid, EXP_ARG_LIMIT};
use crate::report::{FitMethod, FitReport, FitWarning};

/// Space in which residuals are squared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveSpace {
    /// `Σ (L_pred − L_obs)²`.
    #[default]
    Squared,
    /// `Σ (ln L_pred − ln L_obs)²`.
    SquaredLog,
}

/// Sampling interval for one parameter. With `log` set, the magnitude is
/// drawn log-uniformly between `|lo|` and `|hi|` and the sign of `lo` is kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitRange {
    pub lo: f64,
    pub hi: f64,
    pub log: bool,
}

impl InitRange {
    pub const fn uniform(lo: f64, hi: f64) -> Self {
        Self { lo, hi, log: false }
    }

    pub const fn log_uniform(lo: f64, hi: f64) -> Self {
        Self { lo, hi, log: true }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi;
        let log_ok = !self.log || (self.lo * self.hi > 0.0);
        if ok && log_ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid initialization range [{}, {}] (log={})",
                self.lo, self.hi, self.log
            )))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.log {
            let (a, b) = (self.lo.abs().ln(), self.hi.abs().ln());
            let (a, b) = (a.min(b), a.max(b));
            self.lo.signum() * rng.random_range(a..=b).exp()
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Default sampling ranges for a family, in [`Family::parameter_names`] order.
pub fn default_init_ranges(family: Family) -> Vec<InitRange> {
    match family {
        Family::Chinchilla => vec![
            InitRange::log_uniform(1e-3, 1e3),
            InitRange::uniform(0.05, 1.0),
            InitRange::log_uniform(1e-3, 1e3),
            InitRange::uniform(0.05, 1.0),
            InitRange::uniform(0.0, 2.0),
        ],
        // one decade either side of the reference coefficients
        Family::Farseer => FarseerParams::reference()
            .to_array()
            .iter()
            .map(|&v| {
                let (a, b) = (v * 0.1, v * 10.0);
                InitRange::log_uniform(a.min(b), a.max(b))
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStartConfig {
    pub starts: usize,
    pub seed: u64,
    /// Per-parameter sampling ranges; `None` uses [`default_init_ranges`].
    pub init_ranges: Option<Vec<InitRange>>,
    /// Explicit starting points, used for the first starts before random draws.
    pub initial_points: Vec<Vec<f64>>,
    pub max_steps: usize,
    pub step_tolerance: f64,
    pub objective: ObjectiveSpace,
}

impl Default for MultiStartConfig {
    fn default() -> Self {
        Self {
            starts: 256,
            seed: 0,
            init_ranges: None,
            initial_points: Vec::new(),
            max_steps: 2000,
            step_tolerance: 1e-10,
            objective: ObjectiveSpace::Squared,
        }
    }
}

impl MultiStartConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_starts(mut self, starts: usize) -> Self {
        self.starts = starts;
        self
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.starts == 0 {
            return Err(Error::InvalidInput("at least one start is required".into()));
        }
        if let Some(r) = &self.init_ranges {
            if r.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "{} initialization ranges given, {dim} parameters",
                    r.len()
                )));
            }
            r.iter().try_for_each(InitRange::validate)?;
        }
        if let Some(p) = self.initial_points.iter().find(|p| p.len() != dim) {
            return Err(Error::InvalidInput(format!(
                "initial point has {} values, {dim} parameters",
                p.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearFitResult {
    pub law: Law,
    /// Best objective over all starts.
    pub objective: f64,
    pub start_index: usize,
    /// Final objective per start; failed starts are `+inf`.
    pub all_objectives: Vec<f64>,
}

/// Outcome of one local descent.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRun {
    pub params: Vec<f64>,
    pub objective: f64,
    /// Objective after every accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

/// A parametric surface with an analytic Jacobian.
pub trait LossModel: Sync {
    fn dim(&self) -> usize;

    /// Prediction at one point; `None` when the parameters leave the representable range.
    fn predict(&self, p: &[f64], ln_n: f64, ln_d: f64) -> Option<f64>;

    /// Prediction and its gradient with respect to the parameters.
    fn predict_with_gradient(&self, p: &[f64], ln_n: f64, ln_d: f64, grad: &mut [f64]) -> Option<f64>;

    /// Maps parameters back into the feasible box.
    fn project(&self, p: &mut [f64]);
}

/// `A/n^α + B/d^β + E`, with `A, B, E ≥ 0` and `α, β > 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChinchillaModel;

const MIN_EXPONENT: f64 = 1e-8;

impl LossModel for ChinchillaModel {
    fn dim(&self) -> usize {
        5
    }

    fn predict(&self, p: &[f64], ln_n: f64, ln_d: f64) -> Option<f64> {
        let v = p[0] * (-p[1] * ln_n).exp() + p[2] * (-p[3] * ln_d).exp() + p[4];
        v.is_finite().then_some(v)
    }

    fn predict_with_gradient(&self, p: &[f64], ln_n: f64, ln_d: f64, grad: &mut [f64]) -> Option<f64> {
        let tn = (-p[1] * ln_n).exp();
        let td = (-p[3] * ln_d).exp();
        grad[0] = tn;
        grad[1] = -p[0] * tn * ln_n;
        grad[2] = td;
        grad[3] = -p[2] * td * ln_d;
        grad[4] = 1.0;
        let v = p[0] * tn + p[2] * td + p[4];
        v.is_finite().then_some(v)
    }

    fn project(&self, p: &mut [f64]) {
        p[0] = p[0].max(0.0);
        p[1] = p[1].max(MIN_EXPONENT);
        p[2] = p[2].max(0.0);
        p[3] = p[3].max(MIN_EXPONENT);
        p[4] = p[4].max(0.0);
    }
}

/// The nine-parameter stretched-exponential law, unconstrained.
#[derive(Debug, Clone, Copy, Default)]
pub struct FarseerModel;

fn bounded_exp(x: f64) -> Option<f64> {
    (x.is_finite() && x.abs() <= EXP_ARG_LIMIT).then(|| x.exp())
}

impl LossModel for FarseerModel {
    fn dim(&self) -> usize {
        9
    }

    fn predict(&self, p: &[f64], ln_n: f64, ln_d: f64) -> Option<f64> {
        let mut scratch = [0.0; 9];
        self.predict_with_gradient(p, ln_n, ln_d, &mut scratch)
    }

    fn predict_with_gradient(&self, p: &[f64], ln_n: f64, ln_d: f64, grad: &mut [f64]) -> Option<f64> {
        let [a1, b1, alpha, a2, b2, beta, a3, b3, gamma] = p.try_into().ok()?;
        let na = (alpha * ln_n).exp();
        let nb = (beta * ln_n).exp();
        let ng = (gamma * ln_n).exp();
        let a_of_n = bounded_exp(a1 * na + b1)?;
        let u = bounded_exp(a3 * ng + b3)?;
        let data = bounded_exp(a2 * nb + b2 - a_of_n * ln_d)?;
        // d(data)/d(a1·n^α + b1)
        let dw = -data * a_of_n * ln_d;
        grad[0] = dw * na;
        grad[1] = dw;
        grad[2] = dw * a1 * na * ln_n;
        grad[3] = data * nb;
        grad[4] = data;
        grad[5] = data * a2 * nb * ln_n;
        grad[6] = u * ng;
        grad[7] = u;
        grad[8] = u * a3 * ng * ln_n;
        let v = u + data;
        (v.is_finite() && grad.iter().all(|g| g.is_finite())).then_some(v)
    }

    fn project(&self, _p: &mut [f64]) {}
}

struct Observations {
    ln_n: Vec<f64>,
    ln_d: Vec<f64>,
    loss: Vec<f64>,
    ln_loss: Vec<f64>,
}

impl Observations {
    fn new(grid: &LossGrid) -> Self {
        let pts = grid.points();
        Self {
            ln_n: pts.iter().map(|p| p.n.ln()).collect(),
            ln_d: pts.iter().map(|p| p.d.ln()).collect(),
            loss: pts.iter().map(|p| p.loss).collect(),
            ln_loss: pts.iter().map(|p| p.loss.ln()).collect(),
        }
    }

    fn len(&self) -> usize {
        self.loss.len()
    }

    fn residual(&self, space: ObjectiveSpace, i: usize, pred: f64) -> Option<f64> {
        match space {
            ObjectiveSpace::Squared => Some(pred - self.loss[i]),
            ObjectiveSpace::SquaredLog => (pred > 0.0).then(|| pred.ln() - self.ln_loss[i]),
        }
    }

    fn objective(&self, model: &dyn LossModel, space: ObjectiveSpace, p: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.len() {
            let Some(r) = model
                .predict(p, self.ln_n[i], self.ln_d[i])
                .and_then(|pred| self.residual(space, i, pred))
            else {
                return f64::INFINITY;
            };
            total += r * r;
        }
        if total.is_finite() {
            total
        } else {
            f64::INFINITY
        }
    }

    /// Gauss–Newton system `JᵀJ`, `Jᵀr`.
    fn normal_system(
        &self,
        model: &dyn LossModel,
        space: ObjectiveSpace,
        p: &[f64],
    ) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let k = model.dim();
        let mut jtj = DMatrix::<f64>::zeros(k, k);
        let mut jtr = DVector::<f64>::zeros(k);
        let mut g = vec![0.0; k];
        for i in 0..self.len() {
            let pred = model.predict_with_gradient(p, self.ln_n[i], self.ln_d[i], &mut g)?;
            let r = self.residual(space, i, pred)?;
            if space == ObjectiveSpace::SquaredLog {
                g.iter_mut().for_each(|v| *v /= pred);
            }
            for a in 0..k {
                jtr[a] += g[a] * r;
                for b in 0..=a {
                    jtj[(a, b)] += g[a] * g[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                jtj[(b, a)] = jtj[(a, b)];
            }
        }
        (jtj.iter().all(|v| v.is_finite()) && jtr.iter().all(|v| v.is_finite())).then_some((jtj, jtr))
    }
}

fn local_descent_on(model: &dyn LossModel, obs: &Observations, start: &[f64], cfg: &MultiStartConfig) -> LocalRun {
    let mut x = start.to_vec();
    model.project(&mut x);
    let mut f = obs.objective(model, cfg.objective, &x);
    let mut history = vec![f];
    if !f.is_finite() {
        return LocalRun {
            params: x,
            objective: f,
            history,
        };
    }
    let mut damping = 1e-3;
    for _ in 0..cfg.max_steps {
        if f == 0.0 {
            break;
        }
        let Some((jtj, jtr)) = obs.normal_system(model, cfg.objective, &x) else {
            break;
        };
        let mut accepted = None;
        while damping < 1e16 {
            let mut lhs = jtj.clone();
            for a in 0..x.len() {
                lhs[(a, a)] += damping * jtj[(a, a)].max(1e-12);
            }
            let step = lhs.cholesky().map(|c| c.solve(&(-&jtr)));
            if let Some(step) = step {
                let mut trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                model.project(&mut trial);
                let f_trial = obs.objective(model, cfg.objective, &trial);
                if f_trial < f {
                    accepted = Some((trial, f_trial));
                    damping = (damping / 3.0).max(1e-15);
                    break;
                }
            }
            damping *= 4.0;
        }
        let Some((trial, f_trial)) = accepted else {
            break;
        };
        let moved = x.iter().zip(&trial).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let size = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let improvement = f - f_trial;
        x = trial;
        f = f_trial;
        history.push(f);
        if moved <= cfg.step_tolerance * (size + cfg.step_tolerance) || improvement <= 1e-15 * f {
            break;
        }
    }
    LocalRun {
        params: x,
        objective: f,
        history,
    }
}

/// One damped least-squares descent from `start`.
pub fn local_descent(family: Family, grid: &LossGrid, start: &[f64], cfg: &MultiStartConfig) -> Result<LocalRun> {
    let model = model_for(family);
    if start.len() != model.dim() {
        return Err(Error::InvalidInput(format!(
            "start has {} values, {} parameters",
            start.len(),
            model.dim()
        )));
    }
    Ok(local_descent_on(model, &Observations::new(grid), start, cfg))
}

fn model_for(family: Family) -> &'static dyn LossModel {
    match family {
        Family::Chinchilla => &ChinchillaModel,
        Family::Farseer => &FarseerModel,
    }
}

/// Random stream for start `index`.
pub fn start_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn start_point(cfg: &MultiStartConfig, ranges: &[InitRange], index: usize) -> Vec<f64> {
    if let Some(p) = cfg.initial_points.get(index) {
        return p.clone();
    }
    let mut rng = start_rng(cfg.seed, index);
    ranges.iter().map(|r| r.sample(&mut rng)).collect()
}

/// Runs every start of `cfg` with `model_fixed` applied to each local result.
fn multi_start(
    family: Family,
    model: &dyn LossModel,
    grid: &LossGrid,
    cfg: &MultiStartConfig,
) -> Result<NonlinearFitResult> {
    cfg.validate(model.dim())?;
    let ranges = cfg.init_ranges.clone().unwrap_or_else(|| default_init_ranges(family));
    let obs = Observations::new(grid);
    let runs: Vec<(Option<Law>, f64)> = (0..cfg.starts)
        .into_par_iter()
        .map(|i| {
            let run = local_descent_on(model, &obs, &start_point(cfg, &ranges, i), cfg);
            match Law::from_parameters(family, &run.params) {
                Ok(law) if run.objective.is_finite() => (Some(law), run.objective),
                _ => (None, f64::INFINITY),
            }
        })
        .collect();
    let all_objectives: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let (start_index, (law, objective)) = runs
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.0.is_some())
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .ok_or_else(|| {
            Error::FitFailed(format!(
                "all {} starts diverged or left the representable range",
                cfg.starts
            ))
        })?;
    Ok(NonlinearFitResult {
        law: law.expect("filtered"),
        objective,
        start_index,
        all_objectives,
    })
}

pub fn fit_chinchilla_nonlinear(grid: &LossGrid, cfg: &MultiStartConfig) -> Result<NonlinearFitResult> {
    multi_start(Family::Chinchilla, &ChinchillaModel, grid, cfg)
}

pub fn fit_farseer_nonlinear(grid: &LossGrid, cfg: &MultiStartConfig) -> Result<NonlinearFitResult> {
    multi_start(Family::Farseer, &FarseerModel, grid, cfg)
}

pub fn fit_nonlinear(family: Family, grid: &LossGrid, cfg: &MultiStartConfig) -> Result<NonlinearFitResult> {
    match family {
        Family::Chinchilla => fit_chinchilla_nonlinear(grid, cfg),
        Family::Farseer => fit_farseer_nonlinear(grid, cfg),
    }
}

/// Nonlinear fit plus the grid report.
pub fn fit_nonlinear_report(
    family: Family,
    grid: &LossGrid,
    cfg: &MultiStartConfig,
) -> Result<(NonlinearFitResult, FitReport)> {
    let result = fit_nonlinear(family, grid, cfg)?;
    let mut report = FitReport::from_law(result.law, grid, FitMethod::Nonlinear)?;
    let failed = result.all_objectives.iter().filter(|o| !o.is_finite()).count();
    if failed > 0 {
        report.warnings.push(FitWarning::StartsFailed {
            failed,
            total: result.all_objectives.len(),
        });
    }
    report.notes.push(format!(
        "multi-start box-projected Levenberg-Marquardt: {} starts, seed {}, {} steps max, objective {:?}",
        cfg.starts, cfg.seed, cfg.max_steps, cfg.objective
    ));
    report
        .notes
        .push("local optimizer, objective space and stopping rule are this tool's choices".into());
    Ok((result, report))
}

impl NonlinearFitResult {
    pub fn chinchilla(&self) -> Option<ChinchillaParams> {
        match self.law {
            Law::Chinchilla(p) => Some(p),
            _ => None,
        }
    }

    pub fn farseer(&self) -> Option<FarseerParams> {
        match self.law {
            Law::Farseer(p) => Some(p),
            _ => None,
        }
    }
}
