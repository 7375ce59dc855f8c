//! Measurement types and the two parametric law families.
//!
//! `n` is always the non-embedding parameter count and `d` the number of
//! training tokens. Both are treated as opaque positive counts. Losses are in
//! bits per character; no unit conversion happens here (see [`crate::io::bpc_from_loss`]).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest magnitude accepted as the argument of `exp`.
pub const EXP_ARG_LIMIT: f64 = 700.0;

/// Default ratio between consecutive rungs of the `d` ladder.
pub const DEFAULT_LAMBDA: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub n: f64,
    pub d: f64,
    pub loss: f64,
}

impl LossPoint {
    pub fn new(n: f64, d: f64, loss: f64) -> Result<Self> {
        let p = Self { n, d, loss };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n", self.n), ("d", self.d), ("loss", self.loss)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Observations for one model size, sorted by `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRow {
    pub n: f64,
    pub points: Vec<(f64, f64)>,
}

/// An empirical loss surface.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrid {
    points: Vec<LossPoint>,
    lambda: f64,
}

impl LossGrid {
    /// Builds a grid, rejecting invalid points, duplicate `(n, d)` pairs and `lambda <= 1`.
    pub fn new(points: Vec<LossPoint>, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda <= 1.0 {
            return Err(Error::InvalidInput(format!(
                "grid ratio lambda must exceed 1, got {lambda}"
            )));
        }
        if points.is_empty() {
            return Err(Error::InvalidInput("grid has no points".into()));
        }
        let mut seen = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::InvalidInput(format!("point {i}: {e}")))?;
            if let Some(first) = seen.insert((p.n.to_bits(), p.d.to_bits()), i) {
                return Err(Error::InvalidInput(format!(
                    "duplicate (n, d) = ({}, {}) at points {first} and {i}",
                    p.n, p.d
                )));
            }
        }
        Ok(Self { points, lambda })
    }

    pub fn with_default_lambda(points: Vec<LossPoint>) -> Result<Self> {
        Self::new(points, DEFAULT_LAMBDA)
    }

    pub fn points(&self) -> &[LossPoint] {
        &self.points
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distinct model sizes in increasing order.
    pub fn model_sizes(&self) -> Vec<f64> {
        let mut ns: Vec<f64> = self.points.iter().map(|p| p.n).collect();
        ns.sort_by(f64::total_cmp);
        ns.dedup();
        ns
    }

    /// Groups observations by model size; rows and their points are sorted ascending.
    pub fn by_model_size(&self) -> Vec<ModelRow> {
        let mut groups: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
        for p in &self.points {
            // positive finite f64 bit patterns order like the values
            groups.entry(p.n.to_bits()).or_default().push((p.d, p.loss));
        }
        groups
            .into_iter()
            .map(|(bits, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                ModelRow {
                    n: f64::from_bits(bits),
                    points,
                }
            })
            .collect()
    }

    /// Returns the loss recorded at exactly `(n, d)`, if any.
    pub fn loss_at(&self, n: f64, d: f64) -> Option<f64> {
        self.points.iter().find(|p| p.n == n && p.d == d).map(|p| p.loss)
    }

    /// Keeps the points matching `keep`, with the same `lambda`.
    pub fn filter(&self, keep: impl Fn(&LossPoint) -> bool) -> Result<Self> {
        let points: Vec<LossPoint> = self.points.iter().copied().filter(|p| keep(p)).collect();
        Self::new(points, self.lambda)
    }

    /// Checks the minimum shape needed by the piecewise pipeline:
    /// at least two model sizes, each with four or more data sizes.
    pub fn validate_for_piecewise(&self) -> Result<()> {
        let rows = self.by_model_size();
        if rows.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "piecewise fitting needs at least 2 model sizes, grid has {}",
                rows.len()
            )));
        }
        if let Some(row) = rows.iter().find(|r| r.points.len() < 4) {
            return Err(Error::InsufficientData(format!(
                "model size n={:e} has {} data sizes, at least 4 are required",
                row.n,
                row.points.len()
            )));
        }
        Ok(())
    }
}

/// The two supported law families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Farseer,
    Chinchilla,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Farseer => "farseer",
            Family::Chinchilla => "chinchilla",
        }
    }

    pub fn parameter_names(self) -> &'static [&'static str] {
        match self {
            Family::Farseer => &FarseerParams::NAMES,
            Family::Chinchilla => &ChinchillaParams::NAMES,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "farseer" => Ok(Family::Farseer),
            "chinchilla" => Ok(Family::Chinchilla),
            other => Err(Error::InvalidInput(format!("unknown law family '{other}'"))),
        }
    }
}

/// A loss surface `L(n, d)`.
pub trait ScalingLaw {
    fn family(&self) -> Family;

    fn loss(&self, n: f64, d: f64) -> Result<f64>;
}

fn check_count(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "{name} must be finite and positive, got {v}"
        )));
    }
    Ok(())
}

fn guarded_exp(term: &'static str, arg: f64, n: f64, d: f64) -> Result<f64> {
    if !arg.is_finite() {
        return Err(Error::Evaluation {
            term,
            n,
            d,
            reason: format!("non-finite exponent argument {arg}"),
        });
    }
    if arg.abs() > EXP_ARG_LIMIT {
        return Err(Error::Evaluation {
            term,
            n,
            d,
            reason: format!("exponent argument {arg:e} outside [-{EXP_ARG_LIMIT}, {EXP_ARG_LIMIT}]"),
        });
    }
    Ok(arg.exp())
}

/// Nine coefficients of the stretched-exponential law
/// `L = exp(a3·n^γ + b3) + exp(a2·n^β + b2) · d^(−exp(a1·n^α + b1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarseerParams {
    pub a1: f64,
    pub b1: f64,
    pub alpha: f64,
    pub a2: f64,
    pub b2: f64,
    pub beta: f64,
    pub a3: f64,
    pub b3: f64,
    pub gamma: f64,
}

/// Factors of the law at a fixed model size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarseerComponents {
    /// Data exponent `A(n)`.
    pub a_of_n: f64,
    /// Data coefficient `B(n)`.
    pub b_of_n: f64,
    /// Model-dependent floor `exp(a3·n^γ + b3)`.
    pub u_of_n: f64,
}

impl FarseerParams {
    pub const NAMES: [&'static str; 9] = ["a1", "b1", "alpha", "a2", "b2", "beta", "a3", "b3", "gamma"];

    /// Coefficients of the published BPC fit over models from 2e8 to 6.4e9
    /// non-embedding parameters.
    pub const fn reference() -> Self {
        Self {
            a1: -0.124,
            b1: 0.424,
            alpha: 0.123,
            a2: 88.01,
            b2: -6.287,
            beta: -0.1,
            a3: -0.021,
            b3: -0.091,
            gamma: 0.169,
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.a1, self.b1, self.alpha, self.a2, self.b2, self.beta, self.a3, self.b3, self.gamma,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let v: [f64; 9] = v
            .try_into()
            .map_err(|_| Error::InvalidInput(format!("farseer law needs 9 parameters, got {}", v.len())))?;
        let p = Self {
            a1: v[0],
            b1: v[1],
            alpha: v[2],
            a2: v[3],
            b2: v[4],
            beta: v[5],
            a3: v[6],
            b3: v[7],
            gamma: v[8],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((name, v)) = Self::NAMES.iter().zip(self.to_array()).find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("parameter {name} is not finite: {v}")));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if v == 0.0 {
                return Err(Error::InvalidInput(format!("exponent {name} must be nonzero")));
            }
        }
        Ok(())
    }

    /// `A(n) = exp(a1·n^α + b1)`, the data exponent.
    pub fn exponent_term(&self, n: f64) -> Result<f64> {
        check_count("n", n)?;
        guarded_exp("exponent", self.a1 * n.powf(self.alpha) + self.b1, n, f64::NAN)
    }

    /// `B(n) = exp(a2·n^β + b2)`, the data coefficient.
    pub fn coefficient_term(&self, n: f64) -> Result<f64> {
        check_count("n", n)?;
        guarded_exp("coefficient", self.a2 * n.powf(self.beta) + self.b2, n, f64::NAN)
    }

    /// `exp(a3·n^γ + b3)`, the part of the loss that no amount of data removes.
    pub fn residual_term(&self, n: f64) -> Result<f64> {
        check_count("n", n)?;
        guarded_exp("residual", self.a3 * n.powf(self.gamma) + self.b3, n, f64::NAN)
    }

    pub fn components(&self, n: f64) -> Result<FarseerComponents> {
        Ok(FarseerComponents {
            a_of_n: self.exponent_term(n)?,
            b_of_n: self.coefficient_term(n)?,
            u_of_n: self.residual_term(n)?,
        })
    }
}

impl FarseerComponents {
    /// `B·d^(−A)`, the data-dependent part of the loss.
    pub fn data_term(&self, n: f64, d: f64) -> Result<f64> {
        check_count("d", d)?;
        let power = guarded_exp("power", -self.a_of_n * d.ln(), n, d)?;
        Ok(self.b_of_n * power)
    }

    pub fn loss(&self, n: f64, d: f64) -> Result<f64> {
        let v = self.u_of_n + self.data_term(n, d)?;
        if !v.is_finite() {
            return Err(Error::Evaluation {
                term: "sum",
                n,
                d,
                reason: format!("non-finite loss {v}"),
            });
        }
        Ok(v)
    }
}

pub fn eval_farseer(p: &FarseerParams, n: f64, d: f64) -> Result<f64> {
    check_count("d", d)?;
    let c = p.components(n).map_err(|e| match e {
        Error::Evaluation { term, n, reason, .. } => Error::Evaluation { term, n, d, reason },
        other => other,
    })?;
    c.loss(n, d)
}

pub fn farseer_components(p: &FarseerParams, n: f64) -> Result<FarseerComponents> {
    p.components(n)
}

/// `L = A/n^α + B/d^β + E`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChinchillaParams {
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
    pub beta: f64,
    pub e: f64,
}

impl ChinchillaParams {
    pub const NAMES: [&'static str; 5] = ["A", "alpha", "B", "beta", "E"];

    pub fn to_array(&self) -> [f64; 5] {
        [self.a, self.alpha, self.b, self.beta, self.e]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let v: [f64; 5] = v
            .try_into()
            .map_err(|_| Error::InvalidInput(format!("chinchilla law needs 5 parameters, got {}", v.len())))?;
        let p = Self {
            a: v[0],
            alpha: v[1],
            b: v[2],
            beta: v[3],
            e: v[4],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("chinchilla parameters must be finite".into()));
        }
        if self.a < 0.0 || self.b < 0.0 || self.e < 0.0 {
            return Err(Error::InvalidInput("A, B and E must be non-negative".into()));
        }
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::InvalidInput("alpha and beta must be positive".into()));
        }
        Ok(())
    }
}

pub fn eval_chinchilla(p: &ChinchillaParams, n: f64, d: f64) -> Result<f64> {
    check_count("n", n)?;
    check_count("d", d)?;
    let v = p.a / n.powf(p.alpha) + p.b / d.powf(p.beta) + p.e;
    if !v.is_finite() {
        return Err(Error::Evaluation {
            term: "sum",
            n,
            d,
            reason: format!("non-finite loss {v}"),
        });
    }
    Ok(v)
}

impl ScalingLaw for FarseerParams {
    fn family(&self) -> Family {
        Family::Farseer
    }

    fn loss(&self, n: f64, d: f64) -> Result<f64> {
        eval_farseer(self, n, d)
    }
}

impl ScalingLaw for ChinchillaParams {
    fn family(&self) -> Family {
        Family::Chinchilla
    }

    fn loss(&self, n: f64, d: f64) -> Result<f64> {
        eval_chinchilla(self, n, d)
    }
}

/// A fitted law of either family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Law {
    Farseer(FarseerParams),
    Chinchilla(ChinchillaParams),
}

impl Law {
    /// Parameters in the family's canonical order (see [`Family::parameter_names`]).
    pub fn parameters(&self) -> Vec<f64> {
        match self {
            Law::Farseer(p) => p.to_array().to_vec(),
            Law::Chinchilla(p) => p.to_array().to_vec(),
        }
    }

    pub fn from_parameters(family: Family, values: &[f64]) -> Result<Self> {
        Ok(match family {
            Family::Farseer => Law::Farseer(FarseerParams::from_slice(values)?),
            Family::Chinchilla => Law::Chinchilla(ChinchillaParams::from_slice(values)?),
        })
    }
}

impl ScalingLaw for Law {
    fn family(&self) -> Family {
        match self {
            Law::Farseer(_) => Family::Farseer,
            Law::Chinchilla(_) => Family::Chinchilla,
        }
    }

    fn loss(&self, n: f64, d: f64) -> Result<f64> {
        match self {
            Law::Farseer(p) => eval_farseer(p, n, d),
            Law::Chinchilla(p) => eval_chinchilla(p, n, d),
        }
    }
}

impl From<FarseerParams> for Law {
    fn from(p: FarseerParams) -> Self {
        Law::Farseer(p)
    }
}

impl From<ChinchillaParams> for Law {
    fn from(p: ChinchillaParams) -> Self {
        Law::Chinchilla(p)
    }
}

impl<T: ScalingLaw + ?Sized> ScalingLaw for &T {
    fn family(&self) -> Family {
        (**self).family()
    }

    fn loss(&self, n: f64, d: f64) -> Result<f64> {
        (**self).loss(n, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const REF: FarseerParams = FarseerParams::reference();

    #[test]
    fn reference_value_matches_independent_evaluation() {
        // 40-digit evaluation of the reference coefficients, computed outside this crate.
        let expected = 0.448_524_803_351_549;
        let got = eval_farseer(&REF, 6.37e9, 9.05e10).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-13);
    }

    #[test]
    fn components_at_smallest_model() {
        let c = farseer_components(&REF, 2.01e8).unwrap();
        assert_relative_eq!(c.a_of_n, 0.415_483_958_140_93, max_relative = 1e-13);
        assert_relative_eq!(c.b_of_n, 829.693_636_163_567_8, max_relative = 1e-12);
        assert_relative_eq!(c.u_of_n, 0.536_630_045_741_307_3, max_relative = 1e-13);
    }

    #[test]
    fn zero_exponent_coefficients_give_unit_exponent() {
        let p = FarseerParams {
            a1: 0.0,
            b1: 0.0,
            ..REF
        };
        for n in [1.0, 1e6, 1e12] {
            assert_eq!(p.exponent_term(n).unwrap(), 1.0);
        }
    }

    #[test]
    fn exponent_term_decreases_with_model_size() {
        let ns = [1e7, 1e8, 1e9, 1e10, 1e11];
        let a: Vec<f64> = ns.iter().map(|&n| REF.exponent_term(n).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn loss_approaches_floor_as_data_grows() {
        let n = 1e9;
        let floor = REF.residual_term(n).unwrap();
        let far = eval_farseer(&REF, n, 1e200).unwrap();
        assert!((far - floor).abs() < 1e-12);
    }

    #[test]
    fn doubling_data_lowers_loss() {
        let l1 = eval_farseer(&REF, 6.37e9, 9.05e10).unwrap();
        let l2 = eval_farseer(&REF, 6.37e9, 1.81e11).unwrap();
        assert!(l2 < l1);
    }

    #[test]
    fn overflow_is_reported_with_term_name() {
        let p = FarseerParams {
            a2: 1e4,
            beta: 0.5,
            ..REF
        };
        match eval_farseer(&p, 1e9, 1e10) {
            Err(Error::Evaluation { term, .. }) => assert_eq!(term, "coefficient"),
            other => panic!("expected evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn chinchilla_examples() {
        let unit = ChinchillaParams {
            a: 1.0,
            alpha: 1.0,
            b: 1.0,
            beta: 1.0,
            e: 0.0,
        };
        assert_eq!(eval_chinchilla(&unit, 1.0, 1.0).unwrap(), 2.0);

        let flat = ChinchillaParams {
            a: 0.0,
            alpha: 0.3,
            b: 0.0,
            beta: 0.3,
            e: 1.7,
        };
        for (n, d) in [(1.0, 1.0), (1e9, 1e12), (3.0, 7.0)] {
            assert_eq!(eval_chinchilla(&flat, n, d).unwrap(), 1.7);
        }

        let sq = ChinchillaParams {
            a: 2.0,
            alpha: 0.5,
            b: 3.0,
            beta: 0.5,
            e: 1.0,
        };
        assert_eq!(eval_chinchilla(&sq, 4.0, 9.0).unwrap(), 3.0);
    }

    #[test]
    fn chinchilla_tends_to_irreducible_loss() {
        let p = ChinchillaParams {
            a: 400.0,
            alpha: 0.34,
            b: 410.0,
            beta: 0.28,
            e: 1.69,
        };
        let far = eval_chinchilla(&p, 1e60, 1e60).unwrap();
        assert!((far - p.e).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_in_model_size_on_log_lattice() {
        for i in 0..=20 {
            let n = 1e8 * 1e4f64.powf(i as f64 / 20.0);
            for j in 0..=20 {
                let d = 1e9 * 1e4f64.powf(j as f64 / 20.0);
                let h = 1e-4;
                let up = eval_farseer(&REF, n * (1.0 + h), d).unwrap();
                let down = eval_farseer(&REF, n * (1.0 - h), d).unwrap();
                assert!(up - down < 0.0, "dL/dN >= 0 at n={n:e}, d={d:e}");
            }
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(LossPoint::new(0.0, 1.0, 1.0).is_err());
        assert!(LossPoint::new(1.0, f64::NAN, 1.0).is_err());
        assert!(eval_chinchilla(
            &ChinchillaParams {
                a: 1.0,
                alpha: 1.0,
                b: 1.0,
                beta: 1.0,
                e: 0.0
            },
            -1.0,
            1.0
        )
        .is_err());
        let p = LossPoint::new(1.0, 1.0, 1.0).unwrap();
        assert!(LossGrid::new(vec![p, p], DEFAULT_LAMBDA).is_err());
        assert!(LossGrid::new(vec![p], 1.0).is_err());
    }

    #[test]
    fn grid_grouping_sorts_rows() {
        let pts = vec![
            LossPoint::new(2.0, 8.0, 1.0).unwrap(),
            LossPoint::new(1.0, 4.0, 2.0).unwrap(),
            LossPoint::new(2.0, 2.0, 3.0).unwrap(),
        ];
        let g = LossGrid::with_default_lambda(pts).unwrap();
        let rows = g.by_model_size();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].n, 1.0);
        assert_eq!(rows[1].points, vec![(2.0, 3.0), (8.0, 1.0)]);
        assert!(g.validate_for_piecewise().is_err());
    }

    proptest! {
        #[test]
        fn components_recombine(
            a1 in -0.3f64..0.0, b1 in -0.5f64..0.8, alpha in 0.05f64..0.3,
            a2 in 10.0f64..100.0, b2 in -8.0f64..-4.0, beta in -0.2f64..-0.05,
            a3 in -0.05f64..0.0, b3 in -0.3f64..0.1, gamma in 0.05f64..0.3,
            ln_n in 18.0f64..25.0, ln_d in 20.0f64..28.0,
        ) {
            let p = FarseerParams { a1, b1, alpha, a2, b2, beta, a3, b3, gamma };
            let (n, d) = (ln_n.exp(), ln_d.exp());
            let c = p.components(n).unwrap();
            let data = c.b_of_n * d.powf(-c.a_of_n);
            let recombined = c.u_of_n + data;
            let direct = eval_farseer(&p, n, d).unwrap();
            // powf and exp(-A ln d) round differently by up to |A ln d| ulp
            let slack = 4.0 * direct + data * (c.a_of_n * d.ln() + 2.0);
            prop_assert!((recombined - direct).abs() <= f64::EPSILON * slack);
        }

        #[test]
        fn strictly_decreasing_in_data(
            a1 in -0.3f64..0.05, b1 in -0.5f64..0.8, alpha in 0.05f64..0.15,
            a2 in 10.0f64..100.0, b2 in -8.0f64..-4.0, beta in -0.2f64..-0.05,
            ln_n in 18.0f64..23.0, ln_d in 20.0f64..26.0,
        ) {
            let p = FarseerParams { a1, b1, alpha, a2, b2, beta, ..REF };
            let (n, d) = (ln_n.exp(), ln_d.exp());
            let c = p.components(n).unwrap();
            // closed form: dL/dd = -A·B·d^(-A-1)
            let slope = -c.a_of_n * c.b_of_n * d.powf(-c.a_of_n - 1.0);
            prop_assert!(slope < 0.0);
            let l1 = eval_farseer(&p, n, d).unwrap();
            let l2 = eval_farseer(&p, n, d * 2.0).unwrap();
            prop_assert!(l2 <= l1);
            if c.b_of_n * d.powf(-c.a_of_n) > 1e-8 * l1 {
                prop_assert!(l2 < l1);
            }
        }
    }
}
