//! Fitting, extrapolating and comparing neural scaling laws.
//!
//! Two law families are supported:
//!
//! * the stretched-exponential law
//!   `L(N, D) = exp(a3·N^γ + b3) + exp(a2·N^β + b2) · D^(−exp(a1·N^α + b1))`,
//!   fitted by differential piecewise fitting ([`piecewise`]);
//! * the additive law `L(N, D) = A/N^α + B/D^β + E`, fitted by multi-start
//!   nonlinear least squares ([`nonlinear`]).
//!
//! [`analysis`] derives compute-optimal allocations, held-out errors and
//! surface comparisons from a fitted law; [`synth`] generates reference
//! surfaces; [`io`] reads and writes grid and law files.

pub mod analysis;
pub mod error;
pub mod io;
pub mod model;
pub mod nonlinear;
pub mod piecewise;
pub mod regression;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
pub use model::{
    eval_chinchilla, eval_farseer, farseer_components, ChinchillaParams, Family, FarseerComponents, FarseerParams, Law,
    LossGrid, LossPoint, ScalingLaw,
};
pub use report::FitReport;
