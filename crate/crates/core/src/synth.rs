//! Seeded synthetic loss surfaces on geometric `(n, d)` ladders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FarseerParams, Law, LossGrid, LossPoint, ScalingLaw};

/// Overshoot allowed past `max` when placing the last rung, as a fraction of one rung in log space.
pub const LADDER_SLACK: f64 = 0.05;

/// Rungs `min·ratio^k`, up to `max` (with [`LADDER_SLACK`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ladder {
    pub min: f64,
    pub max: f64,
    pub ratio: f64,
}

impl Ladder {
    pub fn new(min: f64, max: f64, ratio: f64) -> Result<Self> {
        let l = Self { min, max, ratio };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.min.is_finite()
            && self.max.is_finite()
            && self.ratio.is_finite()
            && self.min > 0.0
            && self.max >= self.min
            && self.ratio > 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid ladder min={} max={} ratio={}",
                self.min, self.max, self.ratio
            )))
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let limit = self.max * self.ratio.powf(LADDER_SLACK);
        (0..)
            .map(|k| self.min * self.ratio.powi(k))
            .take_while(|&v| v <= limit)
            .collect()
    }
}

/// The `n` ladder of the reference grid: 2.01e8 to 6.37e9 at ratio √2.
pub fn reference_n_ladder() -> Ladder {
    Ladder {
        min: 2.01e8,
        max: 6.37e9,
        ratio: std::f64::consts::SQRT_2,
    }
}

/// The `d` ladder of the reference grid: 1e9 to 4.31e11 at ratio √2.
pub fn reference_d_ladder() -> Ladder {
    Ladder {
        min: 1.0e9,
        max: 4.31e11,
        ratio: std::f64::consts::SQRT_2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// The same `σ` everywhere.
    #[default]
    Constant,
    /// `σ·(n / reference_n)^(−exponent)`, shrinking with model size.
    ModelScaled { exponent: f64, reference_n: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub law: Law,
    pub n_ladder: Ladder,
    pub d_ladder: Ladder,
    pub noise_sigma: f64,
    pub noise_schedule: NoiseSchedule,
    pub seed: u64,
}

impl SurfaceSpec {
    /// The reference law on the reference ladders, noiseless.
    pub fn reference() -> Self {
        Self {
            law: Law::Farseer(FarseerParams::reference()),
            n_ladder: reference_n_ladder(),
            d_ladder: reference_d_ladder(),
            noise_sigma: 0.0,
            noise_schedule: NoiseSchedule::Constant,
            seed: 0,
        }
    }

    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Self {
        self.noise_sigma = sigma;
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.n_ladder.validate()?;
        self.d_ladder.validate()?;
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidInput(format!(
                "noise sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        if let NoiseSchedule::ModelScaled { exponent, reference_n } = self.noise_schedule {
            if !exponent.is_finite() || reference_n.is_nan() || reference_n <= 0.0 {
                return Err(Error::InvalidInput("invalid model-scaled noise schedule".into()));
            }
        }
        Ok(())
    }

    fn sigma_at(&self, n: f64) -> f64 {
        match self.noise_schedule {
            NoiseSchedule::Constant => self.noise_sigma,
            NoiseSchedule::ModelScaled { exponent, reference_n } => {
                self.noise_sigma * (n / reference_n).powf(-exponent)
            }
        }
    }
}

/// Random stream for the point at ladder indices `(i, j)`.
pub fn point_rng(seed: u64, i: usize, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((i as u64) << 32) | j as u64);
    rng
}

/// Evaluates the law at every ladder point and adds Gaussian noise.
///
/// Each point draws from its own stream, so the output does not depend on
/// evaluation order. The grid's `lambda` is the `d` ladder ratio.
pub fn generate_surface(spec: &SurfaceSpec) -> Result<LossGrid> {
    spec.validate()?;
    let ns = spec.n_ladder.values();
    let ds = spec.d_ladder.values();
    let cells: Vec<(usize, usize)> = (0..ns.len()).flat_map(|i| (0..ds.len()).map(move |j| (i, j))).collect();
    let points = cells
        .par_iter()
        .map(|&(i, j)| {
            let (n, d) = (ns[i], ds[j]);
            let clean = spec.law.loss(n, d)?;
            let sigma = spec.sigma_at(n);
            let loss = if sigma > 0.0 {
                let normal =
                    Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(format!("noise distribution: {e}")))?;
                clean + normal.sample(&mut point_rng(spec.seed, i, j))
            } else {
                clean
            };
            if loss.is_nan() || loss <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "generated loss {loss} at n={n:e}, d={d:e} is not positive"
                )));
            }
            Ok(LossPoint { n, d, loss })
        })
        .collect::<Result<Vec<_>>>()?;
    LossGrid::new(points, spec.d_ladder.ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{eval_farseer, ChinchillaParams};

    #[test]
    fn reference_ladders() {
        let ns = reference_n_ladder().values();
        assert_eq!(ns.len(), 11);
        assert!((ns[10] / 6.37e9 - 1.0).abs() < 0.01);
        let ds = reference_d_ladder().values();
        assert_eq!(ds.len(), 18);
    }

    #[test]
    fn noiseless_is_passthrough() {
        let spec = SurfaceSpec::reference();
        let grid = generate_surface(&spec).unwrap();
        for p in grid.points() {
            assert_eq!(
                p.loss.to_bits(),
                eval_farseer(&FarseerParams::reference(), p.n, p.d).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let spec = SurfaceSpec::reference().with_noise(1e-3, 17);
        assert_eq!(generate_surface(&spec).unwrap(), generate_surface(&spec).unwrap());
        let other = SurfaceSpec::reference().with_noise(1e-3, 18);
        assert_ne!(generate_surface(&spec).unwrap(), generate_surface(&other).unwrap());
    }

    fn dense_spec(seed: u64) -> SurfaceSpec {
        SurfaceSpec {
            law: Law::Chinchilla(ChinchillaParams {
                a: 400.0,
                alpha: 0.34,
                b: 410.0,
                beta: 0.28,
                e: 1.69,
            }),
            n_ladder: Ladder::new(1e8, 1e8 * 1.01f64.powi(99), 1.01).unwrap(),
            d_ladder: Ladder::new(1e9, 1e9 * 1.01f64.powi(99), 1.01).unwrap(),
            noise_sigma: 1e-3,
            noise_schedule: NoiseSchedule::Constant,
            seed,
        }
    }

    #[test]
    fn noise_has_requested_spread() {
        let spec = dense_spec(5);
        let grid = generate_surface(&spec).unwrap();
        assert_eq!(grid.len(), 10_000);
        let dev: Vec<f64> = grid
            .points()
            .iter()
            .map(|p| p.loss - spec.law.loss(p.n, p.d).unwrap())
            .collect();
        let mean = dev.iter().sum::<f64>() / dev.len() as f64;
        let sd = (dev.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (dev.len() - 1) as f64).sqrt();
        assert!((0.9e-3..=1.1e-3).contains(&sd), "sd {sd}");
    }

    #[test]
    fn noise_is_uncorrelated_along_both_axes() {
        let spec = dense_spec(9);
        let grid = generate_surface(&spec).unwrap();
        let mut dev = vec![vec![0.0; 100]; 100];
        let ns = spec.n_ladder.values();
        let ds = spec.d_ladder.values();
        for p in grid.points() {
            let i = ns.iter().position(|&n| n == p.n).unwrap();
            let j = ds.iter().position(|&d| d == p.d).unwrap();
            dev[i][j] = p.loss - spec.law.loss(p.n, p.d).unwrap();
        }
        let lag1 = |pairs: Vec<(f64, f64)>| {
            let n = pairs.len() as f64;
            let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
            let cov: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let vx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let vy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
            cov / (vx * vy).sqrt()
        };
        let along_d: Vec<(f64, f64)> = (0..100)
            .flat_map(|i| (0..99).map(move |j| (i, j)))
            .map(|(i, j)| (dev[i][j], dev[i][j + 1]))
            .collect();
        let along_n: Vec<(f64, f64)> = (0..99)
            .flat_map(|i| (0..100).map(move |j| (i, j)))
            .map(|(i, j)| (dev[i][j], dev[i + 1][j]))
            .collect();
        assert!(lag1(along_d).abs() <= 0.05);
        assert!(lag1(along_n).abs() <= 0.05);
    }

    #[test]
    fn model_scaled_noise_shrinks() {
        let mut spec = SurfaceSpec::reference().with_noise(1e-3, 1);
        spec.noise_schedule = NoiseSchedule::ModelScaled {
            exponent: 0.5,
            reference_n: 2.01e8,
        };
        assert!(spec.sigma_at(8.04e8) < spec.sigma_at(2.01e8));
        assert!((spec.sigma_at(8.04e8) - 5e-4).abs() < 1e-12);
        generate_surface(&spec).unwrap();
    }

    #[test]
    fn non_positive_losses_are_rejected() {
        let spec = SurfaceSpec::reference().with_noise(10.0, 3);
        assert!(matches!(generate_surface(&spec), Err(Error::InvalidInput(_))));
    }
}
