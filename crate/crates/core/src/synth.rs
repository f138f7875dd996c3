//! Seeded synthetic feature generators.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthDist {
    /// Independent standard normal coordinates.
    GaussIid,
    /// AR(1) correlation `rho` along the coordinate index, with per-coordinate scales
    /// spread over two octaves and assigned in shuffled order.
    GaussCorr { rho: f64 },
    /// Equal-weight mixture of unit-variance Gaussians with means drawn from `N(0, 4 I)`.
    Gmm { components: usize },
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates `rows x dim` samples; identical for identical arguments.
pub fn generate(dist: SynthDist, rows: usize, dim: usize, seed: u64) -> Result<FeatureMatrix> {
    if rows == 0 || dim == 0 {
        return Err(Error::Config("rows and dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(rows * dim);
    match dist {
        SynthDist::GaussIid => {
            for _ in 0..rows * dim {
                data.push(normal(&mut rng) as f32);
            }
        }
        SynthDist::GaussCorr { rho } => {
            if !(rho.is_finite() && rho.abs() < 1.0) {
                return Err(Error::Config(format!("rho must lie in (-1, 1), got {rho}")));
            }
            let mut scale: Vec<f64> = (0..dim)
                .map(|m| 2f64.powf(-2.0 * m as f64 / dim as f64))
                .collect();
            scale.shuffle(&mut rng);
            let innov = (1.0 - rho * rho).sqrt();
            for _ in 0..rows {
                let mut x = normal(&mut rng);
                for s in &scale {
                    data.push((x * s) as f32);
                    x = rho * x + innov * normal(&mut rng);
                }
            }
        }
        SynthDist::Gmm { components } => {
            if components == 0 {
                return Err(Error::Config("gmm needs at least one component".into()));
            }
            let means: Vec<f64> = (0..components * dim).map(|_| 2.0 * normal(&mut rng)).collect();
            for _ in 0..rows {
                let c = rng.random_range(0..components);
                for m in &means[c * dim..(c + 1) * dim] {
                    data.push((m + normal(&mut rng)) as f32);
                }
            }
        }
    }
    FeatureMatrix::new(rows, dim, data)
}
