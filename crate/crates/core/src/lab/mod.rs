//! Experiment laboratory: synthetic manifold data generators, the
//! declarative experiment configuration, the deterministic pipeline runner
//! and the cross-run summariser.

mod config;
mod runner;
mod summary;

pub use config::*;
pub use runner::*;
pub use summary::*;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::DataSource;
use crate::rng::rng_from;
use crate::scores::Dataset;

/// Supported synthetic data families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifoldKind {
    Circle { radius: f64, ambient_dim: usize },
    GaussianBlobs { means: Vec<Vec<f64>>, scale: f64 },
    TwoPoint { separation: f64 },
}

/// A data distribution together with its manifold metadata: intrinsic
/// dimension, reach, and the density lower bound on the support.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    pub intrinsic_dim: usize,
    pub reach: f64,
    pub density_floor: f64,
}

impl ManifoldSpec {
    pub fn new(kind: ManifoldKind) -> Result<Self> {
        match &kind {
            ManifoldKind::Circle { radius, ambient_dim } => {
                if !(*radius > 0.0) {
                    return Err(Error::domain("circle radius must be positive"));
                }
                if *ambient_dim < 2 {
                    return Err(Error::domain("circle needs ambient dimension >= 2"));
                }
                Ok(ManifoldSpec {
                    intrinsic_dim: 1,
                    reach: *radius,
                    density_floor: 1.0 / (std::f64::consts::TAU * radius),
                    kind,
                })
            }
            ManifoldKind::GaussianBlobs { means, scale } => {
                if means.is_empty() || !(*scale > 0.0) {
                    return Err(Error::domain("blobs need at least one mean and scale > 0"));
                }
                let dim = means[0].len();
                if means.iter().any(|m| m.len() != dim) {
                    return Err(Error::domain("blob means must share one dimension"));
                }
                // Full-dimensional support: the manifold metadata is not
                // meaningful and must not be used by the ball bound.
                Ok(ManifoldSpec {
                    intrinsic_dim: dim,
                    reach: f64::INFINITY,
                    density_floor: 0.0,
                    kind,
                })
            }
            ManifoldKind::TwoPoint { separation } => {
                if !(*separation > 0.0) {
                    return Err(Error::domain("two-point separation must be positive"));
                }
                Ok(ManifoldSpec {
                    intrinsic_dim: 0,
                    reach: separation / 2.0,
                    density_floor: 0.5,
                    kind,
                })
            }
        }
    }

    pub fn circle(radius: f64, ambient_dim: usize) -> Result<Self> {
        Self::new(ManifoldKind::Circle { radius, ambient_dim })
    }

    pub fn two_point(separation: f64) -> Result<Self> {
        Self::new(ManifoldKind::TwoPoint { separation })
    }

    pub fn ambient_dim(&self) -> usize {
        match &self.kind {
            ManifoldKind::Circle { ambient_dim, .. } => *ambient_dim,
            ManifoldKind::GaussianBlobs { means, .. } => means[0].len(),
            ManifoldKind::TwoPoint { .. } => 2,
        }
    }

    fn draw_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        use rand::Rng;
        match &self.kind {
            ManifoldKind::Circle { radius, ambient_dim } => {
                let phi: f64 = rng.random::<f64>() * std::f64::consts::TAU;
                let mut x = vec![0.0; *ambient_dim];
                x[0] = radius * phi.cos();
                x[1] = radius * phi.sin();
                x
            }
            ManifoldKind::GaussianBlobs { means, scale } => {
                let j = rng.random_range(0..means.len());
                let xi = crate::rng::standard_normal_vec(rng, means[j].len());
                means[j]
                    .iter()
                    .zip(&xi)
                    .map(|(m, z)| m + scale * z)
                    .collect()
            }
            ManifoldKind::TwoPoint { separation } => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                vec![sign * separation / 2.0, 0.0]
            }
        }
    }

    /// The matching loss-module data law. For the two-point family the
    /// population coincides with the empirical mixture of the two atoms, so
    /// population loss terms are exactly computable.
    pub fn data_source(&self) -> Result<DataSource> {
        match &self.kind {
            ManifoldKind::Circle { radius, ambient_dim } => Ok(DataSource::Circle {
                radius: *radius,
                ambient_dim: *ambient_dim,
            }),
            ManifoldKind::TwoPoint { separation } => {
                let h = separation / 2.0;
                Ok(DataSource::Empirical(Dataset::new(vec![
                    vec![h, 0.0],
                    vec![-h, 0.0],
                ])?))
            }
            ManifoldKind::GaussianBlobs { .. } => Err(Error::unsupported(
                "population loss terms are not implemented for blob data",
            )),
        }
    }
}

/// Draw an i.i.d. dataset from the manifold law.
pub fn generate(spec: &ManifoldSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::domain("dataset size must be at least 1"));
    }
    let mut rng = rng_from(seed);
    Dataset::new((0..n).map(|_| spec.draw_point(&mut rng)).collect())
}
