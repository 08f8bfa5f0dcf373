//! Seeded sampling on balls, boxes and ellipsoids.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::BoxSet;

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform sample on the Euclidean ball of the given radius: a uniformly
/// distributed direction scaled by `radius · U^{1/dim}`.
pub fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, dim: usize, radius: f64) -> DVector<f64> {
    let mut dir = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u: f64 = rng.random();
    let norm = dir.norm();
    if dim == 0 || norm == 0.0 || radius == 0.0 {
        return DVector::zeros(dim);
    }
    dir /= norm;
    dir * (radius * u.powf(1.0 / dim as f64))
}

pub fn uniform_in_box<R: Rng + ?Sized>(rng: &mut R, set: &BoxSet) -> DVector<f64> {
    DVector::from_fn(set.dim(), |i, _| {
        let t: f64 = rng.random();
        set.lower[i] + t * (set.upper[i] - set.lower[i])
    })
}

/// Maps unit-ball samples onto the ellipsoid `{x : ‖x‖_P ≤ 1}`.
#[derive(Debug, Clone)]
pub struct EllipsoidMap {
    inv_chol_t: DMatrix<f64>,
}

impl EllipsoidMap {
    /// Returns `None` when `p` is not positive definite.
    pub fn new(p: &DMatrix<f64>) -> Option<Self> {
        let sym = (p + p.transpose()) * 0.5;
        let chol = sym.cholesky()?;
        let inv_chol_t = chol.l().transpose().try_inverse()?;
        Some(Self { inv_chol_t })
    }

    /// `x = L⁻ᵀ z` satisfies `‖x‖_P = ‖z‖` where `P = L Lᵀ`.
    pub fn map(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.inv_chol_t * z
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, radius: f64) -> DVector<f64> {
        let z = uniform_in_ball(rng, self.inv_chol_t.nrows(), radius);
        self.map(&z)
    }
}
