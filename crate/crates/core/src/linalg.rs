//! Small dense linear-algebra helpers shared by the controller modules.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// `xᵀ W x`.
pub fn quad_form(x: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (w * x).dot(x)
}

/// `‖x‖_W = sqrt(xᵀ W x)`, clamped at zero against rounding.
pub fn weighted_norm(x: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    quad_form(x, w).max(0.0).sqrt()
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    *sym_eigenvalues(m).last().expect("non-empty matrix")
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

/// λ̄(√M) for a symmetric positive semi-definite `M`: the square root of its
/// largest eigenvalue.
pub fn sqrt_max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    max_eigenvalue(m).max(0.0).sqrt()
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

pub fn is_psd(m: &DMatrix<f64>) -> bool {
    is_symmetric(m, 1e-9) && min_eigenvalue(m) >= -1e-12 * m.amax().max(1.0)
}

pub fn is_pd(m: &DMatrix<f64>) -> bool {
    is_symmetric(m, 1e-9) && min_eigenvalue(m) > 1e-12 * m.amax().max(1.0)
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j])
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Axis-aligned box `{x : lower ≤ x ≤ upper}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len(), "box bound lengths differ");
        Self { lower, upper }
    }

    pub fn symmetric(half_widths: &[f64]) -> Self {
        Self {
            lower: half_widths.iter().map(|h| -h).collect(),
            upper: half_widths.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.iter().zip(&self.upper).any(|(l, u)| l > u)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.contains_with_tol(x, 0.0)
    }

    pub fn contains_with_tol(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    /// Largest amount by which `x` leaves the box (0 when inside).
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| (l - v).max(v - u).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i].clamp(self.lower[i], self.upper[i]))
    }

    /// Box shrunk by `margins[c]` on both sides of coordinate `c`.
    pub fn shrink(&self, margins: &[f64]) -> Self {
        Self {
            lower: self.lower.iter().zip(margins).map(|(l, m)| l + m).collect(),
            upper: self.upper.iter().zip(margins).map(|(u, m)| u - m).collect(),
        }
    }
}

/// Per-coordinate support value of the ellipsoid `{x : ‖x‖_P ≤ radius}`:
/// `max |x_c| = radius · sqrt((P⁻¹)_cc)`.
pub fn ellipsoid_half_widths(p_inv: &DMatrix<f64>, radius: f64) -> Vec<f64> {
    (0..p_inv.nrows())
        .map(|c| radius * p_inv[(c, c)].max(0.0).sqrt())
        .collect()
}
