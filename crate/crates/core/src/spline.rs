//! Cubic B-spline bases with difference penalties: the building blocks of
//! the penalized regression surfaces.
//!
//! Bases are clamped (open) uniform knot vectors, so a basis is fully
//! described by its size and range. Penalties are coefficient-space
//! difference penalties S = DᵀD; identifiability constraints are absorbed
//! by an orthonormal null-space basis of the constraint row.

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};

const DEGREE: usize = 3;

/// Clamped uniform cubic B-spline basis on [a, b] with `k` functions.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    k: usize,
    a: f64,
    b: f64,
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn clamped(k: usize, a: f64, b: f64) -> Result<Self> {
        if k < DEGREE + 1 {
            return Err(CoreError::invalid(format!(
                "basis needs at least {} functions, got {k}",
                DEGREE + 1
            )));
        }
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(CoreError::invalid(format!("degenerate basis range [{a}, {b}]")));
        }
        let mut knots = Vec::with_capacity(k + DEGREE + 1);
        knots.extend(std::iter::repeat(a).take(DEGREE + 1));
        let n_interior = k - DEGREE - 1;
        let h = (b - a) / (n_interior + 1) as f64;
        for i in 0..n_interior {
            knots.push(a + (i + 1) as f64 * h);
        }
        knots.extend(std::iter::repeat(b).take(DEGREE + 1));
        Ok(BSplineBasis { k, a, b, knots })
    }

    pub fn n_basis(&self) -> usize {
        self.k
    }

    pub fn range(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    /// Greville abscissa of basis function `i`; coefficients equal to these
    /// reproduce the identity function.
    pub fn greville(&self, i: usize) -> f64 {
        (self.knots[i + 1] + self.knots[i + 2] + self.knots[i + 3]) / 3.0
    }

    /// Evaluates the four basis functions supported at `x` (clamped into
    /// the range, i.e. constant extrapolation beyond it). Returns the index
    /// of the first one and their values.
    pub fn eval(&self, x: f64) -> (usize, [f64; 4]) {
        let x = x.clamp(self.a, self.b);
        // Knot span index mu with t[mu] <= x < t[mu+1].
        let n_interior = self.k - DEGREE - 1;
        let h = (self.b - self.a) / (n_interior + 1) as f64;
        let mu = (DEGREE + (((x - self.a) / h) as usize)).min(self.k - 1);
        let t = &self.knots;
        let mut vals = [0.0f64; 4];
        let mut left = [0.0f64; 4];
        let mut right = [0.0f64; 4];
        vals[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        (mu - DEGREE, vals)
    }
}

/// S = DᵀD for the order-th difference matrix on k coefficients.
pub fn difference_penalty(k: usize, order: usize) -> Result<DMatrix<f64>> {
    if order == 0 || k <= order {
        return Err(CoreError::invalid(format!(
            "difference penalty needs 0 < order < k, got order {order}, k {k}"
        )));
    }
    // Build D by repeated first differences.
    let mut d = DMatrix::<f64>::zeros(k - 1, k);
    for i in 0..k - 1 {
        d[(i, i)] = -1.0;
        d[(i, i + 1)] = 1.0;
    }
    for _ in 1..order {
        let rows = d.nrows();
        let mut next = DMatrix::<f64>::zeros(rows - 1, k);
        for i in 0..rows - 1 {
            for j in 0..k {
                next[(i, j)] = d[(i + 1, j)] - d[(i, j)];
            }
        }
        d = next;
    }
    Ok(d.transpose() * d)
}

/// Orthonormal basis Z (k x (k-1)) of the null space of the constraint row
/// cᵀ, via one Householder reflection: cᵀZ = 0, ZᵀZ = I.
pub fn constraint_null_basis(c: &[f64]) -> Result<DMatrix<f64>> {
    let k = c.len();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || k < 2 {
        return Err(CoreError::invalid(
            "constraint row must be nonzero with at least 2 entries".to_string(),
        ));
    }
    let mut v: Vec<f64> = c.to_vec();
    v[0] += if c[0] >= 0.0 { norm } else { -norm };
    let vtv: f64 = v.iter().map(|x| x * x).sum();
    let mut z = DMatrix::<f64>::zeros(k, k - 1);
    for col in 0..k - 1 {
        let j = col + 1; // column j of the Householder matrix
        for i in 0..k {
            let e = if i == j { 1.0 } else { 0.0 };
            z[(i, col)] = e - 2.0 * v[i] * v[j] / vtv;
        }
    }
    Ok(z)
}
