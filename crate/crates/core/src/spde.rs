//! Matérn (smoothness 1) precision matrices via the stochastic PDE link,
//! barycentric projection onto observation sites, and the AR(1)-in-time
//! Kronecker extension.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::fem::fem_matrices;
use crate::geo::KmPoint;
use crate::mesh::SpdeMesh;
use crate::sparse::{Csr, SparseSym};

/// Spatial hyperparameters: empirical range (correlation ~0.1) and marginal
/// standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternHyper {
    pub range_km: f64,
    pub sd: f64,
}

impl MaternHyper {
    pub fn new(range_km: f64, sd: f64) -> Result<Self> {
        if !(range_km > 0.0 && range_km.is_finite()) {
            return Err(CoreError::invalid(format!("range must be positive, got {range_km}")));
        }
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(CoreError::invalid(format!("sd must be positive, got {sd}")));
        }
        Ok(MaternHyper { range_km, sd })
    }

    /// kappa = sqrt(8 nu) / range with nu = 1.
    pub fn kappa(&self) -> f64 {
        8.0f64.sqrt() / self.range_km
    }

    /// tau^2 from sd^2 = 1 / (4 pi kappa^2 tau^2).
    pub fn tau_sq(&self) -> f64 {
        let k = self.kappa();
        1.0 / (4.0 * std::f64::consts::PI * k * k * self.sd * self.sd)
    }
}

/// Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G) with lumped mass C.
pub fn matern_precision(mesh: &SpdeMesh, hyper: &MaternHyper) -> Result<SparseSym> {
    let (c, g) = fem_matrices(mesh)?;
    let kappa2 = hyper.kappa() * hyper.kappa();
    let tau2 = hyper.tau_sq();
    let c_inv: Vec<f64> = c.iter().map(|&v| 1.0 / v).collect();
    let gcg = g
        .csr()
        .matmul(&Csr::diag_matrix(&c_inv))?
        .matmul(g.csr())?;
    let c_mat = Csr::diag_matrix(&c);
    let part = c_mat.add_scaled(kappa2 * kappa2, g.csr(), 2.0 * kappa2)?;
    let mut q = part.add_scaled(1.0, &gcg, 1.0)?;
    q.scale(tau2);
    SparseSym::new(q)
}

/// Sparse projector: row i holds the barycentric weights of location i in
/// its containing triangle (<= 3 nonzeros, row sum 1).
pub fn projector(mesh: &SpdeMesh, locations: &[KmPoint]) -> Result<Csr> {
    let mut trips = Vec::with_capacity(3 * locations.len());
    for (i, p) in locations.iter().enumerate() {
        let (_, weights) = mesh.locate(p)?;
        for (node, w) in weights {
            if w != 0.0 {
                trips.push((i, node, w));
            }
        }
    }
    Csr::from_triplets(locations.len(), mesh.n_nodes(), &trips)
}

/// First-order autoregression over the window's day axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArSpec {
    pub rho: f64,
    pub t_len: usize,
}

impl ArSpec {
    pub fn new(rho: f64, t_len: usize) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(CoreError::invalid(format!("|rho| must be < 1, got {rho}")));
        }
        if t_len == 0 {
            return Err(CoreError::invalid("window length must be positive".to_string()));
        }
        Ok(ArSpec { rho, t_len })
    }
}

/// Exact AR(1) precision scaled for unit stationary marginal variance:
/// tridiagonal, diag (1, 1+rho^2, ..., 1+rho^2, 1)/(1-rho^2), off-diagonal
/// -rho/(1-rho^2).
pub fn ar1_precision(ar: &ArSpec) -> SparseSym {
    let t = ar.t_len;
    if t == 1 {
        return SparseSym::diag_matrix(&[1.0]);
    }
    let s = 1.0 / (1.0 - ar.rho * ar.rho);
    let mut trips = Vec::with_capacity(3 * t);
    for i in 0..t {
        let d = if i == 0 || i == t - 1 {
            s
        } else {
            (1.0 + ar.rho * ar.rho) * s
        };
        trips.push((i, i, d));
        if i + 1 < t {
            trips.push((i, i + 1, -ar.rho * s));
            trips.push((i + 1, i, -ar.rho * s));
        }
    }
    SparseSym::from_triplets(t, &trips).expect("tridiagonal construction")
}

/// Space-time precision Q_time (x) Q_space; index layout t * m + j.
pub fn spacetime_precision(q_space: &SparseSym, ar: &ArSpec) -> SparseSym {
    ar1_precision(ar).kron(q_space)
}

/// Coordinate-format text export (one `i j value` line per stored entry).
pub fn write_precision_coord(q: &SparseSym, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# {} {} {}", q.n(), q.n(), q.nnz())?;
    for i in 0..q.n() {
        let (cols, vals) = q.csr().row(i);
        for (j, v) in cols.iter().zip(vals) {
            writeln!(w, "{i} {j} {v:.17e}")?;
        }
    }
    w.flush()?;
    Ok(())
}
