//! Ground-truth simulator: yearly trend + separable AR(1)-in-time /
//! Matérn-in-space Gaussian field, pushed through the inverse of the
//! piecewise marginal transform (identity below the threshold, generalized
//! Pareto quantile above), with optional cylindrical observation gaps.
//!
//! Sampling is exact: a dense Cholesky factor of the analytic Matérn
//! covariance drives a stationary first-order recursion over days, so the
//! marginal law is known in closed form and independent of the sparse
//! machinery used by inference.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::ContinuousCDF;

use crate::error::{CoreError, Result};
use crate::geo::{to_km, GeoPoint};
use crate::grid::{DayIndex, GriddedField, Site};
use crate::predict::Neighborhood;
use crate::special::matern_nu1_correlation;

/// Spatially varying tail modification above a common threshold.
#[derive(Debug, Clone)]
pub struct TailSpec {
    pub u: f64,
    pub sigma_gp: Vec<f64>,
    pub xi: Vec<f64>,
    pub p: Vec<f64>,
}

impl TailSpec {
    /// Same tail at every site.
    pub fn constant(u: f64, sigma_gp: f64, xi: f64, p: f64, n_sites: usize) -> TailSpec {
        TailSpec {
            u,
            sigma_gp: vec![sigma_gp; n_sites],
            xi: vec![xi; n_sites],
            p: vec![p; n_sites],
        }
    }
}

/// Cylindrical gap specification: `count` cylinders of `radius_km` lasting
/// `duration_days`, centers drawn uniformly.
#[derive(Debug, Clone, Copy)]
pub struct GapSpec {
    pub count: usize,
    pub radius_km: f64,
    pub duration_days: usize,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_x: usize,
    pub n_y: usize,
    pub spacing_km: f64,
    pub n_years: usize,
    pub days_per_year: usize,
    pub base_year: i32,
    /// Per-year location coefficients, length `n_years`.
    pub beta_mu: Vec<f64>,
    /// Per-year scale coefficients, length `n_years`, all positive.
    pub beta_sigma: Vec<f64>,
    pub range_km: f64,
    /// Process sd; exactly zero degenerates to the deterministic trend.
    pub sd_w: f64,
    pub rho: f64,
    pub tail: Option<TailSpec>,
    pub gaps: Option<GapSpec>,
    pub seed: u64,
}

impl SimConfig {
    pub fn n_sites(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn n_days(&self) -> usize {
        self.n_years * self.days_per_year
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 {
            return Err(CoreError::invalid("grid must have at least one site".to_string()));
        }
        if !(self.spacing_km > 0.0) {
            return Err(CoreError::invalid(format!(
                "spacing must be positive, got {}",
                self.spacing_km
            )));
        }
        if self.n_years == 0 || self.days_per_year == 0 {
            return Err(CoreError::invalid("need at least one year and one day".to_string()));
        }
        if self.beta_mu.len() != self.n_years || self.beta_sigma.len() != self.n_years {
            return Err(CoreError::dimension(format!(
                "trend coefficients cover {}/{} years, expected {}",
                self.beta_mu.len(),
                self.beta_sigma.len(),
                self.n_years
            )));
        }
        if self.beta_sigma.iter().any(|&b| !(b > 0.0)) {
            return Err(CoreError::invalid("scale coefficients must be positive".to_string()));
        }
        if !(self.range_km > 0.0) {
            return Err(CoreError::invalid(format!(
                "range must be positive, got {}",
                self.range_km
            )));
        }
        if !(self.sd_w >= 0.0 && self.sd_w.is_finite()) {
            return Err(CoreError::invalid(format!("process sd must be >= 0, got {}", self.sd_w)));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(CoreError::invalid(format!("|rho| must be < 1, got {}", self.rho)));
        }
        if let Some(tail) = &self.tail {
            let n = self.n_sites();
            if tail.sigma_gp.len() != n || tail.xi.len() != n || tail.p.len() != n {
                return Err(CoreError::dimension(format!(
                    "tail fields cover {}/{}/{} sites, expected {n}",
                    tail.sigma_gp.len(),
                    tail.xi.len(),
                    tail.p.len()
                )));
            }
            if tail.sigma_gp.iter().any(|&s| !(s > 0.0)) {
                return Err(CoreError::invalid("tail scale must be positive".to_string()));
            }
            if tail.xi.iter().any(|&x| !(x < 0.5) || !x.is_finite()) {
                return Err(CoreError::invalid(
                    "tail shape must be finite and < 0.5".to_string(),
                ));
            }
            if tail.p.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
                return Err(CoreError::invalid(
                    "exceedance probability must be in (0,1)".to_string(),
                ));
            }
            if !tail.u.is_finite() {
                return Err(CoreError::invalid("threshold must be finite".to_string()));
            }
        }
        if let Some(g) = &self.gaps {
            if !(g.radius_km >= 0.0) {
                return Err(CoreError::invalid("gap radius must be >= 0".to_string()));
            }
            if g.count > 0 && (g.duration_days == 0 || g.duration_days > self.n_days()) {
                return Err(CoreError::invalid(format!(
                    "gap duration {} outside record of {} days",
                    g.duration_days,
                    self.n_days()
                )));
            }
        }
        Ok(())
    }
}

const BASE_LAT_DEG: f64 = 15.0;
const BASE_LON_DEG: f64 = 36.0;

fn build_sites(cfg: &SimConfig) -> Result<Vec<Site>> {
    let width = cfg.spacing_km * (cfg.n_x - 1) as f64;
    let height = cfg.spacing_km * (cfg.n_y - 1) as f64;
    let mut sites = Vec::with_capacity(cfg.n_sites());
    for iy in 0..cfg.n_y {
        for ix in 0..cfg.n_x {
            let x = cfg.spacing_km * ix as f64;
            let y = cfg.spacing_km * iy as f64;
            let geo = GeoPoint::new(
                BASE_LAT_DEG + y / crate::geo::KM_PER_DEG_LAT,
                BASE_LON_DEG + x / crate::geo::KM_PER_DEG_LON,
            )?;
            // Synthetic coast distance: meters to the nearest domain edge.
            // Deliberately a min of planes, not a single affine map, so it
            // stays separable from plain coordinates downstream.
            let coast = x.min(y).min((width - x).max(0.0)).min((height - y).max(0.0));
            sites.push(Site {
                id: (iy * cfg.n_x + ix) as u32,
                geo,
                km: to_km(geo),
                dist_coast_m: 1000.0 * coast,
            });
        }
    }
    Ok(sites)
}

/// Inverse of the piecewise marginal map for one site: identity below the
/// Gaussian threshold, generalized Pareto quantile above.
fn invert_tail(z: f64, zu: f64, u: f64, sigma: f64, xi: f64, p: f64, norm: &statrs::distribution::Normal) -> f64 {
    if z <= zu {
        return z;
    }
    let v = norm.cdf(z).min(1.0 - 1e-16);
    let s = ((1.0 - v) / p).min(1.0).max(1e-16);
    if xi.abs() < 1e-8 {
        u - sigma * s.ln()
    } else {
        u + sigma / xi * (s.powf(-xi) - 1.0)
    }
}

/// Samples one field pair from the generating model: the gapped observation
/// field and the complete truth.
pub fn simulate_field(cfg: &SimConfig) -> Result<(GriddedField, GriddedField)> {
    cfg.validate()?;
    let m = cfg.n_sites();
    let nt = cfg.n_days();
    let sites = build_sites(cfg)?;
    let days: Vec<DayIndex> = (0..nt)
        .map(|t| DayIndex {
            day: t as u32 + 1,
            year: cfg.base_year + (t / cfg.days_per_year) as i32,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = vec![0.0; m * nt];

    if cfg.sd_w > 0.0 {
        // Dense analytic Matérn covariance; duplicate or degenerate site
        // layouts surface here as a failed factorization.
        let mut cov = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                let d = sites[i].km.dist(&sites[j].km);
                cov[(i, j)] = cfg.sd_w * cfg.sd_w * matern_nu1_correlation(d, cfg.range_km);
            }
        }
        let chol = Cholesky::new(cov).ok_or_else(|| {
            CoreError::numerical(
                "spatial covariance is not positive definite (degenerate grid spec)".to_string(),
            )
        })?;
        let l = chol.l();
        let innov_scale = (1.0 - cfg.rho * cfg.rho).sqrt();
        let mut x = DVector::<f64>::zeros(m);
        for t in 0..nt {
            let zeta = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let e = &l * zeta;
            if t == 0 {
                x = e;
            } else {
                x = cfg.rho * &x + innov_scale * e;
            }
            values[t * m..(t + 1) * m].copy_from_slice(x.as_slice());
        }
    }

    // Marginal back-transform, then the yearly trend.
    let norm = statrs::distribution::Normal::new(0.0, 1.0).expect("standard normal");
    let zu: Option<Vec<f64>> = cfg
        .tail
        .as_ref()
        .map(|tail| tail.p.iter().map(|&p| norm.inverse_cdf(1.0 - p)).collect());
    for t in 0..nt {
        let year = t / cfg.days_per_year;
        let (mu, sd) = (cfg.beta_mu[year], cfg.beta_sigma[year]);
        for s in 0..m {
            let z = values[t * m + s];
            let anom = match (&cfg.tail, &zu) {
                (Some(tail), Some(zu)) => invert_tail(
                    z,
                    zu[s],
                    tail.u,
                    tail.sigma_gp[s],
                    tail.xi[s],
                    tail.p[s],
                    &norm,
                ),
                _ => z,
            };
            values[t * m + s] = mu + sd * anom;
        }
    }

    let truth = GriddedField::new(sites, days, values, vec![true; m * nt])?;

    let gappy = match &cfg.gaps {
        Some(g) if g.count > 0 => {
            let mut region = Vec::new();
            for _ in 0..g.count {
                let center = rng.gen_range(0..m);
                let start = rng.gen_range(0..=nt - g.duration_days);
                let c = truth.sites()[center].km;
                for (s, site) in truth.sites().iter().enumerate() {
                    if site.km.dist(&c) <= g.radius_km {
                        for t in start..start + g.duration_days {
                            region.push((s, t));
                        }
                    }
                }
            }
            truth.apply_gap(&region)?
        }
        _ => truth.clone(),
    };
    Ok((gappy, truth))
}

/// Exact per-neighborhood minima over the complete truth field.
pub fn known_summary_oracle(truth: &GriddedField, neighborhoods: &[Neighborhood]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(neighborhoods.len());
    for nb in neighborhoods {
        if nb.members.is_empty() {
            return Err(CoreError::invalid("empty neighborhood".to_string()));
        }
        let mut min = f64::INFINITY;
        for &(s, t) in &nb.members {
            match truth.value(s, t) {
                Some(v) => min = min.min(v),
                None => {
                    return Err(CoreError::invalid(format!(
                        "truth has a gap at (site {s}, day {t})"
                    )))
                }
            }
        }
        out.push(min);
    }
    Ok(out)
}
