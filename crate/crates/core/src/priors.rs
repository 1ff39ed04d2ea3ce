//! Penalized-complexity priors for the window-model hyperparameters.
//!
//! Each prior is exponential on a distance-from-base-model scale; the rate
//! parameters are solved from median constraints (all densities are over the
//! natural parameterization, so transported Jacobians are the caller's job).

use crate::error::{CoreError, Result};

/// Base model for the autoregression coefficient prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoBase {
    /// Base at rho = 1: favors strong temporal persistence.
    StrongDependence,
    /// Base at rho = 0: favors temporal independence.
    Independence,
}

#[derive(Debug, Clone)]
pub struct PcPriors {
    /// P(observation sd > sd_obs_median) = 0.5.
    pub sd_obs_median: f64,
    /// P(spatial range < range_median_km) = 0.5.
    pub range_median_km: f64,
    /// P(process sd > sd_w_median) = 0.5.
    pub sd_w_median: f64,
    /// P(|rho| > rho_band) = 0.5.
    pub rho_band: f64,
    pub rho_base: RhoBase,
    /// Gaussian prior precision of the window intercept.
    pub intercept_precision: f64,
    lambda_sd_obs: f64,
    lambda_range: f64,
    lambda_sd_w: f64,
    lambda_rho: f64,
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Distance of rho from the strong-dependence base.
fn rho_dist_base_one(rho: f64) -> f64 {
    (1.0 - rho).sqrt()
}

/// Distance of rho from the independence base.
fn rho_dist_base_zero(rho: f64) -> f64 {
    (-(-rho * rho).ln_1p()).sqrt()
}

/// P(|rho| > band) under the base-one prior with rate lambda.
fn base_one_tail(lambda: f64, band: f64) -> f64 {
    let s_hi = rho_dist_base_one(band);
    let s_lo = rho_dist_base_one(-band);
    let norm = -(-lambda * SQRT2).exp_m1();
    (-(-lambda * s_hi).exp_m1() + (-lambda * s_lo).exp() - (-lambda * SQRT2).exp()) / norm
}

impl Default for PcPriors {
    fn default() -> Self {
        PcPriors::new(0.1, 500.0, 0.5, 0.85, RhoBase::StrongDependence, 0.1)
            .expect("default medians are valid")
    }
}

impl PcPriors {
    pub fn new(
        sd_obs_median: f64,
        range_median_km: f64,
        sd_w_median: f64,
        rho_band: f64,
        rho_base: RhoBase,
        intercept_precision: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("observation sd median", sd_obs_median),
            ("range median", range_median_km),
            ("process sd median", sd_w_median),
            ("intercept precision", intercept_precision),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CoreError::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(rho_band > 0.0 && rho_band < 1.0) {
            return Err(CoreError::invalid(format!(
                "rho band must be in (0,1), got {rho_band}"
            )));
        }
        let ln2 = std::f64::consts::LN_2;
        let lambda_sd_obs = ln2 / sd_obs_median;
        let lambda_range = ln2 * range_median_km;
        let lambda_sd_w = ln2 / sd_w_median;
        let lambda_rho = match rho_base {
            RhoBase::Independence => ln2 / rho_dist_base_zero(rho_band),
            RhoBase::StrongDependence => {
                // Solve P(|rho| > band) = 0.5 for the rate by bisection; the
                // truncation of the distance scale to (0, sqrt 2) makes the
                // equation transcendental.
                let (mut lo, mut hi) = (1e-8, 200.0);
                let g = |lam: f64| base_one_tail(lam, rho_band) - 0.5;
                if g(lo) * g(hi) > 0.0 {
                    return Err(CoreError::numerical(format!(
                        "rho prior rate not bracketed for band {rho_band}"
                    )));
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if g(lo) * g(mid) <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        };
        Ok(PcPriors {
            sd_obs_median,
            range_median_km,
            sd_w_median,
            rho_band,
            rho_base,
            intercept_precision,
            lambda_sd_obs,
            lambda_range,
            lambda_sd_w,
            lambda_rho,
        })
    }

    /// Log density of the observation precision tau_z (exponential on the
    /// sd scale, transported to the precision scale).
    pub fn log_density_tau(&self, tau: f64) -> f64 {
        if !(tau > 0.0) || !tau.is_finite() {
            return f64::NEG_INFINITY;
        }
        let lam = self.lambda_sd_obs;
        lam.ln() - lam / tau.sqrt() - std::f64::consts::LN_2 - 1.5 * tau.ln()
    }

    /// Log density of the spatial range (inverse-scale exponential).
    pub fn log_density_range(&self, range_km: f64) -> f64 {
        if !(range_km > 0.0) || !range_km.is_finite() {
            return f64::NEG_INFINITY;
        }
        let lam = self.lambda_range;
        lam.ln() - 2.0 * range_km.ln() - lam / range_km
    }

    /// Log density of the process sd (exponential).
    pub fn log_density_sd(&self, sd: f64) -> f64 {
        if !(sd > 0.0) || !sd.is_finite() {
            return f64::NEG_INFINITY;
        }
        let lam = self.lambda_sd_w;
        lam.ln() - lam * sd
    }

    /// Log density of the autoregression coefficient.
    pub fn log_density_rho(&self, rho: f64) -> f64 {
        if !(rho > -1.0 && rho < 1.0) {
            return f64::NEG_INFINITY;
        }
        let lam = self.lambda_rho;
        match self.rho_base {
            RhoBase::StrongDependence => {
                let d = rho_dist_base_one(rho);
                let log_norm = (-(-lam * SQRT2).exp_m1()).ln();
                lam.ln() - lam * d - log_norm - (2.0 * d).ln()
            }
            RhoBase::Independence => {
                if rho == 0.0 {
                    return (0.5 * lam).ln();
                }
                let d = rho_dist_base_zero(rho);
                // |dd/drho| = |rho| / ((1 - rho^2) d).
                let log_jac = rho.abs().ln() - (-rho * rho).ln_1p() - d.ln();
                (0.5 * lam).ln() - lam * d + log_jac
            }
        }
    }

    /// Joint log prior over (range, sd, rho, tau_z), natural scale.
    pub fn log_prior(&self, range_km: f64, sd: f64, rho: f64, tau: f64) -> f64 {
        self.log_density_range(range_km)
            + self.log_density_sd(sd)
            + self.log_density_rho(rho)
            + self.log_density_tau(tau)
    }
}
