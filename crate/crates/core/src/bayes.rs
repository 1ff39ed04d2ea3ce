//! Exact conjugate Bayesian inference for one local space-time window:
//! marginal likelihood of the hyperparameters, simplex optimization with
//! penalized-complexity priors, a weighted hyperparameter grid, and
//! two-stage posterior sampling of the latent surface.
//!
//! The latent vector stacks the space-time field (day-major Kronecker
//! layout, `t * m + j`) plus one trailing intercept column.

use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::geo::KmPoint;
use crate::grid::GriddedField;
use crate::mesh::SpdeMesh;
use crate::optim::NelderMead;
use crate::priors::PcPriors;
use crate::sparse::{rcm_order, CholFactor, Csr, SparseSym};
use crate::spde::{matern_precision, projector, spacetime_precision, ArSpec, MaternHyper};

/// Window-model hyperparameters on their natural scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub range_km: f64,
    pub sd_w: f64,
    pub rho: f64,
    pub tau_z: f64,
}

/// Clamp boxes for the unconstrained parameterization; they keep the
/// back-transform finite and inside the model domain.
const LOG_RANGE_BOX: (f64, f64) = (-4.6, 13.8);
const LOG_SD_BOX: (f64, f64) = (-13.8, 9.2);
const ZRHO_BOX: f64 = 18.0;
const LOG_TAU_BOX: (f64, f64) = (-18.4, 27.6);

impl Hyper {
    pub fn new(range_km: f64, sd_w: f64, rho: f64, tau_z: f64) -> Result<Self> {
        if !(range_km > 0.0 && range_km.is_finite()) {
            return Err(CoreError::invalid(format!("range must be positive, got {range_km}")));
        }
        if !(sd_w > 0.0 && sd_w.is_finite()) {
            return Err(CoreError::invalid(format!("sd must be positive, got {sd_w}")));
        }
        if !(rho > -1.0 && rho < 1.0) {
            return Err(CoreError::invalid(format!("rho must be in (-1,1), got {rho}")));
        }
        if !(tau_z > 0.0 && tau_z.is_finite()) {
            return Err(CoreError::invalid(format!(
                "observation precision must be positive, got {tau_z}"
            )));
        }
        Ok(Hyper { range_km, sd_w, rho, tau_z })
    }

    /// (log range, log sd, Fisher-z of rho, log tau).
    pub fn to_internal(&self) -> [f64; 4] {
        [self.range_km.ln(), self.sd_w.ln(), self.rho.atanh(), self.tau_z.ln()]
    }

    pub fn from_internal(v: &[f64]) -> Hyper {
        let lr = v[0].clamp(LOG_RANGE_BOX.0, LOG_RANGE_BOX.1);
        let ls = v[1].clamp(LOG_SD_BOX.0, LOG_SD_BOX.1);
        let zr = v[2].clamp(-ZRHO_BOX, ZRHO_BOX);
        let lt = v[3].clamp(LOG_TAU_BOX.0, LOG_TAU_BOX.1);
        Hyper {
            range_km: lr.exp(),
            sd_w: ls.exp(),
            rho: zr.tanh(),
            tau_z: lt.exp(),
        }
    }

    /// Log Jacobian of the internal-to-natural back-transform, used to carry
    /// the natural-scale prior onto the optimization scale.
    pub fn log_jacobian_internal(&self) -> f64 {
        self.range_km.ln()
            + self.sd_w.ln()
            + (-self.rho * self.rho).ln_1p()
            + self.tau_z.ln()
    }
}

/// Observations of one window: a sparse projector into the space-time
/// latent layout plus the observed values.
#[derive(Debug, Clone)]
pub struct WindowData {
    a: Csr,
    z: Vec<f64>,
    m: usize,
    t_max: usize,
}

impl WindowData {
    pub fn new(a: Csr, z: Vec<f64>, m: usize, t_max: usize) -> Result<Self> {
        if m == 0 || t_max == 0 {
            return Err(CoreError::invalid("need a nonempty mesh and window".to_string()));
        }
        if a.n_cols() != m * t_max {
            return Err(CoreError::dimension(format!(
                "projector has {} columns for {} x {} latent layout",
                a.n_cols(),
                m,
                t_max
            )));
        }
        if a.n_rows() != z.len() {
            return Err(CoreError::dimension(format!(
                "{} projector rows vs {} observations",
                a.n_rows(),
                z.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid("non-finite observation".to_string()));
        }
        Ok(WindowData { a, z, m, t_max })
    }

    /// Collects the observed entries of `field` for window days
    /// `day_lo..day_lo + t_max` onto the mesh.
    pub fn from_field(
        field: &GriddedField,
        mesh: &SpdeMesh,
        day_lo: usize,
        t_max: usize,
    ) -> Result<Self> {
        if day_lo + t_max > field.n_days() {
            return Err(CoreError::invalid(format!(
                "window days {day_lo}..{} beyond record of {} days",
                day_lo + t_max,
                field.n_days()
            )));
        }
        let pts: Vec<KmPoint> = field.sites().iter().map(|s| s.km).collect();
        let site_proj = projector(mesh, &pts)?;
        let m = mesh.n_nodes();
        let mut trips = Vec::new();
        let mut z = Vec::new();
        for t in 0..t_max {
            for s in 0..field.n_sites() {
                if let Some(v) = field.value(s, day_lo + t) {
                    let r = z.len();
                    let (cols, vals) = site_proj.row(s);
                    for (&c, &w) in cols.iter().zip(vals) {
                        trips.push((r, t * m + c, w));
                    }
                    z.push(v);
                }
            }
        }
        let a = Csr::from_triplets(z.len(), m * t_max, &trips)?;
        WindowData::new(a, z, m, t_max)
    }

    pub fn n_obs(&self) -> usize {
        self.z.len()
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn projector(&self) -> &Csr {
        &self.a
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    /// Returns a copy with the observation rows reordered.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.z.len() {
            return Err(CoreError::dimension("permutation length mismatch".to_string()));
        }
        let mut trips = Vec::new();
        let mut z = Vec::with_capacity(self.z.len());
        for (new_r, &old_r) in order.iter().enumerate() {
            let (cols, vals) = self.a.row(old_r);
            for (&c, &v) in cols.iter().zip(vals) {
                trips.push((new_r, c, v));
            }
            z.push(self.z[old_r]);
        }
        let a = Csr::from_triplets(z.len(), self.m * self.t_max, &trips)?;
        WindowData::new(a, z, self.m, self.t_max)
    }
}

/// Gaussian conditional of the latent vector at one hyperparameter value.
struct Conditional {
    factor: CholFactor,
    mean: Vec<f64>,
    log_ml: f64,
}

/// Builds the posterior precision factorization, posterior mean, and exact
/// log marginal likelihood at `h`.
fn conditional_at(
    h: &Hyper,
    data: &WindowData,
    mesh: &SpdeMesh,
    priors: &PcPriors,
) -> Result<Conditional> {
    let m = data.m;
    let t = data.t_max;
    let dim = m * t + 1;
    let q0 = priors.intercept_precision;
    let tau = h.tau_z;

    let mat = MaternHyper::new(h.range_km, h.sd_w)?;
    let q_s = matern_precision(mesh, &mat)?;
    let ar = ArSpec::new(h.rho, t)?;

    // Prior log determinant via the Kronecker identity
    // log|Q_t (x) Q_s| = m log|Q_t| + t log|Q_s|, with the AR determinant
    // in closed form and the intercept block appended.
    let ld_qs = CholFactor::factor(&q_s)?.log_det();
    let ld_ar = -((t as f64) - 1.0) * (-h.rho * h.rho).ln_1p();
    let ld_prior = (m as f64) * ld_ar + (t as f64) * ld_qs + q0.ln();

    let q_st = spacetime_precision(&q_s, &ar);

    // Posterior precision: prior + tau * M^T M with M = [A | 1].
    let gram = data.a.gram()?;
    let mut trips: Vec<(usize, usize, f64)> =
        Vec::with_capacity(q_st.nnz() + gram.nnz() + 4 * data.n_obs() + 1);
    for i in 0..q_st.n() {
        let (cols, vals) = q_st.csr().row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            trips.push((i, j, v));
        }
    }
    for i in 0..gram.n() {
        let (cols, vals) = gram.csr().row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            trips.push((i, j, tau * v));
        }
    }
    let mut col_sums = vec![0.0; m * t];
    let mut b = vec![0.0; dim];
    let mut z_sum = 0.0;
    let mut z_sq = 0.0;
    for r in 0..data.n_obs() {
        let (cols, vals) = data.a.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            col_sums[c] += v;
            b[c] += tau * v * data.z[r];
        }
        z_sum += data.z[r];
        z_sq += data.z[r] * data.z[r];
    }
    for (c, &s) in col_sums.iter().enumerate() {
        if s != 0.0 {
            trips.push((c, dim - 1, tau * s));
            trips.push((dim - 1, c, tau * s));
        }
    }
    trips.push((dim - 1, dim - 1, q0 + tau * data.n_obs() as f64));
    b[dim - 1] = tau * z_sum;
    let q_post = SparseSym::from_triplets(dim, &trips)?;

    // Fill-reducing order on the latent block; the dense intercept column
    // goes last so it cannot poison the ordering.
    let mut perm = rcm_order(&q_st);
    perm.push(dim - 1);
    let factor = CholFactor::factor_with_perm(&q_post, perm)?;
    let mean = factor.solve(&b);

    let n = data.n_obs() as f64;
    let b_dot_mu: f64 = b.iter().zip(&mean).map(|(x, y)| x * y).sum();
    let log_ml = 0.5 * (ld_prior - factor.log_det())
        - 0.5 * n * (2.0 * std::f64::consts::PI / tau).ln()
        - 0.5 * (tau * z_sq - b_dot_mu);
    Ok(Conditional { factor, mean, log_ml })
}

/// Exact log marginal likelihood of the window data given hyperparameters,
/// integrating out the latent field and intercept.
pub fn log_marginal_likelihood(
    h: &Hyper,
    data: &WindowData,
    mesh: &SpdeMesh,
    priors: &PcPriors,
) -> Result<f64> {
    if data.n_obs() == 0 {
        return Ok(0.0);
    }
    Ok(conditional_at(h, data, mesh, priors)?.log_ml)
}

/// Tuning knobs for window fitting.
#[derive(Debug, Clone, Copy)]
pub struct FitSettings {
    /// Offsets per side per axis of the hyperparameter grid (0 = plug-in).
    pub n_axis: usize,
    /// Simplex iteration budget.
    pub max_iter: usize,
    /// Finite-difference step (internal scale) for the curvature.
    pub fd_step: f64,
    /// Add observation noise back when sampling predictions.
    pub include_nugget: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings { n_axis: 2, max_iter: 400, fd_step: 0.05, include_nugget: false }
    }
}

/// Mode, curvature, and bookkeeping from hyperparameter optimization.
pub struct HyperOpt {
    pub mode: Hyper,
    /// Negative-log-posterior Hessian in internal coordinates.
    pub curvature: DMatrix<f64>,
    pub log_post: f64,
    pub log_ml: f64,
    pub converged: bool,
    pub n_eval: usize,
}

fn log_posterior_internal(
    v: &[f64],
    data: &WindowData,
    mesh: &SpdeMesh,
    priors: &PcPriors,
) -> Option<(Hyper, f64, f64)> {
    let h = Hyper::from_internal(v);
    let lp = priors.log_prior(h.range_km, h.sd_w, h.rho, h.tau_z) + h.log_jacobian_internal();
    if !lp.is_finite() {
        return None;
    }
    let lml = log_marginal_likelihood(&h, data, mesh, priors).ok()?;
    if !lml.is_finite() {
        return None;
    }
    Some((h, lml + lp, lml))
}

/// Maximizes marginal likelihood + prior over the unconstrained scale by
/// simplex descent; returns the mode with a finite-difference curvature.
pub fn optimize_hyper(
    data: &WindowData,
    mesh: &SpdeMesh,
    priors: &PcPriors,
    start: &Hyper,
    settings: &FitSettings,
) -> Result<HyperOpt> {
    if data.n_obs() == 0 {
        return Err(CoreError::invalid("cannot optimize with no observations".to_string()));
    }
    let objective = |v: &[f64]| -> f64 {
        match log_posterior_internal(v, data, mesh, priors) {
            Some((_, lp, _)) => -lp,
            None => f64::INFINITY,
        }
    };
    let nm = NelderMead { max_iter: settings.max_iter, tol_diam: 1e-4, tol_f: 0.0 };
    let x0 = start.to_internal();
    let step = [0.4, 0.3, 0.4, 0.5];
    let res = nm.minimize(objective, &x0, &step);
    let (mode, log_post, log_ml) = log_posterior_internal(&res.x, data, mesh, priors)
        .ok_or_else(|| CoreError::numerical("optimizer stopped at an infeasible point".to_string()))?;

    // Central finite differences of the negative log posterior.
    let hstep = settings.fd_step;
    let f0 = -log_post;
    let mut hess = DMatrix::<f64>::zeros(4, 4);
    let eval = |v: &[f64]| -> f64 {
        match log_posterior_internal(v, data, mesh, priors) {
            Some((_, lp, _)) => -lp,
            None => f64::INFINITY,
        }
    };
    let base = res.x.clone();
    let at = |offsets: &[(usize, f64)]| -> f64 {
        let mut v = base.clone();
        for &(k, d) in offsets {
            v[k] += d;
        }
        eval(&v)
    };
    for i in 0..4 {
        let fp = at(&[(i, hstep)]);
        let fm = at(&[(i, -hstep)]);
        let d2 = (fp - 2.0 * f0 + fm) / (hstep * hstep);
        hess[(i, i)] = if d2.is_finite() { d2 } else { 1.0 };
        for j in i + 1..4 {
            let fpp = at(&[(i, hstep), (j, hstep)]);
            let fpm = at(&[(i, hstep), (j, -hstep)]);
            let fmp = at(&[(i, -hstep), (j, hstep)]);
            let fmm = at(&[(i, -hstep), (j, -hstep)]);
            let d2 = (fpp - fpm - fmp + fmm) / (4.0 * hstep * hstep);
            let d2 = if d2.is_finite() { d2 } else { 0.0 };
            hess[(i, j)] = d2;
            hess[(j, i)] = d2;
        }
    }
    Ok(HyperOpt {
        mode,
        curvature: hess,
        log_post,
        log_ml,
        converged: res.converged,
        n_eval: res.n_eval,
    })
}

/// Central-composite exploration grid in the eigenbasis of the curvature:
/// the mode plus `n_axis` symmetric offsets per side along each eigen-axis,
/// weighted by the exponentiated log posterior.
pub fn hyper_posterior_grid(
    mode: &[f64; 4],
    curvature: &DMatrix<f64>,
    n_axis: usize,
    mut log_post: impl FnMut(&[f64; 4]) -> f64,
) -> (Vec<[f64; 4]>, Vec<f64>) {
    let sym = 0.5 * (curvature + curvature.transpose());
    let eig = sym.symmetric_eigen();
    let mut points: Vec<[f64; 4]> = vec![*mode];
    for k in 0..4 {
        // Regularize non-positive directions instead of failing.
        let ev = eig.eigenvalues[k].max(1e-8);
        let sd = 1.0 / ev.sqrt();
        for j in 1..=n_axis {
            for sign in [1.0, -1.0] {
                let mut p = *mode;
                for r in 0..4 {
                    p[r] += sign * j as f64 * sd * eig.eigenvectors[(r, k)];
                }
                points.push(p);
            }
        }
    }
    let lps: Vec<f64> = points.iter().map(|p| log_post(p)).collect();
    let max_lp = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = lps.iter().map(|&lp| (lp - max_lp).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    (points, weights)
}

/// One explored hyperparameter point with its latent conditional.
pub struct FitPoint {
    pub hyper: Hyper,
    pub weight: f64,
    pub log_post: f64,
    conditional: Conditional,
}

/// Finished window fit: hyperparameter mode, weighted grid, and per-point
/// latent conditionals ready for sampling.
pub struct LocalFit {
    pub center_day: u32,
    pub t_max: usize,
    pub m: usize,
    pub mode: Hyper,
    pub log_ml_mode: f64,
    pub converged: bool,
    pub include_nugget: bool,
    points: Vec<FitPoint>,
}

impl LocalFit {
    pub fn points(&self) -> &[FitPoint] {
        &self.points
    }

    /// Posterior mean of the latent vector under the plug-in (highest
    /// weight) grid point; length `m * t_max + 1` (intercept last).
    pub fn plug_in_mean(&self) -> &[f64] {
        let best = self
            .points
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.weight.partial_cmp(&b.1.weight).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        &self.points[best].conditional.mean
    }
}

/// Fits one window end to end: optimize, build the grid, and factorize the
/// conditional at every grid point.
pub fn fit_window(
    data: &WindowData,
    mesh: &SpdeMesh,
    priors: &PcPriors,
    start: &Hyper,
    settings: &FitSettings,
    center_day: u32,
) -> Result<LocalFit> {
    let opt = optimize_hyper(data, mesh, priors, start, settings)?;
    let mode_v = opt.mode.to_internal();
    let (points, weights) = hyper_posterior_grid(&mode_v, &opt.curvature, settings.n_axis, |p| {
        match log_posterior_internal(p, data, mesh, priors) {
            Some((_, lp, _)) => lp,
            None => f64::NEG_INFINITY,
        }
    });
    let mut fit_points = Vec::with_capacity(points.len());
    for (p, w) in points.iter().zip(&weights) {
        if *w == 0.0 && fit_points.len() > 0 {
            continue; // infeasible satellite point: carries no weight
        }
        let h = Hyper::from_internal(p);
        let cond = conditional_at(&h, data, mesh, priors)?;
        let lp = match log_posterior_internal(p, data, mesh, priors) {
            Some((_, lp, _)) => lp,
            None => f64::NEG_INFINITY,
        };
        fit_points.push(FitPoint { hyper: h, weight: *w, log_post: lp, conditional: cond });
    }
    // Renormalize over the retained points.
    let total: f64 = fit_points.iter().map(|p| p.weight).sum();
    for p in &mut fit_points {
        p.weight /= total;
    }
    Ok(LocalFit {
        center_day,
        t_max: data.t_max,
        m: data.m,
        mode: opt.mode,
        log_ml_mode: opt.log_ml,
        converged: opt.converged,
        include_nugget: settings.include_nugget,
        points: fit_points,
    })
}

/// Plug-in fit at fixed hyperparameters (no optimization, single point).
pub fn plug_in_fit(
    h: &Hyper,
    data: &WindowData,
    mesh: &SpdeMesh,
    priors: &PcPriors,
    settings: &FitSettings,
    center_day: u32,
) -> Result<LocalFit> {
    let cond = conditional_at(h, data, mesh, priors)?;
    let log_ml = cond.log_ml;
    Ok(LocalFit {
        center_day,
        t_max: data.t_max,
        m: data.m,
        mode: *h,
        log_ml_mode: log_ml,
        converged: true,
        include_nugget: settings.include_nugget,
        points: vec![FitPoint { hyper: *h, weight: 1.0, log_post: log_ml, conditional: cond }],
    })
}

/// Sparse rows mapping (location, window day) targets into the latent
/// layout; fails for points outside the mesh hull or days outside the
/// window.
pub fn target_rows(
    mesh: &SpdeMesh,
    targets: &[(KmPoint, usize)],
    t_max: usize,
) -> Result<Csr> {
    let m = mesh.n_nodes();
    let mut trips = Vec::with_capacity(3 * targets.len());
    for (r, (p, day)) in targets.iter().enumerate() {
        if *day >= t_max {
            return Err(CoreError::invalid(format!(
                "target day {day} outside window of {t_max} days"
            )));
        }
        let (_, weights) = mesh.locate(p)?;
        for (node, w) in weights {
            if w != 0.0 {
                trips.push((r, day * m + node, w));
            }
        }
    }
    Csr::from_triplets(targets.len(), m * t_max, &trips)
}

/// Two-stage posterior sampling: draw a grid point by weight, then the
/// latent Gaussian from its stored factorization, projected to the target
/// rows (intercept added; observation noise only if the fit asks for it).
pub fn sample_latent<R: Rng + ?Sized>(
    fit: &LocalFit,
    targets: &Csr,
    n_samples: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let latent_dim = fit.m * fit.t_max;
    if targets.n_cols() != latent_dim {
        return Err(CoreError::dimension(format!(
            "target rows have {} columns for latent dimension {latent_dim}",
            targets.n_cols()
        )));
    }
    let nt = targets.n_rows();
    let mut out = DMatrix::<f64>::zeros(nt, n_samples);
    let cum: Vec<f64> = fit
        .points
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.weight;
            Some(*acc)
        })
        .collect();
    for s in 0..n_samples {
        let u: f64 = rng.gen();
        let k = cum.partition_point(|&c| c < u).min(fit.points.len() - 1);
        let gp = &fit.points[k];
        let mut x = gp.conditional.factor.sample_zero_mean(rng);
        for (xi, mi) in x.iter_mut().zip(&gp.conditional.mean) {
            *xi += mi;
        }
        let intercept = x[latent_dim];
        let noise_sd = if fit.include_nugget { gp.hyper.tau_z.sqrt().recip() } else { 0.0 };
        for r in 0..nt {
            let (cols, vals) = targets.row(r);
            let mut acc = intercept;
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * x[c];
            }
            if noise_sd > 0.0 {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                acc += noise_sd * e;
            }
            out[(r, s)] = acc;
        }
    }
    Ok(out)
}

/// Posterior mean of the latent vector projected to target rows at the
/// plug-in grid point (intercept added).
pub fn posterior_mean_at(fit: &LocalFit, targets: &Csr) -> Result<DVector<f64>> {
    let latent_dim = fit.m * fit.t_max;
    if targets.n_cols() != latent_dim {
        return Err(CoreError::dimension(format!(
            "target rows have {} columns for latent dimension {latent_dim}",
            targets.n_cols()
        )));
    }
    let mean = fit.plug_in_mean();
    let mut out = DVector::<f64>::zeros(targets.n_rows());
    for r in 0..targets.n_rows() {
        let (cols, vals) = targets.row(r);
        let mut acc = mean[latent_dim];
        for (&c, &v) in cols.iter().zip(vals) {
            acc += v * mean[c];
        }
        out[r] = acc;
    }
    Ok(out)
}

/// One row of the per-window fit summary export.
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub window_id: usize,
    pub center_day: u32,
    pub range_km: f64,
    pub sd: f64,
    pub rho: f64,
    pub tau_z: f64,
    pub logml: f64,
    pub converged: bool,
}

impl FitSummary {
    pub fn from_fit(window_id: usize, fit: &LocalFit) -> FitSummary {
        FitSummary {
            window_id,
            center_day: fit.center_day,
            range_km: fit.mode.range_km,
            sd: fit.mode.sd_w,
            rho: fit.mode.rho,
            tau_z: fit.mode.tau_z,
            logml: fit.log_ml_mode,
            converged: fit.converged,
        }
    }
}

pub fn write_fit_summaries(rows: &[FitSummary], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "window_id,center_day,range_km,sd,rho,tau_z,logml,converged")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.window_id, r.center_day, r.range_km, r.sd, r.rho, r.tau_z, r.logml, r.converged
        )?;
    }
    w.flush()?;
    Ok(())
}
