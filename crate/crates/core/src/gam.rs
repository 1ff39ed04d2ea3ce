//! Penalized spline regression for spatially varying tail parameters.
//!
//! Two regressions share one covariate structure (a 2-D tensor-product
//! B-spline surface over km coordinates plus a univariate B-spline in
//! distance-to-coast, each sum-to-zero constrained beside an intercept):
//!
//! * a joint generalized Pareto fit of (log scale, shape) over excesses,
//!   by penalized Fisher scoring with step halving;
//! * a penalized Poisson regression of per-site exceedance counts with a
//!   log link and `log(trials)` offset, giving the exceedance probability
//!   surface.
//!
//! Smoothing parameters maximize the Laplace-approximate log marginal
//! likelihood by coordinate-wise golden-section search on the log scale.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{CoreError, Result};
use crate::grid::GriddedField;
use crate::optim::golden_section_min;
use crate::spline::{constraint_null_basis, difference_penalty, BSplineBasis};
use crate::tail::{TailModel, TailVariant};

const XI_CAP: f64 = 0.95;

/// Basis sizes: `tensor_k` is the marginal size of the 2-D surface term
/// (0 disables it), `coast_k` the univariate term size (0 disables it).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisConfig {
    pub tensor_k: usize,
    pub coast_k: usize,
    pub penalty_order: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { tensor_k: 12, coast_k: 10, penalty_order: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Keep one excess record in every `subsample_every` (1 = keep all).
    pub subsample_every: usize,
    pub seed: u64,
    /// Coordinate sweeps of the smoothing-parameter search.
    pub laml_sweeps: usize,
    pub max_fisher_iter: usize,
    /// Bracket for log smoothing parameters.
    pub log_lambda_range: (f64, f64),
    /// Golden-section tolerance on the log-lambda axis.
    pub golden_tol: f64,
    /// Fixed smoothing parameters (skips the marginal-likelihood search).
    pub lambda_override: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            subsample_every: 10,
            seed: 0,
            laml_sweeps: 2,
            max_fisher_iter: 100,
            log_lambda_range: (-12.0, 16.0),
            golden_tol: 0.5,
            lambda_override: None,
        }
    }
}

/// One threshold excess with the covariates of its site.
#[derive(Debug, Clone, Copy)]
pub struct ExcessRecord {
    pub x_km: f64,
    pub y_km: f64,
    pub coast_m: f64,
    pub excess: f64,
}

/// Collects all observed excesses over `u` with site covariates.
pub fn excess_records(field: &GriddedField, u: f64) -> Vec<ExcessRecord> {
    let mut out = Vec::new();
    for (s, site) in field.sites().iter().enumerate() {
        for t in 0..field.n_days() {
            if let Some(v) = field.value(s, t) {
                if v > u {
                    out.push(ExcessRecord {
                        x_km: site.km.x_km,
                        y_km: site.km.y_km,
                        coast_m: site.dist_coast_m,
                        excess: v - u,
                    });
                }
            }
        }
    }
    out
}

/// Per-site exceedance counts and observation counts.
pub fn exceedance_counts(field: &GriddedField, u: f64) -> (Vec<usize>, Vec<usize>) {
    let ns = field.n_sites();
    let mut counts = vec![0usize; ns];
    let mut trials = vec![0usize; ns];
    for s in 0..ns {
        for t in 0..field.n_days() {
            if let Some(v) = field.value(s, t) {
                trials[s] += 1;
                if v > u {
                    counts[s] += 1;
                }
            }
        }
    }
    (counts, trials)
}

/// Seeded random subsample keeping ceil(n / every) records.
pub fn subsample_records(records: &[ExcessRecord], every: usize, seed: u64) -> Vec<ExcessRecord> {
    if every <= 1 {
        return records.to_vec();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = records.to_vec();
    out.shuffle(&mut rng);
    let keep = records.len().div_ceil(every);
    out.truncate(keep);
    out
}

// ---------------------------------------------------------------------------
// Shared design: sparse basis rows, constraint absorption, penalties.
// ---------------------------------------------------------------------------

struct TermPen {
    /// Offset of the term inside the constrained coefficient vector.
    con_off: usize,
    /// Constrained dimension of the term.
    dim: usize,
    /// Constrained penalty components (1 for univariate, 2 for tensor).
    mats: Vec<DMatrix<f64>>,
    /// Rank of the summed penalty on the constrained space.
    rank: usize,
}

struct Design {
    n_unc: usize,
    n_con: usize,
    basis_x: Option<BSplineBasis>,
    basis_y: Option<BSplineBasis>,
    basis_c: Option<BSplineBasis>,
    tensor_k: usize,
    /// Unconstrained-to-constrained map (block diagonal over terms).
    g: DMatrix<f64>,
    terms: Vec<TermPen>,
    /// Sparse rows, `stride` entries per observation.
    stride: usize,
    idx: Vec<u32>,
    val: Vec<f64>,
    n_obs: usize,
}

fn range_of(vals: impl Iterator<Item = f64>, what: &str) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Err(CoreError::invalid(format!(
            "covariate {what} is degenerate (range [{lo}, {hi}]); disable its term"
        )));
    }
    Ok((lo, hi))
}

impl Design {
    fn build(covs: &[(f64, f64, f64)], cfg: &BasisConfig) -> Result<Design> {
        if covs.is_empty() {
            return Err(CoreError::invalid("no observations".to_string()));
        }
        for &(x, y, c) in covs {
            if !(x.is_finite() && y.is_finite() && c.is_finite()) {
                return Err(CoreError::invalid("non-finite covariate".to_string()));
            }
        }
        if cfg.tensor_k != 0 && cfg.tensor_k < 4 {
            return Err(CoreError::invalid("tensor marginal size must be 0 or >= 4".to_string()));
        }
        if cfg.coast_k != 0 && cfg.coast_k < 4 {
            return Err(CoreError::invalid("coast basis size must be 0 or >= 4".to_string()));
        }

        let kt = cfg.tensor_k;
        let kc = cfg.coast_k;
        let (basis_x, basis_y) = if kt > 0 {
            let (xlo, xhi) = range_of(covs.iter().map(|c| c.0), "x")?;
            let (ylo, yhi) = range_of(covs.iter().map(|c| c.1), "y")?;
            (
                Some(BSplineBasis::clamped(kt, xlo, xhi)?),
                Some(BSplineBasis::clamped(kt, ylo, yhi)?),
            )
        } else {
            (None, None)
        };
        let basis_c = if kc > 0 {
            let (clo, chi) = range_of(covs.iter().map(|c| c.2), "coast")?;
            Some(BSplineBasis::clamped(kc, clo, chi)?)
        } else {
            None
        };

        let n_unc = 1 + kt * kt + kc;
        let stride = 1 + if kt > 0 { 16 } else { 0 } + if kc > 0 { 4 } else { 0 };
        let tensor_off = 1;
        let coast_off = 1 + kt * kt;

        let n_obs = covs.len();
        let mut idx = Vec::with_capacity(n_obs * stride);
        let mut val = Vec::with_capacity(n_obs * stride);
        let mut colsum = vec![0.0f64; n_unc];
        for &(x, y, c) in covs {
            idx.push(0u32);
            val.push(1.0);
            colsum[0] += 1.0;
            if let (Some(bx), Some(by)) = (&basis_x, &basis_y) {
                let (ix, vx) = bx.eval(x);
                let (iy, vy) = by.eval(y);
                for r in 0..4 {
                    for col in 0..4 {
                        let j = tensor_off + (ix + r) * kt + iy + col;
                        let v = vx[r] * vy[col];
                        idx.push(j as u32);
                        val.push(v);
                        colsum[j] += v;
                    }
                }
            }
            if let Some(bc) = &basis_c {
                let (ic, vc) = bc.eval(c);
                for r in 0..4 {
                    let j = coast_off + ic + r;
                    idx.push(j as u32);
                    val.push(vc[r]);
                    colsum[j] += vc[r];
                }
            }
        }

        // Constrained layout: [intercept | tensor (kt^2 - 1) | coast (kc - 1)].
        let mut n_con = 1;
        let mut g_blocks: Vec<(usize, usize, DMatrix<f64>)> = Vec::new(); // (unc_off, con_off, Z)
        let mut terms = Vec::new();
        if kt > 0 {
            let z = constraint_null_basis(&colsum[tensor_off..tensor_off + kt * kt])?;
            let p = difference_penalty(kt, cfg.penalty_order)?;
            let eye = DMatrix::<f64>::identity(kt, kt);
            let s_row = p.kronecker(&eye);
            let s_col = eye.kronecker(&p);
            let m_row = z.transpose() * &s_row * &z;
            let m_col = z.transpose() * &s_col * &z;
            let rank = penalty_rank(&(&m_row + &m_col));
            terms.push(TermPen { con_off: n_con, dim: kt * kt - 1, mats: vec![m_row, m_col], rank });
            g_blocks.push((tensor_off, n_con, z));
            n_con += kt * kt - 1;
        }
        if kc > 0 {
            let z = constraint_null_basis(&colsum[coast_off..coast_off + kc])?;
            let p = difference_penalty(kc, cfg.penalty_order)?;
            let m = z.transpose() * &p * &z;
            let rank = penalty_rank(&m);
            terms.push(TermPen { con_off: n_con, dim: kc - 1, mats: vec![m], rank });
            g_blocks.push((coast_off, n_con, z));
            n_con += kc - 1;
        }

        let mut g = DMatrix::<f64>::zeros(n_unc, n_con);
        g[(0, 0)] = 1.0;
        for (unc_off, con_off, z) in &g_blocks {
            for i in 0..z.nrows() {
                for j in 0..z.ncols() {
                    g[(unc_off + i, con_off + j)] = z[(i, j)];
                }
            }
        }

        Ok(Design {
            n_unc,
            n_con,
            basis_x,
            basis_y,
            basis_c,
            tensor_k: kt,
            g,
            terms,
            stride,
            idx,
            val,
            n_obs,
        })
    }

    fn n_lambda(&self) -> usize {
        self.terms.iter().map(|t| t.mats.len()).sum()
    }

    /// Constrained penalty matrix for one predictor's lambda slice.
    fn penalty(&self, lams: &[f64]) -> DMatrix<f64> {
        let mut s = DMatrix::<f64>::zeros(self.n_con, self.n_con);
        let mut li = 0;
        for term in &self.terms {
            for m in &term.mats {
                let lam = lams[li];
                li += 1;
                for i in 0..term.dim {
                    for j in 0..term.dim {
                        s[(term.con_off + i, term.con_off + j)] += lam * m[(i, j)];
                    }
                }
            }
        }
        s
    }

    /// log pseudo-determinant of the lambda-weighted penalty (sum over
    /// terms of the log product of each term's `rank` largest eigenvalues).
    fn log_pdet(&self, lams: &[f64]) -> f64 {
        let mut total = 0.0;
        let mut li = 0;
        for term in &self.terms {
            let mut m = DMatrix::<f64>::zeros(term.dim, term.dim);
            for comp in &term.mats {
                m += comp * lams[li];
                li += 1;
            }
            let mut eig: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
            eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
            total += eig[..term.rank].iter().map(|&e| e.max(1e-300).ln()).sum::<f64>();
        }
        total
    }

    /// Dense linear predictor for one coefficient vector.
    fn linear_predictor(&self, theta: &DVector<f64>, out: &mut [f64]) {
        for i in 0..self.n_obs {
            let mut acc = 0.0;
            let base = i * self.stride;
            for p in 0..self.stride {
                acc += theta[self.idx[base + p] as usize] * self.val[base + p];
            }
            out[i] = acc;
        }
    }
}

fn penalty_rank(m: &DMatrix<f64>) -> usize {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    if max <= 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&e| e > max * 1e-9).count()
}

fn chol_or_rank_err(h: DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let chol = Cholesky::new(h)
        .ok_or_else(|| CoreError::numerical("rank-deficient penalized Hessian".to_string()))?;
    let l = chol.l_dirty();
    let mut dmax = 0.0f64;
    let mut dmin = f64::INFINITY;
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    if !(dmin > dmax * 1e-10) {
        return Err(CoreError::numerical("rank-deficient penalized Hessian".to_string()));
    }
    Ok(chol)
}

fn log_det_from_chol(chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum()
}

// ---------------------------------------------------------------------------
// Joint generalized Pareto fit of (log sigma, xi).
// ---------------------------------------------------------------------------

struct ObsTerms {
    ll: f64,
    g1: f64,
    g2: f64,
    j11: f64,
    j12: f64,
    j22: f64,
}

/// Per-observation log-likelihood, gradient, and expected information in
/// (log sigma, xi). Returns None outside the feasible region.
fn gpd_obs(y: f64, eta1: f64, xi: f64) -> Option<ObsTerms> {
    if !(-30.0..=30.0).contains(&eta1) || xi.abs() > XI_CAP {
        return None;
    }
    let w = y * (-eta1).exp();
    let (ll, g1, g2);
    if xi.abs() < 1e-8 {
        ll = -eta1 - w;
        g1 = w - 1.0;
        g2 = 0.5 * w * w - w;
    } else {
        let t = 1.0 + xi * w;
        if t <= 1e-12 {
            return None;
        }
        let lt = t.ln();
        ll = -eta1 - (1.0 / xi + 1.0) * lt;
        g1 = (1.0 + xi) * w / t - 1.0;
        g2 = lt / (xi * xi) - (1.0 / xi + 1.0) * w / t;
    }
    // Expected information exists for xi > -1/2; near and below that the
    // shape is clamped inside the weights only, keeping them positive
    // definite (step halving preserves ascent).
    let xj = xi.max(-0.49);
    let den = (1.0 + xj) * (1.0 + 2.0 * xj);
    Some(ObsTerms { ll, g1, g2, j11: 1.0 / (1.0 + 2.0 * xj), j12: 1.0 / den, j22: 2.0 / den })
}

struct PairFit {
    gamma: DVector<f64>,
    laml: f64,
}

/// Penalized Fisher scoring for the joint GPD model at fixed lambdas.
fn fit_gpd_pair_at(
    design: &Design,
    y: &[f64],
    lams: &[f64],
    gamma0: &DVector<f64>,
    opts: &FitOptions,
) -> Result<PairFit> {
    let nc = design.n_con;
    let nu = design.n_unc;
    let n = design.n_obs;
    let l_per = design.n_lambda();
    let s1 = design.penalty(&lams[..l_per]);
    let s2 = design.penalty(&lams[l_per..]);

    let theta_of = |gamma: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let g1 = gamma.rows(0, nc).into_owned();
        let g2 = gamma.rows(nc, nc).into_owned();
        (&design.g * g1, &design.g * g2)
    };
    let pen_quad = |gamma: &DVector<f64>| -> f64 {
        let a = gamma.rows(0, nc);
        let b = gamma.rows(nc, nc);
        0.5 * ((&s1 * a).dot(&a.into_owned()) + (&s2 * b).dot(&b.into_owned()))
    };
    let log_lik_of = |eta1: &[f64], eta2: &[f64]| -> Option<f64> {
        let mut ll = 0.0;
        for i in 0..n {
            ll += gpd_obs(y[i], eta1[i], eta2[i])?.ll;
        }
        Some(ll)
    };

    let mut gamma = gamma0.clone();
    let mut eta1 = vec![0.0; n];
    let mut eta2 = vec![0.0; n];
    let (t1, t2) = theta_of(&gamma);
    design.linear_predictor(&t1, &mut eta1);
    design.linear_predictor(&t2, &mut eta2);
    let ll0 = log_lik_of(&eta1, &eta2).ok_or_else(|| {
        CoreError::numerical("infeasible starting point for the tail surface fit".to_string())
    })?;
    let mut pen_ll = ll0 - pen_quad(&gamma);
    let mut last_step = f64::INFINITY;

    let mut a11 = vec![0.0f64; nu * nu];
    let mut a12 = vec![0.0f64; nu * nu];
    let mut a22 = vec![0.0f64; nu * nu];

    for _iter in 0..opts.max_fisher_iter {
        a11.fill(0.0);
        a12.fill(0.0);
        a22.fill(0.0);
        let mut grad1 = vec![0.0f64; nu];
        let mut grad2 = vec![0.0f64; nu];
        for i in 0..n {
            let ob = gpd_obs(y[i], eta1[i], eta2[i]).expect("current point is feasible");
            let base = i * design.stride;
            for p in 0..design.stride {
                let ip = design.idx[base + p] as usize;
                let vp = design.val[base + p];
                grad1[ip] += ob.g1 * vp;
                grad2[ip] += ob.g2 * vp;
                for q in p..design.stride {
                    let iq = design.idx[base + q] as usize;
                    let w = vp * design.val[base + q];
                    let o = ip * nu + iq;
                    a11[o] += ob.j11 * w;
                    a12[o] += ob.j12 * w;
                    a22[o] += ob.j22 * w;
                }
            }
        }
        let mirror = |a: &[f64]| -> DMatrix<f64> {
            let mut m = DMatrix::<f64>::zeros(nu, nu);
            for i in 0..nu {
                for j in i..nu {
                    let v = a[i * nu + j];
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            m
        };
        let m11 = mirror(&a11);
        let m12 = mirror(&a12);
        let m22 = mirror(&a22);
        let gt = design.g.transpose();
        let h11 = &gt * &m11 * &design.g + &s1;
        let h12 = &gt * &m12 * &design.g;
        let h22 = &gt * &m22 * &design.g + &s2;
        let mut h = DMatrix::<f64>::zeros(2 * nc, 2 * nc);
        h.view_mut((0, 0), (nc, nc)).copy_from(&h11);
        h.view_mut((0, nc), (nc, nc)).copy_from(&h12);
        h.view_mut((nc, 0), (nc, nc)).copy_from(&h12.transpose());
        h.view_mut((nc, nc), (nc, nc)).copy_from(&h22);

        let gu1 = DVector::from_row_slice(&grad1);
        let gu2 = DVector::from_row_slice(&grad2);
        let mut gc = DVector::<f64>::zeros(2 * nc);
        gc.rows_mut(0, nc).copy_from(&(&gt * gu1 - &s1 * gamma.rows(0, nc).into_owned()));
        gc.rows_mut(nc, nc).copy_from(&(&gt * gu2 - &s2 * gamma.rows(nc, nc).into_owned()));

        let chol = chol_or_rank_err(h)?;
        let gnorm = gc.amax();
        let scale = 1.0 + pen_ll.abs();
        if gnorm < 1e-7 * scale || last_step < 1e-9 * scale {
            let laml = pen_ll + 0.5 * (design.log_pdet(&lams[..l_per]) + design.log_pdet(&lams[l_per..]))
                - 0.5 * log_det_from_chol(&chol);
            return Ok(PairFit { gamma, laml });
        }

        let delta = chol.solve(&gc);
        let mut alpha = 1.0f64;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &gamma + &delta * alpha;
            let (t1, t2) = theta_of(&cand);
            let mut e1 = vec![0.0; n];
            let mut e2 = vec![0.0; n];
            design.linear_predictor(&t1, &mut e1);
            design.linear_predictor(&t2, &mut e2);
            if let Some(l) = log_lik_of(&e1, &e2) {
                let cand_pen = l - pen_quad(&cand);
                if cand_pen > pen_ll {
                    last_step = cand_pen - pen_ll;
                    gamma = cand;
                    eta1 = e1;
                    eta2 = e2;
                    pen_ll = cand_pen;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            if gnorm < 1e-4 * scale {
                // No uphill step found but the gradient is already small:
                // accept the current point as converged.
                let laml = pen_ll
                    + 0.5 * (design.log_pdet(&lams[..l_per]) + design.log_pdet(&lams[l_per..]))
                    - 0.5 * log_det_from_chol(&chol);
                return Ok(PairFit { gamma, laml });
            }
            return Err(CoreError::numerical(
                "tail surface fit diverged (step halving exhausted)".to_string(),
            ));
        }
    }
    Err(CoreError::numerical(format!(
        "tail surface fit did not converge in {} iterations",
        opts.max_fisher_iter
    )))
}

// ---------------------------------------------------------------------------
// Penalized Poisson rate fit.
// ---------------------------------------------------------------------------

struct RateFit {
    gamma: DVector<f64>,
    laml: f64,
}

fn fit_rate_at(
    design: &Design,
    counts: &[f64],
    offsets: &[f64],
    lams: &[f64],
    gamma0: &DVector<f64>,
    opts: &FitOptions,
) -> Result<RateFit> {
    let nu = design.n_unc;
    let n = design.n_obs;
    let s = design.penalty(lams);

    let log_lik_of = |eta: &[f64]| -> Option<f64> {
        let mut ll = 0.0;
        for i in 0..n {
            let lin = offsets[i] + eta[i];
            if lin > 60.0 {
                return None;
            }
            ll += counts[i] * lin - lin.exp();
        }
        Some(ll)
    };

    let mut gamma = gamma0.clone();
    let mut eta = vec![0.0; n];
    design.linear_predictor(&(&design.g * &gamma), &mut eta);
    let ll0 = log_lik_of(&eta)
        .ok_or_else(|| CoreError::numerical("infeasible rate starting point".to_string()))?;
    let mut pen_ll = ll0 - 0.5 * (&s * &gamma).dot(&gamma);
    let mut last_step = f64::INFINITY;

    let mut a = vec![0.0f64; nu * nu];
    for _iter in 0..opts.max_fisher_iter {
        a.fill(0.0);
        let mut grad = vec![0.0f64; nu];
        for i in 0..n {
            let mu = (offsets[i] + eta[i]).exp();
            let r = counts[i] - mu;
            let base = i * design.stride;
            for p in 0..design.stride {
                let ip = design.idx[base + p] as usize;
                let vp = design.val[base + p];
                grad[ip] += r * vp;
                for q in p..design.stride {
                    let iq = design.idx[base + q] as usize;
                    a[ip * nu + iq] += mu * vp * design.val[base + q];
                }
            }
        }
        let mut m = DMatrix::<f64>::zeros(nu, nu);
        for i in 0..nu {
            for j in i..nu {
                let v = a[i * nu + j];
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let gt = design.g.transpose();
        let h = &gt * &m * &design.g + &s;
        let gc = &gt * DVector::from_row_slice(&grad) - &s * &gamma;

        let chol = chol_or_rank_err(h)?;
        let gnorm = gc.amax();
        let scale = 1.0 + pen_ll.abs();
        if gnorm < 1e-9 * scale || last_step < 1e-11 * scale {
            let laml = pen_ll + 0.5 * design.log_pdet(lams) - 0.5 * log_det_from_chol(&chol);
            return Ok(RateFit { gamma, laml });
        }

        let delta = chol.solve(&gc);
        let mut alpha = 1.0f64;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &gamma + &delta * alpha;
            let mut e = vec![0.0; n];
            design.linear_predictor(&(&design.g * &cand), &mut e);
            if let Some(l) = log_lik_of(&e) {
                let cand_pen = l - 0.5 * (&s * &cand).dot(&cand);
                if cand_pen > pen_ll {
                    last_step = cand_pen - pen_ll;
                    gamma = cand;
                    eta = e;
                    pen_ll = cand_pen;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            if gnorm < 1e-5 * scale {
                let laml = pen_ll + 0.5 * design.log_pdet(lams) - 0.5 * log_det_from_chol(&chol);
                return Ok(RateFit { gamma, laml });
            }
            return Err(CoreError::numerical(
                "rate fit diverged (step halving exhausted)".to_string(),
            ));
        }
    }
    Err(CoreError::numerical(format!(
        "rate fit did not converge in {} iterations",
        opts.max_fisher_iter
    )))
}

// ---------------------------------------------------------------------------
// Smoothing-parameter search (coordinate golden section on the LAML).
// ---------------------------------------------------------------------------

fn optimize_lambda(
    n_lam: usize,
    opts: &FitOptions,
    mut laml_at: impl FnMut(&[f64]) -> Option<f64>,
) -> Result<Vec<f64>> {
    if let Some(fixed) = &opts.lambda_override {
        if fixed.len() != n_lam {
            return Err(CoreError::invalid(format!(
                "lambda override has {} entries, model needs {n_lam}",
                fixed.len()
            )));
        }
        return Ok(fixed.clone());
    }
    let mut lams = vec![1.0f64; n_lam];
    let (lo, hi) = opts.log_lambda_range;
    for _sweep in 0..opts.laml_sweeps {
        for j in 0..n_lam {
            let mut trial = lams.clone();
            let (x, _fx) = golden_section_min(
                |t| {
                    trial[j] = t.exp();
                    match laml_at(&trial) {
                        Some(v) if v.is_finite() => -v,
                        _ => f64::INFINITY,
                    }
                },
                lo,
                hi,
                opts.golden_tol,
                200,
            );
            lams[j] = x.exp();
        }
    }
    Ok(lams)
}

// ---------------------------------------------------------------------------
// Fitted surfaces.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TensorTerm {
    pub basis_x: BSplineBasis,
    pub basis_y: BSplineBasis,
    pub coef: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CoastTerm {
    pub basis: BSplineBasis,
    pub coef: Vec<f64>,
}

/// One fitted regression surface over (km coordinates, coast distance).
#[derive(Debug, Clone)]
pub struct PenalizedSplineFit {
    pub intercept: f64,
    pub tensor: Option<TensorTerm>,
    pub coast: Option<CoastTerm>,
    pub lambdas: Vec<f64>,
}

impl PenalizedSplineFit {
    pub fn eval(&self, x_km: f64, y_km: f64, coast_m: f64) -> f64 {
        let mut acc = self.intercept;
        if let Some(t) = &self.tensor {
            let k = t.basis_x.n_basis();
            let (ix, vx) = t.basis_x.eval(x_km);
            let (iy, vy) = t.basis_y.eval(y_km);
            for r in 0..4 {
                for c in 0..4 {
                    acc += vx[r] * vy[c] * t.coef[(ix + r) * k + iy + c];
                }
            }
        }
        if let Some(c) = &self.coast {
            let (ic, vc) = c.basis.eval(coast_m);
            for r in 0..4 {
                acc += vc[r] * c.coef[ic + r];
            }
        }
        acc
    }

    fn from_theta(design: &Design, theta: &DVector<f64>, lambdas: Vec<f64>) -> Self {
        let kt = design.tensor_k;
        let tensor = design.basis_x.as_ref().map(|bx| TensorTerm {
            basis_x: bx.clone(),
            basis_y: design.basis_y.clone().unwrap(),
            coef: (0..kt * kt).map(|i| theta[1 + i]).collect(),
        });
        let coast = design.basis_c.as_ref().map(|bc| CoastTerm {
            basis: bc.clone(),
            coef: (0..bc.n_basis()).map(|i| theta[1 + kt * kt + i]).collect(),
        });
        PenalizedSplineFit { intercept: theta[0], tensor, coast, lambdas }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "surface_v1")?;
        let lam: Vec<String> = self.lambdas.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "lambdas,{}", lam.join(";"))?;
        writeln!(w, "intercept,{:e}", self.intercept)?;
        if let Some(t) = &self.tensor {
            let (xlo, xhi) = t.basis_x.range();
            let (ylo, yhi) = t.basis_y.range();
            writeln!(w, "tensor,{},{xlo:e},{xhi:e},{ylo:e},{yhi:e}", t.basis_x.n_basis())?;
            let c: Vec<String> = t.coef.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "tensor_coef,{}", c.join(";"))?;
        }
        if let Some(c) = &self.coast {
            let (lo, hi) = c.basis.range();
            writeln!(w, "coast,{},{lo:e},{hi:e}", c.basis.n_basis())?;
            let cc: Vec<String> = c.coef.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "coast_coef,{}", cc.join(";"))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let perr = |msg: &str| CoreError::parse(path, None, msg);
        let header = lines.next().transpose()?.ok_or_else(|| perr("empty file"))?;
        if header.trim() != "surface_v1" {
            return Err(perr("bad header"));
        }
        let mut lambdas = Vec::new();
        let mut intercept = None;
        let mut tensor_head: Option<(usize, f64, f64, f64, f64)> = None;
        let mut tensor_coef: Option<Vec<f64>> = None;
        let mut coast_head: Option<(usize, f64, f64)> = None;
        let mut coast_coef: Option<Vec<f64>> = None;
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (tag, rest) = line.split_once(',').ok_or_else(|| perr("missing tag"))?;
            let nums = |s: &str| -> Result<Vec<f64>> {
                if s.is_empty() {
                    return Ok(Vec::new());
                }
                s.split(';')
                    .map(|v| v.parse::<f64>().map_err(|_| perr("bad number")))
                    .collect()
            };
            match tag {
                "lambdas" => lambdas = nums(rest)?,
                "intercept" => {
                    intercept = Some(rest.parse::<f64>().map_err(|_| perr("bad intercept"))?)
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(',').collect();
                    if parts.len() != 5 {
                        return Err(perr("bad tensor line"));
                    }
                    tensor_head = Some((
                        parts[0].parse().map_err(|_| perr("bad tensor size"))?,
                        parts[1].parse().map_err(|_| perr("bad range"))?,
                        parts[2].parse().map_err(|_| perr("bad range"))?,
                        parts[3].parse().map_err(|_| perr("bad range"))?,
                        parts[4].parse().map_err(|_| perr("bad range"))?,
                    ));
                }
                "tensor_coef" => tensor_coef = Some(nums(rest)?),
                "coast" => {
                    let parts: Vec<&str> = rest.split(',').collect();
                    if parts.len() != 3 {
                        return Err(perr("bad coast line"));
                    }
                    coast_head = Some((
                        parts[0].parse().map_err(|_| perr("bad coast size"))?,
                        parts[1].parse().map_err(|_| perr("bad range"))?,
                        parts[2].parse().map_err(|_| perr("bad range"))?,
                    ));
                }
                "coast_coef" => coast_coef = Some(nums(rest)?),
                _ => return Err(perr("unknown tag")),
            }
        }
        let intercept = intercept.ok_or_else(|| perr("missing intercept"))?;
        let tensor = match (tensor_head, tensor_coef) {
            (Some((k, xlo, xhi, ylo, yhi)), Some(coef)) => {
                if coef.len() != k * k {
                    return Err(perr("tensor coefficient count mismatch"));
                }
                Some(TensorTerm {
                    basis_x: BSplineBasis::clamped(k, xlo, xhi)?,
                    basis_y: BSplineBasis::clamped(k, ylo, yhi)?,
                    coef,
                })
            }
            (None, None) => None,
            _ => return Err(perr("incomplete tensor block")),
        };
        let coast = match (coast_head, coast_coef) {
            (Some((k, lo, hi)), Some(coef)) => {
                if coef.len() != k {
                    return Err(perr("coast coefficient count mismatch"));
                }
                Some(CoastTerm { basis: BSplineBasis::clamped(k, lo, hi)?, coef })
            }
            (None, None) => None,
            _ => return Err(perr("incomplete coast block")),
        };
        Ok(PenalizedSplineFit { intercept, tensor, coast, lambdas })
    }
}

// ---------------------------------------------------------------------------
// Public fitting entry points.
// ---------------------------------------------------------------------------

/// Joint penalized GPD regression of (log scale, shape) over excesses.
/// Returns the pair of fitted surfaces.
pub fn gam_fit_gpd(
    records: &[ExcessRecord],
    cfg: &BasisConfig,
    opts: &FitOptions,
) -> Result<(PenalizedSplineFit, PenalizedSplineFit)> {
    let recs = subsample_records(records, opts.subsample_every, opts.seed);
    let covs: Vec<(f64, f64, f64)> = recs.iter().map(|r| (r.x_km, r.y_km, r.coast_m)).collect();
    let y: Vec<f64> = recs.iter().map(|r| r.excess).collect();
    for &v in &y {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CoreError::invalid(format!("non-positive excess {v}")));
        }
    }
    let design = Design::build(&covs, cfg)?;
    let total_dim = 2 * design.n_con;
    if y.len() < 10 * total_dim {
        return Err(CoreError::invalid(format!(
            "{} excesses after subsampling; need at least 10 x {total_dim}",
            y.len()
        )));
    }

    // Exponential-model start: intercept log(mean excess), zero shape.
    let mut gamma0 = DVector::<f64>::zeros(2 * design.n_con);
    gamma0[0] = (y.iter().sum::<f64>() / y.len() as f64).ln();

    let n_lam = 2 * design.n_lambda();
    let warm = std::cell::RefCell::new(gamma0.clone());
    let lams = optimize_lambda(n_lam, opts, |l| {
        let start = warm.borrow().clone();
        match fit_gpd_pair_at(&design, &y, l, &start, opts) {
            Ok(fit) => {
                *warm.borrow_mut() = fit.gamma;
                Some(fit.laml)
            }
            Err(_) => None,
        }
    })?;
    let start = warm.borrow().clone();
    let fit = fit_gpd_pair_at(&design, &y, &lams, &start, opts)?;

    let nc = design.n_con;
    let theta1 = &design.g * fit.gamma.rows(0, nc).into_owned();
    let theta2 = &design.g * fit.gamma.rows(nc, nc).into_owned();
    let l_per = design.n_lambda();
    Ok((
        PenalizedSplineFit::from_theta(&design, &theta1, lams[..l_per].to_vec()),
        PenalizedSplineFit::from_theta(&design, &theta2, lams[l_per..].to_vec()),
    ))
}

/// Penalized Poisson regression of exceedance counts with offset
/// log(trials); the fitted surface is the log exceedance probability.
pub fn gam_fit_rate(
    covs: &[(f64, f64, f64)],
    counts: &[usize],
    trials: &[usize],
    cfg: &BasisConfig,
    opts: &FitOptions,
) -> Result<PenalizedSplineFit> {
    if covs.len() != counts.len() || covs.len() != trials.len() {
        return Err(CoreError::dimension(format!(
            "covariates/counts/trials length mismatch: {}/{}/{}",
            covs.len(),
            counts.len(),
            trials.len()
        )));
    }
    for (i, (&k, &n)) in counts.iter().zip(trials).enumerate() {
        if n == 0 {
            return Err(CoreError::invalid(format!("site index {i} has zero trials")));
        }
        if k > n {
            return Err(CoreError::invalid(format!("site index {i}: count {k} exceeds trials {n}")));
        }
    }
    if counts.iter().all(|&k| k == 0) {
        return Err(CoreError::invalid("all exceedance counts are zero".to_string()));
    }
    let design = Design::build(covs, cfg)?;
    let kf: Vec<f64> = counts.iter().map(|&k| k as f64).collect();
    let off: Vec<f64> = trials.iter().map(|&n| (n as f64).ln()).collect();

    let total_k: f64 = kf.iter().sum();
    let total_n: f64 = trials.iter().map(|&n| n as f64).sum();
    let mut gamma0 = DVector::<f64>::zeros(design.n_con);
    gamma0[0] = (total_k / total_n).ln();

    let n_lam = design.n_lambda();
    let warm = std::cell::RefCell::new(gamma0.clone());
    let lams = optimize_lambda(n_lam, opts, |l| {
        let start = warm.borrow().clone();
        match fit_rate_at(&design, &kf, &off, l, &start, opts) {
            Ok(fit) => {
                *warm.borrow_mut() = fit.gamma;
                Some(fit.laml)
            }
            Err(_) => None,
        }
    })?;
    let start = warm.borrow().clone();
    let fit = fit_rate_at(&design, &kf, &off, &lams, &start, opts)?;
    let theta = &design.g * fit.gamma;
    Ok(PenalizedSplineFit::from_theta(&design, &theta, lams))
}

/// Fits the smooth-surface tail model: GPD surfaces over excesses plus the
/// exceedance-rate surface, evaluated back at every site.
pub fn fit_tail_gam(
    field: &GriddedField,
    u: f64,
    cfg: &BasisConfig,
    opts: &FitOptions,
) -> Result<TailModel> {
    let records = excess_records(field, u);
    let (log_sigma, xi) = gam_fit_gpd(&records, cfg, opts)?;
    let (counts, trials) = exceedance_counts(field, u);
    let covs: Vec<(f64, f64, f64)> = field
        .sites()
        .iter()
        .map(|s| (s.km.x_km, s.km.y_km, s.dist_coast_m))
        .collect();
    let rate = gam_fit_rate(&covs, &counts, &trials, cfg, opts)?;

    let params: Vec<(u32, f64, f64, f64)> = field
        .sites()
        .iter()
        .map(|s| {
            let (x, yv, c) = (s.km.x_km, s.km.y_km, s.dist_coast_m);
            let sigma = log_sigma.eval(x, yv, c).exp();
            let shape = xi.eval(x, yv, c).clamp(-XI_CAP, XI_CAP);
            // The rate surface is a smooth, so keep evaluations inside the
            // admissible probability range.
            let p = rate.eval(x, yv, c).exp().clamp(1e-6, 1.0 - 1e-6);
            (s.id, sigma, shape, p)
        })
        .collect();
    TailModel::from_params(u, TailVariant::Gam, field, &params)
}
