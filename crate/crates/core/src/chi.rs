//! Empirical tail-dependence diagnostics: pairwise chi and chi-bar at high
//! probability levels, aggregated over spatial lag bins with bootstrap
//! confidence bands.
//!
//! Margins are rank-based (rank/(n+1)), so every estimate is invariant
//! under strictly monotone transforms of each series.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::grid::GriddedField;

/// Joint/marginal exceedance counts of one ordered series pair at level u.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    /// Days where both series exceed their rank-u level.
    pub joint: usize,
    /// Days where the conditioning (second) series exceeds.
    pub denom: usize,
    /// Days where the first series exceeds.
    pub margin_i: usize,
    /// Co-observed series length.
    pub n: usize,
}

/// Average ranks (ties averaged), scaled to probabilities rank/(n+1).
fn rank_probs(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| series[a].partial_cmp(&series[b]).unwrap());
    let mut probs = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && series[order[j + 1]] == series[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            probs[k] = avg_rank / (n + 1) as f64;
        }
        i = j + 1;
    }
    probs
}

/// Exceedance counts for a pair of equal-length series at level u.
pub fn chi_pair_counts(series_i: &[f64], series_j: &[f64], u: f64) -> Result<PairCounts> {
    if series_i.len() != series_j.len() {
        return Err(CoreError::dimension(format!(
            "series lengths differ: {} vs {}",
            series_i.len(),
            series_j.len()
        )));
    }
    let n = series_i.len();
    if n < 100 {
        return Err(CoreError::invalid(format!("need at least 100 observations, got {n}")));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(CoreError::invalid(format!("level must be in (0,1), got {u}")));
    }
    if series_i.iter().chain(series_j).any(|v| !v.is_finite()) {
        return Err(CoreError::invalid("non-finite value in series".to_string()));
    }
    let fi = rank_probs(series_i);
    let fj = rank_probs(series_j);
    let mut joint = 0;
    let mut denom = 0;
    let mut margin_i = 0;
    for t in 0..n {
        let ei = fi[t] > u;
        let ej = fj[t] > u;
        if ei {
            margin_i += 1;
        }
        if ej {
            denom += 1;
        }
        if ei && ej {
            joint += 1;
        }
    }
    Ok(PairCounts { joint, denom, margin_i, n })
}

/// Pairwise chi (conditional exceedance fraction) and chi-bar at level u.
pub fn chi_pair(series_i: &[f64], series_j: &[f64], u: f64) -> Result<(f64, f64)> {
    let c = chi_pair_counts(series_i, series_j, u)?;
    if c.denom == 0 {
        return Err(CoreError::numerical(format!(
            "no conditioning exceedances at level {u}"
        )));
    }
    if c.joint == 0 {
        return Err(CoreError::numerical(format!("no joint exceedances at level {u}")));
    }
    let chi = c.joint as f64 / c.denom as f64;
    let p_m = c.margin_i as f64 / c.n as f64;
    let p_j = c.joint as f64 / c.n as f64;
    let chibar = 2.0 * p_m.ln() / p_j.ln() - 1.0;
    Ok((chi, chibar))
}

/// One (level, lag-bin) diagnostic row.
#[derive(Debug, Clone, Copy)]
pub struct ChiEstimate {
    pub level: f64,
    pub lag_lo_km: f64,
    pub lag_hi_km: f64,
    pub n_pairs: usize,
    pub chi: f64,
    pub chi_lo: f64,
    pub chi_hi: f64,
    pub chibar: f64,
    pub chibar_lo: f64,
    pub chibar_hi: f64,
}

/// Default lag bins: 25-km widths up to 500 km.
pub fn default_lag_bins() -> Vec<(f64, f64)> {
    (0..20).map(|i| (25.0 * i as f64, 25.0 * (i + 1) as f64)).collect()
}

pub const DEFAULT_CHI_LEVELS: [f64; 3] = [0.99, 0.997, 0.999];
pub const DEFAULT_N_BOOT: usize = 300;

/// Per-pair symmetric exceedance counts used by the pooled bin statistic.
#[derive(Clone, Copy)]
struct BinPair {
    joint: f64,    // joint exceedances (one orientation)
    margins: f64,  // exceedances of both members combined
    n2: f64,       // 2 x co-observed length
}

fn pooled_stats(pairs: &[BinPair]) -> Option<(f64, f64)> {
    let mut joint = 0.0;
    let mut margins = 0.0;
    let mut n2 = 0.0;
    for p in pairs {
        joint += p.joint;
        margins += p.margins;
        n2 += p.n2;
    }
    if joint <= 0.0 || margins <= 0.0 || n2 <= 0.0 {
        return None;
    }
    // chi pools both orientations: (joint + joint) / (exc_i + exc_j).
    let chi = 2.0 * joint / margins;
    let p_m = margins / n2;
    let p_j = 2.0 * joint / n2;
    let chibar = 2.0 * p_m.ln() / p_j.ln() - 1.0;
    Some((chi, chibar))
}

/// Binned chi/chi-bar over spatial lags with pair-resampling bootstrap.
///
/// Pairs of distinct sites go to the first half-open bin [lo, hi) holding
/// their km distance; degenerate bins (lo == hi) collect exact-distance
/// pairs including self-pairs. `site_stride` keeps every k-th site.
pub fn chi_by_lag(
    field: &GriddedField,
    levels: &[f64],
    bins: &[(f64, f64)],
    site_stride: usize,
    n_boot: usize,
    seed: u64,
) -> Result<Vec<ChiEstimate>> {
    if bins.is_empty() || levels.is_empty() {
        return Err(CoreError::invalid("need at least one level and one lag bin".to_string()));
    }
    for &(lo, hi) in bins {
        if !(lo >= 0.0 && hi >= lo) {
            return Err(CoreError::invalid(format!("bad lag bin [{lo}, {hi}]")));
        }
    }
    for &u in levels {
        if !(u > 0.0 && u < 1.0) {
            return Err(CoreError::invalid(format!("level must be in (0,1), got {u}")));
        }
    }
    let stride = site_stride.max(1);
    let sites: Vec<usize> = (0..field.n_sites()).step_by(stride).collect();
    let nt = field.n_days();

    // Rank-probability series per kept site (NaN at unobserved days).
    let probs: Vec<Vec<f64>> = sites
        .par_iter()
        .map(|&s| {
            let observed: Vec<(usize, f64)> =
                (0..nt).filter_map(|t| field.value(s, t).map(|v| (t, v))).collect();
            let vals: Vec<f64> = observed.iter().map(|&(_, v)| v).collect();
            let r = rank_probs(&vals);
            let mut out = vec![f64::NAN; nt];
            for (k, &(t, _)) in observed.iter().enumerate() {
                out[t] = r[k];
            }
            out
        })
        .collect();

    // Assign pairs to bins.
    let assign = |d: f64| -> Option<usize> {
        bins.iter().position(|&(lo, hi)| if lo == hi { d == lo } else { d >= lo && d < hi })
    };
    let mut bin_members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); bins.len()];
    for a in 0..sites.len() {
        for b in a..sites.len() {
            let d = field.sites()[sites[a]].km.dist(&field.sites()[sites[b]].km);
            if a == b {
                // Self-pairs only enter degenerate bins.
                if let Some(k) = assign(d) {
                    if bins[k].0 == bins[k].1 {
                        bin_members[k].push((a, b));
                    }
                }
            } else if let Some(k) = assign(d) {
                bin_members[k].push((a, b));
            }
        }
    }
    for (k, members) in bin_members.iter().enumerate() {
        if members.len() < 1 || (members.len() < 2 && bins[k].0 != bins[k].1) {
            return Err(CoreError::invalid(format!(
                "lag bin [{}, {}) has too few site pairs ({})",
                bins[k].0,
                bins[k].1,
                members.len()
            )));
        }
    }

    let tasks: Vec<(usize, usize)> = (0..levels.len())
        .flat_map(|li| (0..bins.len()).map(move |bi| (li, bi)))
        .collect();
    let estimates: Vec<Result<ChiEstimate>> = tasks
        .par_iter()
        .map(|&(li, bi)| {
            let u = levels[li];
            let pair_counts: Vec<BinPair> = bin_members[bi]
                .iter()
                .map(|&(a, b)| {
                    let (pa, pb) = (&probs[a], &probs[b]);
                    let mut joint = 0usize;
                    let mut exc_a = 0usize;
                    let mut exc_b = 0usize;
                    let mut n = 0usize;
                    for t in 0..nt {
                        let (va, vb) = (pa[t], pb[t]);
                        if va.is_nan() || vb.is_nan() {
                            continue;
                        }
                        n += 1;
                        let ea = va > u;
                        let eb = vb > u;
                        if ea {
                            exc_a += 1;
                        }
                        if eb {
                            exc_b += 1;
                        }
                        if ea && eb {
                            joint += 1;
                        }
                    }
                    BinPair {
                        joint: joint as f64,
                        margins: (exc_a + exc_b) as f64,
                        n2: 2.0 * n as f64,
                    }
                })
                .collect();
            let (chi, chibar) = pooled_stats(&pair_counts).ok_or_else(|| {
                CoreError::numerical(format!(
                    "no joint exceedances at level {u} in lag bin [{}, {}]",
                    bins[bi].0, bins[bi].1
                ))
            })?;

            // Pair-resampling bootstrap with per-replicate seeded streams.
            let mut chis = Vec::with_capacity(n_boot);
            let mut chibars = Vec::with_capacity(n_boot);
            let m = pair_counts.len();
            for rep in 0..n_boot {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                rng.set_stream(((li * bins.len() + bi) * n_boot + rep) as u64 + 1);
                let sample: Vec<BinPair> =
                    (0..m).map(|_| pair_counts[rng.gen_range(0..m)]).collect();
                if let Some((c, cb)) = pooled_stats(&sample) {
                    chis.push(c);
                    chibars.push(cb);
                }
            }
            let band = |v: &mut Vec<f64>, point: f64| -> (f64, f64) {
                if v.is_empty() {
                    return (point, point);
                }
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let q = |p: f64| v[(p * (v.len() - 1) as f64).round() as usize];
                // Percentile bands widened to include the point estimate.
                (q(0.025).min(point), q(0.975).max(point))
            };
            let (chi_lo, chi_hi) = band(&mut chis, chi);
            let (chibar_lo, chibar_hi) = band(&mut chibars, chibar);
            Ok(ChiEstimate {
                level: u,
                lag_lo_km: bins[bi].0,
                lag_hi_km: bins[bi].1,
                n_pairs: bin_members[bi].len(),
                chi,
                chi_lo,
                chi_hi,
                chibar,
                chibar_lo,
                chibar_hi,
            })
        })
        .collect();
    estimates.into_iter().collect()
}

pub fn write_chi_csv(estimates: &[ChiEstimate], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "level,lag_lo_km,lag_hi_km,n_pairs,chi,chi_lo,chi_hi,chibar,chibar_lo,chibar_hi"
    )?;
    for e in estimates {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            e.level,
            e.lag_lo_km,
            e.lag_hi_km,
            e.n_pairs,
            e.chi,
            e.chi_lo,
            e.chi_hi,
            e.chibar,
            e.chibar_lo,
            e.chibar_hi
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{to_km, GeoPoint};
    use crate::grid::{DayIndex, Site};
    use crate::special::matern_nu1_correlation;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn comonotone_pair_is_fully_dependent() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x: Vec<f64> = (0..500).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for u in [0.5, 0.9, 0.99] {
            let (chi, chibar) = chi_pair(&x, &x, u).unwrap();
            assert_relative_eq!(chi, 1.0, epsilon = 1e-14);
            assert_relative_eq!(chibar, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn independent_pair_matches_population_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let n = 100_000;
        let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let u = 0.9;
        let (chi, chibar) = chi_pair(&x, &y, u).unwrap();
        // chi ~ Binomial(m, 1-u)/m with m ~ (1-u) n: 4 sigma band.
        let m = (1.0 - u) * n as f64;
        let band = 4.0 * ((1.0 - u) * u / m).sqrt();
        assert!((chi - (1.0 - u)).abs() < band, "chi {chi} vs {}", 1.0 - u);
        assert!(chibar.abs() < 0.05, "chibar {chibar}");
    }

    #[test]
    fn gaussian_dependence_matches_orthant_oracle() {
        // Bivariate normal, rho = 0.8, level 0.99: joint survival
        // 3.7689681631e-3 gives population chi-bar 0.650316.
        let rho: f64 = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let n = 200_000;
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            x.push(z1);
            y.push(rho * z1 + (1.0 - rho * rho).sqrt() * z2);
        }
        let (_, chibar) = chi_pair(&x, &y, 0.99).unwrap();
        assert!((chibar - 0.650_316).abs() < 0.1, "chibar {chibar}");
    }

    #[test]
    fn rank_invariance_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let x: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| 0.6 * v + 0.8 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let xt: Vec<f64> = x.iter().map(|&v| v.exp()).collect();
        let yt: Vec<f64> = y.iter().map(|&v| v.powi(3) + 5.0).collect();
        let a = chi_pair(&x, &y, 0.95).unwrap();
        let b = chi_pair(&xt, &yt, 0.95).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn joint_exceedances_nested_in_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let x: Vec<f64> = (0..3000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| 0.7 * v + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut prev = usize::MAX;
        for u in [0.5, 0.8, 0.9, 0.95, 0.99] {
            let c = chi_pair_counts(&x, &y, u).unwrap();
            assert!(c.joint <= prev, "joint count increased at {u}");
            prev = c.joint;
        }
    }

    #[test]
    fn pair_errors() {
        let x = vec![0.0; 200];
        let short = vec![0.0; 50];
        assert!(chi_pair(&x, &short, 0.9).is_err());
        assert!(chi_pair(&short, &short, 0.9).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let a: Vec<f64> = (0..500).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let neg: Vec<f64> = a.iter().map(|&v| -v).collect();
        assert!(chi_pair(&a, &a, 0.0).is_err());
        assert!(chi_pair(&a, &a, 1.0).is_err());
        // Antithetic series never jointly exceed a high level.
        assert!(chi_pair(&a, &neg, 0.9).is_err());
    }

    fn line_field(n_sites: usize, nt: usize, spacing_km: f64, fill: impl FnMut() -> f64) -> GriddedField {
        let mut fill = fill;
        let sites: Vec<Site> = (0..n_sites)
            .map(|i| {
                let geo = GeoPoint::new(20.0, 38.0).unwrap();
                let mut km = to_km(geo);
                km.x_km += spacing_km * i as f64;
                Site { id: i as u32, geo, km, dist_coast_m: 1000.0 }
            })
            .collect();
        let days: Vec<DayIndex> =
            (0..nt).map(|t| DayIndex { day: t as u32 + 1, year: 1985 }).collect();
        let values: Vec<f64> = (0..n_sites * nt).map(|_| fill()).collect();
        GriddedField::new(sites, days, values, vec![true; n_sites * nt]).unwrap()
    }

    #[test]
    fn lag_zero_bin_is_comonotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let field = line_field(5, 400, 30.0, || rng.sample::<f64, _>(StandardNormal));
        let bins = vec![(0.0, 0.0), (0.0, 200.0)];
        let est = chi_by_lag(&field, &[0.9], &bins, 1, 50, 1).unwrap();
        assert_eq!(est[0].n_pairs, 5); // self-pairs
        assert_relative_eq!(est[0].chi, 1.0, epsilon = 1e-14);
        assert_relative_eq!(est[0].chibar, 1.0, epsilon = 1e-14);
        assert!(est[1].chi < 0.5); // independent neighbors stay low
    }

    #[test]
    fn white_noise_bands_cover_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let field = line_field(40, 3000, 15.0, || rng.sample::<f64, _>(StandardNormal));
        let bins: Vec<(f64, f64)> = (0..8).map(|i| (i as f64 * 25.0, (i + 1) as f64 * 25.0)).collect();
        let est = chi_by_lag(&field, &[0.95], &bins, 1, 300, 2).unwrap();
        let covered = est
            .iter()
            .filter(|e| e.chibar_lo <= 0.0 && 0.0 <= e.chibar_hi)
            .count();
        assert!(
            covered as f64 >= 0.9 * est.len() as f64,
            "bands cover zero in {covered}/{} bins",
            est.len()
        );
    }

    #[test]
    fn smooth_field_chi_decreases_with_lag() {
        // Gaussian field with 200-km-range correlation, iid in time.
        let n_sites = 45;
        let spacing = 15.0;
        let nt = 6000;
        let mut corr = nalgebra::DMatrix::<f64>::zeros(n_sites, n_sites);
        for i in 0..n_sites {
            for j in 0..n_sites {
                let d = spacing * (i as f64 - j as f64).abs();
                corr[(i, j)] = matern_nu1_correlation(d, 200.0);
            }
        }
        let chol = nalgebra::Cholesky::new(corr).expect("correlation is PD");
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let mut values = vec![0.0; n_sites * nt];
        for t in 0..nt {
            let z = nalgebra::DVector::from_fn(n_sites, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = chol.l() * z;
            for s in 0..n_sites {
                values[t * n_sites + s] = x[s];
            }
        }
        let mut fill_iter = values.into_iter();
        let field = line_field(n_sites, nt, spacing, move || fill_iter.next().unwrap());
        let bins: Vec<(f64, f64)> = (0..8).map(|i| (i as f64 * 50.0, (i + 1) as f64 * 50.0)).collect();
        let est = chi_by_lag(&field, &[0.95], &bins, 1, 50, 3).unwrap();
        // Monotone trend: rank correlation between lag and chi near -1.
        let lags: Vec<f64> = est.iter().map(|e| 0.5 * (e.lag_lo_km + e.lag_hi_km)).collect();
        let chis: Vec<f64> = est.iter().map(|e| e.chi).collect();
        let mut concordant = 0i32;
        let mut discordant = 0i32;
        for i in 0..est.len() {
            for j in i + 1..est.len() {
                let s = (lags[j] - lags[i]) * (chis[j] - chis[i]);
                if s > 0.0 {
                    concordant += 1;
                } else if s < 0.0 {
                    discordant += 1;
                }
            }
        }
        let tau = (concordant - discordant) as f64 / (concordant + discordant) as f64;
        assert!(tau < -0.7, "Kendall tau {tau}");
        // Strictly decreasing where the correlation signal is strong.
        for k in 0..4 {
            assert!(chis[k] > chis[k + 1], "chi not decreasing at bin {k}: {chis:?}");
        }
        assert!(est[0].chi > est[7].chi + 0.15);
    }

    #[test]
    fn bootstrap_is_seeded_and_bands_bracket() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let field = line_field(12, 800, 20.0, || rng.sample::<f64, _>(StandardNormal));
        let bins = vec![(0.0, 120.0), (120.0, 260.0)];
        let a = chi_by_lag(&field, &[0.9, 0.95], &bins, 1, 100, 9).unwrap();
        let b = chi_by_lag(&field, &[0.9, 0.95], &bins, 1, 100, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.chi_lo, y.chi_lo);
            assert_eq!(x.chibar_hi, y.chibar_hi);
        }
        for e in &a {
            assert!(e.chi_lo <= e.chi && e.chi <= e.chi_hi);
            assert!(e.chibar_lo <= e.chibar && e.chibar <= e.chibar_hi);
            assert!((0.0..=1.0).contains(&e.chi));
            assert!((-1.0..=1.0).contains(&e.chibar));
        }
        let c = chi_by_lag(&field, &[0.9, 0.95], &bins, 1, 100, 10).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.chi_lo != y.chi_lo));
    }

    #[test]
    fn empty_bin_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let field = line_field(5, 200, 30.0, || rng.sample::<f64, _>(StandardNormal));
        let err = chi_by_lag(&field, &[0.9], &[(1000.0, 1100.0)], 1, 10, 0).unwrap_err();
        assert!(err.to_string().contains("too few site pairs"), "{err}");
    }

    #[test]
    fn site_stride_reduces_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let field = line_field(20, 300, 10.0, || rng.sample::<f64, _>(StandardNormal));
        let bins = vec![(0.0, 300.0)];
        let all = chi_by_lag(&field, &[0.9], &bins, 1, 10, 0).unwrap();
        let half = chi_by_lag(&field, &[0.9], &bins, 2, 10, 0).unwrap();
        assert_eq!(all[0].n_pairs, 20 * 19 / 2);
        assert_eq!(half[0].n_pairs, 10 * 9 / 2);
    }

    #[test]
    fn csv_export_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let field = line_field(8, 400, 25.0, || rng.sample::<f64, _>(StandardNormal));
        let bins = vec![(0.0, 100.0), (100.0, 200.0)];
        let est = chi_by_lag(&field, &[0.9, 0.95], &bins, 1, 20, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chi.csv");
        write_chi_csv(&est, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.trim().lines().collect();
        assert_eq!(lines.len(), 1 + 4);
        assert!(lines[0].starts_with("level,lag_lo_km"));
        assert_eq!(lines[1].split(',').count(), 10);
    }
}
