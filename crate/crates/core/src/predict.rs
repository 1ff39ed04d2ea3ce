//! Cluster-summary prediction: cylindrical space-time neighborhoods, the
//! per-draw minimum functional over posterior samples, and empirical
//! predictive distributions.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};
use crate::grid::GriddedField;

pub const DEFAULT_RADIUS_KM: f64 = 50.0;
pub const DEFAULT_HALF_WINDOW: usize = 3;

/// Cylindrical neighborhood of one (site, day) center: all sites within the
/// km radius crossed with the clipped day window.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub center_site: usize,
    pub center_day: usize,
    /// (site, day) members, day-major, sites ascending.
    pub members: Vec<(usize, usize)>,
}

pub fn neighborhood(
    field: &GriddedField,
    center_site: usize,
    center_day: usize,
    radius_km: f64,
    half_window: usize,
) -> Result<Neighborhood> {
    if center_site >= field.n_sites() || center_day >= field.n_days() {
        return Err(CoreError::invalid(format!(
            "center ({center_site}, {center_day}) outside {} sites x {} days",
            field.n_sites(),
            field.n_days()
        )));
    }
    if !(radius_km >= 0.0) {
        return Err(CoreError::invalid(format!("radius must be >= 0, got {radius_km}")));
    }
    let center = &field.sites()[center_site].km;
    let near: Vec<usize> = (0..field.n_sites())
        .filter(|&s| field.sites()[s].km.dist(center) <= radius_km)
        .collect();
    if near.is_empty() {
        return Err(CoreError::invalid("no member sites within radius".to_string()));
    }
    let day_lo = center_day.saturating_sub(half_window);
    let day_hi = (center_day + half_window).min(field.n_days() - 1);
    let mut members = Vec::with_capacity(near.len() * (day_hi - day_lo + 1));
    for day in day_lo..=day_hi {
        for &s in &near {
            members.push((s, day));
        }
    }
    Ok(Neighborhood { center_site, center_day, members })
}

/// Empirical predictive distribution of a scalar summary: a right-continuous
/// step function through the sorted sample values.
#[derive(Debug, Clone)]
pub struct PredictiveCdf {
    xs: Vec<f64>,
}

impl PredictiveCdf {
    pub fn from_samples(mut xs: Vec<f64>) -> Result<Self> {
        if xs.is_empty() {
            return Err(CoreError::invalid("empty sample set".to_string()));
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid("non-finite sample".to_string()));
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(PredictiveCdf { xs })
    }

    pub fn n(&self) -> usize {
        self.xs.len()
    }

    /// Sorted sample values.
    pub fn samples(&self) -> &[f64] {
        &self.xs
    }

    /// P(X <= x); right-continuous.
    pub fn cdf(&self, x: f64) -> f64 {
        self.xs.partition_point(|&v| v <= x) as f64 / self.xs.len() as f64
    }

    /// Order-statistic quantile at probability p in (0,1].
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.xs.len();
        let k = ((p * n as f64).ceil() as usize).clamp(1, n);
        self.xs[k - 1]
    }
}

/// Per-draw minimum over neighborhood members. `draws` rows follow
/// `nb.members` order; columns are joint posterior draws, so the minimum is
/// taken inside each column.
pub fn cluster_min(draws: &DMatrix<f64>, nb: &Neighborhood) -> Result<PredictiveCdf> {
    if draws.nrows() != nb.members.len() {
        return Err(CoreError::dimension(format!(
            "{} draw rows for {} neighborhood members",
            draws.nrows(),
            nb.members.len()
        )));
    }
    if draws.ncols() == 0 {
        return Err(CoreError::invalid("no posterior draws".to_string()));
    }
    let mins: Vec<f64> = (0..draws.ncols())
        .map(|c| draws.column(c).iter().cloned().fold(f64::INFINITY, f64::min))
        .collect();
    PredictiveCdf::from_samples(mins)
}

/// As `cluster_min`, resolving member rows through an index of all computed
/// (site, day) draw rows; a member absent from the index is an error.
pub fn cluster_min_indexed(
    all_draws: &DMatrix<f64>,
    row_of: &HashMap<(usize, usize), usize>,
    nb: &Neighborhood,
) -> Result<PredictiveCdf> {
    let mut rows = Vec::with_capacity(nb.members.len());
    for member in &nb.members {
        let r = row_of.get(member).ok_or_else(|| {
            CoreError::invalid(format!(
                "missing member (site {}, day {}) in draw index",
                member.0, member.1
            ))
        })?;
        rows.push(*r);
    }
    if all_draws.ncols() == 0 {
        return Err(CoreError::invalid("no posterior draws".to_string()));
    }
    let mins: Vec<f64> = (0..all_draws.ncols())
        .map(|c| {
            rows.iter()
                .map(|&r| all_draws[(r, c)])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    PredictiveCdf::from_samples(mins)
}

/// Writes one row per target: id, site, day, then the milliquantile grid
/// q001..q999.
pub fn write_prediction_quantiles(
    targets: &[(usize, u32, u32)],
    cdfs: &[PredictiveCdf],
    path: &Path,
) -> Result<()> {
    if targets.len() != cdfs.len() {
        return Err(CoreError::dimension(format!(
            "{} targets vs {} predictive cdfs",
            targets.len(),
            cdfs.len()
        )));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "target_id,site_id,day")?;
    for k in 1..1000 {
        write!(w, ",q{k:03}")?;
    }
    writeln!(w)?;
    for ((tid, site, day), cdf) in targets.iter().zip(cdfs) {
        write!(w, "{tid},{site},{day}")?;
        for k in 1..1000 {
            write!(w, ",{}", cdf.quantile(k as f64 / 1000.0))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one row per target with the raw sorted sample values.
pub fn write_prediction_samples(
    targets: &[(usize, u32, u32)],
    cdfs: &[PredictiveCdf],
    path: &Path,
) -> Result<()> {
    if targets.len() != cdfs.len() {
        return Err(CoreError::dimension(format!(
            "{} targets vs {} predictive cdfs",
            targets.len(),
            cdfs.len()
        )));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "target_id,site_id,day,samples")?;
    for ((tid, site, day), cdf) in targets.iter().zip(cdfs) {
        write!(w, "{tid},{site},{day}")?;
        for v in cdf.samples() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::grid::{DayIndex, Site};
    use crate::geo::KmPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scatter_field(n_sites: usize, nt: usize, seed: u64) -> GriddedField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites: Vec<Site> = (0..n_sites)
            .map(|i| Site {
                id: i as u32,
                geo: GeoPoint::new(20.0, 38.0).unwrap(),
                km: KmPoint::new(rng.gen_range(0.0..300.0), rng.gen_range(0.0..300.0)),
                dist_coast_m: 1000.0,
            })
            .collect();
        let days: Vec<DayIndex> =
            (0..nt).map(|t| DayIndex { day: t as u32 + 1, year: 1985 }).collect();
        GriddedField::new(sites, days, vec![0.0; n_sites * nt], vec![true; n_sites * nt])
            .unwrap()
    }

    #[test]
    fn zero_radius_keeps_center_column() {
        let field = scatter_field(30, 20, 1);
        let nb = neighborhood(&field, 4, 10, 0.0, 3).unwrap();
        assert_eq!(nb.members.len(), 7);
        assert!(nb.members.iter().all(|&(s, _)| s == 4));
        let days: Vec<usize> = nb.members.iter().map(|&(_, d)| d).collect();
        assert_eq!(days, vec![7, 8, 9, 10, 11, 12, 13]);
    }

    #[test]
    fn early_center_clips_days() {
        let field = scatter_field(10, 20, 2);
        let nb = neighborhood(&field, 0, 0, 0.0, 3).unwrap();
        let days: Vec<usize> = nb.members.iter().map(|&(_, d)| d).collect();
        assert_eq!(days, vec![0, 1, 2, 3]);
        let nb_end = neighborhood(&field, 0, 19, 0.0, 3).unwrap();
        let days: Vec<usize> = nb_end.members.iter().map(|&(_, d)| d).collect();
        assert_eq!(days, vec![16, 17, 18, 19]);
    }

    #[test]
    fn membership_matches_brute_force_scan() {
        let field = scatter_field(80, 15, 3);
        for (center, day) in [(0usize, 7usize), (17, 1), (42, 14)] {
            let nb = neighborhood(&field, center, day, 60.0, 3).unwrap();
            let mut expected = Vec::new();
            let c = &field.sites()[center].km;
            for d in day.saturating_sub(3)..=(day + 3).min(14) {
                for s in 0..80 {
                    if field.sites()[s].km.dist(c) <= 60.0 {
                        expected.push((s, d));
                    }
                }
            }
            let mut got = nb.members.clone();
            got.sort_unstable();
            expected.sort_unstable();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn bad_centers_are_rejected() {
        let field = scatter_field(10, 5, 4);
        assert!(neighborhood(&field, 10, 0, 50.0, 3).is_err());
        assert!(neighborhood(&field, 0, 5, 50.0, 3).is_err());
        assert!(neighborhood(&field, 0, 0, -1.0, 3).is_err());
    }

    #[test]
    fn constant_draws_give_point_mass() {
        let field = scatter_field(5, 9, 5);
        let nb = neighborhood(&field, 2, 4, 1e6, 3).unwrap();
        let draws = DMatrix::from_element(nb.members.len(), 20, 2.5);
        let cdf = cluster_min(&draws, &nb).unwrap();
        assert_eq!(cdf.cdf(2.5 - 1e-12), 0.0);
        assert_eq!(cdf.cdf(2.5), 1.0);
    }

    #[test]
    fn single_member_passes_through() {
        let field = scatter_field(5, 9, 6);
        let nb = neighborhood(&field, 1, 4, 0.0, 0).unwrap();
        assert_eq!(nb.members.len(), 1);
        let vals = vec![0.3, -1.0, 2.0, 0.7];
        let draws = DMatrix::from_row_slice(1, 4, &vals);
        let cdf = cluster_min(&draws, &nb).unwrap();
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cdf.samples(), sorted.as_slice());
    }

    #[test]
    fn hand_enumerated_minima() {
        let field = scatter_field(3, 1, 7);
        let nb = neighborhood(&field, 0, 0, 1e6, 0).unwrap();
        assert_eq!(nb.members.len(), 3);
        // Rows follow member order; columns are joint draws.
        let draws = DMatrix::from_row_slice(
            3,
            4,
            &[
                1.0, 5.0, 0.0, 2.0, //
                3.0, 1.0, 4.0, 0.0, //
                2.0, 2.0, 2.0, 9.0,
            ],
        );
        let cdf = cluster_min(&draws, &nb).unwrap();
        assert_eq!(cdf.samples(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn larger_neighborhood_dominates_from_below() {
        let field = scatter_field(40, 9, 8);
        let small = neighborhood(&field, 3, 4, 40.0, 1).unwrap();
        let large = neighborhood(&field, 3, 4, 90.0, 3).unwrap();
        // Joint draws for every (site, day) the large neighborhood needs.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut row_of = HashMap::new();
        for m in large.members.iter().chain(&small.members) {
            let next = row_of.len();
            row_of.entry(*m).or_insert(next);
        }
        let all = DMatrix::from_fn(row_of.len(), 200, |_, _| rng.gen_range(-3.0..3.0));
        let f_small = cluster_min_indexed(&all, &row_of, &small).unwrap();
        let f_large = cluster_min_indexed(&all, &row_of, &large).unwrap();
        for k in 0..100 {
            let x = -3.0 + 6.0 * k as f64 / 99.0;
            assert!(f_large.cdf(x) >= f_small.cdf(x), "at {x}");
        }
    }

    #[test]
    fn missing_member_is_an_error() {
        let field = scatter_field(5, 9, 10);
        let nb = neighborhood(&field, 2, 4, 1e6, 1).unwrap();
        let row_of: HashMap<(usize, usize), usize> = HashMap::new();
        let all = DMatrix::zeros(1, 10);
        let err = cluster_min_indexed(&all, &row_of, &nb).unwrap_err();
        assert!(err.to_string().contains("missing member"), "{err}");
    }

    #[test]
    fn cdf_is_a_valid_right_continuous_step() {
        let cdf = PredictiveCdf::from_samples(vec![1.0, -0.5, 1.0, 3.0]).unwrap();
        assert_eq!(cdf.cdf(-1.0), 0.0);
        assert_eq!(cdf.cdf(-0.5), 0.25);
        assert_eq!(cdf.cdf(0.99999), 0.25);
        assert_eq!(cdf.cdf(1.0), 0.75); // tie jumps by 2/4 exactly at the point
        assert_eq!(cdf.cdf(3.0), 1.0);
        assert_eq!(cdf.cdf(99.0), 1.0);
        let mut prev = -0.1;
        for k in 0..200 {
            let x = -1.0 + k as f64 * 0.025;
            let v = cdf.cdf(x);
            assert!(v >= prev && (0.0..=1.0).contains(&v));
            prev = v;
        }
        assert!(PredictiveCdf::from_samples(vec![]).is_err());
        assert!(PredictiveCdf::from_samples(vec![f64::NAN]).is_err());
    }

    #[test]
    fn quantiles_are_order_statistics() {
        let cdf = PredictiveCdf::from_samples((1..=100).map(|k| k as f64).collect()).unwrap();
        assert_eq!(cdf.quantile(0.5), 50.0);
        assert_eq!(cdf.quantile(0.001), 1.0);
        assert_eq!(cdf.quantile(0.999), 100.0);
        assert_eq!(cdf.quantile(1.0), 100.0);
    }

    #[test]
    fn prediction_exports() {
        let cdfs = vec![
            PredictiveCdf::from_samples(vec![0.1, 0.2, 0.3]).unwrap(),
            PredictiveCdf::from_samples(vec![-1.0, 0.0, 5.0]).unwrap(),
        ];
        let targets = vec![(0usize, 3u32, 100u32), (1, 7, 101)];
        let dir = tempfile::tempdir().unwrap();
        let qpath = dir.path().join("pred_q.csv");
        write_prediction_quantiles(&targets, &cdfs, &qpath).unwrap();
        let text = std::fs::read_to_string(&qpath).unwrap();
        let lines: Vec<&str> = text.trim().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split(',').count(), 3 + 999);
        assert!(lines[0].starts_with("target_id,site_id,day,q001"));
        assert!(lines[0].ends_with("q999"));
        let spath = dir.path().join("pred_s.csv");
        write_prediction_samples(&targets, &cdfs, &spath).unwrap();
        let stext = std::fs::read_to_string(&spath).unwrap();
        let slines: Vec<&str> = stext.trim().lines().collect();
        assert_eq!(slines[1].split(',').count(), 3 + 3);
        assert!(write_prediction_samples(&targets[..1], &cdfs, &spath).is_err());
    }
}
