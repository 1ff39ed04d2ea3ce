//! Yearly location-scale trend: first stage of the marginal transform.
//!
//! Each calendar year gets a Gaussian MLE mean and sd (divisor n) from a
//! site subsample; standardization is (value - mu_year) / sd_year.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{CoreError, Result};
use crate::grid::GriddedField;

/// Per-year location/scale pairs, sorted by year.
#[derive(Debug, Clone, PartialEq)]
pub struct YearlyTrend {
    entries: Vec<(i32, f64, f64)>,
}

/// Site subsampling rule for trend fitting.
#[derive(Debug, Clone, Copy)]
pub enum Subsample {
    /// Keep every k-th site in site-id order (k = 1 keeps all).
    Stride(usize),
    /// Keep a random 1-in-k site subset, reproducible from the seed.
    SeededRandom { every: usize, seed: u64 },
}

impl YearlyTrend {
    pub fn entries(&self) -> &[(i32, f64, f64)] {
        &self.entries
    }

    pub fn get(&self, year: i32) -> Option<(f64, f64)> {
        self.entries
            .binary_search_by_key(&year, |e| e.0)
            .ok()
            .map(|i| (self.entries[i].1, self.entries[i].2))
    }

    pub fn from_entries(mut entries: Vec<(i32, f64, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(CoreError::invalid(format!("duplicate year {}", w[0].0)));
            }
        }
        for &(year, _, sd) in &entries {
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(CoreError::invalid(format!(
                    "year {year} has non-positive sd {sd}"
                )));
            }
        }
        Ok(YearlyTrend { entries })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "year,beta_mu,beta_sigma")?;
        for &(year, mu, sd) in &self.entries {
            writeln!(w, "{year},{mu},{sd}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line == "year,beta_mu,beta_sigma") {
                continue;
            }
            let mut parts = line.split(',');
            let parse_err = || CoreError::parse(path, Some(lineno + 1), "bad trend row");
            let year: i32 = parts.next().and_then(|x| x.parse().ok()).ok_or_else(parse_err)?;
            let mu: f64 = parts.next().and_then(|x| x.parse().ok()).ok_or_else(parse_err)?;
            let sd: f64 = parts.next().and_then(|x| x.parse().ok()).ok_or_else(parse_err)?;
            entries.push((year, mu, sd));
        }
        if entries.is_empty() {
            return Err(CoreError::parse(path, None, "no data rows"));
        }
        YearlyTrend::from_entries(entries)
    }
}

fn subsample_sites(field: &GriddedField, rule: Subsample) -> Result<Vec<usize>> {
    let n = field.n_sites();
    // Stride and random draws both operate on site-id order, so the result
    // does not depend on storage order.
    let mut by_id: Vec<usize> = (0..n).collect();
    by_id.sort_by_key(|&s| field.sites()[s].id);
    match rule {
        Subsample::Stride(k) => {
            if k == 0 {
                return Err(CoreError::invalid("subsample stride must be >= 1".to_string()));
            }
            Ok(by_id.into_iter().step_by(k).collect())
        }
        Subsample::SeededRandom { every, seed } => {
            if every == 0 {
                return Err(CoreError::invalid("subsample ratio must be >= 1".to_string()));
            }
            let keep = n.div_ceil(every);
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            by_id.shuffle(&mut rng);
            let mut kept: Vec<usize> = by_id.into_iter().take(keep).collect();
            kept.sort_unstable();
            Ok(kept)
        }
    }
}

/// Per-year Gaussian MLE over the subsampled sites' observed values.
pub fn fit_yearly_trend(field: &GriddedField, rule: Subsample) -> Result<YearlyTrend> {
    let sites = subsample_sites(field, rule)?;
    // Welford accumulators keyed by year.
    let mut acc: std::collections::BTreeMap<i32, (usize, f64, f64)> = std::collections::BTreeMap::new();
    for (t, day) in field.days().iter().enumerate() {
        let entry = acc.entry(day.year).or_insert((0, 0.0, 0.0));
        for &s in &sites {
            if let Some(v) = field.value(s, t) {
                entry.0 += 1;
                let delta = v - entry.1;
                entry.1 += delta / entry.0 as f64;
                entry.2 += delta * (v - entry.1);
            }
        }
    }
    let mut entries = Vec::with_capacity(acc.len());
    for (year, (count, mean, m2)) in acc {
        if count < 2 {
            return Err(CoreError::invalid(format!(
                "year {year} has {count} observed values in the subsample; need at least 2"
            )));
        }
        let var = m2 / count as f64;
        if var <= 0.0 {
            return Err(CoreError::numerical(format!(
                "year {year} has zero variance; scale is not identifiable"
            )));
        }
        entries.push((year, mean, var.sqrt()));
    }
    YearlyTrend::from_entries(entries)
}

fn transform(field: &GriddedField, trend: &YearlyTrend, inverse: bool) -> Result<GriddedField> {
    let ns = field.n_sites();
    let nt = field.n_days();
    let mut values = vec![f64::NAN; ns * nt];
    for (t, day) in field.days().iter().enumerate() {
        let (mu, sd) = trend.get(day.year).ok_or_else(|| {
            CoreError::invalid(format!("year {} missing from the trend table", day.year))
        })?;
        for s in 0..ns {
            if let Some(v) = field.value(s, t) {
                values[t * ns + s] = if inverse {
                    mu + sd * v
                } else {
                    (v - mu) / sd
                };
            }
        }
    }
    field.with_values(values)
}

/// (value - mu_year) / sd_year at every observed cell.
pub fn standardize(field: &GriddedField, trend: &YearlyTrend) -> Result<GriddedField> {
    transform(field, trend, false)
}

/// Exact inverse of `standardize`.
pub fn destandardize(field: &GriddedField, trend: &YearlyTrend) -> Result<GriddedField> {
    transform(field, trend, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{to_km, GeoPoint};
    use crate::grid::{DayIndex, Site};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn field_from(values_by_day: Vec<Vec<f64>>, years: Vec<i32>) -> GriddedField {
        let ns = values_by_day[0].len();
        let sites = (0..ns)
            .map(|i| {
                let geo = GeoPoint::new(20.0 + 0.01 * i as f64, 38.0).unwrap();
                Site {
                    id: i as u32,
                    geo,
                    km: to_km(geo),
                    dist_coast_m: 0.0,
                }
            })
            .collect();
        let days = years
            .iter()
            .enumerate()
            .map(|(t, &year)| DayIndex { day: t as u32 + 1, year })
            .collect();
        let mut values = Vec::new();
        for row in &values_by_day {
            values.extend_from_slice(row);
        }
        let mask = vec![true; values.len()];
        GriddedField::new(sites, days, values, mask).unwrap()
    }

    #[test]
    fn two_point_year() {
        let f = field_from(vec![vec![1.0], vec![3.0]], vec![1985, 1985]);
        let trend = fit_yearly_trend(&f, Subsample::Stride(1)).unwrap();
        assert_eq!(trend.entries().len(), 1);
        let (mu, sd) = trend.get(1985).unwrap();
        assert_relative_eq!(mu, 2.0, epsilon = 1e-14);
        assert_relative_eq!(sd, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn degenerate_year_errors_name_the_year() {
        let f = field_from(vec![vec![2.0], vec![2.0]], vec![1999, 1999]);
        let err = fit_yearly_trend(&f, Subsample::Stride(1)).unwrap_err();
        assert!(err.to_string().contains("1999"), "{err}");

        let g = field_from(vec![vec![1.0], vec![2.0]], vec![1999, 2000]);
        let err = fit_yearly_trend(&g, Subsample::Stride(1)).unwrap_err();
        assert!(err.to_string().contains("at least 2"), "{err}");
    }

    #[test]
    fn monte_carlo_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (ns, days_per_year) = (100, 500);
        let truth = [(1985, 0.3, 1.2), (1986, -0.4, 0.8)];
        let mut rows = Vec::new();
        let mut years = Vec::new();
        for &(year, mu, sd) in &truth {
            for _ in 0..days_per_year {
                let row: Vec<f64> = (0..ns)
                    .map(|_| mu + sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                rows.push(row);
                years.push(year);
            }
        }
        let f = field_from(rows, years);
        let trend = fit_yearly_trend(&f, Subsample::Stride(1)).unwrap();
        for &(year, mu, sd) in &truth {
            let (m, s) = trend.get(year).unwrap();
            assert!((m - mu).abs() < 0.02, "year {year} mu {m}");
            assert!((s - sd).abs() < 0.02, "year {year} sd {s}");
        }
    }

    #[test]
    fn standardize_pins_mean_zero_sd_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..25).map(|_| rng.gen_range(-3.0..9.0)).collect())
            .collect();
        let years: Vec<i32> = (0..40).map(|t| 1985 + (t / 20)).collect();
        let f = field_from(rows, years);
        let trend = fit_yearly_trend(&f, Subsample::Stride(1)).unwrap();
        let z = standardize(&f, &trend).unwrap();
        for target_year in [1985, 1986] {
            let zr = &z;
            let vals: Vec<f64> = zr
                .days()
                .iter()
                .enumerate()
                .filter(|(_, d)| d.year == target_year)
                .flat_map(|(t, _)| (0..zr.n_sites()).filter_map(move |s| zr.value(s, t)))
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10, "year {target_year} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-10, "year {target_year} sd");
        }
    }

    #[test]
    fn standardize_known_points_and_inverse() {
        let f = field_from(vec![vec![1.0, 5.0], vec![3.0, 7.0]], vec![1985, 1985]);
        let trend = YearlyTrend::from_entries(vec![(1985, 4.0, 2.0)]).unwrap();
        let z = standardize(&f, &trend).unwrap();
        assert_relative_eq!(z.raw_value(0, 0), -1.5, epsilon = 1e-14);
        assert_relative_eq!(z.raw_value(1, 0), 0.5, epsilon = 1e-14);
        // value = mu -> 0; value = mu + sd -> 1
        let g = field_from(vec![vec![4.0, 6.0]], vec![1985]);
        let zg = standardize(&g, &trend).unwrap();
        assert_eq!(zg.raw_value(0, 0), 0.0);
        assert_eq!(zg.raw_value(1, 0), 1.0);
        // destandardize: 0 -> mu; 2.5 -> mu + 2.5 sd
        let h = field_from(vec![vec![0.0, 2.5]], vec![1985]);
        let back = destandardize(&h, &trend).unwrap();
        assert_eq!(back.raw_value(0, 0), 4.0);
        assert_eq!(back.raw_value(1, 0), 9.0);
        // round trip
        let rt = destandardize(&z, &trend).unwrap();
        for t in 0..f.n_days() {
            for s in 0..f.n_sites() {
                assert_relative_eq!(rt.raw_value(s, t), f.raw_value(s, t), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn missing_year_reported() {
        let f = field_from(vec![vec![1.0, 2.0]], vec![1990]);
        let trend = YearlyTrend::from_entries(vec![(1985, 0.0, 1.0)]).unwrap();
        let err = standardize(&f, &trend).unwrap_err();
        assert!(err.to_string().contains("1990"), "{err}");
    }

    #[test]
    fn stride_subsample_ignores_skipped_sites() {
        // Site 1 carries garbage; stride 2 keeps ids 0 and 2 only.
        let f = field_from(
            vec![vec![1.0, 500.0, 3.0], vec![3.0, -900.0, 5.0]],
            vec![1985, 1985],
        );
        let trend = fit_yearly_trend(&f, Subsample::Stride(2)).unwrap();
        let (mu, _) = trend.get(1985).unwrap();
        assert_relative_eq!(mu, 3.0, epsilon = 1e-12); // mean of 1,3,3,5
    }

    #[test]
    fn seeded_random_subsample_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let f = field_from(rows, vec![1985; 10]);
        let a = fit_yearly_trend(&f, Subsample::SeededRandom { every: 4, seed: 9 }).unwrap();
        let b = fit_yearly_trend(&f, Subsample::SeededRandom { every: 4, seed: 9 }).unwrap();
        assert_eq!(a, b);
        let c = fit_yearly_trend(&f, Subsample::SeededRandom { every: 4, seed: 10 }).unwrap();
        assert_ne!(a, c); // different seed, different subset
    }

    #[test]
    fn site_order_invariance_full_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let f = field_from(rows.clone(), vec![1985; 6]);
        // Rebuild with reversed site order (ids preserved per column).
        let rev_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().rev().cloned().collect())
            .collect();
        let mut g = field_from(rev_rows, vec![1985; 6]);
        // Renumber ids to match the reversal so the value<->id pairing is the same.
        let sites: Vec<Site> = g
            .sites()
            .iter()
            .enumerate()
            .map(|(i, s)| Site {
                id: (6 + 1 - 1 - i) as u32, // 6,5,...,0 over 7 sites
                ..s.clone()
            })
            .collect();
        let days = g.days().to_vec();
        let values: Vec<f64> = (0..g.n_days())
            .flat_map(|t| (0..g.n_sites()).map(move |s| (s, t)))
            .map(|(s, t)| g.raw_value(s, t))
            .collect();
        g = GriddedField::new(sites, days, values, vec![true; 42]).unwrap();
        let ta = fit_yearly_trend(&f, Subsample::Stride(1)).unwrap();
        let tb = fit_yearly_trend(&g, Subsample::Stride(1)).unwrap();
        let (ma, sa) = ta.get(1985).unwrap();
        let (mb, sb) = tb.get(1985).unwrap();
        assert_relative_eq!(ma, mb, epsilon = 1e-12);
        assert_relative_eq!(sa, sb, epsilon = 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trend = YearlyTrend::from_entries(vec![
            (1985, 0.25, 1.1),
            (1986, -0.5, 0.9),
            (1990, 1.5e-3, 2.0),
        ])
        .unwrap();
        let p = dir.path().join("trend.csv");
        trend.write_csv(&p).unwrap();
        let back = YearlyTrend::read_csv(&p).unwrap();
        assert_eq!(trend, back);
        // Bad rows carry location info.
        std::fs::write(&p, "year,beta_mu,beta_sigma\n1985,xx,1.0\n").unwrap();
        let err = YearlyTrend::read_csv(&p).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
    }
}
