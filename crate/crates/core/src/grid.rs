//! Gridded anomaly fields: sites, day axis, dense values and the gap mask.
//!
//! Storage is time-major (`values[t*n_sites + s]`) so that day windows slice
//! contiguously. Fields are immutable after construction; `apply_gap` returns
//! a new field.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{CoreError, Result};
use crate::geo::{to_km, GeoPoint, KmPoint};

pub const BINARY_MAGIC: &[u8; 5] = b"GSTF1";

/// One grid pixel.
#[derive(Debug, Clone)]
pub struct Site {
    pub id: u32,
    pub geo: GeoPoint,
    pub km: KmPoint,
    pub dist_coast_m: f64,
}

/// Day axis entry: day index (1-based) and its calendar year.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayIndex {
    pub day: u32,
    pub year: i32,
}

/// Dense site x time anomaly array with an observation mask.
#[derive(Debug, Clone)]
pub struct GriddedField {
    sites: Vec<Site>,
    days: Vec<DayIndex>,
    /// Time-major: `values[t * n_sites + s]`.
    values: Vec<f64>,
    /// Same layout; `true` = observed.
    mask: Vec<bool>,
}

impl GriddedField {
    pub fn new(
        sites: Vec<Site>,
        days: Vec<DayIndex>,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = sites.len() * days.len();
        if values.len() != n || mask.len() != n {
            return Err(CoreError::dimension(format!(
                "expected {} values/mask entries for {} sites x {} days, got {}/{}",
                n,
                sites.len(),
                days.len(),
                values.len(),
                mask.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &sites {
            if !seen.insert(s.id) {
                return Err(CoreError::invalid(format!("duplicate site id {}", s.id)));
            }
        }
        for w in days.windows(2) {
            if w[1].day <= w[0].day {
                return Err(CoreError::invalid(format!(
                    "day indices not strictly increasing at {}",
                    w[1].day
                )));
            }
            if w[1].year < w[0].year {
                return Err(CoreError::invalid(format!(
                    "year decreases at day {}",
                    w[1].day
                )));
            }
        }
        for (i, (&v, &m)) in values.iter().zip(&mask).enumerate() {
            if m && !v.is_finite() {
                let (t, s) = (i / sites.len(), i % sites.len());
                return Err(CoreError::invalid(format!(
                    "non-finite observed value at site index {s}, day index {t}"
                )));
            }
        }
        Ok(GriddedField {
            sites,
            days,
            values,
            mask,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn days(&self) -> &[DayIndex] {
        &self.days
    }

    #[inline]
    fn idx(&self, site: usize, day: usize) -> usize {
        day * self.sites.len() + site
    }

    /// Value regardless of mask state.
    #[inline]
    pub fn raw_value(&self, site: usize, day: usize) -> f64 {
        self.values[self.idx(site, day)]
    }

    #[inline]
    pub fn is_observed(&self, site: usize, day: usize) -> bool {
        self.mask[self.idx(site, day)]
    }

    /// Observed value, or None when masked.
    #[inline]
    pub fn value(&self, site: usize, day: usize) -> Option<f64> {
        if self.is_observed(site, day) {
            Some(self.raw_value(site, day))
        } else {
            None
        }
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Iterator over observed (site, day, value) triples.
    pub fn observed(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.sites.len();
        self.mask.iter().enumerate().filter_map(move |(i, &m)| {
            if m {
                Some((i % n, i / n, self.values[i]))
            } else {
                None
            }
        })
    }

    /// Replaces the value array, keeping geometry and mask. Used by the
    /// marginal transforms, which are pointwise.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        GriddedField::new(
            self.sites.clone(),
            self.days.clone(),
            values,
            self.mask.clone(),
        )
    }

    /// Returns a field with the mask cleared on `region` ((site, day) pairs).
    /// Values are retained, so the original can serve as validation truth.
    pub fn apply_gap(&self, region: &[(usize, usize)]) -> Result<Self> {
        let mut mask = self.mask.clone();
        for &(s, t) in region {
            if s >= self.n_sites() || t >= self.n_days() {
                return Err(CoreError::invalid(format!(
                    "gap index (site {s}, day {t}) out of range {}x{}",
                    self.n_sites(),
                    self.n_days()
                )));
            }
            mask[t * self.sites.len() + s] = false;
        }
        Ok(GriddedField {
            sites: self.sites.clone(),
            days: self.days.clone(),
            values: self.values.clone(),
            mask,
        })
    }

    /// All (site, day) pairs inside the km-radius x day-window cylinder.
    pub fn cylinder(&self, center_site: usize, center_day: usize, radius_km: f64, half_days: usize) -> Vec<(usize, usize)> {
        let c = self.sites[center_site].km;
        let mut out = Vec::new();
        let lo = center_day.saturating_sub(half_days);
        let hi = (center_day + half_days).min(self.n_days() - 1);
        for (s, site) in self.sites.iter().enumerate() {
            if site.km.dist(&c) <= radius_km {
                for t in lo..=hi {
                    out.push((s, t));
                }
            }
        }
        out
    }

    // ---------------------------------------------------------------
    // CSV format: header `site_id,lat,lon,dist_coast_m,d<t1>,d<t2>,...`
    // one row per site; missing values written as `NA`. The day axis
    // (day -> year) travels in a separate two-column days file.
    // ---------------------------------------------------------------

    pub fn write_csv(&self, values_path: &Path, days_path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(values_path)?);
        write!(w, "site_id,lat,lon,dist_coast_m")?;
        for d in &self.days {
            write!(w, ",d{}", d.day)?;
        }
        writeln!(w)?;
        for (s, site) in self.sites.iter().enumerate() {
            write!(
                w,
                "{},{},{},{}",
                site.id, site.geo.lat_deg, site.geo.lon_deg, site.dist_coast_m
            )?;
            for t in 0..self.n_days() {
                match self.value(s, t) {
                    Some(v) => write!(w, ",{v}")?,
                    None => write!(w, ",NA")?,
                }
            }
            writeln!(w)?;
        }
        w.flush()?;

        let mut w = BufWriter::new(std::fs::File::create(days_path)?);
        writeln!(w, "day,year")?;
        for d in &self.days {
            writeln!(w, "{},{}", d.day, d.year)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(values_path: &Path, days_path: &Path) -> Result<Self> {
        let days = read_days_csv(days_path)?;

        let f = std::fs::File::open(values_path)?;
        let mut lines = BufReader::new(f).lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => l?,
            None => return Err(CoreError::parse(values_path, None, "no data rows")),
        };
        let cols: Vec<&str> = header.trim_end().split(',').collect();
        if cols.len() < 4 || cols[..4] != ["site_id", "lat", "lon", "dist_coast_m"] {
            return Err(CoreError::parse(
                values_path,
                Some(1),
                "expected header site_id,lat,lon,dist_coast_m,d<t>,...",
            ));
        }
        let day_cols = &cols[4..];
        if day_cols.len() != days.len() {
            return Err(CoreError::dimension(format!(
                "{} day columns but {} entries in days file",
                day_cols.len(),
                days.len()
            )));
        }
        for (j, (c, d)) in day_cols.iter().zip(&days).enumerate() {
            let expect = format!("d{}", d.day);
            if *c != expect {
                return Err(CoreError::parse(
                    values_path,
                    Some(1),
                    format!("day column {} is {c:?}, expected {expect:?}", j + 5),
                ));
            }
        }

        let mut sites = Vec::new();
        let mut by_site: Vec<(Vec<f64>, Vec<bool>)> = Vec::new();
        for (lineno, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.trim_end().split(',').collect();
            if parts.len() != 4 + days.len() {
                return Err(CoreError::parse(
                    values_path,
                    Some(lineno + 1),
                    format!("expected {} fields, got {}", 4 + days.len(), parts.len()),
                ));
            }
            let id: u32 = parts[0].parse().map_err(|_| {
                CoreError::parse(values_path, Some(lineno + 1), "bad site_id")
            })?;
            let lat: f64 = parts[1].parse().map_err(|_| {
                CoreError::parse(values_path, Some(lineno + 1), "bad lat")
            })?;
            let lon: f64 = parts[2].parse().map_err(|_| {
                CoreError::parse(values_path, Some(lineno + 1), "bad lon")
            })?;
            let dist: f64 = parts[3].parse().map_err(|_| {
                CoreError::parse(values_path, Some(lineno + 1), "bad dist_coast_m")
            })?;
            let geo = GeoPoint::new(lat, lon)?;
            sites.push(Site {
                id,
                geo,
                km: to_km(geo),
                dist_coast_m: dist,
            });
            let mut vals = Vec::with_capacity(days.len());
            let mut mask = Vec::with_capacity(days.len());
            for (j, tok) in parts[4..].iter().enumerate() {
                if *tok == "NA" {
                    vals.push(f64::NAN);
                    mask.push(false);
                } else {
                    let v: f64 = tok.parse().map_err(|_| {
                        CoreError::parse(
                            values_path,
                            Some(lineno + 1),
                            format!("bad value in day column {}", j + 5),
                        )
                    })?;
                    if !v.is_finite() {
                        return Err(CoreError::parse(
                            values_path,
                            Some(lineno + 1),
                            format!("non-finite observed value in day column {}", j + 5),
                        ));
                    }
                    vals.push(v);
                    mask.push(true);
                }
            }
            by_site.push((vals, mask));
        }
        if sites.is_empty() {
            return Err(CoreError::parse(values_path, None, "no data rows"));
        }

        // Transpose site-major rows into the time-major layout.
        let (ns, nt) = (sites.len(), days.len());
        let mut values = vec![f64::NAN; ns * nt];
        let mut mask = vec![false; ns * nt];
        for (s, (vals, ms)) in by_site.iter().enumerate() {
            for t in 0..nt {
                values[t * ns + s] = vals[t];
                mask[t * ns + s] = ms[t];
            }
        }
        GriddedField::new(sites, days, values, mask)
    }

    // ---------------------------------------------------------------
    // Binary format: magic `GSTF1`, u32 n_sites, u32 n_times, site table,
    // day table, f64 payload row-major (row = site), byte mask appended.
    // ---------------------------------------------------------------

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(BINARY_MAGIC)?;
        w.write_u32::<LittleEndian>(self.n_sites() as u32)?;
        w.write_u32::<LittleEndian>(self.n_days() as u32)?;
        for s in &self.sites {
            w.write_u32::<LittleEndian>(s.id)?;
            w.write_f64::<LittleEndian>(s.geo.lat_deg)?;
            w.write_f64::<LittleEndian>(s.geo.lon_deg)?;
            w.write_f64::<LittleEndian>(s.dist_coast_m)?;
        }
        for d in &self.days {
            w.write_u32::<LittleEndian>(d.day)?;
            w.write_i32::<LittleEndian>(d.year)?;
        }
        for s in 0..self.n_sites() {
            for t in 0..self.n_days() {
                let v = if self.is_observed(s, t) {
                    self.raw_value(s, t)
                } else {
                    f64::NAN
                };
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        for s in 0..self.n_sites() {
            for t in 0..self.n_days() {
                w.write_u8(self.is_observed(s, t) as u8)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| CoreError::parse(path, None, "truncated header"))?;
        if &magic != BINARY_MAGIC {
            return Err(CoreError::parse(path, None, "bad magic, not a GSTF1 file"));
        }
        let ns = r.read_u32::<LittleEndian>()? as usize;
        let nt = r.read_u32::<LittleEndian>()? as usize;
        let mut sites = Vec::with_capacity(ns);
        for _ in 0..ns {
            let id = r.read_u32::<LittleEndian>()?;
            let lat = r.read_f64::<LittleEndian>()?;
            let lon = r.read_f64::<LittleEndian>()?;
            let dist = r.read_f64::<LittleEndian>()?;
            let geo = GeoPoint::new(lat, lon)?;
            sites.push(Site {
                id,
                geo,
                km: to_km(geo),
                dist_coast_m: dist,
            });
        }
        let mut days = Vec::with_capacity(nt);
        for _ in 0..nt {
            let day = r.read_u32::<LittleEndian>()?;
            let year = r.read_i32::<LittleEndian>()?;
            days.push(DayIndex { day, year });
        }
        let mut values = vec![f64::NAN; ns * nt];
        for s in 0..ns {
            for t in 0..nt {
                values[t * ns + s] = r.read_f64::<LittleEndian>()?;
            }
        }
        let mut mask = vec![false; ns * nt];
        for s in 0..ns {
            for t in 0..nt {
                mask[t * ns + s] = r.read_u8()? != 0;
            }
        }
        // NaN payload under an observed mask bit is a corrupt file; IEEE NaN
        // is the missing-value encoding.
        for i in 0..ns * nt {
            if mask[i] && !values[i].is_finite() {
                mask[i] = false;
            }
        }
        GriddedField::new(sites, days, values, mask)
    }
}

pub fn read_days_csv(path: &Path) -> Result<Vec<DayIndex>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line == "day,year") {
            continue;
        }
        let mut parts = line.split(',');
        let day = parts
            .next()
            .and_then(|x| x.parse::<u32>().ok())
            .ok_or_else(|| CoreError::parse(path, Some(lineno + 1), "bad day"))?;
        let year = parts
            .next()
            .and_then(|x| x.parse::<i32>().ok())
            .ok_or_else(|| CoreError::parse(path, Some(lineno + 1), "bad year"))?;
        out.push(DayIndex { day, year });
    }
    if out.is_empty() {
        return Err(CoreError::parse(path, None, "no data rows"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    pub(crate) fn toy_field(ns: usize, nt: usize) -> GriddedField {
        let sites = (0..ns)
            .map(|i| {
                let geo = GeoPoint::new(15.0 + 0.2 * i as f64, 38.0 + 0.1 * i as f64).unwrap();
                Site {
                    id: i as u32,
                    geo,
                    km: to_km(geo),
                    dist_coast_m: 1000.0 * i as f64,
                }
            })
            .collect();
        let days = (0..nt)
            .map(|t| DayIndex {
                day: t as u32 + 1,
                year: 1985 + (t / 365) as i32,
            })
            .collect();
        let values = (0..ns * nt).map(|i| i as f64 * 0.25 - 1.0).collect();
        let mask = vec![true; ns * nt];
        GriddedField::new(sites, days, values, mask).unwrap()
    }

    #[test]
    fn csv_roundtrip_with_na() {
        let dir = tempdir().unwrap();
        let f = toy_field(2, 3).apply_gap(&[(1, 0)]).unwrap();
        let vp = dir.path().join("field.csv");
        let dp = dir.path().join("days.csv");
        f.write_csv(&vp, &dp).unwrap();
        let g = GriddedField::read_csv(&vp, &dp).unwrap();
        assert_eq!(g.n_sites(), 2);
        assert_eq!(g.n_days(), 3);
        let masked: Vec<bool> = (0..3)
            .flat_map(|t| (0..2).map(move |s| (s, t)))
            .map(|(s, t)| !g.is_observed(s, t))
            .collect();
        assert_eq!(masked.iter().filter(|&&m| m).count(), 1);
        assert!(!g.is_observed(1, 0));
        for t in 0..3 {
            for s in 0..2 {
                if g.is_observed(s, t) {
                    assert_eq!(g.raw_value(s, t), f.raw_value(s, t));
                }
            }
        }
    }

    #[test]
    fn empty_csv_is_rejected() {
        let dir = tempdir().unwrap();
        let vp = dir.path().join("empty.csv");
        let dp = dir.path().join("days.csv");
        std::fs::write(&vp, "").unwrap();
        std::fs::write(&dp, "day,year\n1,1985\n").unwrap();
        let err = GriddedField::read_csv(&vp, &dp).unwrap_err();
        assert!(err.to_string().contains("no data rows"), "{err}");
        // Header only, no site rows.
        std::fs::write(&vp, "site_id,lat,lon,dist_coast_m,d1\n").unwrap();
        let err = GriddedField::read_csv(&vp, &dp).unwrap_err();
        assert!(err.to_string().contains("no data rows"), "{err}");
    }

    #[test]
    fn binary_roundtrip_identical() {
        let dir = tempdir().unwrap();
        let f = toy_field(4, 5).apply_gap(&[(0, 0), (3, 4)]).unwrap();
        let p = dir.path().join("field.gstf");
        f.write_binary(&p).unwrap();
        let g = GriddedField::read_binary(&p).unwrap();
        assert_eq!(g.n_sites(), f.n_sites());
        assert_eq!(g.n_days(), f.n_days());
        for t in 0..f.n_days() {
            for s in 0..f.n_sites() {
                assert_eq!(g.is_observed(s, t), f.is_observed(s, t));
                if g.is_observed(s, t) {
                    assert_eq!(g.raw_value(s, t), f.raw_value(s, t));
                }
            }
        }
        assert_eq!(g.days(), f.days());
    }

    #[test]
    fn bad_header_and_dimension_mismatch_report_location() {
        let dir = tempdir().unwrap();
        let vp = dir.path().join("bad.csv");
        let dp = dir.path().join("days.csv");
        std::fs::write(&dp, "day,year\n1,1985\n2,1985\n").unwrap();
        std::fs::write(&vp, "wrong,header\n").unwrap();
        assert!(GriddedField::read_csv(&vp, &dp).is_err());
        // Row with too few fields names its line.
        std::fs::write(
            &vp,
            "site_id,lat,lon,dist_coast_m,d1,d2\n0,15.0,38.0,100.0,1.5\n",
        )
        .unwrap();
        let err = GriddedField::read_csv(&vp, &dp).unwrap_err().to_string();
        assert!(err.contains(":2"), "{err}");
        // Non-finite observed value rejected.
        std::fs::write(
            &vp,
            "site_id,lat,lon,dist_coast_m,d1,d2\n0,15.0,38.0,100.0,inf,0.0\n",
        )
        .unwrap();
        assert!(GriddedField::read_csv(&vp, &dp).is_err());
    }

    #[test]
    fn apply_gap_empty_and_full() {
        let f = toy_field(3, 4);
        let same = f.apply_gap(&[]).unwrap();
        assert_eq!(same.observed_count(), 12);
        let all: Vec<(usize, usize)> = (0..3).flat_map(|s| (0..4).map(move |t| (s, t))).collect();
        let gone = f.apply_gap(&all).unwrap();
        assert_eq!(gone.observed_count(), 0);
        // Values retained under the mask.
        assert_eq!(gone.raw_value(2, 3), f.raw_value(2, 3));
    }

    #[test]
    fn apply_gap_out_of_range() {
        let f = toy_field(3, 4);
        assert!(f.apply_gap(&[(3, 0)]).is_err());
        assert!(f.apply_gap(&[(0, 4)]).is_err());
    }

    #[test]
    fn gap_mask_is_conjunction() {
        // mask(apply_gap(f, R)) = mask(f) AND NOT R, pointwise.
        let f = toy_field(4, 3).apply_gap(&[(1, 1)]).unwrap();
        let region = [(1, 1), (2, 0)];
        let g = f.apply_gap(&region).unwrap();
        for s in 0..4 {
            for t in 0..3 {
                let in_region = region.contains(&(s, t));
                assert_eq!(g.is_observed(s, t), f.is_observed(s, t) && !in_region);
            }
        }
    }

    #[test]
    fn disc_gap_matches_brute_force_count() {
        let f = toy_field(30, 20);
        let center = f.sites()[12].km;
        let (radius, d0, d1) = (50.0, 5usize, 11usize);
        let region: Vec<(usize, usize)> = (0..f.n_sites())
            .filter(|&s| f.sites()[s].km.dist(&center) <= radius)
            .flat_map(|s| (d0..=d1).map(move |t| (s, t)))
            .collect();
        let g = f.apply_gap(&region).unwrap();
        // Independent brute-force membership scan.
        let mut expect = 0;
        for s in 0..f.n_sites() {
            for t in 0..f.n_days() {
                let dist_ok = f.sites()[s].km.dist(&center) <= radius;
                let day_ok = (d0..=d1).contains(&t);
                if dist_ok && day_ok {
                    expect += 1;
                }
            }
        }
        assert!(expect > 0);
        assert_eq!(f.observed_count() - g.observed_count(), expect);
    }

    #[test]
    fn duplicate_site_ids_rejected() {
        let mut f = toy_field(2, 2);
        let sites = f.sites().to_vec();
        let mut dup = sites.clone();
        dup[1].id = dup[0].id;
        let days = f.days().to_vec();
        let err = GriddedField::new(dup, days, vec![0.0; 4], vec![true; 4]);
        assert!(err.is_err());
        // keep f alive for type inference clarity
        f = toy_field(2, 2);
        assert_eq!(f.n_sites(), 2);
    }
}
