//! Geographic coordinates and the fixed degree-to-kilometre conversion.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Kilometres per degree of latitude.
pub const KM_PER_DEG_LAT: f64 = 111.2;

/// Kilometres per degree of longitude: mean of the conversion factors at the
/// northern (96.3) and southern (108.8) limits of the study band.
pub const KM_PER_DEG_LON: f64 = 102.55;

/// A point on the globe in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat_deg) || !lat_deg.is_finite() {
            return Err(CoreError::invalid(format!(
                "latitude {lat_deg} outside [-90, 90]"
            )));
        }
        if !(-180.0..=180.0).contains(&lon_deg) || !lon_deg.is_finite() {
            return Err(CoreError::invalid(format!(
                "longitude {lon_deg} outside [-180, 180]"
            )));
        }
        Ok(GeoPoint { lat_deg, lon_deg })
    }
}

/// A point in the planar kilometre system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmPoint {
    pub x_km: f64,
    pub y_km: f64,
}

impl KmPoint {
    pub fn new(x_km: f64, y_km: f64) -> Self {
        KmPoint { x_km, y_km }
    }

    /// Euclidean distance in km.
    pub fn dist(&self, other: &KmPoint) -> f64 {
        let dx = self.x_km - other.x_km;
        let dy = self.y_km - other.y_km;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Linear degree scaling into the planar km system: latitude scales by
/// 111.2 km/degree, longitude by the fixed factor 102.55 km/degree.
pub fn to_km(p: GeoPoint) -> KmPoint {
    KmPoint {
        x_km: KM_PER_DEG_LON * p.lon_deg,
        y_km: KM_PER_DEG_LAT * p.lat_deg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn one_degree_latitude_is_111_2_km() {
        let p = to_km(GeoPoint::new(1.0, 0.0).unwrap());
        assert_relative_eq!(p.y_km, 111.2);
        assert_relative_eq!(p.x_km, 0.0);
    }

    #[test]
    fn origin_maps_to_origin() {
        let p = to_km(GeoPoint::new(0.0, 0.0).unwrap());
        assert_eq!((p.x_km, p.y_km), (0.0, 0.0));
    }

    #[test]
    fn one_degree_longitude_is_mean_endpoint_factor() {
        let p = to_km(GeoPoint::new(0.0, 1.0).unwrap());
        assert_relative_eq!(p.x_km, 102.55);
        assert_relative_eq!(p.y_km, 0.0);
    }

    #[test]
    fn ordering_preserved() {
        for (a, b) in [(3.0, 3.5), (-10.0, 2.0), (13.0, 29.9)] {
            let pa = to_km(GeoPoint::new(a, a).unwrap());
            let pb = to_km(GeoPoint::new(b, b).unwrap());
            assert!(pa.y_km < pb.y_km);
            assert!(pa.x_km < pb.x_km);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -181.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    /// Haversine distance on a sphere of radius 6371 km.
    fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
        let (la1, la2) = (a.lat_deg.to_radians(), b.lat_deg.to_radians());
        let dlat = la2 - la1;
        let dlon = (b.lon_deg - a.lon_deg).to_radians();
        let h = (dlat / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlon / 2.0).sin().powi(2);
        2.0 * 6371.0 * h.sqrt().asin()
    }

    fn pair_stream(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    #[test]
    fn km_distance_close_to_haversine_central_band() {
        // On the central latitudes the fixed longitude factor is within 3% of
        // the local cosine factor, so the pointwise bound holds for every
        // orientation of a <= 200 km pair.
        let mut next = pair_stream(0x9e3779b97f4a7c15);
        let mut checked = 0;
        while checked < 300 {
            let lat1 = 19.0 + 6.0 * next();
            let lon1 = 33.0 + 8.0 * next();
            let lat2 = lat1 + 2.0 * (next() - 0.5);
            let lon2 = lon1 + 2.0 * (next() - 0.5);
            let (a, b) = (
                GeoPoint::new(lat1, lon1).unwrap(),
                GeoPoint::new(lat2, lon2).unwrap(),
            );
            let hav = haversine_km(a, b);
            if hav > 200.0 || hav < 1.0 {
                continue;
            }
            let planar = to_km(a).dist(&to_km(b));
            assert!(
                (planar - hav).abs() / hav < 0.03,
                "planar {planar} vs haversine {hav} at lat {lat1}"
            );
            checked += 1;
        }
    }

    #[test]
    fn km_distance_close_to_haversine_full_band_rms() {
        // Over the full 13-30 N band the fixed factor misses the local cosine
        // by up to ~6% at the edges, so east-west pairs there exceed 3%
        // pointwise; across an ensemble of random pairs the RMS error stays
        // inside the bound.
        let mut next = pair_stream(0x51f15ead0f00d);
        let mut sq_sum = 0.0;
        let mut checked = 0;
        while checked < 500 {
            let lat1 = 13.0 + 17.0 * next();
            let lon1 = 33.0 + 8.0 * next();
            let lat2 = lat1 + 2.0 * (next() - 0.5);
            let lon2 = lon1 + 2.0 * (next() - 0.5);
            let (a, b) = (
                GeoPoint::new(lat1.clamp(-90.0, 90.0), lon1).unwrap(),
                GeoPoint::new(lat2.clamp(-90.0, 90.0), lon2).unwrap(),
            );
            let hav = haversine_km(a, b);
            if hav > 200.0 || hav < 1.0 {
                continue;
            }
            let planar = to_km(a).dist(&to_km(b));
            sq_sum += ((planar - hav) / hav).powi(2);
            checked += 1;
        }
        let rms = (sq_sum / checked as f64).sqrt();
        assert!(rms < 0.03, "RMS relative error {rms}");
    }
}
