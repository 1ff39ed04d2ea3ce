//! Space-time hot-spot prediction for gridded anomaly fields.
//!
//! The pipeline is two-step: a marginal transform (yearly location-scale
//! trend plus a spatially varying tail correction) maps anomalies to
//! standard-normal scale, then local Gaussian space-time models fitted in
//! sliding windows produce predictive draws for space-time minima.

pub mod bayes;
pub mod chi;
pub mod error;
pub mod fem;
pub mod gam;
pub mod geo;
pub mod gpd;
pub mod grid;
pub mod mesh;
pub mod optim;
pub mod predict;
pub mod priors;
pub mod score;
pub mod sim;
pub mod sparse;
pub mod spde;
pub mod special;
pub mod spline;
pub mod tail;
pub mod trend;

pub use error::{CoreError, Result};
pub use geo::{to_km, GeoPoint, KmPoint};
pub use grid::{DayIndex, GriddedField, Site};
