//! Pipeline configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use hotspot_core::gam::BasisConfig;
use hotspot_core::priors::{PcPriors, RhoBase};
use hotspot_core::sim::{GapSpec, SimConfig, TailSpec};
use hotspot_core::tail::TailVariant;

/// Model variant: raw anomalies, or one of the two marginal tail models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Raw anomalies straight into the window fits.
    None,
    /// Smooth-surface tail model.
    Gam,
    /// Nearest-neighbor pooled tail model.
    Nn,
}

impl Variant {
    pub fn parse(s: &str) -> anyhow::Result<Variant> {
        match s {
            "none" => Ok(Variant::None),
            "gam" => Ok(Variant::Gam),
            "nn" => Ok(Variant::Nn),
            other => bail!(hotspot_core::CoreError::invalid(format!(
                "unknown variant '{other}' (use none | gam | nn)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Gam => "gam",
            Variant::Nn => "nn",
        }
    }

    pub fn tail_variant(&self) -> Option<TailVariant> {
        match self {
            Variant::None => None,
            Variant::Gam => Some(TailVariant::Gam),
            Variant::Nn => Some(TailVariant::Nn),
        }
    }
}

fn d_seed() -> u64 {
    0
}
fn d_n_samples() -> usize {
    500
}
fn d_threshold_q() -> f64 {
    0.75
}
fn d_nn_k() -> usize {
    40
}
fn d_nn_floor() -> usize {
    30
}
fn d_subsample() -> usize {
    10
}
fn d_trend_stride() -> usize {
    1
}
fn d_mesh_n() -> usize {
    16
}
fn d_pad_km() -> f64 {
    50.0
}
fn d_sd_obs_median() -> f64 {
    0.1
}
fn d_range_median() -> f64 {
    500.0
}
fn d_sd_w_median() -> f64 {
    0.5
}
fn d_rho_band() -> f64 {
    0.85
}
fn d_rho_base() -> String {
    "strong".to_string()
}
fn d_intercept_precision() -> f64 {
    0.1
}
fn d_t_max() -> usize {
    9
}
fn d_n_axis() -> usize {
    2
}
fn d_max_iter() -> usize {
    400
}
fn d_fd_step() -> f64 {
    0.05
}
fn d_start_range() -> f64 {
    250.0
}
fn d_start_sd() -> f64 {
    0.5
}
fn d_start_rho() -> f64 {
    0.5
}
fn d_start_tau() -> f64 {
    100.0
}
fn d_radius_km() -> f64 {
    50.0
}
fn d_half_window() -> usize {
    3
}
fn d_a_values() -> Vec<f64> {
    hotspot_core::score::DEFAULT_A_VALUES.to_vec()
}
fn d_base_year() -> i32 {
    2001
}
fn d_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTailSection {
    pub u: f64,
    pub sigma_gp: f64,
    pub xi: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimGapSection {
    pub count: usize,
    pub radius_km: f64,
    pub duration_days: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n_x: usize,
    pub n_y: usize,
    pub spacing_km: f64,
    pub n_years: usize,
    pub days_per_year: usize,
    #[serde(default = "d_base_year")]
    pub base_year: i32,
    /// Per-year location coefficients; defaults to all zeros.
    #[serde(default)]
    pub beta_mu: Vec<f64>,
    /// Per-year scale coefficients; defaults to all ones.
    #[serde(default)]
    pub beta_sigma: Vec<f64>,
    pub range_km: f64,
    #[serde(default = "d_one")]
    pub sd_w: f64,
    pub rho: f64,
    pub tail: Option<SimTailSection>,
    pub gaps: Option<SimGapSection>,
    /// Simulation seed; defaults to the pipeline seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    pub tensor_k: usize,
    pub coast_k: usize,
    pub penalty_order: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    /// Marginal-model variant: none | gam | nn.
    pub variant: String,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_n_samples")]
    pub n_samples: usize,
    /// Worker threads for window fits; 0 = one per core.
    #[serde(default)]
    pub jobs: usize,
    /// Pre-gridded input field; if absent, `run` simulates from [sim].
    pub field_path: Option<PathBuf>,
    /// Complete validation field matching `field_path`.
    pub truth_path: Option<PathBuf>,
    /// Fixed threshold on the standardized scale; if absent, the pooled
    /// `threshold_q` quantile is used.
    pub threshold_u: Option<f64>,
    #[serde(default = "d_threshold_q")]
    pub threshold_q: f64,
    #[serde(default = "d_nn_k")]
    pub nn_k: usize,
    #[serde(default = "d_nn_floor")]
    pub nn_floor: usize,
    pub gam_basis: Option<BasisSection>,
    /// Keep 1-in-k excess records when fitting smooth tail surfaces.
    #[serde(default = "d_subsample")]
    pub gam_subsample_every: usize,
    /// Keep every k-th site when fitting the yearly trend.
    #[serde(default = "d_trend_stride")]
    pub trend_stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    #[serde(default = "d_mesh_n")]
    pub nx: usize,
    #[serde(default = "d_mesh_n")]
    pub ny: usize,
    /// Margin beyond the site bounding box, in km.
    #[serde(default = "d_pad_km")]
    pub pad_km: f64,
}

impl Default for MeshSection {
    fn default() -> Self {
        MeshSection { nx: d_mesh_n(), ny: d_mesh_n(), pad_km: d_pad_km() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorsSection {
    #[serde(default = "d_sd_obs_median")]
    pub sd_obs_median: f64,
    #[serde(default = "d_range_median")]
    pub range_median_km: f64,
    #[serde(default = "d_sd_w_median")]
    pub sd_w_median: f64,
    #[serde(default = "d_rho_band")]
    pub rho_band: f64,
    /// Base model for persistence: strong | independence.
    #[serde(default = "d_rho_base")]
    pub rho_base: String,
    #[serde(default = "d_intercept_precision")]
    pub intercept_precision: f64,
}

impl Default for PriorsSection {
    fn default() -> Self {
        PriorsSection {
            sd_obs_median: d_sd_obs_median(),
            range_median_km: d_range_median(),
            sd_w_median: d_sd_w_median(),
            rho_band: d_rho_band(),
            rho_base: d_rho_base(),
            intercept_precision: d_intercept_precision(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// Days per local window (targets plus buffer).
    #[serde(default = "d_t_max")]
    pub t_max: usize,
    /// Hyperparameter grid offsets per side per axis; 0 = plug-in mode.
    #[serde(default = "d_n_axis")]
    pub n_axis: usize,
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
    #[serde(default = "d_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub include_nugget: bool,
    #[serde(default = "d_start_range")]
    pub start_range_km: f64,
    #[serde(default = "d_start_sd")]
    pub start_sd: f64,
    #[serde(default = "d_start_rho")]
    pub start_rho: f64,
    #[serde(default = "d_start_tau")]
    pub start_tau: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            t_max: d_t_max(),
            n_axis: d_n_axis(),
            max_iter: d_max_iter(),
            fd_step: d_fd_step(),
            include_nugget: false,
            start_range_km: d_start_range(),
            start_sd: d_start_sd(),
            start_rho: d_start_rho(),
            start_tau: d_start_tau(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    /// Neighborhood radius for the cluster summary, in km.
    #[serde(default = "d_radius_km")]
    pub radius_km: f64,
    /// Days on each side of the target day.
    #[serde(default = "d_half_window")]
    pub half_window: usize,
    /// Weight thresholds for scoring; -inf = unweighted.
    #[serde(default = "d_a_values")]
    pub a_values: Vec<f64>,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            radius_km: d_radius_km(),
            half_window: d_half_window(),
            a_values: d_a_values(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    /// Day index (0-based position in the record) at the window center.
    pub center_day: usize,
    /// CSV of prediction targets for this window: header `site_id,day`.
    pub targets_csv: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub sim: Option<SimSection>,
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub mesh: MeshSection,
    #[serde(default)]
    pub priors: PriorsSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub windows: Vec<WindowSection>,
}

/// Command-line overrides applied on top of the TOML file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub n_samples: Option<usize>,
    pub jobs: Option<usize>,
    pub threshold_u: Option<f64>,
    pub nn_k: Option<usize>,
    pub a_values: Option<Vec<f64>>,
}

impl Config {
    pub fn load(path: &Path, over: &Overrides) -> anyhow::Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(v) = &over.variant {
            cfg.pipeline.variant = v.clone();
        }
        if let Some(s) = over.seed {
            cfg.pipeline.seed = s;
        }
        if let Some(n) = over.n_samples {
            cfg.pipeline.n_samples = n;
        }
        if let Some(j) = over.jobs {
            cfg.pipeline.jobs = j;
        }
        if let Some(u) = over.threshold_u {
            cfg.pipeline.threshold_u = Some(u);
        }
        if let Some(k) = over.nn_k {
            cfg.pipeline.nn_k = k;
        }
        if let Some(a) = &over.a_values {
            cfg.predict.a_values = a.clone();
        }
        cfg.validate()?;
        // Target CSVs are resolved relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for w in &mut cfg.windows {
            if w.targets_csv.is_relative() {
                w.targets_csv = base.join(&w.targets_csv);
            }
        }
        for p in [&mut cfg.pipeline.field_path, &mut cfg.pipeline.truth_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.variant()?;
        if self.pipeline.n_samples < 2 {
            bail!(hotspot_core::CoreError::invalid(format!(
                "n_samples must be >= 2, got {}",
                self.pipeline.n_samples
            )));
        }
        if self.fit.t_max < 2 * self.predict.half_window + 1 {
            bail!(hotspot_core::CoreError::invalid(format!(
                "window length {} too short for half_window {} (need >= {})",
                self.fit.t_max,
                self.predict.half_window,
                2 * self.predict.half_window + 1
            )));
        }
        if self.pipeline.threshold_u.is_none()
            && !(self.pipeline.threshold_q > 0.0 && self.pipeline.threshold_q < 1.0)
        {
            bail!(hotspot_core::CoreError::invalid(format!(
                "threshold quantile must be in (0,1), got {}",
                self.pipeline.threshold_q
            )));
        }
        if self.predict.a_values.is_empty() {
            bail!(hotspot_core::CoreError::invalid(
                "need at least one weight threshold".to_string()
            ));
        }
        self.rho_base()?;
        Ok(())
    }

    pub fn variant(&self) -> anyhow::Result<Variant> {
        Variant::parse(&self.pipeline.variant)
    }

    pub fn rho_base(&self) -> anyhow::Result<RhoBase> {
        match self.priors.rho_base.as_str() {
            "strong" | "strong-dependence" => Ok(RhoBase::StrongDependence),
            "independence" | "zero" => Ok(RhoBase::Independence),
            other => bail!(hotspot_core::CoreError::invalid(format!(
                "unknown persistence base model '{other}' (use strong | independence)"
            ))),
        }
    }

    pub fn priors(&self) -> anyhow::Result<PcPriors> {
        Ok(PcPriors::new(
            self.priors.sd_obs_median,
            self.priors.range_median_km,
            self.priors.sd_w_median,
            self.priors.rho_band,
            self.rho_base()?,
            self.priors.intercept_precision,
        )?)
    }

    pub fn basis(&self) -> BasisConfig {
        match &self.pipeline.gam_basis {
            Some(b) => BasisConfig {
                tensor_k: b.tensor_k,
                coast_k: b.coast_k,
                penalty_order: b.penalty_order,
            },
            None => BasisConfig::default(),
        }
    }

    pub fn sim_config(&self) -> anyhow::Result<SimConfig> {
        let s = self
            .sim
            .as_ref()
            .ok_or_else(|| hotspot_core::CoreError::invalid("config has no [sim] section".to_string()))?;
        let beta_mu = if s.beta_mu.is_empty() { vec![0.0; s.n_years] } else { s.beta_mu.clone() };
        let beta_sigma =
            if s.beta_sigma.is_empty() { vec![1.0; s.n_years] } else { s.beta_sigma.clone() };
        Ok(SimConfig {
            n_x: s.n_x,
            n_y: s.n_y,
            spacing_km: s.spacing_km,
            n_years: s.n_years,
            days_per_year: s.days_per_year,
            base_year: s.base_year,
            beta_mu,
            beta_sigma,
            range_km: s.range_km,
            sd_w: s.sd_w,
            rho: s.rho,
            tail: s.tail.as_ref().map(|t| {
                TailSpec::constant(t.u, t.sigma_gp, t.xi, t.p, s.n_x * s.n_y)
            }),
            gaps: s.gaps.as_ref().map(|g| GapSpec {
                count: g.count,
                radius_km: g.radius_km,
                duration_days: g.duration_days,
            }),
            seed: s.seed.unwrap_or(self.pipeline.seed),
        })
    }

    /// Effective-config digest: the TOML serialization after overrides.
    pub fn digest_text(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self).context("serializing effective config")?)
    }
}
