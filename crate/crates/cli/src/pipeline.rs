//! Pipeline stages and orchestration.
//!
//! Every stage is a pure function of (input artifacts, effective config,
//! seed). `run` wires the stages together in a work directory and skips any
//! stage whose manifest — a digest of those three things plus the recorded
//! outputs — is still current.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use hotspot_core::bayes::{
    fit_window, sample_latent, target_rows, FitSettings, FitSummary, Hyper, WindowData,
};
use hotspot_core::chi::{chi_by_lag, write_chi_csv, DEFAULT_CHI_LEVELS, DEFAULT_N_BOOT};
use hotspot_core::gam::{fit_tail_gam, FitOptions};
use hotspot_core::grid::GriddedField;
use hotspot_core::mesh::SpdeMesh;
use hotspot_core::predict::{
    cluster_min_indexed, neighborhood, write_prediction_quantiles, write_prediction_samples,
    Neighborhood, PredictiveCdf,
};
use hotspot_core::score::{score_batch, write_scores};
use hotspot_core::sim::{known_summary_oracle, simulate_field};
use hotspot_core::tail::{degaussianize_value, gaussianize, nn_fit, TailModel};
use hotspot_core::trend::{fit_yearly_trend, standardize, Subsample, YearlyTrend};
use hotspot_core::CoreError;

use crate::config::{Config, Variant};

const SAMPLES_MAGIC: &[u8; 5] = b"HSMP1";

/// Installs the bounded worker pool; 0 keeps one worker per core.
pub fn init_pool(jobs: usize) {
    if jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let mut f =
        File::open(path).with_context(|| format!("hashing artifact {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn sha256_text(text: &str) -> String {
    format!("{:x}", Sha256::new_with_prefix(text.as_bytes()).finalize())
}

#[derive(serde::Serialize, serde::Deserialize, PartialEq)]
struct StageManifest {
    stage: String,
    config_sha256: String,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
}

fn manifest_path(work: &Path, stage: &str) -> PathBuf {
    work.join("manifests").join(format!("{stage}.json"))
}

/// Runs one stage unless its manifest proves the outputs are current.
/// Returns whether the stage body actually executed.
fn run_stage(
    work: &Path,
    stage: &str,
    config_hash: &str,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    force: bool,
    body: impl FnOnce() -> anyhow::Result<()>,
) -> anyhow::Result<bool> {
    let mpath = manifest_path(work, stage);
    let want_inputs: Vec<(String, String)> = inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect::<anyhow::Result<_>>()
        .with_context(|| format!("stage {stage}: missing upstream artifact"))?;
    if !force && mpath.exists() {
        let text = std::fs::read_to_string(&mpath)?;
        if let Ok(m) = serde_json::from_str::<StageManifest>(&text) {
            let outputs_current = m.outputs.iter().all(|(p, h)| {
                let p = Path::new(p);
                p.exists() && sha256_file(p).map(|got| got == *h).unwrap_or(false)
            });
            if m.config_sha256 == config_hash && m.inputs == want_inputs && outputs_current {
                log::info!("stage {stage}: up to date, skipping");
                return Ok(false);
            }
        }
    }
    let t0 = Instant::now();
    body().with_context(|| format!("stage {stage}"))?;
    let out_hashes: Vec<(String, String)> = outputs
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect::<anyhow::Result<_>>()
        .with_context(|| format!("stage {stage}: declared output missing"))?;
    let manifest = StageManifest {
        stage: stage.to_string(),
        config_sha256: config_hash.to_string(),
        inputs: want_inputs,
        outputs: out_hashes,
    };
    std::fs::create_dir_all(mpath.parent().unwrap())?;
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)?;
    log::info!("stage {stage}: done in {:.2}s", t0.elapsed().as_secs_f64());
    Ok(true)
}

// ---------------------------------------------------------------------------
// Individual stages
// ---------------------------------------------------------------------------

pub fn stage_simulate(cfg: &Config, out_field: &Path, out_truth: &Path) -> anyhow::Result<()> {
    let sim = cfg.sim_config()?;
    let (gappy, truth) = simulate_field(&sim)?;
    gappy.write_binary(out_field)?;
    truth.write_binary(out_truth)?;
    log::info!(
        "simulated {} sites x {} days ({} observed after gaps)",
        truth.n_sites(),
        truth.n_days(),
        gappy.observed_count()
    );
    Ok(())
}

pub fn stage_fit_trend(cfg: &Config, field_path: &Path, out: &Path) -> anyhow::Result<()> {
    let field = GriddedField::read_binary(field_path)?;
    let trend = fit_yearly_trend(&field, Subsample::Stride(cfg.pipeline.trend_stride))?;
    trend.write_csv(out)?;
    log::info!("fitted yearly trend over {} years", trend.entries().len());
    Ok(())
}

/// Pooled empirical quantile of the standardized observations.
fn pooled_quantile(field: &GriddedField, q: f64) -> anyhow::Result<f64> {
    let mut vals: Vec<f64> = field.observed().map(|(_, _, v)| v).collect();
    if vals.is_empty() {
        bail!(CoreError::invalid("no observed values".to_string()));
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((q * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
    Ok(vals[k - 1])
}

pub fn stage_fit_tail(
    cfg: &Config,
    field_path: &Path,
    trend_path: &Path,
    out_params: &Path,
    out_sidecar: &Path,
) -> anyhow::Result<()> {
    let variant = cfg.variant()?;
    if variant == Variant::None {
        bail!(CoreError::invalid(
            "variant none has no tail model; skip this stage".to_string()
        ));
    }
    let field = GriddedField::read_binary(field_path)?;
    let trend = YearlyTrend::read_csv(trend_path)?;
    let std_field = standardize(&field, &trend)?;
    let u = match cfg.pipeline.threshold_u {
        Some(u) => u,
        None => pooled_quantile(&std_field, cfg.pipeline.threshold_q)?,
    };
    log::info!("tail threshold u = {u:.4} on the standardized scale");
    let model = match variant {
        Variant::Nn => nn_fit(&std_field, u, cfg.pipeline.nn_k, cfg.pipeline.nn_floor)?,
        Variant::Gam => {
            let opts = FitOptions {
                subsample_every: cfg.pipeline.gam_subsample_every,
                seed: cfg.pipeline.seed,
                ..FitOptions::default()
            };
            fit_tail_gam(&std_field, u, &cfg.basis(), &opts)?
        }
        Variant::None => unreachable!(),
    };
    model.write_csv(out_params, out_sidecar)?;
    log::info!("tail model ({}) for {} sites", model.variant.as_str(), model.sites().len());
    Ok(())
}

pub fn stage_gaussianize(
    cfg: &Config,
    field_path: &Path,
    trend_path: &Path,
    tail_params: &Path,
    tail_sidecar: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    let field = GriddedField::read_binary(field_path)?;
    let trend = YearlyTrend::read_csv(trend_path)?;
    let model = TailModel::read_csv(tail_params, tail_sidecar)?;
    let std_field = standardize(&field, &trend)?;
    let z = gaussianize(&std_field, &model)?;
    z.write_binary(out)?;
    let _ = cfg;
    log::info!("standard-scale field written ({} observed values)", z.observed_count());
    Ok(())
}

/// Builds the inference mesh over the site bounding box plus padding.
pub fn build_mesh(cfg: &Config, field: &GriddedField) -> anyhow::Result<SpdeMesh> {
    let xs: Vec<f64> = field.sites().iter().map(|s| s.km.x_km).collect();
    let ys: Vec<f64> = field.sites().iter().map(|s| s.km.y_km).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| {
        (a.0.min(v), a.1.max(v))
    });
    let (y0, y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| {
        (a.0.min(v), a.1.max(v))
    });
    let pad = cfg.mesh.pad_km;
    Ok(SpdeMesh::regular(
        cfg.mesh.nx,
        cfg.mesh.ny,
        x0 - pad,
        y0 - pad,
        (x1 - x0) + 2.0 * pad,
        (y1 - y0) + 2.0 * pad,
    )?)
}

/// Reads a targets CSV (`site_id,day`, day = 0-based record position).
pub fn read_targets(path: &Path, field: &GriddedField) -> anyhow::Result<Vec<(usize, usize)>> {
    let f = File::open(path)
        .map_err(|e| CoreError::parse(path, None, format!("cannot open targets: {e}")))?;
    let mut out = Vec::new();
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if ln == 0 {
            if line.trim() != "site_id,day" {
                bail!(CoreError::parse(path, Some(1), "expected header 'site_id,day'"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let parse = |tok: Option<&str>| -> anyhow::Result<usize> {
            Ok(tok
                .ok_or_else(|| CoreError::parse(path, Some(ln + 1), "missing column"))?
                .trim()
                .parse::<usize>()
                .map_err(|e| CoreError::parse(path, Some(ln + 1), format!("bad integer: {e}")))?)
        };
        let site = parse(it.next())?;
        let day = parse(it.next())?;
        if site >= field.n_sites() || day >= field.n_days() {
            bail!(CoreError::invalid(format!(
                "target (site {site}, day {day}) outside {} sites x {} days",
                field.n_sites(),
                field.n_days()
            )));
        }
        out.push((site, day));
    }
    if out.is_empty() {
        bail!(CoreError::invalid(format!("no targets in {}", path.display())));
    }
    Ok(out)
}

/// First window day for a centered window clipped to the record.
fn window_start(center_day: usize, t_max: usize, n_days: usize) -> anyhow::Result<usize> {
    if t_max > n_days {
        bail!(CoreError::invalid(format!(
            "window length {t_max} exceeds record of {n_days} days"
        )));
    }
    if center_day >= n_days {
        bail!(CoreError::invalid(format!(
            "window center day {center_day} outside record of {n_days} days"
        )));
    }
    Ok(center_day.saturating_sub((t_max - 1) / 2).min(n_days - t_max))
}

/// Per-window artifact: the deduplicated member pixels (in insertion order)
/// and their latent posterior draws.
pub struct WindowSamples {
    pub center_day: usize,
    pub start_day: usize,
    pub members: Vec<(usize, usize)>,
    /// members.len() x n_samples.
    pub draws: DMatrix<f64>,
}

impl WindowSamples {
    pub fn row_of(&self) -> HashMap<(usize, usize), usize> {
        self.members.iter().enumerate().map(|(r, &m)| (m, r)).collect()
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SAMPLES_MAGIC)?;
        w.write_u64::<LittleEndian>(self.center_day as u64)?;
        w.write_u64::<LittleEndian>(self.start_day as u64)?;
        w.write_u64::<LittleEndian>(self.members.len() as u64)?;
        w.write_u64::<LittleEndian>(self.draws.ncols() as u64)?;
        for &(s, d) in &self.members {
            w.write_u64::<LittleEndian>(s as u64)?;
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for r in 0..self.members.len() {
            for c in 0..self.draws.ncols() {
                w.write_f64::<LittleEndian>(self.draws[(r, c)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> anyhow::Result<WindowSamples> {
        let mut r = BufReader::new(
            File::open(path).with_context(|| format!("missing window samples {}", path.display()))?,
        );
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != SAMPLES_MAGIC {
            bail!(CoreError::parse(path, None, "bad magic for window samples"));
        }
        let center_day = r.read_u64::<LittleEndian>()? as usize;
        let start_day = r.read_u64::<LittleEndian>()? as usize;
        let n_members = r.read_u64::<LittleEndian>()? as usize;
        let n_samples = r.read_u64::<LittleEndian>()? as usize;
        let mut members = Vec::with_capacity(n_members);
        for _ in 0..n_members {
            let s = r.read_u64::<LittleEndian>()? as usize;
            let d = r.read_u64::<LittleEndian>()? as usize;
            members.push((s, d));
        }
        let mut draws = DMatrix::<f64>::zeros(n_members, n_samples);
        for i in 0..n_members {
            for c in 0..n_samples {
                draws[(i, c)] = r.read_f64::<LittleEndian>()?;
            }
        }
        Ok(WindowSamples { center_day, start_day, members, draws })
    }
}

pub fn samples_file(dir: &Path, window_id: usize) -> PathBuf {
    dir.join(format!("w{window_id:04}.bin"))
}

/// Member pixels of every target of one window, deduplicated in first-seen
/// order, with each member checked against the window day span.
fn window_members(
    field: &GriddedField,
    cfg: &Config,
    targets: &[(usize, usize)],
    start_day: usize,
    t_max: usize,
) -> anyhow::Result<(Vec<Neighborhood>, Vec<(usize, usize)>)> {
    let mut members = Vec::new();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut nbs = Vec::with_capacity(targets.len());
    for &(site, day) in targets {
        let nb = neighborhood(field, site, day, cfg.predict.radius_km, cfg.predict.half_window)?;
        for &m in &nb.members {
            if m.1 < start_day || m.1 >= start_day + t_max {
                bail!(CoreError::invalid(format!(
                    "target (site {site}, day {day}) reaches day {} outside window days {start_day}..{}",
                    m.1,
                    start_day + t_max
                )));
            }
            if !seen.contains_key(&m) {
                seen.insert(m, members.len());
                members.push(m);
            }
        }
        nbs.push(nb);
    }
    Ok((nbs, members))
}

pub fn stage_fit_windows(cfg: &Config, field_path: &Path, out_dir: &Path) -> anyhow::Result<()> {
    if cfg.windows.is_empty() {
        bail!(CoreError::invalid("config declares no windows".to_string()));
    }
    let field = GriddedField::read_binary(field_path)?;
    let mesh = build_mesh(cfg, &field)?;
    let priors = cfg.priors()?;
    let settings = FitSettings {
        n_axis: cfg.fit.n_axis,
        max_iter: cfg.fit.max_iter,
        fd_step: cfg.fit.fd_step,
        include_nugget: cfg.fit.include_nugget,
    };
    let start_hyper =
        Hyper::new(cfg.fit.start_range_km, cfg.fit.start_sd, cfg.fit.start_rho, cfg.fit.start_tau)?;
    std::fs::create_dir_all(out_dir)?;
    let t_max = cfg.fit.t_max;

    let mut summaries: Vec<FitSummary> = cfg
        .windows
        .par_iter()
        .enumerate()
        .map(|(idx, w)| -> anyhow::Result<FitSummary> {
            let t0 = Instant::now();
            let start_day = window_start(w.center_day, t_max, field.n_days())?;
            let targets = read_targets(&w.targets_csv, &field)?;
            let (_, members) = window_members(&field, cfg, &targets, start_day, t_max)?;
            let data = WindowData::from_field(&field, &mesh, start_day, t_max)?;
            let fit = fit_window(&data, &mesh, &priors, &start_hyper, &settings, w.center_day as u32)
                .with_context(|| format!("window {idx} (center day {})", w.center_day))?;
            let rows: Vec<_> = members
                .iter()
                .map(|&(s, d)| (field.sites()[s].km, d - start_day))
                .collect();
            let proj = target_rows(&mesh, &rows, t_max)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.pipeline.seed);
            rng.set_stream(idx as u64 + 1);
            let draws = sample_latent(&fit, &proj, cfg.pipeline.n_samples, &mut rng)?;
            let ws = WindowSamples { center_day: w.center_day, start_day, members, draws };
            ws.write(&samples_file(out_dir, idx))?;
            let summary = FitSummary::from_fit(idx, &fit);
            log::info!(
                "window {idx}: center_day={} n_obs={} wall={:.2}s mode range_km={:.1} sd={:.3} rho={:.3} tau_z={:.1} converged={}",
                w.center_day,
                data.n_obs(),
                t0.elapsed().as_secs_f64(),
                summary.range_km,
                summary.sd,
                summary.rho,
                summary.tau_z,
                summary.converged
            );
            Ok(summary)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    summaries.sort_by_key(|s| s.window_id);
    write_fit_summaries_checked(&summaries, &out_dir.join("summaries.csv"))?;
    Ok(())
}

fn write_fit_summaries_checked(rows: &[FitSummary], path: &Path) -> anyhow::Result<()> {
    hotspot_core::bayes::write_fit_summaries(rows, path)?;
    Ok(())
}

/// Back-transforms window draws to the anomaly scale in place.
fn backtransform_draws(
    ws: &mut WindowSamples,
    field: &GriddedField,
    model: &TailModel,
    trend: &YearlyTrend,
) -> anyhow::Result<()> {
    for (r, &(site, day)) in ws.members.iter().enumerate() {
        let year = field.days()[day].year;
        let (mu, sd) = trend.get(year).ok_or_else(|| {
            CoreError::invalid(format!("trend has no entry for year {year}"))
        })?;
        let st = model.site(site as u32).ok_or_else(|| {
            CoreError::invalid(format!("tail model has no entry for site {site}"))
        })?;
        for c in 0..ws.draws.ncols() {
            let z = ws.draws[(r, c)];
            ws.draws[(r, c)] = mu + sd * degaussianize_value(z, st, model.u);
        }
    }
    Ok(())
}

pub struct PredictArtifacts {
    pub targets: Vec<(usize, u32, u32)>,
    pub cdfs: Vec<PredictiveCdf>,
}

/// Assembles cluster-minimum predictive distributions from the per-window
/// draws, back-transforming first unless the variant is `none`.
pub fn stage_predict(
    cfg: &Config,
    field_path: &Path,
    windows_dir: &Path,
    tail_paths: Option<(&Path, &Path)>,
    trend_path: Option<&Path>,
    out_quantiles: &Path,
    out_samples: &Path,
) -> anyhow::Result<PredictArtifacts> {
    let variant = cfg.variant()?;
    let field = GriddedField::read_binary(field_path)?;
    let marginal = match (variant, tail_paths, trend_path) {
        (Variant::None, _, _) => None,
        (_, Some((params, sidecar)), Some(trend)) => {
            Some((TailModel::read_csv(params, sidecar)?, YearlyTrend::read_csv(trend)?))
        }
        _ => bail!(CoreError::invalid(format!(
            "variant {} needs tail and trend artifacts",
            variant.as_str()
        ))),
    };
    let mut targets_out: Vec<(usize, u32, u32)> = Vec::new();
    let mut cdfs: Vec<PredictiveCdf> = Vec::new();
    for (idx, w) in cfg.windows.iter().enumerate() {
        let mut ws = WindowSamples::read(&samples_file(windows_dir, idx))?;
        if ws.center_day != w.center_day {
            bail!(CoreError::invalid(format!(
                "window {idx} artifact center day {} does not match config {}",
                ws.center_day, w.center_day
            )));
        }
        if let Some((model, trend)) = &marginal {
            backtransform_draws(&mut ws, &field, model, trend)?;
        }
        let targets = read_targets(&w.targets_csv, &field)?;
        let row_of = ws.row_of();
        for &(site, day) in &targets {
            let nb =
                neighborhood(&field, site, day, cfg.predict.radius_km, cfg.predict.half_window)?;
            let cdf = cluster_min_indexed(&ws.draws, &row_of, &nb)?;
            targets_out.push((targets_out.len(), site as u32, day as u32));
            cdfs.push(cdf);
        }
    }
    write_prediction_quantiles(&targets_out, &cdfs, out_quantiles)?;
    write_prediction_samples(&targets_out, &cdfs, out_samples)?;
    log::info!("predictive distributions for {} targets", cdfs.len());
    Ok(PredictArtifacts { targets: targets_out, cdfs })
}

/// Parses the prediction-samples CSV back into predictive distributions.
pub fn read_prediction_samples(
    path: &Path,
) -> anyhow::Result<(Vec<(usize, u32, u32)>, Vec<PredictiveCdf>)> {
    let f = File::open(path)
        .with_context(|| format!("missing prediction samples {}", path.display()))?;
    let mut targets = Vec::new();
    let mut cdfs = Vec::new();
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if ln == 0 {
            if !line.starts_with("target_id,site_id,day") {
                bail!(CoreError::parse(path, Some(1), "unexpected header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() < 4 {
            bail!(CoreError::parse(path, Some(ln + 1), "row too short"));
        }
        let tid: usize = toks[0]
            .parse()
            .map_err(|e| CoreError::parse(path, Some(ln + 1), format!("bad target id: {e}")))?;
        let site: u32 = toks[1]
            .parse()
            .map_err(|e| CoreError::parse(path, Some(ln + 1), format!("bad site id: {e}")))?;
        let day: u32 = toks[2]
            .parse()
            .map_err(|e| CoreError::parse(path, Some(ln + 1), format!("bad day: {e}")))?;
        let samples: Vec<f64> = toks[3..]
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| CoreError::parse(path, Some(ln + 1), format!("bad sample: {e}")))
            })
            .collect::<Result<_, _>>()?;
        targets.push((tid, site, day));
        cdfs.push(PredictiveCdf::from_samples(samples)?);
    }
    if targets.is_empty() {
        bail!(CoreError::invalid(format!("no predictions in {}", path.display())));
    }
    Ok((targets, cdfs))
}

/// Scores predictive distributions against minima of the complete truth
/// field over the same neighborhoods.
pub fn stage_score(
    cfg: &Config,
    pred_samples: &Path,
    truth_path: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    let (targets, cdfs) = read_prediction_samples(pred_samples)?;
    let truth = GriddedField::read_binary(truth_path)?;
    let nbs: Vec<Neighborhood> = targets
        .iter()
        .map(|&(_, site, day)| {
            neighborhood(
                &truth,
                site as usize,
                day as usize,
                cfg.predict.radius_km,
                cfg.predict.half_window,
            )
        })
        .collect::<Result<_, _>>()?;
    let truths = known_summary_oracle(&truth, &nbs)?;
    let reports = score_batch(&cdfs, &truths, &cfg.predict.a_values)?;
    for r in &reports {
        log::info!(
            "a={}: mean score x 1e4 = {:.4} over {} targets",
            if r.a == f64::NEG_INFINITY { "-inf".to_string() } else { format!("{}", r.a) },
            r.mean_twcrps_x1e4,
            r.n_targets
        );
    }
    write_scores(&reports, out)?;
    Ok(())
}

/// Tail-dependence diagnostics over distance bins that actually contain
/// site pairs.
pub fn stage_diag_chi(
    cfg: &Config,
    field_path: &Path,
    out: &Path,
    n_bins: usize,
    max_lag_km: f64,
    site_stride: usize,
    n_boot: usize,
) -> anyhow::Result<()> {
    let field = GriddedField::read_binary(field_path)?;
    if n_bins == 0 || !(max_lag_km > 0.0) {
        bail!(CoreError::invalid("need n_bins > 0 and max_lag_km > 0".to_string()));
    }
    let stride = site_stride.max(1);
    let kept: Vec<usize> = (0..field.n_sites()).filter(|s| s % stride == 0).collect();
    let mut dmax = 0.0f64;
    for (i, &a) in kept.iter().enumerate() {
        for &b in kept.iter().skip(i + 1) {
            dmax = dmax.max(field.sites()[a].km.dist(&field.sites()[b].km));
        }
    }
    let hi = max_lag_km.min(dmax * (1.0 + 1e-9));
    let width = hi / n_bins as f64;
    let candidate: Vec<(f64, f64)> =
        (0..n_bins).map(|k| (k as f64 * width, (k + 1) as f64 * width)).collect();
    // Keep bins with at least two strided pairs; the estimator rejects
    // thinner ones.
    let bins: Vec<(f64, f64)> = candidate
        .into_iter()
        .filter(|&(lo, hi)| {
            let mut n = 0;
            for (i, &a) in kept.iter().enumerate() {
                for &b in kept.iter().skip(i + 1) {
                    let d = field.sites()[a].km.dist(&field.sites()[b].km);
                    if d >= lo && d < hi {
                        n += 1;
                    }
                }
            }
            n >= 2
        })
        .collect();
    if bins.is_empty() {
        bail!(CoreError::invalid("no distance bin contains two site pairs".to_string()));
    }
    log::info!("chi diagnostics over {} bins up to {:.0} km", bins.len(), hi);
    let est = chi_by_lag(
        &field,
        &DEFAULT_CHI_LEVELS,
        &bins,
        stride,
        n_boot,
        cfg.pipeline.seed,
    )?;
    write_chi_csv(&est, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Orchestrated run
// ---------------------------------------------------------------------------

pub struct RunPaths {
    pub field: PathBuf,
    pub truth: Option<PathBuf>,
    pub trend: PathBuf,
    pub tail_params: PathBuf,
    pub tail_sidecar: PathBuf,
    pub zfield: PathBuf,
    pub windows_dir: PathBuf,
    pub pred_quantiles: PathBuf,
    pub pred_samples: PathBuf,
    pub scores: PathBuf,
}

pub fn run_paths(cfg: &Config, work: &Path) -> RunPaths {
    let field = match &cfg.pipeline.field_path {
        Some(p) => p.clone(),
        None => work.join("field.bin"),
    };
    let truth = match &cfg.pipeline.truth_path {
        Some(p) => Some(p.clone()),
        None if cfg.sim.is_some() && cfg.pipeline.field_path.is_none() => {
            Some(work.join("truth.bin"))
        }
        None => None,
    };
    RunPaths {
        field,
        truth,
        trend: work.join("trend.csv"),
        tail_params: work.join("tail_params.csv"),
        tail_sidecar: work.join("tail_ecdf.bin"),
        zfield: work.join("zfield.bin"),
        windows_dir: work.join("windows"),
        pred_quantiles: work.join("pred_quantiles.csv"),
        pred_samples: work.join("pred_samples.csv"),
        scores: work.join("scores.csv"),
    }
}

/// Runs the full pipeline in `work`, resuming from current artifacts unless
/// `force` is set.
pub fn run(cfg: &Config, work: &Path, force: bool) -> anyhow::Result<()> {
    init_pool(cfg.pipeline.jobs);
    std::fs::create_dir_all(work)?;
    let variant = cfg.variant()?;
    let cfg_hash = sha256_text(&cfg.digest_text()?);
    let paths = run_paths(cfg, work);

    if cfg.pipeline.field_path.is_none() {
        let truth = paths.truth.clone().expect("simulated runs always have a truth path");
        run_stage(
            work,
            "simulate",
            &cfg_hash,
            &[],
            &[paths.field.clone(), truth.clone()],
            force,
            || stage_simulate(cfg, &paths.field, &truth),
        )?;
    } else if !paths.field.exists() {
        bail!(CoreError::invalid(format!(
            "configured field {} does not exist",
            paths.field.display()
        )));
    }

    let windows_input = if variant == Variant::None {
        paths.field.clone()
    } else {
        run_stage(
            work,
            "fit-trend",
            &cfg_hash,
            &[paths.field.clone()],
            &[paths.trend.clone()],
            force,
            || stage_fit_trend(cfg, &paths.field, &paths.trend),
        )?;
        run_stage(
            work,
            "fit-tail",
            &cfg_hash,
            &[paths.field.clone(), paths.trend.clone()],
            &[paths.tail_params.clone(), paths.tail_sidecar.clone()],
            force,
            || {
                stage_fit_tail(
                    cfg,
                    &paths.field,
                    &paths.trend,
                    &paths.tail_params,
                    &paths.tail_sidecar,
                )
            },
        )?;
        run_stage(
            work,
            "gaussianize",
            &cfg_hash,
            &[
                paths.field.clone(),
                paths.trend.clone(),
                paths.tail_params.clone(),
                paths.tail_sidecar.clone(),
            ],
            &[paths.zfield.clone()],
            force,
            || {
                stage_gaussianize(
                    cfg,
                    &paths.field,
                    &paths.trend,
                    &paths.tail_params,
                    &paths.tail_sidecar,
                    &paths.zfield,
                )
            },
        )?;
        paths.zfield.clone()
    };

    let mut window_outputs: Vec<PathBuf> =
        (0..cfg.windows.len()).map(|i| samples_file(&paths.windows_dir, i)).collect();
    window_outputs.push(paths.windows_dir.join("summaries.csv"));
    let mut window_inputs = vec![windows_input.clone()];
    window_inputs.extend(cfg.windows.iter().map(|w| w.targets_csv.clone()));
    run_stage(
        work,
        "fit-windows",
        &cfg_hash,
        &window_inputs,
        &window_outputs,
        force,
        || stage_fit_windows(cfg, &windows_input, &paths.windows_dir),
    )?;

    let mut predict_inputs = window_outputs.clone();
    predict_inputs.push(windows_input.clone());
    if variant != Variant::None {
        predict_inputs
            .extend([paths.trend.clone(), paths.tail_params.clone(), paths.tail_sidecar.clone()]);
    }
    run_stage(
        work,
        "predict",
        &cfg_hash,
        &predict_inputs,
        &[paths.pred_quantiles.clone(), paths.pred_samples.clone()],
        force,
        || {
            stage_predict(
                cfg,
                &windows_input,
                &paths.windows_dir,
                if variant == Variant::None {
                    None
                } else {
                    Some((paths.tail_params.as_path(), paths.tail_sidecar.as_path()))
                },
                if variant == Variant::None { None } else { Some(paths.trend.as_path()) },
                &paths.pred_quantiles,
                &paths.pred_samples,
            )
            .map(|_| ())
        },
    )?;

    match &paths.truth {
        Some(truth) if truth.exists() || cfg.pipeline.field_path.is_none() => {
            let truth = truth.clone();
            run_stage(
                work,
                "score",
                &cfg_hash,
                &[paths.pred_samples.clone(), truth.clone()],
                &[paths.scores.clone()],
                force,
                || stage_score(cfg, &paths.pred_samples, &truth, &paths.scores),
            )?;
        }
        _ => log::info!("no truth field configured; skipping the score stage"),
    }
    Ok(())
}
