use std::path::PathBuf;

use clap::{Parser, Subcommand};

use hotspot_cli::config::{Config, Overrides};
use hotspot_cli::pipeline;
use hotspot_core::CoreError;

#[derive(Parser)]
#[command(
    name = "hotspot",
    version,
    about = "Probabilistic prediction of extreme space-time hot-spot minima in gridded anomaly fields"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a synthetic field pair: gapped observations plus complete truth
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_field: PathBuf,
        #[arg(long)]
        out_truth: PathBuf,
        /// Override the pipeline seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the yearly location-scale trend from an observation field
    FitTrend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the marginal tail model (variant gam | nn) on standardized data
    FitTail {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        trend: PathBuf,
        #[arg(long)]
        out_params: PathBuf,
        #[arg(long)]
        out_sidecar: PathBuf,
        /// Override the model variant
        #[arg(long)]
        variant: Option<String>,
        /// Override the nearest-neighbor pool size
        #[arg(long)]
        k: Option<usize>,
        /// Override the fixed threshold on the standardized scale
        #[arg(long, allow_hyphen_values = true)]
        u: Option<f64>,
    },
    /// Transform observations to the standard Gaussian scale
    Gaussianize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        trend: PathBuf,
        #[arg(long)]
        tail_params: PathBuf,
        #[arg(long)]
        tail_sidecar: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit local Bayesian windows and draw latent posterior samples
    FitWindows {
        #[arg(long)]
        config: PathBuf,
        /// Input field on the modeling scale (standard Gaussian unless
        /// variant none)
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Build cluster-minimum predictive distributions from window samples
    Predict {
        #[arg(long)]
        config: PathBuf,
        /// The same field the windows were fitted on
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        windows_dir: PathBuf,
        #[arg(long)]
        out_quantiles: PathBuf,
        #[arg(long)]
        out_samples: PathBuf,
        #[arg(long)]
        tail_params: Option<PathBuf>,
        #[arg(long)]
        tail_sidecar: Option<PathBuf>,
        #[arg(long)]
        trend: Option<PathBuf>,
    },
    /// Score predictive distributions against minima of the truth field
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Weight thresholds; repeatable, -inf for the unweighted score
        #[arg(long = "a", allow_hyphen_values = true)]
        a: Vec<f64>,
    },
    /// Tail-dependence diagnostics by distance bin
    DiagChi {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_bins: usize,
        #[arg(long, default_value_t = 500.0)]
        max_lag_km: f64,
        #[arg(long, default_value_t = 1)]
        site_stride: usize,
        #[arg(long, default_value_t = hotspot_core::chi::DEFAULT_N_BOOT)]
        n_boot: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full pipeline in a work directory, resuming current stages
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        work_dir: PathBuf,
        /// Rerun every stage even if its manifest is current
        #[arg(long)]
        force: bool,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Simulate { config, out_field, out_truth, seed } => {
            let cfg = Config::load(&config, &Overrides { seed, ..Overrides::default() })?;
            pipeline::stage_simulate(&cfg, &out_field, &out_truth)
        }
        Cmd::FitTrend { config, field, out } => {
            let cfg = Config::load(&config, &Overrides::default())?;
            pipeline::stage_fit_trend(&cfg, &field, &out)
        }
        Cmd::FitTail { config, field, trend, out_params, out_sidecar, variant, k, u } => {
            let over =
                Overrides { variant, nn_k: k, threshold_u: u, ..Overrides::default() };
            let cfg = Config::load(&config, &over)?;
            pipeline::stage_fit_tail(&cfg, &field, &trend, &out_params, &out_sidecar)
        }
        Cmd::Gaussianize { config, field, trend, tail_params, tail_sidecar, out } => {
            let cfg = Config::load(&config, &Overrides::default())?;
            pipeline::stage_gaussianize(&cfg, &field, &trend, &tail_params, &tail_sidecar, &out)
        }
        Cmd::FitWindows { config, field, out_dir, jobs, seed, n_samples } => {
            let over = Overrides { jobs, seed, n_samples, ..Overrides::default() };
            let cfg = Config::load(&config, &over)?;
            pipeline::init_pool(cfg.pipeline.jobs);
            pipeline::stage_fit_windows(&cfg, &field, &out_dir)
        }
        Cmd::Predict {
            config,
            field,
            windows_dir,
            out_quantiles,
            out_samples,
            tail_params,
            tail_sidecar,
            trend,
        } => {
            let cfg = Config::load(&config, &Overrides::default())?;
            let tail = match (&tail_params, &tail_sidecar) {
                (Some(p), Some(s)) => Some((p.as_path(), s.as_path())),
                _ => None,
            };
            pipeline::stage_predict(
                &cfg,
                &field,
                &windows_dir,
                tail,
                trend.as_deref(),
                &out_quantiles,
                &out_samples,
            )
            .map(|_| ())
        }
        Cmd::Score { config, pred, truth, out, a } => {
            let over = Overrides {
                a_values: if a.is_empty() { None } else { Some(a) },
                ..Overrides::default()
            };
            let cfg = Config::load(&config, &over)?;
            pipeline::stage_score(&cfg, &pred, &truth, &out)
        }
        Cmd::DiagChi { config, field, out, n_bins, max_lag_km, site_stride, n_boot, seed } => {
            let cfg = Config::load(&config, &Overrides { seed, ..Overrides::default() })?;
            pipeline::stage_diag_chi(
                &cfg,
                &field,
                &out,
                n_bins,
                max_lag_km,
                site_stride,
                n_boot,
            )
        }
        Cmd::Run { config, work_dir, force, variant, seed, n_samples, jobs } => {
            let over = Overrides { variant, seed, n_samples, jobs, ..Overrides::default() };
            let cfg = Config::load(&config, &over)?;
            pipeline::run(&cfg, &work_dir, force)
        }
    }
}

/// 0 ok, 2 config error, 4 numerical failure, 3 data error otherwise.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::Invalid(_) => 2,
                CoreError::Numerical(_) => 4,
                CoreError::Io(_) | CoreError::Parse { .. } | CoreError::Dimension(_) => 3,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    3
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
