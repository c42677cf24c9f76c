//! Run configuration: TOML file, command-line overrides and validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use rwre_core::coarse_grain::ScaleParams;
use rwre_core::environment::{EnvironmentSpec, Family};
use rwre_core::multiscale::InnerMethod;
use serde::{Deserialize, Serialize};

/// Environment variable consulted when neither the flags nor the file set a seed.
pub const SEED_ENV: &str = "RWRE_SEED";

/// Fully resolved settings for one invocation. Every field has a default, so
/// an empty file is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    pub epsilon: f64,
    pub family: Family,
    pub seed: u64,
    /// Ball radius `L`.
    pub radius: f64,
    /// Start site; empty means the origin.
    pub start: Vec<i32>,
    pub reps: usize,
    /// Half-width of the exported environment window.
    pub window: i32,
    pub ladder: Vec<f64>,
    pub envs: usize,
    pub inner: InnerMethod,
    pub scale_params: ScaleParams,
    pub l0: f64,
    pub eta: f64,
    pub delta: f64,
    pub budget: Option<usize>,
    /// Walk horizon for the CLT run.
    pub n: u64,
    pub t_grid: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Replicas for the tightness table; 0 skips it.
    pub tightness_reps: usize,
    /// Pool size for the comparison walk; 0 skips it.
    pub pool: usize,
    /// Diffusion constant used for `β_n` and the predicted covariance.
    pub d_const: f64,
    /// Per-axis `p(e_i)` for the predicted covariance; empty means `1/(2d)`.
    pub kernel: Vec<f64>,
    /// Coarse step radius for the free Green function.
    pub m: f64,
    pub box_radius: usize,
    pub k_max: usize,
    /// Local solver tolerance for the coarse build.
    pub tol: f64,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 3,
            epsilon: 0.0,
            family: Family::PairUniform,
            seed: 1,
            radius: 8.0,
            start: Vec::new(),
            reps: 1000,
            window: 4,
            ladder: vec![8.0, 12.0, 16.0, 24.0, 32.0],
            envs: 200,
            inner: InnerMethod::Exact,
            scale_params: ScaleParams::DESK,
            l0: rwre_core::multiscale::DEFAULT_L0,
            eta: rwre_core::multiscale::DEFAULT_ETA,
            delta: rwre_core::multiscale::DEFAULT_DELTA,
            budget: None,
            n: 1_000_000,
            t_grid: vec![0.25, 0.5, 1.0],
            lambdas: vec![2.0, 3.0, 4.0],
            tightness_reps: 0,
            pool: 0,
            d_const: 1.0,
            kernel: Vec::new(),
            m: 8.0,
            box_radius: 96,
            k_max: 60,
            tol: 1e-8,
            out: PathBuf::from("rwre_out"),
            threads: None,
        }
    }
}

/// Flags shared by every subcommand; each one overrides the file value.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub d: Option<usize>,
    #[arg(long = "eps", alias = "epsilon", global = true)]
    pub epsilon: Option<f64>,
    /// zero, pair-uniform or pair-two-point.
    #[arg(long, global = true)]
    pub family: Option<Family>,
    /// Master seed (falls back to the file, then RWRE_SEED, then 1).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Ball radius L.
    #[arg(long = "L", global = true)]
    pub radius: Option<f64>,
    /// Start site as comma-separated coordinates.
    #[arg(long, global = true, value_delimiter = ',')]
    pub start: Option<Vec<i32>>,
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    #[arg(long, global = true)]
    pub window: Option<i32>,
    /// Comma-separated ladder of scales.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ladder: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub envs: Option<usize>,
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    #[arg(long, global = true)]
    pub n: Option<u64>,
    #[arg(long = "t-grid", global = true, value_delimiter = ',')]
    pub t_grid: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long = "tightness-reps", global = true)]
    pub tightness_reps: Option<usize>,
    #[arg(long, global = true)]
    pub pool: Option<usize>,
    #[arg(long = "D", global = true)]
    pub d_const: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub kernel: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub m: Option<f64>,
    #[arg(long = "box-radius", global = true)]
    pub box_radius: Option<usize>,
    #[arg(long = "k-max", global = true)]
    pub k_max: Option<usize>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Output directory for artifacts and the manifest.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results agree across thread counts to 1e-9.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

/// Reads a TOML file into a config; unknown keys are errors.
pub fn config_load(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> anyhow::Result<RunConfig> {
    let raw: toml::Table = toml::from_str(text)?;
    let seed_given = raw.contains_key("seed");
    let mut cfg: RunConfig = toml::from_str(text)?;
    if !seed_given {
        if let Some(seed) = env_seed()? {
            cfg.seed = seed;
        }
    }
    Ok(cfg)
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .with_context(|| format!("{SEED_ENV}='{v}' is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

macro_rules! apply {
    ($cfg:ident, $ov:ident, $($field:ident),*) => {
        $(if let Some(v) = $ov.$field.clone() { $cfg.$field = v; })*
    };
}

/// File (or defaults) with the command-line flags applied, then validated.
pub fn resolve(ov: &Overrides) -> anyhow::Result<RunConfig> {
    let mut cfg = match &ov.config {
        Some(p) => config_load(p)?,
        None => {
            let mut c = RunConfig::default();
            if let Some(seed) = env_seed()? {
                c.seed = seed;
            }
            c
        }
    };
    apply!(
        cfg,
        ov,
        d,
        epsilon,
        family,
        seed,
        radius,
        start,
        reps,
        window,
        ladder,
        envs,
        n,
        t_grid,
        lambdas,
        tightness_reps,
        pool,
        d_const,
        kernel,
        m,
        box_radius,
        k_max,
        tol,
        out
    );
    if ov.budget.is_some() {
        cfg.budget = ov.budget;
    }
    if ov.threads.is_some() {
        cfg.threads = ov.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn env_spec(&self) -> anyhow::Result<EnvironmentSpec> {
        Ok(EnvironmentSpec::new(
            self.d,
            self.epsilon,
            self.family,
            self.seed,
        )?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.env_spec()?;
        if !self.start.is_empty() && self.start.len() != self.d {
            bail!(
                "start has {} coordinates, expected {}",
                self.start.len(),
                self.d
            );
        }
        if !(self.radius > 0.0) {
            bail!("radius must be positive, got {}", self.radius);
        }
        if self.ladder.is_empty() || self.ladder.windows(2).any(|w| w[1] <= w[0]) {
            bail!("ladder must be non-empty and strictly increasing");
        }
        if self.t_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            bail!("t grid must lie in [0, 1]");
        }
        if self.lambdas.windows(2).any(|w| w[1] <= w[0]) {
            bail!("lambdas must be strictly increasing");
        }
        if !(self.d_const > 0.0) {
            bail!("D must be positive, got {}", self.d_const);
        }
        if !self.kernel.is_empty() && self.kernel.len() != self.d {
            bail!(
                "kernel has {} entries, expected {}",
                self.kernel.len(),
                self.d
            );
        }
        if self.window < 0 {
            bail!("window must be non-negative");
        }
        if !(self.tol > 0.0) {
            bail!("tolerance must be positive");
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        Ok(())
    }

    pub fn start_site(&self) -> rwre_core::Site {
        if self.start.is_empty() {
            rwre_core::Site::origin(self.d)
        } else {
            rwre_core::Site::new(&self.start)
        }
    }

    /// Per-axis `p(e_i)` for predictions.
    pub fn kernel_axes(&self) -> Vec<f64> {
        if self.kernel.is_empty() {
            vec![1.0 / (2 * self.d) as f64; self.d]
        } else {
            self.kernel.clone()
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}
