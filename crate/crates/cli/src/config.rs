//! Experiment configuration: JSON schema with strict field checking, full
//! default expansion, and command-line overrides.

use std::path::{Path, PathBuf};

use recon_core::grappa::GrappaConfig;
use recon_core::jacobian::DEFAULT_BUDGET;
use recon_core::raki::{Activation, NetworkSpec, TrainConfig};
use recon_core::sim::PhantomSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Least-squares calibrated linear interpolation kernels.
    Grappa,
    /// Nonlinear (rectified) scan-specific interpolation network.
    Raki,
    /// Identity-activation (linear) interpolation network.
    RakiLinear,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Grappa => "grappa",
            Method::Raki => "raki",
            Method::RakiLinear => "raki-linear",
        }
    }
}

/// Phantom overrides; unspecified fields fall back to the standard phantom.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomOverrides {
    pub grid: Option<[usize; 2]>,
    pub coils: Option<usize>,
    pub r: Option<usize>,
    pub n_acs: Option<usize>,
    pub noise_rho: Option<f64>,
    pub sigma: Option<f64>,
    pub seed: Option<u64>,
}

impl PhantomOverrides {
    pub fn resolve(&self) -> PhantomSpec {
        let mut spec = PhantomSpec::default();
        if let Some(g) = self.grid {
            spec.grid = (g[0], g[1]);
        }
        if let Some(c) = self.coils {
            spec.coils = c;
        }
        if let Some(r) = self.r {
            spec.r = r;
        }
        if let Some(n) = self.n_acs {
            spec.n_acs = n;
        }
        if let Some(rho) = self.noise_rho {
            spec.noise_rho = rho;
        }
        if let Some(s) = self.sigma {
            spec.sigma = s;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        spec
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrappaParams {
    pub kx_g: Option<usize>,
    pub ky_g: Option<usize>,
    pub lambda: Option<f64>,
    pub min_equation_factor: Option<usize>,
}

impl Default for GrappaParams {
    fn default() -> Self {
        Self {
            kx_g: None,
            ky_g: None,
            lambda: None,
            min_equation_factor: None,
        }
    }
}

impl GrappaParams {
    pub fn resolve(&self) -> GrappaConfig {
        let d = GrappaConfig::default();
        GrappaConfig {
            kx_g: self.kx_g.unwrap_or(d.kx_g),
            ky_g: self.ky_g.unwrap_or(d.ky_g),
            lambda: self.lambda.unwrap_or(d.lambda),
            min_equation_factor: self.min_equation_factor.unwrap_or(d.min_equation_factor),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkParams {
    pub hidden_channels: Option<Vec<usize>>,
    pub hidden_kernels: Option<Vec<(usize, usize)>>,
    pub final_kernel: Option<(usize, usize)>,
    pub slope: Option<f64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub train_seed: Option<u64>,
}

impl NetworkParams {
    /// Method-dependent defaults: the rectified network uses the standard
    /// two-hidden-layer architecture; the linear network uses channel-mixing
    /// 1×1 hidden layers with a 5×2 final layer so its composed footprint
    /// matches the calibrated-kernel baseline.
    pub fn resolve(&self, method: Method, coils: usize, r: usize) -> (NetworkSpec, TrainConfig) {
        let linear = method == Method::RakiLinear;
        let spec = NetworkSpec {
            coils,
            r,
            hidden_channels: self
                .hidden_channels
                .clone()
                .unwrap_or_else(|| if linear { vec![16, 8] } else { vec![64, 32] }),
            hidden_kernels: self
                .hidden_kernels
                .clone()
                .unwrap_or_else(|| {
                    if linear {
                        vec![(1, 1), (1, 1)]
                    } else {
                        vec![(5, 2), (1, 1)]
                    }
                }),
            final_kernel: self.final_kernel.unwrap_or(if linear { (5, 2) } else { (3, 2) }),
            slope: self.slope.unwrap_or(0.1),
            activation: if linear {
                Activation::Identity
            } else {
                Activation::CLReLU
            },
        };
        let train = TrainConfig {
            epochs: self.epochs.unwrap_or(if linear { 1000 } else { 500 }),
            learning_rate: self.learning_rate.unwrap_or(3e-3),
            seed: self.train_seed.unwrap_or(0),
            ..Default::default()
        };
        (spec, train)
    }
}

fn default_sigma_scales() -> Vec<f64> {
    vec![1.0, 3.0, 5.0]
}
fn default_replicas() -> usize {
    1000
}
fn default_replica_sigma() -> f64 {
    0.02
}
fn default_grid() -> [usize; 2] {
    [32, 32]
}
fn default_roi() -> f64 {
    0.2
}
fn default_budget() -> usize {
    DEFAULT_BUDGET
}
fn default_alpha() -> f64 {
    0.05
}

/// The experiment configuration file. `method` is required; everything else
/// defaults to the standard desk-scale experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default)]
    pub phantom: PhantomOverrides,
    /// Acquisition-noise multipliers for the sweep command.
    #[serde(default = "default_sigma_scales")]
    pub sigma_scales: Vec<f64>,
    #[serde(default = "default_replicas")]
    pub n_replicas: usize,
    /// Standard deviation of the synthetic noise added per replica.
    #[serde(default = "default_replica_sigma")]
    pub replica_sigma: f64,
    #[serde(default = "default_grid")]
    pub analysis_grid: [usize; 2],
    #[serde(default = "default_roi")]
    pub roi_threshold: f64,
    #[serde(default = "default_alpha")]
    pub normality_alpha: f64,
    /// Master seed for replica noise and training initialization.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_budget")]
    pub budget_bytes: usize,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub grappa: GrappaParams,
    #[serde(default)]
    pub raki: NetworkParams,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::config(format!("invalid config {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.n_replicas == 0 {
            return Err(CliError::config("n_replicas must be positive".into()));
        }
        if !(self.roi_threshold > 0.0 && self.roi_threshold <= 1.0) {
            return Err(CliError::config(
                "roi_threshold must lie in (0, 1]".into(),
            ));
        }
        if self.sigma_scales.iter().any(|s| !(*s > 0.0)) {
            return Err(CliError::config("sigma_scales must be positive".into()));
        }
        Ok(())
    }

    /// Apply command-line overrides; the result is the resolved config that
    /// gets snapshotted next to the outputs.
    pub fn with_overrides(
        mut self,
        out: Option<PathBuf>,
        seed: Option<u64>,
        threads: Option<usize>,
        budget: Option<usize>,
    ) -> Self {
        if let Some(o) = out {
            self.out_dir = Some(o);
        }
        if let Some(s) = seed {
            self.seed = s;
            self.phantom.seed = Some(s);
        }
        if let Some(t) = threads {
            self.threads = Some(t);
        }
        if let Some(b) = budget {
            self.budget_bytes = b;
        }
        self
    }
}
