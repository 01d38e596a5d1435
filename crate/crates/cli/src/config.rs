//! Run configuration: one TOML file of top-level keys, plus an optional
//! `[simulate]` table. Relative paths resolve against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use povmap_core::decide::{DEFAULT_CUTOFF, DEFAULT_MULTIPLIERS};
use povmap_core::sampler::{McmcConfig, ParamSelector, PriorConfig};
use povmap_core::synth::{SampleDesign, SynthConfig, Take};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    All,
    Hyperparameters,
}

impl From<Monitor> for ParamSelector {
    fn from(m: Monitor) -> Self {
        match m {
            Monitor::All => ParamSelector::All,
            Monitor::Hyperparameters => ParamSelector::Hyperparameters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub households: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    /// Column name to `log`, `arcsin_sqrt` or `identity`.
    #[serde(default)]
    pub covariate_transforms: BTreeMap<String, String>,
    pub poverty_line_urban: Option<f64>,
    pub poverty_line_rural: Option<f64>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "one")]
    pub thin: usize,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "one_u64")]
    pub seed: u64,
    #[serde(default = "unit")]
    pub beta_prior_sd: f64,
    #[serde(default = "unit")]
    pub sd_prior_scale: f64,
    #[serde(default = "default_multipliers")]
    pub multipliers: Vec<f64>,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub monitor: Monitor,
    pub simulate: Option<SimulateConfig>,
}

fn default_alphas() -> Vec<f64> {
    vec![0.0, 1.0]
}
fn default_burn_in() -> usize {
    McmcConfig::default().burn_in
}
fn default_draws() -> usize {
    McmcConfig::default().draws
}
fn one() -> usize {
    1
}
fn one_u64() -> u64 {
    1
}
fn default_chains() -> usize {
    4
}
fn unit() -> f64 {
    1.0
}
fn default_multipliers() -> Vec<f64> {
    DEFAULT_MULTIPLIERS.to_vec()
}
fn default_cutoff() -> f64 {
    DEFAULT_CUTOFF
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Synthetic region and sample design for the `simulate` subcommand.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_comunas: usize,
    pub n_covariates: usize,
    pub beta_urban: Vec<f64>,
    pub beta_rural: Vec<f64>,
    pub sigma_t: f64,
    pub sigma_theta: f64,
    pub sigma_mu: f64,
    pub psus_per_stratum: [usize; 2],
    pub households_per_psu: [usize; 2],
    pub rural_share: f64,
    /// PSUs sampled per stratum; omitted means all.
    pub sample_psus: Option<usize>,
    /// Households sampled per PSU; omitted means all.
    pub sample_households: Option<usize>,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl SimulateConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_comunas: self.n_comunas,
            n_covariates: self.n_covariates,
            beta: [self.beta_urban.clone(), self.beta_rural.clone()],
            sigma_t: self.sigma_t,
            sigma_theta: self.sigma_theta,
            sigma_mu: self.sigma_mu,
            psus_per_stratum: (self.psus_per_stratum[0], self.psus_per_stratum[1]),
            households_per_psu: (self.households_per_psu[0], self.households_per_psu[1]),
            rural_share: self.rural_share,
        }
    }

    pub fn design(&self) -> SampleDesign {
        let take = |n: Option<usize>| n.map_or(Take::All, Take::Count);
        SampleDesign {
            psus: take(self.sample_psus),
            households: take(self.sample_households),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl RunConfig {
    /// Parses TOML text, resolving relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.households.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.covariates.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(out) = &overrides.out_dir {
            self.out_dir = out.clone();
        }
        if let Some(threads) = overrides.threads {
            self.threads = threads;
        }
    }

    pub fn priors(&self) -> PriorConfig {
        PriorConfig {
            beta_prior_sd: self.beta_prior_sd,
            sd_prior_scale: self.sd_prior_scale,
        }
    }

    pub fn mcmc(&self) -> McmcConfig {
        McmcConfig {
            burn_in: self.burn_in,
            draws: self.draws,
            thin: self.thin,
            update_sigmas: true,
        }
    }

    /// Settings that are wrong regardless of the input files.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("poverty_line_urban", self.poverty_line_urban),
            ("poverty_line_rural", self.poverty_line_rural),
        ] {
            match v {
                None => out.push(format!("{name} is required")),
                Some(k) if !(k > 0.0) || !k.is_finite() => {
                    out.push(format!("{name} must be positive, got {k}"))
                }
                _ => {}
            }
        }
        if self.alphas.is_empty() {
            out.push("alphas must list at least one value".into());
        }
        for a in &self.alphas {
            if !(*a >= 0.0) || !a.is_finite() {
                out.push(format!("alpha must be nonnegative, got {a}"));
            }
        }
        if self.multipliers.is_empty() {
            out.push("multipliers must list at least one value".into());
        }
        for m in &self.multipliers {
            if !(*m > 0.0) || !m.is_finite() {
                out.push(format!("multiplier must be positive, got {m}"));
            }
        }
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            out.push(format!(
                "cutoff must lie strictly between 0 and 1, got {}",
                self.cutoff
            ));
        }
        if self.chains == 0 {
            out.push("chains must be at least 1".into());
        }
        if let Err(e) = self.mcmc().validate() {
            out.push(e.to_string());
        }
        if let Err(e) = self.priors().validate() {
            out.push(e.to_string());
        }
        out
    }

    pub fn households_path(&self) -> Result<&Path, String> {
        self.households
            .as_deref()
            .ok_or_else(|| "households path is not set".into())
    }

    pub fn covariates_path(&self) -> Result<&Path, String> {
        self.covariates
            .as_deref()
            .ok_or_else(|| "covariates path is not set".into())
    }
}
