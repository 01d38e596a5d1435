//! MCMC for the three-level normal model on transformed income:
//!
//! ```text
//! T_cuph | theta_cup ~ N(theta_cup, sigma_t^2)
//! theta_cup | mu_cu  ~ N(mu_cu, sigma_theta^2)
//! mu_cu | beta_u     ~ N(x_c' beta_u, sigma_mu^2)
//! beta_u             ~ N(0, beta_prior_sd^2 I)
//! sigma_*            ~ half-normal(sd_prior_scale)
//! ```
//!
//! Location parameters get exact conjugate Gibbs draws. Each standard
//! deviation is slice sampled on the log scale. A sweep always runs
//! theta, mu, beta, then the three SDs.
//!
//! # Random streams
//!
//! Chain `i` under master seed `s` owns a set of ChaCha8 streams, all using
//! stream number `i`:
//!
//! - a global stream keyed by `(s, tag 0)`, used for beta and the SDs;
//! - one stream per comuna keyed by `(s, FNV-1a 64 of the comuna id, tag 1)`,
//!   used for that comuna's theta and mu draws.
//!
//! Per-comuna streams make a comuna's draws independent of where it sits in
//! the input file.

mod diagnostics;
mod draws;
pub mod slice;

pub use diagnostics::{psrf, split_rhat, ParamSelector, MIN_DRAWS};
pub use draws::{DrawsStore, ParamLayout, RunMeta};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{ModelData, Urbanicity};
use crate::seeded_stream;
use slice::{slice_sample, SliceConfig, SliceFailure};

/// Smallest SD ever stored in a state or used in a density.
pub const SD_FLOOR: f64 = 1e-12;

/// Floor applied to the residual SDs of the initial state.
pub const INIT_SD_FLOOR: f64 = 1e-3;

const INIT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid MCMC settings: {0}")]
    InvalidConfig(String),
    #[error("{0} has no households")]
    EmptyGroup(String),
    #[error("posterior precision for beta_{urbanicity} is not positive definite")]
    SingularPosteriorCovariance { urbanicity: Urbanicity },
    #[error("slice sampler failed for {parameter}: {failure:?}")]
    SliceNonConvergence {
        parameter: &'static str,
        failure: SliceFailure,
    },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("need at least {needed} draws per chain and 2 split halves, got {chains} chains x {draws} draws")]
    InsufficientDraws {
        chains: usize,
        draws: usize,
        needed: usize,
    },
    #[error("draws file: {0}")]
    DrawsFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    /// SD of the independent normal prior on every regression coefficient.
    pub beta_prior_sd: f64,
    /// Scale of the half-normal prior on each of the three SDs.
    pub sd_prior_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            beta_prior_sd: 1.0,
            sd_prior_scale: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        for (name, v) in [
            ("beta_prior_sd", self.beta_prior_sd),
            ("sd_prior_scale", self.sd_prior_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SamplerError::InvalidPrior(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmcConfig {
    pub burn_in: usize,
    /// Retained states per chain.
    pub draws: usize,
    pub thin: usize,
    /// When false the three SDs stay at their initial values.
    pub update_sigmas: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            burn_in: 10_000,
            draws: 10_000,
            thin: 1,
            update_sigmas: true,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.draws == 0 {
            return Err(SamplerError::InvalidConfig(
                "draws must be at least 1".into(),
            ));
        }
        if self.thin == 0 {
            return Err(SamplerError::InvalidConfig(
                "thin must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One point in parameter space. `theta` is indexed by roster PSU, `mu` by
/// roster stratum, `beta[u]` by urbanicity index.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
    pub beta: [Vec<f64>; 2],
    pub sigma_t: f64,
    pub sigma_theta: f64,
    pub sigma_mu: f64,
}

impl ModelState {
    pub fn validate(&self, data: &ModelData) -> Result<(), SamplerError> {
        if self.theta.len() != data.n_psus() || self.mu.len() != data.n_strata() {
            return Err(SamplerError::InvalidState(
                "theta/mu do not match the roster".into(),
            ));
        }
        if self.beta.iter().any(|b| b.len() != data.p()) {
            return Err(SamplerError::InvalidState(
                "beta length differs from covariate count".into(),
            ));
        }
        for (name, s) in [
            ("sigma_t", self.sigma_t),
            ("sigma_theta", self.sigma_theta),
            ("sigma_mu", self.sigma_mu),
        ] {
            if !(s > 0.0) || !s.is_finite() {
                return Err(SamplerError::InvalidState(format!("{name} = {s}")));
            }
        }
        Ok(())
    }

    /// Linear predictor `x_c' beta_u` for stratum `s`.
    pub fn stratum_mean(&self, data: &ModelData, s: usize) -> f64 {
        let stratum = &data.households.strata[s];
        dot(
            &data.design[stratum.comuna],
            &self.beta[stratum.urbanicity.index()],
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random streams for one chain; see the module docs for the derivation.
#[derive(Debug, Clone)]
pub struct ChainRng {
    pub global: ChaCha8Rng,
    pub comunas: Vec<ChaCha8Rng>,
}

impl ChainRng {
    pub fn new(master_seed: u64, chain: u64, data: &ModelData) -> Self {
        let stream = |key: u64, tag: u8| seeded_stream(master_seed, key, tag, chain);
        ChainRng {
            global: stream(0, 0),
            comunas: data
                .households
                .comunas
                .iter()
                .map(|c| stream(fnv1a64(c.id.as_bytes()), 1))
                .collect(),
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mean and variance of a normal mean given `n` observations summing to
/// `sum` with noise SD `sd_lik`, under a `N(prior_mean, sd_prior^2)` prior.
pub fn normal_conditional(
    n: f64,
    sum: f64,
    sd_lik: f64,
    prior_mean: f64,
    sd_prior: f64,
) -> (f64, f64) {
    let lik_prec = 1.0 / (sd_lik * sd_lik);
    let prior_prec = 1.0 / (sd_prior * sd_prior);
    let var = 1.0 / (n * lik_prec + prior_prec);
    (var * (sum * lik_prec + prior_mean * prior_prec), var)
}

/// Full conditional of `theta[p]`.
pub fn theta_conditional(state: &ModelState, data: &ModelData, p: usize) -> (f64, f64) {
    let psu = &data.households.psus[p];
    normal_conditional(
        psu.households.len() as f64,
        data.psu_sums[p],
        state.sigma_t,
        state.mu[psu.stratum],
        state.sigma_theta,
    )
}

/// Full conditional of `mu[s]`.
pub fn mu_conditional(state: &ModelState, data: &ModelData, s: usize) -> (f64, f64) {
    let stratum = &data.households.strata[s];
    let sum: f64 = stratum.psus.iter().map(|&p| state.theta[p]).sum();
    normal_conditional(
        stratum.psus.len() as f64,
        sum,
        state.sigma_theta,
        state.stratum_mean(data, s),
        state.sigma_mu,
    )
}

/// Precision matrix and Cholesky factor of the full conditional of
/// `beta[u]`, plus its mean.
struct BetaConditional {
    mean: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn beta_conditional_inner(
    state: &ModelState,
    data: &ModelData,
    u: Urbanicity,
    priors: &PriorConfig,
) -> Result<BetaConditional, SamplerError> {
    let p = data.p();
    let mut precision =
        DMatrix::<f64>::identity(p, p) / (priors.beta_prior_sd * priors.beta_prior_sd);
    let mut rhs = DVector::<f64>::zeros(p);
    let inv_var = 1.0 / (state.sigma_mu * state.sigma_mu);
    for (s, stratum) in data.households.strata.iter().enumerate() {
        if stratum.urbanicity != u {
            continue;
        }
        let x = &data.design[stratum.comuna];
        for i in 0..p {
            rhs[i] += x[i] * state.mu[s] * inv_var;
            for j in 0..p {
                precision[(i, j)] += x[i] * x[j] * inv_var;
            }
        }
    }
    let chol = precision
        .cholesky()
        .ok_or(SamplerError::SingularPosteriorCovariance { urbanicity: u })?;
    let mean = chol.solve(&rhs);
    Ok(BetaConditional { mean, chol })
}

/// Mean vector and covariance matrix of the full conditional of `beta[u]`.
pub fn beta_conditional(
    state: &ModelState,
    data: &ModelData,
    u: Urbanicity,
    priors: &PriorConfig,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), SamplerError> {
    let cond = beta_conditional_inner(state, data, u, priors)?;
    let cov = cond.chol.inverse();
    let p = cov.nrows();
    Ok((
        cond.mean.iter().copied().collect(),
        (0..p)
            .map(|i| (0..p).map(|j| cov[(i, j)]).collect())
            .collect(),
    ))
}

/// Sufficient statistics (term count, sum of squared residuals) for each
/// SD's likelihood: household, PSU and stratum level.
pub fn sigma_residuals(state: &ModelState, data: &ModelData) -> [(usize, f64); 3] {
    let hh = &data.households;
    let mut ss_t = 0.0;
    for (p, psu) in hh.psus.iter().enumerate() {
        for &h in &psu.households {
            let r = hh.records[h].t_income - state.theta[p];
            ss_t += r * r;
        }
    }
    let ss_theta: f64 = hh
        .psus
        .iter()
        .enumerate()
        .map(|(p, psu)| (state.theta[p] - state.mu[psu.stratum]).powi(2))
        .sum();
    let ss_mu: f64 = (0..hh.strata.len())
        .map(|s| (state.mu[s] - state.stratum_mean(data, s)).powi(2))
        .sum();
    [
        (hh.records.len(), ss_t),
        (hh.psus.len(), ss_theta),
        (hh.strata.len(), ss_mu),
    ]
}

/// Log density of `eta = ln(sigma)` under a half-normal prior with scale
/// `prior_scale` times `n_terms` normal likelihood terms with residual sum
/// of squares `sum_sq`, including the Jacobian.
pub fn log_sigma_target(eta: f64, n_terms: usize, sum_sq: f64, prior_scale: f64) -> f64 {
    let sigma = eta.exp().max(SD_FLOOR);
    let eta = sigma.ln();
    -(n_terms as f64) * eta - 0.5 * sum_sq / (sigma * sigma) - 0.5 * (sigma / prior_scale).powi(2)
        + eta
}

/// One slice update of an SD given its likelihood statistics.
pub fn draw_sigma<R: Rng + ?Sized>(
    current: f64,
    n_terms: usize,
    sum_sq: f64,
    prior_scale: f64,
    rng: &mut R,
) -> Result<f64, SliceFailure> {
    let eta = slice_sample(
        current.max(SD_FLOOR).ln(),
        |eta| log_sigma_target(eta, n_terms, sum_sq, prior_scale),
        &SliceConfig::default(),
        rng,
    )?;
    Ok(eta.exp().max(SD_FLOOR))
}

pub fn update_theta(state: &mut ModelState, data: &ModelData, rng: &mut ChainRng) {
    for (c, comuna) in data.households.comunas.iter().enumerate() {
        let stream = &mut rng.comunas[c];
        for &s in &comuna.strata {
            for &p in &data.households.strata[s].psus {
                let (mean, var) = theta_conditional(state, data, p);
                let z: f64 = stream.sample(StandardNormal);
                state.theta[p] = mean + var.sqrt() * z;
            }
        }
    }
}

pub fn update_mu(state: &mut ModelState, data: &ModelData, rng: &mut ChainRng) {
    for (c, comuna) in data.households.comunas.iter().enumerate() {
        let stream = &mut rng.comunas[c];
        for &s in &comuna.strata {
            let (mean, var) = mu_conditional(state, data, s);
            let z: f64 = stream.sample(StandardNormal);
            state.mu[s] = mean + var.sqrt() * z;
        }
    }
}

pub fn update_beta(
    state: &mut ModelState,
    data: &ModelData,
    priors: &PriorConfig,
    rng: &mut ChainRng,
) -> Result<(), SamplerError> {
    for u in Urbanicity::ALL {
        let cond = beta_conditional_inner(state, data, u, priors)?;
        let z = DVector::<f64>::from_fn(data.p(), |_, _| rng.global.sample(StandardNormal));
        // precision = L L', so L'^{-1} z has covariance precision^{-1}
        let noise = cond
            .chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or(SamplerError::SingularPosteriorCovariance { urbanicity: u })?;
        let draw = cond.mean + noise;
        state.beta[u.index()] = draw.iter().copied().collect();
    }
    Ok(())
}

pub fn update_sigmas(
    state: &mut ModelState,
    data: &ModelData,
    priors: &PriorConfig,
    rng: &mut ChainRng,
) -> Result<(), SamplerError> {
    let fail = |parameter| move |failure| SamplerError::SliceNonConvergence { parameter, failure };
    let scale = priors.sd_prior_scale;

    // residual sums depend only on the locations, which stay fixed here
    let [(n_t, ss_t), (n_th, ss_th), (n_mu, ss_mu)] = sigma_residuals(state, data);
    state.sigma_t =
        draw_sigma(state.sigma_t, n_t, ss_t, scale, &mut rng.global).map_err(fail("sigma_t"))?;
    state.sigma_theta = draw_sigma(state.sigma_theta, n_th, ss_th, scale, &mut rng.global)
        .map_err(fail("sigma_theta"))?;
    state.sigma_mu = draw_sigma(state.sigma_mu, n_mu, ss_mu, scale, &mut rng.global)
        .map_err(fail("sigma_mu"))?;
    Ok(())
}

/// One full Gibbs sweep.
pub fn sweep(
    state: &mut ModelState,
    data: &ModelData,
    priors: &PriorConfig,
    update_sds: bool,
    rng: &mut ChainRng,
) -> Result<(), SamplerError> {
    update_theta(state, data, rng);
    update_mu(state, data, rng);
    update_beta(state, data, priors, rng)?;
    if update_sds {
        update_sigmas(state, data, priors, rng)?;
    }
    Ok(())
}

/// Deterministic starting point: PSU and stratum means of transformed
/// income, ridge least squares for beta, and residual SDs floored at
/// [`INIT_SD_FLOOR`].
pub fn init_state(data: &ModelData, priors: &PriorConfig) -> Result<ModelState, SamplerError> {
    priors.validate()?;
    let hh = &data.households;
    let mut theta = Vec::with_capacity(hh.psus.len());
    for (p, psu) in hh.psus.iter().enumerate() {
        if psu.households.is_empty() {
            return Err(SamplerError::EmptyGroup(format!(
                "PSU {} of comuna {}",
                psu.id, hh.comunas[psu.comuna].id
            )));
        }
        theta.push(data.psu_sums[p] / psu.households.len() as f64);
    }
    let mut mu = Vec::with_capacity(hh.strata.len());
    for stratum in &hh.strata {
        let (n, sum) = stratum.psus.iter().fold((0usize, 0.0), |(n, sum), &p| {
            (
                n + hh.psus[p].households.len(),
                sum + hh.psus[p]
                    .households
                    .iter()
                    .map(|&h| hh.records[h].t_income)
                    .sum::<f64>(),
            )
        });
        if n == 0 {
            return Err(SamplerError::EmptyGroup(format!(
                "urbanicity {} of comuna {}",
                stratum.urbanicity, hh.comunas[stratum.comuna].id
            )));
        }
        mu.push(sum / n as f64);
    }

    let p = data.p();
    let mut beta = [vec![0.0; p], vec![0.0; p]];
    for u in Urbanicity::ALL {
        let rows: Vec<usize> = (0..hh.strata.len())
            .filter(|&s| hh.strata[s].urbanicity == u)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let x = DMatrix::from_fn(rows.len(), p, |i, j| {
            data.design[hh.strata[rows[i]].comuna][j]
        });
        let y = DVector::from_fn(rows.len(), |i, _| mu[rows[i]]);
        let gram = x.transpose() * &x + DMatrix::identity(p, p) * INIT_RIDGE;
        let solved = gram
            .cholesky()
            .ok_or(SamplerError::SingularPosteriorCovariance { urbanicity: u })?
            .solve(&(x.transpose() * y));
        beta[u.index()] = solved.iter().copied().collect();
    }

    let mut state = ModelState {
        theta,
        mu,
        beta,
        sigma_t: 1.0,
        sigma_theta: 1.0,
        sigma_mu: 1.0,
    };
    let [t, th, m] = sigma_residuals(&state, data);
    let rms = |(n, ss): (usize, f64)| (ss / n as f64).sqrt().max(INIT_SD_FLOOR);
    state.sigma_t = rms(t);
    state.sigma_theta = rms(th);
    state.sigma_mu = rms(m);
    Ok(state)
}

/// Runs one chain from `init`, returning the retained states flattened in
/// [`ParamLayout`] order.
pub fn run_chain_from(
    data: &ModelData,
    priors: &PriorConfig,
    mcmc: &McmcConfig,
    init: ModelState,
    rng: &mut ChainRng,
) -> Result<Vec<f64>, SamplerError> {
    priors.validate()?;
    mcmc.validate()?;
    init.validate(data)?;
    let layout = ParamLayout::new(data);
    let mut state = init;
    for _ in 0..mcmc.burn_in {
        sweep(&mut state, data, priors, mcmc.update_sigmas, rng)?;
    }
    let mut out = Vec::with_capacity(mcmc.draws * layout.dim());
    for _ in 0..mcmc.draws {
        for _ in 0..mcmc.thin {
            sweep(&mut state, data, priors, mcmc.update_sigmas, rng)?;
        }
        layout.push_state(&state, &mut out);
    }
    Ok(out)
}

/// A single chain (chain index 0) from the default initial state.
pub fn run_chain(
    data: &ModelData,
    priors: &PriorConfig,
    mcmc: &McmcConfig,
    seed: u64,
) -> Result<DrawsStore, SamplerError> {
    run_chains(data, priors, mcmc, seed, 1)
}

/// Runs `n_chains` independent chains, in parallel on the current rayon
/// pool. Output does not depend on scheduling.
pub fn run_chains(
    data: &ModelData,
    priors: &PriorConfig,
    mcmc: &McmcConfig,
    master_seed: u64,
    n_chains: usize,
) -> Result<DrawsStore, SamplerError> {
    if n_chains == 0 {
        return Err(SamplerError::InvalidConfig(
            "chains must be at least 1".into(),
        ));
    }
    let init = init_state(data, priors)?;
    let chains = (0..n_chains)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChainRng::new(master_seed, i as u64, data);
            run_chain_from(data, priors, mcmc, init.clone(), &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DrawsStore::new(
        ParamLayout::new(data),
        chains,
        RunMeta {
            seed: master_seed,
            burn_in: mcmc.burn_in,
            draws: mcmc.draws,
            thin: mcmc.thin,
        },
    ))
}
