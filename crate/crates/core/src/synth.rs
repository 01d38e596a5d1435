//! Synthetic finite populations drawn from the three-level model, two-stage
//! samples from them, and brute-force oracles with known truth.
//!
//! Every generator is a pure function of its configuration and seed.
//! Comunas draw from their own streams, so generation runs in parallel
//! across comunas without changing the result.

use std::io::Write;

use log::debug;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{DataError, HouseholdRecord, HouseholdTable, RawCovariates, Urbanicity};
use crate::fgt::{g_alpha, PovertyLines};
use crate::{format_float, seeded_stream};

const TAG_COVARIATES: u8 = 2;
const TAG_POPULATION: u8 = 3;
const TAG_SAMPLE: u8 = 4;
const TAG_ORACLE: u8 = 5;

/// Redraws allowed for one household before generation gives up.
const MAX_REDRAWS: usize = 10_000;

/// Smallest Monte Carlo size [`mc_oracle_e_g`] accepts.
pub const MIN_ORACLE_DRAWS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid population sizes: {0}")]
    InvalidSizes(String),
    #[error("invalid generative parameter: {0}")]
    InvalidParameter(String),
    #[error("transformed income kept falling below 0 in comuna {comuna} ({redraws} redraws)")]
    IncomeRedrawLimit { comuna: String, redraws: usize },
    #[error("infeasible design: {0}")]
    InfeasibleDesign(String),
    #[error("Monte Carlo oracle needs at least {MIN_ORACLE_DRAWS} draws, got {0}")]
    TooFewOracleDraws(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("writing output: {0}")]
    Output(String),
}

/// Sizes and true parameters of a synthetic region.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_comunas: usize,
    /// Covariates besides the intercept, each drawn from N(0, 1).
    pub n_covariates: usize,
    /// Urban then rural coefficients, intercept first.
    pub beta: [Vec<f64>; 2],
    pub sigma_t: f64,
    pub sigma_theta: f64,
    pub sigma_mu: f64,
    /// Inclusive range of PSUs per stratum.
    pub psus_per_stratum: (usize, usize),
    /// Inclusive range of households per PSU.
    pub households_per_psu: (usize, usize),
    /// Probability that a comuna has a rural stratum. Every comuna has an
    /// urban stratum.
    pub rural_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_comunas: 30,
            n_covariates: 2,
            beta: [vec![5.6, 0.35, -0.25], vec![5.2, 0.35, -0.25]],
            sigma_t: 0.8,
            sigma_theta: 0.2,
            sigma_mu: 0.15,
            psus_per_stratum: (6, 10),
            households_per_psu: (80, 150),
            rural_share: 0.4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let sizes = |m: String| Err(SynthError::InvalidSizes(m));
        if self.n_comunas == 0 {
            return sizes("n_comunas must be at least 1".into());
        }
        for (name, (lo, hi)) in [
            ("psus_per_stratum", self.psus_per_stratum),
            ("households_per_psu", self.households_per_psu),
        ] {
            if lo == 0 || lo > hi {
                return sizes(format!(
                    "{name} range ({lo}, {hi}) must satisfy 1 <= lo <= hi"
                ));
            }
        }
        for (u, b) in self.beta.iter().enumerate() {
            if b.len() != self.n_covariates + 1 {
                return Err(SynthError::InvalidParameter(format!(
                    "beta[{}] has {} entries, expected {}",
                    u + 1,
                    b.len(),
                    self.n_covariates + 1
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(SynthError::InvalidParameter("beta must be finite".into()));
            }
        }
        for (name, v) in [
            ("sigma_t", self.sigma_t),
            ("sigma_theta", self.sigma_theta),
            ("sigma_mu", self.sigma_mu),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SynthError::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.rural_share) {
            return Err(SynthError::InvalidParameter(format!(
                "rural_share must lie in [0, 1], got {}",
                self.rural_share
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopPsu {
    pub id: String,
    pub theta: f64,
    pub incomes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopStratum {
    pub urbanicity: Urbanicity,
    pub mu: f64,
    pub psus: Vec<PopPsu>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopComuna {
    pub id: String,
    /// Leading 1 followed by the covariates.
    pub x: Vec<f64>,
    /// Urban stratum first.
    pub strata: Vec<PopStratum>,
    /// Times a negative transformed income was redrawn.
    pub redraws: usize,
}

impl PopComuna {
    /// Household count `N_c`.
    pub fn n_households(&self) -> usize {
        self.strata
            .iter()
            .flat_map(|s| &s.psus)
            .map(|p| p.incomes.len())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPopulation {
    pub config: SynthConfig,
    pub seed: u64,
    pub comunas: Vec<PopComuna>,
}

pub fn comuna_id(c: usize) -> String {
    format!("C{:03}", c + 1)
}

/// Draws covariates, then for each comuna the stratum means, PSU means and
/// transformed incomes. Transformed incomes below zero are redrawn so every
/// income `exp(T) - 1` is nonnegative.
pub fn generate_population(
    config: &SynthConfig,
    seed: u64,
) -> Result<SyntheticPopulation, SynthError> {
    config.validate()?;
    let mut cov_rng = seeded_stream(seed, 0, TAG_COVARIATES, 0);
    let xs: Vec<Vec<f64>> = (0..config.n_comunas)
        .map(|_| {
            let mut x = vec![1.0];
            x.extend((0..config.n_covariates).map(|_| cov_rng.sample::<f64, _>(StandardNormal)));
            x
        })
        .collect();
    let comunas = xs
        .into_par_iter()
        .enumerate()
        .map(|(c, x)| generate_comuna(config, seed, c, x))
        .collect::<Result<Vec<_>, _>>()?;
    let redraws: usize = comunas.iter().map(|c| c.redraws).sum();
    debug!("synthetic population: {redraws} negative transformed incomes redrawn");
    Ok(SyntheticPopulation {
        config: config.clone(),
        seed,
        comunas,
    })
}

fn generate_comuna(
    config: &SynthConfig,
    seed: u64,
    c: usize,
    x: Vec<f64>,
) -> Result<PopComuna, SynthError> {
    let id = comuna_id(c);
    let mut rng = seeded_stream(seed, c as u64 + 1, TAG_POPULATION, 0);
    let has_rural = rng.random::<f64>() < config.rural_share;
    let mut redraws = 0;
    let mut strata = Vec::new();
    for u in Urbanicity::ALL {
        if u == Urbanicity::Rural && !has_rural {
            continue;
        }
        let mean: f64 = x
            .iter()
            .zip(&config.beta[u.index()])
            .map(|(a, b)| a * b)
            .sum();
        let mu = mean + config.sigma_mu * rng.sample::<f64, _>(StandardNormal);
        let m = rng.random_range(config.psus_per_stratum.0..=config.psus_per_stratum.1);
        let mut psus = Vec::with_capacity(m);
        for p in 0..m {
            let theta = mu + config.sigma_theta * rng.sample::<f64, _>(StandardNormal);
            let n = rng.random_range(config.households_per_psu.0..=config.households_per_psu.1);
            let mut incomes = Vec::with_capacity(n);
            for _ in 0..n {
                let mut tries = 0;
                let t = loop {
                    let t = theta + config.sigma_t * rng.sample::<f64, _>(StandardNormal);
                    if t >= 0.0 {
                        break t;
                    }
                    tries += 1;
                    if tries > MAX_REDRAWS {
                        return Err(SynthError::IncomeRedrawLimit {
                            comuna: id,
                            redraws: tries,
                        });
                    }
                };
                redraws += tries;
                incomes.push(t.exp_m1());
            }
            psus.push(PopPsu {
                id: format!("{id}-{}-{:03}", u.code(), p + 1),
                theta,
                incomes,
            });
        }
        strata.push(PopStratum {
            urbanicity: u,
            mu,
            psus,
        });
    }
    Ok(PopComuna {
        id,
        x,
        strata,
        redraws,
    })
}

impl SyntheticPopulation {
    pub fn n_households(&self) -> usize {
        self.comunas.iter().map(PopComuna::n_households).sum()
    }

    pub fn redraws(&self) -> usize {
        self.comunas.iter().map(|c| c.redraws).sum()
    }

    /// Covariates without the intercept, named `x1..xp`.
    pub fn covariates(&self) -> RawCovariates {
        RawCovariates {
            names: (1..=self.config.n_covariates)
                .map(|j| format!("x{j}"))
                .collect(),
            comunas: self.comunas.iter().map(|c| c.id.clone()).collect(),
            values: self.comunas.iter().map(|c| c.x[1..].to_vec()).collect(),
        }
    }

    /// Every household with weight 1.
    pub fn census_records(&self) -> Vec<HouseholdRecord> {
        let mut out = Vec::with_capacity(self.n_households());
        for c in &self.comunas {
            for s in &c.strata {
                for p in &s.psus {
                    for (h, &y) in p.incomes.iter().enumerate() {
                        out.push(record(&c.id, s.urbanicity, &p.id, h, y, 1.0));
                    }
                }
            }
        }
        out
    }

    /// Generative truth as `key = value` lines.
    pub fn write_true_params<W: Write>(&self, mut w: W) -> Result<(), SynthError> {
        let cfg = &self.config;
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("n_comunas = {}", cfg.n_comunas),
            format!("n_households = {}", self.n_households()),
            format!("income_redraws = {}", self.redraws()),
            format!("sigma_t = {}", format_float(cfg.sigma_t)),
            format!("sigma_theta = {}", format_float(cfg.sigma_theta)),
            format!("sigma_mu = {}", format_float(cfg.sigma_mu)),
        ];
        for u in Urbanicity::ALL {
            for (j, b) in cfg.beta[u.index()].iter().enumerate() {
                lines.push(format!("beta[{u}:{j}] = {}", format_float(*b)));
            }
        }
        for c in &self.comunas {
            for s in &c.strata {
                lines.push(format!(
                    "mu[{}:{}] = {}",
                    c.id,
                    s.urbanicity,
                    format_float(s.mu)
                ));
                for p in &s.psus {
                    lines.push(format!(
                        "theta[{}:{}:{}] = {}",
                        c.id,
                        s.urbanicity,
                        p.id,
                        format_float(p.theta)
                    ));
                }
            }
        }
        for line in lines {
            writeln!(w, "{line}").map_err(|e| SynthError::Output(e.to_string()))?;
        }
        Ok(())
    }
}

fn record(
    comuna: &str,
    u: Urbanicity,
    psu: &str,
    h: usize,
    income: f64,
    weight: f64,
) -> HouseholdRecord {
    HouseholdRecord::new(
        comuna,
        u,
        psu,
        format!("{psu}-{:04}", h + 1),
        income,
        weight,
    )
    .expect("generated incomes and weights are valid")
}

/// How many units to take at one sampling stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Take {
    All,
    Count(usize),
}

impl Take {
    fn resolve(self, available: usize, what: &str) -> Result<usize, SynthError> {
        match self {
            Take::All => Ok(available),
            Take::Count(0) => Err(SynthError::InfeasibleDesign(format!(
                "{what}: cannot sample 0 units"
            ))),
            Take::Count(k) if k > available => Err(SynthError::InfeasibleDesign(format!(
                "{what}: {k} requested but only {available} available"
            ))),
            Take::Count(k) => Ok(k),
        }
    }
}

/// Equal-probability two-stage design: simple random sampling without
/// replacement of PSUs within each stratum, then of households within each
/// sampled PSU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleDesign {
    pub psus: Take,
    pub households: Take,
}

impl SampleDesign {
    pub const CENSUS: SampleDesign = SampleDesign {
        psus: Take::All,
        households: Take::All,
    };
}

/// Draws a sample with weights `(M_cu / m_cu) (N_cup / n_cup)`.
pub fn draw_sample(
    pop: &SyntheticPopulation,
    design: SampleDesign,
    seed: u64,
) -> Result<HouseholdTable, SynthError> {
    let mut records = Vec::new();
    for (c, comuna) in pop.comunas.iter().enumerate() {
        let mut rng = seeded_stream(seed, c as u64 + 1, TAG_SAMPLE, 0);
        for s in &comuna.strata {
            let big_m = s.psus.len();
            let m = design.psus.resolve(
                big_m,
                &format!("comuna {} stratum {}", comuna.id, s.urbanicity),
            )?;
            let mut chosen = sample_indices(&mut rng, big_m, m).into_vec();
            chosen.sort_unstable();
            for p in chosen {
                let psu = &s.psus[p];
                let big_n = psu.incomes.len();
                let n = design
                    .households
                    .resolve(big_n, &format!("PSU {}", psu.id))?;
                let mut hh = sample_indices(&mut rng, big_n, n).into_vec();
                hh.sort_unstable();
                let w = (big_m as f64 / m as f64) * (big_n as f64 / n as f64);
                for h in hh {
                    records.push(record(
                        &comuna.id,
                        s.urbanicity,
                        &psu.id,
                        h,
                        psu.incomes[h],
                        w,
                    ));
                }
            }
        }
    }
    Ok(HouseholdTable::from_records(records)?)
}

/// Exact finite-population FGT index of every comuna by enumeration.
pub fn true_fgt(pop: &SyntheticPopulation, lines: PovertyLines, alpha: f64) -> Vec<f64> {
    pop.comunas
        .iter()
        .map(|c| {
            let mut total = 0.0;
            let mut n = 0usize;
            for s in &c.strata {
                let k = lines.k(s.urbanicity);
                for p in &s.psus {
                    total += p.incomes.iter().map(|&y| g_alpha(y, k, alpha)).sum::<f64>();
                    n += p.incomes.len();
                }
            }
            total / n as f64
        })
        .collect()
}

/// Monte Carlo estimate of `E[g_alpha(exp(T) - 1) 1{T >= 0}]` for
/// `T ~ N(theta, sigma^2)`, with its standard error.
pub fn mc_oracle_e_g(
    theta: f64,
    sigma: f64,
    k: f64,
    alpha: f64,
    n_draws: usize,
    seed: u64,
) -> Result<(f64, f64), SynthError> {
    if n_draws < MIN_ORACLE_DRAWS {
        return Err(SynthError::TooFewOracleDraws(n_draws));
    }
    let mut rng = seeded_stream(seed, 0, TAG_ORACLE, 0);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_draws {
        let t = theta + sigma * rng.sample::<f64, _>(StandardNormal);
        let g = if t >= 0.0 {
            g_alpha(t.exp_m1(), k, alpha)
        } else {
            0.0
        };
        sum += g;
        sum_sq += g * g;
    }
    let n = n_draws as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}
