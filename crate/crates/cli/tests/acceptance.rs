//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Run with
//! `cargo test -p povmap-cli --test acceptance`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use povmap_cli::{execute, Command, RunConfig};
use povmap_core::data::{
    transform_covariates, CovariateTransform, HouseholdRecord, HouseholdTable, ModelData,
    Urbanicity,
};
use povmap_core::decide::{
    exceedance_probabilities, extreme_probabilities, flag, make_thresholds, DecisionReport,
};
use povmap_core::fgt::{
    build_q_matrix, direct_by_comuna, e_g0, e_g1, e_g_alpha, PovertyLines, QMatrix,
};
use povmap_core::sampler::{
    init_state, psrf, run_chain_from, run_chains, update_beta, update_mu, update_sigmas,
    update_theta, ChainRng, DrawsStore, McmcConfig, ModelState, ParamLayout, ParamSelector,
    PriorConfig,
};
use povmap_core::seeded_stream;
use povmap_core::synth::{
    draw_sample, generate_population, mc_oracle_e_g, true_fgt, SampleDesign, SynthConfig,
    SyntheticPopulation, Take,
};

const ORACLE_DRAWS: usize = 10_000_000;
const GRID_POINTS: usize = 20;
const CONDITIONAL_DRAWS: usize = 100_000;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

fn within_budget(outcome: Outcome, elapsed: Duration, budget: Option<Duration>) -> Outcome {
    match budget {
        Some(b) if elapsed > b => Outcome::new(
            false,
            format!(
                "{}; took {:.1} s, budget {} s",
                outcome.detail,
                elapsed.as_secs_f64(),
                b.as_secs()
            ),
        ),
        _ => outcome,
    }
}

// ---------------------------------------------------------------------------
// Criteria 1 and 2: expected FGT contributions

#[derive(Debug, Clone, Copy)]
struct GridPoint {
    theta: f64,
    sigma: f64,
    k: f64,
}

/// Lines log-uniform on [20, 400], SDs uniform on [0.2, 1.5] and locations
/// within 2.5 SDs of the line so no probability is degenerate.
fn random_grid() -> Vec<GridPoint> {
    let mut rng = seeded_stream(20_240_601, 0, 0, 0);
    (0..GRID_POINTS)
        .map(|_| {
            let k = rng.random_range(20f64.ln()..400f64.ln()).exp();
            let sigma = rng.random_range(0.2..1.5);
            let z = rng.random_range(-2.5..2.5);
            GridPoint {
                theta: k.ln_1p() + sigma * z,
                sigma,
                k,
            }
        })
        .collect()
}

/// `(closed form, oracle mean, oracle se)` for each grid point.
fn against_oracle(
    grid: &[GridPoint],
    alpha: f64,
    closed: impl Fn(&GridPoint) -> f64 + Sync,
) -> Vec<(f64, f64, f64)> {
    grid.par_iter()
        .enumerate()
        .map(|(i, g)| {
            let seed = 1000 * (alpha as u64 + 1) + i as u64;
            let (m, se) =
                mc_oracle_e_g(g.theta, g.sigma, g.k, alpha, ORACLE_DRAWS, seed).expect("oracle");
            (closed(g), m, se)
        })
        .collect()
}

fn worst_z(rows: &[(f64, f64, f64)]) -> f64 {
    rows.iter()
        .map(|&(c, m, se)| {
            if se > 0.0 {
                (c - m).abs() / se
            } else if c == m {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

fn criterion_1(grid: &[GridPoint]) -> Outcome {
    let h = against_oracle(grid, 0.0, |g| e_g0(g.theta, g.sigma, g.k.ln_1p()).unwrap());
    let gap = against_oracle(grid, 1.0, |g| e_g1(g.theta, g.sigma, g.k).unwrap());
    let (zh, zg) = (worst_z(&h), worst_z(&gap));
    Outcome::new(
        zh < 4.0 && zg < 4.0,
        format!("max |z| headcount {zh:.2}, gap {zg:.2} over {GRID_POINTS} points, {ORACLE_DRAWS} draws each"),
    )
}

fn criterion_2(grid: &[GridPoint]) -> Outcome {
    let mut worst_rel: f64 = 0.0;
    for g in grid {
        let pairs = [
            (
                e_g_alpha(g.theta, g.sigma, g.k, 0.0).unwrap(),
                e_g0(g.theta, g.sigma, g.k.ln_1p()).unwrap(),
            ),
            (
                e_g_alpha(g.theta, g.sigma, g.k, 1.0).unwrap(),
                e_g1(g.theta, g.sigma, g.k).unwrap(),
            ),
        ];
        for (quad, closed) in pairs {
            worst_rel = worst_rel.max((quad - closed).abs() / closed.abs());
        }
    }
    let severity = against_oracle(grid, 2.0, |g| {
        e_g_alpha(g.theta, g.sigma, g.k, 2.0).unwrap()
    });
    let z = worst_z(&severity);
    Outcome::new(
        worst_rel <= 1e-8 && z < 4.0,
        format!("max relative error {worst_rel:.2e} at alpha 0/1; alpha 2 max |z| {z:.2}"),
    )
}

// ---------------------------------------------------------------------------
// Criterion 3: Gibbs conditionals

fn sample_model(n_comunas: usize, pop_seed: u64, sample_seed: u64) -> ModelData {
    let cfg = SynthConfig {
        n_comunas,
        psus_per_stratum: (3, 4),
        households_per_psu: (20, 30),
        rural_share: 0.5,
        ..SynthConfig::default()
    };
    let pop = generate_population(&cfg, pop_seed).unwrap();
    let design = SampleDesign {
        psus: Take::Count(2),
        households: Take::Count(6),
    };
    let table = draw_sample(&pop, design, sample_seed).unwrap();
    ModelData::with_design(table, pop.comunas.iter().map(|c| c.x.clone()).collect())
}

/// Running first and second moments of several coordinates.
struct Moments {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Moments {
            n: 0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    fn push(&mut self, xs: impl Iterator<Item = f64>) {
        self.n += 1;
        for (i, x) in xs.enumerate() {
            self.sum[i] += x;
            self.sum_sq[i] += x * x;
        }
    }

    fn mean(&self, i: usize) -> f64 {
        self.sum[i] / self.n as f64
    }

    fn var(&self, i: usize) -> f64 {
        let n = self.n as f64;
        (self.sum_sq[i] - n * self.mean(i).powi(2)) / (n - 1.0)
    }

    /// Largest |z| of the sample mean and variance against a normal target.
    fn worst_z(&self, target: &[(f64, f64)]) -> f64 {
        let n = self.n as f64;
        target
            .iter()
            .enumerate()
            .map(|(i, &(m, v))| {
                let zm = (self.mean(i) - m).abs() / (v / n).sqrt();
                let zv = (self.var(i) - v).abs() / (v * (2.0 / (n - 1.0)).sqrt());
                zm.max(zv)
            })
            .fold(0.0, f64::max)
    }
}

fn theta_targets(state: &ModelState, data: &ModelData) -> Vec<(f64, f64)> {
    let hh = &data.households;
    let (st2, sth2) = (state.sigma_t.powi(2), state.sigma_theta.powi(2));
    hh.psus
        .iter()
        .map(|psu| {
            let t: f64 = psu.households.iter().map(|&h| hh.records[h].t_income).sum();
            let precision = psu.households.len() as f64 / st2 + 1.0 / sth2;
            (
                (t / st2 + state.mu[psu.stratum] / sth2) / precision,
                1.0 / precision,
            )
        })
        .collect()
}

fn regression_mean(state: &ModelState, data: &ModelData, s: usize) -> f64 {
    let stratum = &data.households.strata[s];
    let x = &data.design[stratum.comuna];
    x.iter()
        .zip(&state.beta[stratum.urbanicity.index()])
        .map(|(a, b)| a * b)
        .sum()
}

fn mu_targets(state: &ModelState, data: &ModelData) -> Vec<(f64, f64)> {
    let (sth2, smu2) = (state.sigma_theta.powi(2), state.sigma_mu.powi(2));
    data.households
        .strata
        .iter()
        .enumerate()
        .map(|(s, stratum)| {
            let sum: f64 = stratum.psus.iter().map(|&p| state.theta[p]).sum();
            let precision = stratum.psus.len() as f64 / sth2 + 1.0 / smu2;
            (
                (sum / sth2 + regression_mean(state, data, s) / smu2) / precision,
                1.0 / precision,
            )
        })
        .collect()
}

/// Marginal mean and variance of each coefficient, urban then rural, from
/// an explicit inverse of the posterior precision.
fn beta_targets(state: &ModelState, data: &ModelData, beta_sd: f64) -> Vec<(f64, f64)> {
    let hh = &data.households;
    let p = data.p();
    let smu2 = state.sigma_mu.powi(2);
    let mut out = Vec::new();
    for u in Urbanicity::ALL {
        let rows: Vec<usize> = (0..hh.strata.len())
            .filter(|&s| hh.strata[s].urbanicity == u)
            .collect();
        let x = DMatrix::from_fn(rows.len(), p, |i, j| {
            data.design[hh.strata[rows[i]].comuna][j]
        });
        let y = DVector::from_fn(rows.len(), |i, _| state.mu[rows[i]]);
        let precision = x.transpose() * &x / smu2 + DMatrix::identity(p, p) / beta_sd.powi(2);
        let cov = precision.try_inverse().expect("invertible");
        let mean = &cov * (x.transpose() * y) / smu2;
        out.extend((0..p).map(|j| (mean[j], cov[(j, j)])));
    }
    out
}

fn simpson_moments(log_f: impl Fn(f64) -> f64, upper: f64, n: usize) -> (f64, f64) {
    let h = upper / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| (i as f64 * h).max(1e-9)).collect();
    let peak = xs
        .iter()
        .map(|&x| log_f(x))
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (i, &x) in xs.iter().enumerate() {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let f = (log_f(x) - peak).exp() * w;
        m0 += f;
        m1 += f * x;
        m2 += f * x * x;
    }
    let mean = m1 / m0;
    (mean, m2 / m0 - mean * mean)
}

/// Mean and batch-means standard error of an autocorrelated series.
fn batch_means(xs: &[f64], batches: usize) -> (f64, f64) {
    let size = xs.len() / batches;
    let means: Vec<f64> = xs
        .chunks_exact(size)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let b = means.len() as f64;
    let m = means.iter().sum::<f64>() / b;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b - 1.0);
    (m, (var / b).sqrt())
}

/// Largest |z| of slice-sampled SD draws against quadrature moments of the
/// full conditional `sigma^-n exp(-ss / 2 sigma^2 - sigma^2 / 2 scale^2)`.
fn sigma_worst_z(
    state: &ModelState,
    data: &ModelData,
    priors: &PriorConfig,
    rng: &mut ChainRng,
) -> f64 {
    let hh = &data.households;
    let ss_t: f64 = hh
        .psus
        .iter()
        .enumerate()
        .flat_map(|(p, psu)| {
            psu.households
                .iter()
                .map(move |&h| (hh.records[h].t_income - state.theta[p]).powi(2))
        })
        .sum();
    let ss_theta: f64 = hh
        .psus
        .iter()
        .enumerate()
        .map(|(p, psu)| (state.theta[p] - state.mu[psu.stratum]).powi(2))
        .sum();
    let ss_mu: f64 = (0..hh.strata.len())
        .map(|s| (state.mu[s] - regression_mean(state, data, s)).powi(2))
        .sum();
    let targets = [
        (hh.records.len(), ss_t),
        (hh.psus.len(), ss_theta),
        (hh.strata.len(), ss_mu),
    ];
    let scale = priors.sd_prior_scale;

    let mut chain = state.clone();
    let mut series = [Vec::new(), Vec::new(), Vec::new()];
    for _ in 0..CONDITIONAL_DRAWS {
        update_sigmas(&mut chain, data, priors, rng).unwrap();
        series[0].push(chain.sigma_t);
        series[1].push(chain.sigma_theta);
        series[2].push(chain.sigma_mu);
    }
    let mut worst: f64 = 0.0;
    for ((n, ss), xs) in targets.iter().zip(&series) {
        let n = *n as f64;
        let log_f = |s: f64| -n * s.ln() - 0.5 * ss / (s * s) - 0.5 * (s / scale).powi(2);
        let (mean, var) = simpson_moments(log_f, 20.0, 400_000);
        let (m, se) = batch_means(xs, 100);
        worst = worst.max((m - mean).abs() / se);
        let sq: Vec<f64> = xs.iter().map(|s| (s - mean).powi(2)).collect();
        let (v, se) = batch_means(&sq, 100);
        worst = worst.max((v - var).abs() / se);
    }
    worst
}

fn criterion_3() -> Outcome {
    let data = sample_model(6, 8, 1);
    let priors = PriorConfig::default();
    let mut state = init_state(&data, &priors).unwrap();
    state.sigma_t = 0.8;
    state.sigma_theta = 0.3;
    state.sigma_mu = 0.25;
    let mut rng = ChainRng::new(77, 0, &data);

    let mut theta = Moments::new(data.n_psus());
    let mut s = state.clone();
    for _ in 0..CONDITIONAL_DRAWS {
        update_theta(&mut s, &data, &mut rng);
        theta.push(s.theta.iter().copied());
    }
    let z_theta = theta.worst_z(&theta_targets(&state, &data));

    let mut mu = Moments::new(data.n_strata());
    let mut s = state.clone();
    for _ in 0..CONDITIONAL_DRAWS {
        update_mu(&mut s, &data, &mut rng);
        mu.push(s.mu.iter().copied());
    }
    let z_mu = mu.worst_z(&mu_targets(&state, &data));

    let mut beta = Moments::new(2 * data.p());
    let mut s = state.clone();
    for _ in 0..CONDITIONAL_DRAWS {
        update_beta(&mut s, &data, &priors, &mut rng).unwrap();
        beta.push(s.beta[0].iter().chain(&s.beta[1]).copied());
    }
    let z_beta = beta.worst_z(&beta_targets(&state, &data, priors.beta_prior_sd));

    let z_sigma = sigma_worst_z(&state, &data, &priors, &mut rng);
    let worst = z_theta.max(z_mu).max(z_beta).max(z_sigma);
    Outcome::new(
        worst < 4.0,
        format!(
            "max |z| theta {z_theta:.2} ({} PSUs), mu {z_mu:.2} ({} strata), beta {z_beta:.2}, sigma {z_sigma:.2}; {CONDITIONAL_DRAWS} draws each",
            data.n_psus(),
            data.n_strata()
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 4: linear-Gaussian posterior with frozen SDs

/// Two comunas with both strata, six PSUs in all, intercept-only design:
/// six thetas, four mus and two betas.
fn gaussian_fixture() -> ModelData {
    let mut rng = seeded_stream(4, 0, 0, 0);
    let layout = [
        ("A", Urbanicity::Urban, 2),
        ("A", Urbanicity::Rural, 1),
        ("B", Urbanicity::Urban, 2),
        ("B", Urbanicity::Rural, 1),
    ];
    let mut records = Vec::new();
    for (c, u, n_psus) in layout {
        for p in 0..n_psus {
            let psu = format!("{c}{}{p}", u.code());
            let shift = rng.random_range(-0.5..0.5);
            for h in 0..5 {
                let t: f64 = 2.0 + shift + rng.random_range(-1.0..1.0);
                let id = format!("{psu}-{h}");
                records.push(HouseholdRecord::new(c, u, psu.clone(), id, t.exp_m1(), 1.0).unwrap());
            }
        }
    }
    let table = HouseholdTable::from_records(records).unwrap();
    ModelData::with_design(table, vec![vec![1.0]; 2])
}

/// Exact posterior mean of (theta, mu, beta) given the SDs, by assembling
/// the joint precision and solving densely.
fn dense_posterior_mean(data: &ModelData, state: &ModelState, beta_sd: f64) -> Vec<f64> {
    let hh = &data.households;
    let (n_p, n_s) = (hh.psus.len(), hh.strata.len());
    let dim = n_p + n_s + 2;
    let mut prec = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    let couple = |prec: &mut DMatrix<f64>, i: usize, j: usize, w: f64| {
        prec[(i, i)] += w;
        prec[(j, j)] += w;
        prec[(i, j)] -= w;
        prec[(j, i)] -= w;
    };
    let a_t = 1.0 / state.sigma_t.powi(2);
    for (p, psu) in hh.psus.iter().enumerate() {
        for &h in &psu.households {
            prec[(p, p)] += a_t;
            rhs[p] += a_t * hh.records[h].t_income;
        }
        couple(
            &mut prec,
            p,
            n_p + psu.stratum,
            1.0 / state.sigma_theta.powi(2),
        );
    }
    for (s, stratum) in hh.strata.iter().enumerate() {
        couple(
            &mut prec,
            n_p + s,
            n_p + n_s + stratum.urbanicity.index(),
            1.0 / state.sigma_mu.powi(2),
        );
    }
    for u in 0..2 {
        prec[(n_p + n_s + u, n_p + n_s + u)] += 1.0 / beta_sd.powi(2);
    }
    let mean = prec.lu().solve(&rhs).expect("nonsingular precision");
    mean.iter().copied().collect()
}

fn criterion_4() -> Outcome {
    let data = gaussian_fixture();
    let priors = PriorConfig::default();
    let layout = ParamLayout::new(&data);
    let mut init = init_state(&data, &priors).unwrap();
    init.sigma_t = 0.6;
    init.sigma_theta = 0.4;
    init.sigma_mu = 0.5;
    let exact = dense_posterior_mean(&data, &init, priors.beta_prior_sd);

    let mcmc = McmcConfig {
        burn_in: 1000,
        draws: 100_000,
        thin: 1,
        update_sigmas: false,
    };
    let n_chains = 4;
    let chains: Vec<Vec<f64>> = (0..n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChainRng::new(404, c as u64, &data);
            run_chain_from(&data, &priors, &mcmc, init.clone(), &mut rng).unwrap()
        })
        .collect();

    let hh = &data.households;
    let (n_p, n_s) = (hh.psus.len(), hh.strata.len());
    let mut indices: Vec<(usize, usize)> = (0..n_p).map(|p| (p, layout.theta_index(p))).collect();
    indices.extend((0..n_s).map(|s| (n_p + s, layout.mu_index(s))));
    indices.extend(
        Urbanicity::ALL
            .iter()
            .map(|&u| (n_p + n_s + u.index(), layout.beta_index(u, 0))),
    );

    let dim = layout.dim();
    let mut worst: f64 = 0.0;
    for &(oracle_i, i) in &indices {
        // batches never straddle two chains
        let mut batch_means_all = Vec::new();
        for chain in &chains {
            let series: Vec<f64> = chain.chunks_exact(dim).map(|row| row[i]).collect();
            let size = series.len() / 50;
            batch_means_all.extend(
                series
                    .chunks_exact(size)
                    .map(|b| b.iter().sum::<f64>() / size as f64),
            );
        }
        let b = batch_means_all.len() as f64;
        let m = batch_means_all.iter().sum::<f64>() / b;
        let var = batch_means_all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b - 1.0);
        worst = worst.max((m - exact[oracle_i]).abs() / (var / b).sqrt());
    }
    Outcome::new(
        worst < 3.0 && indices.len() <= 12,
        format!(
            "{} dimensions, max |z| {worst:.2} (batch means, {n_chains} chains x {})",
            indices.len(),
            mcmc.draws
        ),
    )
}

// ---------------------------------------------------------------------------
// Criteria 5 and 7: synthetic recovery and index ordering

struct SyntheticRun {
    pop: SyntheticPopulation,
    sample: HouseholdTable,
    draws: DrawsStore,
    data: ModelData,
    lines: PovertyLines,
}

fn recovery_config() -> SynthConfig {
    SynthConfig {
        n_comunas: 30,
        n_covariates: 2,
        beta: [vec![5.6, 0.35, -0.25], vec![5.2, 0.35, -0.25]],
        sigma_t: 0.8,
        sigma_theta: 0.2,
        sigma_mu: 0.15,
        psus_per_stratum: (4, 8),
        households_per_psu: (80, 150),
        rural_share: 1.0,
    }
}

fn synthetic_run(cfg: &SynthConfig, seed: u64, mcmc: &McmcConfig, chains: usize) -> SyntheticRun {
    let pop = generate_population(cfg, seed).unwrap();
    let design = SampleDesign {
        psus: Take::Count(2),
        households: Take::Count(10),
    };
    let sample = draw_sample(&pop, design, seed).unwrap();
    let raw = pop.covariates();
    let transforms_by_column: BTreeMap<String, CovariateTransform> = raw
        .names
        .iter()
        .map(|n| (n.clone(), CovariateTransform::Identity))
        .collect();
    let covariates = transform_covariates(&raw, &transforms_by_column).unwrap();
    let data = ModelData::new(sample.clone(), &covariates).unwrap();
    let draws = run_chains(&data, &PriorConfig::default(), mcmc, seed, chains).unwrap();
    SyntheticRun {
        pop,
        sample,
        draws,
        data,
        lines: PovertyLines::new(120.0, 80.0).unwrap(),
    }
}

/// Linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn criterion_5(run: &SyntheticRun, elapsed_fit: Duration) -> Outcome {
    let start = Instant::now();
    let q = build_q_matrix(&run.draws, &run.sample, run.lines, 0.0).unwrap();
    let truth = true_fgt(&run.pop, run.lines, 0.0);
    let direct = direct_by_comuna(&run.sample, run.lines, 0.0).unwrap();
    let mut covered = 0;
    let mut means = Vec::new();
    for (c, row) in q.rows().enumerate() {
        let mut sorted = row.to_vec();
        sorted.sort_by(f64::total_cmp);
        if (quantile(&sorted, 0.05)..=quantile(&sorted, 0.95)).contains(&truth[c]) {
            covered += 1;
        }
        means.push(row.iter().sum::<f64>() / row.len() as f64);
    }
    let (model_rmse, direct_rmse) = (rmse(&means, &truth), rmse(&direct, &truth));
    let rhat = psrf(&run.draws, &ParamSelector::All).unwrap();
    let (worst_name, worst_rhat) = rhat.iter().fold(("", f64::NEG_INFINITY), |acc, (n, r)| {
        if !(*r <= acc.1) {
            (n.as_str(), *r)
        } else {
            acc
        }
    });
    let total = elapsed_fit + start.elapsed();
    let sizes: Vec<usize> = (0..run.data.households.n_comunas())
        .map(|c| run.sample.comuna_records(c).count())
        .collect();
    let outcome = Outcome::new(
        covered >= 24 && model_rmse < direct_rmse && worst_rhat < 1.1,
        format!(
            "coverage {covered}/30, RMSE model {model_rmse:.4} vs direct {direct_rmse:.4}, max R-hat {worst_rhat:.4} ({worst_name}, {} monitored), households per comuna {}..{}, {:.1} s",
            rhat.len(),
            sizes.iter().min().unwrap(),
            sizes.iter().max().unwrap(),
            total.as_secs_f64()
        ),
    );
    within_budget(outcome, total, Some(Duration::from_secs(300)))
}

fn ordering_violations(rate: &QMatrix, gap: &QMatrix) -> usize {
    assert_eq!(
        (rate.n_comunas(), rate.n_draws()),
        (gap.n_comunas(), gap.n_draws())
    );
    rate.rows()
        .zip(gap.rows())
        .map(|(r, g)| r.iter().zip(g).filter(|(a, b)| b > a).count())
        .sum()
}

fn criterion_7(runs: &[&SyntheticRun], pipeline_dirs: &[&Path]) -> Outcome {
    let mut checked = 0;
    let mut violations = 0;
    for run in runs {
        let rate = build_q_matrix(&run.draws, &run.sample, run.lines, 0.0).unwrap();
        let gap = build_q_matrix(&run.draws, &run.sample, run.lines, 1.0).unwrap();
        violations += ordering_violations(&rate, &gap);
        checked += rate.n_comunas() * rate.n_draws();
    }
    for dir in pipeline_dirs {
        let read = |alpha: f64| {
            let f = std::fs::File::open(dir.join(format!("out/qmatrix_alpha{alpha}.csv"))).unwrap();
            QMatrix::read_csv(f, alpha).unwrap()
        };
        let (rate, gap) = (read(0.0), read(1.0));
        violations += ordering_violations(&rate, &gap);
        checked += rate.n_comunas() * rate.n_draws();
    }
    Outcome::new(
        violations == 0,
        format!(
            "{violations} violations in {checked} entries over {} runs",
            runs.len() + pipeline_dirs.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 6: decision layer against exhaustive counting

fn count_above(row: &[f64], a: f64) -> usize {
    let mut sorted = row.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.len() - sorted.partition_point(|&v| v <= a)
}

/// Counts of draws in which each comuna is the (first) maximum and minimum,
/// by pairwise comparison.
#[allow(clippy::needless_range_loop)]
fn rank_counts(rows: &[Vec<f64>]) -> (Vec<usize>, Vec<usize>) {
    let (c, r) = (rows.len(), rows[0].len());
    let mut max = vec![0; c];
    let mut min = vec![0; c];
    for j in 0..r {
        for i in 0..c {
            let v = rows[i][j];
            let beats = |cmp: fn(f64, f64) -> bool, strict: fn(f64, f64) -> bool| {
                (0..c).all(|o| {
                    o == i
                        || if o < i {
                            strict(v, rows[o][j])
                        } else {
                            cmp(v, rows[o][j])
                        }
                })
            };
            if beats(|a, b| a >= b, |a, b| a > b) {
                max[i] += 1;
            }
            if beats(|a, b| a <= b, |a, b| a < b) {
                min[i] += 1;
            }
        }
    }
    (max, min)
}

fn criterion_6() -> Outcome {
    let multipliers = [1.10, 1.25, 1.50];
    let mut rng = seeded_stream(6, 0, 0, 0);
    let mut mismatches = 0;
    let mut worst_sum_err: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..100 {
        let regional = rng.random_range(0.1..0.5);
        let thresholds: Vec<f64> = make_thresholds(regional, &multipliers)
            .unwrap()
            .iter()
            .map(|t| t.value)
            .collect();
        // repeated levels, including the thresholds themselves, force ties
        let mut levels = thresholds.clone();
        levels.extend([0.2, 0.3, 0.45]);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                (0..50)
                    .map(|_| {
                        if rng.random_bool(0.3) {
                            levels[rng.random_range(0..levels.len())]
                        } else {
                            rng.random_range(0.0..1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let ids = (0..10).map(|i| format!("c{i}")).collect();
        let q = QMatrix::from_rows(ids, 0.0, rows.clone());

        let probs = exceedance_probabilities(&q, &thresholds).unwrap();
        let flags = flag(&probs, 0.5).unwrap();
        let extremes = extreme_probabilities(&q).unwrap();
        let report = DecisionReport::build(&q, regional, &multipliers, 0.5).unwrap();
        let (max_n, min_n) = rank_counts(&rows);
        for (c, row) in rows.iter().enumerate() {
            let expected: Vec<f64> = thresholds
                .iter()
                .map(|&a| count_above(row, a) as f64 / 50.0)
                .collect();
            let expected_flags: Vec<bool> = thresholds
                .iter()
                .map(|&a| count_above(row, a) > 25)
                .collect();
            mismatches += usize::from(probs[c] != expected)
                + usize::from(flags[c] != expected_flags)
                + usize::from(report.comunas[c].exceedance != expected)
                + usize::from(report.comunas[c].flags != expected_flags)
                + usize::from(extremes.prob_max[c] != max_n[c] as f64 / 50.0)
                + usize::from(extremes.prob_min[c] != min_n[c] as f64 / 50.0)
                + usize::from(report.comunas[c].prob_max != max_n[c] as f64 / 50.0);
            monotone &= probs[c].windows(2).all(|w| w[0] >= w[1]);
        }
        for v in [&extremes.prob_max, &extremes.prob_min] {
            worst_sum_err = worst_sum_err.max((v.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Outcome::new(
        mismatches == 0 && worst_sum_err <= 1e-12 && monotone,
        format!(
            "{mismatches} mismatches on 100 matrices of 10x50, max |sum - 1| {worst_sum_err:.1e}, exceedance monotone: {monotone}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 8: byte-identical pipeline output

const PIPELINE_SIM: &str = r#"
poverty_line_urban = 120.0
poverty_line_rural = 80.0
alphas = [0.0, 1.0, 2.0]
seed = 31
out_dir = "data"

[simulate]
n_comunas = 10
n_covariates = 2
beta_urban = [5.6, 0.35, -0.25]
beta_rural = [5.2, 0.35, -0.25]
sigma_t = 0.8
sigma_theta = 0.2
sigma_mu = 0.15
psus_per_stratum = [3, 6]
households_per_psu = [40, 80]
rural_share = 0.6
sample_psus = 2
sample_households = 8
"#;

const PIPELINE_RUN: &str = r#"
households = "data/sample.csv"
covariates = "data/covariates.csv"
covariate_transforms = { x1 = "identity", x2 = "identity" }
poverty_line_urban = 120.0
poverty_line_rural = 80.0
alphas = [0.0, 1.0, 2.0]
burn_in = 300
draws = 300
chains = 3
seed = 31
out_dir = "out"
"#;

fn run_pipeline(dir: &Path, threads: usize) {
    let mut sink = std::io::sink();
    let mut sim = RunConfig::from_toml(PIPELINE_SIM, dir).unwrap();
    sim.threads = threads;
    execute(Command::Simulate, &sim, &mut sink).unwrap();
    let mut run = RunConfig::from_toml(PIPELINE_RUN, dir).unwrap();
    run.threads = threads;
    execute(Command::Validate, &run, &mut sink).unwrap();
    execute(Command::Run, &run, &mut sink).unwrap();
    execute(Command::Diagnose, &run, &mut sink).unwrap();
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_8(dirs: &[(&Path, usize)]) -> Outcome {
    for &(dir, threads) in dirs {
        run_pipeline(dir, threads);
    }
    let snaps: Vec<_> = dirs.iter().map(|(d, _)| snapshot(d)).collect();
    let reference = &snaps[0];
    let mut differing: Vec<String> = Vec::new();
    for (snap, (_, threads)) in snaps.iter().zip(dirs).skip(1) {
        let names: Vec<&String> = reference.keys().chain(snap.keys()).collect();
        for name in names {
            if reference.get(name) != snap.get(name) {
                differing.push(format!("{name} (threads {threads})"));
            }
        }
    }
    differing.dedup();
    let threads: Vec<String> = dirs.iter().map(|(_, t)| t.to_string()).collect();
    let bytes: usize = reference.values().map(Vec::len).sum();
    Outcome::new(
        differing.is_empty() && !reference.is_empty(),
        if differing.is_empty() {
            format!(
                "{} files, {bytes} bytes identical across runs with threads {}",
                reference.len(),
                threads.join("/")
            )
        } else {
            format!("differing files: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, outcome: Outcome| {
        println!(
            "criterion {n} [{name}]: {} ({})",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
        results.push((n, name, outcome));
    };

    let grid = random_grid();
    let t = Instant::now();
    let o = criterion_1(&grid);
    report(
        1,
        "closed forms vs Monte Carlo",
        within_budget(o, t.elapsed(), Some(Duration::from_secs(120))),
    );

    report(2, "quadrature consistency", criterion_2(&grid));
    report(3, "Gibbs conditionals", criterion_3());

    let t = Instant::now();
    let o = criterion_4();
    report(
        4,
        "linear-Gaussian oracle",
        within_budget(o, t.elapsed(), Some(Duration::from_secs(60))),
    );

    let mcmc = McmcConfig {
        burn_in: 2000,
        draws: 2000,
        thin: 1,
        update_sigmas: true,
    };
    let t = Instant::now();
    let recovery = synthetic_run(&recovery_config(), 2024, &mcmc, 4);
    report(
        5,
        "end-to-end recovery",
        criterion_5(&recovery, t.elapsed()),
    );

    report(6, "decision-layer exactness", criterion_6());

    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<_> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    let o8 = criterion_8(&[(&dirs[0], 1), (&dirs[1], 4), (&dirs[2], 1)]);

    let noisy = SynthConfig {
        n_comunas: 12,
        sigma_t: 1.2,
        sigma_theta: 0.35,
        rural_share: 0.5,
        ..recovery_config()
    };
    let short = McmcConfig {
        burn_in: 300,
        draws: 500,
        ..mcmc
    };
    let extra = synthetic_run(&noisy, 9, &short, 2);
    let pipeline_dirs: Vec<&Path> = dirs.iter().map(|d| d.as_path()).collect();
    report(
        7,
        "index ordering",
        criterion_7(&[&recovery, &extra], &pipeline_dirs),
    );
    report(8, "determinism", o8);

    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.2.pass)
        .map(|r| r.0.to_string())
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
