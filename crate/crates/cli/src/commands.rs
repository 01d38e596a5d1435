use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use povmap_core::data::{
    check_households, load_households, load_raw_covariates, roster_mismatches,
    transform_covariates, write_household_records, write_households, write_raw_covariates,
    CovariateTransform, DataError, ModelData,
};
use povmap_core::decide::DecisionReport;
use povmap_core::fgt::{build_q_matrix, direct_estimate, Domain, PovertyLines, QMatrix};
use povmap_core::format_float;
use povmap_core::sampler::{
    psrf, run_chains, DrawsStore, ParamLayout, ParamSelector, RunMeta, MIN_DRAWS,
};
use povmap_core::synth::{draw_sample, generate_population, true_fgt, SynthConfig};

use crate::config::{RunConfig, SimulateConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// R-hat at or above this value triggers a convergence warning.
pub const RHAT_WARNING: f64 = 1.1;

pub const DRAWS_FILE: &str = "draws.csv";
pub const FIT_META_FILE: &str = "fit_meta.json";
pub const PSRF_FILE: &str = "psrf.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub kind: String,
    pub message: String,
}

impl Issue {
    pub fn config(message: impl Into<String>) -> Self {
        Issue {
            kind: "Config".into(),
            message: message.into(),
        }
    }
}

impl From<&DataError> for Issue {
    fn from(e: &DataError) -> Self {
        Issue {
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

/// Every problem found in the configuration and input files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub errors: Vec<Issue>,
}

impl ValidationReport {
    pub fn from_issues(errors: Vec<Issue>) -> Self {
        ValidationReport {
            ok: errors.is_empty(),
            errors,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug)]
pub enum CliError {
    Validation(ValidationReport),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(r) => {
                write!(f, "validation failed with {} error(s)", r.errors.len())
            }
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

/// Validated model inputs.
pub struct Inputs {
    pub data: ModelData,
    pub lines: PovertyLines,
}

/// Checks configuration and input files, collecting every problem. Inputs
/// are returned only when there are none.
pub fn validate_inputs(cfg: &RunConfig) -> (ValidationReport, Option<Inputs>) {
    let mut issues: Vec<Issue> = cfg.problems().into_iter().map(Issue::config).collect();
    let mut distinct = cfg.alphas.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() != cfg.alphas.len() {
        issues.push(Issue::config("alphas must be distinct"));
    }

    let hh_ok = match cfg.households_path() {
        Ok(path) => {
            let errors = check_households(path);
            issues.extend(errors.iter().map(Issue::from));
            errors.is_empty()
        }
        Err(m) => {
            issues.push(Issue::config(m));
            false
        }
    };

    let mut transforms = BTreeMap::new();
    for (name, tag) in &cfg.covariate_transforms {
        match tag.parse::<CovariateTransform>() {
            Ok(t) => {
                transforms.insert(name.clone(), t);
            }
            Err(e) => issues.push(Issue::from(&e)),
        }
    }
    let transforms_ok = transforms.len() == cfg.covariate_transforms.len();

    let covariates = match cfg.covariates_path() {
        Ok(path) => match load_raw_covariates(path) {
            Ok(raw) if transforms_ok => match transform_covariates(&raw, &transforms) {
                Ok(table) => Some(table),
                Err(e) => {
                    issues.push(Issue::from(&e));
                    None
                }
            },
            Ok(_) => None,
            Err(e) => {
                issues.push(Issue::from(&e));
                None
            }
        },
        Err(m) => {
            issues.push(Issue::config(m));
            None
        }
    };

    let mut inputs = None;
    if let (true, Some(cov)) = (hh_ok, covariates) {
        match load_households(cfg.households_path().expect("checked above")) {
            Ok(table) => {
                let mismatches = roster_mismatches(&table, &cov);
                issues.extend(mismatches.iter().map(Issue::from));
                if issues.is_empty() {
                    let lines = PovertyLines::new(
                        cfg.poverty_line_urban.expect("checked by problems"),
                        cfg.poverty_line_rural.expect("checked by problems"),
                    );
                    match (ModelData::new(table, &cov), lines) {
                        (Ok(data), Ok(lines)) => inputs = Some(Inputs { data, lines }),
                        (Err(e), _) => issues.push(Issue::from(&e)),
                        (_, Err(e)) => issues.push(Issue::config(e.to_string())),
                    }
                }
            }
            Err(e) => issues.push(Issue::from(&e)),
        }
    }
    let report = ValidationReport::from_issues(issues);
    if report.ok {
        (report, inputs)
    } else {
        (report, None)
    }
}

fn require_valid(cfg: &RunConfig) -> Result<Inputs, CliError> {
    match validate_inputs(cfg) {
        (_, Some(inputs)) => Ok(inputs),
        (report, None) => Err(CliError::Validation(report)),
    }
}

pub fn cmd_validate(cfg: &RunConfig, out: &mut dyn Write) -> Result<usize, CliError> {
    let (report, _) = validate_inputs(cfg);
    if !report.ok {
        return Err(CliError::Validation(report));
    }
    writeln!(out, "{}", report.to_json()).context("writing report")?;
    Ok(0)
}

/// Settings of the fit that produced `draws.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub seed: u64,
    pub burn_in: usize,
    pub draws: usize,
    pub thin: usize,
    pub chains: usize,
    pub n_params: usize,
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path, hint: &str) -> anyhow::Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {} ({hint})", path.display()))?;
    Ok(BufReader::new(f))
}

fn alpha_tag(alpha: f64) -> String {
    format!("{alpha}")
}

pub fn qmatrix_path(out_dir: &Path, alpha: f64) -> PathBuf {
    out_dir.join(format!("qmatrix_alpha{}.csv", alpha_tag(alpha)))
}

/// Runs the chains and writes the draws, their settings and the split
/// R-hat of every monitored parameter. Returns the number of parameters
/// with R-hat at or above [`RHAT_WARNING`] (or undefined).
pub fn cmd_fit(cfg: &RunConfig, out: &mut dyn Write) -> Result<usize, CliError> {
    let inputs = require_valid(cfg)?;
    let data = &inputs.data;
    info!(
        "fitting {} households in {} comunas: {} chains, burn-in {}, {} draws, thin {}",
        data.households.records.len(),
        data.households.n_comunas(),
        cfg.chains,
        cfg.burn_in,
        cfg.draws,
        cfg.thin
    );
    let store = run_chains(data, &cfg.priors(), &cfg.mcmc(), cfg.seed, cfg.chains)
        .map_err(anyhow::Error::from)?;

    let dir = &cfg.out_dir;
    let mut w = create(&dir.join(DRAWS_FILE))?;
    store.write_csv(&mut w).map_err(anyhow::Error::from)?;
    w.flush().context("writing draws")?;
    let meta = FitMeta {
        seed: cfg.seed,
        burn_in: cfg.burn_in,
        draws: cfg.draws,
        thin: cfg.thin,
        chains: cfg.chains,
        n_params: store.layout().dim(),
    };
    let mut w = create(&dir.join(FIT_META_FILE))?;
    writeln!(
        w,
        "{}",
        serde_json::to_string_pretty(&meta).context("encoding fit metadata")?
    )
    .context("writing fit metadata")?;

    let rhat = monitored_rhat(&store, &cfg.monitor.into())?;
    let mut w = create(&dir.join(PSRF_FILE))?;
    writeln!(w, "param,rhat").context("writing psrf")?;
    for (name, r) in &rhat {
        writeln!(w, "{name},{}", format_float(*r)).context("writing psrf")?;
    }
    w.flush().context("writing psrf")?;

    let flagged: Vec<&(String, f64)> = rhat.iter().filter(|(_, r)| !(*r < RHAT_WARNING)).collect();
    for (name, r) in &flagged {
        warn!("{name}: R-hat {r:.3} is not below {RHAT_WARNING}");
    }
    let worst = rhat
        .iter()
        .filter(|(_, r)| r.is_finite())
        .max_by(|a, b| a.1.total_cmp(&b.1));
    writeln!(
        out,
        "fit: {} chains x {} draws, {} parameters; max R-hat {}; {} warning(s)",
        store.n_chains(),
        store.n_draws(),
        store.layout().dim(),
        worst.map_or("undefined".to_string(), |(n, r)| format!("{r:.4} ({n})")),
        flagged.len()
    )
    .context("writing summary")?;
    Ok(flagged.len())
}

fn monitored_rhat(
    store: &DrawsStore,
    selector: &ParamSelector,
) -> Result<Vec<(String, f64)>, CliError> {
    if store.n_draws() < MIN_DRAWS {
        warn!(
            "{} draws per chain is too few for split R-hat (need {MIN_DRAWS}); reporting NaN",
            store.n_draws()
        );
        let layout = store.layout();
        let names = (0..layout.dim()).filter(|&i| match selector {
            ParamSelector::Hyperparameters => layout.is_hyperparameter(i),
            _ => true,
        });
        return Ok(names
            .map(|i| (layout.names()[i].clone(), f64::NAN))
            .collect());
    }
    Ok(psrf(store, selector).map_err(anyhow::Error::from)?)
}

fn load_draws(cfg: &RunConfig, data: &ModelData) -> anyhow::Result<DrawsStore> {
    let meta_path = cfg.out_dir.join(FIT_META_FILE);
    let meta: FitMeta = serde_json::from_reader(open(&meta_path, "run `fit` first")?)
        .with_context(|| format!("parsing {}", meta_path.display()))?;
    let layout = ParamLayout::new(data);
    if meta.n_params != layout.dim() {
        bail!(
            "draws were fitted with {} parameters but the inputs imply {}; refit",
            meta.n_params,
            layout.dim()
        );
    }
    let run = RunMeta {
        seed: meta.seed,
        burn_in: meta.burn_in,
        draws: meta.draws,
        thin: meta.thin,
    };
    let store = DrawsStore::read_csv(
        open(&cfg.out_dir.join(DRAWS_FILE), "run `fit` first")?,
        layout,
        run,
    )?;
    if store.n_chains() != meta.chains || store.n_draws() != meta.draws {
        bail!(
            "draws file holds {} chains x {} draws, metadata says {} x {}",
            store.n_chains(),
            store.n_draws(),
            meta.chains,
            meta.draws
        );
    }
    Ok(store)
}

/// Evaluates the FGT index of every comuna at every stored draw.
pub fn cmd_qmatrix(cfg: &RunConfig, out: &mut dyn Write) -> Result<usize, CliError> {
    let inputs = require_valid(cfg)?;
    let store = load_draws(cfg, &inputs.data)?;
    for &alpha in &cfg.alphas {
        let q = build_q_matrix(&store, &inputs.data.households, inputs.lines, alpha)
            .map_err(anyhow::Error::from)?;
        let path = qmatrix_path(&cfg.out_dir, alpha);
        let mut w = create(&path)?;
        q.write_csv(&mut w).map_err(anyhow::Error::from)?;
        w.flush().context("writing Q-matrix")?;
        writeln!(
            out,
            "qmatrix alpha={}: {} comunas x {} draws -> {}",
            alpha_tag(alpha),
            q.n_comunas(),
            q.n_draws(),
            path.display()
        )
        .context("writing summary")?;
    }
    Ok(0)
}

/// Point estimates, exceedance flags and extreme-area probabilities for
/// each index.
pub fn cmd_report(cfg: &RunConfig, out: &mut dyn Write) -> Result<usize, CliError> {
    let inputs = require_valid(cfg)?;
    let hh = &inputs.data.households;
    let roster: Vec<String> = hh.comunas.iter().map(|c| c.id.clone()).collect();
    for &alpha in &cfg.alphas {
        let path = qmatrix_path(&cfg.out_dir, alpha);
        let q = QMatrix::read_csv(open(&path, "run `qmatrix` first")?, alpha)
            .map_err(anyhow::Error::from)?;
        if q.comuna_ids != roster {
            return Err(anyhow!(
                "{} does not list the survey's comunas in roster order",
                path.display()
            )
            .into());
        }
        let regional =
            direct_estimate(hh, inputs.lines, alpha, &Domain::All).map_err(anyhow::Error::from)?;
        let report = DecisionReport::build(&q, regional, &cfg.multipliers, cfg.cutoff)
            .map_err(anyhow::Error::from)?;
        let tag = alpha_tag(alpha);
        let dir = &cfg.out_dir;
        let mut w = create(&dir.join(format!("point_alpha{tag}.csv")))?;
        report
            .write_point_csv(&mut w)
            .map_err(anyhow::Error::from)?;
        let mut w = create(&dir.join(format!("flags_alpha{tag}.csv")))?;
        report
            .write_flags_csv(&mut w)
            .map_err(anyhow::Error::from)?;
        let mut w = create(&dir.join(format!("extremes_alpha{tag}.csv")))?;
        report
            .write_extremes_csv(&mut w)
            .map_err(anyhow::Error::from)?;
        let mut w = create(&dir.join(format!("thresholds_alpha{tag}.csv")))?;
        report
            .write_thresholds_csv(&mut w)
            .map_err(anyhow::Error::from)?;

        let worst = &report.comunas[report.worst];
        let best = &report.comunas[report.best];
        let flagged = report.comunas.iter().filter(|c| c.flags[0]).count();
        writeln!(
            out,
            "alpha={tag}: regional direct estimate {regional:.4}; worst {} (Prob.Max {:.4}); best {} (Prob.Min {:.4}); \
             {flagged} comuna(s) flagged above {:.2}x",
            worst.comuna_id, worst.prob_max, best.comuna_id, best.prob_min, report.thresholds[0].multiplier
        )
        .context("writing summary")?;
    }
    Ok(0)
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        SimulateConfig {
            n_comunas: s.n_comunas,
            n_covariates: s.n_covariates,
            beta_urban: s.beta[0].clone(),
            beta_rural: s.beta[1].clone(),
            sigma_t: s.sigma_t,
            sigma_theta: s.sigma_theta,
            sigma_mu: s.sigma_mu,
            psus_per_stratum: [s.psus_per_stratum.0, s.psus_per_stratum.1],
            households_per_psu: [s.households_per_psu.0, s.households_per_psu.1],
            rural_share: s.rural_share,
            sample_psus: Some(2),
            sample_households: Some(10),
            seed: None,
        }
    }
}

/// Generates a synthetic region, samples it and writes the sample, the
/// covariates, the full population and its true indices.
pub fn cmd_simulate(cfg: &RunConfig, out: &mut dyn Write) -> Result<usize, CliError> {
    let sim = cfg.simulate.clone().unwrap_or_default();
    let seed = sim.seed.unwrap_or(cfg.seed);
    let lines = match (cfg.poverty_line_urban, cfg.poverty_line_rural) {
        (Some(u), Some(r)) => Some(PovertyLines::new(u, r).map_err(|e| {
            CliError::Validation(ValidationReport::from_issues(vec![Issue::config(
                e.to_string(),
            )]))
        })?),
        _ => None,
    };
    let pop = generate_population(&sim.synth(), seed).map_err(|e| {
        CliError::Validation(ValidationReport::from_issues(vec![Issue::config(
            e.to_string(),
        )]))
    })?;
    let sample = draw_sample(&pop, sim.design(), seed).map_err(anyhow::Error::from)?;

    let dir = &cfg.out_dir;
    let mut w = create(&dir.join("sample.csv"))?;
    write_households(&sample, &mut w).map_err(anyhow::Error::from)?;
    let mut w = create(&dir.join("covariates.csv"))?;
    write_raw_covariates(&pop.covariates(), &mut w).map_err(anyhow::Error::from)?;
    let mut w = create(&dir.join("population.csv"))?;
    write_household_records(&pop.census_records(), &mut w).map_err(anyhow::Error::from)?;
    let mut w = create(&dir.join("true_params.txt"))?;
    pop.write_true_params(&mut w).map_err(anyhow::Error::from)?;
    w.flush().context("writing true parameters")?;
    if let Some(lines) = lines {
        for &alpha in &cfg.alphas {
            let truth = true_fgt(&pop, lines, alpha);
            let mut w = create(&dir.join(format!("truth_alpha{}.csv", alpha_tag(alpha))))?;
            writeln!(w, "comuna_id,true_fgt").context("writing truth")?;
            for (c, v) in pop.comunas.iter().zip(truth) {
                writeln!(w, "{},{}", c.id, format_float(v)).context("writing truth")?;
            }
            w.flush().context("writing truth")?;
        }
    }
    writeln!(
        out,
        "simulate: {} comunas, {} population households ({} negative draws redrawn), {} sampled -> {}",
        pop.comunas.len(),
        pop.n_households(),
        pop.redraws(),
        sample.records.len(),
        dir.display()
    )
    .context("writing summary")?;
    Ok(0)
}

/// `(q05, q50, q95)` with linear interpolation between order statistics.
fn quantiles(mut v: Vec<f64>) -> (f64, f64, f64) {
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    (q(0.05), q(0.5), q(0.95))
}

/// Posterior summaries and R-hat for each monitored parameter from stored
/// draws.
pub fn cmd_diagnose(cfg: &RunConfig, out: &mut dyn Write) -> Result<usize, CliError> {
    let inputs = require_valid(cfg)?;
    let store = load_draws(cfg, &inputs.data)?;
    let selector: ParamSelector = cfg.monitor.into();
    let rhat = monitored_rhat(&store, &selector)?;
    let names = store.layout().names().to_vec();
    let mut w = create(&cfg.out_dir.join(DIAGNOSTICS_FILE))?;
    writeln!(w, "param,mean,sd,q05,q50,q95,rhat").context("writing diagnostics")?;
    let mut flagged = Vec::new();
    for (name, r) in &rhat {
        let i = names
            .iter()
            .position(|n| n == name)
            .expect("monitored names come from the layout");
        let pooled: Vec<f64> = store.series(i).concat();
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let sd =
            (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        let (q05, q50, q95) = quantiles(pooled);
        writeln!(
            w,
            "{name},{},{},{},{},{},{}",
            format_float(mean),
            format_float(sd),
            format_float(q05),
            format_float(q50),
            format_float(q95),
            format_float(*r)
        )
        .context("writing diagnostics")?;
        if !(*r < RHAT_WARNING) {
            flagged.push((name.clone(), *r));
        }
    }
    w.flush().context("writing diagnostics")?;
    flagged.sort_by(|a, b| b.1.total_cmp(&a.1));
    writeln!(
        out,
        "diagnose: {} parameters monitored, {} with R-hat >= {RHAT_WARNING}",
        rhat.len(),
        flagged.len()
    )
    .context("writing summary")?;
    for (name, r) in flagged.iter().take(10) {
        writeln!(out, "  {name}: {r:.4}").context("writing summary")?;
    }
    Ok(flagged.len())
}

/// fit, qmatrix and report in sequence.
pub fn cmd_run(cfg: &RunConfig, out: &mut dyn Write) -> Result<usize, CliError> {
    let warnings = cmd_fit(cfg, out)?;
    cmd_qmatrix(cfg, out)?;
    cmd_report(cfg, out)?;
    Ok(warnings)
}
