//! FGT poverty indices under the fitted model.
//!
//! For a PSU with mean `theta` and household SD `sigma` on the `ln(y + 1)`
//! scale, the expected FGT contribution of one household is
//! `E[g_alpha(exp(T) - 1)]` with `T ~ N(theta, sigma^2)` restricted to
//! `0 <= T <= l`, `l = ln(k + 1)`. Headcount (`alpha = 0`) and gap
//! (`alpha = 1`) have closed forms in normal CDF differences; any other
//! `alpha` is integrated numerically.

use std::io::{Read, Write};
use std::sync::OnceLock;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{HouseholdTable, Urbanicity};
use crate::format_float;
use crate::sampler::{DrawsStore, ModelState};
pub use crate::special::{normal_cdf, normal_interval, normal_sf};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FgtError {
    #[error("sigma must be positive and finite, got {0}")]
    NonPositiveSigma(f64),
    #[error("poverty line must be positive and finite, got {0}")]
    NonPositiveLine(f64),
    #[error("alpha must be non-negative and finite, got {0}")]
    NegativeAlpha(f64),
    #[error("state does not match the household roster: {0}")]
    RosterMismatch(String),
    #[error("domain contains no households")]
    EmptyDomain,
    #[error("no draws to evaluate")]
    EmptyDraws,
    #[error("q-matrix file: {0}")]
    QMatrixFile(String),
}

/// Per-urbanicity poverty lines on the income scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PovertyLines {
    k: [f64; 2],
}

impl PovertyLines {
    pub fn new(k_urban: f64, k_rural: f64) -> Result<Self, FgtError> {
        for k in [k_urban, k_rural] {
            check_line(k)?;
        }
        Ok(PovertyLines {
            k: [k_urban, k_rural],
        })
    }

    pub fn k(&self, u: Urbanicity) -> f64 {
        self.k[u.index()]
    }

    /// The line on the transformed scale, `ln(k + 1)`.
    pub fn l(&self, u: Urbanicity) -> f64 {
        self.k[u.index()].ln_1p()
    }
}

fn check_line(k: f64) -> Result<(), FgtError> {
    if k > 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(FgtError::NonPositiveLine(k))
    }
}

fn check_sigma(sigma: f64) -> Result<(), FgtError> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(FgtError::NonPositiveSigma(sigma))
    }
}

fn check_alpha(alpha: f64) -> Result<(), FgtError> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(FgtError::NegativeAlpha(alpha))
    }
}

/// FGT kernel on the income scale: `((k - y)/k)^alpha` when `y < k`, else 0.
pub fn g_alpha(y: f64, k: f64, alpha: f64) -> f64 {
    if y < k {
        ((k - y) / k).powf(alpha)
    } else {
        0.0
    }
}

/// Expected headcount contribution:
/// `Phi((l - theta)/sigma) - Phi(-theta/sigma)`, clamped to [0, 1].
pub fn e_g0(theta: f64, sigma: f64, l: f64) -> Result<f64, FgtError> {
    check_sigma(sigma)?;
    if !(l > 0.0) || !l.is_finite() {
        return Err(FgtError::NonPositiveLine(l));
    }
    Ok(normal_interval(-theta / sigma, (l - theta) / sigma).clamp(0.0, 1.0))
}

/// Expected normalized poverty gap for poverty line `k`.
///
/// Uses `E[exp(T) 1{a <= Z <= b}] = exp(theta + sigma^2/2) [Phi(b - sigma) - Phi(a - sigma)]`
/// for the income part. The result is clamped to `[0, e_g0]`.
pub fn e_g1(theta: f64, sigma: f64, k: f64) -> Result<f64, FgtError> {
    check_sigma(sigma)?;
    check_line(k)?;
    let l = k.ln_1p();
    let a = -theta / sigma;
    let b = (l - theta) / sigma;
    let headcount = normal_interval(a, b).clamp(0.0, 1.0);
    if headcount == 0.0 {
        return Ok(0.0);
    }
    let shifted = normal_interval(a - sigma, b - sigma);
    let income_part = if shifted > 0.0 {
        (theta + 0.5 * sigma * sigma + shifted.ln() - k.ln()).exp()
    } else {
        0.0
    };
    let value = (k + 1.0) / k * headcount - income_part;
    Ok(value.clamp(0.0, headcount))
}

/// Gauss-Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes by Newton iteration on the Legendre three-term recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for j in 2..=n {
                    let jf = j as f64;
                    let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                    p0 = p1;
                    p1 = p2;
                }
                let pn = if n == 1 { x } else { p1 };
                let pm1 = if n == 1 { 1.0 } else { p0 };
                dp = nf * (x * pn - pm1) / (x * x - 1.0);
                let dx = pn / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        half * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
    }
}

/// Node count used by [`e_g_alpha`].
pub const QUADRATURE_NODES: usize = 128;

fn default_rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(QUADRATURE_NODES))
}

// Normal density below exp(-80) of its peak over [a, b] is dropped, which
// keeps the integration window narrow enough for a fixed rule.
const TAIL_LOG_RATIO: f64 = 80.0;

/// Expected FGT contribution for any `alpha >= 0` by 128-node
/// Gauss-Legendre quadrature over `z in [-theta/sigma, (l - theta)/sigma]`.
pub fn e_g_alpha(theta: f64, sigma: f64, k: f64, alpha: f64) -> Result<f64, FgtError> {
    e_g_alpha_with(default_rule(), theta, sigma, k, alpha)
}

/// [`e_g_alpha`] with a caller-supplied rule.
pub fn e_g_alpha_with(
    rule: &GaussLegendre,
    theta: f64,
    sigma: f64,
    k: f64,
    alpha: f64,
) -> Result<f64, FgtError> {
    check_sigma(sigma)?;
    check_line(k)?;
    check_alpha(alpha)?;
    let l = k.ln_1p();
    let a = -theta / sigma;
    let b = (l - theta) / sigma;
    let peak = 0.0f64.clamp(a, b);
    let reach = (peak * peak + 2.0 * TAIL_LOG_RATIO).sqrt();
    let lo = a.max(-reach);
    let hi = b.min(reach);
    if !(lo < hi) {
        return Ok(0.0);
    }
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let integrand = |z: f64| {
        let gap = ((k + 1.0 - (theta + sigma * z).exp()) / k).max(0.0);
        let density = inv_sqrt_2pi * (-0.5 * z * z).exp();
        if alpha == 0.0 {
            density
        } else {
            gap.powf(alpha) * density
        }
    };
    Ok(rule.integrate(integrand, lo, hi).max(0.0))
}

/// Expected FGT contribution, using the closed form for `alpha` 0 or 1 and
/// quadrature otherwise.
pub fn expected_fgt(theta: f64, sigma: f64, k: f64, alpha: f64) -> Result<f64, FgtError> {
    if alpha == 0.0 {
        check_line(k)?;
        e_g0(theta, sigma, k.ln_1p())
    } else if alpha == 1.0 {
        e_g1(theta, sigma, k)
    } else {
        e_g_alpha(theta, sigma, k, alpha)
    }
}

/// Precomputed PSU weight masses for repeated evaluation of `q_tilde`.
#[derive(Debug, Clone)]
pub struct QTilde<'a> {
    households: &'a HouseholdTable,
    masses: Vec<f64>,
    lines: PovertyLines,
    alpha: f64,
}

impl<'a> QTilde<'a> {
    pub fn new(
        households: &'a HouseholdTable,
        lines: PovertyLines,
        alpha: f64,
    ) -> Result<Self, FgtError> {
        check_alpha(alpha)?;
        Ok(QTilde {
            households,
            masses: households.psu_weight_masses(),
            lines,
            alpha,
        })
    }

    /// One value per roster comuna: the scaled-weight average over that
    /// comuna's PSUs of the expected FGT contribution.
    pub fn evaluate(&self, state: &ModelState) -> Result<Vec<f64>, FgtError> {
        let hh = self.households;
        if state.theta.len() != hh.psus.len() {
            return Err(FgtError::RosterMismatch(format!(
                "{} theta values for {} PSUs",
                state.theta.len(),
                hh.psus.len()
            )));
        }
        let mut out = vec![0.0; hh.n_comunas()];
        for (p, psu) in hh.psus.iter().enumerate() {
            let k = self.lines.k(hh.strata[psu.stratum].urbanicity);
            let e = expected_fgt(state.theta[p], state.sigma_t, k, self.alpha)?;
            out[psu.comuna] += self.masses[p] * e;
        }
        Ok(out)
    }
}

/// Model-based FGT index of every sampled comuna at one parameter state.
pub fn q_tilde(
    state: &ModelState,
    households: &HouseholdTable,
    lines: PovertyLines,
    alpha: f64,
) -> Result<Vec<f64>, FgtError> {
    QTilde::new(households, lines, alpha)?.evaluate(state)
}

/// Comunas by posterior draws. Column `r` holds the indices at the `r`-th
/// retained state, chains concatenated in chain order.
#[derive(Debug, Clone, PartialEq)]
pub struct QMatrix {
    pub comuna_ids: Vec<String>,
    pub alpha: f64,
    n_draws: usize,
    /// Row-major, `comunas x draws`.
    values: Vec<f64>,
    pub provenance: String,
}

impl QMatrix {
    pub fn from_rows(comuna_ids: Vec<String>, alpha: f64, rows: Vec<Vec<f64>>) -> Self {
        assert_eq!(comuna_ids.len(), rows.len());
        let n_draws = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_draws), "ragged rows");
        QMatrix {
            comuna_ids,
            alpha,
            n_draws,
            values: rows.concat(),
            provenance: String::new(),
        }
    }

    pub fn n_comunas(&self) -> usize {
        self.comuna_ids.len()
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.values[c * self.n_draws..(c + 1) * self.n_draws]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_comunas()).map(move |c| self.row(c))
    }

    pub fn get(&self, c: usize, r: usize) -> f64 {
        self.values[c * self.n_draws + r]
    }

    pub fn column(&self, r: usize) -> Vec<f64> {
        (0..self.n_comunas()).map(|c| self.get(c, r)).collect()
    }

    /// Every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> QMatrix {
        QMatrix {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// CSV with header `comuna_id,draw_0001,...`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), FgtError> {
        let err = |e: csv::Error| FgtError::QMatrixFile(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["comuna_id".to_string()];
        header.extend((1..=self.n_draws).map(|r| format!("draw_{r:04}")));
        w.write_record(&header).map_err(err)?;
        for (c, id) in self.comuna_ids.iter().enumerate() {
            let mut rec = Vec::with_capacity(self.n_draws + 1);
            rec.push(id.clone());
            rec.extend(self.row(c).iter().map(|v| format_float(*v)));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| FgtError::QMatrixFile(e.to_string()))
    }

    pub fn read_csv<R: Read>(reader: R, alpha: f64) -> Result<Self, FgtError> {
        let bad = |m: String| FgtError::QMatrixFile(m);
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        if headers.get(0) != Some("comuna_id") {
            return Err(bad("first column must be comuna_id".into()));
        }
        for (r, h) in headers.iter().skip(1).enumerate() {
            if h != format!("draw_{:04}", r + 1) {
                return Err(bad(format!("unexpected column `{h}`")));
            }
        }
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            ids.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| bad(format!("row {}: bad value `{v}`", i + 1)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(QMatrix::from_rows(ids, alpha, rows))
    }
}

/// Evaluates `q_tilde` at every retained draw. Columns are computed in
/// parallel; the layout depends only on the draws.
pub fn build_q_matrix(
    draws: &DrawsStore,
    households: &HouseholdTable,
    lines: PovertyLines,
    alpha: f64,
) -> Result<QMatrix, FgtError> {
    let total = draws.n_chains() * draws.n_draws();
    if total == 0 {
        return Err(FgtError::EmptyDraws);
    }
    let eval = QTilde::new(households, lines, alpha)?;
    let per_chain = draws.n_draws();
    let columns = (0..total)
        .into_par_iter()
        .map(|j| eval.evaluate(&draws.state(j / per_chain, j % per_chain)))
        .collect::<Result<Vec<_>, _>>()?;
    let c = households.n_comunas();
    let mut values = vec![0.0; c * total];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            values[i * total + j] = *v;
        }
    }
    let meta = draws.meta();
    Ok(QMatrix {
        comuna_ids: households.comunas.iter().map(|c| c.id.clone()).collect(),
        alpha,
        n_draws: total,
        values,
        provenance: format!(
            "seed={} chains={} burn_in={} draws={} thin={}",
            meta.seed,
            draws.n_chains(),
            meta.burn_in,
            meta.draws,
            meta.thin
        ),
    })
}

/// Households a direct estimate is computed over.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    All,
    Comunas(Vec<String>),
}

/// Hajek ratio `sum(w g_alpha(y)) / sum(w)` with raw survey weights.
pub fn direct_estimate(
    households: &HouseholdTable,
    lines: PovertyLines,
    alpha: f64,
    domain: &Domain,
) -> Result<f64, FgtError> {
    check_alpha(alpha)?;
    let (mut num, mut den) = (0.0, 0.0);
    for r in &households.records {
        let inside = match domain {
            Domain::All => true,
            Domain::Comunas(ids) => ids.contains(&r.comuna_id),
        };
        if inside {
            num += r.weight_raw * g_alpha(r.income, lines.k(r.urbanicity), alpha);
            den += r.weight_raw;
        }
    }
    if den == 0.0 {
        return Err(FgtError::EmptyDomain);
    }
    Ok(num / den)
}

/// Direct estimate for every roster comuna.
pub fn direct_by_comuna(
    households: &HouseholdTable,
    lines: PovertyLines,
    alpha: f64,
) -> Result<Vec<f64>, FgtError> {
    check_alpha(alpha)?;
    let c = households.n_comunas();
    let (mut num, mut den) = (vec![0.0; c], vec![0.0; c]);
    for psu in &households.psus {
        for &h in &psu.households {
            let r = &households.records[h];
            num[psu.comuna] += r.weight_raw * g_alpha(r.income, lines.k(r.urbanicity), alpha);
            den[psu.comuna] += r.weight_raw;
        }
    }
    Ok(num.iter().zip(&den).map(|(n, d)| n / d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::HouseholdRecord;

    #[test]
    fn symmetric_interval() {
        // theta = l/2: 2 Phi(1) - 1 for l = 2, sigma = 1
        let v = e_g0(1.0, 1.0, 2.0).unwrap();
        assert!((v - 0.682_689_492_137_085_9).abs() < 1e-14, "{v}");
    }

    #[test]
    fn far_tails_vanish() {
        let l = 4.0f64.ln();
        let sigma = 0.1;
        let theta = l + 10.0 * sigma;
        assert!(e_g0(theta, sigma, l).unwrap() <= 1e-20);
        assert!(e_g1(theta, sigma, 3.0).unwrap() <= 1e-15);
        // deep tail keeps relative precision instead of cancelling to 0
        let v = e_g0(30.0 * sigma + l, sigma, l).unwrap();
        assert!(v > 1e-200 && v < 1e-190, "{v}");
    }

    #[test]
    fn gap_bounded_by_headcount() {
        for &(t, s, k) in &[
            (0.5, 0.8, 3.0),
            (2.0, 0.3, 5.0),
            (-1.0, 2.0, 1.0),
            (10.0, 1.0, 100.0),
        ] {
            let g0 = e_g0(t, s, f64::ln_1p(k)).unwrap();
            let g1 = e_g1(t, s, k).unwrap();
            assert!(0.0 <= g1 && g1 <= g0 && g0 <= 1.0);
        }
    }

    #[test]
    fn argument_errors() {
        assert_eq!(e_g0(0.0, 0.0, 1.0), Err(FgtError::NonPositiveSigma(0.0)));
        assert_eq!(e_g1(0.0, 1.0, 0.0), Err(FgtError::NonPositiveLine(0.0)));
        assert_eq!(
            e_g_alpha(0.0, 1.0, 1.0, -1.0),
            Err(FgtError::NegativeAlpha(-1.0))
        );
        assert!(PovertyLines::new(1.0, -2.0).is_err());
    }

    #[test]
    fn gauss_legendre_exact_for_polynomials() {
        let rule = GaussLegendre::new(5);
        let v = rule.integrate(|x| x.powi(9) + 3.0 * x.powi(4), 0.0, 2.0);
        assert!((v - (1024.0 / 10.0 + 3.0 * 32.0 / 5.0)).abs() < 1e-10);
        let big = GaussLegendre::new(128);
        let s: f64 = big.weights.iter().sum();
        assert!((s - 2.0).abs() < 1e-13);
        assert!(big.nodes.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn quadrature_matches_closed_forms() {
        for &(t, s, k) in &[
            (0.5, 0.8, 3.0),
            (1.2, 0.5, 3.0),
            (3.0, 1.5, 50.0),
            (0.1, 0.05, 2.0),
        ] {
            let g0 = e_g0(t, s, f64::ln_1p(k)).unwrap();
            let q0 = e_g_alpha(t, s, k, 0.0).unwrap();
            assert!((q0 - g0).abs() <= 1e-8 * g0, "{q0} vs {g0}");
            let g1 = e_g1(t, s, k).unwrap();
            let q1 = e_g_alpha(t, s, k, 1.0).unwrap();
            assert!((q1 - g1).abs() <= 1e-8 * g1, "{q1} vs {g1}");
        }
    }

    fn fixture() -> HouseholdTable {
        let r = |c: &str, u, p: &str, h: &str, y: f64, w: f64| {
            HouseholdRecord::new(c, u, p, h, y, w).unwrap()
        };
        HouseholdTable::from_records(vec![
            r("A", Urbanicity::Urban, "p1", "h1", 1.0, 2.0),
            r("A", Urbanicity::Urban, "p2", "h2", 5.0, 3.0),
            r("A", Urbanicity::Urban, "p2", "h3", 0.5, 3.0),
        ])
        .unwrap()
    }

    #[test]
    fn q_tilde_weighted_average() {
        let hh = fixture();
        let masses = hh.psu_weight_masses();
        assert!((masses[0] - 0.25).abs() < 1e-15 && (masses[1] - 0.75).abs() < 1e-15);
        let lines = PovertyLines::new(3.0, 2.0).unwrap();
        let state = ModelState {
            theta: vec![0.7, 0.7],
            mu: vec![0.7],
            beta: [vec![0.0], vec![0.0]],
            sigma_t: 0.6,
            sigma_theta: 1.0,
            sigma_mu: 1.0,
        };
        let q = q_tilde(&state, &hh, lines, 0.0).unwrap();
        let e = e_g0(0.7, 0.6, 4.0f64.ln()).unwrap();
        assert!((q[0] - e).abs() < 1e-15);

        let bad = ModelState {
            theta: vec![0.1],
            ..state
        };
        assert!(matches!(
            q_tilde(&bad, &hh, lines, 0.0),
            Err(FgtError::RosterMismatch(_))
        ));
    }

    #[test]
    fn direct_examples() {
        let r =
            |y: f64, h: &str| HouseholdRecord::new("A", Urbanicity::Urban, "p", h, y, 1.0).unwrap();
        let hh = HouseholdTable::from_records(vec![r(1.0, "a"), r(10.0, "b")]).unwrap();
        let lines = PovertyLines::new(4.0, 4.0).unwrap();
        assert_eq!(direct_estimate(&hh, lines, 0.0, &Domain::All).unwrap(), 0.5);
        let single = HouseholdTable::from_records(vec![r(1.0, "a")]).unwrap();
        assert_eq!(
            direct_estimate(&single, lines, 1.0, &Domain::All).unwrap(),
            0.75
        );
        assert_eq!(
            direct_estimate(&hh, lines, 0.0, &Domain::Comunas(vec!["Z".into()])),
            Err(FgtError::EmptyDomain)
        );
        assert_eq!(direct_by_comuna(&hh, lines, 0.0).unwrap(), vec![0.5]);
    }

    #[test]
    fn q_matrix_csv_round_trip() {
        let q = QMatrix::from_rows(
            vec!["A".into(), "B".into()],
            1.0,
            vec![vec![0.1, 0.2, 1.0 / 3.0], vec![0.0, 1e-17, 0.5]],
        );
        let mut buf = Vec::new();
        q.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("comuna_id,draw_0001,draw_0002,draw_0003\n"));
        assert_eq!(QMatrix::read_csv(buf.as_slice(), 1.0).unwrap(), q);
    }
}
