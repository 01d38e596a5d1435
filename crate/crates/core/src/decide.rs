//! Decisions from a Q-matrix: posterior means and SDs, exceedance
//! probabilities with flags, and the probability that each comuna is the
//! worst or best in the region.

use std::io::Write;

use thiserror::Error;

use crate::fgt::QMatrix;
use crate::format_float;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecideError {
    #[error("at least 2 draws are needed, got {0}")]
    TooFewDraws(usize),
    #[error("regional direct estimate must be positive, got {0}")]
    NonPositiveRegionalEstimate(f64),
    #[error("threshold multipliers must be finite and positive, got {0}")]
    InvalidMultiplier(f64),
    #[error("no threshold multipliers given")]
    NoThresholds,
    #[error("threshold {0} is not finite")]
    NonFiniteThreshold(f64),
    #[error("cutoff must lie strictly between 0 and 1, got {0}")]
    CutoffOutOfRange(f64),
    #[error("rank probabilities need at least 2 comunas")]
    SingleComuna,
    #[error("writing report: {0}")]
    Output(String),
}

pub const DEFAULT_MULTIPLIERS: [f64; 3] = [1.10, 1.25, 1.50];
pub const DEFAULT_CUTOFF: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEstimate {
    pub mean: f64,
    pub sd: f64,
}

/// Row means and sample SDs (denominator `R - 1`).
pub fn point_estimates(q: &QMatrix) -> Result<Vec<PointEstimate>, DecideError> {
    let r = q.n_draws();
    if r < 2 {
        return Err(DecideError::TooFewDraws(r));
    }
    Ok(q.rows()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / r as f64;
            let ss = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            PointEstimate {
                mean,
                sd: (ss / (r - 1) as f64).sqrt(),
            }
        })
        .collect())
}

/// Share of draws strictly above each threshold, `[comuna][threshold]`.
pub fn exceedance_probabilities(
    q: &QMatrix,
    thresholds: &[f64],
) -> Result<Vec<Vec<f64>>, DecideError> {
    if let Some(&a) = thresholds.iter().find(|a| !a.is_finite()) {
        return Err(DecideError::NonFiniteThreshold(a));
    }
    let r = q.n_draws() as f64;
    Ok(q.rows()
        .map(|row| {
            thresholds
                .iter()
                .map(|&a| row.iter().filter(|&&v| v > a).count() as f64 / r)
                .collect()
        })
        .collect())
}

/// A threshold expressed both as a multiple of the regional estimate and
/// as an absolute index value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub multiplier: f64,
    pub value: f64,
}

/// Multiplies the regional direct estimate by each multiplier and returns
/// the thresholds in ascending order.
pub fn make_thresholds(
    regional_direct: f64,
    multipliers: &[f64],
) -> Result<Vec<Threshold>, DecideError> {
    if !(regional_direct > 0.0) || !regional_direct.is_finite() {
        return Err(DecideError::NonPositiveRegionalEstimate(regional_direct));
    }
    if multipliers.is_empty() {
        return Err(DecideError::NoThresholds);
    }
    if let Some(&m) = multipliers.iter().find(|m| !(**m > 0.0) || !m.is_finite()) {
        return Err(DecideError::InvalidMultiplier(m));
    }
    let mut sorted = multipliers.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted
        .into_iter()
        .map(|multiplier| Threshold {
            multiplier,
            value: regional_direct * multiplier,
        })
        .collect())
}

/// `probability > cutoff`, elementwise.
pub fn flag(probabilities: &[Vec<f64>], cutoff: f64) -> Result<Vec<Vec<bool>>, DecideError> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(DecideError::CutoffOutOfRange(cutoff));
    }
    Ok(probabilities
        .iter()
        .map(|row| row.iter().map(|&p| p > cutoff).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extremes {
    pub prob_max: Vec<f64>,
    pub prob_min: Vec<f64>,
    /// Comuna with the largest `prob_max`.
    pub worst: usize,
    /// Comuna with the largest `prob_min`.
    pub best: usize,
}

/// Column-wise argmax and argmin counts averaged over draws. Ties go to the
/// smallest comuna index.
pub fn extreme_probabilities(q: &QMatrix) -> Result<Extremes, DecideError> {
    let c = q.n_comunas();
    if c < 2 {
        return Err(DecideError::SingleComuna);
    }
    let r = q.n_draws();
    if r == 0 {
        return Err(DecideError::TooFewDraws(0));
    }
    let mut max_count = vec![0usize; c];
    let mut min_count = vec![0usize; c];
    for j in 0..r {
        let (mut hi, mut lo) = (0, 0);
        for i in 1..c {
            let v = q.get(i, j);
            if v > q.get(hi, j) {
                hi = i;
            }
            if v < q.get(lo, j) {
                lo = i;
            }
        }
        max_count[hi] += 1;
        min_count[lo] += 1;
    }
    let to_prob = |counts: Vec<usize>| -> Vec<f64> {
        counts.into_iter().map(|k| k as f64 / r as f64).collect()
    };
    let prob_max = to_prob(max_count);
    let prob_min = to_prob(min_count);
    let worst = first_argmax(&prob_max);
    let best = first_argmax(&prob_min);
    Ok(Extremes {
        prob_max,
        prob_min,
        worst,
        best,
    })
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComunaDecision {
    pub comuna_id: String,
    pub posterior_mean: f64,
    pub posterior_sd: f64,
    /// One entry per threshold, ascending threshold order.
    pub exceedance: Vec<f64>,
    pub flags: Vec<bool>,
    pub prob_max: f64,
    pub prob_min: f64,
}

/// Everything reported for one FGT index.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionReport {
    pub alpha: f64,
    pub regional_direct: f64,
    pub thresholds: Vec<Threshold>,
    pub cutoff: f64,
    /// Roster order.
    pub comunas: Vec<ComunaDecision>,
    pub worst: usize,
    pub best: usize,
}

impl DecisionReport {
    pub fn build(
        q: &QMatrix,
        regional_direct: f64,
        multipliers: &[f64],
        cutoff: f64,
    ) -> Result<Self, DecideError> {
        let thresholds = make_thresholds(regional_direct, multipliers)?;
        let values: Vec<f64> = thresholds.iter().map(|t| t.value).collect();
        let points = point_estimates(q)?;
        let exceed = exceedance_probabilities(q, &values)?;
        let flags = flag(&exceed, cutoff)?;
        let extremes = extreme_probabilities(q)?;
        let comunas = q
            .comuna_ids
            .iter()
            .enumerate()
            .map(|(c, id)| ComunaDecision {
                comuna_id: id.clone(),
                posterior_mean: points[c].mean,
                posterior_sd: points[c].sd,
                exceedance: exceed[c].clone(),
                flags: flags[c].clone(),
                prob_max: extremes.prob_max[c],
                prob_min: extremes.prob_min[c],
            })
            .collect();
        Ok(DecisionReport {
            alpha: q.alpha,
            regional_direct,
            thresholds,
            cutoff,
            comunas,
            worst: extremes.worst,
            best: extremes.best,
        })
    }

    /// Comunas by descending first-threshold exceedance probability; ties
    /// keep roster order.
    pub fn by_exceedance(&self) -> Vec<&ComunaDecision> {
        let mut out: Vec<&ComunaDecision> = self.comunas.iter().collect();
        out.sort_by(|a, b| b.exceedance[0].total_cmp(&a.exceedance[0]));
        out
    }

    /// Comunas by descending `prob_max`; ties keep roster order.
    pub fn by_prob_max(&self) -> Vec<&ComunaDecision> {
        let mut out: Vec<&ComunaDecision> = self.comunas.iter().collect();
        out.sort_by(|a, b| b.prob_max.total_cmp(&a.prob_max));
        out
    }

    /// `comuna_id,posterior_mean,posterior_sd`.
    pub fn write_point_csv<W: Write>(&self, writer: W) -> Result<(), DecideError> {
        let mut w = csv::Writer::from_writer(writer);
        write_row(
            &mut w,
            ["comuna_id", "posterior_mean", "posterior_sd"].map(String::from),
        )?;
        for c in self.by_exceedance() {
            write_row(
                &mut w,
                [
                    c.comuna_id.clone(),
                    format_float(c.posterior_mean),
                    format_float(c.posterior_sd),
                ],
            )?;
        }
        finish(w)
    }

    /// `comuna_id,p_gt_t1..p_gt_tK,flag_t1..flag_tK`.
    pub fn write_flags_csv<W: Write>(&self, writer: W) -> Result<(), DecideError> {
        let k = self.thresholds.len();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["comuna_id".to_string()];
        header.extend((1..=k).map(|i| format!("p_gt_t{i}")));
        header.extend((1..=k).map(|i| format!("flag_t{i}")));
        write_row(&mut w, header)?;
        for c in self.by_exceedance() {
            let mut rec = vec![c.comuna_id.clone()];
            rec.extend(c.exceedance.iter().map(|p| format_float(*p)));
            rec.extend(c.flags.iter().map(|f| f.to_string()));
            write_row(&mut w, rec)?;
        }
        finish(w)
    }

    /// `comuna_id,prob_max,prob_min`, by descending `prob_max`.
    pub fn write_extremes_csv<W: Write>(&self, writer: W) -> Result<(), DecideError> {
        let mut w = csv::Writer::from_writer(writer);
        write_row(
            &mut w,
            ["comuna_id", "prob_max", "prob_min"].map(String::from),
        )?;
        for c in self.by_prob_max() {
            write_row(
                &mut w,
                [
                    c.comuna_id.clone(),
                    format_float(c.prob_max),
                    format_float(c.prob_min),
                ],
            )?;
        }
        finish(w)
    }

    /// `name,multiplier,value` rows: the regional estimate, each threshold
    /// and the cutoff.
    pub fn write_thresholds_csv<W: Write>(&self, writer: W) -> Result<(), DecideError> {
        let mut w = csv::Writer::from_writer(writer);
        write_row(&mut w, ["name", "multiplier", "value"].map(String::from))?;
        write_row(
            &mut w,
            [
                "regional_direct".into(),
                format_float(1.0),
                format_float(self.regional_direct),
            ],
        )?;
        for (i, t) in self.thresholds.iter().enumerate() {
            write_row(
                &mut w,
                [
                    format!("t{}", i + 1),
                    format_float(t.multiplier),
                    format_float(t.value),
                ],
            )?;
        }
        write_row(
            &mut w,
            ["cutoff".into(), String::new(), format_float(self.cutoff)],
        )?;
        finish(w)
    }
}

fn write_row<W: Write, I>(w: &mut csv::Writer<W>, rec: I) -> Result<(), DecideError>
where
    I: IntoIterator<Item = String>,
{
    w.write_record(rec)
        .map_err(|e| DecideError::Output(e.to_string()))
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<(), DecideError> {
    w.flush().map_err(|e| DecideError::Output(e.to_string()))
}
