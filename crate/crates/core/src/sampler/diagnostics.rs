//! Split-chain potential scale reduction.

use log::warn;

use super::{DrawsStore, SamplerError};

/// Which parameters [`psrf`] reports on.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ParamSelector {
    #[default]
    All,
    /// Regression coefficients and the three SDs.
    Hyperparameters,
    Names(Vec<String>),
}

/// Minimum retained draws per chain for the split diagnostic.
pub const MIN_DRAWS: usize = 4;

/// Split R-hat of one scalar. Each chain is cut into two halves of
/// `n = len / 2` draws (the middle draw of an odd chain is dropped). With
/// `W` the mean within-half variance and `B/n` the variance of the half
/// means, `R = sqrt(((n - 1)/n W + B/n) / W)`. Returns NaN when `W = 0`.
pub fn split_rhat(chains: &[&[f64]]) -> Result<f64, SamplerError> {
    let len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if chains.is_empty() || len < MIN_DRAWS {
        return Err(SamplerError::InsufficientDraws {
            chains: chains.len(),
            draws: len,
            needed: MIN_DRAWS,
        });
    }
    let n = len / 2;
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[len - n..len]])
        .collect();

    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let within = halves
        .iter()
        .zip(&means)
        .map(|(h, m)| h.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / halves.len() as f64;
    let grand = mean(&means);
    let between_over_n =
        means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (means.len() - 1) as f64;

    if within == 0.0 {
        return Ok(f64::NAN);
    }
    let nf = n as f64;
    let v_hat = (nf - 1.0) / nf * within + between_over_n;
    Ok((v_hat / within).sqrt())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Split R-hat for each selected parameter, in layout order.
pub fn psrf(
    draws: &DrawsStore,
    selector: &ParamSelector,
) -> Result<Vec<(String, f64)>, SamplerError> {
    let layout = draws.layout();
    let selected: Vec<usize> =
        match selector {
            ParamSelector::All => (0..layout.dim()).collect(),
            ParamSelector::Hyperparameters => (0..layout.dim())
                .filter(|&i| layout.is_hyperparameter(i))
                .collect(),
            ParamSelector::Names(names) => names
                .iter()
                .map(|n| {
                    layout.names().iter().position(|m| m == n).ok_or_else(|| {
                        SamplerError::InvalidConfig(format!("unknown parameter `{n}`"))
                    })
                })
                .collect::<Result<_, _>>()?,
        };
    selected
        .into_iter()
        .map(|i| {
            let series = draws.series(i);
            let refs: Vec<&[f64]> = series.iter().map(Vec::as_slice).collect();
            let r = split_rhat(&refs)?;
            if r.is_nan() {
                warn!(
                    "{} has zero within-chain variance; R-hat undefined",
                    layout.names()[i]
                );
            }
            Ok((layout.names()[i].clone(), r))
        })
        .collect()
}
