//! Univariate slice sampling with stepping out and shrinkage.

use rand::Rng;
use rand_distr::Exp1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceFailure {
    /// The interval was still inside the slice after the step cap.
    SteppingOut,
    /// Shrinkage did not find an accepted point within the cap.
    Shrinkage,
    /// The log density at the current point is not finite.
    BadStart,
}

/// Slice sampling tuning.
#[derive(Debug, Clone, Copy)]
pub struct SliceConfig {
    pub width: f64,
    /// Maximum number of expansions on each side of the initial interval.
    pub max_steps: usize,
    pub max_shrinks: usize,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig {
            width: 1.0,
            max_steps: 50,
            max_shrinks: 1000,
        }
    }
}

/// One slice-sampling transition from `x0` targeting `exp(log_density)`.
///
/// The interval is stepped out without a random split between sides; a side
/// that needs more than `max_steps` expansions is reported as a failure
/// instead of being truncated.
pub fn slice_sample<R, F>(
    x0: f64,
    log_density: F,
    config: &SliceConfig,
    rng: &mut R,
) -> Result<f64, SliceFailure>
where
    R: Rng + ?Sized,
    F: Fn(f64) -> f64,
{
    let f0 = log_density(x0);
    if !f0.is_finite() {
        return Err(SliceFailure::BadStart);
    }
    let level = f0 - rng.sample::<f64, _>(Exp1);

    let w = config.width;
    let mut left = x0 - w * rng.random::<f64>();
    let mut right = left + w;
    let mut steps = 0;
    while log_density(left) > level {
        if steps == config.max_steps {
            return Err(SliceFailure::SteppingOut);
        }
        left -= w;
        steps += 1;
    }
    steps = 0;
    while log_density(right) > level {
        if steps == config.max_steps {
            return Err(SliceFailure::SteppingOut);
        }
        right += w;
        steps += 1;
    }

    for _ in 0..config.max_shrinks {
        let x1 = left + rng.random::<f64>() * (right - left);
        if log_density(x1) > level {
            return Ok(x1);
        }
        if x1 < x0 {
            left = x1;
        } else {
            right = x1;
        }
    }
    Err(SliceFailure::Shrinkage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SliceConfig::default();
        let mut x = 0.0;
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            x = slice_sample(x, |v| -0.5 * v * v, &cfg, &mut rng).unwrap();
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn failures_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SliceConfig::default();
        assert_eq!(
            slice_sample(0.0, |_| 0.0, &cfg, &mut rng),
            Err(SliceFailure::SteppingOut)
        );
        assert_eq!(
            slice_sample(0.0, |_| f64::NEG_INFINITY, &cfg, &mut rng),
            Err(SliceFailure::BadStart)
        );
    }
}
