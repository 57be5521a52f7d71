//! Binomial proportion summaries.

use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Observed frequency of an event with its Wilson score interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub successes: u64,
    pub trials: u64,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Proportion {
    pub fn new(successes: u64, trials: u64) -> Self {
        let (ci_low, ci_high) = wilson_interval(successes, trials, Z95);
        Proportion {
            successes,
            trials,
            p_hat: if trials == 0 {
                f64::NAN
            } else {
                successes as f64 / trials as f64
            },
            ci_low,
            ci_high,
        }
    }

    /// Standard error of the frequency when the true probability is `p`.
    pub fn standard_error_at(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }

    /// Plug-in standard error `sqrt(p_hat (1 - p_hat) / N)`.
    pub fn standard_error(&self) -> f64 {
        self.standard_error_at(self.p_hat)
    }

    /// `|p_hat - p| / SE(p)`; zero when both sides agree on a degenerate `p`.
    pub fn z_score_against(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        let se = self.standard_error_at(p);
        let diff = (self.p_hat - p).abs();
        if se == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / se
        }
    }
}

/// Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_contains_estimate() {
        let p = Proportion::new(30, 100);
        assert!(p.ci_low < 0.3 && 0.3 < p.ci_high);
        // reference values for 30/100 at z = 1.96
        assert!((p.ci_low - 0.2189).abs() < 1e-3);
        assert!((p.ci_high - 0.3958).abs() < 1e-3);
    }

    #[test]
    fn wilson_handles_extremes() {
        let p = Proportion::new(0, 50);
        assert_eq!(p.ci_low, 0.0);
        assert!(p.ci_high > 0.0 && p.ci_high < 0.1);
        let p = Proportion::new(50, 50);
        assert_eq!(p.ci_high, 1.0);
        assert!(p.ci_low > 0.9);
        assert_eq!(p.z_score_against(1.0), 0.0);
    }
}
