//! Sample statistics used by every estimator.
//!
//! All reductions here are sequential over their input slice so results do not
//! depend on the number of worker threads that produced the data.

use serde::{Deserialize, Serialize};

/// A Monte Carlo point estimate with its standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn new(value: f64, std_error: f64) -> Self {
        Self { value, std_error }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0 }
    }

    /// Whether `target` lies within `k` standard errors, or within `abs_tol`.
    pub fn within(&self, target: f64, k: f64, abs_tol: f64) -> bool {
        (self.value - target).abs() <= (k * self.std_error).max(abs_tol)
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

/// Sample mean with its standard error.
pub fn mean_se(x: &[f64]) -> Estimate {
    let n = x.len();
    if n == 0 {
        return Estimate::default();
    }
    Estimate::new(mean(x), (variance(x) / n as f64).sqrt())
}

/// Standard error of a sum of independent estimators.
pub fn combined_se(ses: &[f64]) -> f64 {
    ses.iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// Sample covariance of two equally long series, returned with the standard
/// error of the product-mean estimator.
pub fn covariance_se(x: &[f64], y: &[f64]) -> Estimate {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return Estimate::default();
    }
    let (mx, my) = (mean(x), mean(y));
    let prod: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let est = mean_se(&prod);
    Estimate::new(est.value * n as f64 / (n - 1) as f64, est.std_error)
}

/// Expected shortfall at level `alpha` of the losses `x` (large values are
/// losses): the mean of the worst `⌈(1 − α) n⌉` observations.
///
/// The standard error uses the asymptotic variance
/// `(Var[L | L ≥ VaR] + α (ES − VaR)²) / ((1 − α) n)`.
/// Returns `None` when fewer than `1 / (1 − α)` observations are available.
pub fn expected_shortfall(x: &[f64], alpha: f64) -> Option<Estimate> {
    let n = x.len();
    let tail = 1.0 - alpha;
    if n == 0 || (n as f64) * tail < 1.0 - 1e-12 {
        return None;
    }
    let k = ((tail * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let worst = &sorted[..k];
    let es = mean(worst);
    let var_level = worst[k - 1];
    let tail_var = if k > 1 {
        worst.iter().map(|v| (v - es) * (v - es)).sum::<f64>() / k as f64
    } else {
        0.0
    };
    let se = ((tail_var + alpha * (es - var_level).powi(2)) / (tail * n as f64)).sqrt();
    Some(Estimate::new(es, se))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_se_of_known_sample() {
        let e = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.value, 2.5);
        let var: f64 = 5.0 / 3.0;
        assert!((e.std_error - (var / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn es_picks_worst_fraction() {
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let es = expected_shortfall(&x, 0.8).unwrap();
        assert_eq!(es.value, 9.5);
        assert!(expected_shortfall(&x[..3], 0.8).is_none());
    }

    #[test]
    fn covariance_of_independent_columns_is_small() {
        let x = [1.0, -1.0, 1.0, -1.0];
        let y = [1.0, 1.0, -1.0, -1.0];
        assert_eq!(covariance_se(&x, &y).value, 0.0);
    }
}
