//! Erf observation model for expression data with an unknown basal level.

use statrs::function::erf::erf;

/// `(p(y | X=1), p(y | X=0))` with `z = (y - mu_b) / sigma_b`:
/// `1 - erf(z)` for the over-expressed state and `erf(z)` otherwise, both
/// clamped to `[0, 1]` (the raw form goes negative below the basal mean).
pub fn irma_observation_likelihood(y: f64, mu_b: f64, sigma_b: f64) -> (f64, f64) {
    let e = erf((y - mu_b) / sigma_b);
    ((1.0 - e).clamp(0.0, 1.0), e.clamp(0.0, 1.0))
}

/// Sample mean and standard deviation of a node's measurements, ignoring
/// missing values. Used as the basal parameters `(mu_b, sigma_b)`.
pub fn estimate_basal(values: &[f64]) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.len() < 2 {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var > 0.0 {
        Some((mean, var.sqrt()))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn at_basal_mean() {
        assert_eq!(irma_observation_likelihood(3.0, 3.0, 0.5), (1.0, 0.0));
    }

    #[test]
    fn far_above_basal() {
        let (p1, p0) = irma_observation_likelihood(1e6, 0.0, 1.0);
        assert!(p1.abs() < 1e-15 && (p0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn one_sigma_above() {
        let (p1, p0) = irma_observation_likelihood(2.5, 2.0, 0.5);
        assert!((p1 - 0.157299).abs() < 1e-6);
        assert!((p0 - 0.842701).abs() < 1e-6);
    }

    #[test]
    fn clamped_below_basal() {
        let (p1, p0) = irma_observation_likelihood(-1.0, 0.0, 1.0);
        assert_eq!((p1, p0), (1.0, 0.0));
    }

    #[test]
    fn basal_estimate() {
        let (m, s) = estimate_basal(&[1.0, 2.0, 3.0, f64::NAN]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
