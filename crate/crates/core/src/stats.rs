//! Small statistical helpers: Gaussian quantiles and the one-sample
//! Kolmogorov-Smirnov test against N(0, 1).

use statrs::distribution::{ContinuousCDF, Normal};

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Standard normal quantile `Phi^{-1}(prob)`.
pub fn normal_quantile(prob: f64) -> f64 {
    standard_normal().inverse_cdf(prob)
}

pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

/// Result of a one-sample KS test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sided KS test of `sample` against the standard normal.
pub fn ks_test_standard_normal(sample: &[f64]) -> KsTest {
    let mut sorted: Vec<f64> = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = normal_cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    KsTest {
        statistic: d,
        p_value: kolmogorov_survival((n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d),
    }
}

/// `P(K > x)` for the Kolmogorov distribution.
fn kolmogorov_survival(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * x * x).exp();
        sum += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_match_tables() {
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-9);
        assert!((normal_quantile(0.5)).abs() < 1e-12);
        // tail used by the coefficient-program penalty at n=500, p=30
        assert!((normal_quantile(1.0 - 0.05 / 60.0) - 3.143_980_287).abs() < 1e-6);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // classical critical values: P(K > 1.3581) = 0.05, P(K > 1.6276) = 0.01
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn ks_accepts_normal_quantile_grid_and_rejects_shift() {
        let grid: Vec<f64> = (1..1000).map(|i| normal_quantile(i as f64 / 1000.0)).collect();
        assert!(ks_test_standard_normal(&grid).p_value > 0.99);
        let shifted: Vec<f64> = grid.iter().map(|x| x + 0.5).collect();
        assert!(ks_test_standard_normal(&shifted).p_value < 1e-6);
    }
}
