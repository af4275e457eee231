//! Standard normal helpers.

use statrs::function::erf::{erfc, erfc_inv};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Φ(x).
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// 1 − Φ(x), accurate in the upper tail.
pub fn sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Φ⁻¹(p).
pub fn quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    // One Halley step; the series inverse alone is good to about 1e-10.
    let e = if p < 0.5 { cdf(x) - p } else { (1.0 - p) - sf(x) };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Two-sided critical value Φ⁻¹(1 − α/2).
pub fn two_sided_critical(alpha: f64) -> f64 {
    quantile(1.0 - alpha / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn known_values() {
        assert_abs_diff_eq!(cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(quantile(0.975), 1.959963984540054, epsilon = 1e-9);
        assert_abs_diff_eq!(two_sided_critical(0.04), 2.053748910631823, epsilon = 1e-9);
        assert_abs_diff_eq!(sf(5.0), 2.866515718791939e-7, epsilon = 1e-15);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-8, 0.01, 0.3, 0.5, 0.77, 0.999] {
            assert_abs_diff_eq!(cdf(quantile(p)), p, epsilon = 1e-12);
        }
    }
}
