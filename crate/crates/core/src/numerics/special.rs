//! Log-gamma, digamma and log-beta for positive real arguments.
//!
//! These are implemented here rather than pulled from libm so that every
//! platform produces the same bits.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

// 0.5 * ln(2π)
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// ln Γ(x) for x > 0.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain {
            func: "log_gamma",
            value: x,
        });
    }
    Ok(ln_gamma(x))
}

/// Unchecked ln Γ(x); callers guarantee x > 0.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Γ(x)Γ(1-x) = π / sin(πx)
        (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = LANCZOS_COEF[0];
        for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + LANCZOS_G + 0.5;
        HALF_LN_2PI + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

/// ψ(x) = d ln Γ(x) / dx for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain {
            func: "digamma",
            value: x,
        });
    }
    Ok(psi(x))
}

/// Unchecked digamma: upward recurrence to x ≥ 10, then the asymptotic series.
#[inline]
pub fn psi(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli terms B_{2k} / (2k x^{2k}) up to k = 6
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    acc + x.ln() - 0.5 * inv - series
}

/// ln B(a, b).
pub fn log_beta(a: f64, b: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) || a <= 0.0 || b <= 0.0 {
        return Err(Error::Domain {
            func: "log_beta",
            value: if a <= 0.0 || !a.is_finite() { a } else { b },
        });
    }
    Ok(ln_beta(a, b))
}

#[inline]
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// ln Γ(a + k) − ln Γ(a) for a > 0, k ≥ 0, without the cancellation of the
/// plain difference when a is large.
pub fn ln_rising(a: f64, k: f64) -> f64 {
    if k == 0.0 {
        return 0.0;
    }
    if a >= 32.0 {
        let b = a + k;
        (a - 0.5) * (k / a).ln_1p() + k * b.ln() - k + stirling_tail(b) - stirling_tail(a)
    } else if k.fract() == 0.0 && k <= 64.0 {
        (0..k as usize).map(|i| (a + i as f64).ln()).sum()
    } else {
        ln_gamma(a + k) - ln_gamma(a)
    }
}

// ln Γ(x) − [(x − ½) ln x − x + ½ ln 2π], x ≥ 32
fn stirling_tail(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)))
}

/// ln C(n, k) for real n ≥ k ≥ 0.
#[inline]
pub fn ln_choose(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// ln(e^a + e^b) without overflow.
#[inline]
pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let hi = a.max(b);
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

/// Numerically safe logistic function.
#[inline]
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn log_gamma_known_values() {
        assert_abs_diff_eq!(log_gamma(1.0).unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(log_gamma(2.0).unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(log_gamma(5.0).unwrap(), 24f64.ln(), epsilon = 1e-13);
        assert_abs_diff_eq!(log_gamma(0.5).unwrap(), 0.5 * PI.ln(), epsilon = 1e-13);
        // ln Γ(1e-3) = -ln(1e-3) - γ·1e-3 + O(1e-6)
        assert_abs_diff_eq!(log_gamma(1e-3).unwrap(), 6.907_178_885_383_853, epsilon = 1e-12);
    }

    #[test]
    fn log_gamma_factorials() {
        let mut ln_fact = 0.0_f64;
        for k in 1..=170u32 {
            ln_fact += (k as f64).ln();
            let got = ln_gamma(k as f64 + 1.0);
            assert!(
                (got - ln_fact).abs() <= 1e-13 * ln_fact.abs().max(1.0),
                "k={k}: {got} vs {ln_fact}"
            );
        }
    }

    #[test]
    fn log_gamma_large_argument_stirling() {
        // Stirling series with three correction terms is exact to ~1e-22 here.
        for &x in &[1e3_f64, 1e4, 1e5, 1e6] {
            let inv = 1.0 / x;
            let stirling = (x - 0.5) * x.ln() - x + HALF_LN_2PI + inv / 12.0
                - inv.powi(3) / 360.0
                + inv.powi(5) / 1260.0;
            let got = ln_gamma(x);
            assert!((got - stirling).abs() <= 2e-15 * stirling.abs(), "x={x}");
        }
    }

    #[test]
    fn log_gamma_recurrence_grid() {
        let mut x = 0.1_f64;
        while x <= 100.0 {
            let lhs = ln_gamma(x + 1.0) - ln_gamma(x);
            assert!((lhs - x.ln()).abs() <= 1e-10, "x={x}");
            x += 0.1;
        }
    }

    #[test]
    fn log_gamma_rejects_bad_input() {
        assert!(log_gamma(0.0).is_err());
        assert!(log_gamma(-1.5).is_err());
        assert!(log_gamma(f64::NAN).is_err());
        assert!(log_gamma(f64::INFINITY).is_err());
    }

    // Six-point central difference, O(h^6).
    fn fd_derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + 3.0 * h) - 9.0 * f(x + 2.0 * h) + 45.0 * f(x + h) - 45.0 * f(x - h)
            + 9.0 * f(x - 2.0 * h)
            - f(x - 3.0 * h))
            / (60.0 * h)
    }

    #[test]
    fn digamma_matches_differentiated_log_gamma() {
        let oracle_1 = fd_derivative(ln_gamma, 1.0, 1e-3);
        let oracle_half = fd_derivative(ln_gamma, 0.5, 1e-3);
        assert_abs_diff_eq!(oracle_1, -EULER_GAMMA, epsilon = 1e-9);
        assert_abs_diff_eq!(oracle_half, -1.963_510_026_021_423_5, epsilon = 1e-9);
        assert_abs_diff_eq!(digamma(1.0).unwrap(), -0.577_215_664_9, epsilon = 1e-10);
        assert_abs_diff_eq!(digamma(0.5).unwrap(), -1.963_510_026_0, epsilon = 1e-10);
    }

    #[test]
    fn digamma_grid_vs_central_difference() {
        let mut x = 0.1_f64;
        while x <= 100.0 {
            let h = 1e-3 * x.min(1.0);
            let fd = fd_derivative(ln_gamma, x, h);
            assert!((psi(x) - fd).abs() <= 1e-6, "x={x}");
            x += 0.1;
        }
    }

    #[test]
    fn digamma_recurrence() {
        for &x in &[1e-3_f64, 0.01, 0.3, 1.0, 2.5, 7.9, 9.99, 10.0, 42.0, 1e3, 1e6] {
            let diff = psi(x + 1.0) - psi(x);
            assert!((diff - 1.0 / x).abs() <= 1e-10 * (1.0 / x).max(1.0), "x={x}");
        }
        assert!(digamma(0.0).is_err());
        assert!(digamma(-2.0).is_err());
    }

    #[test]
    fn rising_matches_products_and_differences() {
        for &a in &[0.3, 2.5, 31.9, 32.0, 40.0, 1e3, 1e7] {
            for k in 0..12 {
                let direct: f64 = (0..k).map(|i| (a + i as f64).ln()).sum();
                let got = ln_rising(a, k as f64);
                assert!((got - direct).abs() <= 1e-13 * direct.abs().max(1.0), "a={a} k={k}: {got} vs {direct}");
            }
        }
        for &(a, k) in &[(33.0, 0.5), (50.0, 200.0), (0.7, 100.5), (1e4, 3e4)] {
            let diff = ln_gamma(a + k) - ln_gamma(a);
            assert!((ln_rising(a, k) - diff).abs() < 1e-10 * diff.abs(), "a={a} k={k}");
        }
    }

    #[test]
    fn log_beta_values() {
        assert_abs_diff_eq!(log_beta(1.0, 1.0).unwrap(), 0.0, epsilon = 1e-14);
        for &a in &[0.3, 1.0, 4.5, 30.0] {
            assert_abs_diff_eq!(log_beta(a, 1.0).unwrap(), -(a as f64).ln(), epsilon = 1e-12);
        }
        // B(2,3) = Γ(2)Γ(3)/Γ(5) = 2/24
        assert_abs_diff_eq!(log_beta(2.0, 3.0).unwrap(), (1.0f64 / 12.0).ln(), epsilon = 1e-12);
        assert!(log_beta(0.0, 1.0).is_err());
        assert!(log_beta(1.0, -1.0).is_err());
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_abs_diff_eq!(log_sum_exp(1000.0, 1000.0), 1000.0 + 2f64.ln(), epsilon = 1e-12);
        assert_eq!(log_sum_exp(f64::NEG_INFINITY, -3.0), -3.0);
        assert_abs_diff_eq!(logistic(0.0), 0.5);
        assert!(logistic(-800.0) >= 0.0 && logistic(800.0) <= 1.0);
    }
}
