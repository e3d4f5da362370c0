//! Responsibility r = P(s = 1 | y), the uncertain Bayes estimator and its
//! empirical plug-in, and shrinkage-profile tabulation.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::family::{self, Area, AreaRecord, FamilyKind, ModelParams};
use crate::numerics::special::{logistic, logit};

/// Log density ratios are clipped here before exponentiation.
const LOG_RATIO_CLIP: f64 = 700.0;

/// Per-area quantities behind the uncertain Bayes estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaPosterior {
    /// synthetic mean m = ψ'(xᵗβ)
    pub m: f64,
    /// conjugate posterior mean (n·y + ν·m)/(n + ν)
    pub eta: f64,
    /// P(s = 1 | y)
    pub r: f64,
    pub mu_tilde: f64,
}

/// r from precomputed log densities.
#[inline]
pub(crate) fn responsibility_from_logs(p: f64, ln_f1: f64, ln_f2: f64) -> f64 {
    if p >= 1.0 {
        return 1.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    let d = (ln_f2 - ln_f1).clamp(-LOG_RATIO_CLIP, LOG_RATIO_CLIP);
    logistic(logit(p) - d)
}

#[inline]
pub(crate) fn responsibility_at(kind: FamilyKind, area: &Area, m: f64, params: &ModelParams) -> f64 {
    if params.p >= 1.0 {
        return 1.0;
    }
    if params.p <= 0.0 {
        return 0.0;
    }
    let l1 = family::ln_f1(kind, area, m, params.nu);
    let l2 = family::ln_f2(kind, area, m);
    responsibility_from_logs(params.p, l1, l2)
}

#[inline]
pub(crate) fn ub_at(kind: FamilyKind, area: &Area, m: f64, params: &ModelParams) -> AreaPosterior {
    let r = responsibility_at(kind, area, m, params);
    let w = area.n / (params.nu + area.n);
    AreaPosterior {
        m,
        eta: m + w * (area.y - m),
        r,
        mu_tilde: m + w * (area.y - m) * r,
    }
}

/// P(s = 1 | y; φ) = p / (p + (1 − p)·f2/f1).
pub fn responsibility(rec: &AreaRecord, params: &ModelParams, kind: FamilyKind) -> Result<f64> {
    params.validate(kind)?;
    let area = Area::from_record(rec, kind)?;
    let m = family::synthetic_mean(&rec.x, params, kind)?;
    Ok(responsibility_at(kind, &area, m, params))
}

/// Uncertain Bayes estimate μ̃ = m + n/(ν + n)·(y − m)·r, with its ingredients.
pub fn ub_estimate(rec: &AreaRecord, params: &ModelParams, kind: FamilyKind) -> Result<AreaPosterior> {
    params.validate(kind)?;
    let area = Area::from_record(rec, kind)?;
    let m = family::synthetic_mean(&rec.x, params, kind)?;
    Ok(ub_at(kind, &area, m, params))
}

/// Empirical uncertain Bayes estimate: [`ub_estimate`] at fitted hyperparameters.
pub fn eub_estimate(rec: &AreaRecord, fitted: &ModelParams, kind: FamilyKind) -> Result<AreaPosterior> {
    ub_estimate(rec, fitted, kind)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileRow {
    pub y: f64,
    pub r: f64,
    pub mu_tilde: f64,
}

/// r and μ̃ along a grid of observations, other inputs taken from `rec_template`.
pub fn shrinkage_profile(
    y_grid: &[f64],
    rec_template: &AreaRecord,
    params: &ModelParams,
    kind: FamilyKind,
) -> Result<Vec<ProfileRow>> {
    params.validate(kind)?;
    let m = family::synthetic_mean(&rec_template.x, params, kind)?;
    y_grid
        .iter()
        .map(|&y| {
            let rec = AreaRecord::new(y, rec_template.n, rec_template.x.clone());
            let area = Area::from_record(&rec, kind)
                .map_err(|e| Error::InvalidRecord(format!("grid point y = {y}: {e}")))?;
            let post = ub_at(kind, &area, m, params);
            Ok(ProfileRow {
                y,
                r: post.r,
                mu_tilde: post.mu_tilde,
            })
        })
        .collect()
}

/// Render profile rows as CSV with a `y,r,mu_tilde` header.
pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from("y,r,mu_tilde\n");
    for row in rows {
        let _ = writeln!(out, "{},{},{}", row.y, row.r, row.mu_tilde);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rec(y: f64, n: f64) -> AreaRecord {
        AreaRecord::new(y, n, vec![1.0])
    }

    #[test]
    fn p_extremes() {
        for kind in FamilyKind::ALL {
            for &y in &[0.0, 0.5, 1.0] {
                let one = ModelParams::new(vec![0.1], 3.0, 1.0);
                let zero = ModelParams::new(vec![0.1], 3.0, 0.0);
                assert_eq!(responsibility(&rec(y, 4.0), &one, kind).unwrap(), 1.0);
                assert_eq!(responsibility(&rec(y, 4.0), &zero, kind).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn fh_zero_residual_hand_value() {
        // A = D = 1, p = 0.5, y = m: r = 1 / (1 + sqrt(2))
        let p = ModelParams::new(vec![0.3], 1.0, 0.5);
        let r = responsibility(&rec(0.3, 1.0), &p, FamilyKind::FayHerriot).unwrap();
        assert_abs_diff_eq!(r, 1.0 / (1.0 + 2f64.sqrt()), epsilon = 1e-12);
    }

    #[test]
    fn fh_closed_form_agrees() {
        let (a, d, p, m, y) = (0.7_f64, 0.4_f64, 0.35_f64, 1.1_f64, 2.3_f64);
        let closed = p / (p + (1.0 - p) * ((a + d) / d).sqrt()
            * (-a * (y - m).powi(2) / (2.0 * d * (a + d))).exp());
        let params = ModelParams::new(vec![m], 1.0 / a, p);
        let r = responsibility(&rec(y, 1.0 / d), &params, FamilyKind::FayHerriot).unwrap();
        assert_abs_diff_eq!(r, closed, epsilon = 1e-12);
    }

    #[test]
    fn pg_closed_form_agrees() {
        use crate::numerics::special::ln_gamma;
        let (n, nu, m, p) = (10.0_f64, 5.0_f64, 1.0_f64, 0.5_f64);
        let z = 20.0_f64;
        let ratio = (ln_gamma(nu * m) - n * m - ln_gamma(z + nu * m)
            + (z + nu * m) * (n + nu).ln()
            + z * m.ln()
            - nu * m * nu.ln())
        .exp();
        let closed = p / (p + (1.0 - p) * ratio);
        let params = ModelParams::new(vec![m.ln()], nu, p);
        let r = responsibility(&rec(z / n, n), &params, FamilyKind::PoissonGamma).unwrap();
        assert_abs_diff_eq!(r, closed, epsilon = 1e-12);
    }

    #[test]
    fn ub_shapes() {
        let params = ModelParams::new(vec![0.0], 5.0, 0.5);
        for kind in FamilyKind::ALL {
            let m = family::synthetic_mean(&[1.0], &params, kind).unwrap();
            let post = ub_estimate(&rec(m, 10.0), &params, kind).unwrap();
            assert_abs_diff_eq!(post.mu_tilde, m, epsilon = 1e-15);
        }
        let full = ModelParams::new(vec![0.0], 5.0, 1.0);
        let post = ub_estimate(&rec(2.0, 10.0), &full, FamilyKind::PoissonGamma).unwrap();
        assert_abs_diff_eq!(post.mu_tilde, (20.0 + 5.0) / 15.0, epsilon = 1e-14);
        assert_abs_diff_eq!(post.eta, post.mu_tilde, epsilon = 1e-14);
        let a = eub_estimate(&rec(2.0, 10.0), &params, FamilyKind::PoissonGamma).unwrap();
        let b = ub_estimate(&rec(2.0, 10.0), &params, FamilyKind::PoissonGamma).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pg_ub_against_two_stage_sampling() {
        let params = ModelParams::new(vec![0.0], 5.0, 0.5);
        let r0 = rec(2.0, 10.0);
        let post = ub_estimate(&r0, &params, FamilyKind::PoissonGamma).unwrap();
        assert_abs_diff_eq!(post.mu_tilde, 1.0 + (10.0 / 15.0) * post.r, epsilon = 1e-14);
        let conj = family::posterior_params(&r0, &params, FamilyKind::PoissonGamma).unwrap();
        let mut rng = RngStream::new(77, 1);
        let draws = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let mu = if crate::numerics::sample::bernoulli(post.r, &mut rng) {
                conj.sample_mean(&mut rng)
            } else {
                post.m
            };
            s1 += mu;
            s2 += mu * mu;
        }
        let mean = s1 / draws as f64;
        let var = s2 / draws as f64 - mean * mean;
        assert!((mean - post.mu_tilde).abs() < 4.0 * (var / draws as f64).sqrt());
    }

    #[test]
    fn profile_csv_format() {
        let params = ModelParams::new(vec![0.0], 10.0, 1.0);
        let rows = shrinkage_profile(&[0.0, 0.5, 1.0], &rec(0.0, 10.0), &params, FamilyKind::PoissonGamma)
            .unwrap();
        assert!(rows.iter().all(|r| r.r == 1.0));
        let csv = profile_csv(&rows);
        assert!(csv.starts_with("y,r,mu_tilde\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!(shrinkage_profile(&[0.05], &rec(0.0, 10.0), &params, FamilyKind::PoissonGamma).is_err());
    }

    /// Nonincreasing then nondecreasing, up to rounding.
    fn is_v_shaped(r: &[f64]) -> bool {
        let tol = 1e-12;
        let mut i = 0;
        while i + 1 < r.len() && r[i + 1] <= r[i] + tol {
            i += 1;
        }
        r[i..].windows(2).all(|w| w[1] + tol >= w[0])
    }

    fn count_profile(kind: FamilyKind, n: u32, beta0: f64, nu: f64, p: f64, z_max: u32) -> Vec<f64> {
        let params = ModelParams::new(vec![beta0], nu, p);
        let grid: Vec<f64> = (0..=z_max).map(|z| z as f64 / n as f64).collect();
        shrinkage_profile(&grid, &rec(0.0, n as f64), &params, kind)
            .unwrap()
            .iter()
            .map(|row| row.r)
            .collect()
    }

    proptest! {
        #[test]
        fn responsibility_monotone_in_p(
            y in -3.0..3.0f64, beta0 in -1.0..1.0f64, nu in 0.2..20.0f64,
            p1 in 0.0..1.0f64, p2 in 0.0..1.0f64,
        ) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let a = ModelParams::new(vec![beta0], nu, lo);
            let b = ModelParams::new(vec![beta0], nu, hi);
            let r = rec(y, 2.0);
            let ra = responsibility(&r, &a, FamilyKind::FayHerriot).unwrap();
            let rb = responsibility(&r, &b, FamilyKind::FayHerriot).unwrap();
            prop_assert!(ra <= rb + 1e-15);
        }

        #[test]
        fn mu_tilde_between_m_and_eta(
            z in 0u32..40, n in 1u32..40, beta0 in -2.0..2.0f64, nu in 0.1..30.0f64, p in 0.0..=1.0f64,
        ) {
            let params = ModelParams::new(vec![beta0], nu, p);
            for kind in [FamilyKind::PoissonGamma, FamilyKind::BinomialBeta] {
                if kind == FamilyKind::BinomialBeta && z > n { continue; }
                let post = ub_estimate(&rec(z as f64 / n as f64, n as f64), &params, kind).unwrap();
                let (lo, hi) = if post.m <= post.eta { (post.m, post.eta) } else { (post.eta, post.m) };
                prop_assert!((0.0..=1.0).contains(&post.r));
                prop_assert!(post.mu_tilde >= lo - 1e-12 && post.mu_tilde <= hi + 1e-12);
            }
        }

        #[test]
        fn pg_profile_is_v_shaped(n in 2u32..40, beta0 in -1.5..1.5f64, nu in 0.5..30.0f64, p in 0.01..0.99f64) {
            let r = count_profile(FamilyKind::PoissonGamma, n, beta0, nu, p, 4 * n + 20);
            prop_assert!(is_v_shaped(&r), "{:?}", r);
        }

        #[test]
        fn bb_profile_is_v_shaped(n in 2u32..60, beta0 in -2.0..2.0f64, nu in 0.5..30.0f64, p in 0.01..0.99f64) {
            let r = count_profile(FamilyKind::BinomialBeta, n, beta0, nu, p, n);
            prop_assert!(is_v_shaped(&r), "{:?}", r);
        }

        #[test]
        fn fh_symmetric_in_residual(d in 0.0..10.0f64, nu in 0.05..10.0f64, n in 0.05..10.0f64, p in 0.01..0.99f64) {
            let params = ModelParams::new(vec![0.0], nu, p);
            let a = responsibility(&rec(d, n), &params, FamilyKind::FayHerriot).unwrap();
            let b = responsibility(&rec(-d, n), &params, FamilyKind::FayHerriot).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn pg_minimum_at_ceil_nm() {
        // h(z+1)/h(z) = (n+ν)m/(z+νm) crosses 1 at z = n·m
        let (n, nu, m) = (10u32, 4.0, 1.37_f64);
        let r = count_profile(FamilyKind::PoissonGamma, n, m.ln(), nu, 0.4, 60);
        let argmin = r
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmin as f64, (n as f64 * m).ceil());
    }
}
