//! The three conjugate NEF-QVF models: links, the two marginal components
//! f1 (conjugate prior integrated out) and f2 (no random effect), the
//! conjugate posterior and its moments, and samplers.
//!
//! Count families keep `y` on the rate/proportion scale with the count
//! `z = n·y` reconstructed on demand; all densities are masses of the count.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::sample::{self, std_normal};
use crate::numerics::special::{ln_choose, ln_gamma, ln_rising, logistic, psi};
use crate::numerics::RngStream;

/// Guard for binomial–beta synthetic means before taking logs.
pub const BB_MEAN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FamilyKind {
    #[serde(rename = "fh")]
    FayHerriot,
    #[serde(rename = "pg")]
    PoissonGamma,
    #[serde(rename = "bb")]
    BinomialBeta,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 3] = [
        FamilyKind::FayHerriot,
        FamilyKind::PoissonGamma,
        FamilyKind::BinomialBeta,
    ];

    /// Coefficients (v0, v1, v2) of the variance function Q(x) = v0 + v1·x + v2·x².
    pub fn variance_coeffs(self) -> (f64, f64, f64) {
        match self {
            FamilyKind::FayHerriot => (1.0, 0.0, 0.0),
            FamilyKind::PoissonGamma => (0.0, 1.0, 0.0),
            FamilyKind::BinomialBeta => (0.0, 1.0, -1.0),
        }
    }

    #[inline]
    pub fn variance_fn(self, x: f64) -> f64 {
        let (v0, v1, v2) = self.variance_coeffs();
        v0 + v1 * x + v2 * x * x
    }

    #[inline]
    pub fn v2(self) -> f64 {
        self.variance_coeffs().2
    }

    /// ν must exceed this for the prior variance Q(m)/(ν − v2) to be positive and finite.
    pub fn nu_lower_bound(self) -> f64 {
        self.v2().max(0.0)
    }

    /// ψ'(t): the mean as a function of the natural parameter.
    #[inline]
    pub fn mean_from_natural(self, t: f64) -> f64 {
        match self {
            FamilyKind::FayHerriot => t,
            FamilyKind::PoissonGamma => t.exp(),
            FamilyKind::BinomialBeta => logistic(t),
        }
    }

    /// (ψ')⁻¹(μ).
    pub fn natural_from_mean(self, mu: f64) -> f64 {
        match self {
            FamilyKind::FayHerriot => mu,
            FamilyKind::PoissonGamma => mu.ln(),
            FamilyKind::BinomialBeta => (mu / (1.0 - mu)).ln(),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            FamilyKind::FayHerriot => "fh",
            FamilyKind::PoissonGamma => "pg",
            FamilyKind::BinomialBeta => "bb",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        match s {
            "fh" => Some(FamilyKind::FayHerriot),
            "pg" => Some(FamilyKind::PoissonGamma),
            "bb" => Some(FamilyKind::BinomialBeta),
            _ => None,
        }
    }

    pub fn is_count(self) -> bool {
        !matches!(self, FamilyKind::FayHerriot)
    }
}

/// One area's direct estimate `y`, known scale `n`, and covariates `x`.
///
/// For Fay–Herriot, `n = 1/D` with `D` the known sampling variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRecord {
    pub y: f64,
    pub n: f64,
    pub x: Vec<f64>,
}

impl AreaRecord {
    pub fn new(y: f64, n: f64, x: Vec<f64>) -> Self {
        Self { y, n, x }
    }

    pub fn validate(&self, kind: FamilyKind) -> Result<()> {
        if !(self.n.is_finite() && self.n > 0.0) {
            return Err(Error::InvalidRecord(format!("n must be positive, got {}", self.n)));
        }
        if !self.y.is_finite() {
            return Err(Error::InvalidRecord(format!("y must be finite, got {}", self.y)));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord("covariates must be finite".into()));
        }
        if kind.is_count() {
            self.count(kind)?;
        }
        Ok(())
    }

    /// The count `n·y` for PG/BB, validated to be an integer in the support.
    pub fn count(&self, kind: FamilyKind) -> Result<f64> {
        let raw = self.n * self.y;
        let z = raw.round();
        if (raw - z).abs() > 1e-8 * z.abs().max(1.0) {
            return Err(Error::InvalidRecord(format!(
                "n*y = {raw} is not an integer count"
            )));
        }
        if z < 0.0 {
            return Err(Error::InvalidRecord(format!("negative count {z}")));
        }
        if kind == FamilyKind::BinomialBeta {
            if (self.n - self.n.round()).abs() > 1e-9 {
                return Err(Error::InvalidRecord(format!(
                    "binomial n must be an integer, got {}",
                    self.n
                )));
            }
            if z > self.n.round() {
                return Err(Error::InvalidRecord(format!(
                    "count {z} exceeds n = {}",
                    self.n
                )));
            }
        }
        Ok(z)
    }
}

/// Hyperparameters φ = (β, ν, p).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: Vec<f64>,
    pub nu: f64,
    pub p: f64,
}

impl ModelParams {
    pub fn new(beta: Vec<f64>, nu: f64, p: f64) -> Self {
        Self { beta, nu, p }
    }

    /// Fay–Herriot random-effect variance A = 1/ν.
    pub fn a(&self) -> f64 {
        1.0 / self.nu
    }

    pub fn dim(&self) -> usize {
        self.beta.len() + 2
    }

    pub fn validate(&self, kind: FamilyKind) -> Result<()> {
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("beta must be finite".into()));
        }
        if !(self.nu.is_finite() && self.nu > kind.nu_lower_bound()) {
            return Err(Error::InvalidParameter(format!(
                "nu = {} must exceed {}",
                self.nu,
                kind.nu_lower_bound()
            )));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidParameter(format!("p = {} outside [0, 1]", self.p)));
        }
        Ok(())
    }

    /// Flatten to (β₁..β_q, ν, p).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.push(self.nu);
        v.push(self.p);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let q = v.len() - 2;
        Self {
            beta: v[..q].to_vec(),
            nu: v[q],
            p: v[q + 1],
        }
    }

    #[inline]
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.beta).map(|(a, b)| a * b).sum()
    }
}

/// Latent (s, θ, μ) of one area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentState {
    pub s: bool,
    pub theta: f64,
    pub mu: f64,
}

/// Conjugate posterior of the random effect given `s = 1` and `y`.
///
/// Normal is on θ, Gamma on λ = e^θ, Beta on the success probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Posterior {
    Normal { mean: f64, var: f64 },
    Gamma { shape: f64, rate: f64 },
    Beta { a: f64, b: f64 },
}

fn check_dims(x: &[f64], params: &ModelParams) -> Result<()> {
    if x.len() != params.beta.len() {
        return Err(Error::DimensionMismatch {
            expected: params.beta.len(),
            got: x.len(),
        });
    }
    Ok(())
}

/// m = ψ'(xᵗβ).
pub fn synthetic_mean(x: &[f64], params: &ModelParams, kind: FamilyKind) -> Result<f64> {
    check_dims(x, params)?;
    Ok(kind.mean_from_natural(params.linear_predictor(x)))
}

/// Validated inputs shared by the density routines.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Area {
    pub y: f64,
    pub n: f64,
    /// count n·y for PG/BB (unused for FH)
    pub z: f64,
}

impl Area {
    pub(crate) fn from_record(rec: &AreaRecord, kind: FamilyKind) -> Result<Self> {
        rec.validate(kind)?;
        let z = if kind.is_count() { rec.count(kind)? } else { 0.0 };
        let n = if kind == FamilyKind::BinomialBeta {
            rec.n.round()
        } else {
            rec.n
        };
        Ok(Self { y: rec.y, n, z })
    }
}

#[inline]
fn guard_bb_mean(m: f64) -> f64 {
    m.clamp(BB_MEAN_EPS, 1.0 - BB_MEAN_EPS)
}

#[inline]
fn ln_normal(y: f64, mean: f64, var: f64) -> f64 {
    let d = y - mean;
    -0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
}

/// ln f1 given the synthetic mean `m` and ν.
#[inline]
pub(crate) fn ln_f1(kind: FamilyKind, area: &Area, m: f64, nu: f64) -> f64 {
    let Area { y, n, z } = *area;
    match kind {
        FamilyKind::FayHerriot => ln_normal(y, m, 1.0 / nu + 1.0 / n),
        FamilyKind::PoissonGamma => {
            let a = nu * m;
            ln_rising(a, z) - ln_gamma(z + 1.0) + z * (n / (n + nu)).ln() - a * (n / nu).ln_1p()
        }
        FamilyKind::BinomialBeta => {
            let m = guard_bb_mean(m);
            let a = nu * m;
            let b = nu * (1.0 - m);
            ln_choose(n, z) + ln_rising(a, z) + ln_rising(b, n - z) - ln_rising(a + b, n)
        }
    }
}

/// ln f2 given the synthetic mean `m`.
#[inline]
pub(crate) fn ln_f2(kind: FamilyKind, area: &Area, m: f64) -> f64 {
    let Area { y, n, z } = *area;
    match kind {
        FamilyKind::FayHerriot => ln_normal(y, m, 1.0 / n),
        FamilyKind::PoissonGamma => {
            let lam = n * m;
            let zl = if z > 0.0 { z * lam.ln() } else { 0.0 };
            zl - lam - ln_gamma(z + 1.0)
        }
        FamilyKind::BinomialBeta => {
            let m = guard_bb_mean(m);
            ln_choose(n, z) + z * m.ln() + (n - z) * (1.0 - m).ln()
        }
    }
}

pub(crate) fn posterior_at(kind: FamilyKind, area: &Area, m: f64, nu: f64) -> Posterior {
    let Area { y, n, z } = *area;
    match kind {
        FamilyKind::FayHerriot => {
            let a = 1.0 / nu;
            let d = 1.0 / n;
            Posterior::Normal {
                mean: (a * y + d * m) / (a + d),
                var: a * d / (a + d),
            }
        }
        FamilyKind::PoissonGamma => Posterior::Gamma {
            shape: z + nu * m,
            rate: n + nu,
        },
        FamilyKind::BinomialBeta => {
            let m = guard_bb_mean(m);
            Posterior::Beta {
                a: nu * m + z,
                b: n - z + nu * (1.0 - m),
            }
        }
    }
}

impl Posterior {
    /// (E[θ], E[ψ(θ)]) under this posterior.
    pub fn natural_moments(&self) -> (f64, f64) {
        match *self {
            Posterior::Normal { mean, var } => (mean, 0.5 * (mean * mean + var)),
            Posterior::Gamma { shape, rate } => (psi(shape) - rate.ln(), shape / rate),
            Posterior::Beta { a, b } => (psi(a) - psi(b), psi(a + b) - psi(b)),
        }
    }

    /// One draw of the natural parameter θ.
    pub fn sample_theta(&self, rng: &mut RngStream) -> f64 {
        match *self {
            Posterior::Normal { mean, var } => mean + var.sqrt() * std_normal(rng),
            Posterior::Gamma { shape, rate } => sample::log_gamma_variate(shape, rng) - rate.ln(),
            Posterior::Beta { a, b } => {
                sample::log_gamma_variate(a, rng) - sample::log_gamma_variate(b, rng)
            }
        }
    }

    /// One draw of the mean parameter μ = ψ'(θ).
    pub fn sample_mean(&self, rng: &mut RngStream) -> f64 {
        match *self {
            Posterior::Normal { mean, var } => mean + var.sqrt() * std_normal(rng),
            Posterior::Gamma { shape, rate } => sample::gamma(shape, rng) / rate,
            Posterior::Beta { a, b } => sample::beta(a, b, rng),
        }
    }
}

/// ln of the conjugate-mixture component density f1.
pub fn log_f1(rec: &AreaRecord, params: &ModelParams, kind: FamilyKind) -> Result<f64> {
    params.validate(kind)?;
    let area = Area::from_record(rec, kind)?;
    let m = synthetic_mean(&rec.x, params, kind)?;
    Ok(ln_f1(kind, &area, m, params.nu))
}

/// ln of the no-random-effect component density f2.
pub fn log_f2(rec: &AreaRecord, params: &ModelParams, kind: FamilyKind) -> Result<f64> {
    params.validate(kind)?;
    let area = Area::from_record(rec, kind)?;
    let m = synthetic_mean(&rec.x, params, kind)?;
    Ok(ln_f2(kind, &area, m))
}

/// Conjugate posterior of the random effect given `s = 1` and `y`.
pub fn posterior_params(rec: &AreaRecord, params: &ModelParams, kind: FamilyKind) -> Result<Posterior> {
    params.validate(kind)?;
    let area = Area::from_record(rec, kind)?;
    let m = synthetic_mean(&rec.x, params, kind)?;
    Ok(posterior_at(kind, &area, m, params.nu))
}

/// (E[θ | s=1, y], E[ψ(θ) | s=1, y]).
pub fn posterior_moments(rec: &AreaRecord, params: &ModelParams, kind: FamilyKind) -> Result<(f64, f64)> {
    Ok(posterior_params(rec, params, kind)?.natural_moments())
}

pub fn sample_posterior_theta(
    rec: &AreaRecord,
    params: &ModelParams,
    kind: FamilyKind,
    rng: &mut RngStream,
) -> Result<f64> {
    Ok(posterior_params(rec, params, kind)?.sample_theta(rng))
}

/// Draw μ from the conjugate prior with mean `m` and precision ν.
pub fn sample_prior_mean(m: f64, nu: f64, kind: FamilyKind, rng: &mut RngStream) -> f64 {
    match kind {
        FamilyKind::FayHerriot => m + (1.0 / nu).sqrt() * std_normal(rng),
        FamilyKind::PoissonGamma => sample::gamma(nu * m, rng) / nu,
        FamilyKind::BinomialBeta => {
            let m = guard_bb_mean(m);
            sample::beta(nu * m, nu * (1.0 - m), rng)
        }
    }
}

/// Draw the latent (s, θ, μ) of one area from the uncertain prior.
pub fn sample_latent(m: f64, params: &ModelParams, kind: FamilyKind, rng: &mut RngStream) -> LatentState {
    let s = sample::bernoulli(params.p, rng);
    let mu = if s {
        sample_prior_mean(m, params.nu, kind, rng)
    } else {
        m
    };
    LatentState {
        s,
        theta: kind.natural_from_mean(mu),
        mu,
    }
}

/// Draw y given the area mean μ and scale n.
pub fn sample_observation(mu: f64, n: f64, kind: FamilyKind, rng: &mut RngStream) -> Result<f64> {
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::InvalidParameter(format!("n = {n} must be positive")));
    }
    match kind {
        FamilyKind::FayHerriot => {
            if !mu.is_finite() {
                return Err(Error::InvalidParameter(format!("mean {mu} is not finite")));
            }
            Ok(mu + (1.0 / n).sqrt() * std_normal(rng))
        }
        FamilyKind::PoissonGamma => {
            if !(mu.is_finite() && mu >= 0.0) {
                return Err(Error::InvalidParameter(format!("Poisson mean {mu} is negative")));
            }
            Ok(sample::poisson(n * mu, rng) as f64 / n)
        }
        FamilyKind::BinomialBeta => {
            if !(0.0..=1.0).contains(&mu) {
                return Err(Error::InvalidParameter(format!("probability {mu} outside [0, 1]")));
            }
            if (n - n.round()).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!("binomial n = {n} is not an integer")));
            }
            let trials = n.round() as u64;
            Ok(sample::binomial(trials, mu, rng) as f64 / n.round())
        }
    }
}
