//! Random variates for the distributions the models need.
//!
//! Gamma uses Marsaglia–Tsang with the `U^{1/a}` boost for shape < 1, beta is
//! a ratio of gammas, Poisson is inversion below mean 10 and PTRS above,
//! and binomial is inversion with a beta-splitting reduction for large `n·p`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::rng::RngStream;
use super::special::ln_gamma;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Normal { mean: f64, sd: f64 },
    /// Shape–rate: density ∝ x^{shape-1} exp(-rate·x).
    Gamma { shape: f64, rate: f64 },
    Beta { a: f64, b: f64 },
    Poisson { mean: f64 },
    Binomial { n: u64, p: f64 },
    Bernoulli { p: f64 },
}

impl Dist {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Dist::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            Dist::Gamma { shape, rate } => {
                shape.is_finite() && rate.is_finite() && shape > 0.0 && rate > 0.0
            }
            Dist::Beta { a, b } => a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0,
            Dist::Poisson { mean } => mean.is_finite() && mean >= 0.0,
            Dist::Binomial { p, .. } | Dist::Bernoulli { p } => (0.0..=1.0).contains(&p),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("{self:?}")))
        }
    }

    /// Analytic mean and variance, used by the moment tests.
    pub fn moments(&self) -> (f64, f64) {
        match *self {
            Dist::Normal { mean, sd } => (mean, sd * sd),
            Dist::Gamma { shape, rate } => (shape / rate, shape / (rate * rate)),
            Dist::Beta { a, b } => {
                let s = a + b;
                (a / s, a * b / (s * s * (s + 1.0)))
            }
            Dist::Poisson { mean } => (mean, mean),
            Dist::Binomial { n, p } => (n as f64 * p, n as f64 * p * (1.0 - p)),
            Dist::Bernoulli { p } => (p, p * (1.0 - p)),
        }
    }
}

/// One draw from `dist`.
pub fn sample(dist: &Dist, rng: &mut RngStream) -> Result<f64> {
    dist.validate()?;
    Ok(match *dist {
        Dist::Normal { mean, sd } => mean + sd * std_normal(rng),
        Dist::Gamma { shape, rate } => gamma(shape, rng) / rate,
        Dist::Beta { a, b } => beta(a, b, rng),
        Dist::Poisson { mean } => poisson(mean, rng) as f64,
        Dist::Binomial { n, p } => binomial(n, p, rng) as f64,
        Dist::Bernoulli { p } => bernoulli(p, rng) as u8 as f64,
    })
}

#[inline]
pub fn std_normal(rng: &mut RngStream) -> f64 {
    rng.sample(StandardNormal)
}

#[inline]
pub fn bernoulli(p: f64, rng: &mut RngStream) -> bool {
    rng.uniform_open() < p
}

/// Ga(shape, 1) variate.
pub fn gamma(shape: f64, rng: &mut RngStream) -> f64 {
    if shape < 1.0 {
        let g = marsaglia_tsang(shape + 1.0, rng);
        g * rng.uniform_open().powf(1.0 / shape)
    } else {
        marsaglia_tsang(shape, rng)
    }
}

/// ln of a Ga(shape, 1) variate, finite even when the variate itself underflows.
pub fn log_gamma_variate(shape: f64, rng: &mut RngStream) -> f64 {
    if shape < 1.0 {
        let g = marsaglia_tsang(shape + 1.0, rng);
        g.ln() + rng.uniform_open().ln() / shape
    } else {
        marsaglia_tsang(shape, rng).ln()
    }
}

fn marsaglia_tsang(shape: f64, rng: &mut RngStream) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = std_normal(rng);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = rng.uniform_open();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

pub fn beta(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    let x = gamma(a, rng);
    let y = gamma(b, rng);
    let s = x + y;
    if s > 0.0 {
        x / s
    } else {
        // both underflowed; fall back to log space
        let lx = log_gamma_variate(a, rng);
        let ly = log_gamma_variate(b, rng);
        1.0 / (1.0 + (ly - lx).exp())
    }
}

pub fn poisson(mean: f64, rng: &mut RngStream) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    if mean < 10.0 {
        let mut prob = (-mean).exp();
        let mut cdf = prob;
        let u = rng.uniform_open();
        let mut k = 0u64;
        while u > cdf {
            k += 1;
            prob *= mean / k as f64;
            cdf += prob;
            if prob <= 0.0 {
                break;
            }
        }
        k
    } else {
        ptrs(mean, rng)
    }
}

// Hörmann's transformed rejection with squeeze.
fn ptrs(lam: f64, rng: &mut RngStream) -> u64 {
    let slam = lam.sqrt();
    let loglam = lam.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.024_83 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.uniform_open() - 0.5;
        let v = rng.uniform_open();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lam + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -lam + k * loglam - ln_gamma(k + 1.0);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

pub fn binomial(n: u64, p: f64, rng: &mut RngStream) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    if p > 0.5 {
        return n - binomial(n, 1.0 - p, rng);
    }
    let mut n = n;
    let mut p = p;
    let mut acc = 0u64;
    // Knuth's beta splitting: the a-th order statistic of n uniforms is Beta(a, n+1-a).
    while n as f64 * p > 30.0 {
        let a = 1 + n / 2;
        let b = n + 1 - a;
        let x = beta(a as f64, b as f64, rng);
        if x >= p {
            n = a - 1;
            p /= x;
        } else {
            acc += a;
            n = b - 1;
            p = (p - x) / (1.0 - x);
        }
    }
    acc + binomial_inversion(n, p, rng)
}

fn binomial_inversion(n: u64, p: f64, rng: &mut RngStream) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    let q = 1.0 - p;
    let s = p / q;
    let a = (n + 1) as f64 * s;
    let mut r = q.powf(n as f64);
    let mut u = rng.uniform_open();
    let mut x = 0u64;
    loop {
        if u <= r || x >= n {
            return x;
        }
        u -= r;
        x += 1;
        r *= a / x as f64 - s;
        if r <= 0.0 {
            return x.min(n);
        }
    }
}
