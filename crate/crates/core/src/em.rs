//! Maximum-likelihood fitting of φ = (β, ν, p) by EM.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{self, Area, AreaRecord, FamilyKind, ModelParams, BB_MEAN_EPS};
use crate::numerics::optim::{maximize_with_steps, OptimizerConfig};
use crate::numerics::special::{ln_beta, ln_gamma, log_sum_exp, logistic, logit};
use crate::numerics::RngStream;
use crate::shrinkage;

const P_CLIP: f64 = 1e-6;
const NU_MAX: f64 = 1e8;
const ALPHA_MAX_CAP: f64 = 1e4;
const POLISH_EVERY: usize = 20;
const TINY_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EStepMode {
    Analytic,
    MonteCarlo { samples: usize },
}

impl fmt::Display for EStepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EStepMode::Analytic => write!(f, "analytic"),
            EStepMode::MonteCarlo { samples } => write!(f, "mc={samples}"),
        }
    }
}

impl FromStr for EStepMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "analytic" {
            return Ok(EStepMode::Analytic);
        }
        let k = s
            .strip_prefix("mc=")
            .and_then(|k| k.parse::<usize>().ok())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown e-step mode '{s}'")))?;
        Ok(EStepMode::MonteCarlo { samples: k })
    }
}

/// Whether p is estimated or held at a given value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum PMode {
    Free,
    Fixed(f64),
}

impl fmt::Display for PMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PMode::Free => write!(f, "free"),
            PMode::Fixed(p) => write!(f, "fixed={p}"),
        }
    }
}

impl FromStr for PMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "free" {
            return Ok(PMode::Free);
        }
        let p = s
            .strip_prefix("fixed=")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown p mode '{s}'")))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("fixed p = {p} outside [0, 1]")));
        }
        Ok(PMode::Fixed(p))
    }
}

impl From<PMode> for String {
    fn from(m: PMode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for PMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// M-step variant.
///
/// `Exact` maximizes the expected complete-data log-likelihood, including the
/// s = 0 component and, for FH, the posterior variance. `PlugIn` uses
/// the plug-in updates: r-weighted least squares, A = mean squared residual,
/// and a count-family objective without the s = 0 term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FhUpdate {
    #[default]
    Exact,
    PlugIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub e_step_mode: EStepMode,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub p_mode: PMode,
    pub fh_update: FhUpdate,
    /// Squared extrapolation between EM maps (analytic E-step only), with a
    /// likelihood safeguard so ascent is preserved.
    pub accelerate: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 1000,
            e_step_mode: EStepMode::Analytic,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            p_mode: PMode::Free,
            fh_update: FhUpdate::Exact,
            accelerate: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol = {} must be positive", self.tol)));
        }
        if let EStepMode::MonteCarlo { samples } = self.e_step_mode {
            if samples < 100 {
                return Err(Error::InvalidParameter(format!(
                    "monte carlo e-step needs at least 100 samples, got {samples}"
                )));
            }
        }
        if let PMode::Fixed(p) = self.p_mode {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("fixed p = {p} outside [0, 1]")));
            }
        }
        self.optimizer.validate()
    }

    /// Classical EB comparator: p held at 1.
    pub fn eb(&self) -> Self {
        Self {
            p_mode: PMode::Fixed(1.0),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub kind: FamilyKind,
    pub params: ModelParams,
    pub p_mode: PMode,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub n_areas: usize,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace holds the initial value")
    }

    /// Number of estimated hyperparameters.
    pub fn n_params(&self) -> usize {
        match self.p_mode {
            PMode::Free => self.params.beta.len() + 2,
            PMode::Fixed(_) => self.params.beta.len() + 1,
        }
    }

    pub fn aic(&self) -> f64 {
        -2.0 * self.loglik() + 2.0 * self.n_params() as f64
    }

    pub fn bic(&self) -> f64 {
        -2.0 * self.loglik() + self.n_params() as f64 * (self.n_areas as f64).ln()
    }

    pub fn summary(&self) -> FitSummary {
        FitSummary {
            family: self.kind,
            beta: self.params.beta.clone(),
            nu: self.params.nu,
            p: self.params.p,
            p_mode: self.p_mode,
            loglik: self.loglik(),
            aic: self.aic(),
            bic: self.bic(),
            iterations: self.iterations,
            converged: self.converged,
        }
    }
}

/// JSON form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub family: FamilyKind,
    pub beta: Vec<f64>,
    pub nu: f64,
    pub p: f64,
    pub p_mode: PMode,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitSummary {
    pub fn params(&self) -> ModelParams {
        ModelParams::new(self.beta.clone(), self.nu, self.p)
    }
}

/// E-step output for one area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaExpectation {
    pub r: f64,
    /// E[θ | s = 1, y]
    pub e_theta: f64,
    /// E[ψ(θ) | s = 1, y]
    pub e_psi: f64,
}

/// Validated data with covariate rows grouped by exact equality.
pub(crate) struct Prepared {
    kind: FamilyKind,
    areas: Vec<Area>,
    group_of: Vec<usize>,
    group_x: Vec<Vec<f64>>,
    q: usize,
}

impl Prepared {
    pub(crate) fn new(data: &[AreaRecord], kind: FamilyKind) -> Result<Self> {
        let first = data
            .first()
            .ok_or_else(|| Error::InvalidParameter("no areas".into()))?;
        let q = first.x.len();
        let mut areas = Vec::with_capacity(data.len());
        let mut group_of = Vec::with_capacity(data.len());
        let mut group_x: Vec<Vec<f64>> = Vec::new();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        for (i, rec) in data.iter().enumerate() {
            if rec.x.len() != q {
                return Err(Error::DimensionMismatch {
                    expected: q,
                    got: rec.x.len(),
                });
            }
            let area = Area::from_record(rec, kind)
                .map_err(|e| Error::InvalidRecord(format!("area {i}: {e}")))?;
            areas.push(area);
            let key: Vec<u64> = rec.x.iter().map(|v| (v + 0.0).to_bits()).collect();
            let g = *index.entry(key).or_insert_with(|| {
                group_x.push(rec.x.clone());
                group_x.len() - 1
            });
            group_of.push(g);
        }
        Ok(Self {
            kind,
            areas,
            group_of,
            group_x,
            q,
        })
    }

    fn len(&self) -> usize {
        self.areas.len()
    }

    fn group_means(&self, beta: &[f64]) -> Vec<f64> {
        self.group_x
            .iter()
            .map(|x| {
                let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
                self.kind.mean_from_natural(eta)
            })
            .collect()
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.beta.len() != self.q {
            return Err(Error::DimensionMismatch {
                expected: self.q,
                got: params.beta.len(),
            });
        }
        params.validate(self.kind)
    }

    pub(crate) fn loglik(&self, params: &ModelParams) -> f64 {
        let means = self.group_means(&params.beta);
        let (lp, lq) = (params.p.ln(), (1.0 - params.p).ln());
        self.areas
            .iter()
            .zip(&self.group_of)
            .map(|(a, &g)| {
                let m = means[g];
                let l1 = if params.p > 0.0 {
                    family::ln_f1(self.kind, a, m, params.nu)
                } else {
                    f64::NEG_INFINITY
                };
                let l2 = if params.p < 1.0 {
                    family::ln_f2(self.kind, a, m)
                } else {
                    f64::NEG_INFINITY
                };
                log_sum_exp(lp + l1, lq + l2)
            })
            .sum()
    }

    fn e_step(&self, params: &ModelParams, mode: EStepMode, rng: &RngStream) -> Vec<AreaExpectation> {
        let kind = self.kind;
        let means = self.group_means(&params.beta);
        let one = |i: usize| {
            let a = &self.areas[i];
            let m = means[self.group_of[i]];
            let r = shrinkage::responsibility_at(kind, a, m, params);
            let post = family::posterior_at(kind, a, m, params.nu);
            let (e_theta, e_psi) = match mode {
                EStepMode::Analytic => post.natural_moments(),
                EStepMode::MonteCarlo { samples } => {
                    let mut stream = rng.derive(i as u64);
                    let (mut st, mut sp) = (0.0, 0.0);
                    for _ in 0..samples {
                        let t = post.sample_theta(&mut stream);
                        st += t;
                        sp += psi_natural(kind, t);
                    }
                    (st / samples as f64, sp / samples as f64)
                }
            };
            AreaExpectation { r, e_theta, e_psi }
        };
        match mode {
            EStepMode::Analytic if self.len() < 512 => (0..self.len()).map(one).collect(),
            _ => (0..self.len()).into_par_iter().map(one).collect(),
        }
    }

    fn m_step(
        &self,
        e: &[AreaExpectation],
        current: &ModelParams,
        config: &FitConfig,
        steps: Option<&[f64]>,
    ) -> Result<ModelParams> {
        if e.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: e.len(),
            });
        }
        let p = match config.p_mode {
            PMode::Free => e.iter().map(|q| q.r).sum::<f64>() / e.len() as f64,
            PMode::Fixed(p) => p,
        };
        let (beta, nu) = match self.kind {
            FamilyKind::FayHerriot => self.m_step_fh(e, current, config.fh_update)?,
            _ => self.m_step_count(e, current, config, steps)?,
        };
        Ok(ModelParams::new(beta, nu, p.clamp(0.0, 1.0)))
    }

    fn m_step_fh(
        &self,
        e: &[AreaExpectation],
        current: &ModelParams,
        update: FhUpdate,
    ) -> Result<(Vec<f64>, f64)> {
        let q = self.q;
        let xs: Vec<&[f64]> = self.group_of.iter().map(|&g| self.group_x[g].as_slice()).collect();
        let sum_r: f64 = e.iter().map(|q| q.r).sum();
        let solve = |w: &dyn Fn(usize) -> (f64, f64)| -> Result<Vec<f64>> {
            let mut xtx = DMatrix::<f64>::zeros(q, q);
            let mut xty = DVector::<f64>::zeros(q);
            for (i, x) in xs.iter().enumerate() {
                let (wi, ti) = w(i);
                if wi == 0.0 {
                    continue;
                }
                for j in 0..q {
                    xty[j] += wi * ti * x[j];
                    for k in 0..q {
                        xtx[(j, k)] += wi * x[j] * x[k];
                    }
                }
            }
            let chol = xtx.cholesky().ok_or(Error::SingularDesign)?;
            Ok(chol.solve(&xty).iter().copied().collect())
        };
        let resid2 = |beta: &[f64], i: usize| {
            let fit: f64 = xs[i].iter().zip(beta).map(|(a, b)| a * b).sum();
            (e[i].e_theta - fit).powi(2)
        };
        match update {
            FhUpdate::PlugIn => {
                if sum_r < TINY_WEIGHT {
                    return Ok((current.beta.clone(), current.nu));
                }
                let beta = solve(&|i| (e[i].r, e[i].e_theta))?;
                let a = (0..e.len()).map(|i| resid2(&beta, i)).sum::<f64>() / e.len() as f64;
                Ok((beta, 1.0 / a.max(1e-300)))
            }
            FhUpdate::Exact => {
                let mut a = current.a();
                let mut beta = current.beta.clone();
                for _ in 0..200 {
                    let a_now = a;
                    let new_beta = solve(&|i| {
                        let area = &self.areas[i];
                        let (r, w2) = (e[i].r, (1.0 - e[i].r) * area.n);
                        let w = r / a_now + w2;
                        if w == 0.0 {
                            (0.0, 0.0)
                        } else {
                            (w, (r * e[i].e_theta / a_now + w2 * area.y) / w)
                        }
                    })?;
                    let new_a = if sum_r < TINY_WEIGHT {
                        a
                    } else {
                        let s: f64 = (0..e.len())
                            .map(|i| {
                                let var = (2.0 * e[i].e_psi - e[i].e_theta.powi(2)).max(0.0);
                                e[i].r * (resid2(&new_beta, i) + var)
                            })
                            .sum();
                        (s / sum_r).max(1e-300)
                    };
                    let delta = new_beta
                        .iter()
                        .zip(&beta)
                        .map(|(x, y)| (x - y).abs())
                        .fold((new_a.ln() - a.ln()).abs(), f64::max);
                    beta = new_beta;
                    a = new_a;
                    if delta < 1e-13 {
                        break;
                    }
                }
                Ok((beta, 1.0 / a))
            }
        }
    }

    fn m_step_count(
        &self,
        e: &[AreaExpectation],
        current: &ModelParams,
        config: &FitConfig,
        steps: Option<&[f64]>,
    ) -> Result<(Vec<f64>, f64)> {
        let kind = self.kind;
        let include_f2 = config.fh_update == FhUpdate::Exact;
        let ng = self.group_x.len();
        // per-group sufficient statistics
        let mut s_theta = vec![0.0; ng];
        let mut s_psi = vec![0.0; ng];
        let mut s_r = vec![0.0; ng];
        let mut f_z = vec![0.0; ng];
        let mut f_w = vec![0.0; ng];
        for (i, q) in e.iter().enumerate() {
            let g = self.group_of[i];
            let a = &self.areas[i];
            s_theta[g] += q.r * q.e_theta;
            s_psi[g] += q.r * q.e_psi;
            s_r[g] += q.r;
            let w = 1.0 - q.r;
            f_z[g] += w * a.z;
            f_w[g] += match kind {
                FamilyKind::BinomialBeta => w * (a.n - a.z),
                _ => w * a.n,
            };
        }
        let sum_r: f64 = s_r.iter().sum();
        let fit_nu = sum_r >= TINY_WEIGHT;
        let f2_active = include_f2 && f_z.iter().chain(&f_w).any(|&v| v > 0.0);
        if !fit_nu && !f2_active {
            return Ok((current.beta.clone(), current.nu));
        }
        let q = self.q;
        let nu_floor = kind.nu_lower_bound();
        let nu_fixed = current.nu;
        let objective = |v: &[f64]| -> f64 {
            let beta = &v[..q];
            let nu = if fit_nu { v[q].exp() } else { nu_fixed };
            if !(nu > nu_floor && nu < NU_MAX) {
                return f64::NAN;
            }
            let ln_nu = nu.ln();
            let mut total = 0.0;
            for g in 0..ng {
                let eta: f64 = self.group_x[g].iter().zip(beta).map(|(a, b)| a * b).sum();
                let (m, ln_m, ln_1m) = match kind {
                    FamilyKind::PoissonGamma => (eta.exp(), eta, 0.0),
                    _ => {
                        let m = kind.mean_from_natural(eta).clamp(BB_MEAN_EPS, 1.0 - BB_MEAN_EPS);
                        (m, m.ln(), (1.0 - m).ln())
                    }
                };
                if s_r[g] > 0.0 {
                    let c = match kind {
                        FamilyKind::PoissonGamma => nu * m * ln_nu - ln_gamma(nu * m),
                        _ => -ln_beta(nu * m, nu * (1.0 - m)),
                    };
                    total += nu * (m * s_theta[g] - s_psi[g]) + s_r[g] * c;
                }
                if include_f2 {
                    total += match kind {
                        FamilyKind::PoissonGamma => f_z[g] * ln_m - m * f_w[g],
                        _ => f_z[g] * ln_m + f_w[g] * ln_1m,
                    };
                }
            }
            total
        };
        let mut start = current.beta.clone();
        if fit_nu {
            start.push(current.nu.ln());
        }
        let default_steps = vec![0.1; start.len()];
        let steps = match steps {
            Some(s) if s.len() == start.len() => s,
            _ => default_steps.as_slice(),
        };
        let best = match maximize_with_steps(&objective, &start, steps, &config.optimizer) {
            Ok(m) => m.argmax,
            Err(Error::NonConvergence { best_point, .. }) => best_point,
            Err(e) => return Err(e),
        };
        let nu = if fit_nu { best[q].exp() } else { nu_fixed };
        Ok((best[..q].to_vec(), nu))
    }

    fn initial_params(&self, p_mode: PMode) -> Result<ModelParams> {
        let first = self.areas[0].y;
        if self.areas.iter().all(|a| a.y == first) {
            return Err(Error::DegenerateData(format!("all observations equal {first}")));
        }
        let beta = self.glm_fit()?;
        let kind = self.kind;
        let means = self.group_means(&beta);
        let (_, _, v2) = kind.variance_coeffs();
        let mut kappa = 0.0;
        let mut inv_n = 0.0;
        for (a, &g) in self.areas.iter().zip(&self.group_of) {
            let m = match kind {
                FamilyKind::BinomialBeta => means[g].clamp(BB_MEAN_EPS, 1.0 - BB_MEAN_EPS),
                _ => means[g],
            };
            let qm = kind.variance_fn(m).max(1e-300);
            kappa += ((a.y - m).powi(2) - qm / a.n) / (qm * (1.0 + v2 / a.n));
            inv_n += 1.0 / a.n;
        }
        let len = self.len() as f64;
        let kappa = (kappa / len).max(1e-3 * inv_n / len);
        let mut nu = v2 + 1.0 / kappa;
        if kind.is_count() {
            nu = nu.max(v2.max(0.0) + 0.5);
        }
        let p = match p_mode {
            PMode::Free => 0.5,
            PMode::Fixed(p) => p,
        };
        Ok(ModelParams::new(beta, nu, p))
    }

    /// Canonical-link GLM fit by ridge-stabilized IRLS.
    fn glm_fit(&self) -> Result<Vec<f64>> {
        let q = self.q;
        let kind = self.kind;
        let xs: Vec<&[f64]> = self.group_of.iter().map(|&g| self.group_x[g].as_slice()).collect();
        let start_mean = |a: &Area| match kind {
            FamilyKind::FayHerriot => a.y,
            FamilyKind::PoissonGamma => (a.z + 0.5) / a.n,
            FamilyKind::BinomialBeta => (a.z + 0.5) / (a.n + 1.0),
        };
        let mut eta: Vec<f64> = self
            .areas
            .iter()
            .map(|a| kind.natural_from_mean(start_mean(a)))
            .collect();
        let mut beta = vec![0.0; q];
        for iter in 0..100 {
            let mut xtx = DMatrix::<f64>::zeros(q, q);
            let mut xtz = DVector::<f64>::zeros(q);
            for (i, a) in self.areas.iter().enumerate() {
                let mu = kind.mean_from_natural(eta[i]);
                let (w, z) = match kind {
                    FamilyKind::FayHerriot => (1.0, a.y),
                    _ => {
                        let v = kind.variance_fn(mu).max(1e-10);
                        (a.n * v, eta[i] + (a.y - mu) / v)
                    }
                };
                let x = xs[i];
                for j in 0..q {
                    xtz[j] += w * z * x[j];
                    for k in 0..q {
                        xtx[(j, k)] += w * x[j] * x[k];
                    }
                }
            }
            let ridge = 1e-8 * (xtx.trace() / q as f64).max(1e-12);
            for j in 0..q {
                xtx[(j, j)] += ridge;
            }
            let chol = xtx.cholesky().ok_or(Error::SingularDesign)?;
            let new_beta: Vec<f64> = chol.solve(&xtz).iter().copied().collect();
            if new_beta.iter().any(|b| !b.is_finite()) {
                return Err(Error::SingularDesign);
            }
            let delta = new_beta
                .iter()
                .zip(&beta)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            beta = new_beta;
            for (i, x) in xs.iter().enumerate() {
                eta[i] = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            }
            if kind == FamilyKind::FayHerriot || (iter > 0 && delta < 1e-10) {
                break;
            }
        }
        Ok(beta)
    }
}

#[inline]
fn psi_natural(kind: FamilyKind, t: f64) -> f64 {
    match kind {
        FamilyKind::FayHerriot => 0.5 * t * t,
        FamilyKind::PoissonGamma => t.exp(),
        FamilyKind::BinomialBeta => {
            if t > 0.0 {
                t + (-t).exp().ln_1p()
            } else {
                t.exp().ln_1p()
            }
        }
    }
}

/// Working-scale coordinates (β, log ν, logit p) used for the stopping rule.
fn working(params: &ModelParams) -> Vec<f64> {
    let mut v = params.beta.clone();
    v.push(params.nu.ln());
    v.push(logit(params.p.clamp(P_CLIP, 1.0 - P_CLIP)));
    v
}

/// L(φ) = Σ log(p f1 + (1 − p) f2).
pub fn marginal_loglik(data: &[AreaRecord], params: &ModelParams, kind: FamilyKind) -> Result<f64> {
    let prep = Prepared::new(data, kind)?;
    prep.check_params(params)?;
    Ok(prep.loglik(params))
}

/// Responsibilities and conditional natural-parameter moments.
pub fn e_step(
    data: &[AreaRecord],
    params: &ModelParams,
    kind: FamilyKind,
    mode: EStepMode,
    rng: &RngStream,
) -> Result<Vec<AreaExpectation>> {
    let prep = Prepared::new(data, kind)?;
    prep.check_params(params)?;
    Ok(prep.e_step(params, mode, rng))
}

pub fn m_step(
    data: &[AreaRecord],
    e_quantities: &[AreaExpectation],
    current: &ModelParams,
    kind: FamilyKind,
    config: &FitConfig,
) -> Result<ModelParams> {
    let prep = Prepared::new(data, kind)?;
    prep.check_params(current)?;
    prep.m_step(e_quantities, current, config, None)
}

/// Default starting point: GLM β, moment-based ν, p = 0.5 (or the fixed value).
pub fn initial_params(data: &[AreaRecord], kind: FamilyKind, p_mode: PMode) -> Result<ModelParams> {
    Prepared::new(data, kind)?.initial_params(p_mode)
}

/// One E-step followed by one M-step.
pub fn em_step(
    data: &[AreaRecord],
    params: &ModelParams,
    kind: FamilyKind,
    config: &FitConfig,
) -> Result<ModelParams> {
    let prep = Prepared::new(data, kind)?;
    prep.check_params(params)?;
    let rng = RngStream::new(config.seed, 0);
    let e = prep.e_step(params, config.e_step_mode, &rng);
    prep.m_step(&e, params, config, None)
}

/// Run EM from `initial` (or the default start) until the working-scale
/// parameter change drops below `tol`.
pub fn fit_em(
    data: &[AreaRecord],
    kind: FamilyKind,
    config: &FitConfig,
    initial: Option<&ModelParams>,
) -> Result<FitResult> {
    config.validate()?;
    let prep = Prepared::new(data, kind)?;
    fit_prepared(&prep, config, initial)
}

fn from_working(w: &[f64], q: usize, p_mode: PMode) -> ModelParams {
    let p = match p_mode {
        PMode::Free => logistic(w[q + 1]),
        PMode::Fixed(p) => p,
    };
    ModelParams::new(w[..q].to_vec(), w[q].exp(), p)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Repeated EM maps with warm-started simplex steps for the count families.
struct EmMap<'a> {
    prep: &'a Prepared,
    config: &'a FitConfig,
    rng: RngStream,
    steps: Option<Vec<f64>>,
}

impl EmMap<'_> {
    fn apply(&mut self, from: &ModelParams) -> Result<(ModelParams, f64)> {
        let prep = self.prep;
        let e = prep.e_step(from, self.config.e_step_mode, &self.rng);
        let next = prep.m_step(&e, from, self.config, self.steps.as_deref())?;
        prep.check_params(&next)?;
        let (w_old, w_new) = (working(from), working(&next));
        if prep.kind.is_count() {
            let q = prep.q;
            let mut s: Vec<f64> = (0..=q)
                .map(|j| (4.0 * (w_new[j] - w_old[j]).abs()).clamp(1e-4, 0.1))
                .collect();
            if e.iter().map(|q| q.r).sum::<f64>() < TINY_WEIGHT {
                s.pop();
            }
            self.steps = Some(s);
        }
        Ok((next, max_abs_diff(&w_old, &w_new)))
    }
}

/// Direct simplex ascent of L in working coordinates, kept only when it gains.
fn polish(prep: &Prepared, config: &FitConfig, params: &ModelParams) -> Option<ModelParams> {
    let q = prep.q;
    let free = config.p_mode == PMode::Free;
    let base = prep.loglik(params);
    let mut start = working(params);
    if !free {
        start.pop();
    }
    let objective = |w: &[f64]| {
        let nu = w[q].exp();
        if !(nu > prep.kind.nu_lower_bound() && nu < NU_MAX) {
            return f64::NAN;
        }
        let p = if free { logistic(w[q + 1]) } else { params.p };
        prep.loglik(&ModelParams::new(w[..q].to_vec(), nu, p))
    };
    let cfg = OptimizerConfig {
        max_evals: 4000,
        ..config.optimizer
    };
    let best = match maximize_with_steps(&objective, &start, &vec![0.1; start.len()], &cfg) {
        Ok(m) => m.argmax,
        Err(Error::NonConvergence { best_point, .. }) => best_point,
        Err(_) => return None,
    };
    let cand = from_working(&best, q, config.p_mode);
    (prep.check_params(&cand).is_ok() && prep.loglik(&cand) > base).then_some(cand)
}

pub(crate) fn fit_prepared(
    prep: &Prepared,
    config: &FitConfig,
    initial: Option<&ModelParams>,
) -> Result<FitResult> {
    let mut params = match initial {
        Some(p) => {
            let mut p = p.clone();
            if let PMode::Fixed(v) = config.p_mode {
                p.p = v;
            }
            p
        }
        None => prep.initial_params(config.p_mode)?,
    };
    prep.check_params(&params)?;
    let accelerate = config.accelerate && config.e_step_mode == EStepMode::Analytic;
    let mut map = EmMap {
        prep,
        config,
        rng: RngStream::new(config.seed, 0),
        steps: None,
    };
    let mut trace = vec![prep.loglik(&params)];
    let mut converged = false;
    let mut iterations = 0;
    let mut alpha_max = 4.0;
    let mut last_polish = 0;
    while iterations < config.max_iter {
        if accelerate && iterations - last_polish >= POLISH_EVERY {
            last_polish = iterations;
            if let Some(better) = polish(prep, config, &params) {
                params = better;
                trace.push(prep.loglik(&params));
                iterations += 1;
                continue;
            }
        }
        let w0 = working(&params);
        let (p1, c1) = map.apply(&params)?;
        params = p1;
        trace.push(prep.loglik(&params));
        iterations += 1;
        if c1 < config.tol {
            converged = true;
            break;
        }
        if !accelerate || iterations >= config.max_iter {
            continue;
        }
        let w1 = working(&params);
        let (p2, c2) = map.apply(&params)?;
        params = p2;
        let l2 = prep.loglik(&params);
        trace.push(l2);
        iterations += 1;
        if c2 < config.tol {
            converged = true;
            break;
        }
        if iterations >= config.max_iter {
            break;
        }
        // squared extrapolation through the two maps, kept only if it does not lose likelihood
        let w2 = working(&params);
        let r: Vec<f64> = w1.iter().zip(&w0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = (0..w0.len()).map(|j| w2[j] - 2.0 * w1[j] + w0[j]).collect();
        let (rr, vv) = (
            r.iter().map(|x| x * x).sum::<f64>(),
            v.iter().map(|x| x * x).sum::<f64>(),
        );
        let mut alpha = if vv > 1e-30 * rr {
            (-(rr / vv).sqrt()).max(-alpha_max)
        } else {
            -alpha_max
        };
        while alpha < -1.0 {
            let w: Vec<f64> = (0..w0.len())
                .map(|j| w0[j] - 2.0 * alpha * r[j] + alpha * alpha * v[j])
                .collect();
            let cand = from_working(&w, prep.q, config.p_mode);
            if prep.check_params(&cand).is_ok() && cand.nu < NU_MAX {
                let lc = prep.loglik(&cand);
                if lc.is_finite() && lc >= l2 {
                    if let Ok((p3, _)) = map.apply(&cand) {
                        let l3 = prep.loglik(&p3);
                        if l3 >= l2 {
                            if alpha <= -alpha_max {
                                alpha_max = (4.0 * alpha_max).min(ALPHA_MAX_CAP);
                            }
                            params = p3;
                            trace.push(l3);
                            iterations += 1;
                            break;
                        }
                    }
                }
            }
            alpha = 0.5 * (alpha - 1.0);
            if alpha > -1.01 {
                break;
            }
        }
    }
    Ok(FitResult {
        kind: prep.kind,
        params,
        p_mode: config.p_mode,
        loglik_trace: trace,
        iterations,
        converged,
        n_areas: prep.len(),
    })
}
