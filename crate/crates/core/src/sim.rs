//! Simulation studies: EUB versus EB prediction error, sensitivity to the
//! latent law, and finite-sample behaviour of the CMSE estimator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmse::{bootstrap_uncertainty, cmse_estimate, DerivativeConfig};
use crate::em::{fit_em, FitConfig, PMode};
use crate::error::{Error, Result};
use crate::family::{self, AreaRecord, FamilyKind, ModelParams};
use crate::numerics::stats::{quantile_inverse_cdf, quantile_linear, sorted};
use crate::numerics::{sample, RngStream};
use crate::shrinkage;

/// Quantile levels of the summary tables.
pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Largest fraction of replicates that may be dropped before a study fails.
pub const MAX_DROP_FRACTION: f64 = 0.05;

const DESIGN_TAG: u64 = 0;
const REPLICATE_TAG: u64 = 1;
const MARGINAL_TAG: u64 = 2;
const TRUTH_TAG: u64 = 3;
const ESTIMATE_TAG: u64 = 4;
const BOOT_TAG: u64 = 5;

/// Law of the random effect when s = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentLaw {
    #[default]
    Conjugate,
    /// log μ ~ N(log(m/√(1+1/(νm))), log(1+1/(νm))).
    LognormalMatched,
    /// μ = m ± √(m/ν) with probability 1/2 each.
    TwopointMatched,
}

/// Uniform law on the integers min..=max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NLaw {
    pub min: u32,
    pub max: u32,
}

impl NLaw {
    fn draw(&self, rng: &mut RngStream) -> f64 {
        let span = (self.max - self.min + 1) as f64;
        let k = ((rng.uniform_open() * span) as u32).min(self.max - self.min);
        (self.min + k) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub family: FamilyKind,
    pub m: usize,
    pub true_params: ModelParams,
    pub replicates: usize,
    pub n_law: NLaw,
    #[serde(default)]
    pub latent_law: LatentLaw,
    pub seed: u64,
    /// Draw new covariates and n_i for every replicate instead of once.
    #[serde(default)]
    pub redraw_design: bool,
    #[serde(default)]
    pub fit: FitConfig,
}

impl SimDesign {
    /// β = (0, 0.5), ν = 5, m = 50; n ~ U{5..30} (PG) or U{10..30} (BB, FH).
    pub fn comparison(family: FamilyKind, p: f64, replicates: usize, seed: u64) -> Self {
        let n_law = match family {
            FamilyKind::PoissonGamma => NLaw { min: 5, max: 30 },
            _ => NLaw { min: 10, max: 30 },
        };
        Self {
            family,
            m: 50,
            true_params: ModelParams::new(vec![0.0, 0.5], 5.0, p),
            replicates,
            n_law,
            latent_law: LatentLaw::Conjugate,
            seed,
            redraw_design: false,
            fit: FitConfig::default(),
        }
    }

    /// The Poisson–gamma comparison design at p = 0.5 with the given latent law.
    pub fn sensitivity(latent_law: LatentLaw, replicates: usize, seed: u64) -> Self {
        Self {
            latent_law,
            ..Self::comparison(FamilyKind::PoissonGamma, 0.5, replicates, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidParameter("replicates must be at least 1".into()));
        }
        if self.true_params.beta.is_empty() {
            return Err(Error::InvalidParameter("beta needs an intercept".into()));
        }
        if self.m < self.true_params.beta.len() + 2 {
            return Err(Error::InvalidParameter(format!(
                "m = {} too small for {} coefficients",
                self.m,
                self.true_params.beta.len()
            )));
        }
        if self.n_law.min == 0 || self.n_law.min > self.n_law.max {
            return Err(Error::InvalidParameter(format!(
                "n range {}..={} must be nonempty and positive",
                self.n_law.min, self.n_law.max
            )));
        }
        if self.latent_law != LatentLaw::Conjugate && self.family != FamilyKind::PoissonGamma {
            return Err(Error::InvalidParameter(
                "alternative latent laws are defined for the Poisson-gamma family only".into(),
            ));
        }
        self.true_params.validate(self.family)?;
        self.fit.validate()
    }

    /// Covariates x = (1, N(0,1)...) and n from `n_law` for each of the m areas.
    pub fn draw_design(&self, rng: &mut RngStream) -> Result<Vec<AreaRecord>> {
        let q = self.true_params.beta.len();
        (0..self.m)
            .map(|_| {
                let n = self.n_law.draw(rng);
                for _ in 0..1000 {
                    let x: Vec<f64> = std::iter::once(1.0)
                        .chain((1..q).map(|_| sample::std_normal(rng)))
                        .collect();
                    let m = family::synthetic_mean(&x, &self.true_params, self.family)?;
                    if self.latent_law != LatentLaw::TwopointMatched || m - (m / self.true_params.nu).sqrt() > 0.0 {
                        return Ok(AreaRecord::new(0.0, n, x));
                    }
                }
                Err(Error::InvalidParameter(
                    "could not draw covariates with m - sqrt(m/nu) > 0".into(),
                ))
            })
            .collect()
    }
}

/// Draw μ for s = 1 from `law` with mean m and variance m/ν (Poisson–gamma).
pub fn sample_matched_latent(law: LatentLaw, m: f64, params: &ModelParams, kind: FamilyKind, rng: &mut RngStream) -> f64 {
    let nu = params.nu;
    match law {
        LatentLaw::Conjugate => family::sample_prior_mean(m, nu, kind, rng),
        LatentLaw::LognormalMatched => {
            let s2 = (1.0 / (nu * m)).ln_1p();
            (m.ln() - 0.5 * s2 + s2.sqrt() * sample::std_normal(rng)).exp()
        }
        LatentLaw::TwopointMatched => {
            let d = (m / nu).sqrt();
            if sample::bernoulli(0.5, rng) {
                m + d
            } else {
                m - d
            }
        }
    }
}

/// Fill in latent means and observations for every area of `template`.
pub fn simulate(
    template: &[AreaRecord],
    params: &ModelParams,
    kind: FamilyKind,
    law: LatentLaw,
    rng: &mut RngStream,
) -> Result<(Vec<AreaRecord>, Vec<f64>)> {
    let mut data = Vec::with_capacity(template.len());
    let mut mu = Vec::with_capacity(template.len());
    for rec in template {
        let m = family::synthetic_mean(&rec.x, params, kind)?;
        let latent = if sample::bernoulli(params.p, rng) {
            sample_matched_latent(law, m, params, kind, rng)
        } else {
            m
        };
        let y = family::sample_observation(latent, rec.n, kind, rng)?;
        data.push(AreaRecord::new(y, rec.n, rec.x.clone()));
        mu.push(latent);
    }
    Ok((data, mu))
}

fn eub_means(data: &[AreaRecord], params: &ModelParams, kind: FamilyKind) -> Result<Vec<f64>> {
    data.iter()
        .map(|rec| Ok(shrinkage::eub_estimate(rec, params, kind)?.mu_tilde))
        .collect()
}

fn check_drops(dropped: usize, total: usize) -> Result<()> {
    if dropped == total || dropped as f64 > MAX_DROP_FRACTION * total as f64 {
        return Err(Error::TooManyDropped { dropped, total });
    }
    Ok(())
}

/// Five quantiles at [`QUANTILE_LEVELS`] by linear interpolation.
pub fn quantiles(values: &[f64]) -> Result<[f64; 5]> {
    let s = sorted(values);
    let mut out = [0.0; 5];
    for (o, &level) in out.iter_mut().zip(&QUANTILE_LEVELS) {
        *o = quantile_linear(&s, level)?;
    }
    Ok(out)
}

/// Per-area error moments accumulated in replicate order.
struct ErrorMoments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: usize,
}

impl ErrorMoments {
    fn new(m: usize) -> Self {
        Self {
            sum: vec![0.0; m],
            sum_sq: vec![0.0; m],
            count: 0,
        }
    }

    fn add(&mut self, err: &[f64]) {
        for ((s, s2), e) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(err) {
            *s += e;
            *s2 += e * e;
        }
        self.count += 1;
    }

    fn mse(&self) -> Vec<f64> {
        self.sum_sq.iter().map(|s| s / self.count as f64).collect()
    }

    fn abs_bias(&self) -> Vec<f64> {
        self.sum.iter().map(|s| (s / self.count as f64).abs()).collect()
    }
}

/// Quantiles of per-area EUB/EB ratios, with the per-area values behind them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonResult {
    pub mse_ratio: [f64; 5],
    pub bias_ratio: [f64; 5],
    pub mse_eub: Vec<f64>,
    pub mse_eb: Vec<f64>,
    pub bias_eub: Vec<f64>,
    pub bias_eb: Vec<f64>,
    pub completed: usize,
    pub dropped: usize,
}

fn replicate_template(design: &SimDesign, fixed: &Option<Vec<AreaRecord>>, rng: &mut RngStream) -> Result<Vec<AreaRecord>> {
    match fixed {
        Some(t) => Ok(t.clone()),
        None => design.draw_design(rng),
    }
}

fn fixed_design(design: &SimDesign, root: &RngStream) -> Result<Option<Vec<AreaRecord>>> {
    if design.redraw_design {
        Ok(None)
    } else {
        design.draw_design(&mut root.derive(DESIGN_TAG)).map(Some)
    }
}

fn with_p_mode(fit: &FitConfig, p_mode: PMode) -> FitConfig {
    FitConfig {
        p_mode,
        ..fit.clone()
    }
}

/// EUB (p free) and EB (p = 1) fitted to the same simulated data in each replicate.
pub fn run_comparison(design: &SimDesign) -> Result<ComparisonResult> {
    design.validate()?;
    let kind = design.family;
    let root = RngStream::new(design.seed, 0);
    let fixed = fixed_design(design, &root)?;
    let eub_cfg = with_p_mode(&design.fit, PMode::Free);
    let eb_cfg = design.fit.eb();
    let replicate = |r: usize| -> Result<Option<(Vec<f64>, Vec<f64>)>> {
        let mut rng = root.derive_path(&[REPLICATE_TAG, r as u64]);
        let template = replicate_template(design, &fixed, &mut rng)?;
        let (data, mu) = simulate(&template, &design.true_params, kind, design.latent_law, &mut rng)?;
        let (eub, eb) = match (fit_em(&data, kind, &eub_cfg, None), fit_em(&data, kind, &eb_cfg, None)) {
            (Ok(a), Ok(b)) if a.converged && b.converged => (a, b),
            _ => return Ok(None),
        };
        let err = |params: &ModelParams| -> Result<Vec<f64>> {
            Ok(eub_means(&data, params, kind)?.iter().zip(&mu).map(|(e, t)| e - t).collect())
        };
        Ok(Some((err(&eub.params)?, err(&eb.params)?)))
    };
    let outcomes: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..design.replicates)
        .into_par_iter()
        .map(replicate)
        .collect::<Result<_>>()?;
    let mut eub = ErrorMoments::new(design.m);
    let mut eb = ErrorMoments::new(design.m);
    for (a, b) in outcomes.iter().flatten() {
        eub.add(a);
        eb.add(b);
    }
    let dropped = design.replicates - eub.count;
    check_drops(dropped, design.replicates)?;
    let ratio = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x / y).collect() };
    let (mse_eub, mse_eb) = (eub.mse(), eb.mse());
    let (bias_eub, bias_eb) = (eub.abs_bias(), eb.abs_bias());
    Ok(ComparisonResult {
        mse_ratio: quantiles(&ratio(&mse_eub, &mse_eb))?,
        bias_ratio: quantiles(&ratio(&bias_eub, &bias_eb))?,
        mse_eub,
        mse_eb,
        bias_eub,
        bias_eb,
        completed: eub.count,
        dropped,
    })
}

/// Quantiles of per-area EUB MSE and absolute bias, both multiplied by 100.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityResult {
    pub mse_x100: [f64; 5],
    pub bias_x100: [f64; 5],
    pub mse: Vec<f64>,
    pub bias: Vec<f64>,
    pub completed: usize,
    pub dropped: usize,
}

/// EUB fitted under the assumed conjugate model to data whose latent law is `design.latent_law`.
pub fn run_sensitivity(design: &SimDesign) -> Result<SensitivityResult> {
    design.validate()?;
    let kind = design.family;
    let root = RngStream::new(design.seed, 0);
    let fixed = fixed_design(design, &root)?;
    let cfg = with_p_mode(&design.fit, PMode::Free);
    let outcomes: Vec<Option<Vec<f64>>> = (0..design.replicates)
        .into_par_iter()
        .map(|r| -> Result<Option<Vec<f64>>> {
            let mut rng = root.derive_path(&[REPLICATE_TAG, r as u64]);
            let template = replicate_template(design, &fixed, &mut rng)?;
            let (data, mu) = simulate(&template, &design.true_params, kind, design.latent_law, &mut rng)?;
            match fit_em(&data, kind, &cfg, None) {
                Ok(fit) if fit.converged => Ok(Some(
                    eub_means(&data, &fit.params, kind)?
                        .iter()
                        .zip(&mu)
                        .map(|(e, t)| e - t)
                        .collect(),
                )),
                _ => Ok(None),
            }
        })
        .collect::<Result<_>>()?;
    let mut acc = ErrorMoments::new(design.m);
    for e in outcomes.iter().flatten() {
        acc.add(e);
    }
    let dropped = design.replicates - acc.count;
    check_drops(dropped, design.replicates)?;
    let (mse, bias) = (acc.mse(), acc.abs_bias());
    let scaled = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| 100.0 * x).collect() };
    Ok(SensitivityResult {
        mse_x100: quantiles(&scaled(&mse))?,
        bias_x100: quantiles(&scaled(&bias))?,
        mse,
        bias,
        completed: acc.count,
        dropped,
    })
}

/// Intercept-only Poisson–gamma design for evaluating the CMSE estimator of area 1
/// at conditioning values y_α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmseEvalDesign {
    pub m: usize,
    pub true_params: ModelParams,
    #[serde(default = "default_eval_n")]
    pub n: f64,
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_draws")]
    pub marginal_draws: usize,
    /// outer replicates S
    pub s: usize,
    #[serde(default = "default_draws")]
    pub r_truth: usize,
    /// bootstrap replicates B
    pub b: usize,
    pub seed: u64,
    #[serde(default)]
    pub fit: FitConfig,
    /// Derivative step; m^(-5/4) when absent.
    #[serde(default)]
    pub z: Option<f64>,
}

fn default_eval_n() -> f64 {
    10.0
}

fn default_draws() -> usize {
    10_000
}

impl CmseEvalDesign {
    /// β = 1, ν = 5, p = 0.5, n_i = 10.
    pub fn standard(m: usize, alpha_grid: Vec<f64>, s: usize, b: usize, seed: u64) -> Self {
        Self {
            m,
            true_params: ModelParams::new(vec![1.0], 5.0, 0.5),
            n: 10.0,
            alpha_grid,
            marginal_draws: 10_000,
            s,
            r_truth: 10_000,
            b,
            seed,
            fit: FitConfig::default(),
            z: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.true_params.beta.len() != 1 {
            return Err(Error::InvalidParameter("the CMSE study uses an intercept-only model".into()));
        }
        if self.m < 3 || self.s == 0 || self.r_truth == 0 || self.marginal_draws == 0 {
            return Err(Error::InvalidParameter(
                "m >= 3 and positive S, R_truth and marginal draws are required".into(),
            ));
        }
        if self.b < 2 {
            return Err(Error::InvalidParameter(format!("bootstrap needs B >= 2, got {}", self.b)));
        }
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::InvalidParameter("alpha levels must lie in (0, 1)".into()));
        }
        if !(self.n.is_finite() && self.n > 0.0) {
            return Err(Error::InvalidParameter(format!("n = {} must be positive", self.n)));
        }
        if let Some(z) = self.z {
            DerivativeConfig::new(z)?;
        }
        self.true_params.validate(FamilyKind::PoissonGamma)?;
        self.fit.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CmseEvalRow {
    pub alpha: f64,
    pub y_alpha: f64,
    /// simulated CM_α
    pub cm: f64,
    /// percentage relative bias of the corrected estimator
    pub rb: f64,
    pub cv: f64,
    pub rbn: f64,
    pub cvn: f64,
    pub negative: usize,
    pub completed: usize,
    pub dropped: usize,
    pub truth_completed: usize,
    pub truth_dropped: usize,
}

/// Draw μ from its posterior given `rec` under `params`: the conjugate posterior
/// with probability r, otherwise the synthetic mean.
pub fn sample_conditional_mean(
    rec: &AreaRecord,
    params: &ModelParams,
    kind: FamilyKind,
    rng: &mut RngStream,
) -> Result<f64> {
    let r = shrinkage::responsibility(rec, params, kind)?;
    if sample::bernoulli(r, rng) {
        Ok(family::posterior_params(rec, params, kind)?.sample_mean(rng))
    } else {
        family::synthetic_mean(&rec.x, params, kind)
    }
}

/// y_α: inverse-CDF quantiles of the marginal law of y from `draws` simulated areas.
pub fn marginal_quantiles(
    params: &ModelParams,
    n: f64,
    levels: &[f64],
    draws: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let template = [AreaRecord::new(0.0, n, vec![1.0])];
    let mut ys = Vec::with_capacity(draws);
    for _ in 0..draws {
        let (d, _) = simulate(&template, params, FamilyKind::PoissonGamma, LatentLaw::Conjugate, rng)?;
        ys.push(d[0].y);
    }
    let ys = sorted(&ys);
    levels.iter().map(|&a| quantile_inverse_cdf(&ys, a)).collect()
}

/// RB, CV of the bias-corrected CMSE estimate and RBN, CVN of the naive one per α.
pub fn run_cmse_eval(design: &CmseEvalDesign) -> Result<Vec<CmseEvalRow>> {
    design.validate()?;
    let kind = FamilyKind::PoissonGamma;
    let truth = &design.true_params;
    let root = RngStream::new(design.seed, 0);
    let cfg = with_p_mode(&design.fit, PMode::Free);
    let dcfg = match design.z {
        Some(z) => DerivativeConfig::new(z)?,
        None => DerivativeConfig::for_areas(design.m),
    };
    let template: Vec<AreaRecord> = (0..design.m)
        .map(|_| AreaRecord::new(0.0, design.n, vec![1.0]))
        .collect();
    let y_alpha = marginal_quantiles(
        truth,
        design.n,
        &design.alpha_grid,
        design.marginal_draws,
        &mut root.derive(MARGINAL_TAG),
    )?;
    let conditioned = |rng: &mut RngStream, y: f64| -> Result<Vec<AreaRecord>> {
        let (mut data, _) = simulate(&template, truth, kind, LatentLaw::Conjugate, rng)?;
        data[0].y = y;
        Ok(data)
    };

    let mut rows = Vec::with_capacity(design.alpha_grid.len());
    for (a, (&alpha, &y)) in design.alpha_grid.iter().zip(&y_alpha).enumerate() {
        let sq_err: Vec<Option<f64>> = (0..design.r_truth)
            .into_par_iter()
            .map(|t| -> Result<Option<f64>> {
                let mut rng = root.derive_path(&[TRUTH_TAG, a as u64, t as u64]);
                let data = conditioned(&mut rng, y)?;
                let fit = match fit_em(&data, kind, &cfg, None) {
                    Ok(f) if f.converged => f,
                    _ => return Ok(None),
                };
                let est = shrinkage::eub_estimate(&data[0], &fit.params, kind)?.mu_tilde;
                let mu = sample_conditional_mean(&data[0], truth, kind, &mut rng)?;
                Ok(Some((est - mu).powi(2)))
            })
            .collect::<Result<_>>()?;
        let kept: Vec<f64> = sq_err.iter().flatten().copied().collect();
        let truth_dropped = design.r_truth - kept.len();
        check_drops(truth_dropped, design.r_truth)?;
        let cm = kept.iter().sum::<f64>() / kept.len() as f64;

        let estimates: Vec<Option<(f64, f64, bool)>> = (0..design.s)
            .into_par_iter()
            .map(|s| -> Result<Option<(f64, f64, bool)>> {
                let mut rng = root.derive_path(&[ESTIMATE_TAG, a as u64, s as u64]);
                let data = conditioned(&mut rng, y)?;
                let fit = match fit_em(&data, kind, &cfg, None) {
                    Ok(f) if f.converged => f,
                    _ => return Ok(None),
                };
                let unc = match bootstrap_uncertainty(&data, &fit.params, kind, design.b, &cfg, &rng.derive(BOOT_TAG)) {
                    Ok(u) => u,
                    Err(Error::BootstrapFailure { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let c = cmse_estimate(&data[0], &fit.params, &unc, kind, &dcfg)?;
                Ok(Some((c.cm_hat, c.cm_naive, c.negative)))
            })
            .collect::<Result<_>>()?;
        let kept: Vec<(f64, f64, bool)> = estimates.iter().flatten().copied().collect();
        let dropped = design.s - kept.len();
        check_drops(dropped, design.s)?;
        let k = kept.len() as f64;
        let (mut rb, mut cv, mut rbn, mut cvn) = (0.0, 0.0, 0.0, 0.0);
        for &(hat, naive, _) in &kept {
            let (e, en) = ((hat - cm) / cm, (naive - cm) / cm);
            rb += e;
            cv += e * e;
            rbn += en;
            cvn += en * en;
        }
        rows.push(CmseEvalRow {
            alpha,
            y_alpha: y,
            cm,
            rb: 100.0 * rb / k,
            cv: (cv / k).sqrt(),
            rbn: 100.0 * rbn / k,
            cvn: (cvn / k).sqrt(),
            negative: kept.iter().filter(|c| c.2).count(),
            completed: kept.len(),
            dropped,
            truth_completed: design.r_truth - truth_dropped,
            truth_dropped,
        });
    }
    Ok(rows)
}
