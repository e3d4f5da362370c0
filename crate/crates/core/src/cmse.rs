//! Conditional MSE of the EUB estimator: analytic R1, parametric-bootstrap
//! Ω̂ and B̂, finite-difference derivatives, bias correction and R2.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::em::{fit_em, FitConfig, PMode};
use crate::error::{Error, Result};
use crate::family::{self, Area, AreaRecord, FamilyKind, ModelParams};
use crate::numerics::special::log_sum_exp;
use crate::numerics::RngStream;
use crate::shrinkage::{self, AreaPosterior};

/// Finite-difference step settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeConfig {
    pub z: f64,
    /// How many times a step may be halved to keep probes in the parameter space.
    pub max_halvings: usize,
}

impl DerivativeConfig {
    pub fn new(z: f64) -> Result<Self> {
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::InvalidParameter(format!("derivative step {z} must be positive")));
        }
        Ok(Self { z, max_halvings: 30 })
    }

    /// z = m^(-5/4).
    pub fn for_areas(m: usize) -> Self {
        Self {
            z: (m.max(1) as f64).powf(-1.25),
            max_halvings: 30,
        }
    }
}

/// Bootstrap moments of φ̂ − φ in the coordinates (β, τ[, p]), where
/// τ = 1/(1 + ν) for the count families and τ = A = 1/ν for Fay–Herriot.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyEstimates {
    pub omega: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub boot_count: usize,
    pub dropped: usize,
}

impl UncertaintyEstimates {
    /// No parameter uncertainty; k = q + 2 when p is estimated, q + 1 otherwise.
    pub fn zero(k: usize) -> Self {
        Self {
            omega: DMatrix::zeros(k, k),
            bias: DVector::zeros(k),
            boot_count: 0,
            dropped: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmseComponents {
    pub mu_hat: f64,
    pub r: f64,
    pub r1: f64,
    pub r2: f64,
    pub b: f64,
    pub r1_bc: f64,
    pub cm_hat: f64,
    pub cm_naive: f64,
    /// gradient of log(p f1 + (1 − p) f2) in (β, τ[, p])
    pub score: Vec<f64>,
    pub negative: bool,
}

/// Maps the differentiated coordinates to model parameters.
#[derive(Debug, Clone, Copy)]
struct Layout {
    kind: FamilyKind,
    q: usize,
    with_p: bool,
    p_fixed: f64,
}

impl Layout {
    fn new(kind: FamilyKind, params: &ModelParams, k: usize) -> Result<Self> {
        let q = params.beta.len();
        let with_p = if k == q + 2 {
            true
        } else if k == q + 1 {
            false
        } else {
            return Err(Error::DimensionMismatch {
                expected: q + 2,
                got: k,
            });
        };
        Ok(Self {
            kind,
            q,
            with_p,
            p_fixed: params.p,
        })
    }

    fn dim(&self) -> usize {
        self.q + 1 + usize::from(self.with_p)
    }

    fn tau(&self, nu: f64) -> f64 {
        if self.kind.is_count() {
            1.0 / (1.0 + nu)
        } else {
            1.0 / nu
        }
    }

    fn nu(&self, tau: f64) -> f64 {
        if self.kind.is_count() {
            1.0 / tau - 1.0
        } else {
            1.0 / tau
        }
    }

    fn to_vec(&self, params: &ModelParams) -> Vec<f64> {
        let mut v = params.beta.clone();
        v.push(self.tau(params.nu));
        if self.with_p {
            v.push(params.p);
        }
        v
    }

    fn to_params(&self, v: &[f64]) -> ModelParams {
        let p = if self.with_p { v[self.q + 1] } else { self.p_fixed };
        ModelParams::new(v[..self.q].to_vec(), self.nu(v[self.q]), p)
    }

    fn valid(&self, v: &[f64]) -> bool {
        let tau = v[self.q];
        let upper = if self.kind.is_count() { 1.0 } else { f64::INFINITY };
        let nu = self.nu(tau);
        let nu_ok = tau > 0.0 && tau < upper && nu.is_finite() && nu > self.kind.nu_lower_bound();
        let p_ok = !self.with_p || (0.0..=1.0).contains(&v[self.q + 1]);
        nu_ok && p_ok && v[..self.q].iter().all(|b| b.is_finite())
    }
}

#[inline]
fn r1_from(kind: FamilyKind, area: &Area, post: &AreaPosterior, nu: f64) -> f64 {
    let (_, _, v2) = kind.variance_coeffs();
    let w = area.n / (area.n + nu);
    let d = area.y - post.m;
    w * w * d * d * post.r * (1.0 - post.r) + post.r * kind.variance_fn(post.eta) / (area.n + nu - v2)
}

/// (μ̃, R1, L) for one area at `params`, without validation.
fn area_values(kind: FamilyKind, area: &Area, x: &[f64], params: &ModelParams) -> [f64; 3] {
    let m = kind.mean_from_natural(params.linear_predictor(x));
    let post = shrinkage::ub_at(kind, area, m, params);
    let r1 = r1_from(kind, area, &post, params.nu);
    let p = params.p;
    let l1 = if p > 0.0 {
        p.ln() + family::ln_f1(kind, area, m, params.nu)
    } else {
        f64::NEG_INFINITY
    };
    let l2 = if p < 1.0 {
        (1.0 - p).ln() + family::ln_f2(kind, area, m)
    } else {
        f64::NEG_INFINITY
    };
    [post.mu_tilde, r1, log_sum_exp(l1, l2)]
}

fn check_r1_domain(kind: FamilyKind, rec: &AreaRecord, params: &ModelParams) -> Result<()> {
    let (_, _, v2) = kind.variance_coeffs();
    if !(rec.n + params.nu - v2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "n + nu - v2 = {} must be positive",
            rec.n + params.nu - v2
        )));
    }
    Ok(())
}

/// Posterior variance of μ given y: R1 = n²/(ν+n)²·(y−m)²·r(1−r) + r·Q(η)/(n+ν−v2).
pub fn r1(rec: &AreaRecord, params: &ModelParams, kind: FamilyKind) -> Result<f64> {
    params.validate(kind)?;
    check_r1_domain(kind, rec, params)?;
    let area = Area::from_record(rec, kind)?;
    let post = shrinkage::ub_estimate(rec, params, kind)?;
    Ok(r1_from(kind, &area, &post, params.nu))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Central,
    Forward,
    Backward,
}

/// Per-coordinate steps and stencil directions around `center`.
struct Plan {
    center: Vec<f64>,
    steps: Vec<f64>,
    sides: Vec<Side>,
}

fn shifted(center: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut v = center.to_vec();
    for &(j, d) in moves {
        v[j] += d;
    }
    v
}

fn plan(at: &[f64], cfg: &DerivativeConfig, valid: &dyn Fn(&[f64]) -> bool) -> Result<Plan> {
    if !(cfg.z.is_finite() && cfg.z > 0.0) {
        return Err(Error::InvalidParameter(format!("derivative step {} must be positive", cfg.z)));
    }
    let k = at.len();
    let mut steps = vec![0.0; k];
    let mut sides = vec![Side::Central; k];
    'coords: for j in 0..k {
        let mut z = cfg.z;
        for _ in 0..=cfg.max_halvings {
            let ok = |d: f64| valid(&shifted(at, &[(j, d)]));
            // near the boundary of the parameter space a one-sided stencil keeps the full step
            let side = if ok(z) && ok(-z) {
                Some(Side::Central)
            } else if ok(-z) && ok(-2.0 * z) {
                Some(Side::Backward)
            } else if ok(z) && ok(2.0 * z) {
                Some(Side::Forward)
            } else {
                None
            };
            if let Some(side) = side {
                steps[j] = z;
                sides[j] = side;
                continue 'coords;
            }
            z *= 0.5;
        }
        return Err(Error::ProbeOutOfRegion(j));
    }
    Ok(Plan {
        center: at.to_vec(),
        steps,
        sides,
    })
}

struct Derivatives {
    value: Vec<f64>,
    grad: Vec<Vec<f64>>,
    hess: Vec<DMatrix<f64>>,
}

/// Gradients (and optionally Hessians) of every output of `f` on a shared set of probes.
fn differentiate(f: &dyn Fn(&[f64]) -> Vec<f64>, plan: &Plan, want_hess: bool) -> Result<Derivatives> {
    let k = plan.center.len();
    let eval = |v: &[f64], j: usize| -> Result<Vec<f64>> {
        let out = f(v);
        if out.iter().all(|x| x.is_finite()) {
            Ok(out)
        } else {
            Err(Error::ProbeOutOfRegion(j))
        }
    };
    let f0 = eval(&plan.center, 0)?;
    let n_out = f0.len();
    let mut grad = vec![vec![0.0; k]; n_out];
    let mut hess = if want_hess {
        vec![DMatrix::zeros(k, k); n_out]
    } else {
        Vec::new()
    };
    // value at the single-coordinate probe used by one-sided cross partials
    let mut lead: Vec<Vec<f64>> = Vec::with_capacity(k);
    let c = &plan.center;
    for j in 0..k {
        let z = plan.steps[j];
        match plan.sides[j] {
            Side::Central => {
                let fp = eval(&shifted(c, &[(j, z)]), j)?;
                let fm = eval(&shifted(c, &[(j, -z)]), j)?;
                for o in 0..n_out {
                    grad[o][j] = (fp[o] - fm[o]) / (2.0 * z);
                    if want_hess {
                        hess[o][(j, j)] = (fp[o] + fm[o] - 2.0 * f0[o]) / (z * z);
                    }
                }
                lead.push(fp);
            }
            side => {
                let s = if side == Side::Forward { 1.0 } else { -1.0 };
                let f1 = eval(&shifted(c, &[(j, s * z)]), j)?;
                let f2 = eval(&shifted(c, &[(j, 2.0 * s * z)]), j)?;
                for o in 0..n_out {
                    grad[o][j] = s * (4.0 * f1[o] - 3.0 * f0[o] - f2[o]) / (2.0 * z);
                    if want_hess {
                        hess[o][(j, j)] = (f0[o] - 2.0 * f1[o] + f2[o]) / (z * z);
                    }
                }
                lead.push(f1);
            }
        }
    }
    if want_hess {
        for j in 0..k {
            for l in (j + 1)..k {
                let (zj, zl) = (plan.steps[j], plan.steps[l]);
                let both_central = plan.sides[j] == Side::Central && plan.sides[l] == Side::Central;
                if both_central {
                    let fpp = eval(&shifted(c, &[(j, zj), (l, zl)]), j)?;
                    let fmm = eval(&shifted(c, &[(j, -zj), (l, -zl)]), j)?;
                    for o in 0..n_out {
                        let v = ((fpp[o] + fmm[o] - 2.0 * f0[o])
                            - zj * zj * hess[o][(j, j)]
                            - zl * zl * hess[o][(l, l)])
                            / (2.0 * zj * zl);
                        hess[o][(j, l)] = v;
                        hess[o][(l, j)] = v;
                    }
                } else {
                    let sign = |side: Side| if side == Side::Backward { -1.0 } else { 1.0 };
                    let (sj, sl) = (sign(plan.sides[j]), sign(plan.sides[l]));
                    let fjl = eval(&shifted(c, &[(j, sj * zj), (l, sl * zl)]), j)?;
                    for o in 0..n_out {
                        let v = (fjl[o] - lead[j][o] - lead[l][o] + f0[o]) / (sj * sl * zj * zl);
                        hess[o][(j, l)] = v;
                        hess[o][(l, j)] = v;
                    }
                }
            }
        }
    }
    Ok(Derivatives {
        value: f0,
        grad,
        hess,
    })
}

/// Central-difference gradient of `f` at `at`; coordinates whose probes fail
/// `valid` get a halved step, or a one-sided stencil on the boundary.
pub fn numeric_grad(
    f: impl Fn(&[f64]) -> f64,
    at: &[f64],
    cfg: &DerivativeConfig,
    valid: impl Fn(&[f64]) -> bool,
) -> Result<Vec<f64>> {
    let plan = plan(at, cfg, &valid)?;
    let d = differentiate(&|v| vec![f(v)], &plan, false)?;
    Ok(d.grad.into_iter().next().expect("one output"))
}

/// Second-difference Hessian: (f(+) + f(−) − 2f)/z² on the diagonal and the
/// e_j + e_l stencil with diagonal correction off it.
pub fn numeric_hess(
    f: impl Fn(&[f64]) -> f64,
    at: &[f64],
    cfg: &DerivativeConfig,
    valid: impl Fn(&[f64]) -> bool,
) -> Result<DMatrix<f64>> {
    let plan = plan(at, cfg, &valid)?;
    let d = differentiate(&|v| vec![f(v)], &plan, true)?;
    Ok(d.hess.into_iter().next().expect("one output"))
}

struct AreaDerivatives {
    post: AreaPosterior,
    d: Derivatives,
}

fn area_derivatives(
    rec: &AreaRecord,
    params: &ModelParams,
    k: usize,
    kind: FamilyKind,
    cfg: &DerivativeConfig,
    want_hess: bool,
) -> Result<AreaDerivatives> {
    params.validate(kind)?;
    check_r1_domain(kind, rec, params)?;
    if rec.x.len() != params.beta.len() {
        return Err(Error::DimensionMismatch {
            expected: params.beta.len(),
            got: rec.x.len(),
        });
    }
    let layout = Layout::new(kind, params, k)?;
    let area = Area::from_record(rec, kind)?;
    let center = layout.to_vec(params);
    let plan = plan(&center, cfg, &|v| layout.valid(v))?;
    let f = |v: &[f64]| area_values(kind, &area, &rec.x, &layout.to_params(v)).to_vec();
    let d = differentiate(&f, &plan, want_hess)?;
    let post = shrinkage::ub_estimate(rec, params, kind)?;
    debug_assert_eq!(layout.dim(), k);
    Ok(AreaDerivatives { post, d })
}

fn quad_form(g: &[f64], omega: &DMatrix<f64>) -> f64 {
    let g = DVector::from_column_slice(g);
    (g.transpose() * omega * &g)[(0, 0)]
}

fn bias_from(d: &Derivatives, unc: &UncertaintyEstimates) -> f64 {
    let g_r1 = DVector::from_column_slice(&d.grad[1]);
    let score = DVector::from_column_slice(&d.grad[2]);
    let first = g_r1.dot(&(&unc.bias + &unc.omega * score));
    let second = 0.5 * (&d.hess[1] * &unc.omega).trace();
    first + second
}

/// R2 = gᵗΩg with g the numeric gradient of μ̃.
pub fn r2(
    rec: &AreaRecord,
    params: &ModelParams,
    omega: &DMatrix<f64>,
    kind: FamilyKind,
    cfg: &DerivativeConfig,
) -> Result<f64> {
    if !omega.is_square() {
        return Err(Error::InvalidParameter("omega must be square".into()));
    }
    let ad = area_derivatives(rec, params, omega.nrows(), kind, cfg, false)?;
    Ok(quad_form(&ad.d.grad[0], omega))
}

/// b = R1_φᵗ(B + Ω·L_φ) + ½·tr(R1_φφ·Ω).
pub fn bias_b(
    rec: &AreaRecord,
    params: &ModelParams,
    unc: &UncertaintyEstimates,
    kind: FamilyKind,
    cfg: &DerivativeConfig,
) -> Result<f64> {
    let ad = area_derivatives(rec, params, unc.dim(), kind, cfg, true)?;
    Ok(bias_from(&ad.d, unc))
}

/// Bias-corrected CMSE estimate and the naive plug-in for one area.
pub fn cmse_estimate(
    rec: &AreaRecord,
    fitted: &ModelParams,
    unc: &UncertaintyEstimates,
    kind: FamilyKind,
    cfg: &DerivativeConfig,
) -> Result<CmseComponents> {
    if unc.omega.nrows() != unc.dim() || unc.omega.ncols() != unc.dim() {
        return Err(Error::DimensionMismatch {
            expected: unc.dim(),
            got: unc.omega.nrows(),
        });
    }
    let ad = area_derivatives(rec, fitted, unc.dim(), kind, cfg, true)?;
    let r1 = ad.d.value[1];
    let r2 = quad_form(&ad.d.grad[0], &unc.omega);
    let b = bias_from(&ad.d, unc);
    let r1_bc = r1 - b;
    let cm_hat = r1_bc + r2;
    Ok(CmseComponents {
        mu_hat: ad.post.mu_tilde,
        r: ad.post.r,
        r1,
        r2,
        b,
        r1_bc,
        cm_hat,
        cm_naive: r1,
        score: ad.d.grad[2].clone(),
        negative: cm_hat < 0.0,
    })
}

/// [`cmse_estimate`] for every area, in input order.
pub fn cmse_all(
    data: &[AreaRecord],
    fitted: &ModelParams,
    unc: &UncertaintyEstimates,
    kind: FamilyKind,
    cfg: &DerivativeConfig,
) -> Result<Vec<CmseComponents>> {
    data.par_iter()
        .map(|rec| cmse_estimate(rec, fitted, unc, kind, cfg))
        .collect()
}

/// One parametric-bootstrap dataset drawn from the fitted uncertain model.
pub fn bootstrap_sample(
    data: &[AreaRecord],
    fitted: &ModelParams,
    kind: FamilyKind,
    rng: &mut RngStream,
) -> Result<Vec<AreaRecord>> {
    data.iter()
        .map(|rec| {
            let m = family::synthetic_mean(&rec.x, fitted, kind)?;
            let latent = family::sample_latent(m, fitted, kind, rng);
            let y = family::sample_observation(latent.mu, rec.n, kind, rng)?;
            Ok(AreaRecord::new(y, rec.n, rec.x.clone()))
        })
        .collect()
}

/// Parametric-bootstrap Ω̂ and B̂ for φ = (β, τ[, p]); see [`UncertaintyEstimates`].
///
/// Each refit starts from φ̂. A refit that errors or fails to converge is
/// retried once on a fresh stream, then dropped; more than 20% dropped is an error.
pub fn bootstrap_uncertainty(
    data: &[AreaRecord],
    fitted: &ModelParams,
    kind: FamilyKind,
    b: usize,
    fit_config: &FitConfig,
    rng: &RngStream,
) -> Result<UncertaintyEstimates> {
    if b < 2 {
        return Err(Error::InvalidParameter(format!("bootstrap needs B >= 2, got {b}")));
    }
    fitted.validate(kind)?;
    let with_p = fit_config.p_mode == PMode::Free;
    let k = fitted.beta.len() + 1 + usize::from(with_p);
    let layout = Layout::new(kind, fitted, k)?;
    let center = layout.to_vec(fitted);
    let replicate = |i: usize| -> Option<Vec<f64>> {
        for attempt in 0..2u64 {
            let mut stream = rng.derive_path(&[i as u64, attempt]);
            let Ok(sample) = bootstrap_sample(data, fitted, kind, &mut stream) else {
                continue;
            };
            match fit_em(&sample, kind, fit_config, Some(fitted)) {
                Ok(fit) if fit.converged => {
                    let v = layout.to_vec(&fit.params);
                    return Some(v.iter().zip(&center).map(|(a, c)| a - c).collect());
                }
                _ => continue,
            }
        }
        None
    };
    let deviations: Vec<Option<Vec<f64>>> = (0..b).into_par_iter().map(replicate).collect();
    let dropped = deviations.iter().filter(|d| d.is_none()).count();
    if dropped * 5 > b {
        return Err(Error::BootstrapFailure { dropped, total: b });
    }
    let kept: Vec<Vec<f64>> = deviations.into_iter().flatten().collect();
    let (omega, bias) = deviation_moments(&kept, k);
    Ok(UncertaintyEstimates {
        omega,
        bias,
        boot_count: b - dropped,
        dropped,
    })
}

/// Mean outer product and mean of the deviations, summed in order.
fn deviation_moments(deviations: &[Vec<f64>], k: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut omega = DMatrix::zeros(k, k);
    let mut bias = DVector::zeros(k);
    for d in deviations {
        let d = DVector::from_column_slice(d);
        omega += &d * d.transpose();
        bias += &d;
    }
    let n = deviations.len() as f64;
    (omega / n, bias / n)
}
