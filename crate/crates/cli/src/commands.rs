use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use eub_core::cmse::{bootstrap_uncertainty, cmse_all};
use eub_core::em::{fit_em, EStepMode};
use eub_core::numerics::stats::{quantile_inverse_cdf, sorted};
use eub_core::numerics::RngStream;
use eub_core::shrinkage::{eub_estimate, profile_csv, shrinkage_profile};
use eub_core::sim::{run_cmse_eval, run_comparison, run_sensitivity, QUANTILE_LEVELS};
use eub_core::{
    family, AreaRecord, CmseEvalDesign, DerivativeConfig, FamilyKind, FitConfig, FitResult, FitSummary, LatentLaw,
    ModelParams, PMode, SimDesign, UncertaintyEstimates,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::Dataset;
use crate::error::{CliError, Result};
use crate::output::{ensure_dir, fmt_f64, write_json, write_text, InputDigest, Manifest, Table};

const BOOT_STREAM: u64 = 0xB007;

#[derive(Debug, Parser)]
#[command(name = "eub", version, about = "Empirical uncertain Bayes small-area estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model by EM and write per-area EUB estimates.
    Fit(FitCmd),
    /// Bootstrap-corrected conditional MSE of a saved fit.
    Cmse(CmseCmd),
    /// Predictive criterion on areas with n above the alpha-quantile.
    HoldoutPc(HoldoutCmd),
    /// Responsibility and EUB estimate along a grid of y.
    Profile(ProfileCmd),
    /// Run a simulation study from a design file.
    Simulate(SimulateCmd),
}

fn parse_family(s: &str) -> std::result::Result<FamilyKind, String> {
    FamilyKind::from_short_name(s).ok_or_else(|| format!("unknown family '{s}' (expected fh, pg or bb)"))
}

#[derive(Debug, Clone, Args)]
pub struct FitOptions {
    #[arg(long, value_parser = parse_family)]
    pub family: FamilyKind,
    /// `free` or `fixed=<p>`.
    #[arg(long, default_value = "free")]
    pub p_mode: PMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    /// `analytic` or `mc=<k>`.
    #[arg(long, default_value = "analytic")]
    pub e_step: EStepMode,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

impl FitOptions {
    fn fit_config(&self) -> Result<FitConfig> {
        let cfg = FitConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            e_step_mode: self.e_step,
            seed: self.seed,
            p_mode: self.p_mode,
            ..FitConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct FitCmd {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub opts: FitOptions,
}

#[derive(Debug, Args)]
pub struct CmseCmd {
    #[arg(long)]
    pub data: PathBuf,
    /// fit.json written by `eub fit`; its family and p mode are used.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub bootstrap: usize,
    /// Derivative step; m^(-5/4) by default.
    #[arg(long)]
    pub z: Option<f64>,
    /// Skip the bootstrap and use zero Ω and B.
    #[arg(long)]
    pub zero_uncertainty: bool,
    #[command(flatten)]
    pub opts: FitOptions,
}

#[derive(Debug, Args)]
pub struct HoldoutCmd {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    #[command(flatten)]
    pub opts: FitOptions,
}

#[derive(Debug, Args)]
pub struct ProfileCmd {
    #[arg(long, value_parser = parse_family)]
    pub family: FamilyKind,
    /// Comma-separated coefficients.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub beta: Vec<f64>,
    #[arg(long)]
    pub nu: f64,
    #[arg(long)]
    pub p: f64,
    #[arg(long)]
    pub n: f64,
    /// Covariates, same length as beta; ones by default.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Vec<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub y_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub y_max: Option<f64>,
    /// Grid size for fh; count families use every attainable y = k/n.
    #[arg(long, default_value_t = 201)]
    pub points: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateCmd {
    #[arg(long)]
    pub design: PathBuf,
    /// Overrides the seed in the design file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(c) => cmd_fit(&c),
        Command::Cmse(c) => cmd_cmse(&c),
        Command::HoldoutPc(c) => cmd_holdout_pc(&c),
        Command::Profile(c) => cmd_profile(&c),
        Command::Simulate(c) => cmd_simulate(&c),
    }
}

/// Contents of fit.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitFile {
    #[serde(flatten)]
    pub summary: FitSummary,
    pub n_areas: usize,
}

impl FitFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

fn fit_config_json(cfg: &FitConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn not_converged(fit: &FitResult) -> CliError {
    CliError::Convergence(format!("EM did not converge in {} iterations", fit.iterations))
}

/// area_id,y,m_hat,r,mu_hat
pub fn estimates_table(ds: &Dataset, params: &ModelParams, kind: FamilyKind) -> Result<Table> {
    let mut t = Table::new(&["area_id", "y", "m_hat", "r", "mu_hat"]);
    for (id, rec) in ds.ids.iter().zip(&ds.records) {
        let post = eub_estimate(rec, params, kind)?;
        t.push(vec![id.clone(), fmt_f64(rec.y), fmt_f64(post.m), fmt_f64(post.r), fmt_f64(post.mu_tilde)]);
    }
    Ok(t)
}

fn cmd_fit(c: &FitCmd) -> Result<()> {
    let kind = c.opts.family;
    let cfg = c.opts.fit_config()?;
    let ds = Dataset::load(&c.data, kind)?;
    let fit = fit_em(&ds.records, kind, &cfg, None)?;
    ensure_dir(&c.opts.out)?;

    let file = FitFile {
        summary: fit.summary(),
        n_areas: ds.len(),
    };
    write_json(&c.opts.out.join("fit.json"), &file)?;
    estimates_table(&ds, &fit.params, kind)?.write(&c.opts.out.join("estimates.csv"))?;

    let mut manifest = Manifest::new("fit", cfg.seed, json!({ "family": kind, "fit": fit_config_json(&cfg) }));
    manifest.inputs.push(InputDigest::of(&c.data)?);
    manifest.outputs = vec!["fit.json".into(), "estimates.csv".into()];
    manifest.details = json!({ "converged": fit.converged, "iterations": fit.iterations });
    manifest.write(&c.opts.out)?;

    if fit.converged {
        Ok(())
    } else {
        Err(not_converged(&fit))
    }
}

fn cmd_cmse(c: &CmseCmd) -> Result<()> {
    let saved = FitFile::load(&c.fit)?;
    let kind = saved.summary.family;
    if kind != c.opts.family {
        return Err(CliError::Data(format!(
            "fit file is for family {} but --family is {}",
            kind.short_name(),
            c.opts.family.short_name()
        )));
    }
    let ds = Dataset::load(&c.data, kind)?;
    if ds.len() != saved.n_areas {
        return Err(CliError::Data(format!(
            "fit file covers {} areas, data file has {}",
            saved.n_areas,
            ds.len()
        )));
    }
    let params = saved.summary.params();
    if params.beta.len() != ds.covariate_names.len() {
        return Err(CliError::Data(format!(
            "fit file has {} coefficients, data file has {} covariates",
            params.beta.len(),
            ds.covariate_names.len()
        )));
    }
    params.validate(kind)?;
    let cfg = FitConfig {
        p_mode: saved.summary.p_mode,
        ..c.opts.fit_config()?
    };
    let dcfg = match c.z {
        Some(z) => DerivativeConfig::new(z)?,
        None => DerivativeConfig::for_areas(ds.len()),
    };
    let k = params.beta.len() + 1 + usize::from(cfg.p_mode == PMode::Free);
    let unc = if c.zero_uncertainty {
        UncertaintyEstimates::zero(k)
    } else {
        let root = RngStream::new(cfg.seed, BOOT_STREAM);
        bootstrap_uncertainty(&ds.records, &params, kind, c.bootstrap, &cfg, &root)?
    };
    let rows = cmse_all(&ds.records, &params, &unc, kind, &dcfg)?;

    ensure_dir(&c.opts.out)?;
    let mut t = Table::new(&["area_id", "mu_hat", "r", "r1", "r2", "b", "cm_hat", "cm_naive", "negative"]);
    for (id, row) in ds.ids.iter().zip(&rows) {
        t.push(vec![
            id.clone(),
            fmt_f64(row.mu_hat),
            fmt_f64(row.r),
            fmt_f64(row.r1),
            fmt_f64(row.r2),
            fmt_f64(row.b),
            fmt_f64(row.cm_hat),
            fmt_f64(row.cm_naive),
            u8::from(row.negative).to_string(),
        ]);
    }
    t.write(&c.opts.out.join("cmse.csv"))?;

    let config = json!({
        "family": kind,
        "fit": fit_config_json(&cfg),
        "bootstrap": c.bootstrap,
        "z": dcfg.z,
        "zero_uncertainty": c.zero_uncertainty,
    });
    let mut manifest = Manifest::new("cmse", cfg.seed, config);
    manifest.inputs = vec![InputDigest::of(&c.data)?, InputDigest::of(&c.fit)?];
    manifest.outputs = vec!["cmse.csv".into()];
    manifest.details = json!({
        "boot_count": unc.boot_count,
        "boot_dropped": unc.dropped,
        "negative": rows.iter().filter(|r| r.negative).count(),
    });
    manifest.write(&c.opts.out)?;
    Ok(())
}

/// Outcome of the hold-out predictive criterion.
#[derive(Debug, Clone, Serialize)]
pub struct HoldoutResult {
    pub alpha: f64,
    pub q_alpha: f64,
    pub n_train: usize,
    pub n_holdout: usize,
    pub pc: f64,
    pub fit: FitSummary,
}

/// Fit on areas with n ≤ q_α and score the synthetic mean on the rest.
pub fn holdout_pc(records: &[AreaRecord], kind: FamilyKind, cfg: &FitConfig, alpha: f64) -> Result<(HoldoutResult, bool)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::Config(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    let ns: Vec<f64> = records.iter().map(|r| r.n).collect();
    let q = quantile_inverse_cdf(&sorted(&ns), alpha)?;
    let (train, test): (Vec<&AreaRecord>, Vec<&AreaRecord>) = records.iter().partition(|r| r.n <= q);
    if test.is_empty() {
        return Err(CliError::Data(format!("no areas with n > q_alpha = {q}")));
    }
    let train: Vec<AreaRecord> = train.into_iter().cloned().collect();
    let fit = fit_em(&train, kind, cfg, None)?;
    let mut sum = 0.0;
    for rec in &test {
        let m = family::synthetic_mean(&rec.x, &fit.params, kind)?;
        sum += (m - rec.y).powi(2);
    }
    let result = HoldoutResult {
        alpha,
        q_alpha: q,
        n_train: train.len(),
        n_holdout: test.len(),
        pc: sum / test.len() as f64,
        fit: fit.summary(),
    };
    Ok((result, fit.converged))
}

fn cmd_holdout_pc(c: &HoldoutCmd) -> Result<()> {
    let kind = c.opts.family;
    let cfg = c.opts.fit_config()?;
    let ds = Dataset::load(&c.data, kind)?;
    let (result, converged) = holdout_pc(&ds.records, kind, &cfg, c.alpha)?;
    ensure_dir(&c.opts.out)?;
    write_json(&c.opts.out.join("pc.json"), &result)?;
    let mut manifest = Manifest::new(
        "holdout-pc",
        cfg.seed,
        json!({ "family": kind, "fit": fit_config_json(&cfg), "alpha": c.alpha }),
    );
    manifest.inputs.push(InputDigest::of(&c.data)?);
    manifest.outputs = vec!["pc.json".into()];
    manifest.write(&c.opts.out)?;
    println!("PC = {}", fmt_f64(result.pc));
    if converged {
        Ok(())
    } else {
        Err(CliError::Convergence("EM did not converge on the training areas".into()))
    }
}

/// y values for a profile: evenly spaced for fh, the count lattice k/n otherwise.
pub fn profile_grid(kind: FamilyKind, n: f64, m: f64, nu: f64, y_min: Option<f64>, y_max: Option<f64>, points: usize) -> Result<Vec<f64>> {
    let (lo, hi) = match kind {
        FamilyKind::FayHerriot => {
            let half = 5.0 * (1.0 / nu + 1.0 / n).sqrt();
            (y_min.unwrap_or(m - half), y_max.unwrap_or(m + half))
        }
        FamilyKind::PoissonGamma => (y_min.unwrap_or(0.0), y_max.unwrap_or(4.0 * m.max(1.0 / n))),
        FamilyKind::BinomialBeta => (y_min.unwrap_or(0.0), y_max.unwrap_or(1.0)),
    };
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(CliError::Config(format!("empty grid range [{lo}, {hi}]")));
    }
    if kind == FamilyKind::FayHerriot {
        if points < 2 {
            return Err(CliError::Config("a grid needs at least 2 points".into()));
        }
        let step = (hi - lo) / (points - 1) as f64;
        return Ok((0..points).map(|i| if i + 1 == points { hi } else { lo + step * i as f64 }).collect());
    }
    let k_lo = (lo * n).ceil().max(0.0) as u64;
    let k_hi = (hi * n).floor();
    let k_hi = if kind == FamilyKind::BinomialBeta { k_hi.min(n.round()) } else { k_hi };
    if k_hi < k_lo as f64 {
        return Err(CliError::Config(format!("no attainable counts in [{lo}, {hi}]")));
    }
    Ok((k_lo..=k_hi as u64).map(|k| k as f64 / n).collect())
}

fn cmd_profile(c: &ProfileCmd) -> Result<()> {
    let kind = c.family;
    let x = if c.x.is_empty() { vec![1.0; c.beta.len()] } else { c.x.clone() };
    if x.len() != c.beta.len() {
        return Err(CliError::Config(format!("--x has {} values, --beta has {}", x.len(), c.beta.len())));
    }
    let params = ModelParams::new(c.beta.clone(), c.nu, c.p);
    params.validate(kind)?;
    if !(c.n.is_finite() && c.n > 0.0) {
        return Err(CliError::Config(format!("n = {} must be positive", c.n)));
    }
    let m = family::synthetic_mean(&x, &params, kind)?;
    let grid = profile_grid(kind, c.n, m, c.nu, c.y_min, c.y_max, c.points)?;
    let template = AreaRecord::new(m, c.n, x.clone());
    let rows = shrinkage_profile(&grid, &template, &params, kind)?;
    ensure_dir(&c.out)?;
    write_text(&c.out.join("profile.csv"), &profile_csv(&rows))?;
    let config = json!({
        "family": kind, "beta": c.beta, "nu": c.nu, "p": c.p, "n": c.n, "x": x,
        "y_min": grid[0], "y_max": grid[grid.len() - 1], "points": grid.len(),
    });
    let mut manifest = Manifest::new("profile", 0, config);
    manifest.outputs = vec!["profile.csv".into()];
    manifest.details = json!({ "m": m });
    manifest.write(&c.out)?;
    Ok(())
}

/// A simulation design file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "snake_case")]
pub enum Study {
    /// EUB against EB; one scenario per entry of `p_grid` (the design's own p when empty).
    Comparison {
        design: SimDesign,
        #[serde(default)]
        p_grid: Vec<f64>,
    },
    /// One scenario per latent law (the design's own law when empty).
    Sensitivity {
        design: SimDesign,
        #[serde(default)]
        laws: Vec<LatentLaw>,
    },
    CmseEval { design: CmseEvalDesign },
}

impl Study {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn set_seed(&mut self, seed: u64) {
        match self {
            Study::Comparison { design, .. } | Study::Sensitivity { design, .. } => design.seed = seed,
            Study::CmseEval { design } => design.seed = seed,
        }
    }

    fn seed(&self) -> u64 {
        match self {
            Study::Comparison { design, .. } | Study::Sensitivity { design, .. } => design.seed,
            Study::CmseEval { design } => design.seed,
        }
    }
}

fn quantile_row(lead: Vec<String>, q: &[f64; 5], completed: usize, dropped: usize) -> Vec<String> {
    let mut row = lead;
    row.extend(q.iter().map(|&v| fmt_f64(v)));
    row.push(completed.to_string());
    row.push(dropped.to_string());
    row
}

const QUANTILE_HEADER: [&str; 5] = ["q05", "q25", "q50", "q75", "q95"];

fn header(lead: &[&'static str]) -> Vec<&'static str> {
    let mut h = lead.to_vec();
    h.extend(QUANTILE_HEADER);
    h.extend(["completed", "dropped"]);
    h
}

/// Run a study and return (file name, table, per-scenario details).
pub fn run_study(study: &Study) -> Result<(&'static str, Table, serde_json::Value)> {
    debug_assert_eq!(QUANTILE_LEVELS.len(), QUANTILE_HEADER.len());
    match study {
        Study::Comparison { design, p_grid } => {
            let ps = if p_grid.is_empty() { vec![design.true_params.p] } else { p_grid.clone() };
            let mut t = Table::new(&header(&["family", "p", "criterion"]));
            let mut details = Vec::new();
            for &p in &ps {
                let mut d = design.clone();
                d.true_params.p = p;
                let res = run_comparison(&d)?;
                let lead = |c: &str| vec![d.family.short_name().to_string(), fmt_f64(p), c.to_string()];
                t.push(quantile_row(lead("mse_ratio"), &res.mse_ratio, res.completed, res.dropped));
                t.push(quantile_row(lead("bias_ratio"), &res.bias_ratio, res.completed, res.dropped));
                details.push(json!({ "p": p, "completed": res.completed, "dropped": res.dropped }));
            }
            Ok(("table1.csv", t, json!(details)))
        }
        Study::Sensitivity { design, laws } => {
            let laws = if laws.is_empty() { vec![design.latent_law] } else { laws.clone() };
            let mut t = Table::new(&header(&["law", "criterion"]));
            let mut details = Vec::new();
            for &law in &laws {
                let d = SimDesign {
                    latent_law: law,
                    ..design.clone()
                };
                let res = run_sensitivity(&d)?;
                let name = serde_json::to_value(law).expect("law serializes");
                let name = name.as_str().unwrap_or_default().to_string();
                t.push(quantile_row(vec![name.clone(), "mse_x100".into()], &res.mse_x100, res.completed, res.dropped));
                t.push(quantile_row(vec![name.clone(), "bias_x100".into()], &res.bias_x100, res.completed, res.dropped));
                details.push(json!({ "law": name, "completed": res.completed, "dropped": res.dropped }));
            }
            Ok(("table2.csv", t, json!(details)))
        }
        Study::CmseEval { design } => {
            let rows = run_cmse_eval(design)?;
            let mut t = Table::new(&[
                "alpha", "y_alpha", "cm", "rb", "cv", "rbn", "cvn", "negative", "completed", "dropped",
                "truth_completed", "truth_dropped",
            ]);
            for r in &rows {
                t.push(vec![
                    fmt_f64(r.alpha),
                    fmt_f64(r.y_alpha),
                    fmt_f64(r.cm),
                    fmt_f64(r.rb),
                    fmt_f64(r.cv),
                    fmt_f64(r.rbn),
                    fmt_f64(r.cvn),
                    r.negative.to_string(),
                    r.completed.to_string(),
                    r.dropped.to_string(),
                    r.truth_completed.to_string(),
                    r.truth_dropped.to_string(),
                ]);
            }
            Ok(("table3.csv", t, serde_json::to_value(&rows).expect("rows serialize")))
        }
    }
}

fn cmd_simulate(c: &SimulateCmd) -> Result<()> {
    let mut study = Study::load(&c.design)?;
    if let Some(seed) = c.seed {
        study.set_seed(seed);
    }
    let start = Instant::now();
    let (name, table, details) = run_study(&study)?;
    let wall = start.elapsed().as_secs_f64();

    ensure_dir(&c.out)?;
    table.write(&c.out.join(name))?;
    let config = serde_json::to_value(&study).expect("study serializes");
    let mut manifest = Manifest::new("simulate", study.seed(), config);
    manifest.inputs.push(InputDigest::of(&c.design)?);
    manifest.outputs = vec![name.into()];
    manifest.details = details;
    manifest.write(&c.out)?;
    write_json(&c.out.join("timing.json"), &json!({ "wall_seconds": wall }))?;
    Ok(())
}
