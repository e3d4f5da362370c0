mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::*;

use eub_cli::commands::{estimates_table, holdout_pc, FitFile};
use eub_cli::dataset::Dataset;
use eub_core::cmse::{bootstrap_uncertainty, cmse_all};
use eub_core::em::fit_em;
use eub_core::numerics::RngStream;
use eub_core::{family, AreaRecord, DerivativeConfig, FamilyKind, FitConfig, PMode, UncertaintyEstimates};
use tempfile::TempDir;

fn read_csv_column(path: &Path, col: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == col).unwrap();
    r.records().map(|row| row.unwrap()[idx].parse().unwrap()).collect()
}

#[test]
fn fit_writes_outputs_and_estimates_round_trip() {
    let tmp = TempDir::new().unwrap();
    let ds = synthetic(FamilyKind::PoissonGamma, 0.5, 40, 1);
    let data = write_data(tmp.path(), "pg.csv", &ds);
    let out = tmp.path().join("fit");
    let (code, msg) = eub(&["fit", "--data", s(&data), "--family", "pg", "--out", s(&out)]);
    assert_eq!(code, 0, "{msg}");

    let saved = FitFile::load(&out.join("fit.json")).unwrap();
    assert_eq!(saved.n_areas, 40);
    assert!(saved.summary.converged);
    let k = 4.0;
    assert_eq!(saved.summary.aic, -2.0 * saved.summary.loglik + 2.0 * k);

    let again = estimates_table(&ds, &saved.summary.params(), FamilyKind::PoissonGamma).unwrap();
    assert_eq!(again.to_csv().unwrap().as_bytes(), fs::read(out.join("estimates.csv")).unwrap());
}

#[test]
fn fixed_p_one_on_fh_is_classical_eb() {
    let tmp = TempDir::new().unwrap();
    let ds = synthetic(FamilyKind::FayHerriot, 0.5, 30, 2);
    let data = write_data(tmp.path(), "fh.csv", &ds);
    let out = tmp.path().join("eb");
    let (code, msg) = eub(&["fit", "--data", s(&data), "--family", "fh", "--p-mode", "fixed=1", "--out", s(&out)]);
    assert_eq!(code, 0, "{msg}");
    assert!(read_csv_column(&out.join("estimates.csv"), "r").iter().all(|&r| r == 1.0));
}

#[test]
fn fitted_loglik_beats_initialization() {
    for seed in 0..5 {
        let ds = synthetic(FamilyKind::PoissonGamma, 0.5, 50, 10 + seed);
        let fit = fit_em(&ds.records, FamilyKind::PoissonGamma, &FitConfig::default(), None).unwrap();
        assert!(fit.loglik() >= fit.loglik_trace[0], "seed {seed}");
    }
}

#[test]
fn cmse_zero_uncertainty_equals_naive() {
    let tmp = TempDir::new().unwrap();
    let ds = synthetic(FamilyKind::BinomialBeta, 0.5, 30, 3);
    let data = write_data(tmp.path(), "bb.csv", &ds);
    let out = tmp.path().join("o");
    let (code, msg) = eub(&["fit", "--data", s(&data), "--family", "bb", "--out", s(&out)]);
    assert_eq!(code, 0, "{msg}");
    let fit = out.join("fit.json");
    let (code, msg) = eub(&[
        "cmse", "--data", s(&data), "--fit", s(&fit), "--family", "bb", "--zero-uncertainty", "--out", s(&out),
    ]);
    assert_eq!(code, 0, "{msg}");
    let hat = read_csv_column(&out.join("cmse.csv"), "cm_hat");
    let naive = read_csv_column(&out.join("cmse.csv"), "cm_naive");
    assert_eq!(hat, naive);

    let (code, msg) = eub(&[
        "cmse", "--data", s(&data), "--fit", s(&fit), "--family", "bb", "--bootstrap", "2", "--out", s(&out),
    ]);
    assert_eq!(code, 0, "{msg}");
    for col in ["r1", "r2", "b", "cm_hat"] {
        assert!(read_csv_column(&out.join("cmse.csv"), col).iter().all(|v| v.is_finite()), "{col}");
    }
}

#[test]
fn cmse_rejects_mismatched_fit() {
    let tmp = TempDir::new().unwrap();
    let ds = synthetic(FamilyKind::PoissonGamma, 0.5, 30, 4);
    let data = write_data(tmp.path(), "pg.csv", &ds);
    let out = tmp.path().join("o");
    assert_eq!(eub(&["fit", "--data", s(&data), "--family", "pg", "--out", s(&out)]).0, 0);
    let fit = out.join("fit.json");
    let fewer = Dataset {
        ids: ds.ids[..20].to_vec(),
        covariate_names: ds.covariate_names.clone(),
        records: ds.records[..20].to_vec(),
    };
    let small = write_data(tmp.path(), "small.csv", &fewer);
    let (code, msg) = eub(&["cmse", "--data", s(&small), "--fit", s(&fit), "--family", "pg", "--out", s(&out)]);
    assert_eq!(code, 2, "{msg}");
    let (code, msg) = eub(&["cmse", "--data", s(&data), "--fit", s(&fit), "--family", "fh", "--out", s(&out)]);
    assert_eq!(code, 2, "{msg}");
}

#[test]
fn uncertain_fit_lowers_mean_cmse() {
    let kind = FamilyKind::PoissonGamma;
    let cfg = FitConfig::default();
    let d = DerivativeConfig::for_areas(300);
    let (mut uncertain, mut classical) = (0.0, 0.0);
    for rep in 0..3 {
        let ds = synthetic(kind, 0.3, 300, 500 + rep);
        let free = fit_em(&ds.records, kind, &cfg, None).unwrap();
        let eb = fit_em(&ds.records, kind, &cfg.eb(), None).unwrap();
        let unc = bootstrap_uncertainty(&ds.records, &free.params, kind, 20, &cfg, &RngStream::new(rep, 1)).unwrap();
        uncertain += cmse_all(&ds.records, &free.params, &unc, kind, &d).unwrap().iter().map(|c| c.cm_hat).sum::<f64>();
        classical += cmse_all(&ds.records, &eb.params, &UncertaintyEstimates::zero(3), kind, &d)
            .unwrap()
            .iter()
            .map(|c| c.cm_naive)
            .sum::<f64>();
    }
    assert!(uncertain < classical, "uncertain {uncertain} vs classical {classical}");
}

#[test]
fn holdout_pc_special_cases() {
    let kind = FamilyKind::FayHerriot;
    let mut rng = RngStream::new(6, 0);
    let mut records: Vec<AreaRecord> = (0..30)
        .map(|i| {
            let x = vec![1.0, (i as f64 * 0.37).sin()];
            let y = 0.2 + 0.5 * x[1] + 0.3 * eub_core::numerics::sample::std_normal(&mut rng);
            AreaRecord::new(y, 1.0 + (i % 10) as f64, x)
        })
        .collect();
    let cfg = FitConfig::default();

    // holdout areas (n = 10) carry y equal to the training fit's synthetic mean
    let train: Vec<AreaRecord> = records.iter().filter(|r| r.n <= 9.0).cloned().collect();
    let fit = fit_em(&train, kind, &cfg, None).unwrap();
    for r in records.iter_mut().filter(|r| r.n > 9.0) {
        r.y = family::synthetic_mean(&r.x, &fit.params, kind).unwrap();
    }
    let (res, converged) = holdout_pc(&records, kind, &cfg, 0.9).unwrap();
    assert!(converged);
    assert_eq!(res.q_alpha, 9.0);
    assert_eq!(res.n_holdout, 3);
    assert_eq!(res.pc, 0.0);

    // one area above the quantile
    records[29].n = 50.0;
    records[29].y = 4.0;
    let (res, _) = holdout_pc(&records, kind, &cfg, 29.0 / 30.0).unwrap();
    assert_eq!(res.n_holdout, 1);
    let train: Vec<AreaRecord> = records[..29].to_vec();
    let fit = fit_em(&train, kind, &cfg, None).unwrap();
    let m = family::synthetic_mean(&records[29].x, &fit.params, kind).unwrap();
    assert_eq!(res.pc, (m - 4.0).powi(2));

    let equal_n: Vec<AreaRecord> = records.iter().map(|r| AreaRecord::new(r.y, 2.0, r.x.clone())).collect();
    assert!(holdout_pc(&equal_n, kind, &cfg, 0.5).is_err());
    assert!(holdout_pc(&records, kind, &cfg, 1.0).is_err());
}

#[test]
fn holdout_pc_favours_uncertain_model() {
    let kind = FamilyKind::PoissonGamma;
    let free = FitConfig::default();
    let eb = FitConfig {
        p_mode: PMode::Fixed(1.0),
        ..FitConfig::default()
    };
    let mut wins = 0;
    for rep in 0..50 {
        let ds = synthetic_nu(kind, 0.5, 0.5, 50, 100 + rep);
        let (a, _) = holdout_pc(&ds.records, kind, &free, 0.5).unwrap();
        let (b, _) = holdout_pc(&ds.records, kind, &eb, 0.5).unwrap();
        wins += usize::from(a.pc <= b.pc);
    }
    assert!(wins > 25, "EUB won {wins} of 50");
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let ds = synthetic(FamilyKind::PoissonGamma, 0.5, 30, 7);
    let data = write_data(tmp.path(), "pg.csv", &ds);
    let out = tmp.path().join("o");

    assert_eq!(eub(&["fit", "--data", s(&data), "--family", "xx"]).0, 4);
    assert_eq!(eub(&["fit", "--data", s(&data), "--family", "pg", "--p-mode", "fixed=2"]).0, 4);
    assert_eq!(eub(&["fit", "--data", s(&data), "--family", "pg", "--tol", "-1", "--out", s(&out)]).0, 4);
    assert_eq!(eub(&["fit", "--data", "/nonexistent.csv", "--family", "pg"]).0, 2);
    assert_eq!(eub(&["bogus"]).0, 4);
    assert_eq!(eub(&["--help"]).0, 0);

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "area_id,y,n,x1\na,1,10,1\nb,0.15,10,1\n").unwrap();
    let (code, msg) = eub(&["fit", "--data", s(&bad), "--family", "bb", "--out", s(&out)]);
    assert_eq!(code, 2);
    assert!(msg.contains("line 3"), "{msg}");

    let slow = tmp.path().join("slow");
    let (code, _) = eub(&["fit", "--data", s(&data), "--family", "pg", "--max-iter", "1", "--out", s(&slow)]);
    assert_eq!(code, 3);
    assert!(slow.join("fit.json").exists() && slow.join("estimates.csv").exists());

    let design = tmp.path().join("d.json");
    fs::write(&design, r#"{"study": "comparison", "design": {"m": 5}}"#).unwrap();
    assert_eq!(eub(&["simulate", "--design", s(&design), "--out", s(&out)]).0, 4);

    let threads = Command::new(env!("CARGO_BIN_EXE_eub"))
        .args(["fit", "--data", s(&data), "--family", "pg", "--out", s(&out)])
        .env("UEB_THREADS", "zero")
        .status()
        .unwrap();
    assert_eq!(threads.code(), Some(4));
}

#[test]
fn every_command_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let ds = synthetic(FamilyKind::PoissonGamma, 0.4, 30, 8);
    let data = write_data(tmp.path(), "pg.csv", &ds);
    let design = tmp.path().join("d.json");
    fs::write(&design, SMALL_DESIGN).unwrap();
    let first = run_every_command(&tmp.path().join("a"), &data, &design);
    let second = run_every_command(&tmp.path().join("a"), &data, &design);
    assert_eq!(first, second);
    assert!(first.iter().all(|files| files.iter().any(|(n, _)| n == "manifest.json")));
}

#[test]
fn simulate_table_one_grid() {
    let tmp = TempDir::new().unwrap();
    let design = tmp.path().join("d.json");
    fs::write(
        &design,
        r#"{"study": "comparison", "design": {"family": "pg", "m": 50,
            "true_params": {"beta": [0.0, 0.5], "nu": 5.0, "p": 1.0},
            "replicates": 50, "n_law": {"min": 5, "max": 30}, "seed": 1}}"#,
    )
    .unwrap();
    let out = tmp.path().join("o");
    let (code, msg) = eub(&["simulate", "--design", s(&design), "--out", s(&out)]);
    assert_eq!(code, 0, "{msg}");
    let mut r = csv::Reader::from_path(out.join("table1.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        let q: Vec<f64> = (3..8).map(|i| row[i].parse().unwrap()).collect();
        assert!(q.iter().all(|v| v.is_finite()) && q.windows(2).all(|w| w[0] <= w[1]));
    }
    let median: f64 = rows[0][5].parse().unwrap();
    assert!((0.9..1.1).contains(&median), "p = 1 median ratio {median}");
    assert!(out.join("manifest.json").exists() && out.join("timing.json").exists());
}

#[test]
fn profile_grid_shapes() {
    let tmp = TempDir::new().unwrap();
    for (fam, expect_rows) in [("pg", None), ("bb", Some(11)), ("fh", Some(51))] {
        let out = tmp.path().join(fam);
        let (code, msg) = eub(&[
            "profile", "--family", fam, "--beta", "0", "--nu", "10", "--p", "1", "--n", "10", "--points", "51", "--out",
            s(&out),
        ]);
        assert_eq!(code, 0, "{msg}");
        let r = read_csv_column(&out.join("profile.csv"), "r");
        assert!(r.iter().all(|&v| v == 1.0));
        if let Some(n) = expect_rows {
            assert_eq!(r.len(), n);
        }
    }
}

mod loader {
    use super::*;
    use proptest::prelude::*;

    fn real() -> impl Strategy<Value = f64> {
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
    }

    proptest! {
        #[test]
        fn write_then_read_is_identity(
            fam in 0usize..3,
            rows in prop::collection::vec((0u32..40, 1u32..40, real(), real(), prop::collection::vec(real(), 2)), 1..20),
        ) {
            let kind = FamilyKind::ALL[fam];
            let records: Vec<AreaRecord> = rows
                .iter()
                .map(|&(k, n, fh_y, fh_n, ref x)| match kind {
                    FamilyKind::FayHerriot => AreaRecord::new(fh_y, fh_n.abs().max(1e-300), x.clone()),
                    FamilyKind::PoissonGamma => AreaRecord::new(k as f64 / n as f64, n as f64, x.clone()),
                    FamilyKind::BinomialBeta => AreaRecord::new(k.min(n) as f64 / n as f64, n as f64, x.clone()),
                })
                .collect();
            let ds = Dataset {
                ids: (0..records.len()).map(|i| format!("id, \"{i}\"")).collect(),
                covariate_names: vec!["x1".into(), "x2".into()],
                records,
            };
            let back = Dataset::parse(&ds.to_csv().unwrap(), kind).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
