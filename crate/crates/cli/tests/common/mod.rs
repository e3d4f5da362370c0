#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use eub_cli::dataset::Dataset;
use eub_core::numerics::RngStream;
use eub_core::sim::{simulate, SimDesign};
use eub_core::{FamilyKind, LatentLaw};

pub fn eub(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_eub"))
        .args(args)
        .env_remove("UEB_THREADS")
        .output()
        .expect("binary runs");
    let text = String::from_utf8_lossy(&out.stderr).into_owned() + &String::from_utf8_lossy(&out.stdout);
    (out.status.code().unwrap_or(-1), text)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn synthetic(kind: FamilyKind, p: f64, m: usize, seed: u64) -> Dataset {
    synthetic_nu(kind, p, 5.0, m, seed)
}

/// Data from the comparison design (β = (0, 0.5)) with the given p and ν.
pub fn synthetic_nu(kind: FamilyKind, p: f64, nu: f64, m: usize, seed: u64) -> Dataset {
    let mut design = SimDesign::comparison(kind, p, 1, seed);
    design.m = m;
    design.true_params.nu = nu;
    let mut rng = RngStream::new(seed, 77);
    let template = design.draw_design(&mut rng).unwrap();
    let (records, _) = simulate(&template, &design.true_params, kind, LatentLaw::Conjugate, &mut rng).unwrap();
    Dataset {
        ids: (0..m).map(|i| format!("area{i:03}")).collect(),
        covariate_names: vec!["x1".into(), "x2".into()],
        records,
    }
}

pub fn write_data(dir: &Path, name: &str, ds: &Dataset) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, ds.to_csv().unwrap()).unwrap();
    path
}

/// Every file in `dir` except timing.json, sorted by name.
pub fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timing.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Run fit, cmse, holdout-pc, profile and simulate into `base`; returns each output directory's bytes.
pub fn run_every_command(base: &Path, data: &Path, design: &Path) -> Vec<Vec<(String, Vec<u8>)>> {
    let fit_dir = base.join("fit");
    let fit = fit_dir.join("fit.json");
    let runs: Vec<(PathBuf, Vec<&str>)> = vec![
        (fit_dir.clone(), vec!["fit", "--data", s(data), "--family", "pg"]),
        (
            base.join("cmse"),
            vec!["cmse", "--data", s(data), "--fit", s(&fit), "--family", "pg", "--bootstrap", "6", "--seed", "3"],
        ),
        (base.join("pc"), vec!["holdout-pc", "--data", s(data), "--family", "pg", "--alpha", "0.6"]),
        (
            base.join("profile"),
            vec!["profile", "--family", "bb", "--beta", "0", "--nu", "10", "--p", "0.5", "--n", "10"],
        ),
        (base.join("sim"), vec!["simulate", "--design", s(design)]),
    ];
    runs.into_iter()
        .map(|(out, mut args)| {
            args.extend(["--out", s(&out)]);
            let (code, msg) = eub(&args);
            assert_eq!(code, 0, "{args:?}: {msg}");
            dir_bytes(&out)
        })
        .collect()
}

pub const SMALL_DESIGN: &str = r#"{"study": "comparison", "p_grid": [0.3, 1.0],
    "design": {"family": "pg", "m": 30, "true_params": {"beta": [0.0, 0.5], "nu": 5.0, "p": 0.3},
               "replicates": 6, "n_law": {"min": 5, "max": 30}, "seed": 11}}"#;
