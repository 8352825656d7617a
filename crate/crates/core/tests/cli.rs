mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn psweight(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psweight"))
        .args(args)
        .current_dir(dir)
        .env_remove("PSWEIGHT_OUT")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn config(dir: &Path, csv: &str, treatment: &str, covariates: &[&str]) -> PathBuf {
    write(dir, "data.csv", csv);
    let covs: Vec<String> = covariates.iter().map(|c| format!("{{ column = \"{c}\" }}")).collect();
    write(
        dir,
        "config.toml",
        &format!(
            "data = \"data.csv\"\n\n[ingest]\ntreatment = \"{treatment}\"\noutcome = \"y\"\ncovariates = [{}]\n",
            covs.join(", ")
        ),
    )
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn synthetic_csv(seed: u64, n: usize) -> String {
    let d = common::synthetic(seed, n, 3);
    let mut s = String::from("z,y,x1,x2,x3\n");
    for i in 0..n {
        let r = d.row(i);
        s += &format!("{},{},{},{},{}\n", d.treatment()[i] as u8, d.outcome().unwrap()[i], r[0], r[1], r[2]);
    }
    s
}

#[test]
fn fit_writes_model() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "z,y,x\n1,1.0,0.1\n0,2.0,0.5\n1,3.0,0.9\n0,4.0,0.3\n", "z", &["x"]);
    let out = psweight(&["fit", "--config", cfg.to_str().unwrap(), "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let model = json(&tmp.path().join("o/model.json"));
    assert_eq!(model["model"]["coefficients"].as_array().unwrap().len(), 2);
    assert!(tmp.path().join("o/calibration.csv").exists());
}

#[test]
fn separation_is_reported_not_fatal() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "z,y,x\n1,1,1\n1,1,2\n0,1,3\n0,1,4\n", "z", &["x"]);
    let out = psweight(&["fit", "--config", cfg.to_str().unwrap(), "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let model = json(&tmp.path().join("o/model.json"));
    assert!(!model["model"]["separation"].is_null());
}

#[test]
fn missing_treatment_column_names_it() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "z,y,x\n1,1,1\n0,1,2\n", "assigned", &["x"]);
    let out = psweight(&["fit", "--config", cfg.to_str().unwrap(), "--out", "o"], tmp.path());
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("assigned"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn analyze_compares_schemes() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &synthetic_csv(2, 400), "z", &["x1", "x2", "x3"]);
    let mut args = vec!["analyze", "--config", cfg.to_str().unwrap(), "--out", "o"];
    for s in ["unweighted", "overlap", "ht", "att"] {
        args.extend(["--scheme", s]);
    }
    let out = psweight(&args, tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&tmp.path().join("o/comparison.csv"));
    assert_eq!(rows.len(), 4);
    let overlap = rows.iter().find(|r| &r[0] == "overlap").unwrap();
    assert!(overlap[4].parse::<f64>().unwrap() < 1e-8);
    assert!(tmp.path().join("o/balance_overlap.csv").exists());
}

#[test]
fn truncation_can_empty_the_target() {
    // one binary covariate: scores are exactly 0.2 and 0.8
    let mut csv = String::from("z,y,x\n");
    for (x, z) in [(0, 1), (0, 1), (1, 0), (1, 0)] {
        csv += &format!("{z},1,{x}\n");
    }
    for _ in 0..6 {
        csv += "0,1,0\n1,1,1\n";
    }
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &csv, "z", &["x"]);
    let out = psweight(
        &["analyze", "--config", cfg.to_str().unwrap(), "--out", "o", "--scheme", "truncated(0.45)", "--scheme", "overlap"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&tmp.path().join("o/comparison.csv"));
    let truncated = rows.iter().find(|r| r[0].starts_with("truncated")).unwrap();
    assert!(truncated[5].contains("empty target population"), "{truncated:?}");
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &synthetic_csv(4, 200), "z", &["x1", "x2", "x3"]);
    for out in ["a", "b"] {
        let o = psweight(
            &["analyze", "--config", cfg.to_str().unwrap(), "--out", out, "--seed", "7", "--replicates", "20"],
            tmp.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(tmp.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 5);
    for name in names {
        let a = fs::read(tmp.path().join("a").join(&name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
}

#[test]
fn simulate_identical_groups_gives_one() {
    let tmp = TempDir::new().unwrap();
    let file = write(
        tmp.path(),
        "s.toml",
        "[[scenario]]\nname = \"same\"\nsize_ratio = 1\n\
         treated = { type = \"normal\", mean = 0, sd = 1 }\n\
         control = { type = \"normal\", mean = 0, sd = 1 }\n\
         schemes = [\"ht\", \"truncated(0.1)\", \"overlap\"]\n",
    );
    let out = psweight(&["simulate", "--config", file.to_str().unwrap(), "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&tmp.path().join("o/relative_variance.csv"));
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert!((r[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-6, "{r:?}");
    }
}

#[test]
fn simulate_flags_divergent_ht() {
    let tmp = TempDir::new().unwrap();
    let file = write(
        tmp.path(),
        "s.toml",
        "[[scenario]]\nname = \"apart\"\nsize_ratio = 1\n\
         treated = { type = \"tabulated\", x = [0, 1], density = [1, 1] }\n\
         control = { type = \"tabulated\", x = [0.5, 1.5], density = [1, 1] }\n\
         schemes = [\"ht\", \"overlap\"]\n",
    );
    let out = psweight(&["simulate", "--config", file.to_str().unwrap(), "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&tmp.path().join("o/relative_variance.csv"));
    let ht = rows.iter().find(|r| &r[1] == "ht").unwrap();
    assert_eq!(&ht[2], "inf");
    assert!(!ht[4].is_empty());
    let overlap = rows.iter().find(|r| &r[1] == "overlap").unwrap();
    assert!(overlap[2].parse::<f64>().unwrap().is_finite());
}

#[test]
fn output_directory_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "z,y,x\n1,1.0,0.1\n0,2.0,0.5\n1,3.0,0.9\n0,4.0,0.3\n", "z", &["x"]);
    let out = Command::new(env!("CARGO_BIN_EXE_psweight"))
        .args(["fit", "--config", cfg.to_str().unwrap()])
        .current_dir(tmp.path())
        .env("PSWEIGHT_OUT", tmp.path().join("from-env"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(tmp.path().join("from-env/model.json").exists());
}
