use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

fn varbound(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_varbound"))
        .args(args)
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

#[test]
fn verify_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    for run in ["a", "b"] {
        let code = varbound(&["verify", "--out", &path(&tmp, run), "--check", "theorem1", "--density", "all"]);
        assert_eq!(code, 0);
    }
    let (a, b) = (files(&tmp.path().join("a")), files(&tmp.path().join("b")));
    assert!(a.iter().any(|(n, _)| n == "verify.csv"));
    assert_eq!(a, b);
}

#[test]
fn eval_nll_from_checkpoint_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let train = path(&tmp, "train");
    assert_eq!(
        varbound(&["train", "--out", &train, "--steps", "20", "--batch", "32", "--density", "gaussian", "--seed", "3"]),
        0
    );
    let ckpt = format!("{train}/model.json");
    for run in ["e1", "e2"] {
        let code = varbound(&[
            "eval-nll", "--out", &path(&tmp, run), "--ckpt", &ckpt, "--dequant", "tn", "--seed", "7", "--n", "8",
            "--samples", "256",
        ]);
        assert_eq!(code, 0);
    }
    let (a, b) = (files(&tmp.path().join("e1")), files(&tmp.path().join("e2")));
    assert!(a.iter().any(|(n, _)| n == "nll.csv"));
    assert_eq!(a, b);
}

#[test]
fn checkpoint_warm_start_must_match_evaluation() {
    let tmp = TempDir::new().unwrap();
    let train = path(&tmp, "train");
    assert_eq!(
        varbound(&["train", "--out", &train, "--steps", "5", "--batch", "16", "--density", "gaussian", "--warmup-sigma0", "0.1"]),
        0
    );
    let ckpt = format!("{train}/model.json");
    let eval = |sigma: &str, out: &str| {
        varbound(&[
            "eval-nll", "--out", &path(&tmp, out), "--ckpt", &ckpt, "--dequant", "none", "--density", "gaussian",
            "--warmup-sigma0", sigma, "--n", "4", "--samples", "64",
        ])
    };
    assert_eq!(eval("0.1", "same"), 0);
    assert_eq!(eval("0.2", "other"), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let out = path(&tmp, "x");
    assert_eq!(varbound(&["verify", "--out", &out, "--dequant", "bogus"]), 2);
    assert_eq!(varbound(&["verify", "--out", &out, "--schedule", "vp-cosine"]), 2);
    assert_eq!(varbound(&["ablate-is", "--out", &out, "--proposals", "designed,magic"]), 2);
    assert_eq!(varbound(&["ablate-is", "--out", &out, "--repeats", "3"]), 2);
    assert_eq!(varbound(&["verify", "--out", &out, "--eta0", "2", "--eta1", "1"]), 2);
    assert_eq!(varbound(&["frobnicate"]), 2);
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"seed": 1, "sede": 2}"#).unwrap();
    assert_eq!(varbound(&["verify", "--out", &out, "--config", cfg.to_str().unwrap()]), 2);
}

#[test]
fn violations_exit_with_one_and_still_write_artifacts() {
    let tmp = TempDir::new().unwrap();
    let out = path(&tmp, "strict");
    let code = varbound(&["verify", "--out", &out, "--check", "theorem1", "--density", "gmm2", "--tolerance", "1e-30"]);
    assert_eq!(code, 1);
    let log = fs::read_to_string(format!("{out}/run.log")).unwrap();
    assert!(log.ends_with("status: violation\n"));
    assert!(Path::new(&format!("{out}/verify.csv")).is_file());
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 11, "n": 5, "check": "thermo"}"#).unwrap();
    let out = path(&tmp, "layered");
    assert_eq!(varbound(&["verify", "--out", &out, "--config", cfg.to_str().unwrap(), "--n", "3"]), 0);
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(format!("{out}/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 11);
    assert_eq!(echoed["n"], 3);
    assert_eq!(echoed["check"], "thermo");
    assert_eq!(echoed["steps"], 5000);
}

#[test]
fn csv_rows_carry_schema_and_config_hash() {
    let tmp = TempDir::new().unwrap();
    let out = path(&tmp, "s");
    assert_eq!(varbound(&["sample", "--out", &out, "--n", "10", "--sample-steps", "50"]), 0);
    let log = fs::read_to_string(format!("{out}/run.log")).unwrap();
    let hash = log.lines().find_map(|l| l.strip_prefix("config_hash: ")).unwrap().to_string();
    let mut reader = csv::Reader::from_path(format!("{out}/samples.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["schema", "config_hash", "index", "x0"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 10);
    for r in &rows {
        assert_eq!(&r[0], "sample.v1");
        assert_eq!(&r[1], hash.as_str());
    }
}

#[test]
fn report_indexes_run_manifests() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().to_string_lossy().into_owned();
    assert_eq!(varbound(&["sample", "--out", &format!("{root}/s1"), "--n", "4", "--sample-steps", "20"]), 0);
    assert_eq!(varbound(&["verify", "--out", &format!("{root}/v1"), "--check", "thermo"]), 0);
    assert_eq!(varbound(&["report", "--out", &root]), 0);
    let text = fs::read_to_string(format!("{root}/report.csv")).unwrap();
    assert!(text.contains(",s1,sample,"));
    assert!(text.contains(",v1,verify,"));
    assert!(text.contains("samples.csv"));
}

#[test]
fn library_entry_point_matches_binary_codes() {
    let tmp = TempDir::new().unwrap();
    let out = path(&tmp, "lib");
    assert_eq!(varbound_cli::run(["varbound", "verify", "--out", &out, "--check", "thermo"]), varbound_cli::EXIT_OK);
    assert_eq!(varbound_cli::run(["varbound", "verify"]), varbound_cli::EXIT_USAGE);
}
