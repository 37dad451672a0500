use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::CommandFactory;

use super::*;

/// Runs a command line in-process; errors map to exit code 1 with the
/// message as output.
fn ddmhe(args: &[&str]) -> (ExitCode, String) {
    let cli = Cli::try_parse_from(std::iter::once("ddmhe").chain(args.iter().copied())).expect("valid arguments");
    let mut out = Vec::new();
    match run(cli, &mut out) {
        Ok(code) => (code, String::from_utf8(out).unwrap()),
        Err(e) => (ExitCode::FAILURE, format!("error: {e}")),
    }
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verbs_parse() {
    Cli::command().debug_assert();
    assert!(Cli::try_parse_from(["ddmhe", "estimate"]).is_err());
    assert!(Cli::try_parse_from(["ddmhe", "sweep", "-o", "x", "--mu", "1e3,abc"]).is_err());
}

#[test]
fn default_config_parses_back() {
    let (code, text) = ddmhe(&["config"]);
    assert_eq!(code, ExitCode::SUCCESS);
    ExperimentConfig::from_toml(&text).unwrap();
}

#[test]
fn shipped_configs_load() {
    for entry in fs::read_dir(config("")).unwrap() {
        let p = entry.unwrap().path();
        ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn estimate_then_report_agree() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let (code, text) = ddmhe(&["estimate", "-c", arg(&config("affine_noisy.toml")), "-o", arg(&run_dir)]);
    assert_eq!(code, ExitCode::SUCCESS, "{text}");
    for f in ["config.toml", "history.csv", "online.csv", "dd-mhe.csv", "dd-eskf.csv", "dd-kmhe.csv", "report.toml", "axis1.svg"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let (code, text) = ddmhe(&["report", arg(&run_dir)]);
    assert_eq!(code, ExitCode::SUCCESS);
    assert!(text.contains("certificates: pass"), "{text}");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(ddmhe(&["estimate", "-c", arg(&config("affine_noisy.toml")), "-o", arg(d)]).0, ExitCode::SUCCESS);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 8);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
}

#[test]
fn tampered_report_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    assert_eq!(ddmhe(&["estimate", "-c", arg(&config("affine_noisy.toml")), "-o", arg(&run_dir)]).0, ExitCode::SUCCESS);
    let path = run_dir.join("report.toml");
    let text = fs::read_to_string(&path).unwrap();
    let line = text.lines().find(|l| l.starts_with("rmse = ")).unwrap().to_string();
    fs::write(&path, text.replacen(&line, "rmse = 1.0", 1)).unwrap();
    let (code, text) = ddmhe(&["report", arg(&run_dir)]);
    assert_eq!(code, ExitCode::FAILURE);
    assert!(text.contains("disagrees"), "{text}");
}

#[test]
fn simulate_writes_loadable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = ddmhe(&["simulate", "-c", arg(&config("affine_noisy.toml")), "-o", arg(dir.path())]);
    assert_eq!(code, ExitCode::SUCCESS);
    let h = behavioral::load_trajectory_csv(&dir.path().join("history.csv")).unwrap();
    assert_eq!(h.outputs.len(), 200);
    let o = behavioral::load_trajectory_csv(&dir.path().join("online.csv")).unwrap();
    assert_eq!(o.outputs.len(), 300);
}

#[test]
fn synthesis_failure_exits_nonzero_with_trace() {
    // Noise-free affine data cannot satisfy the output rank gate.
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = ddmhe(&["synthesize", "-c", arg(&config("affine_noisy.toml")), "-o", arg(dir.path())]);
    assert_eq!(code, ExitCode::from(2));
    assert!(text.contains("synthesis failed"), "{text}");
    let saved = fs::read_to_string(dir.path().join("synthesis.toml")).unwrap();
    assert!(saved.contains("status"), "{saved}");
}

#[test]
fn synthesize_reads_a_data_file() {
    let dir = tempfile::tempdir().unwrap();
    ddmhe(&["simulate", "-c", arg(&config("affine_noisy.toml")), "-o", arg(dir.path())]);
    let (code, text) = ddmhe(&["synthesize", "-d", arg(&dir.path().join("history.csv"))]);
    assert_eq!(code, ExitCode::from(2));
    assert!(text.contains("output"), "{text}");
}

#[test]
fn bad_config_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[mhe]\nrho = 0.9\nmu = 1.0\nhorizon = 2\n").unwrap();
    let (code, text) = ddmhe(&["estimate", "-c", arg(&cfg), "-o", arg(&dir.path().join("o"))]);
    assert_eq!(code, ExitCode::FAILURE);
    assert!(text.contains("mhe section"), "{text}");
}

#[test]
fn sweep_writes_one_directory_per_mu() {
    let dir = tempfile::tempdir().unwrap();
    let (_, text) = ddmhe(&["sweep", "-c", arg(&config("affine_noisy.toml")), "-o", arg(dir.path()), "--mu", "1e3,1e4"]);
    assert!(text.contains("dd-mhe"), "{text}");
    for d in ["mu_1e3", "mu_1e4"] {
        assert!(dir.path().join(d).join("report.toml").exists(), "{d}");
    }
    assert!(dir.path().join("sweep.toml").exists());
    assert!(dir.path().join("sweep.svg").exists());
    let (code, _) = ddmhe(&["sweep", "-c", arg(&config("affine_noisy.toml")), "-o", arg(dir.path()), "--mu=-1"]);
    assert_eq!(code, ExitCode::FAILURE);
}
