use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn vswir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vswir"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("summary.json")).unwrap()).unwrap()
}

fn scene(root: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let dir = root.join(name);
    let mut args = vec!["gen-scene", "--out", s(&dir)];
    args.extend_from_slice(extra);
    let out = vswir(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("retrieval.toml")
}

#[test]
fn gen_lut_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vswir(&["gen-lut", "--out", s(tmp.path()), "--linear", "--channels", "16", "--csv"]);
    assert!(out.status.success());
    for f in ["lut.vsw", "components.vsw", "lut.csv"] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
    let lut = vswir_core::io::read_lut(&tmp.path().join("lut.vsw")).unwrap();
    assert_eq!(lut.lut.n_channels(), 16);
    assert!(lut.solar_irradiance.is_some());
}

#[test]
fn linear_scene_oe_and_mcmc_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scene(tmp.path(), "lin", &["--linear"]);
    let out = vswir(&["compare", "-c", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sm = summary(&cfg.parent().unwrap().join("out"));
    assert_eq!(sm["status"], "complete");
    let d_norm = sm["covariance"]["d_norm"].as_f64().unwrap();
    assert!(d_norm < 0.1, "d_norm {d_norm}");
}

#[test]
fn nonlinear_scene_rejects_aod_normality() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scene(tmp.path(), "nl", &[]);
    let out = vswir(&["compare", "-c", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sm = summary(&cfg.parent().unwrap().join("out"));
    let p = sm["gaussianity"]["aod"]["ks_normal"]["p_value"].as_f64().unwrap();
    assert!(p < 0.05, "KS p {p}");
    assert!(sm["mcmc"]["min_aod"].as_f64().unwrap() >= 0.0);
}

#[test]
fn oe_then_mcmc_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scene(tmp.path(), "a", &["--linear", "--channels", "24"]);
    let dir = cfg.parent().unwrap().join("out");
    let short = ["--set", "mcmc.n_samples=20000", "--set", "mcmc.burn_in=2000"];

    let mut args = vec!["oe", "-c", s(&cfg)];
    args.extend_from_slice(&short);
    assert!(vswir(&args).status.success());
    assert!(dir.join("oe.json").is_file());
    assert!(!dir.join("chain.bin").exists());
    assert_eq!(summary(&dir)["mode"], "oe_only");

    let mut args = vec!["mcmc", "-c", s(&cfg)];
    args.extend_from_slice(&short);
    assert!(vswir(&args).status.success());
    assert!(dir.join("chain.bin").is_file());
    let before = std::fs::read(dir.join("summary.json")).unwrap();

    let mut args = vec!["report", "-c", s(&cfg), "--set", "mode=\"mcmc_only\""];
    args.extend_from_slice(&short);
    let out = vswir(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(dir.join("summary.json")).unwrap(), before);
}

#[test]
fn jobs_fan_out_over_scenes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("many");
    let out = vswir(&["gen-scene", "--out", s(&root), "--count", "2", "--linear", "--channels", "16"]);
    assert!(out.status.success());
    let cfgs: Vec<PathBuf> = (0..2).map(|k| root.join(format!("scene_{k:03}/retrieval.toml"))).collect();
    let out = vswir(&[
        "-j", "2", "compare", "-c", s(&cfgs[0]), "-c", s(&cfgs[1]),
        "--set", "mcmc.n_samples=20000", "--set", "mcmc.burn_in=2000",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let chains: Vec<Vec<u8>> = cfgs
        .iter()
        .map(|c| std::fs::read(c.parent().unwrap().join("out/chain.bin")).unwrap())
        .collect();
    assert_ne!(chains[0], chains[1]);
    let seeds: Vec<u64> = cfgs
        .iter()
        .map(|c| summary(&c.parent().unwrap().join("out"))["mcmc"]["seed"].as_u64().unwrap())
        .collect();
    assert_ne!(seeds[0], seeds[1]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scene(tmp.path(), "e", &["--linear", "--channels", "16"]);

    let missing = tmp.path().join("missing.toml");
    assert_eq!(vswir(&["oe", "-c", s(&missing)]).status.code(), Some(2));
    assert_eq!(vswir(&["oe", "-c", s(&cfg), "--set", "mcmc.bogus=1"]).status.code(), Some(2));

    let broken = tmp.path().join("broken.toml");
    std::fs::write(&broken, "radiance = \"r.csv\"\nlut = [oops\n").unwrap();
    let out = vswir(&["oe", "-c", s(&broken)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.toml:2"));

    let fail_dir = tmp.path().join("failed");
    let out = vswir(&["compare", "-c", s(&cfg), "--set", "oe.max_iter=1", "--output", s(&fail_dir)]);
    assert_eq!(out.status.code(), Some(3));
    let sm = summary(&fail_dir);
    assert_eq!(sm["status"], "failed");
    assert!(fail_dir.join("manifest.json").is_file());
    assert!(fail_dir.join("oe.json").is_file());
}
