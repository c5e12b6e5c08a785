use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rwre-lab"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn validate_accepts_every_shipped_config() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let o = bin().arg("validate").arg(&path).output().unwrap();
        assert!(o.status.success(), "{}: {}", path.display(), text(&o));
    }
}

#[test]
fn validate_names_the_bad_field() {
    let o = bin()
        .args(["validate"])
        .arg(config("lln_biased.toml"))
        .arg("environment.kappa=0.3")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("environment.kappa"), "{}", text(&o));

    let o = bin()
        .arg("validate")
        .arg(config("t_biased.toml"))
        .arg("parameters.m_grid=[6, 4, 8]")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("parameters.m_grid"), "{}", text(&o));
}

#[test]
fn run_writes_results_csvs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    let o = bin()
        .arg("run")
        .arg(config("t_biased.toml"))
        .arg("parameters.samples_per_m=500")
        .arg(format!("output=\"{}\"", out.display()))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    for f in ["results.json", "t_scan.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let results: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("results.json")).unwrap()).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(results["experiment"], "estimate-t");
    assert_eq!(results["config_hash"], manifest["config_hash"]);
    assert_eq!(manifest["config"]["parameters"]["samples_per_m"], 500);
    let csv = std::fs::read_to_string(out.join("t_scan.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let o = bin()
        .arg("plot-data")
        .arg(out.join("results.json"))
        .args(["--kind", "t-scan"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let plot = std::fs::read_to_string(out.join("plot_t_scan.csv")).unwrap();
    assert!(plot.starts_with("m,p_fail,ci_lo,ci_hi"));

    let o = bin()
        .arg("plot-data")
        .arg(out.join("results.json"))
        .args(["--kind", "histogram"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin()
        .arg("plot-data")
        .arg(out.join("results.json"))
        .args(["--kind", "tail"])
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn failed_run_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("lln");
    let o = bin()
        .arg("run")
        .arg(config("lln_biased.toml"))
        .args([
            "parameters.n=1000",
            "seeds.replications=2",
            "parameters.regen.max_steps=3",
            "parameters.regen.n_traj=2",
        ])
        .arg(format!("output=\"{}\"", out.display()))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for w in [1, 3] {
        let out = tmp.path().join(format!("w{w}"));
        let o = bin()
            .arg("run")
            .arg(config("clt_biased.toml"))
            .args(["parameters.n_grid=[200, 400]", "parameters.n_traj=100"])
            .arg(format!("workers={w}"))
            .arg(format!("output=\"{}\"", out.display()))
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", text(&o));
        bytes.push((
            std::fs::read(out.join("results.json")).unwrap(),
            std::fs::read(out.join("clt_marginals.csv")).unwrap(),
        ));
    }
    assert_eq!(bytes[0], bytes[1]);
}
