use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bayesamp::experiment::{ExperimentConfig, Layout, Summary};

const SMOKE: &str = r#"{
  "data": {"n_train": 200, "runs": 2},
  "net": {"hidden_width": 8},
  "cfm": {"epochs": 20, "batches_per_epoch": 2, "batch_size": 100},
  "settings": [
    {"name": "mcmc", "method": {"adammcmc": {"chain": {"thin_gap": 2, "n_samples": 3}, "likelihood": {"solver": {"steps": 4}, "reduction": "mean"}}}},
    {"name": "vib", "method": {"vib": {"train": {"epochs": 20, "batches_per_epoch": 2, "batch_size": 100, "plateau_window": null}, "members": 4}}}
  ],
  "grids": [2, 3],
  "generation": {"set_size": {"policy": "fixed", "set_size": 400}, "solver": {"steps": 4}, "preview_points": 50},
  "reference_size": 1000,
  "nominal_points": 10,
  "fit_window": 2,
  "closure_repeats": 2
}"#;

fn bayesamp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayesamp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn with(base: &str, edit: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut v: serde_json::Value = serde_json::from_str(base).unwrap();
    edit(&mut v);
    v.to_string()
}

fn pipeline(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    bayesamp(&args)
}

/// Relative path to content of every file under `root` with the given
/// extension.
fn files(root: &Path, ext: &str) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == ext) {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn smoke_pipeline_emits_every_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMOKE);
    let out = tmp.path().join("out");
    let res = pipeline(&cfg, &out, &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).contains("files in"));

    let csv = files(&out, "csv");
    let coverage = csv
        .keys()
        .filter(|p| p.starts_with("calibration") && p.to_string_lossy().contains("coverage_"))
        .count();
    assert_eq!(coverage, 2 * 2, "one coverage table per setting and grid");
    for setting in ["mcmc", "vib"] {
        for r in 0..2 {
            for n in [2, 3] {
                assert!(csv.contains_key(&PathBuf::from(format!("runs/run_{r}/{setting}/freq_{n}.csv"))));
            }
            assert!(csv.contains_key(&PathBuf::from(format!("amplification/{setting}/run_{r}.csv"))));
        }
        assert!(csv.contains_key(&PathBuf::from(format!("calibration/{setting}/deviation.csv"))));
        assert!(csv.contains_key(&PathBuf::from(format!("closure/{setting}.csv"))));
    }

    let stored: Summary = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    let config = ExperimentConfig::from_json(SMOKE).unwrap();
    let recomputed = Summary::from_csv(&config, &Layout::new(&out)).unwrap();
    assert_eq!(stored, recomputed);
    assert!(stored.gaps.is_empty(), "{:?}", stored.gaps);
    assert_eq!(stored.settings.len(), 2);
}

#[test]
fn identical_seeds_give_identical_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMOKE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(pipeline(&cfg, &a, &[]).status.success());
    assert!(pipeline(&cfg, &b, &[]).status.success());
    let (fa, fb) = (files(&a, "csv"), files(&b, "csv"));
    assert!(!fa.is_empty());
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (path, bytes) in &fa {
        assert!(bytes == &fb[path], "{} differs between identical runs", path.display());
    }

    let c = tmp.path().join("c");
    assert!(pipeline(&cfg, &c, &["--seed", "17"]).status.success());
    let fc = files(&c, "csv");
    assert_ne!(
        fa[Path::new("runs/run_0/train.csv")],
        fc[Path::new("runs/run_0/train.csv")]
    );
}

#[test]
fn stage_by_stage_matches_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMOKE);
    let whole = tmp.path().join("whole");
    assert!(pipeline(&cfg, &whole, &[]).status.success());

    let staged = tmp.path().join("staged");
    let (c, o) = (cfg.to_str().unwrap(), staged.to_str().unwrap());
    for args in [
        vec!["sample-data"],
        vec!["train"],
        vec!["posterior", "mcmc"],
        vec!["posterior", "vib"],
        vec!["generate"],
        vec!["calibrate"],
        vec!["amplify"],
        vec!["closure"],
    ] {
        let mut full = args.clone();
        full.extend(["--config", c, "--out", o]);
        let res = bayesamp(&full);
        assert!(
            res.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&res.stderr)
        );
    }
    let (fw, fs_) = (files(&whole, "csv"), files(&staged, "csv"));
    for (path, bytes) in &fs_ {
        assert!(bytes == &fw[path], "{} differs from the pipeline run", path.display());
    }
    assert_eq!(fw.len(), fs_.len());
}

#[test]
fn completed_stages_are_not_rerun_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMOKE);
    let out = tmp.path().join("out");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert!(bayesamp(&["sample-data", "--config", c, "--out", o]).status.success());
    let again = bayesamp(&["sample-data", "--config", c, "--out", o]);
    assert_eq!(again.status.code(), Some(1));
    assert!(bayesamp(&["sample-data", "--config", c, "--out", o, "--force"])
        .status
        .success());

    // a different configuration is refused for an existing directory
    let other = write_config(
        tmp.path(),
        "other.json",
        &with(SMOKE, |v| v["data"]["n_train"] = 300.into()),
    );
    let o2 = other.to_str().unwrap();
    let refused = bayesamp(&["sample-data", "--config", o2, "--out", o]);
    assert_eq!(refused.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("error"));
    assert!(bayesamp(&["sample-data", "--config", o2, "--out", o, "--force"])
        .status
        .success());
    let stored = ExperimentConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(stored.data.n_train, 300);
}

#[test]
fn missing_prerequisites_and_bad_configs_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMOKE);
    let out = tmp.path().join("out");
    let res = bayesamp(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));

    let bad = write_config(
        tmp.path(),
        "bad.json",
        &with(SMOKE, |v| v["data"]["n_trian"] = 5.into()),
    );
    let res = bayesamp(&[
        "sample-data",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));

    let one_run = write_config(tmp.path(), "one.json", &with(SMOKE, |v| v["data"]["runs"] = 1.into()));
    let res = bayesamp(&[
        "pipeline",
        "--config",
        one_run.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn empty_grid_list_skips_binned_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let text = with(SMOKE, |v| {
        v["grids"] = serde_json::json!([]);
        v["settings"].as_array_mut().unwrap().truncate(1);
    });
    let cfg = write_config(tmp.path(), "cfg.json", &text);
    let out = tmp.path().join("out");
    let res = pipeline(&cfg, &out, &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(!out.join("calibration").exists());
    assert!(out.join("runs/run_0/mcmc/ensemble.bin").exists());
    let summary: Summary = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary.settings[0].calibration.is_none());
}

#[test]
fn help_lists_every_stage() {
    let res = bayesamp(&["--help"]);
    assert!(res.status.success());
    let text = String::from_utf8_lossy(&res.stdout);
    for cmd in [
        "sample-data",
        "train",
        "posterior",
        "generate",
        "calibrate",
        "amplify",
        "closure",
        "pipeline",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}
