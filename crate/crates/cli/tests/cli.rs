use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn voxloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxloc")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path) -> String {
    let cfg = serde_config(dir);
    let path = dir.join("config.json");
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

fn serde_config(dir: &Path) -> String {
    format!(
        r#"{{
  "cohort_dir": "{cohort}",
  "out_dir": "{out}",
  "seed": 5,
  "cohort": {{
    "n_cases": 4,
    "template": {{ "dims": [80, 64, 64], "crop_extent": [32, 32, 32],
      "brain": {{ "center": [39.5, 31.5, 31.5], "semi_axes": [32.0, 28.8, 25.6], "intensity": 0.55 }},
      "ventricle": {{ "center": [39.5, 31.5, 35.5], "semi_axes": [4.0, 18.0, 12.0], "intensity": 0.15 }},
      "left_thalamus": {{ "center": [25.5, 31.5, 35.5], "semi_axes": [9.0, 15.0, 10.0], "intensity": 0.8 }},
      "right_thalamus": {{ "center": [53.5, 31.5, 35.5], "semi_axes": [9.0, 15.0, 10.0], "intensity": 0.8 }} }}
  }},
  "pipeline": {{ "coarse_dims": [40, 32, 32], "crop_extent": [32, 32, 32] }},
  "localizer": {{ "oracle": {{ "jitter_std": 0.5 }} }},
  "uncertainty": {{
    "mcdo": {{ "mode": "mcdo", "n_samples": 5 }},
    "tta": {{ "mode": "tta", "n_samples": 5 }},
    "hybrid": {{ "mode": "hybrid", "n_samples": 5 }}
  }}
}}"#,
        cohort = dir.join("cohort").display(),
        out = dir.join("out").display()
    )
}

#[test]
fn full_round_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());

    let g = voxloc(&["generate", "--config", &cfg]);
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    let manifest = fs::read(dir.path().join("cohort/manifest.json")).unwrap();
    assert_eq!(code(&voxloc(&["generate", "--config", &cfg])), 0);
    assert_eq!(fs::read(dir.path().join("cohort/manifest.json")).unwrap(), manifest);

    let r = voxloc(&["run", "--config", &cfg, "--workers", "2"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let results = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 4 * 2 * 4);

    let a = voxloc(&["analyze", "--config", &cfg]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert!(String::from_utf8_lossy(&a.stdout).contains("mcdo"));
    let long = fs::read(dir.path().join("out/boxplot_long.csv")).unwrap();

    assert_eq!(code(&voxloc(&["run", "--config", &cfg, "--workers", "1"])), 0);
    assert_eq!(fs::read_to_string(dir.path().join("out/results.csv")).unwrap(), results);
    assert_eq!(code(&voxloc(&["analyze", "--config", &cfg])), 0);
    assert_eq!(fs::read(dir.path().join("out/boxplot_long.csv")).unwrap(), long);
}

#[test]
fn modes_and_out_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cohort = dir.path().join("elsewhere");
    let cohort = cohort.to_str().unwrap();
    assert_eq!(code(&voxloc(&["generate", "--config", &cfg, "--out", cohort, "--cases", "2"])), 0);
    let out = dir.path().join("res");
    let r = voxloc(&[
        "run", "--config", &cfg, "--cohort", cohort, "--out", out.to_str().unwrap(), "--modes", "baseline,tta", "--seed", "9",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 2 * 2);
    assert!(results.lines().skip(1).all(|l| l.contains(",9,")));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&voxloc(&["frobnicate"])), 2);
    assert_eq!(code(&voxloc(&["run", "--workers", "many"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(code(&voxloc(&["generate", "--config", &cfg, "--cases", "0"])), 2);
    assert_eq!(code(&voxloc(&["run", "--config", &cfg, "--modes", "bogus"])), 2);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "case_id,mode\ncase000,mcdo\n").unwrap();
    let a = voxloc(&["analyze", "--results", bad.to_str().unwrap()]);
    assert_eq!(code(&a), 2);
    assert!(String::from_utf8_lossy(&a.stderr).contains("missing columns"));
}

#[test]
fn io_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(code(&voxloc(&["run", "--config", &cfg])), 4);
    assert_eq!(code(&voxloc(&["generate", "--config", "/nonexistent/config.json"])), 4);
}

#[test]
fn corrupt_case_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(code(&voxloc(&["generate", "--config", &cfg, "--cases", "4"])), 0);
    fs::write(dir.path().join("cohort/case002_left_mask.raw"), b"junk").unwrap();
    let r = voxloc(&["run", "--config", &cfg, "--modes", "baseline"]);
    assert_eq!(code(&r), 3);
    assert!(String::from_utf8_lossy(&r.stderr).contains("case002"));
    let results = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(results.lines().filter(|l| l.contains(",failed,")).count(), 2);
}
