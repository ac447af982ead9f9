use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rsd::harness::config::RunConfig;
use rsd::harness::pipeline::{PARAMS_FILE, REPORT_FILE};
use rsd::harness::scene::{GT_FILE, PRED_FILE, QUERIES_FILE, RIG_FILE};
use rsd::harness::{gen_scene, run_pipeline, write_scene, HarnessError, Stage};
use tempfile::TempDir;

const SMALL: &str = "seed = 11\n[grid]\nrows = 30\ncols = 30\n[model]\ndim = 8\nn_heads = 2\nn_points = 2\npv_height = 12\npv_width = 9\n";

fn rsd(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsd"))
        .args(args.iter().map(|a| a.as_ref()))
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn small_scene(tmp: &TempDir) -> (RunConfig, PathBuf, PathBuf) {
    let cfg_file = tmp.path().join("small.toml");
    std::fs::write(&cfg_file, SMALL).unwrap();
    let cfg = RunConfig::load(&cfg_file).unwrap();
    let scene = tmp.path().join("scene");
    write_scene(&gen_scene(3, 8, &cfg), &cfg, &scene).unwrap();
    (cfg, cfg_file, scene)
}

#[test]
fn stages_run_individually_match_the_orchestrated_run() {
    let tmp = TempDir::new().unwrap();
    let (cfg, cfg_file, scene) = small_scene(&tmp);
    let run = tmp.path().join("run");
    run_pipeline(&cfg, &scene, &run).unwrap();

    let t = |p: &str| tmp.path().join(p);
    ok(rsd(&[&"mask", &"--rig", &scene.join(RIG_FILE), &"--grid", &"30", &"30", &"--depth", &"4", &"--out", &t("mask"), &"--config", &cfg_file]));
    ok(rsd(&[&"rebatch", &"--mask", &t("mask"), &"--queries", &scene.join(QUERIES_FILE), &"--out", &t("rebatch"), &"--dump-indices"]));
    ok(rsd(&[&"init-params", &"--out", &t(PARAMS_FILE), &"--config", &cfg_file]));
    ok(rsd(&[&"riskhead", &"--in", &t("rebatch"), &"--params", &t(PARAMS_FILE), &"--out", &t("riskhead")]));

    for stage in ["mask", "rebatch", "riskhead"] {
        assert_eq!(files(&t(stage)), files(&run.join(stage)), "{stage} outputs differ");
    }
    assert_eq!(std::fs::read(t(PARAMS_FILE)).unwrap(), std::fs::read(run.join(PARAMS_FILE)).unwrap());

    ok(rsd(&[&"eval", &"--pred", &run.join(PRED_FILE), &"--gt", &scene.join(GT_FILE), &"--report", &t(REPORT_FILE)]));
    assert_eq!(std::fs::read(t(REPORT_FILE)).unwrap(), std::fs::read(run.join(REPORT_FILE)).unwrap());
}

#[test]
fn single_height_config_runs_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let (mut cfg, _, scene) = small_scene(&tmp);
    cfg.grid.z_samples = 1;
    let out = run_pipeline(&cfg, &scene, &tmp.path().join("run")).unwrap();
    assert!(out.report.map.is_some() && out.report.diff_risk.is_some());
    assert!(out.loss.total.is_finite());
}

#[test]
fn corrupt_rig_is_a_geometry_stage_error() {
    let tmp = TempDir::new().unwrap();
    let (cfg, _, scene) = small_scene(&tmp);
    std::fs::write(scene.join(RIG_FILE), "[{\"name\": \"cam\", \"width\": 10").unwrap();
    let err = run_pipeline(&cfg, &scene, &tmp.path().join("run")).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Geometry), "{err}");
    assert!(err.is_validation());

    let out = rsd(&[&"run", &"--scene", &scene, &"--out", &tmp.path().join("cli")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("geometry stage"));
}

#[test]
fn mismatched_params_are_a_riskhead_stage_error() {
    let tmp = TempDir::new().unwrap();
    let (cfg, _, scene) = small_scene(&tmp);
    let params = tmp.path().join("default_params.bin");
    rsd::harness::pipeline::init_params(&RunConfig::default()).save(&params).unwrap();
    let cfg = RunConfig {
        params: Some(params),
        ..cfg
    };
    let err = run_pipeline(&cfg, &scene, &tmp.path().join("run")).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::RiskHead), "{err}");
}

#[test]
fn missing_scene_is_not_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let err = run_pipeline(&RunConfig::default(), &tmp.path().join("nope"), &tmp.path().join("run")).unwrap_err();
    assert!(matches!(err, HarnessError::Stage { .. }));
    assert!(!err.is_validation());
    let out = rsd(&[&"run", &"--scene", &tmp.path().join("nope"), &"--out", &tmp.path().join("run")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_config_exits_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\ndim = 7\nn_heads = 2\n").unwrap();
    let out = rsd(&[&"gen-scene", &"--seed", &"1", &"--objects", &"1", &"--out", &tmp.path().join("s"), &"--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.dim"));
}

#[test]
fn eval_rejects_malformed_jsonl_with_line_number() {
    let tmp = TempDir::new().unwrap();
    let (_, _, scene) = small_scene(&tmp);
    let bad = tmp.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"frame\": \"000000\"}\n{not json\n").unwrap();
    let out = rsd(&[&"eval", &"--pred", &bad, &"--gt", &scene.join(GT_FILE), &"--report", &tmp.path().join("r.json")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn diff_risk_on_scene_files() {
    let tmp = TempDir::new().unwrap();
    let (_, _, scene) = small_scene(&tmp);
    // ground truth against itself
    let gt = scene.join(GT_FILE);
    let pred = tmp.path().join("pred.jsonl");
    let text = std::fs::read_to_string(&gt).unwrap().replace("\"risk_gt\"", "\"risk_pred\"");
    let pred_only: Vec<String> = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let obj = v.as_object_mut().unwrap();
            obj.retain(|k, _| k == "frame" || k == "risk_pred");
            v.to_string()
        })
        .collect();
    std::fs::write(&pred, pred_only.join("\n") + "\n").unwrap();
    let out: serde_json::Value = serde_json::from_str(&ok(rsd(&[&"diff-risk", &"--gt", &gt, &"--pred", &pred]))).unwrap();
    assert_eq!(out["Diff_Risk"], 0.0);
    let out: serde_json::Value =
        serde_json::from_str(&ok(rsd(&[&"diff-risk", &"--gt", &gt, &"--pred", &pred, &"--elementwise"]))).unwrap();
    assert_eq!(out["Diff_Risk"], 0.0);
}

#[test]
fn gradcheck_subcommand_passes() {
    let stdout = ok(rsd(&[&"gradcheck", &"--op", &"all"]));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 2, "{stdout}");
}
