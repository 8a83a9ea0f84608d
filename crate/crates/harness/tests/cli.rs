use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use promptseg::stub::{StubMode, StubServer};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_promptseg"));
    c.env("RUST_LOG", "warn")
        .env_remove("PROMPTSEG_DATA")
        .env_remove("PROMPTSEG_BACKEND_URL");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn phantoms(dir: &Path, n: usize, size: usize) -> PathBuf {
    let data = dir.join("data");
    let o = run(&[
        "phantom",
        "--out",
        data.to_str().unwrap(),
        "--cases",
        &n.to_string(),
        "--size",
        &size.to_string(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

fn write_config(dir: &Path, name: &str, body: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec_pretty(&body).unwrap()).unwrap();
    p
}

fn records(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join("records.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn smoke_run_two_phantoms() {
    let tmp = tempfile::tempdir().unwrap();
    phantoms(tmp.path(), 2, 24);
    let cfg = write_config(
        tmp.path(),
        "c.json",
        serde_json::json!({"dataset_root": "data", "policies": ["oracle"], "output_dir": "out"}),
    );
    let o = run(&["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = tmp.path().join("out");
    let recs = records(&out);
    let mut cases: Vec<&str> = recs
        .iter()
        .map(|r| r["case_id"].as_str().unwrap())
        .collect();
    cases.dedup();
    assert_eq!(cases, vec!["phantom_001", "phantom_002"]);
    assert!(recs.iter().all(|r| r["failed"] == false));
    let failures: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("failures.json")).unwrap()).unwrap();
    assert_eq!(failures["n_failed_slices"], 0);
    let run_manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(
        run_manifest["backend_id"],
        "reference-region-growing/8-16-32"
    );
    assert_eq!(run_manifest["config_hash"].as_str().unwrap().len(), 64);
    let csv = fs::read_to_string(out.join("records.csv")).unwrap();
    assert!(csv
        .starts_with("case_id,grade,orientation,slice_index,policy,cropped,gt_area_mm2,best_iou"));
    assert_eq!(csv.lines().count(), recs.len() + 1);

    let first = fs::read(out.join("records.jsonl")).unwrap();
    let o = run(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--parallelism",
        "1",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(out.join("records.jsonl")).unwrap(), first);

    // report and fuse on the same records
    let rec_path = out.join("records.jsonl");
    let o = run(&["report", "--records", rec_path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "report.json",
        "report.md",
        "step_curves.csv",
        "area_scatter.csv",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let data = tmp.path().join("data");
    let o = run(&[
        "fuse",
        "--records",
        rec_path.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("majority vote skipped"));
    let fusion: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("fusion.json")).unwrap()).unwrap();
    let rows = fusion["cases"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r["dice_axial"].as_f64().unwrap() > 0.8);
        assert!(
            r.get("dice_majority").is_none(),
            "single orientation has no majority"
        );
    }
    assert!(!fs::read_to_string(out.join("fusion.md"))
        .unwrap()
        .contains("majority |"));
}

#[test]
fn invalid_config_exits_2_with_field_names() {
    let tmp = tempfile::tempdir().unwrap();
    phantoms(tmp.path(), 1, 16);
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        serde_json::json!({"dataset_root": "data", "max_points": 10, "policies": []}),
    );
    let o = run(&["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("max_points") && e.contains("policies"), "{e}");

    let cfg = write_config(tmp.path(), "typo.json", serde_json::json!({"max_point": 3}));
    assert_eq!(
        code(&run(&["evaluate", "--config", cfg.to_str().unwrap()])),
        2
    );
    assert_eq!(
        code(&run(&["evaluate", "--config", "/nonexistent.json"])),
        2
    );
}

#[test]
fn unreachable_backend_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    phantoms(tmp.path(), 1, 16);
    let cfg = write_config(
        tmp.path(),
        "c.json",
        serde_json::json!({"dataset_root": "data", "backend": {"kind": "external", "timeout_s": 2.0}}),
    );
    // endpoint comes from the environment
    let o = bin()
        .args(["evaluate", "--config", cfg.to_str().unwrap()])
        .env("PROMPTSEG_BACKEND_URL", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert_eq!(
        code(&run(&[
            "backends",
            "health",
            "--endpoint",
            "http://127.0.0.1:9"
        ])),
        3
    );

    let stub = StubServer::start(StubMode::Threshold).unwrap();
    let o = run(&["backends", "health", "--endpoint", &stub.url()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("stub-threshold"));
    let unhealthy = StubServer::start(StubMode::Unhealthy).unwrap();
    assert_eq!(
        code(&run(&[
            "backends",
            "health",
            "--endpoint",
            &unhealthy.url()
        ])),
        3
    );
}

#[test]
fn external_stub_failures_are_recorded_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    phantoms(tmp.path(), 1, 16);
    let stub = StubServer::start(StubMode::TwoMasks).unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        serde_json::json!({"dataset_root": "data", "backend": {"kind": "external", "endpoint": stub.url()}}),
    );
    let o = run(&["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let recs = records(&tmp.path().join("out"));
    assert!(!recs.is_empty());
    assert!(recs
        .iter()
        .all(|r| r["failed"] == true && r["best_iou"].is_null()));
    let tally: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("out/failures.json")).unwrap()).unwrap();
    assert_eq!(
        tally["n_failed_slices"].as_u64().unwrap() as usize,
        recs.len()
    );
}

#[test]
fn report_on_empty_input_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("records.jsonl");
    fs::write(&p, "").unwrap();
    let o = run(&["report", "--records", p.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn manifest_subcommand_reads_grades_from_folders() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(tmp.path(), 3, 12);
    let out = tmp.path().join("generated.json");
    let o = run(&[
        "manifest",
        "--dataset-root",
        data.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let generated: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let written: serde_json::Value =
        serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(generated, written);
}

fn all_orientations_config(dir: &Path, out: &str) -> PathBuf {
    write_config(
        dir,
        &format!("{out}.json"),
        serde_json::json!({
            "dataset_root": "data",
            "policies": ["oracle", "previous_slice"],
            "orientations": ["transversal", "coronal", "sagittal"],
            "cropped": [false, true],
            "output_dir": out,
            "parallelism": 2
        }),
    )
}

#[test]
fn killed_run_resumes_to_identical_records() {
    let tmp = tempfile::tempdir().unwrap();
    phantoms(tmp.path(), 6, 28);
    let full = all_orientations_config(tmp.path(), "full");
    let o = run(&["evaluate", "--config", full.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let cfg = all_orientations_config(tmp.path(), "killed");
    let cp = tmp.path().join("killed/checkpoints");
    let mut child = bin()
        .args(["evaluate", "--config", cfg.to_str().unwrap()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let mut killed_midway = false;
    loop {
        let n = fs::read_dir(&cp).map_or(0, |d| {
            d.filter(|e| {
                e.as_ref()
                    .is_ok_and(|e| e.path().extension().is_some_and(|x| x == "json"))
            })
            .count()
        });
        if n >= 1 {
            killed_midway = child.try_wait().unwrap().is_none();
            let _ = child.kill();
            break;
        }
        if child.try_wait().unwrap().is_some() || start.elapsed() > Duration::from_secs(120) {
            break;
        }
        thread::sleep(Duration::from_millis(5));
    }
    child.wait().unwrap();
    let o = run(&["evaluate", "--config", cfg.to_str().unwrap(), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    if killed_midway {
        assert!(
            String::from_utf8_lossy(&o.stdout).contains("resumed"),
            "no resume happened"
        );
    }
    for f in ["records.jsonl", "records.csv"] {
        assert_eq!(
            fs::read(tmp.path().join("full").join(f)).unwrap(),
            fs::read(tmp.path().join("killed").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn fuse_with_all_orientations_reports_majority() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(tmp.path(), 1, 24);
    let cfg = write_config(
        tmp.path(),
        "c.json",
        serde_json::json!({
            "dataset_root": "data",
            "orientations": ["transversal", "coronal", "sagittal"],
            "cropped": [true],
        }),
    );
    assert_eq!(
        code(&run(&["evaluate", "--config", cfg.to_str().unwrap()])),
        0
    );
    let recs = tmp.path().join("out/records.jsonl");
    let o = run(&[
        "fuse",
        "--records",
        recs.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fusion: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("out/fusion.json")).unwrap()).unwrap();
    let row = &fusion["cases"][0];
    let singles = ["dice_axial", "dice_coronal", "dice_sagittal"].map(|k| row[k].as_f64().unwrap());
    let majority = row["dice_majority"].as_f64().unwrap();
    let best = singles.iter().copied().fold(0.0, f64::max);
    assert!(majority >= best - 0.02, "{singles:?} vs {majority}");
    assert_eq!(row["cropped"], true);
}
