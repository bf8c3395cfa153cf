use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use damflow::io::{read_anchor_document, read_flow, read_pnm, write_flow};
use damflow::metrics::EvalReport;
use damflow::FlowField;

fn damflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_damflow"))
        .args(args)
        .output()
        .expect("run damflow")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes one 32×32 scene and returns `(dir, scene name)`.
fn one_scene(root: &Path, seed: u64) -> (PathBuf, String) {
    let dir = root.join(format!("synth_{seed}"));
    let out = damflow(&[
        "synth",
        "--seed",
        &seed.to_string(),
        "--count",
        "1",
        "--size",
        "32",
        "--out-dir",
        s(&dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    let name = manifest["scenes"][0]["name"].as_str().unwrap().to_owned();
    (dir, name)
}

#[test]
fn synth_writes_scene_files_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, name) = one_scene(tmp.path(), 7);
    for suffix in [
        "_src.ppm",
        "_drv.ppm",
        "_gt_flow.damf",
        "_joints.json",
        "_scene.json",
    ] {
        assert!(
            dir.join(format!("{name}{suffix}")).is_file(),
            "missing {name}{suffix}"
        );
    }
    assert_eq!(fs::read_dir(&dir).unwrap().count(), 6);
    let (again, _) = one_scene(&tmp.path().join("again"), 7);
    for entry in fs::read_dir(&dir).unwrap() {
        let entry = entry.unwrap();
        assert_eq!(
            fs::read(entry.path()).unwrap(),
            fs::read(again.join(entry.file_name())).unwrap()
        );
    }
}

#[test]
fn synth_into_unwritable_location_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = damflow(&[
        "synth",
        "--count",
        "1",
        "--out-dir",
        s(&blocker.join("sub")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_flag_and_bad_config_exit_four() {
    assert_eq!(code(&damflow(&["synth", "--bogus"])), 4);
    let tmp = tempfile::tempdir().unwrap();
    let (dir, name) = one_scene(tmp.path(), 1);
    let src = dir.join(format!("{name}_src.ppm"));
    let out = damflow(&[
        "fit",
        "--src",
        s(&src),
        "--drv",
        s(&src),
        "--mode",
        "hdam",
        "--intermediates",
        "0",
        "--out",
        s(&tmp.path().join("fit")),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn fit_identical_pair_reconstructs_exactly_with_default_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, name) = one_scene(tmp.path(), 2);
    let src = dir.join(format!("{name}_src.ppm"));
    let fit = tmp.path().join("fit");
    let out = damflow(&[
        "fit",
        "--src",
        s(&src),
        "--drv",
        s(&src),
        "--iters",
        "1",
        "--out",
        s(&fit),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["anchors.json", "masks.damm", "flow.damf", "log.jsonl"] {
        assert!(fit.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(fit.join("log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["rec"].as_f64(), Some(0.0), "{first}");
    let (anchors, logits) = read_anchor_document(&fit.join("anchors.json")).unwrap();
    assert_eq!(anchors.num_motion(), 10);
    assert_eq!(anchors.num_intermediates(), 3);
    assert_eq!(logits.len(), 3);
}

#[test]
fn warp_with_identity_flow_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, name) = one_scene(tmp.path(), 3);
    let src = dir.join(format!("{name}_src.ppm"));
    let spec = read_pnm(&src).unwrap().spec();
    let flow = tmp.path().join("id.damf");
    write_flow(&flow, &FlowField::identity(spec)).unwrap();
    let warped = tmp.path().join("warped.ppm");
    assert_eq!(
        code(&damflow(&[
            "warp",
            "--src",
            s(&src),
            "--flow",
            s(&flow),
            "--out",
            s(&warped)
        ])),
        0
    );
    assert_eq!(fs::read(&src).unwrap(), fs::read(&warped).unwrap());
}

#[test]
fn eval_of_ground_truth_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, name) = one_scene(tmp.path(), 4);
    let gt = dir.join(format!("{name}_gt_flow.damf"));
    let drv = dir.join(format!("{name}_drv.ppm"));
    let report = tmp.path().join("report.json");
    let out = damflow(&[
        "eval",
        "--pred-flow",
        s(&gt),
        "--gt-flow",
        s(&gt),
        "--joints",
        s(&dir.join(format!("{name}_joints.json"))),
        "--generated",
        s(&drv),
        "--target",
        s(&drv),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: EvalReport = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r.l1, 0.0);
    assert_eq!(r.epe, 0.0);
    assert!(r.akd_px < 1e-5, "{}", r.akd_px);
    assert!(read_flow(&gt).unwrap().is_finite());
}

#[test]
fn gradcheck_passes() {
    let out = damflow(&["gradcheck", "--probes", "16", "--size", "32"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn viz_writes_color_image() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, name) = one_scene(tmp.path(), 5);
    let src = dir.join(format!("{name}_src.ppm"));
    let fit = tmp.path().join("fit");
    assert_eq!(
        code(&damflow(&[
            "fit",
            "--src",
            s(&src),
            "--drv",
            s(&src),
            "--iters",
            "2",
            "--out",
            s(&fit)
        ])),
        0
    );
    let viz = tmp.path().join("viz.ppm");
    let out = damflow(&[
        "viz",
        "--checkpoint",
        s(&fit.join("anchors.json")),
        "--image",
        s(&src),
        "--out",
        s(&viz),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = fs::read(&viz).unwrap();
    assert!(bytes.starts_with(b"P6"));
    assert_eq!(read_pnm(&viz).unwrap().channels(), 3);
}
