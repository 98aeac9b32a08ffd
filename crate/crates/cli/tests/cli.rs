//! End-to-end tests of the `surfel-track` binary: dataset synthesis,
//! tracking, evaluation, diagnostics, and exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_surfel-track"))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

#[test]
fn synth_writes_a_complete_deterministic_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        let status = bin()
            .args(["synth", "--preset", "bending_sheet", "--seed", "11", "--frames", "6"])
            .arg("--out")
            .arg(out)
            .args(["--spacing", "150", "--margin", "60"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    for name in [
        "intrinsics.cfg",
        "frame_00000.pgm",
        "frame_00005.pgm",
        "depth_00000.pgm",
        "gt_trajectory.csv",
        "gt_surfels.csv",
        "manifest.json",
    ] {
        assert!(out_a.join(name).exists(), "missing {name}");
    }
    // Identical seed, identical bytes for every data file.
    for name in [
        "intrinsics.cfg",
        "frame_00000.pgm",
        "frame_00003.pgm",
        "depth_00000.pgm",
        "gt_trajectory.csv",
        "gt_surfels.csv",
    ] {
        assert_eq!(
            read(&out_a.join(name)),
            read(&out_b.join(name)),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn synth_rejects_zero_frames_and_unknown_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["synth", "--preset", "bending_sheet", "--frames", "0"])
        .arg("--out")
        .arg(tmp.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let status = bin()
        .args(["synth", "--preset", "nope", "--frames", "3"])
        .arg("--out")
        .arg(tmp.path().join("y"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn track_and_eval_round_trip_on_a_static_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let tr = tmp.path().join("tr");
    let ev = tmp.path().join("ev");
    assert!(bin()
        .args(["synth", "--preset", "bending_sheet", "--seed", "5", "--frames", "6"])
        .arg("--out")
        .arg(&ds)
        .args(["--spacing", "120", "--margin", "60", "--max-surfels", "12"])
        .status()
        .unwrap()
        .success());
    let status = bin()
        .args(["track", "--mode", "static"])
        .arg("--dataset")
        .arg(&ds)
        .arg("--out")
        .arg(&tr)
        .args(["--set", "levels=3"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for name in ["results.ndjson", "trajectory.csv", "solver_trace.csv", "manifest.json"] {
        assert!(tr.join(name).exists(), "missing {name}");
    }
    let status = bin()
        .args(["eval"])
        .arg("--results")
        .arg(&tr)
        .arg("--dataset")
        .arg(&ds)
        .arg("--out")
        .arg(&ev)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["frames_processed"], 6);
    let rmse = metrics["mean_surfel_rmse"].as_f64().unwrap();
    let depth = metrics["mean_scene_depth"].as_f64().unwrap();
    assert!(rmse < 0.02 * depth, "rmse {rmse} too large for depth {depth}");
    assert!(metrics["inlier_ratio"].as_f64().unwrap() > 0.9);
}

#[test]
fn deform_mode_reports_tracking_lost_when_everything_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert!(bin()
        .args(["synth", "--preset", "bending_sheet", "--seed", "2", "--frames", "3"])
        .arg("--out")
        .arg(&ds)
        .args(["--spacing", "150", "--margin", "60", "--max-surfels", "8"])
        .status()
        .unwrap()
        .success());
    // An impossible ZNCC threshold rejects every surfel at frame 0, so the
    // joint solve has no inliers left and flags the loss.
    let status = bin()
        .args(["track", "--mode", "deform"])
        .arg("--dataset")
        .arg(&ds)
        .arg("--out")
        .arg(tmp.path().join("tr"))
        .args(["--set", "zncc_threshold=1.01"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn track_rejects_missing_dataset_and_bad_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["track", "--mode", "static"])
        .arg("--dataset")
        .arg(tmp.path().join("missing"))
        .arg("--out")
        .arg(tmp.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let status = bin()
        .args(["track", "--mode", "warp9"])
        .arg("--dataset")
        .arg(tmp.path())
        .arg("--out")
        .arg(tmp.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn check_jacobians_passes_and_detects_the_injected_sign_flip() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["check-jacobians", "--trials", "5"])
        .arg("--out")
        .arg(tmp.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report = std::fs::read_to_string(tmp.path().join("jacobian_report.csv")).unwrap();
    assert!(report.lines().count() > 5);

    let status = bin()
        .args(["check-jacobians", "--trials", "5"])
        .arg("--out")
        .arg(tmp.path())
        .env("SURFEL_TRACK_FLIP_JACOBIAN_SIGN", "1")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));

    let status = bin()
        .args(["check-jacobians", "--trials", "0"])
        .arg("--out")
        .arg(tmp.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn ambiguity_demonstrations_pass() {
    let tmp = tempfile::tempdir().unwrap();
    for which in ["growing", "floating"] {
        let output = bin()
            .args(["ambiguity", "--which", which])
            .arg("--out")
            .arg(tmp.path())
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0), "{which} failed");
    }
    assert!(tmp.path().join("ambiguity_growing.csv").exists());
    assert!(tmp.path().join("ambiguity_floating.csv").exists());
    let status = bin()
        .args(["ambiguity", "--which", "nope"])
        .arg("--out")
        .arg(tmp.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn eval_rmse_arithmetic_on_fabricated_results() {
    // Minimal dataset + results pair: estimates equal to ground truth give
    // zero RMSE and ATE; offsetting one surfel by 1 unit on every frame
    // makes exactly that surfel's RMSE 1.
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    std::fs::create_dir_all(&ds).unwrap();
    let frames = 4;
    let mut gt = String::from("frame,id,px,py,x,y,z,visible\n");
    for f in 0..frames {
        for id in 0..3 {
            gt.push_str(&format!(
                "{f},{id},{},{},{}.0,2.0,500.0,1\n",
                100 + 50 * id,
                120,
                10 * id
            ));
        }
    }
    std::fs::write(ds.join("gt_surfels.csv"), gt).unwrap();
    let mut traj = String::from("frame,tx,ty,tz,qw,qx,qy,qz\n");
    for f in 0..frames {
        traj.push_str(&format!("{f},0,0,0,1,0,0,0\n"));
    }
    std::fs::write(ds.join("gt_trajectory.csv"), traj).unwrap();

    let write_results = |dir: &std::path::Path, offset_surfel_2: f64| {
        std::fs::create_dir_all(dir).unwrap();
        let mut nd = String::new();
        for f in 0..frames {
            let mut surfels = Vec::new();
            for id in 0..3usize {
                let x = 10.0 * id as f64 + if id == 2 { offset_surfel_2 } else { 0.0 };
                surfels.push(format!(
                    "{{\"id\":{id},\"x\":[{x},2.0,500.0],\"t\":[0,0,0],\"r\":[1,0,0,0,1,0,0,0,1],\"f\":[1,0,0,1],\"gain\":1.0,\"bias\":0.0,\"zncc\":1.0,\"inlier\":true,\"rms\":0.0}}"
                ));
            }
            nd.push_str(&format!(
                "{{\"frame\":{f},\"pose\":[1,0,0,0,0,1,0,0,0,0,1,0],\"surfels\":[{}]}}\n",
                surfels.join(",")
            ));
        }
        std::fs::write(dir.join("results.ndjson"), nd).unwrap();
    };

    let exact = tmp.path().join("exact");
    write_results(&exact, 0.0);
    let ev = tmp.path().join("ev_exact");
    assert!(bin()
        .arg("eval")
        .arg("--results")
        .arg(&exact)
        .arg("--dataset")
        .arg(&ds)
        .arg("--out")
        .arg(&ev)
        .status()
        .unwrap()
        .success());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["mean_surfel_rmse"].as_f64().unwrap() < 1e-12);
    assert!(metrics["ate"].as_f64().unwrap() < 1e-12);

    let offset = tmp.path().join("offset");
    write_results(&offset, 1.0);
    let ev2 = tmp.path().join("ev_offset");
    assert!(bin()
        .arg("eval")
        .arg("--results")
        .arg(&offset)
        .arg("--dataset")
        .arg(&ds)
        .arg("--out")
        .arg(&ev2)
        .status()
        .unwrap()
        .success());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev2.join("metrics.json")).unwrap()).unwrap();
    let rmse2 = metrics["per_surfel_rmse"]["2"].as_f64().unwrap();
    assert!((rmse2 - 1.0).abs() < 1e-12, "offset surfel RMSE {rmse2}");
    assert!(metrics["per_surfel_rmse"]["0"].as_f64().unwrap() < 1e-12);
}
