//! `synth`: render a dataset directory with ground truth.

use crate::dataset::{format_kv, write_gt_surfels, GtSurfelRow};
use crate::manifest::ManifestBuilder;
use std::collections::BTreeMap;
use std::path::Path;
use surfel_track_core::imaging::{save_depth_pgm, save_pgm};
use surfel_track_core::synth::{gt_surfel_track, make_scene, pick_anchors, render_frame};

pub fn run(
    preset: &str,
    seed: u64,
    frames: usize,
    out: &Path,
    spacing: usize,
    margin: usize,
    max_surfels: usize,
) -> Result<u8, String> {
    if frames == 0 {
        return Err("--frames must be at least 1".into());
    }
    let mut manifest = ManifestBuilder::new("synth");
    manifest.seed(seed);
    manifest.set("preset", preset);
    manifest.set("frames", frames);
    manifest.set("spacing", spacing);
    manifest.set("margin", margin);
    manifest.set("max_surfels", max_surfels);

    let scene = make_scene(preset, seed).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(out).map_err(|e| format!("creating {}: {e}", out.display()))?;

    let anchors = pick_anchors(&scene, spacing, margin, max_surfels);
    if anchors.is_empty() {
        return Err("no surfel anchors hit the scene".into());
    }
    let gt = gt_surfel_track(&scene, &anchors, frames).map_err(|e| e.to_string())?;

    let mut depth_scale = 0.0f64;
    for (k, pose) in gt.poses.iter().enumerate() {
        let t = scene.frame_time(k);
        let (image, depth) = render_frame(
            &scene,
            t,
            pose,
            &scene.intrinsics,
            (scene.width, scene.height),
        );
        save_pgm(&image, out.join(format!("frame_{k:05}.pgm"))).map_err(|e| e.to_string())?;
        if k == 0 {
            // Scale chosen so the full 16-bit range covers the scene depth.
            let mut max_depth = 0.0f64;
            for y in 0..depth.height {
                for x in 0..depth.width {
                    if let Some(d) = depth.get(x, y) {
                        max_depth = max_depth.max(d);
                    }
                }
            }
            depth_scale = (max_depth * 1.05 / 65535.0).max(1e-6);
            save_depth_pgm(&depth, out.join("depth_00000.pgm"), depth_scale)
                .map_err(|e| e.to_string())?;
        }
    }

    let mut cfg = BTreeMap::new();
    cfg.insert("fx".into(), scene.intrinsics.fx.to_string());
    cfg.insert("fy".into(), scene.intrinsics.fy.to_string());
    cfg.insert("cx".into(), scene.intrinsics.cx.to_string());
    cfg.insert("cy".into(), scene.intrinsics.cy.to_string());
    cfg.insert("width".into(), scene.width.to_string());
    cfg.insert("height".into(), scene.height.to_string());
    cfg.insert("depth_scale".into(), format!("{depth_scale:.12e}"));
    cfg.insert("frames".into(), frames.to_string());
    cfg.insert("preset".into(), preset.to_string());
    cfg.insert("seed".into(), seed.to_string());
    std::fs::write(out.join("intrinsics.cfg"), format_kv(&cfg))
        .map_err(|e| format!("writing intrinsics.cfg: {e}"))?;

    let mut trajectory = String::from("frame,tx,ty,tz,qw,qx,qy,qz\n");
    for (k, pose) in gt.poses.iter().enumerate() {
        trajectory.push_str(&crate::dataset::trajectory_line(k, pose));
    }
    std::fs::write(out.join("gt_trajectory.csv"), trajectory)
        .map_err(|e| format!("writing gt_trajectory.csv: {e}"))?;

    let mut rows = Vec::new();
    for (ai, anchor) in anchors.iter().enumerate() {
        for (frame, obs) in gt.tracks[ai].iter().enumerate() {
            rows.push(GtSurfelRow {
                frame,
                id: ai,
                pixel: anchor.pixel,
                position: obs.position,
                visible: obs.visible,
            });
        }
    }
    write_gt_surfels(&out.join("gt_surfels.csv"), &rows)?;

    manifest.set("surfels", anchors.len());
    manifest.set("depth_scale", format!("{depth_scale:.12e}"));
    manifest.write(out)?;
    println!(
        "wrote {} frames, {} surfel anchors to {}",
        frames,
        anchors.len(),
        out.display()
    );
    Ok(0)
}
