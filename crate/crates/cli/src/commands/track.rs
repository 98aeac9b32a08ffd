//! `track`: run one of the tracking modes over a dataset directory.

use crate::dataset::{
    build_track_config, pose_to_row_major, read_gt_surfels, read_trajectory, DatasetInfo,
    FrameDto, SurfelDto,
};
use crate::manifest::ManifestBuilder;
use std::io::Write;
use std::path::Path;
use surfel_track_core::photometric::init_textured_surfel;
use surfel_track_core::tracker::{track_deformable, track_rigid_map, track_static};
use surfel_track_core::{
    EquilibriumAnchor, FrameResult, ImagePyramid, Pose, Surfel, TrackOutcome,
};

pub fn run(
    dataset_dir: &Path,
    mode: &str,
    out: &Path,
    config_file: Option<&Path>,
    sets: &[String],
) -> Result<u8, String> {
    if !matches!(mode, "static" | "deform" | "rigid_map") {
        return Err(format!(
            "unknown mode '{mode}' (expected static, deform, or rigid_map)"
        ));
    }
    let (config, extras, resolved) = build_track_config(config_file, sets)?;
    let info = DatasetInfo::load(dataset_dir)?;
    let depth0 = info.load_depth0()?;

    let mut manifest = ManifestBuilder::new("track");
    manifest.dataset(dataset_dir);
    manifest.set("mode", mode);
    for (k, v) in &resolved {
        manifest.set(k, v);
    }

    // Build pyramids for every frame up front.
    let mut pyramids = Vec::with_capacity(info.frames);
    for k in 0..info.frames {
        let image = info.load_frame(k)?;
        pyramids.push(
            ImagePyramid::build(image, config.levels)
                .map_err(|e| format!("building pyramid for frame {k}: {e}"))?,
        );
    }

    // Anchors from ground truth when present, else a gradient-rich grid.
    let gt_rows = read_gt_surfels(&dataset_dir.join("gt_surfels.csv")).ok();
    let anchor_pixels: Vec<(usize, usize)> = match &gt_rows {
        Some(rows) => rows.iter().filter(|r| r.frame == 0).map(|r| r.pixel).collect(),
        None => pick_gradient_anchors(pyramids[0].level(0), 72, 40, 48),
    };

    let pose0 = match read_trajectory(&dataset_dir.join("gt_trajectory.csv")) {
        Ok(rows) if !rows.is_empty() => {
            let row = &rows[0];
            let q = row.quaternion;
            Pose::new(quaternion_to_rotation(q), row.translation)
        }
        _ => Pose::identity(),
    };

    let margin = config.half_extent as usize + 2;
    let mut surfels: Vec<Surfel> = Vec::new();
    let mut kept_pixels: Vec<(usize, usize)> = Vec::new();
    let mut skipped = 0usize;
    for pixel in &anchor_pixels {
        if pixel.0 < margin
            || pixel.1 < margin
            || pixel.0 + margin >= info.width
            || pixel.1 + margin >= info.height
        {
            skipped += 1;
            continue;
        }
        match init_textured_surfel(
            surfels.len(),
            &depth0,
            &info.intrinsics,
            *pixel,
            &pyramids[0],
            &pose0,
            config.half_extent,
        ) {
            Ok(surfel) => {
                surfels.push(surfel);
                kept_pixels.push(*pixel);
            }
            Err(_) => skipped += 1,
        }
    }
    if surfels.is_empty() {
        return Err("no surfel could be initialized from the dataset".into());
    }

    let outcome = match mode {
        "static" => track_static(&pyramids, &surfels, &pose0, &info.intrinsics, &config),
        "deform" => {
            let anchors = equilibrium_anchors(&surfels, &kept_pixels, gt_rows.as_deref(), &config, &extras);
            track_deformable(
                &pyramids,
                &surfels,
                &anchors,
                &pose0,
                &info.intrinsics,
                &config,
            )
        }
        _ => track_rigid_map(&pyramids, &surfels, &pose0, &info.intrinsics, &config),
    };

    std::fs::create_dir_all(out).map_err(|e| format!("creating {}: {e}", out.display()))?;
    write_results(out, &surfels, &outcome)?;

    manifest.set("surfels", surfels.len());
    manifest.set("surfels_skipped", skipped);
    manifest.set("frames_processed", outcome.frames_processed());
    if let Some(loss) = outcome.lost {
        manifest.set("lost_at_frame", loss.frame);
        manifest.set("lost_with_inliers", loss.inliers);
    }
    manifest.write(out)?;

    println!(
        "processed {} of {} frames with {} surfels",
        outcome.frames_processed(),
        info.frames,
        surfels.len()
    );
    if let Some(loss) = outcome.lost {
        println!(
            "tracking lost at frame {} ({} inliers remained)",
            loss.frame, loss.inliers
        );
        return Ok(3);
    }
    Ok(0)
}

fn write_results(out: &Path, surfels: &[Surfel], outcome: &TrackOutcome) -> Result<(), String> {
    let ndjson_path = out.join("results.ndjson");
    let mut ndjson = std::io::BufWriter::new(
        std::fs::File::create(&ndjson_path)
            .map_err(|e| format!("creating {}: {e}", ndjson_path.display()))?,
    );
    let mut trajectory = String::from("frame,tx,ty,tz,qw,qx,qy,qz\n");
    let mut solver_csv = String::from("frame,surfel,level,iteration,cost,lambda,step_norm\n");
    for frame in &outcome.frames {
        let dto = frame_to_dto(frame, surfels);
        let line = serde_json::to_string(&dto).map_err(|e| e.to_string())?;
        ndjson
            .write_all(line.as_bytes())
            .and_then(|_| ndjson.write_all(b"\n"))
            .map_err(|e| e.to_string())?;
        trajectory.push_str(&crate::dataset::trajectory_line(frame.frame, &frame.pose));
        for tagged in &frame.reports {
            let who = tagged
                .surfel
                .map(|s| s.to_string())
                .unwrap_or_else(|| "joint".to_string());
            for rec in &tagged.report.trace {
                solver_csv.push_str(&format!(
                    "{},{},{},{},{:.6e},{:.3e},{:.6e}\n",
                    frame.frame, who, tagged.level, rec.iteration, rec.cost, rec.lambda,
                    rec.step_norm
                ));
            }
        }
    }
    ndjson.flush().map_err(|e| e.to_string())?;
    std::fs::write(out.join("trajectory.csv"), trajectory)
        .map_err(|e| format!("writing trajectory.csv: {e}"))?;
    std::fs::write(out.join("solver_trace.csv"), solver_csv)
        .map_err(|e| format!("writing solver_trace.csv: {e}"))?;
    Ok(())
}

fn frame_to_dto(frame: &FrameResult, surfels: &[Surfel]) -> FrameDto {
    FrameDto {
        frame: frame.frame,
        pose: pose_to_row_major(&frame.pose),
        surfels: frame
            .surfels
            .iter()
            .map(|rec| {
                let center = surfels[rec.id].rest_position + rec.state.translation;
                let r = &rec.state.rotation;
                let f = &rec.state.deform;
                SurfelDto {
                    id: rec.id,
                    x: [center.x, center.y, center.z],
                    t: [
                        rec.state.translation.x,
                        rec.state.translation.y,
                        rec.state.translation.z,
                    ],
                    r: [
                        r[(0, 0)],
                        r[(0, 1)],
                        r[(0, 2)],
                        r[(1, 0)],
                        r[(1, 1)],
                        r[(1, 2)],
                        r[(2, 0)],
                        r[(2, 1)],
                        r[(2, 2)],
                    ],
                    f: [f[(0, 0)], f[(0, 1)], f[(1, 0)], f[(1, 1)]],
                    gain: rec.state.gain,
                    bias: rec.state.bias,
                    zncc: rec.zncc,
                    inlier: rec.inlier,
                    rms: rec.residual_rms,
                }
            })
            .collect(),
    }
}

/// Equilibrium anchors for the joint solve: rest positions with an
/// isotropic covariance by default, or per-surfel trajectory means with
/// empirical covariances when requested and ground truth is available.
fn equilibrium_anchors(
    surfels: &[Surfel],
    kept_pixels: &[(usize, usize)],
    gt_rows: Option<&[crate::dataset::GtSurfelRow]>,
    config: &surfel_track_core::TrackConfig,
    extras: &crate::dataset::TrackExtras,
) -> Vec<EquilibriumAnchor> {
    if extras.anchors_from_gt {
        if let Some(rows) = gt_rows {
            let mut pixel_to_id = std::collections::BTreeMap::new();
            for row in rows.iter().filter(|r| r.frame == 0) {
                pixel_to_id.insert(row.pixel, row.id);
            }
            return surfels
                .iter()
                .zip(kept_pixels)
                .map(|(surfel, pixel)| {
                    pixel_to_id
                        .get(pixel)
                        .and_then(|id| {
                            let positions: Vec<_> = rows
                                .iter()
                                .filter(|r| r.id == *id)
                                .map(|r| r.position)
                                .collect();
                            EquilibriumAnchor::from_trajectory(&positions, extras.anchor_floor_sigma)
                        })
                        .unwrap_or_else(|| {
                            EquilibriumAnchor::isotropic(surfel.rest_position, config.sigma_eq)
                        })
                })
                .collect();
        }
        eprintln!("warning: anchors_from_gt requested but no gt_surfels.csv found");
    }
    surfels
        .iter()
        .map(|s| EquilibriumAnchor::isotropic(s.rest_position, config.sigma_eq))
        .collect()
}

fn quaternion_to_rotation(q: [f64; 4]) -> surfel_track_core::Mat3 {
    let [w, x, y, z] = q;
    surfel_track_core::Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Fallback anchor selection when the dataset carries no ground truth:
/// highest gradient magnitude on a coarse grid.
fn pick_gradient_anchors(
    image: &surfel_track_core::GrayImage,
    spacing: usize,
    margin: usize,
    limit: usize,
) -> Vec<(usize, usize)> {
    let mut scored = Vec::new();
    let mut y = margin;
    while y + margin < image.height {
        let mut x = margin;
        while x + margin < image.width {
            if let Ok((gx, gy)) = image.gradient(x as f64, y as f64) {
                scored.push(((gx * gx + gy * gy).sqrt(), (x, y)));
            }
            x += spacing;
        }
        y += spacing;
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    scored.into_iter().take(limit).map(|(_, p)| p).collect()
}
