//! Dataset directory layout, the flat key=value config format, and the
//! serialized result records shared by `track` and `eval`.
//!
//! A dataset directory holds `intrinsics.cfg`, `frame_%05d.pgm`,
//! `depth_00000.pgm` (16-bit, scene units per count in the config),
//! `gt_trajectory.csv`, and `gt_surfels.csv`.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use surfel_track_core::geometry::rotation_to_quaternion;
use surfel_track_core::imaging;
use surfel_track_core::optimizer::LmConfig;
use surfel_track_core::{
    DeformationModel, DepthMap, EquirealForm, GrayImage, Intrinsics, Pose, TrackConfig, Vec3,
};

/// Parse flat `key = value` text; `#` starts a comment, later keys win.
pub fn parse_kv(text: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
    }
    map
}

pub fn format_kv(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

fn get_f64(map: &BTreeMap<String, String>, key: &str) -> Result<f64, String> {
    map.get(key)
        .ok_or_else(|| format!("missing key '{key}' in dataset config"))?
        .parse()
        .map_err(|_| format!("bad value for '{key}'"))
}

fn get_usize(map: &BTreeMap<String, String>, key: &str) -> Result<usize, String> {
    map.get(key)
        .ok_or_else(|| format!("missing key '{key}' in dataset config"))?
        .parse()
        .map_err(|_| format!("bad value for '{key}'"))
}

pub struct DatasetInfo {
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    pub depth_scale: f64,
    pub frames: usize,
    pub dir: PathBuf,
}

impl DatasetInfo {
    pub fn load(dir: &Path) -> Result<Self, String> {
        let cfg_path = dir.join("intrinsics.cfg");
        let text = std::fs::read_to_string(&cfg_path)
            .map_err(|e| format!("cannot read {}: {e}", cfg_path.display()))?;
        let map = parse_kv(&text);
        Ok(DatasetInfo {
            intrinsics: Intrinsics::new(
                get_f64(&map, "fx")?,
                get_f64(&map, "fy")?,
                get_f64(&map, "cx")?,
                get_f64(&map, "cy")?,
            ),
            width: get_usize(&map, "width")?,
            height: get_usize(&map, "height")?,
            depth_scale: get_f64(&map, "depth_scale")?,
            frames: get_usize(&map, "frames")?,
            dir: dir.to_path_buf(),
        })
    }

    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.dir.join(format!("frame_{index:05}.pgm"))
    }

    pub fn load_frame(&self, index: usize) -> Result<GrayImage, String> {
        imaging::load_pgm(self.frame_path(index))
            .map_err(|e| format!("loading frame {index}: {e}"))
    }

    pub fn load_depth0(&self) -> Result<DepthMap, String> {
        imaging::load_depth_pgm(self.dir.join("depth_00000.pgm"), self.depth_scale)
            .map_err(|e| format!("loading depth map: {e}"))
    }
}

/// Per-anchor ground truth row of `gt_surfels.csv`.
#[derive(Debug, Clone, Copy)]
pub struct GtSurfelRow {
    pub frame: usize,
    pub id: usize,
    pub pixel: (usize, usize),
    pub position: Vec3,
    pub visible: bool,
}

pub fn write_gt_surfels(path: &Path, rows: &[GtSurfelRow]) -> Result<(), String> {
    let mut out = String::from("frame,id,px,py,x,y,z,visible\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.9},{:.9},{:.9},{}\n",
            r.frame,
            r.id,
            r.pixel.0,
            r.pixel.1,
            r.position.x,
            r.position.y,
            r.position.z,
            r.visible as u8
        ));
    }
    std::fs::write(path, out).map_err(|e| format!("writing {}: {e}", path.display()))
}

pub fn read_gt_surfels(path: &Path) -> Result<Vec<GtSurfelRow>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(format!("{}:{}: expected 8 fields", path.display(), i + 1));
        }
        let parse =
            |s: &str| -> Result<f64, String> { s.parse().map_err(|_| format!("bad number {s}")) };
        rows.push(GtSurfelRow {
            frame: fields[0].parse().map_err(|_| "bad frame".to_string())?,
            id: fields[1].parse().map_err(|_| "bad id".to_string())?,
            pixel: (
                fields[2].parse().map_err(|_| "bad px".to_string())?,
                fields[3].parse().map_err(|_| "bad py".to_string())?,
            ),
            position: Vec3::new(parse(fields[4])?, parse(fields[5])?, parse(fields[6])?),
            visible: fields[7].trim() == "1",
        });
    }
    Ok(rows)
}

/// One `frame,tx,ty,tz,qw,qx,qy,qz` row (world-to-camera transform).
pub fn trajectory_line(frame: usize, pose: &Pose) -> String {
    let q = rotation_to_quaternion(&pose.rotation);
    format!(
        "{},{:.9},{:.9},{:.9},{:.12},{:.12},{:.12},{:.12}\n",
        frame, pose.translation.x, pose.translation.y, pose.translation.z, q[0], q[1], q[2], q[3]
    )
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryRow {
    pub frame: usize,
    pub translation: Vec3,
    pub quaternion: [f64; 4],
}

impl TrajectoryRow {
    /// Camera center implied by the stored world-to-camera transform:
    /// `-R^T t`, with the inverse rotation applied via the conjugate
    /// quaternion.
    pub fn center(&self) -> Vec3 {
        let [w, x, y, z] = self.quaternion;
        let u = Vec3::new(x, y, z);
        let t = self.translation;
        let uxt = u.cross(&t);
        -(t - uxt * (2.0 * w) + u.cross(&uxt) * 2.0)
    }
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(format!("{}: expected 8 fields", path.display()));
        }
        let num =
            |s: &str| -> Result<f64, String> { s.parse().map_err(|_| format!("bad number {s}")) };
        rows.push(TrajectoryRow {
            frame: fields[0].parse().map_err(|_| "bad frame".to_string())?,
            translation: Vec3::new(num(fields[1])?, num(fields[2])?, num(fields[3])?),
            quaternion: [num(fields[4])?, num(fields[5])?, num(fields[6])?, num(fields[7])?],
        });
    }
    Ok(rows)
}

// --------------------------------------------------------------------------
// Newline-delimited JSON records written by `track` and consumed by `eval`.

#[derive(Serialize, Deserialize)]
pub struct SurfelDto {
    pub id: usize,
    /// Estimated world position of the surfel center.
    pub x: [f64; 3],
    pub t: [f64; 3],
    pub r: [f64; 9],
    pub f: [f64; 4],
    pub gain: f64,
    pub bias: f64,
    pub zncc: f64,
    pub inlier: bool,
    pub rms: f64,
}

#[derive(Serialize, Deserialize)]
pub struct FrameDto {
    pub frame: usize,
    /// World-to-camera transform, 3x4 row-major.
    pub pose: [f64; 12],
    pub surfels: Vec<SurfelDto>,
}

impl FrameDto {
    pub fn pose_struct(&self) -> Pose {
        let p = &self.pose;
        Pose::new(
            surfel_track_core::Mat3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]),
            Vec3::new(p[3], p[7], p[11]),
        )
    }
}

pub fn pose_to_row_major(pose: &Pose) -> [f64; 12] {
    let r = &pose.rotation;
    let t = &pose.translation;
    [
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        t.x,
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        t.y,
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
        t.z,
    ]
}

pub fn read_results(path: &Path) -> Result<Vec<FrameDto>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| serde_json::from_str(line).map_err(|e| format!("bad result line: {e}")))
        .collect()
}

// --------------------------------------------------------------------------
// Tracking configuration from key=value text plus --set overrides.

/// Command-level options that select how the tracker is driven rather than
/// how it optimizes.
pub struct TrackExtras {
    /// Build equilibrium anchors from the ground-truth trajectory means and
    /// covariances instead of the rest positions.
    pub anchors_from_gt: bool,
    /// Standard-deviation floor added to empirical anchor covariances.
    pub anchor_floor_sigma: f64,
}

impl Default for TrackExtras {
    fn default() -> Self {
        TrackExtras {
            anchors_from_gt: false,
            anchor_floor_sigma: 10.0,
        }
    }
}

pub fn build_track_config(
    file: Option<&Path>,
    sets: &[String],
) -> Result<(TrackConfig, TrackExtras, BTreeMap<String, String>), String> {
    let mut map = BTreeMap::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        map.extend(parse_kv(&text));
    }
    for set in sets {
        let (key, value) = set
            .split_once('=')
            .ok_or_else(|| format!("--set expects key=value, got '{set}'"))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }

    let mut config = TrackConfig::default();
    let mut extras = TrackExtras::default();
    for (key, value) in &map {
        match key.as_str() {
            "anchors_from_gt" => extras.anchors_from_gt = parse_bool(value)?,
            "anchor_floor_sigma" => {
                extras.anchor_floor_sigma =
                    value.parse().map_err(|_| format!("bad number '{value}'"))?
            }
            _ => apply_config_key(&mut config, key, value)?,
        }
    }
    let mut resolved = BTreeMap::new();
    snapshot_config(&config, &mut resolved);
    resolved.insert("anchors_from_gt".into(), extras.anchors_from_gt.to_string());
    resolved.insert(
        "anchor_floor_sigma".into(),
        extras.anchor_floor_sigma.to_string(),
    );
    Ok((config, extras, resolved))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(format!("expected bool, got '{other}'")),
    }
}

fn apply_lm_key(lm: &mut LmConfig, field: &str, value: &str) -> Result<(), String> {
    let num = || -> Result<f64, String> {
        value.parse().map_err(|_| format!("bad number '{value}'"))
    };
    match field {
        "lambda0" => lm.lambda0 = num()?,
        "lambda_up" => lm.lambda_up = num()?,
        "lambda_down" => lm.lambda_down = num()?,
        "min_lambda_early" => lm.min_lambda_early = num()?,
        "early_phase_iters" => {
            lm.early_phase_iters = value.parse().map_err(|_| "bad integer".to_string())?
        }
        "max_iters" => lm.max_iters = value.parse().map_err(|_| "bad integer".to_string())?,
        "gradient_tol" => lm.gradient_tol = num()?,
        "step_tol" => lm.step_tol = num()?,
        "cost_tol" => lm.cost_tol = num()?,
        other => return Err(format!("unknown LM key '{other}'")),
    }
    Ok(())
}

fn apply_config_key(config: &mut TrackConfig, key: &str, value: &str) -> Result<(), String> {
    let num = || -> Result<f64, String> {
        value.parse().map_err(|_| format!("bad number '{value}'"))
    };
    match key {
        "model" => {
            config.model = DeformationModel::parse(value)
                .ok_or_else(|| format!("unknown deformation model '{value}'"))?
        }
        "equireal_form" => {
            config.equireal_form = match value {
                "printed" => EquirealForm::AsPrinted,
                "unit_det" => EquirealForm::UnitDeterminant,
                other => return Err(format!("unknown equireal form '{other}'")),
            }
        }
        "omega_iso" => config.omega_iso = num()?,
        "omega_eq" => config.omega_eq = num()?,
        "sigma_eq" => config.sigma_eq = num()?,
        "levels" => config.levels = value.parse().map_err(|_| "bad integer".to_string())?,
        "half_extent" => {
            config.half_extent = value.parse().map_err(|_| "bad integer".to_string())?
        }
        "zncc_threshold" => config.zncc_threshold = num()?,
        "saturation_cap" => config.saturation_cap = num()?,
        "compensate_illumination" => config.compensate_illumination = parse_bool(value)?,
        "optimize_gain_bias" => config.optimize_gain_bias = parse_bool(value)?,
        "reaccept_outliers" => config.reaccept_outliers = parse_bool(value)?,
        "min_valid_fraction" => config.min_valid_fraction = num()?,
        other => {
            if let Some(field) = other.strip_prefix("lm.") {
                apply_lm_key(&mut config.lm, field, value)?;
            } else if let Some(field) = other.strip_prefix("lm_coarse.") {
                apply_lm_key(&mut config.lm_coarse, field, value)?;
            } else {
                return Err(format!("unknown config key '{other}'"));
            }
        }
    }
    Ok(())
}

fn snapshot_config(config: &TrackConfig, out: &mut BTreeMap<String, String>) {
    let model = match config.model {
        DeformationModel::Isometry => "isometry",
        DeformationModel::Conformal => "conformal",
        DeformationModel::Equireal => "equireal",
        DeformationModel::General => "general",
    };
    out.insert("model".into(), model.into());
    out.insert(
        "equireal_form".into(),
        match config.equireal_form {
            EquirealForm::AsPrinted => "printed".into(),
            EquirealForm::UnitDeterminant => "unit_det".into(),
        },
    );
    out.insert("omega_iso".into(), config.omega_iso.to_string());
    out.insert("omega_eq".into(), config.omega_eq.to_string());
    out.insert("sigma_eq".into(), config.sigma_eq.to_string());
    out.insert("levels".into(), config.levels.to_string());
    out.insert("half_extent".into(), config.half_extent.to_string());
    out.insert("zncc_threshold".into(), config.zncc_threshold.to_string());
    out.insert("saturation_cap".into(), config.saturation_cap.to_string());
    out.insert(
        "compensate_illumination".into(),
        config.compensate_illumination.to_string(),
    );
    out.insert(
        "optimize_gain_bias".into(),
        config.optimize_gain_bias.to_string(),
    );
    out.insert(
        "reaccept_outliers".into(),
        config.reaccept_outliers.to_string(),
    );
    out.insert(
        "min_valid_fraction".into(),
        config.min_valid_fraction.to_string(),
    );
    out.insert("lm.max_iters".into(), config.lm.max_iters.to_string());
    out.insert(
        "lm_coarse.max_iters".into(),
        config.lm_coarse.max_iters.to_string(),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parser_handles_comments_and_overrides() {
        let map = parse_kv("# header\nfx = 500\nfy = 480 # trailing\n\nfx = 510\n");
        assert_eq!(map.get("fx").unwrap(), "510");
        assert_eq!(map.get("fy").unwrap(), "480");
    }

    #[test]
    fn track_config_overrides_apply_in_order() {
        let (config, _, snapshot) = build_track_config(
            None,
            &[
                "model=general".to_string(),
                "levels=2".to_string(),
                "lm.max_iters=7".to_string(),
                "levels=4".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.model, DeformationModel::General);
        assert_eq!(config.levels, 4);
        assert_eq!(config.lm.max_iters, 7);
        assert_eq!(snapshot.get("levels").unwrap(), "4");
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        assert!(build_track_config(None, &["nope=1".to_string()]).is_err());
    }

    #[test]
    fn trajectory_row_center_matches_pose_center() {
        let pose = Pose::new(
            surfel_track_core::so3_exp(&Vec3::new(0.2, -0.3, 0.5)),
            Vec3::new(1.0, -2.0, 3.0),
        );
        let line = trajectory_line(4, &pose);
        let fields: Vec<f64> = line
            .trim()
            .split(',')
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect();
        let row = TrajectoryRow {
            frame: 4,
            translation: Vec3::new(fields[0], fields[1], fields[2]),
            quaternion: [fields[3], fields[4], fields[5], fields[6]],
        };
        let center = row.center();
        let expected = pose.center();
        assert!((center - expected).norm() < 1e-9);
    }
}
