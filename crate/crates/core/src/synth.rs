//! Synthetic deformable-scene generator and renderer.
//!
//! Scenes are built from analytic primitives (plane, cylindrical bend of a
//! plane, sphere cap) carrying procedural band-limited textures, each with a
//! time-dependent rigid motion and bend amplitude, plus a global illumination
//! schedule and an optional occluder. Rendering is exact ray casting against
//! the primitives, so ground-truth surfel positions and tangent bases come
//! from the same analytic surfaces the images were rendered from.

use crate::geometry::{se3_exp, so3_exp, Mat32, Pose, Vec3, Vec6};
use crate::imaging::{DepthMap, GrayImage, Intrinsics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown scene preset '{0}'")]
    UnknownPreset(String),
    #[error("anchor ({a}, {b}) lies outside the surface of body {body}")]
    AnchorOffSurface { body: usize, a: f64, b: f64 },
}

/// Procedural grayscale texture sampled bilinearly over the unit square.
#[derive(Debug, Clone)]
pub struct Texture {
    size: usize,
    data: Vec<f64>,
}

impl Texture {
    /// Band-limited value noise: a few octaves of smoothstep-interpolated
    /// random lattices, normalized to `[lo, hi]`. Octave amplitudes halve.
    pub fn value_noise(
        rng: &mut ChaCha8Rng,
        size: usize,
        base_cells: usize,
        octaves: usize,
        lo: f64,
        hi: f64,
    ) -> Texture {
        Self::value_noise_weighted(rng, size, base_cells, octaves, 0.5, lo, hi)
    }

    /// Value noise with a configurable per-octave amplitude gain; gains
    /// above 1 make the fine octaves dominate, which narrows photometric
    /// convergence basins.
    pub fn value_noise_weighted(
        rng: &mut ChaCha8Rng,
        size: usize,
        base_cells: usize,
        octaves: usize,
        octave_gain: f64,
        lo: f64,
        hi: f64,
    ) -> Texture {
        let amplitudes: Vec<f64> = (0..octaves).map(|o| octave_gain.powi(o as i32)).collect();
        Self::value_noise_spectrum(rng, size, base_cells, &amplitudes, lo, hi)
    }

    /// Value noise with one explicit amplitude per octave, octave `o` being
    /// a lattice of `base_cells * 2^o` cells.
    pub fn value_noise_spectrum(
        rng: &mut ChaCha8Rng,
        size: usize,
        base_cells: usize,
        amplitudes: &[f64],
        lo: f64,
        hi: f64,
    ) -> Texture {
        let mut data = vec![0.0f64; size * size];
        let mut cells = base_cells;
        for &amplitude in amplitudes {
            let n = cells + 1;
            let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            for y in 0..size {
                let v = y as f64 / (size - 1) as f64 * cells as f64;
                let j = (v.floor() as usize).min(cells - 1);
                let fv = smoothstep(v - j as f64);
                for x in 0..size {
                    let u = x as f64 / (size - 1) as f64 * cells as f64;
                    let i = (u.floor() as usize).min(cells - 1);
                    let fu = smoothstep(u - i as f64);
                    let l00 = lattice[j * n + i];
                    let l10 = lattice[j * n + i + 1];
                    let l01 = lattice[(j + 1) * n + i];
                    let l11 = lattice[(j + 1) * n + i + 1];
                    let val = l00 * (1.0 - fu) * (1.0 - fv)
                        + l10 * fu * (1.0 - fv)
                        + l01 * (1.0 - fu) * fv
                        + l11 * fu * fv;
                    data[y * size + x] += amplitude * val;
                }
            }
            cells *= 2;
        }
        let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = nonzero_range(max - min);
        for v in &mut data {
            *v = lo + (hi - lo) * (*v - min) / scale;
        }
        Texture { size, data }
    }

    /// Bilinear sample at `(s, t)` in the unit square (clamped).
    pub fn sample(&self, s: f64, t: f64) -> f64 {
        let x = (s.clamp(0.0, 1.0)) * (self.size - 1) as f64;
        let y = (t.clamp(0.0, 1.0)) * (self.size - 1) as f64;
        let x0 = (x.floor() as usize).min(self.size - 2);
        let y0 = (y.floor() as usize).min(self.size - 2);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let at = |i: usize, j: usize| self.data[j * self.size + i];
        at(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + at(x0 + 1, y0) * fx * (1.0 - fy)
            + at(x0, y0 + 1) * (1.0 - fx) * fy
            + at(x0 + 1, y0 + 1) * fx * fy
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn nonzero_range(range: f64) -> f64 {
    if range < 1e-12 {
        1.0
    } else {
        range
    }
}

/// Analytic surface primitive, parametrized by arc-length-like local
/// coordinates `(a, b)` bounded by the body's half extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurfaceKind {
    Plane,
    /// Plane bent onto a cylinder of curvature `kappa(t)` around the
    /// `b`-axis; `a` stays an exact arc length, so the bend is isometric.
    CylinderBend,
    /// Spherical cap of the given radius; `(a, b)` are great-circle arcs.
    SphereCap { radius: f64 },
}

const FLAT_KAPPA: f64 = 1e-9;

impl SurfaceKind {
    /// Body-frame point at local coordinates `(a, b)` and curvature `kappa`.
    pub fn point(&self, a: f64, b: f64, kappa: f64) -> Vec3 {
        match self {
            SurfaceKind::Plane => Vec3::new(a, b, 0.0),
            SurfaceKind::CylinderBend => {
                if kappa.abs() < FLAT_KAPPA {
                    Vec3::new(a, b, 0.0)
                } else {
                    let ka = kappa * a;
                    Vec3::new(ka.sin() / kappa, b, (1.0 - ka.cos()) / kappa)
                }
            }
            SurfaceKind::SphereCap { radius } => {
                let phi = a / radius;
                let psi = b / radius;
                Vec3::new(
                    radius * psi.cos() * phi.sin(),
                    radius * psi.sin(),
                    radius * (1.0 - psi.cos() * phi.cos()),
                )
            }
        }
    }

    /// Body-frame tangents `d point / d (a, b)`.
    pub fn tangents(&self, a: f64, b: f64, kappa: f64) -> Mat32 {
        match self {
            SurfaceKind::Plane => Mat32::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0),
            SurfaceKind::CylinderBend => {
                if kappa.abs() < FLAT_KAPPA {
                    Mat32::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)
                } else {
                    let ka = kappa * a;
                    Mat32::new(ka.cos(), 0.0, 0.0, 1.0, ka.sin(), 0.0)
                }
            }
            SurfaceKind::SphereCap { radius } => {
                let phi = a / radius;
                let psi = b / radius;
                Mat32::new(
                    psi.cos() * phi.cos(),
                    -psi.sin() * phi.sin(),
                    0.0,
                    psi.cos(),
                    psi.cos() * phi.sin(),
                    psi.sin() * phi.cos(),
                )
            }
        }
    }

    /// Nearest ray intersection in the body frame within the half extents.
    /// Returns `(ray depth, a, b)`.
    fn intersect(
        &self,
        origin: &Vec3,
        dir: &Vec3,
        kappa: f64,
        half_w: f64,
        half_h: f64,
    ) -> Option<(f64, f64, f64)> {
        const S_MIN: f64 = 1e-9;
        match self {
            SurfaceKind::Plane => {
                plane_hit(origin, dir, half_w, half_h).filter(|(s, _, _)| *s > S_MIN)
            }
            SurfaceKind::CylinderBend => {
                if kappa.abs() < FLAT_KAPPA {
                    return plane_hit(origin, dir, half_w, half_h).filter(|(s, _, _)| *s > S_MIN);
                }
                // Circle |(x, z) - (0, 1/kappa)| = 1/kappa in the x-z plane.
                let r = 1.0 / kappa;
                let qa = dir.x * dir.x + dir.z * dir.z;
                let qb = 2.0 * (origin.x * dir.x + (origin.z - r) * dir.z);
                let qc = origin.x * origin.x + (origin.z - r) * (origin.z - r) - r * r;
                let disc = qb * qb - 4.0 * qa * qc;
                if disc <= 0.0 || qa == 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let mut best: Option<(f64, f64, f64)> = None;
                for s in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)] {
                    if s <= S_MIN {
                        continue;
                    }
                    let p = origin + dir * s;
                    let a = (kappa * p.x).atan2(1.0 - kappa * p.z) / kappa;
                    if a.abs() <= half_w && p.y.abs() <= half_h {
                        if best.is_none() || s < best.unwrap().0 {
                            best = Some((s, a, p.y));
                        }
                        break; // roots are sorted ascending
                    }
                }
                best
            }
            SurfaceKind::SphereCap { radius } => {
                let center = Vec3::new(0.0, 0.0, *radius);
                let oc = origin - center;
                let qa = dir.norm_squared();
                let qb = 2.0 * oc.dot(dir);
                let qc = oc.norm_squared() - radius * radius;
                let disc = qb * qb - 4.0 * qa * qc;
                if disc <= 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                for s in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)] {
                    if s <= S_MIN {
                        continue;
                    }
                    let p = origin + dir * s;
                    let n = (p - center) / *radius;
                    let psi = n.y.clamp(-1.0, 1.0).asin();
                    let phi = n.x.atan2(-n.z);
                    let (a, b) = (phi * radius, psi * radius);
                    if a.abs() <= half_w && b.abs() <= half_h {
                        return Some((s, a, b));
                    }
                }
                None
            }
        }
    }
}

fn plane_hit(origin: &Vec3, dir: &Vec3, half_w: f64, half_h: f64) -> Option<(f64, f64, f64)> {
    if dir.z.abs() < 1e-15 {
        return None;
    }
    let s = -origin.z / dir.z;
    let a = origin.x + s * dir.x;
    let b = origin.y + s * dir.y;
    (a.abs() <= half_w && b.abs() <= half_h).then_some((s, a, b))
}

/// Smooth rigid-motion schedule of a body (body frame to world frame).
#[derive(Debug, Clone)]
pub struct MotionSchedule {
    pub base: Pose,
    pub linear_velocity: Vec3,
    /// Sine oscillation amplitude (zero displacement at t = 0).
    pub osc_amplitude: Vec3,
    /// Cosine oscillation amplitude, applied as `cos - 1` so the schedule
    /// still starts at rest; combined with the sine term this makes
    /// elliptical slides whose velocity never vanishes.
    pub osc_amplitude_cos: Vec3,
    pub osc_period: f64,
    pub rot_axis: Vec3,
    pub rot_rate: f64,
}

impl MotionSchedule {
    pub fn at_rest(base: Pose) -> Self {
        MotionSchedule {
            base,
            linear_velocity: Vec3::zeros(),
            osc_amplitude: Vec3::zeros(),
            osc_amplitude_cos: Vec3::zeros(),
            osc_period: 50.0,
            rot_axis: Vec3::z(),
            rot_rate: 0.0,
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        let phase = 2.0 * std::f64::consts::PI * t / self.osc_period;
        let delta = Pose::new(
            so3_exp(&(self.rot_axis * (self.rot_rate * t))),
            self.linear_velocity * t
                + self.osc_amplitude * phase.sin()
                + self.osc_amplitude_cos * (phase.cos() - 1.0),
        );
        delta.compose(&self.base)
    }

    pub fn is_static(&self) -> bool {
        self.linear_velocity.norm() == 0.0
            && self.osc_amplitude.norm() == 0.0
            && self.osc_amplitude_cos.norm() == 0.0
            && self.rot_rate == 0.0
    }
}

/// Time-dependent curvature of a bendable body.
#[derive(Debug, Clone)]
pub struct BendSchedule {
    pub base: f64,
    pub amplitude: f64,
    pub period: f64,
}

impl BendSchedule {
    pub fn flat() -> Self {
        BendSchedule {
            base: 0.0,
            amplitude: 0.0,
            period: 50.0,
        }
    }

    pub fn curvature(&self, t: f64) -> f64 {
        let swing = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t / self.period).cos());
        self.base + self.amplitude * swing
    }

    pub fn is_constant(&self) -> bool {
        self.amplitude == 0.0
    }
}

/// One textured, moving, optionally bending surface.
#[derive(Debug, Clone)]
pub struct Body {
    pub surface: SurfaceKind,
    pub half_width: f64,
    pub half_height: f64,
    pub texture: Texture,
    pub motion: MotionSchedule,
    pub bend: BendSchedule,
}

impl Body {
    fn tex_coords(&self, a: f64, b: f64) -> (f64, f64) {
        (
            (a + self.half_width) / (2.0 * self.half_width),
            (b + self.half_height) / (2.0 * self.half_height),
        )
    }
}

/// Camera trajectory as a screw motion applied on top of a base pose
/// (world-to-camera).
#[derive(Debug, Clone)]
pub struct CameraSchedule {
    pub base: Pose,
    pub twist_rate: Vec6,
}

impl CameraSchedule {
    pub fn fixed(base: Pose) -> Self {
        CameraSchedule {
            base,
            twist_rate: Vec6::zeros(),
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        se3_exp(&(self.twist_rate * t)).compose(&self.base)
    }
}

/// Global gain/bias ramp over the nominal sequence duration.
#[derive(Debug, Clone)]
pub struct IlluminationSchedule {
    pub gain_ramp: f64,
    pub bias_ramp: f64,
    pub duration: f64,
}

impl IlluminationSchedule {
    pub fn none(duration: f64) -> Self {
        IlluminationSchedule {
            gain_ramp: 0.0,
            bias_ramp: 0.0,
            duration,
        }
    }

    pub fn gain(&self, t: f64) -> f64 {
        1.0 + self.gain_ramp * (t / self.duration).clamp(0.0, 1.0)
    }

    pub fn bias(&self, t: f64) -> f64 {
        self.bias_ramp * (t / self.duration).clamp(0.0, 1.0)
    }
}

/// A full synthetic scene: bodies, camera path, illumination, image
/// geometry, and the frame indices dropped to mimic temporal discontinuities.
#[derive(Debug, Clone)]
pub struct Scene {
    pub bodies: Vec<Body>,
    pub occluder: Option<Body>,
    pub camera: CameraSchedule,
    pub illumination: IlluminationSchedule,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    pub nominal_frames: usize,
    pub dropped_frames: Vec<usize>,
    pub preset: String,
    pub seed: u64,
}

impl Scene {
    /// Scene time of dataset frame `k`, skipping dropped indices.
    pub fn frame_time(&self, k: usize) -> f64 {
        let mut t = 0usize;
        let mut remaining = k;
        loop {
            if !self.dropped_frames.contains(&t) {
                if remaining == 0 {
                    return t as f64;
                }
                remaining -= 1;
            }
            t += 1;
        }
    }

    pub fn camera_pose(&self, t: f64) -> Pose {
        self.camera.pose(t)
    }
}

/// Which surface a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyRef {
    Body(usize),
    Occluder,
}

#[derive(Debug, Clone, Copy)]
pub struct RayHit {
    pub body: BodyRef,
    /// Depth along the camera optical axis (= Z in the camera frame).
    pub depth: f64,
    pub a: f64,
    pub b: f64,
}

struct PreparedBody<'a> {
    body: &'a Body,
    world_to_body: Pose,
    kappa: f64,
    reference: BodyRef,
}

fn prepare_bodies<'a>(scene: &'a Scene, t: f64) -> Vec<PreparedBody<'a>> {
    let mut out: Vec<PreparedBody<'a>> = scene
        .bodies
        .iter()
        .enumerate()
        .map(|(i, body)| PreparedBody {
            body,
            world_to_body: body.motion.pose(t).inverse(),
            kappa: body.bend.curvature(t),
            reference: BodyRef::Body(i),
        })
        .collect();
    if let Some(occ) = &scene.occluder {
        out.push(PreparedBody {
            body: occ,
            world_to_body: occ.motion.pose(t).inverse(),
            kappa: occ.bend.curvature(t),
            reference: BodyRef::Occluder,
        });
    }
    out
}

fn cast_prepared(
    prepared: &[PreparedBody<'_>],
    origin_w: &Vec3,
    dir_w: &Vec3,
) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    for pb in prepared {
        let o = pb.world_to_body.apply(origin_w);
        let d = pb.world_to_body.rotation * dir_w;
        if let Some((s, a, b)) =
            pb.body
                .surface
                .intersect(&o, &d, pb.kappa, pb.body.half_width, pb.body.half_height)
        {
            if best.is_none() || s < best.unwrap().depth {
                best = Some(RayHit {
                    body: pb.reference,
                    depth: s,
                    a,
                    b,
                });
            }
        }
    }
    best
}

/// Cast the camera ray through pixel `(x, y)` at scene time `t`. The ray
/// parameter of the returned hit equals the depth in the camera frame.
pub fn cast_ray(scene: &Scene, t: f64, pose: &Pose, k: &Intrinsics, x: f64, y: f64) -> Option<RayHit> {
    let prepared = prepare_bodies(scene, t);
    let cam_to_world = pose.inverse();
    let origin = cam_to_world.translation;
    let (xn, yn) = k.normalized(x, y);
    let dir = cam_to_world.rotation * Vec3::new(xn, yn, 1.0);
    cast_prepared(&prepared, &origin, &dir)
}

/// Render one frame: grayscale image plus a depth map (invalid on background
/// pixels, which render as constant 0.5).
pub fn render_frame(
    scene: &Scene,
    t: f64,
    pose: &Pose,
    k: &Intrinsics,
    size: (usize, usize),
) -> (GrayImage, DepthMap) {
    let (width, height) = size;
    let prepared = prepare_bodies(scene, t);
    let cam_to_world = pose.inverse();
    let origin = cam_to_world.translation;
    let gain = scene.illumination.gain(t);
    let bias = scene.illumination.bias(t);

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut intensities = Vec::with_capacity(width);
            let mut depths = Vec::with_capacity(width);
            for x in 0..width {
                let (xn, yn) = k.normalized(x as f64, y as f64);
                let dir = cam_to_world.rotation * Vec3::new(xn, yn, 1.0);
                match cast_prepared(&prepared, &origin, &dir) {
                    Some(hit) => {
                        let body = match hit.body {
                            BodyRef::Body(i) => &scene.bodies[i],
                            BodyRef::Occluder => scene.occluder.as_ref().unwrap(),
                        };
                        let (s, tt) = body.tex_coords(hit.a, hit.b);
                        let raw = body.texture.sample(s, tt);
                        intensities.push((gain * raw + bias).clamp(0.0, 1.0));
                        depths.push(hit.depth);
                    }
                    None => {
                        intensities.push(0.5);
                        depths.push(0.0);
                    }
                }
            }
            (intensities, depths)
        })
        .collect();

    let mut image = Vec::with_capacity(width * height);
    let mut depth = Vec::with_capacity(width * height);
    for (i, d) in rows {
        image.extend(i);
        depth.extend(d);
    }
    (
        GrayImage::from_raw(width, height, image),
        DepthMap::from_fn(width, height, |x, y| {
            let d = depth[y * width + x];
            (d > 0.0).then_some(d)
        }),
    )
}

/// A surfel anchor pinned to a body surface point.
#[derive(Debug, Clone, Copy)]
pub struct SurfelAnchor {
    pub body: usize,
    pub a: f64,
    pub b: f64,
    pub pixel: (usize, usize),
}

/// Ground-truth camera poses and per-anchor tracks, exact by construction.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub poses: Vec<Pose>,
    /// `tracks[anchor][frame]`.
    pub tracks: Vec<Vec<GtObservation>>,
}

#[derive(Debug, Clone, Copy)]
pub struct GtObservation {
    pub position: Vec3,
    pub tangents: Mat32,
    pub visible: bool,
}

/// Resolve the body surface point seen through a pixel at frame 0.
pub fn anchor_from_pixel(scene: &Scene, pixel: (usize, usize)) -> Option<SurfelAnchor> {
    let pose = scene.camera_pose(scene.frame_time(0));
    let hit = cast_ray(
        scene,
        scene.frame_time(0),
        &pose,
        &scene.intrinsics,
        pixel.0 as f64,
        pixel.1 as f64,
    )?;
    match hit.body {
        BodyRef::Body(i) => Some(SurfelAnchor {
            body: i,
            a: hit.a,
            b: hit.b,
            pixel,
        }),
        BodyRef::Occluder => None,
    }
}

/// Pick anchors on a pixel grid, skipping background and occluder hits.
pub fn pick_anchors(scene: &Scene, spacing: usize, margin: usize, limit: usize) -> Vec<SurfelAnchor> {
    let mut anchors = Vec::new();
    let mut y = margin;
    while y + margin < scene.height && anchors.len() < limit {
        let mut x = margin;
        while x + margin < scene.width && anchors.len() < limit {
            if let Some(anchor) = anchor_from_pixel(scene, (x, y)) {
                anchors.push(anchor);
            }
            x += spacing;
        }
        y += spacing;
    }
    anchors
}

/// Exact ground-truth tracks of the anchors over `frames` dataset frames.
pub fn gt_surfel_track(
    scene: &Scene,
    anchors: &[SurfelAnchor],
    frames: usize,
) -> Result<GroundTruth, SynthError> {
    for anchor in anchors {
        let body = &scene.bodies[anchor.body];
        if anchor.a.abs() > body.half_width || anchor.b.abs() > body.half_height {
            return Err(SynthError::AnchorOffSurface {
                body: anchor.body,
                a: anchor.a,
                b: anchor.b,
            });
        }
    }
    let mut poses = Vec::with_capacity(frames);
    let times: Vec<f64> = (0..frames).map(|k| scene.frame_time(k)).collect();
    for &t in &times {
        poses.push(scene.camera_pose(t));
    }
    let mut tracks = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let body = &scene.bodies[anchor.body];
        let mut track = Vec::with_capacity(frames);
        for (fi, &t) in times.iter().enumerate() {
            let kappa = body.bend.curvature(t);
            let body_to_world = body.motion.pose(t);
            let position = body_to_world.apply(&body.surface.point(anchor.a, anchor.b, kappa));
            let tangents = body_to_world.rotation * body.surface.tangents(anchor.a, anchor.b, kappa);
            let visible = visibility(scene, t, &poses[fi], anchor.body, &position);
            track.push(GtObservation {
                position,
                tangents,
                visible,
            });
        }
        tracks.push(track);
    }
    Ok(GroundTruth { poses, tracks })
}

fn visibility(scene: &Scene, t: f64, pose: &Pose, body: usize, position: &Vec3) -> bool {
    let cam = pose.apply(position);
    let Ok((x, y)) = scene.intrinsics.project(&cam) else {
        return false;
    };
    if x < 1.0 || y < 1.0 || x > (scene.width - 2) as f64 || y > (scene.height - 2) as f64 {
        return false;
    }
    match cast_ray(scene, t, pose, &scene.intrinsics, x, y) {
        Some(hit) => {
            hit.body == BodyRef::Body(body) && (hit.depth - cam.z).abs() <= 1e-6 * cam.z.max(1.0)
        }
        None => false,
    }
}

pub const PRESETS: &[&str] = &[
    "rigid_plane",
    "bending_sheet",
    "two_bodies_sliding",
    "illumination_drift",
    "occlusion",
    "missing_frames",
];

/// Deterministic scene for a preset and seed. Scene units are millimetres;
/// all presets image 640x480 with a 500 px focal length.
pub fn make_scene(preset: &str, seed: u64) -> Result<Scene, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f37_5a86);
    let intrinsics = Intrinsics::new(500.0, 500.0, 320.0, 240.0);
    let frames = 50usize;
    let base_scene = |bodies: Vec<Body>, rng: &mut ChaCha8Rng| Scene {
        bodies,
        occluder: None,
        camera: CameraSchedule::fixed(Pose::identity()),
        illumination: IlluminationSchedule::none(frames as f64),
        intrinsics,
        width: 640,
        height: 480,
        nominal_frames: frames,
        dropped_frames: vec![],
        preset: preset.to_string(),
        seed: {
            let _ = rng;
            seed
        },
    };

    let sheet = |rng: &mut ChaCha8Rng| Body {
        surface: SurfaceKind::CylinderBend,
        half_width: 360.0,
        half_height: 290.0,
        texture: Texture::value_noise(rng, 1024, 24, 3, 0.15, 0.58),
        motion: MotionSchedule::at_rest(Pose::new(
            so3_exp(&Vec3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), 0.0))
                .transpose(),
            Vec3::new(0.0, 0.0, 500.0),
        )),
        bend: BendSchedule {
            base: 0.0,
            amplitude: 1.0 / 1200.0,
            period: frames as f64,
        },
    };

    match preset {
        "rigid_plane" => {
            let body = Body {
                surface: SurfaceKind::Plane,
                half_width: 420.0,
                half_height: 330.0,
                texture: Texture::value_noise(&mut rng, 1024, 24, 3, 0.15, 0.58),
                motion: MotionSchedule::at_rest(Pose::new(
                    so3_exp(&Vec3::new(0.05, -0.04, 0.0)),
                    Vec3::new(0.0, 0.0, 520.0),
                )),
                bend: BendSchedule::flat(),
            };
            let mut scene = base_scene(vec![body], &mut rng);
            // Known smooth camera motion for trajectory benchmarks.
            scene.camera = CameraSchedule {
                base: Pose::identity(),
                twist_rate: Vec6::new(0.6, 0.45, 0.35, 2.4e-4, -3.2e-4, 1.6e-4),
            };
            Ok(scene)
        }
        "bending_sheet" => {
            let body = sheet(&mut rng);
            Ok(base_scene(vec![body], &mut rng))
        }
        "illumination_drift" => {
            // Identical geometry draw as bending_sheet, drift on top.
            let body = sheet(&mut rng);
            let mut scene = base_scene(vec![body], &mut rng);
            scene.illumination = IlluminationSchedule {
                gain_ramp: 0.5,
                bias_ramp: 0.1,
                duration: frames as f64,
            };
            Ok(scene)
        }
        "two_bodies_sliding" => {
            // Two curved lobes side by side, the right one sliding as an
            // independent rigid body along the seam. A background gap keeps
            // the silhouettes from sweeping over each other, so the
            // difficulty is purely the independent motion.
            let left = Body {
                surface: SurfaceKind::CylinderBend,
                half_width: 220.0,
                half_height: 340.0,
                texture: Texture::value_noise(&mut rng, 1024, 24, 3, 0.15, 0.58),
                motion: MotionSchedule::at_rest(Pose::new(
                    so3_exp(&Vec3::new(0.03, 0.02, 0.0)),
                    Vec3::new(-190.0, 0.0, 535.0),
                )),
                bend: BendSchedule {
                    base: 1.0 / 1500.0,
                    amplitude: 0.0,
                    period: frames as f64,
                },
            };
            let right = Body {
                surface: SurfaceKind::CylinderBend,
                half_width: 210.0,
                half_height: 320.0,
                texture: Texture::value_noise(&mut rng, 1024, 24, 3, 0.15, 0.58),
                motion: MotionSchedule {
                    base: Pose::new(so3_exp(&Vec3::new(-0.02, 0.03, 0.01)), Vec3::new(250.0, 5.0, 505.0)),
                    // Elliptical slide along the seam; the relative velocity
                    // to the left lobe never vanishes and the displacement
                    // stays bounded.
                    linear_velocity: Vec3::zeros(),
                    osc_amplitude: Vec3::new(0.0, 22.0, 3.0),
                    osc_amplitude_cos: Vec3::new(8.0, 0.0, 0.0),
                    osc_period: frames as f64,
                    rot_axis: Vec3::z(),
                    rot_rate: 0.0,
                },
                bend: BendSchedule {
                    base: 1.0 / 900.0,
                    amplitude: 0.0,
                    period: frames as f64,
                },
            };
            Ok(base_scene(vec![left, right], &mut rng))
        }
        "occlusion" => {
            let body = sheet(&mut rng);
            let mut scene = base_scene(vec![body], &mut rng);
            scene.occluder = Some(Body {
                surface: SurfaceKind::Plane,
                half_width: 42.0,
                half_height: 42.0,
                texture: Texture::value_noise(&mut rng, 256, 16, 2, 0.25, 0.85),
                motion: MotionSchedule {
                    base: Pose::new(so3_exp(&Vec3::new(0.0, 0.0, 0.3)), Vec3::new(-330.0, -40.0, 430.0)),
                    linear_velocity: Vec3::new(8.0, 0.0, 0.0),
                    osc_amplitude: Vec3::zeros(),
                    osc_amplitude_cos: Vec3::zeros(),
                    osc_period: frames as f64,
                    rot_axis: Vec3::z(),
                    rot_rate: 0.0,
                },
                bend: BendSchedule::flat(),
            });
            Ok(scene)
        }
        "missing_frames" => {
            let body = Body {
                surface: SurfaceKind::Plane,
                half_width: 430.0,
                half_height: 340.0,
                texture: Texture::value_noise(&mut rng, 1024, 24, 3, 0.15, 0.58),
                motion: MotionSchedule {
                    base: Pose::new(so3_exp(&Vec3::new(0.02, -0.02, 0.0)), Vec3::new(-40.0, 10.0, 510.0)),
                    linear_velocity: Vec3::new(2.5, 0.6, 0.0),
                    osc_amplitude: Vec3::zeros(),
                    osc_amplitude_cos: Vec3::zeros(),
                    osc_period: frames as f64,
                    rot_axis: Vec3::z(),
                    rot_rate: 0.0,
                },
                bend: BendSchedule::flat(),
            };
            let mut scene = base_scene(vec![body], &mut rng);
            scene.dropped_frames = vec![12, 25, 26, 40];
            Ok(scene)
        }
        other => Err(SynthError::UnknownPreset(other.to_string())),
    }
}
