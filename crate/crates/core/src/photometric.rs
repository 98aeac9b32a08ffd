//! Texture extraction, photometric residuals with gain/bias and saturation,
//! ZNCC scoring, and the analytic residual Jacobians.
//!
//! The residual per patch sample is the clamped intensity difference
//! `gain * I(pi(T_cw * S(u, v))) + bias - T(u, v)`. Jacobian rows follow
//! the chain rule through the image gradient, the projection derivative,
//! and the surfel transform; saturated and invalid samples get zero rows.

use crate::geometry::{
    pixel_local_jacobian, skew, surfel_point, GeometryError, Mat32, Pose, Surfel, SurfelState,
    Vec2, Vec3,
};
use crate::imaging::{GrayImage, ImagePyramid, Intrinsics};
use nalgebra::{DMatrix, DVector, Matrix2x3, RowVector2, RowVector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhotometricError {
    /// A grid node reprojects outside the reference image; the surfel is
    /// rejected at initialization.
    #[error("patch node ({u}, {v}) reprojects outside the reference image")]
    OutOfImage { u: f64, v: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One node of the texture grid: local coordinates and reference intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSample {
    pub u: f64,
    pub v: f64,
    pub value: f64,
}

/// Reference texture of a surfel over a symmetric uniform grid in local
/// units. The default half extent of 11 gives a 23x23 patch.
#[derive(Debug, Clone, PartialEq)]
pub struct TexturePatch {
    pub half_extent: i32,
    pub samples: Vec<PatchSample>,
}

impl TexturePatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.value)
    }
}

/// Iterate the symmetric grid in row-major order (v outer, u inner).
pub fn grid_nodes(half_extent: i32) -> impl Iterator<Item = (f64, f64)> {
    (-half_extent..=half_extent).flat_map(move |v| {
        (-half_extent..=half_extent).map(move |u| (u as f64, v as f64))
    })
}

/// Parameter blocks active in a Jacobian, laid out in the fixed order
/// translation(3), rotation(3), deformation tensor(3), camera pose(6),
/// gain/bias(2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActiveParams {
    pub translation: bool,
    pub rotation: bool,
    pub deform: bool,
    pub camera: bool,
    pub gain_bias: bool,
}

impl ActiveParams {
    pub const NONE: ActiveParams = ActiveParams {
        translation: false,
        rotation: false,
        deform: false,
        camera: false,
        gain_bias: false,
    };

    pub const ALL: ActiveParams = ActiveParams {
        translation: true,
        rotation: true,
        deform: true,
        camera: true,
        gain_bias: true,
    };

    /// Surfel geometry only: translation + rotation + deformation.
    pub const GEOMETRY: ActiveParams = ActiveParams {
        translation: true,
        rotation: true,
        deform: true,
        camera: false,
        gain_bias: false,
    };

    pub fn cols(&self) -> usize {
        3 * self.translation as usize
            + 3 * self.rotation as usize
            + 3 * self.deform as usize
            + 6 * self.camera as usize
            + 2 * self.gain_bias as usize
    }

    pub fn translation_col(&self) -> Option<usize> {
        self.translation.then_some(0)
    }

    pub fn rotation_col(&self) -> Option<usize> {
        self.rotation.then_some(3 * self.translation as usize)
    }

    pub fn deform_col(&self) -> Option<usize> {
        self.deform
            .then_some(3 * self.translation as usize + 3 * self.rotation as usize)
    }

    pub fn camera_col(&self) -> Option<usize> {
        self.camera.then_some(
            3 * self.translation as usize
                + 3 * self.rotation as usize
                + 3 * self.deform as usize,
        )
    }

    pub fn gain_bias_col(&self) -> Option<usize> {
        self.gain_bias.then_some(
            3 * self.translation as usize
                + 3 * self.rotation as usize
                + 3 * self.deform as usize
                + 6 * self.camera as usize,
        )
    }
}

/// Residuals and (optionally) Jacobian rows for one surfel against one image.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    /// One residual per grid sample; invalid samples hold zero.
    pub residuals: DVector<f64>,
    /// Rows follow `residuals`; width is the active column count (possibly 0).
    pub jacobian: DMatrix<f64>,
    pub valid: Vec<bool>,
    pub saturated: Vec<bool>,
    pub saturation_cap: f64,
}

impl ResidualBlock {
    pub fn cost(&self) -> f64 {
        self.residuals
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(r, _)| r * r)
            .sum()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.valid.len().max(1) as f64
    }

    pub fn rms(&self) -> f64 {
        let n = self.valid_count();
        if n == 0 {
            return f64::INFINITY;
        }
        (self.cost() / n as f64).sqrt()
    }
}

/// Extract a texture patch for a surfel from a reference image: each grid
/// node is mapped through the rest geometry and the reference camera, then
/// sampled bilinearly.
pub fn extract_texture(
    rest_position: &Vec3,
    rest_jacobian: &Mat32,
    ref_image: &GrayImage,
    ref_pose: &Pose,
    k: &Intrinsics,
    half_extent: i32,
) -> Result<TexturePatch, PhotometricError> {
    let mut samples = Vec::with_capacity(((2 * half_extent + 1) * (2 * half_extent + 1)) as usize);
    for (u, v) in grid_nodes(half_extent) {
        let world = rest_position + rest_jacobian * Vec2::new(u, v);
        let cam = ref_pose.apply(&world);
        let value = k
            .project(&cam)
            .ok()
            .and_then(|(x, y)| ref_image.bilinear(x, y).ok())
            .ok_or(PhotometricError::OutOfImage { u, v })?;
        samples.push(PatchSample { u, v, value });
    }
    Ok(TexturePatch {
        half_extent,
        samples,
    })
}

/// Reproject the patch grid into `image` under the given state and camera,
/// returning one intensity per grid sample (`None` where the sample leaves
/// the usable image area).
pub fn sample_intensities(
    surfel: &Surfel,
    state: &SurfelState,
    pose: &Pose,
    image: &GrayImage,
    k: &Intrinsics,
    level: usize,
) -> Vec<Option<f64>> {
    let kl = k.at_level(level);
    surfel
        .texture(level)
        .samples
        .iter()
        .map(|s| {
            let world = surfel_point(surfel, state, (s.u, s.v));
            let cam = pose.apply(&world);
            let (x, y) = kl.project(&cam).ok()?;
            if in_margin(image, x, y) {
                image.bilinear(x, y).ok()
            } else {
                None
            }
        })
        .collect()
}

// Samples must keep one pixel of margin so the gradient stencil stays valid.
fn in_margin(image: &GrayImage, x: f64, y: f64) -> bool {
    x >= 1.0 && y >= 1.0 && x <= (image.width - 2) as f64 && y <= (image.height - 2) as f64
}

/// Photometric residuals of one surfel against one pyramid level.
/// Out-of-image samples are flagged invalid rather than failing the surfel.
pub fn photometric_residuals(
    surfel: &Surfel,
    state: &SurfelState,
    pose: &Pose,
    image: &GrayImage,
    k: &Intrinsics,
    level: usize,
    saturation_cap: f64,
) -> ResidualBlock {
    assemble(
        surfel,
        state,
        pose,
        image,
        k,
        level,
        ActiveParams::NONE,
        saturation_cap,
    )
}

/// Photometric residuals plus analytic Jacobian rows for the requested
/// parameter blocks.
#[allow(clippy::too_many_arguments)]
pub fn residual_jacobian(
    surfel: &Surfel,
    state: &SurfelState,
    pose: &Pose,
    image: &GrayImage,
    k: &Intrinsics,
    level: usize,
    active: ActiveParams,
    saturation_cap: f64,
) -> ResidualBlock {
    assemble(surfel, state, pose, image, k, level, active, saturation_cap)
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    surfel: &Surfel,
    state: &SurfelState,
    pose: &Pose,
    image: &GrayImage,
    k: &Intrinsics,
    level: usize,
    active: ActiveParams,
    saturation_cap: f64,
) -> ResidualBlock {
    let kl = k.at_level(level);
    let texture = surfel.texture(level);
    let n = texture.len();
    let cols = active.cols();
    let mut residuals = DVector::zeros(n);
    let mut jacobian = DMatrix::zeros(n, cols);
    let mut valid = vec![false; n];
    let mut saturated = vec![false; n];

    for (row, s) in texture.samples.iter().enumerate() {
        let world = surfel_point(surfel, state, (s.u, s.v));
        let cam = pose.apply(&world);
        let Ok((x, y)) = kl.project(&cam) else {
            continue;
        };
        if !in_margin(image, x, y) {
            continue;
        }
        let intensity = match image.bilinear(x, y) {
            Ok(i) => i,
            Err(_) => continue,
        };
        valid[row] = true;
        let raw = state.gain * intensity + state.bias - s.value;
        residuals[row] = raw.clamp(-saturation_cap, saturation_cap);
        if raw.abs() > saturation_cap {
            saturated[row] = true;
            continue; // saturated rows keep a zero Jacobian
        }
        if cols == 0 {
            continue;
        }

        let (gx, gy) = match image.gradient(x, y) {
            Ok(g) => g,
            Err(_) => {
                valid[row] = false;
                residuals[row] = 0.0;
                continue;
            }
        };
        let grad = RowVector2::new(gx, gy);
        let proj: Matrix2x3<f64> = match kl.projection_jacobian(&cam) {
            Ok(p) => p,
            Err(_) => {
                valid[row] = false;
                residuals[row] = 0.0;
                continue;
            }
        };
        // d r / d S_c, including the gain on the image term.
        let gp: RowVector3<f64> = grad * proj * state.gain;
        // d r / d S_world for parameters expressed in the world frame.
        let gpw: RowVector3<f64> = gp * pose.rotation;

        if let Some(c) = active.translation_col() {
            jacobian.view_mut((row, c), (1, 3)).copy_from(&gpw);
        }
        if let Some(c) = active.rotation_col() {
            // Right-multiplicative increment: S = X0 + t + R exp(dw) q with
            // q the tangent offset, so dS/dw = -R [q]x.
            let q = surfel.rest_jacobian * (state.deform * Vec2::new(s.u, s.v));
            let block: RowVector3<f64> = -(gpw * (state.rotation * skew(&q)));
            jacobian.view_mut((row, c), (1, 3)).copy_from(&block);
        }
        if let Some(c) = active.deform_col() {
            // d(F [u, v]) / d(f11, f12, f22).
            let dd = nalgebra::Matrix2x3::new(s.u, s.v, 0.0, 0.0, s.u, s.v);
            let block = gpw * (state.rotation * (surfel.rest_jacobian * dd));
            jacobian.view_mut((row, c), (1, 3)).copy_from(&block);
        }
        if let Some(c) = active.camera_col() {
            // Left-multiplicative pose increment: d S_c / d [rho, theta] =
            // [I3 | -[S_c]x].
            jacobian.view_mut((row, c), (1, 3)).copy_from(&gp);
            let rot_block: RowVector3<f64> = -(gp * skew(&cam));
            jacobian.view_mut((row, c + 3), (1, 3)).copy_from(&rot_block);
        }
        if let Some(c) = active.gain_bias_col() {
            jacobian[(row, c)] = intensity;
            jacobian[(row, c + 1)] = 1.0;
        }
    }

    ResidualBlock {
        residuals,
        jacobian,
        valid,
        saturated,
        saturation_cap,
    }
}

/// Closed-form least-squares fit of `gain * I + bias ~= T` over paired
/// samples. Falls back to `gain = 1, bias = mean(T - I)` when the intensity
/// variance is degenerate (< 1e-12).
pub fn estimate_gain_bias(texture: &[f64], intensities: &[f64]) -> (f64, f64) {
    assert_eq!(texture.len(), intensities.len());
    let n = texture.len();
    if n < 2 {
        let bias = texture
            .iter()
            .zip(intensities)
            .map(|(t, i)| t - i)
            .sum::<f64>()
            / n.max(1) as f64;
        return (1.0, bias);
    }
    let nf = n as f64;
    let mean_i = intensities.iter().sum::<f64>() / nf;
    let mean_t = texture.iter().sum::<f64>() / nf;
    let mut var_i = 0.0;
    let mut cov = 0.0;
    for (t, i) in texture.iter().zip(intensities) {
        var_i += (i - mean_i) * (i - mean_i);
        cov += (i - mean_i) * (t - mean_t);
    }
    if var_i / nf < 1e-12 {
        return (1.0, mean_t - mean_i);
    }
    let gain = cov / var_i;
    (gain, mean_t - gain * mean_i)
}

/// Zero-mean normalized cross-correlation in [-1, 1]; degenerate signals
/// (fewer than two samples or zero variance) score 0 and are treated as
/// outliers.
pub fn zncc(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let ma = a.iter().sum::<f64>() / nf;
    let mb = b.iter().sum::<f64>() / nf;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    let denom = (da * db).sqrt();
    if denom < 1e-24 {
        return 0.0;
    }
    (num / denom).clamp(-1.0, 1.0)
}

/// Initialize a fully textured surfel at an integer pixel of the reference
/// frame: rest geometry from the depth map, tangent basis rescaled to
/// pixel-at-anchor local units, one texture patch per pyramid level.
pub fn init_textured_surfel(
    id: usize,
    depth: &crate::imaging::DepthMap,
    k: &Intrinsics,
    pixel: (usize, usize),
    ref_pyramid: &ImagePyramid,
    ref_pose: &Pose,
    half_extent: i32,
) -> Result<Surfel, PhotometricError> {
    let (rest_position, j_retina) = crate::geometry::init_surfel(depth, k, pixel)?;
    let rest_jacobian = pixel_local_jacobian(&j_retina, k);
    let mut textures = Vec::with_capacity(ref_pyramid.num_levels());
    for level in 0..ref_pyramid.num_levels() {
        textures.push(extract_texture(
            &rest_position,
            &rest_jacobian,
            ref_pyramid.level(level),
            ref_pose,
            &k.at_level(level),
            half_extent,
        )?);
    }
    let anchor = {
        let (xn, yn) = k.normalized(pixel.0 as f64, pixel.1 as f64);
        Vec2::new(xn, yn)
    };
    Ok(Surfel::new(
        id,
        rest_position,
        rest_jacobian,
        anchor,
        textures,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{so3_exp, Mat2};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    // A globally bilinear intensity field: its raster reproduces the exact
    // function under bilinear sampling at every subpixel point, so the 1-px
    // central-difference gradient equals the true derivative and finite
    // differences of the residual are meaningful at 1e-4.
    fn bilinear_image(w: usize, h: usize, a: f64, b: f64, c: f64, d: f64) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            a + b * x as f64 + c * y as f64 + d * x as f64 * y as f64
        })
    }

    fn random_bilinear_image(rng: &mut StdRng, w: usize, h: usize) -> GrayImage {
        let a = rng.random_range(0.3..0.5);
        let b = rng.random_range(-1.0..1.0) * 0.15 / w as f64;
        let c = rng.random_range(-1.0..1.0) * 0.15 / h as f64;
        let d = rng.random_range(-1.0..1.0) * 0.3 / (w as f64 * h as f64);
        bilinear_image(w, h, a, b, c, d)
    }

    fn fronto_surfel(
        id: usize,
        k: &Intrinsics,
        pixel: (f64, f64),
        depth: f64,
        pyramid: &ImagePyramid,
        half_extent: i32,
    ) -> Surfel {
        let (xn, yn) = k.normalized(pixel.0, pixel.1);
        let rest_position = Vec3::new(xn * depth, yn * depth, depth);
        let j_retina = Mat32::new(depth, 0.0, 0.0, depth, 0.0, 0.0);
        let rest_jacobian = pixel_local_jacobian(&j_retina, k);
        let mut textures = Vec::new();
        for level in 0..pyramid.num_levels() {
            textures.push(
                extract_texture(
                    &rest_position,
                    &rest_jacobian,
                    pyramid.level(level),
                    &Pose::identity(),
                    &k.at_level(level),
                    half_extent,
                )
                .unwrap(),
            );
        }
        Surfel::new(id, rest_position, rest_jacobian, Vec2::new(xn, yn), textures)
    }

    #[test]
    fn extract_texture_constant_image() {
        let img = GrayImage::from_fn(64, 64, |_, _| 0.42);
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0);
        let patch = extract_texture(
            &Vec3::new(0.0, 0.0, 2.0),
            &Mat32::new(0.02, 0.0, 0.0, 0.02, 0.0, 0.0),
            &img,
            &Pose::identity(),
            &k,
            5,
        )
        .unwrap();
        assert_eq!(patch.len(), 121);
        for s in &patch.samples {
            assert_relative_eq!(s.value, 0.42, epsilon = 1e-12);
        }
    }

    #[test]
    fn extract_texture_zero_extent_is_anchor_intensity() {
        let img = GrayImage::from_fn(64, 64, |x, y| ((x + y) % 11) as f64 / 11.0);
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0);
        let patch = extract_texture(
            &Vec3::new(0.0, 0.0, 2.0),
            &Mat32::zeros(),
            &img,
            &Pose::identity(),
            &k,
            0,
        )
        .unwrap();
        assert_eq!(patch.len(), 1);
        assert_relative_eq!(patch.samples[0].value, img.get(32, 32), epsilon = 1e-12);
    }

    #[test]
    fn extract_texture_fronto_parallel_ramp_is_linear() {
        // One local unit projects to one pixel at the anchor, so on a ramp
        // image the texture is the ramp itself, shifted to the anchor.
        let slope = 0.004;
        let img = GrayImage::from_fn(128, 128, |x, _| slope * x as f64);
        let k = Intrinsics::new(200.0, 200.0, 64.0, 64.0);
        let pyr = ImagePyramid::build(img, 1).unwrap();
        let surfel = fronto_surfel(0, &k, (64.0, 64.0), 3.0, &pyr, 8);
        for s in &surfel.texture(0).samples {
            let expected = slope * (64.0 + s.u);
            assert_relative_eq!(s.value, expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn extract_texture_out_of_image_is_rejected() {
        let img = GrayImage::from_fn(32, 32, |_, _| 0.5);
        let k = Intrinsics::new(100.0, 100.0, 16.0, 16.0);
        let r = extract_texture(
            &Vec3::new(0.0, 0.0, 1.0),
            &Mat32::new(0.01, 0.0, 0.0, 0.01, 0.0, 0.0),
            &img,
            &Pose::identity(),
            &k,
            30,
        );
        assert!(matches!(r, Err(PhotometricError::OutOfImage { .. })));
    }

    #[test]
    fn residuals_vanish_on_self_alignment() {
        let mut rng = StdRng::seed_from_u64(31);
        let img = GrayImage::from_fn(96, 96, |x, y| {
            0.5 + 0.3 * ((x as f64) / 9.0).sin() * ((y as f64) / 7.0).cos()
        });
        let k = Intrinsics::new(150.0, 150.0, 48.0, 48.0);
        let pyr = ImagePyramid::build(img, 1).unwrap();
        let surfel = fronto_surfel(0, &k, (48.0, 48.0), 2.0, &pyr, 11);
        let block = photometric_residuals(
            &surfel,
            &SurfelState::identity(),
            &Pose::identity(),
            pyr.level(0),
            &k,
            0,
            0.24,
        );
        assert!(block.valid_count() > 500);
        for (r, &v) in block.residuals.iter().zip(&block.valid) {
            if v {
                assert!(r.abs() < 1e-12);
            }
        }
        let _ = rng.random::<f64>();
    }

    #[test]
    fn residuals_gain_bias_algebra_on_constant_pair() {
        let c = 0.4;
        let img = GrayImage::from_fn(64, 64, |_, _| c);
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0);
        let pyr = ImagePyramid::build(img, 1).unwrap();
        let surfel = fronto_surfel(0, &k, (32.0, 32.0), 2.0, &pyr, 5);
        let state = SurfelState {
            gain: 2.0,
            bias: 0.1,
            ..SurfelState::identity()
        };
        let block = photometric_residuals(
            &surfel,
            &state,
            &Pose::identity(),
            pyr.level(0),
            &k,
            0,
            1.0,
        );
        for (r, &v) in block.residuals.iter().zip(&block.valid) {
            if v {
                assert_relative_eq!(*r, c + 0.1, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn residuals_track_known_translation_through_rendered_shift() {
        // Second frame equals the reference shifted by the projection of a
        // known surfel translation; with the true translation plugged in the
        // residual is interpolation error only.
        let f = |x: f64, y: f64| 0.5 + 0.25 * (x / 11.0).sin() * (y / 13.0).cos();
        let k = Intrinsics::new(200.0, 200.0, 64.0, 64.0);
        let depth = 2.0;
        let dt = Vec3::new(0.013, -0.007, 0.0);
        let shift_x = k.fx * dt.x / depth;
        let shift_y = k.fy * dt.y / depth;
        let ref_img = GrayImage::from_fn(128, 128, |x, y| f(x as f64, y as f64));
        let cur_img =
            GrayImage::from_fn(128, 128, |x, y| f(x as f64 - shift_x, y as f64 - shift_y));
        let pyr = ImagePyramid::build(ref_img, 1).unwrap();
        let surfel = fronto_surfel(0, &k, (64.0, 64.0), depth, &pyr, 11);
        let state = SurfelState {
            translation: dt,
            ..SurfelState::identity()
        };
        let block =
            photometric_residuals(&surfel, &state, &Pose::identity(), &cur_img, &k, 0, 0.24);
        assert!(block.valid_count() > 500);
        let max = block
            .residuals
            .iter()
            .zip(&block.valid)
            .filter(|(_, &v)| v)
            .map(|(r, _)| r.abs())
            .fold(0.0f64, f64::max);
        assert!(max < 0.02, "max residual {max}");
    }

    #[test]
    fn jacobian_rows_zero_on_constant_image() {
        let img = GrayImage::from_fn(64, 64, |_, _| 0.5);
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0);
        let pyr = ImagePyramid::build(img, 1).unwrap();
        let surfel = fronto_surfel(0, &k, (32.0, 32.0), 2.0, &pyr, 5);
        let block = residual_jacobian(
            &surfel,
            &SurfelState::identity(),
            &Pose::identity(),
            pyr.level(0),
            &k,
            0,
            ActiveParams::GEOMETRY,
            1.0,
        );
        // Gradient is zero everywhere, so all photometric rows vanish.
        assert!(block.jacobian.amax() < 1e-15);
    }

    fn random_config(rng: &mut StdRng) -> (Surfel, SurfelState, Pose, GrayImage, Intrinsics) {
        let k = Intrinsics::new(300.0, 290.0, 96.0, 96.0);
        let img = random_bilinear_image(rng, 192, 192);
        let depth = rng.random_range(1.5..3.0);
        let px = rng.random_range(80.0..112.0);
        let py = rng.random_range(80.0..112.0);
        let (xn, yn) = k.normalized(px, py);
        let rest_position = Vec3::new(xn * depth, yn * depth, depth);
        // Mildly slanted tangent basis around the fronto-parallel one.
        let mut j_retina = Mat32::new(depth, 0.0, 0.0, depth, 0.0, 0.0);
        j_retina[(2, 0)] = rng.random_range(-0.3..0.3) * depth;
        j_retina[(2, 1)] = rng.random_range(-0.3..0.3) * depth;
        let rest_jacobian = pixel_local_jacobian(&j_retina, &k);
        let pyr = ImagePyramid::build(img.clone(), 1).unwrap();
        let texture = extract_texture(
            &rest_position,
            &rest_jacobian,
            pyr.level(0),
            &Pose::identity(),
            &k,
            7,
        )
        .unwrap();
        let surfel = Surfel::new(0, rest_position, rest_jacobian, Vec2::new(xn, yn), vec![texture]);
        let state = SurfelState {
            translation: Vec3::from_fn(|_, _| rng.random_range(-0.02..0.02)),
            rotation: so3_exp(&Vec3::from_fn(|_, _| rng.random_range(-0.05..0.05))),
            deform: {
                let (a, b, c) = (
                    1.0 + rng.random_range(-0.05..0.05),
                    rng.random_range(-0.03..0.03),
                    1.0 + rng.random_range(-0.05..0.05),
                );
                Mat2::new(a, b, b, c)
            },
            gain: rng.random_range(0.9..1.1),
            bias: rng.random_range(-0.03..0.03),
        };
        let pose = Pose::new(
            so3_exp(&Vec3::from_fn(|_, _| rng.random_range(-0.01..0.01))),
            Vec3::from_fn(|_, _| rng.random_range(-0.01..0.01)),
        );
        (surfel, state, pose, img, k)
    }

    /// Finite-difference Jacobian of the residual vector, perturbing each
    /// parameter block the same way the optimizer applies increments.
    fn fd_block(
        surfel: &Surfel,
        state: &SurfelState,
        pose: &Pose,
        img: &GrayImage,
        k: &Intrinsics,
        cap: f64,
    ) -> DMatrix<f64> {
        let n = surfel.texture(0).len();
        let mut fd = DMatrix::zeros(n, 17);
        let eval = |st: &SurfelState, ps: &Pose| {
            photometric_residuals(surfel, st, ps, img, k, 0, cap).residuals
        };
        let h_geo = 1e-5;
        let h_gb = 1e-6;
        for i in 0..3 {
            let mut sp = state.clone();
            let mut sm = state.clone();
            sp.translation[i] += h_geo;
            sm.translation[i] -= h_geo;
            fd.set_column(i, &((eval(&sp, pose) - eval(&sm, pose)) / (2.0 * h_geo)));
        }
        for i in 0..3 {
            let mut w = Vec3::zeros();
            w[i] = h_geo;
            let mut sp = state.clone();
            let mut sm = state.clone();
            sp.rotation = state.rotation * so3_exp(&w);
            sm.rotation = state.rotation * so3_exp(&(-w));
            fd.set_column(3 + i, &((eval(&sp, pose) - eval(&sm, pose)) / (2.0 * h_geo)));
        }
        for (i, (r, c)) in [(0, 0), (0, 1), (1, 1)].iter().enumerate() {
            let mut dp = Mat2::zeros();
            dp[(*r, *c)] = h_geo;
            dp[(*c, *r)] = h_geo;
            let mut sp = state.clone();
            let mut sm = state.clone();
            sp.deform = state.deform + dp;
            sm.deform = state.deform - dp;
            fd.set_column(6 + i, &((eval(&sp, pose) - eval(&sm, pose)) / (2.0 * h_geo)));
        }
        for i in 0..6 {
            let mut xi = crate::geometry::Vec6::zeros();
            xi[i] = h_geo;
            let pp = crate::geometry::se3_exp(&xi).compose(pose);
            let pm = crate::geometry::se3_exp(&(-xi)).compose(pose);
            fd.set_column(9 + i, &((eval(state, &pp) - eval(state, &pm)) / (2.0 * h_geo)));
        }
        for (i, gain) in [true, false].iter().enumerate() {
            let mut sp = state.clone();
            let mut sm = state.clone();
            if *gain {
                sp.gain += h_gb;
                sm.gain -= h_gb;
            } else {
                sp.bias += h_gb;
                sm.bias -= h_gb;
            }
            fd.set_column(15 + i, &((eval(&sp, pose) - eval(&sm, pose)) / (2.0 * h_gb)));
        }
        fd
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(77);
        let cap = 1e6; // keep every row unsaturated for the comparison
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let (surfel, state, pose, img, k) = random_config(&mut rng);
            let block = residual_jacobian(
                &surfel,
                &state,
                &pose,
                &img,
                &k,
                0,
                ActiveParams::ALL,
                cap,
            );
            let fd = fd_block(&surfel, &state, &pose, &img, &k, cap);
            for row in 0..block.valid.len() {
                if !block.valid[row] || block.saturated[row] {
                    continue;
                }
                let mut row_scale = 1e-9f64;
                for c in 0..17 {
                    row_scale = row_scale.max(fd[(row, c)].abs());
                }
                for c in 0..17 {
                    let err = (block.jacobian[(row, c)] - fd[(row, c)]).abs() / row_scale;
                    worst = worst.max(err);
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn rotation_block_at_identity_center_matches_fd() {
        // At the patch center the tangent offset is zero, so the rotation of
        // the implemented composition leaves the point fixed; finite
        // differences confirm the zero derivative.
        let mut rng = StdRng::seed_from_u64(5);
        let (surfel, _, _, img, k) = random_config(&mut rng);
        let state = SurfelState::identity();
        let pose = Pose::identity();
        let block = residual_jacobian(
            &surfel,
            &state,
            &pose,
            &img,
            &k,
            0,
            ActiveParams::GEOMETRY,
            1e6,
        );
        let fd = fd_block(&surfel, &state, &pose, &img, &k, 1e6);
        let center = surfel.texture(0).len() / 2;
        assert!(block.valid[center]);
        for c in 3..6 {
            assert!(block.jacobian[(center, c)].abs() < 1e-12);
            assert!(fd[(center, c)].abs() < 1e-6);
        }
        // Off-center rows carry a nonzero rotation derivative that FD agrees with.
        let off = center + 5;
        let mut scale = 1e-9f64;
        for c in 3..6 {
            scale = scale.max(fd[(off, c)].abs());
        }
        for c in 3..6 {
            assert!((block.jacobian[(off, c)] - fd[(off, c)]).abs() / scale < 1e-4);
        }
    }

    #[test]
    fn saturation_clamps_and_zeroes_rows() {
        let img = GrayImage::from_fn(64, 64, |x, _| if x >= 32 { 0.9 } else { 0.1 });
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0);
        let pyr = ImagePyramid::build(GrayImage::from_fn(64, 64, |_, _| 0.1), 1).unwrap();
        let surfel = fronto_surfel(0, &k, (32.0, 32.0), 2.0, &pyr, 5);
        let cap = 0.24;
        let block = residual_jacobian(
            &surfel,
            &SurfelState::identity(),
            &Pose::identity(),
            &img,
            &k,
            0,
            ActiveParams::GEOMETRY,
            cap,
        );
        let mut saw_saturated = false;
        for row in 0..block.valid.len() {
            if !block.valid[row] {
                continue;
            }
            assert!(block.residuals[row].abs() <= cap + 1e-15);
            if block.saturated[row] {
                saw_saturated = true;
                for c in 0..block.jacobian.ncols() {
                    assert_eq!(block.jacobian[(row, c)], 0.0);
                }
            }
        }
        assert!(saw_saturated);
    }

    #[test]
    fn tightening_the_cap_never_increases_cost() {
        let mut rng = StdRng::seed_from_u64(41);
        let (surfel, mut state, pose, img, k) = random_config(&mut rng);
        state.translation.x += 0.05; // force sizable residuals
        let mut prev = f64::INFINITY;
        for cap in [0.5, 0.24, 0.1, 0.05, 0.01] {
            let cost =
                photometric_residuals(&surfel, &state, &pose, &img, &k, 0, cap).cost();
            assert!(cost <= prev + 1e-12);
            prev = cost;
        }
    }

    #[test]
    fn estimate_gain_bias_identity_and_exact_model() {
        let t: Vec<f64> = (0..50).map(|i| 0.2 + 0.01 * i as f64).collect();
        assert_eq!(estimate_gain_bias(&t, &t), (1.0, 0.0));
        let i: Vec<f64> = t.iter().map(|v| (v - 0.1) / 2.0).collect();
        let (gain, bias) = estimate_gain_bias(&t, &i);
        assert_relative_eq!(gain, 2.0, epsilon = 1e-12);
        assert_relative_eq!(bias, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn estimate_gain_bias_recovers_noisy_model() {
        let mut rng = StdRng::seed_from_u64(100);
        let (true_gain, true_bias) = (1.5, 0.05);
        let i: Vec<f64> = (0..400).map(|_| rng.random_range(0.1..0.7)).collect();
        let t: Vec<f64> = i
            .iter()
            .map(|v| true_gain * v + true_bias + rng.random_range(-0.01..0.01))
            .collect();
        let (gain, bias) = estimate_gain_bias(&t, &i);
        assert!((gain - true_gain).abs() < 0.05, "gain {gain}");
        assert!((bias - true_bias).abs() < 0.05);
    }

    #[test]
    fn estimate_gain_bias_degenerate_intensities() {
        let t = vec![0.3, 0.5, 0.7];
        let i = vec![0.4, 0.4, 0.4];
        let (gain, bias) = estimate_gain_bias(&t, &i);
        assert_eq!(gain, 1.0);
        assert_relative_eq!(bias, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn zncc_identity_and_negation() {
        let a: Vec<f64> = (0..30).map(|i| (i as f64 / 5.0).sin() * 0.3 + 0.5).collect();
        assert_relative_eq!(zncc(&a, &a), 1.0, epsilon = 1e-12);
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let neg: Vec<f64> = a.iter().map(|v| mean - (v - mean)).collect();
        assert_relative_eq!(zncc(&a, &neg), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn zncc_is_invariant_to_positive_affine_changes() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..50 {
            let a: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            let gain = rng.random_range(0.1..5.0);
            let bias = rng.random_range(-1.0..1.0);
            let b: Vec<f64> = a.iter().map(|v| gain * v + bias).collect();
            assert!((zncc(&a, &b) - 1.0).abs() < 1e-12);
            assert!((zncc(&b, &a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zncc_degenerate_signal_scores_zero() {
        let a = vec![0.5, 0.5, 0.5];
        let b = vec![0.1, 0.2, 0.3];
        assert_eq!(zncc(&a, &b), 0.0);
        assert_eq!(zncc(&b[..1], &a[..1]), 0.0);
    }
}
