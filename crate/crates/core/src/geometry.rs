//! Surfel parametrization, initialization from depth, local deformation
//! models, and rigid-transform utilities.
//!
//! A surfel is a first-order approximation of the scene surface around a
//! point: a rest position `X0`, a tangent-space basis `J0` (3x2), and a
//! texture patch. Per frame it moves by a translation, a rotation, and a
//! symmetric 2x2 deformation tensor applied in the tangent plane.

use crate::imaging::{DepthMap, Intrinsics};
use crate::photometric::TexturePatch;
use thiserror::Error;

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Vec6 = nalgebra::Vector6<f64>;
pub type Mat2 = nalgebra::Matrix2<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat32 = nalgebra::Matrix3x2<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// Depth missing or non-positive somewhere in the 3x3 stencil.
    #[error("invalid depth in the 3x3 neighborhood of pixel ({x}, {y})")]
    InvalidDepth { x: usize, y: usize },
    #[error("deformation model {model:?} takes {expected} parameter(s), got {got}")]
    BadArity {
        model: DeformationModel,
        expected: usize,
        got: usize,
    },
    #[error("equireal deformation tensor is singular (alpha = 0)")]
    SingularDeform,
}

/// Skew-symmetric cross-product matrix: `skew(x) * y == x.cross(&y)`.
pub fn skew(x: &Vec3) -> Mat3 {
    Mat3::new(0.0, -x.z, x.y, x.z, 0.0, -x.x, -x.y, x.x, 0.0)
}

/// SO(3) exponential map (Rodrigues), with a second-order Taylor branch for
/// rotation angles below 1e-8.
pub fn so3_exp(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let wx = skew(w);
    if theta2 < 1e-16 {
        Mat3::identity() + wx + wx * wx * 0.5
    } else {
        let theta = theta2.sqrt();
        Mat3::identity() + wx * (theta.sin() / theta) + wx * wx * ((1.0 - theta.cos()) / theta2)
    }
}

fn so3_left_jacobian(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let wx = skew(w);
    if theta2 < 1e-16 {
        Mat3::identity() + wx * 0.5 + wx * wx * (1.0 / 6.0)
    } else {
        let theta = theta2.sqrt();
        Mat3::identity()
            + wx * ((1.0 - theta.cos()) / theta2)
            + wx * wx * ((theta - theta.sin()) / (theta2 * theta))
    }
}

/// Rigid camera transform taking world coordinates into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Composition `(a * b)(x) = a(b(x))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// `max |R^T R - I|`, for orthonormality drift checks.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// SE(3) exponential map. The twist is `[rho, theta]` with the translational
/// part first.
pub fn se3_exp(xi: &Vec6) -> Pose {
    let rho = Vec3::new(xi[0], xi[1], xi[2]);
    let theta = Vec3::new(xi[3], xi[4], xi[5]);
    Pose {
        rotation: so3_exp(&theta),
        translation: so3_left_jacobian(&theta) * rho,
    }
}

/// Alias for [`Pose::compose`] as a free function.
pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Alias for [`Pose::apply`] as a free function.
pub fn pose_apply(p: &Pose, x: &Vec3) -> Vec3 {
    p.apply(x)
}

/// Rotation matrix to quaternion `(w, x, y, z)`, used only for trajectory
/// serialization.
pub fn rotation_to_quaternion(r: &Mat3) -> [f64; 4] {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    }
}

/// Local deformation model of a surfel, ordered from most to least
/// constrained. The parameter count is the number of free variables of the
/// deformation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeformationModel {
    /// Rigid motion only, tensor pinned to the identity.
    Isometry,
    /// Uniform scale `s * I2`.
    Conformal,
    /// Area-behaved two-parameter tensor.
    Equireal,
    /// Full symmetric 2x2 tensor `(f11, f12, f22)`.
    General,
}

/// Which equireal tensor to materialize: the form as commonly printed, whose
/// determinant is `(1 + beta)/alpha * alpha - beta^2`, or the corrected
/// unit-determinant form `[[a, b], [b, (1 + b^2)/a]]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EquirealForm {
    #[default]
    AsPrinted,
    UnitDeterminant,
}

impl DeformationModel {
    pub fn param_count(&self) -> usize {
        match self {
            DeformationModel::Isometry => 0,
            DeformationModel::Conformal => 1,
            DeformationModel::Equireal => 2,
            DeformationModel::General => 3,
        }
    }

    /// Parameters that materialize to the identity tensor.
    pub fn identity_params(&self) -> Vec<f64> {
        match self {
            DeformationModel::Isometry => vec![],
            DeformationModel::Conformal => vec![1.0],
            DeformationModel::Equireal => vec![1.0, 0.0],
            DeformationModel::General => vec![1.0, 0.0, 1.0],
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "isometry" => Some(DeformationModel::Isometry),
            "conformal" => Some(DeformationModel::Conformal),
            "equireal" => Some(DeformationModel::Equireal),
            "general" => Some(DeformationModel::General),
            _ => None,
        }
    }

    /// d vec(F) / d params with vec(F) = (f11, f12, f22); one column per
    /// model parameter.
    pub fn vec_jacobian(
        &self,
        params: &[f64],
        form: EquirealForm,
    ) -> Result<nalgebra::DMatrix<f64>, GeometryError> {
        self.check_arity(params)?;
        let mut j = nalgebra::DMatrix::zeros(3, self.param_count());
        match self {
            DeformationModel::Isometry => {}
            DeformationModel::Conformal => {
                j[(0, 0)] = 1.0;
                j[(2, 0)] = 1.0;
            }
            DeformationModel::Equireal => {
                let (a, b) = (params[0], params[1]);
                if a == 0.0 {
                    return Err(GeometryError::SingularDeform);
                }
                j[(0, 0)] = 1.0;
                j[(1, 1)] = 1.0;
                match form {
                    EquirealForm::AsPrinted => {
                        j[(2, 0)] = -(1.0 + b) / (a * a);
                        j[(2, 1)] = 1.0 / a;
                    }
                    EquirealForm::UnitDeterminant => {
                        j[(2, 0)] = -(1.0 + b * b) / (a * a);
                        j[(2, 1)] = 2.0 * b / a;
                    }
                }
            }
            DeformationModel::General => {
                j[(0, 0)] = 1.0;
                j[(1, 1)] = 1.0;
                j[(2, 2)] = 1.0;
            }
        }
        Ok(j)
    }

    fn check_arity(&self, params: &[f64]) -> Result<(), GeometryError> {
        if params.len() != self.param_count() {
            return Err(GeometryError::BadArity {
                model: *self,
                expected: self.param_count(),
                got: params.len(),
            });
        }
        Ok(())
    }
}

/// Materialize a deformation tensor from model parameters.
pub fn materialize_deform(
    model: DeformationModel,
    params: &[f64],
) -> Result<Mat2, GeometryError> {
    materialize_deform_with(model, params, EquirealForm::AsPrinted)
}

pub fn materialize_deform_with(
    model: DeformationModel,
    params: &[f64],
    form: EquirealForm,
) -> Result<Mat2, GeometryError> {
    model.check_arity(params)?;
    Ok(match model {
        DeformationModel::Isometry => Mat2::identity(),
        DeformationModel::Conformal => Mat2::identity() * params[0],
        DeformationModel::Equireal => {
            let (a, b) = (params[0], params[1]);
            if a == 0.0 {
                return Err(GeometryError::SingularDeform);
            }
            let f22 = match form {
                EquirealForm::AsPrinted => (1.0 + b) / a,
                EquirealForm::UnitDeterminant => (1.0 + b * b) / a,
            };
            Mat2::new(a, b, b, f22)
        }
        DeformationModel::General => Mat2::new(params[0], params[1], params[1], params[2]),
    })
}

/// Per-frame unknowns of a single surfel.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfelState {
    pub translation: Vec3,
    /// Orthonormal, updated multiplicatively by right-composing `so3_exp`
    /// increments.
    pub rotation: Mat3,
    /// Symmetric deformation tensor; identity under the isometry model.
    pub deform: Mat2,
    pub gain: f64,
    pub bias: f64,
}

impl SurfelState {
    pub fn identity() -> Self {
        SurfelState {
            translation: Vec3::zeros(),
            rotation: Mat3::identity(),
            deform: Mat2::identity(),
            gain: 1.0,
            bias: 0.0,
        }
    }
}

impl Default for SurfelState {
    fn default() -> Self {
        Self::identity()
    }
}

/// A textured surface element: rest position, rest tangent basis, and one
/// texture patch per pyramid level (level 0 finest).
///
/// `rest_jacobian` maps local patch units to scene units; local units are
/// normalized so that one unit is one pixel at the anchor in the reference
/// image.
#[derive(Debug, Clone)]
pub struct Surfel {
    pub id: usize,
    pub rest_position: Vec3,
    pub rest_jacobian: Mat32,
    /// Anchor in normalized retina coordinates of the reference image.
    pub anchor: Vec2,
    pub textures: Vec<TexturePatch>,
}

impl Surfel {
    pub fn new(
        id: usize,
        rest_position: Vec3,
        rest_jacobian: Mat32,
        anchor: Vec2,
        textures: Vec<TexturePatch>,
    ) -> Self {
        Surfel {
            id,
            rest_position,
            rest_jacobian,
            anchor,
            textures,
        }
    }

    /// Texture patch extracted from the given pyramid level.
    pub fn texture(&self, level: usize) -> &TexturePatch {
        &self.textures[level]
    }

    /// Half extent of the patch grid in local units.
    pub fn half_extent(&self) -> i32 {
        self.textures.first().map(|t| t.half_extent).unwrap_or(0)
    }
}

/// Evaluate a surfel point in world coordinates:
/// `(X0 + t) + R * J0 * F * [u, v]`.
pub fn surfel_point(surfel: &Surfel, state: &SurfelState, local: (f64, f64)) -> Vec3 {
    let tangent = surfel.rest_jacobian * (state.deform * Vec2::new(local.0, local.1));
    surfel.rest_position + state.translation + state.rotation * tangent
}

/// Initialize rest position and tangent Jacobian from a depth map.
///
/// Returns `X0 = z * [xn, yn, 1]` and the 3x2 tangent Jacobian with respect
/// to normalized retina coordinates; depth partials use one-pixel central
/// differences converted to retina steps via the intrinsics.
pub fn init_surfel(
    depth: &DepthMap,
    k: &Intrinsics,
    pixel: (usize, usize),
) -> Result<(Vec3, Mat32), GeometryError> {
    let (x, y) = pixel;
    if x < 1 || y < 1 || x + 1 >= depth.width || y + 1 >= depth.height {
        return Err(GeometryError::InvalidDepth { x, y });
    }
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let sx = (x as i64 + dx) as usize;
            let sy = (y as i64 + dy) as usize;
            match depth.get(sx, sy) {
                Some(z) if z > 0.0 && z.is_finite() => {}
                _ => return Err(GeometryError::InvalidDepth { x, y }),
            }
        }
    }
    let z = depth.get(x, y).unwrap();
    let (xn, yn) = k.normalized(x as f64, y as f64);
    // One pixel in x is a retina step of 1/fx, so d z / d xn spans 2/fx.
    let dz_dx = (depth.get(x + 1, y).unwrap() - depth.get(x - 1, y).unwrap()) * k.fx / 2.0;
    let dz_dy = (depth.get(x, y + 1).unwrap() - depth.get(x, y - 1).unwrap()) * k.fy / 2.0;
    let position = Vec3::new(xn * z, yn * z, z);
    let jacobian = Mat32::new(
        z + xn * dz_dx,
        xn * dz_dy,
        yn * dz_dx,
        z + yn * dz_dy,
        dz_dx,
        dz_dy,
    );
    Ok((position, jacobian))
}

/// Rescale a retina-parametrized tangent Jacobian so one local unit projects
/// to one pixel at the anchor in the reference image.
pub fn pixel_local_jacobian(j_retina: &Mat32, k: &Intrinsics) -> Mat32 {
    let mut j = *j_retina;
    j.column_mut(0).scale_mut(1.0 / k.fx);
    j.column_mut(1).scale_mut(1.0 / k.fy);
    j
}

/// Rescale surfel depth and size by `mu > 0`, leaving all projections from a
/// camera at the origin unchanged (the growing-map ambiguity direction).
pub fn scale_surfel(surfel: &Surfel, state: &SurfelState, mu: f64) -> SurfelState {
    let mut scaled = state.clone();
    scaled.translation = (surfel.rest_position + state.translation) * mu - surfel.rest_position;
    scaled.deform = state.deform * mu;
    scaled
}
