//! Direct and sparse tracking of deformable surfaces from monocular grayscale
//! sequences.
//!
//! The map is a set of independent textured surfels (a 3D point with a
//! tangent basis and a texture patch). Each frame, surfel motion (rigid or
//! with a local deformation tensor) is recovered by minimizing a direct
//! photometric error with a trust-region Levenberg-Marquardt solver. A
//! joint mode additionally estimates the camera pose, with a per-surfel
//! equilibrium regularizer that removes the camera/map gauge freedom. The
//! [`synth`] module renders synthetic deforming scenes with exact ground
//! truth for verification.

pub mod diagnostics;
pub mod geometry;
pub mod imaging;
pub mod optimizer;
pub mod photometric;
pub mod synth;
pub mod tracker;

pub use geometry::{
    materialize_deform, scale_surfel, se3_exp, skew, so3_exp, surfel_point, DeformationModel,
    EquirealForm, Mat2, Mat3, Mat32, Pose, Surfel, SurfelState, Vec2, Vec3, Vec6,
};
pub use imaging::{DepthMap, GrayImage, ImagePyramid, Intrinsics};
pub use optimizer::{fd_jacobian, hessian_spectrum, lm_solve, LmConfig, NlsProblem, SolveReport};
pub use photometric::{ResidualBlock, TexturePatch};
pub use synth::{GroundTruth, Scene};
pub use tracker::{EquilibriumAnchor, FrameResult, TrackConfig, TrackOutcome};
