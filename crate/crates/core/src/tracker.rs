//! The two tracking pipelines: independent per-surfel tracking with a fixed
//! camera, and joint camera + surfel tracking with an equilibrium
//! regularizer. Both run coarse-to-fine over an image pyramid and classify
//! outliers by ZNCC after the finest level.

use crate::geometry::{
    materialize_deform_with, se3_exp, so3_exp, DeformationModel, EquirealForm, Mat2, Mat3, Pose,
    Surfel, SurfelState, Vec3, Vec6,
};
use crate::imaging::{GrayImage, ImagePyramid, Intrinsics};
use crate::optimizer::{lm_solve, LmConfig, NlsProblem, NormalEquations, SolveReport};
use crate::photometric::{
    estimate_gain_bias, photometric_residuals, residual_jacobian, sample_intensities, zncc,
    ActiveParams,
};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::ops::AddAssign;

/// Tracking configuration; distances are in scene units.
#[derive(Debug, Clone)]
pub struct TrackConfig {
    pub model: DeformationModel,
    pub equireal_form: EquirealForm,
    /// Weight of the deformation-energy residuals (soft isometry).
    pub omega_iso: f64,
    /// Weight of the equilibrium regularizer in joint mode.
    pub omega_eq: f64,
    /// Isotropic standard deviation of the default equilibrium covariance;
    /// pick the expected motion amplitude.
    pub sigma_eq: f64,
    pub levels: usize,
    pub half_extent: i32,
    pub zncc_threshold: f64,
    pub saturation_cap: f64,
    /// Solver settings for the finest level.
    pub lm: LmConfig,
    /// Solver settings for the coarser levels. Fewer iterations: coarse
    /// levels only need to pull the state into the finer basin, and long
    /// coarse solves wander along the depth/lateral near-ambiguity of
    /// off-center patches.
    pub lm_coarse: LmConfig,
    /// Estimate gain/bias in closed form at each pyramid level before the
    /// level's solve.
    pub compensate_illumination: bool,
    /// Also optimize gain/bias as variables, initialized from the closed-form
    /// estimate. Freezing them instead leaves any estimation error to be
    /// absorbed by the weakly observable depth-scale direction.
    pub optimize_gain_bias: bool,
    /// Re-test outliers every frame and re-accept on ZNCC recovery.
    pub reaccept_outliers: bool,
    /// Surfels with fewer valid samples than this fraction are dropped for
    /// the frame.
    pub min_valid_fraction: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            model: DeformationModel::Isometry,
            equireal_form: EquirealForm::AsPrinted,
            omega_iso: 1.0,
            omega_eq: 1.0,
            sigma_eq: 50.0,
            levels: 3,
            half_extent: 11,
            zncc_threshold: 0.95,
            saturation_cap: 0.24,
            lm: LmConfig::default(),
            lm_coarse: LmConfig {
                max_iters: 12,
                ..LmConfig::default()
            },
            compensate_illumination: true,
            optimize_gain_bias: true,
            reaccept_outliers: true,
            min_valid_fraction: 0.5,
        }
    }
}

/// Soft anchor that removes the camera/map gauge freedom: position plus the
/// information matrix of the allowed surfel motion.
#[derive(Debug, Clone)]
pub struct EquilibriumAnchor {
    pub position: Vec3,
    /// Upper-triangular `L` with `L^T L = Sigma^-1`.
    sqrt_info: Mat3,
}

impl EquilibriumAnchor {
    pub fn isotropic(position: Vec3, sigma: f64) -> Self {
        assert!(sigma > 0.0);
        EquilibriumAnchor {
            position,
            sqrt_info: Mat3::identity() / sigma,
        }
    }

    /// Anchor with a full SPD information matrix.
    pub fn from_information(position: Vec3, information: Mat3) -> Option<Self> {
        let chol = information.cholesky()?;
        Some(EquilibriumAnchor {
            position,
            sqrt_info: chol.l().transpose(),
        })
    }

    /// Mean and covariance of a known trajectory, with a variance floor to
    /// keep the information matrix well defined on static tracks.
    pub fn from_trajectory(points: &[Vec3], min_sigma: f64) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let n = points.len() as f64;
        let mean = points.iter().sum::<Vec3>() / n;
        let mut cov = Mat3::zeros();
        for p in points {
            let d = p - mean;
            cov += d * d.transpose();
        }
        cov /= n;
        cov += Mat3::identity() * (min_sigma * min_sigma);
        Self::from_information(mean, cov.try_inverse()?)
    }

    pub fn sqrt_info(&self) -> &Mat3 {
        &self.sqrt_info
    }

    pub fn information(&self) -> Mat3 {
        self.sqrt_info.transpose() * self.sqrt_info
    }
}

/// Equilibrium residual `sqrt(omega) * L * (X0 + t - Xe)` and its Jacobian
/// blocks with respect to the surfel translation and rotation increments.
///
/// The surfel center implemented by the transform is `X0 + t`; rotation
/// moves only the tangent offsets, so its block is exactly zero.
pub fn equilibrium_residual(
    state: &SurfelState,
    surfel: &Surfel,
    anchor: &EquilibriumAnchor,
    omega: f64,
) -> (Vec3, Mat3, Mat3) {
    let sw = omega.sqrt();
    let center = surfel.rest_position + state.translation;
    let residual = anchor.sqrt_info * (center - anchor.position) * sw;
    (residual, anchor.sqrt_info * sw, Mat3::zeros())
}

/// Per-surfel result for one frame.
#[derive(Debug, Clone)]
pub struct SurfelRecord {
    pub id: usize,
    pub state: SurfelState,
    pub zncc: f64,
    pub inlier: bool,
    pub residual_rms: f64,
}

/// Solve report tagged with its origin (per-surfel solve or joint solve) and
/// pyramid level.
#[derive(Debug, Clone)]
pub struct TaggedReport {
    pub surfel: Option<usize>,
    pub level: usize,
    pub report: SolveReport,
}

#[derive(Debug, Clone)]
pub struct FrameResult {
    pub frame: usize,
    pub pose: Pose,
    pub surfels: Vec<SurfelRecord>,
    pub reports: Vec<TaggedReport>,
}

impl FrameResult {
    pub fn inlier_count(&self) -> usize {
        self.surfels.iter().filter(|s| s.inlier).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrackingLoss {
    pub frame: usize,
    pub inliers: usize,
}

#[derive(Debug, Clone)]
pub struct TrackOutcome {
    pub frames: Vec<FrameResult>,
    pub lost: Option<TrackingLoss>,
}

impl TrackOutcome {
    pub fn frames_processed(&self) -> usize {
        self.frames.len()
    }
}

/// Re-flag inliers of a frame result by ZNCC threshold.
pub fn classify_outliers(frame: &mut FrameResult, threshold: f64) {
    for rec in &mut frame.surfels {
        rec.inlier = rec.zncc >= threshold;
    }
}

/// ROC of a score against boolean ground-truth labels: `(threshold, TPR,
/// FPR)` rows swept over the observed scores, plus the rank-statistic AUC
/// (`None` when either class is empty).
pub fn roc_sweep(scored: &[(f64, bool)]) -> (Vec<(f64, f64, f64)>, Option<f64>) {
    let positives = scored.iter().filter(|(_, l)| *l).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return (Vec::new(), None);
    }
    let mut thresholds: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut curve = Vec::with_capacity(thresholds.len());
    for &threshold in &thresholds {
        let tp = scored.iter().filter(|(s, l)| *l && *s >= threshold).count();
        let fp = scored.iter().filter(|(s, l)| !*l && *s >= threshold).count();
        curve.push((
            threshold,
            tp as f64 / positives as f64,
            fp as f64 / negatives as f64,
        ));
    }
    // Mann-Whitney AUC with tie correction.
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum = 0.0;
    let mut i = 0usize;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &sorted[i..j] {
            if item.1 {
                rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let auc = (rank_sum - positives as f64 * (positives as f64 + 1.0) / 2.0)
        / (positives as f64 * negatives as f64);
    (curve, Some(auc))
}

// ---------------------------------------------------------------------------
// State encoding shared by the NLS problems. A surfel block is
// [t(3), R(9, row-major), deform params(k), gain, bias]; a camera block is
// [R(9, row-major), t(3)].

const SURFEL_FIXED_LEN: usize = 14;
const POSE_LEN: usize = 12;

fn encode_surfel(out: &mut Vec<f64>, state: &SurfelState, params: &[f64]) {
    out.extend_from_slice(state.translation.as_slice());
    for r in 0..3 {
        for c in 0..3 {
            out.push(state.rotation[(r, c)]);
        }
    }
    out.extend_from_slice(params);
    out.push(state.gain);
    out.push(state.bias);
}

fn decode_surfel(x: &[f64], model: DeformationModel, form: EquirealForm) -> (SurfelState, Vec<f64>) {
    let k = model.param_count();
    let translation = Vec3::new(x[0], x[1], x[2]);
    let rotation = Mat3::new(x[3], x[4], x[5], x[6], x[7], x[8], x[9], x[10], x[11]);
    let params = sanitize_params(model, &x[12..12 + k]);
    let deform = materialize_deform_with(model, &params, form)
        .expect("sanitized deformation parameters materialize");
    (
        SurfelState {
            translation,
            rotation,
            deform,
            gain: x[12 + k],
            bias: x[13 + k],
        },
        params,
    )
}

// Keep the equireal alpha away from its singularity while the optimizer
// explores.
fn sanitize_params(model: DeformationModel, params: &[f64]) -> Vec<f64> {
    let mut p = params.to_vec();
    if model == DeformationModel::Equireal && p[0].abs() < 1e-9 {
        p[0] = if p[0] < 0.0 { -1e-9 } else { 1e-9 };
    }
    p
}

fn encode_pose(out: &mut Vec<f64>, pose: &Pose) {
    for r in 0..3 {
        for c in 0..3 {
            out.push(pose.rotation[(r, c)]);
        }
    }
    out.extend_from_slice(pose.translation.as_slice());
}

fn decode_pose(x: &[f64]) -> Pose {
    Pose::new(
        Mat3::new(x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8]),
        Vec3::new(x[9], x[10], x[11]),
    )
}

fn vec_f(deform: &Mat2) -> Vec3 {
    Vec3::new(deform[(0, 0)], deform[(0, 1)], deform[(1, 1)])
}

// ---------------------------------------------------------------------------
// Per-surfel problem: photometric residuals (+ deformation energy for soft
// models) over translation, rotation, deformation parameters, and optionally
// gain/bias, with the camera fixed.

struct SurfelProblem<'a> {
    surfel: &'a Surfel,
    pose: Pose,
    image: &'a GrayImage,
    k: &'a Intrinsics,
    level: usize,
    model: DeformationModel,
    form: EquirealForm,
    omega_iso: f64,
    cap: f64,
    optimize_gain_bias: bool,
}

impl SurfelProblem<'_> {
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn active(&self) -> ActiveParams {
        ActiveParams {
            translation: true,
            rotation: true,
            deform: self.param_count() > 0,
            camera: false,
            gain_bias: self.optimize_gain_bias,
        }
    }

    fn energy_rows(&self) -> usize {
        if self.param_count() > 0 {
            3
        } else {
            0
        }
    }
}

impl NlsProblem for SurfelProblem<'_> {
    fn tangent_dim(&self) -> usize {
        6 + self.param_count() + if self.optimize_gain_bias { 2 } else { 0 }
    }

    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let (state, params) = decode_surfel(x.as_slice(), self.model, self.form);
        let block = photometric_residuals(
            self.surfel,
            &state,
            &self.pose,
            self.image,
            self.k,
            self.level,
            self.cap,
        );
        let n = block.residuals.len();
        let mut r = DVector::zeros(n + self.energy_rows());
        r.rows_mut(0, n).copy_from(&block.residuals);
        if self.energy_rows() > 0 {
            let f = materialize_deform_with(self.model, &params, self.form).unwrap();
            let dev = vec_f(&f) - Vec3::new(1.0, 0.0, 1.0);
            r.rows_mut(n, 3).copy_from(&(dev * self.omega_iso.sqrt()));
        }
        r
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (state, params) = decode_surfel(x.as_slice(), self.model, self.form);
        let block = residual_jacobian(
            self.surfel,
            &state,
            &self.pose,
            self.image,
            self.k,
            self.level,
            self.active(),
            self.cap,
        );
        let n = block.residuals.len();
        let k = self.param_count();
        let dim = self.tangent_dim();
        let mut j = DMatrix::zeros(n + self.energy_rows(), dim);
        j.view_mut((0, 0), (n, 6))
            .copy_from(&block.jacobian.columns(0, 6));
        if k > 0 {
            // Chain rule from the symmetric tensor to the model parameters.
            let dvec = self.model.vec_jacobian(&params, self.form).unwrap();
            let photo_f = block.jacobian.columns(6, 3);
            j.view_mut((0, 6), (n, k)).copy_from(&(photo_f * &dvec));
            let sw = self.omega_iso.sqrt();
            j.view_mut((n, 6), (3, k)).copy_from(&(dvec * sw));
        }
        if self.optimize_gain_bias {
            let gb_col = 6 + if k > 0 { 3 } else { 0 };
            j.view_mut((0, 6 + k), (n, 2))
                .copy_from(&block.jacobian.columns(gb_col, 2));
        }
        j
    }

    fn apply_increment(&self, x: &DVector<f64>, dx: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        apply_surfel_increment(
            out.as_mut_slice(),
            dx.as_slice(),
            self.param_count(),
            self.optimize_gain_bias,
        );
        out
    }
}

fn apply_surfel_increment(x: &mut [f64], dx: &[f64], param_count: usize, gain_bias: bool) {
    for i in 0..3 {
        x[i] += dx[i];
    }
    let rotation = Mat3::new(x[3], x[4], x[5], x[6], x[7], x[8], x[9], x[10], x[11])
        * so3_exp(&Vec3::new(dx[3], dx[4], dx[5]));
    for r in 0..3 {
        for c in 0..3 {
            x[3 + 3 * r + c] = rotation[(r, c)];
        }
    }
    for i in 0..param_count {
        x[12 + i] += dx[6 + i];
    }
    if gain_bias {
        x[12 + param_count] += dx[6 + param_count];
        x[13 + param_count] += dx[7 + param_count];
    }
}

// ---------------------------------------------------------------------------
// Joint problem: camera pose plus the states of the active surfels.
// Parameter order puts the camera block last so the dense factorization
// eliminates surfel blocks first (arrow structure).

#[derive(Clone, Copy, PartialEq, Eq)]
enum JointMode {
    /// Pose + surfel states + equilibrium regularizer.
    Full,
    /// Pose only; surfel states frozen (rigid-map tracking).
    PoseOnly,
}

struct JointProblem<'a> {
    surfels: Vec<&'a Surfel>,
    anchors: Vec<&'a EquilibriumAnchor>,
    image: &'a GrayImage,
    k: &'a Intrinsics,
    level: usize,
    model: DeformationModel,
    form: EquirealForm,
    omega_iso: f64,
    omega_eq: f64,
    cap: f64,
    optimize_gain_bias: bool,
    mode: JointMode,
}

impl JointProblem<'_> {
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn gb(&self) -> usize {
        if self.mode == JointMode::Full && self.optimize_gain_bias {
            2
        } else {
            0
        }
    }

    fn surfel_block(&self) -> usize {
        SURFEL_FIXED_LEN + self.param_count()
    }

    fn surfel_tangent(&self) -> usize {
        match self.mode {
            JointMode::Full => 6 + self.param_count() + self.gb(),
            JointMode::PoseOnly => 0,
        }
    }

    fn energy_rows(&self) -> usize {
        if self.mode == JointMode::Full && self.param_count() > 0 {
            3
        } else {
            0
        }
    }

    fn eq_rows(&self) -> usize {
        if self.mode == JointMode::Full && self.omega_eq > 0.0 {
            3
        } else {
            0
        }
    }

    fn pose_offset_state(&self) -> usize {
        self.surfels.len() * self.surfel_block()
    }

    fn camera_col(&self) -> usize {
        self.surfels.len() * self.surfel_tangent()
    }

    fn decode(&self, x: &DVector<f64>) -> (Vec<(SurfelState, Vec<f64>)>, Pose) {
        let sb = self.surfel_block();
        let states = (0..self.surfels.len())
            .map(|i| decode_surfel(&x.as_slice()[i * sb..(i + 1) * sb], self.model, self.form))
            .collect();
        let pose = decode_pose(&x.as_slice()[self.pose_offset_state()..]);
        (states, pose)
    }

    fn photo_active(&self) -> ActiveParams {
        ActiveParams {
            translation: self.mode == JointMode::Full,
            rotation: self.mode == JointMode::Full,
            deform: self.mode == JointMode::Full && self.param_count() > 0,
            camera: true,
            gain_bias: self.gb() > 0,
        }
    }

    fn rows_per_surfel(&self) -> usize {
        let patch = self.surfels[0].texture(self.level).len();
        patch + self.energy_rows() + self.eq_rows()
    }
}

impl NlsProblem for JointProblem<'_> {
    fn tangent_dim(&self) -> usize {
        self.camera_col() + 6
    }

    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let (states, pose) = self.decode(x);
        let per = self.rows_per_surfel();
        let mut r = DVector::zeros(per * self.surfels.len());
        for (i, surfel) in self.surfels.iter().enumerate() {
            let (state, params) = &states[i];
            let block = photometric_residuals(
                surfel, state, &pose, self.image, self.k, self.level, self.cap,
            );
            let n = block.residuals.len();
            r.rows_mut(i * per, n).copy_from(&block.residuals);
            let mut row = i * per + n;
            if self.energy_rows() > 0 {
                let f = materialize_deform_with(self.model, params, self.form).unwrap();
                let dev = (vec_f(&f) - Vec3::new(1.0, 0.0, 1.0)) * self.omega_iso.sqrt();
                r.rows_mut(row, 3).copy_from(&dev);
                row += 3;
            }
            if self.eq_rows() > 0 {
                let (re, _, _) = equilibrium_residual(state, surfel, self.anchors[i], self.omega_eq);
                r.rows_mut(row, 3).copy_from(&re);
            }
        }
        r
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (states, pose) = self.decode(x);
        let per = self.rows_per_surfel();
        let st = self.surfel_tangent();
        let dim = self.tangent_dim();
        let cam = self.camera_col();
        let mut j = DMatrix::zeros(per * self.surfels.len(), dim);
        for (i, surfel) in self.surfels.iter().enumerate() {
            let (state, params) = &states[i];
            let block = residual_jacobian(
                surfel,
                state,
                &pose,
                self.image,
                self.k,
                self.level,
                self.photo_active(),
                self.cap,
            );
            let n = block.residuals.len();
            let row0 = i * per;
            match self.mode {
                JointMode::Full => {
                    let k = self.param_count();
                    j.view_mut((row0, i * st), (n, 6))
                        .copy_from(&block.jacobian.columns(0, 6));
                    let mut cam_src = 6;
                    if k > 0 {
                        let dvec = self.model.vec_jacobian(params, self.form).unwrap();
                        let photo_f = block.jacobian.columns(6, 3);
                        j.view_mut((row0, i * st + 6), (n, k))
                            .copy_from(&(photo_f * &dvec));
                        cam_src = 9;
                        let sw = self.omega_iso.sqrt();
                        j.view_mut((row0 + n, i * st + 6), (3, k)).copy_from(&(dvec * sw));
                    }
                    j.view_mut((row0, cam), (n, 6))
                        .copy_from(&block.jacobian.columns(cam_src, 6));
                    if self.gb() > 0 {
                        j.view_mut((row0, i * st + 6 + k), (n, 2))
                            .copy_from(&block.jacobian.columns(cam_src + 6, 2));
                    }
                    if self.eq_rows() > 0 {
                        let (_, jt, _) =
                            equilibrium_residual(state, surfel, self.anchors[i], self.omega_eq);
                        let row = row0 + n + self.energy_rows();
                        j.view_mut((row, i * st), (3, 3)).copy_from(&jt);
                    }
                }
                JointMode::PoseOnly => {
                    j.view_mut((row0, cam), (n, 6))
                        .copy_from(&block.jacobian.columns(0, 6));
                }
            }
        }
        j
    }

    fn apply_increment(&self, x: &DVector<f64>, dx: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        let sb = self.surfel_block();
        let st = self.surfel_tangent();
        if self.mode == JointMode::Full {
            for i in 0..self.surfels.len() {
                apply_surfel_increment(
                    &mut out.as_mut_slice()[i * sb..(i + 1) * sb],
                    &dx.as_slice()[i * st..(i + 1) * st],
                    self.param_count(),
                    self.gb() > 0,
                );
            }
        }
        let pose = decode_pose(&x.as_slice()[self.pose_offset_state()..]);
        let mut xi = Vec6::zeros();
        for i in 0..6 {
            xi[i] = dx[self.camera_col() + i];
        }
        let new_pose = se3_exp(&xi).compose(&pose);
        let mut tail = Vec::with_capacity(POSE_LEN);
        encode_pose(&mut tail, &new_pose);
        out.as_mut_slice()[self.pose_offset_state()..].copy_from_slice(&tail);
        out
    }

    /// Block-sparse accumulation of `J^T J` and `J^T r`: each surfel couples
    /// only to itself and to the camera, so the dense product over the full
    /// Jacobian is never formed.
    fn normal_equations(&self, x: &DVector<f64>) -> NormalEquations {
        let (states, pose) = self.decode(x);
        let st = self.surfel_tangent();
        let dim = self.tangent_dim();
        let cam = self.camera_col();

        struct Contribution {
            h_ss: DMatrix<f64>,
            h_sc: DMatrix<f64>,
            h_cc: nalgebra::Matrix6<f64>,
            g_s: DVector<f64>,
            g_c: Vec6,
            cost: f64,
        }

        let parts: Vec<Contribution> = self
            .surfels
            .par_iter()
            .enumerate()
            .map(|(i, surfel)| {
                let (state, params) = &states[i];
                let block = residual_jacobian(
                    surfel,
                    state,
                    &pose,
                    self.image,
                    self.k,
                    self.level,
                    self.photo_active(),
                    self.cap,
                );
                let k = self.param_count();
                let (j_s, j_c) = match self.mode {
                    JointMode::Full => {
                        let mut j_s = DMatrix::zeros(block.residuals.len(), st);
                        j_s.view_mut((0, 0), (block.residuals.len(), 6))
                            .copy_from(&block.jacobian.columns(0, 6));
                        let cam_src = if k > 0 {
                            let dvec = self.model.vec_jacobian(params, self.form).unwrap();
                            let photo_f = block.jacobian.columns(6, 3);
                            j_s.view_mut((0, 6), (block.residuals.len(), k))
                                .copy_from(&(photo_f * &dvec));
                            9
                        } else {
                            6
                        };
                        if self.gb() > 0 {
                            j_s.view_mut((0, 6 + k), (block.residuals.len(), 2))
                                .copy_from(&block.jacobian.columns(cam_src + 6, 2));
                        }
                        (j_s, block.jacobian.columns(cam_src, 6).into_owned())
                    }
                    JointMode::PoseOnly => (
                        DMatrix::zeros(block.residuals.len(), 0),
                        block.jacobian.columns(0, 6).into_owned(),
                    ),
                };
                let r = &block.residuals;
                let mut h_ss = j_s.transpose() * &j_s;
                let h_sc = j_s.transpose() * &j_c;
                let h_cc = nalgebra::Matrix6::from_iterator(
                    (j_c.transpose() * &j_c).iter().copied(),
                );
                let mut g_s = j_s.transpose() * r;
                let g_c = Vec6::from_iterator((j_c.transpose() * r).iter().copied());
                let mut cost = block.cost();
                if self.mode == JointMode::Full && k > 0 {
                    let f = materialize_deform_with(self.model, params, self.form).unwrap();
                    let dev = (vec_f(&f) - Vec3::new(1.0, 0.0, 1.0)) * self.omega_iso.sqrt();
                    let dvec = self.model.vec_jacobian(params, self.form).unwrap() * self.omega_iso.sqrt();
                    for a in 0..k {
                        for b in 0..k {
                            h_ss[(6 + a, 6 + b)] += dvec.column(a).dot(&dvec.column(b));
                        }
                        g_s[6 + a] += dvec.column(a).dot(&dev);
                    }
                    cost += dev.norm_squared();
                }
                if self.eq_rows() > 0 {
                    let (re, jt, _) =
                        equilibrium_residual(state, surfel, self.anchors[i], self.omega_eq);
                    let info = jt.transpose() * jt;
                    for a in 0..3 {
                        for b in 0..3 {
                            h_ss[(a, b)] += info[(a, b)];
                        }
                        g_s[a] += jt.column(a).dot(&re);
                    }
                    cost += re.norm_squared();
                }
                Contribution {
                    h_ss,
                    h_sc,
                    h_cc,
                    g_s,
                    g_c,
                    cost,
                }
            })
            .collect();

        let mut hessian = DMatrix::zeros(dim, dim);
        let mut gradient = DVector::zeros(dim);
        let mut cost = 0.0;
        for (i, part) in parts.iter().enumerate() {
            if st > 0 {
                hessian
                    .view_mut((i * st, i * st), (st, st))
                    .copy_from(&part.h_ss);
                hessian
                    .view_mut((i * st, cam), (st, 6))
                    .copy_from(&part.h_sc);
                hessian
                    .view_mut((cam, i * st), (6, st))
                    .copy_from(&part.h_sc.transpose());
                gradient.rows_mut(i * st, st).add_assign(&part.g_s);
            }
            let mut cc = hessian.view_mut((cam, cam), (6, 6));
            cc += part.h_cc;
            gradient.rows_mut(cam, 6).add_assign(&part.g_c);
            cost += part.cost;
        }
        NormalEquations {
            hessian,
            gradient,
            cost,
        }
    }
}

/// Dense joint Jacobian (hard isometry, identity states) for spectrum
/// diagnostics: columns are all surfel tangents followed by the camera
/// block; rows are photometric residuals plus, when `omega_eq > 0`, the
/// equilibrium rows.
pub fn joint_identity_jacobian(
    surfels: &[Surfel],
    anchors: &[EquilibriumAnchor],
    pose: &Pose,
    image: &GrayImage,
    k: &Intrinsics,
    omega_eq: f64,
    cap: f64,
) -> DMatrix<f64> {
    let problem = JointProblem {
        surfels: surfels.iter().collect(),
        anchors: anchors.iter().collect(),
        image,
        k,
        level: 0,
        model: DeformationModel::Isometry,
        form: EquirealForm::AsPrinted,
        omega_iso: 1.0,
        omega_eq,
        cap,
        optimize_gain_bias: false,
        mode: JointMode::Full,
    };
    let mut x0 = Vec::new();
    for _ in surfels {
        encode_surfel(&mut x0, &SurfelState::identity(), &[]);
    }
    encode_pose(&mut x0, pose);
    problem.jacobian(&DVector::from_vec(x0))
}

// ---------------------------------------------------------------------------
// Pipelines.

struct SurfelTrack {
    state: SurfelState,
    params: Vec<f64>,
    inlier: bool,
}

fn initial_tracks(surfels: &[Surfel], config: &TrackConfig) -> Vec<SurfelTrack> {
    surfels
        .iter()
        .map(|_| SurfelTrack {
            state: SurfelState::identity(),
            params: config.model.identity_params(),
            inlier: true,
        })
        .collect()
}

/// ZNCC score and valid-sample fraction of a surfel at the finest level.
pub fn surfel_zncc(
    surfel: &Surfel,
    state: &SurfelState,
    pose: &Pose,
    image: &GrayImage,
    k: &Intrinsics,
) -> (f64, f64) {
    let samples = sample_intensities(surfel, state, pose, image, k, 0);
    let texture = surfel.texture(0);
    let mut t_vals = Vec::with_capacity(samples.len());
    let mut i_vals = Vec::with_capacity(samples.len());
    for (sample, tex) in samples.iter().zip(&texture.samples) {
        if let Some(i) = sample {
            t_vals.push(tex.value);
            i_vals.push(*i);
        }
    }
    let fraction = t_vals.len() as f64 / texture.len().max(1) as f64;
    (zncc(&t_vals, &i_vals), fraction)
}

fn estimate_surfel_gain_bias(
    surfel: &Surfel,
    state: &mut SurfelState,
    pose: &Pose,
    image: &GrayImage,
    k: &Intrinsics,
    level: usize,
) {
    let samples = sample_intensities(surfel, state, pose, image, k, level);
    let texture = surfel.texture(level);
    let mut t_vals = Vec::new();
    let mut i_vals = Vec::new();
    for (sample, tex) in samples.iter().zip(&texture.samples) {
        if let Some(i) = sample {
            t_vals.push(tex.value);
            i_vals.push(*i);
        }
    }
    if t_vals.len() >= 2 {
        let (gain, bias) = estimate_gain_bias(&t_vals, &i_vals);
        state.gain = gain;
        state.bias = bias;
    }
}

struct SurfelFrameSolve {
    state: SurfelState,
    params: Vec<f64>,
    zncc: f64,
    valid_fraction: f64,
    rms: f64,
    reports: Vec<(usize, SolveReport)>,
}

fn solve_surfel_frame(
    surfel: &Surfel,
    track: &SurfelTrack,
    pyramid: &ImagePyramid,
    pose: &Pose,
    k: &Intrinsics,
    config: &TrackConfig,
) -> SurfelFrameSolve {
    let mut state = track.state.clone();
    let mut params = track.params.clone();
    let mut reports = Vec::new();
    let levels = config.levels.min(pyramid.num_levels());
    for level in (0..levels).rev() {
        let image = pyramid.level(level);
        // Closed-form gain/bias from the current guess, frozen during the
        // level's solve. Re-estimating at each level keeps the estimate
        // unbiased once coarser levels have aligned the geometry.
        if config.compensate_illumination {
            estimate_surfel_gain_bias(surfel, &mut state, pose, image, k, level);
        }
        let problem = SurfelProblem {
            surfel,
            pose: *pose,
            image,
            k,
            level,
            model: config.model,
            form: config.equireal_form,
            omega_iso: config.omega_iso,
            cap: config.saturation_cap,
            optimize_gain_bias: config.optimize_gain_bias,
        };
        let mut x0 = Vec::with_capacity(SURFEL_FIXED_LEN + params.len());
        encode_surfel(&mut x0, &state, &params);
        let lm = if level == 0 { &config.lm } else { &config.lm_coarse };
        let (x, report) = lm_solve(&problem, DVector::from_vec(x0), lm);
        let (new_state, new_params) = decode_surfel(x.as_slice(), config.model, config.equireal_form);
        state = new_state;
        params = new_params;
        reports.push((level, report));
    }
    let (score, valid_fraction) = surfel_zncc(surfel, &state, pose, pyramid.level(0), k);
    let rms = photometric_residuals(
        surfel,
        &state,
        pose,
        pyramid.level(0),
        k,
        0,
        config.saturation_cap,
    )
    .rms();
    SurfelFrameSolve {
        state,
        params,
        zncc: score,
        valid_fraction,
        rms,
        reports,
    }
}

fn baseline_frame(
    frame: usize,
    pose: &Pose,
    surfels: &[Surfel],
    tracks: &[SurfelTrack],
    image: &GrayImage,
    k: &Intrinsics,
    config: &TrackConfig,
) -> FrameResult {
    let surfel_records = surfels
        .iter()
        .zip(tracks)
        .map(|(surfel, track)| {
            let (score, _) = surfel_zncc(surfel, &track.state, pose, image, k);
            SurfelRecord {
                id: surfel.id,
                state: track.state.clone(),
                zncc: score,
                inlier: score >= config.zncc_threshold,
                residual_rms: photometric_residuals(
                    surfel,
                    &track.state,
                    pose,
                    image,
                    k,
                    0,
                    config.saturation_cap,
                )
                .rms(),
            }
        })
        .collect();
    FrameResult {
        frame,
        pose: *pose,
        surfels: surfel_records,
        reports: Vec::new(),
    }
}

/// Per-surfel tracking with a fixed camera. Frame 0 is the reference; each
/// subsequent frame initializes from the previous solution, optimizes
/// coarse-to-fine, and classifies by ZNCC. Outlier states are carried
/// forward unchanged. The pipeline never aborts on a surfel.
pub fn track_static(
    pyramids: &[ImagePyramid],
    surfels: &[Surfel],
    pose: &Pose,
    k: &Intrinsics,
    config: &TrackConfig,
) -> TrackOutcome {
    let mut tracks = initial_tracks(surfels, config);
    let mut frames = Vec::with_capacity(pyramids.len());
    if pyramids.is_empty() {
        return TrackOutcome {
            frames,
            lost: None,
        };
    }
    frames.push(baseline_frame(
        0,
        pose,
        surfels,
        &tracks,
        pyramids[0].level(0),
        k,
        config,
    ));

    for (frame, pyramid) in pyramids.iter().enumerate().skip(1) {
        let solves: Vec<Option<SurfelFrameSolve>> = surfels
            .par_iter()
            .zip(tracks.par_iter())
            .map(|(surfel, track)| {
                if !track.inlier && !config.reaccept_outliers {
                    return None;
                }
                Some(solve_surfel_frame(surfel, track, pyramid, pose, k, config))
            })
            .collect();

        let mut records = Vec::with_capacity(surfels.len());
        let mut reports = Vec::new();
        for ((surfel, track), solve) in surfels.iter().zip(&mut tracks).zip(solves) {
            match solve {
                Some(solve) => {
                    let accepted = solve.zncc >= config.zncc_threshold
                        && solve.valid_fraction >= config.min_valid_fraction;
                    if accepted {
                        track.state = solve.state.clone();
                        track.params = solve.params.clone();
                    }
                    track.inlier = accepted;
                    for (level, report) in solve.reports {
                        reports.push(TaggedReport {
                            surfel: Some(surfel.id),
                            level,
                            report,
                        });
                    }
                    records.push(SurfelRecord {
                        id: surfel.id,
                        state: if accepted {
                            solve.state
                        } else {
                            track.state.clone()
                        },
                        zncc: solve.zncc,
                        inlier: accepted,
                        residual_rms: solve.rms,
                    });
                }
                None => {
                    let (score, _) = surfel_zncc(surfel, &track.state, pose, pyramid.level(0), k);
                    records.push(SurfelRecord {
                        id: surfel.id,
                        state: track.state.clone(),
                        zncc: score,
                        inlier: false,
                        residual_rms: f64::INFINITY,
                    });
                }
            }
        }
        frames.push(FrameResult {
            frame,
            pose: *pose,
            surfels: records,
            reports,
        });
    }
    TrackOutcome {
        frames,
        lost: None,
    }
}

/// Joint camera + surfel tracking with the equilibrium regularizer. Outlier
/// surfels are excluded from the pose estimate and refit individually until
/// their ZNCC recovers. Tracking stops when fewer than 4 inliers remain.
pub fn track_deformable(
    pyramids: &[ImagePyramid],
    surfels: &[Surfel],
    anchors: &[EquilibriumAnchor],
    pose0: &Pose,
    k: &Intrinsics,
    config: &TrackConfig,
) -> TrackOutcome {
    assert_eq!(surfels.len(), anchors.len());
    track_joint(pyramids, surfels, Some(anchors), pose0, k, config, JointMode::Full)
}

/// Pose-only tracking against a frozen (rigid) map of surfels.
pub fn track_rigid_map(
    pyramids: &[ImagePyramid],
    surfels: &[Surfel],
    pose0: &Pose,
    k: &Intrinsics,
    config: &TrackConfig,
) -> TrackOutcome {
    track_joint(pyramids, surfels, None, pose0, k, config, JointMode::PoseOnly)
}

fn track_joint(
    pyramids: &[ImagePyramid],
    surfels: &[Surfel],
    anchors: Option<&[EquilibriumAnchor]>,
    pose0: &Pose,
    k: &Intrinsics,
    config: &TrackConfig,
    mode: JointMode,
) -> TrackOutcome {
    let mut tracks = initial_tracks(surfels, config);
    let mut pose = *pose0;
    let mut frames = Vec::with_capacity(pyramids.len());
    let mut lost = None;
    let default_anchors: Vec<EquilibriumAnchor>;
    let anchors: &[EquilibriumAnchor] = match anchors {
        Some(a) => a,
        None => {
            default_anchors = surfels
                .iter()
                .map(|s| EquilibriumAnchor::isotropic(s.rest_position, config.sigma_eq))
                .collect();
            &default_anchors
        }
    };

    if pyramids.is_empty() {
        return TrackOutcome { frames, lost };
    }
    frames.push(baseline_frame(
        0,
        &pose,
        surfels,
        &tracks,
        pyramids[0].level(0),
        k,
        config,
    ));

    for (frame, pyramid) in pyramids.iter().enumerate().skip(1) {
        // Pre-gate on the incoming image: surfels that already decorrelate
        // at their carried state (fresh occlusions, large appearance
        // changes) must not steer this frame's pose estimate.
        let pre_gate = 0.8 * config.zncc_threshold;
        let pre_scores: Vec<f64> = surfels
            .par_iter()
            .zip(tracks.par_iter())
            .map(|(surfel, track)| {
                surfel_zncc(surfel, &track.state, &pose, pyramid.level(0), k).0
            })
            .collect();
        let active: Vec<usize> = (0..surfels.len())
            .filter(|&i| tracks[i].inlier && pre_scores[i] >= pre_gate)
            .collect();
        if active.len() < 4 {
            lost = Some(TrackingLoss {
                frame,
                inliers: active.len(),
            });
            break;
        }
        let pre_frame: Vec<(SurfelState, Vec<f64>)> = tracks
            .iter()
            .map(|t| (t.state.clone(), t.params.clone()))
            .collect();

        let levels = config.levels.min(pyramid.num_levels());
        let mut reports = Vec::new();
        for level in (0..levels).rev() {
            let image = pyramid.level(level);
            if config.compensate_illumination && mode == JointMode::Full {
                for &i in &active {
                    let track = &mut tracks[i];
                    estimate_surfel_gain_bias(
                        &surfels[i],
                        &mut track.state,
                        &pose,
                        image,
                        k,
                        level,
                    );
                }
            }
            let problem = JointProblem {
                surfels: active.iter().map(|&i| &surfels[i]).collect(),
                anchors: active.iter().map(|&i| &anchors[i]).collect(),
                image,
                k,
                level,
                model: config.model,
                form: config.equireal_form,
                omega_iso: config.omega_iso,
                omega_eq: config.omega_eq,
                cap: config.saturation_cap,
                optimize_gain_bias: config.optimize_gain_bias,
                mode,
            };
            let mut x0 = Vec::with_capacity(problem.pose_offset_state() + POSE_LEN);
            for &i in &active {
                encode_surfel(&mut x0, &tracks[i].state, &tracks[i].params);
            }
            encode_pose(&mut x0, &pose);
            let lm = if level == 0 { &config.lm } else { &config.lm_coarse };
            let (x, report) = lm_solve(&problem, DVector::from_vec(x0), lm);
            let (states, new_pose) = problem.decode(&x);
            if mode == JointMode::Full {
                for (slot, &i) in active.iter().enumerate() {
                    let (state, params) = states[slot].clone();
                    tracks[i].state = state;
                    tracks[i].params = params;
                }
            }
            pose = new_pose;
            reports.push(TaggedReport {
                surfel: None,
                level,
                report,
            });
        }

        // Give excluded surfels a chance to recover against the new pose.
        if mode == JointMode::Full && config.reaccept_outliers {
            let refits: Vec<(usize, SurfelFrameSolve)> = (0..surfels.len())
                .filter(|i| !tracks[*i].inlier)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|i| {
                    (
                        i,
                        solve_surfel_frame(&surfels[i], &tracks[i], pyramid, &pose, k, config),
                    )
                })
                .collect();
            for (i, solve) in refits {
                let accepted = solve.zncc >= config.zncc_threshold
                    && solve.valid_fraction >= config.min_valid_fraction;
                if accepted {
                    tracks[i].state = solve.state;
                    tracks[i].params = solve.params;
                    tracks[i].inlier = true;
                }
                for (level, report) in solve.reports {
                    reports.push(TaggedReport {
                        surfel: Some(surfels[i].id),
                        level,
                        report,
                    });
                }
            }
        }

        // Classify everyone under the final pose; outliers revert.
        let scored: Vec<(f64, f64, f64)> = surfels
            .par_iter()
            .zip(tracks.par_iter())
            .map(|(surfel, track)| {
                let (score, fraction) =
                    surfel_zncc(surfel, &track.state, &pose, pyramid.level(0), k);
                let rms = photometric_residuals(
                    surfel,
                    &track.state,
                    &pose,
                    pyramid.level(0),
                    k,
                    0,
                    config.saturation_cap,
                )
                .rms();
                (score, fraction, rms)
            })
            .collect();

        let mut records = Vec::with_capacity(surfels.len());
        for (i, surfel) in surfels.iter().enumerate() {
            let (score, fraction, rms) = scored[i];
            let accepted = score >= config.zncc_threshold && fraction >= config.min_valid_fraction;
            if mode == JointMode::Full {
                if !accepted {
                    // Outlier for this frame: carry the pre-frame state.
                    tracks[i].state = pre_frame[i].0.clone();
                    tracks[i].params = pre_frame[i].1.clone();
                }
                tracks[i].inlier = accepted;
            }
            records.push(SurfelRecord {
                id: surfel.id,
                state: tracks[i].state.clone(),
                zncc: score,
                inlier: accepted,
                residual_rms: rms,
            });
        }
        frames.push(FrameResult {
            frame,
            pose,
            surfels: records,
            reports,
        });
    }
    TrackOutcome { frames, lost }
}
