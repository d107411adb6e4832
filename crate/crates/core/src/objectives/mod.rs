//! Loss terms of the world-frame fitting stages and their analytic gradients.

pub mod biomech;
pub mod penetration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera_world::CameraTrajectory;
use crate::error::{Error, Result};
use crate::geometry::{
    axis_angle_jacobian, axis_angle_to_matrix, geodesic_grad, geodesic_sq_grad, pull_back_rotation_grad, Intrinsics,
    Mat3, Vec2, Vec3,
};
use crate::hand_model::{FkCache, HandModel, HandState, Handedness, NUM_BETAS, NUM_JOINTS, NUM_POSE_JOINTS};
use crate::prior::{HandPrior, LocalPose, MotionPrior};

pub use biomech::{BiomechBounds, BiomechTerm, BoundsDefaults};

/// Weights and robustifier settings shared by both stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub lambda_2d: f64,
    pub lambda_smooth: f64,
    pub lambda_cam: f64,
    pub lambda_theta: f64,
    pub lambda_beta: f64,
    pub lambda_z: f64,
    pub lambda_phi: f64,
    pub lambda_tau: f64,
    pub lambda_pen: f64,
    pub lambda_ja: f64,
    pub lambda_bl: f64,
    pub lambda_palm: f64,
    /// Geman–McClure scale in pixels.
    pub gm_sigma: f64,
    /// Multiply the robustifier by σ² so small residuals cost r² px².
    pub gm_scaled: bool,
    pub bounds: BoundsDefaults,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_2d: 0.001,
            lambda_smooth: 10.0,
            lambda_cam: 100.0,
            lambda_theta: 0.04,
            lambda_beta: 0.05,
            lambda_z: 200.0,
            lambda_phi: 2.0,
            lambda_tau: 10.0,
            lambda_pen: 10.0,
            lambda_ja: 1.0,
            lambda_bl: 1.0,
            lambda_palm: 1.0,
            gm_sigma: 100.0,
            gm_scaled: true,
            bounds: BoundsDefaults::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_2d", self.lambda_2d),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_cam", self.lambda_cam),
            ("lambda_theta", self.lambda_theta),
            ("lambda_beta", self.lambda_beta),
            ("lambda_z", self.lambda_z),
            ("lambda_phi", self.lambda_phi),
            ("lambda_tau", self.lambda_tau),
            ("lambda_pen", self.lambda_pen),
            ("lambda_ja", self.lambda_ja),
            ("lambda_bl", self.lambda_bl),
            ("lambda_palm", self.lambda_palm),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        if !(self.gm_sigma > 0.0 && self.gm_sigma.is_finite()) {
            return Err(Error::Validation(format!("gm_sigma must be positive, got {}", self.gm_sigma)));
        }
        Ok(())
    }
}

/// Geman–McClure on a squared residual: value and derivative w.r.t. the squared residual.
#[inline]
pub fn geman_mcclure(r2: f64, sigma: f64, scaled: bool) -> (f64, f64) {
    let s2 = sigma * sigma;
    let denom = r2 + s2;
    let k = if scaled { s2 } else { 1.0 };
    (k * r2 / denom, k * s2 / (denom * denom))
}

/// Keypoints and per-joint visibility for one hand in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub keypoints: [Vec2; NUM_JOINTS],
    pub mask: [bool; NUM_JOINTS],
}

/// Corrected camera of one frame: `x_c = rotation · x_w + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameCamera {
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Robust reprojection error of one hand in one frame.
///
/// Returns the unweighted value, gradient w.r.t. world joints, and gradients
/// w.r.t. the camera rotation matrix and translation.
pub fn reprojection(
    joints: &[Vec3; NUM_JOINTS],
    obs: &Observation,
    cam: &FrameCamera,
    k: &Intrinsics,
    sigma: f64,
    scaled: bool,
) -> (f64, [Vec3; NUM_JOINTS], Mat3, Vec3) {
    let mut value = 0.0;
    let mut d_joints = [Vec3::zeros(); NUM_JOINTS];
    let mut d_rot = Mat3::zeros();
    let mut d_trans = Vec3::zeros();
    for j in 0..NUM_JOINTS {
        if !obs.mask[j] {
            continue;
        }
        let p = cam.rotation * joints[j] + cam.translation;
        if p.z <= 0.0 {
            continue;
        }
        let iz = 1.0 / p.z;
        let u = k.fx * p.x * iz + k.cx;
        let v = k.fy * p.y * iz + k.cy;
        let r = Vec2::new(u, v) - obs.keypoints[j];
        let (rho, drho) = geman_mcclure(r.norm_squared(), sigma, scaled);
        value += rho;
        let gr = r * (2.0 * drho);
        let gp = Vec3::new(gr.x * k.fx * iz, gr.y * k.fy * iz, -(gr.x * k.fx * p.x + gr.y * k.fy * p.y) * iz * iz);
        d_joints[j] = cam.rotation.transpose() * gp;
        d_rot += gp * joints[j].transpose();
        d_trans += gp;
    }
    (value, d_joints, d_rot, d_trans)
}

/// `Σ ‖b − a‖²` over joints plus `Σ_j d(R(θ_b,j), R(θ_a,j))²`, with gradients.
pub fn smooth_pair(
    ja: &[Vec3; NUM_JOINTS],
    jb: &[Vec3; NUM_JOINTS],
    ta: &LocalPose,
    tb: &LocalPose,
) -> (f64, [Vec3; NUM_JOINTS], [Vec3; NUM_JOINTS], LocalPose, LocalPose) {
    let mut value = 0.0;
    let mut dja = [Vec3::zeros(); NUM_JOINTS];
    let mut djb = [Vec3::zeros(); NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        let d = jb[j] - ja[j];
        value += d.norm_squared();
        djb[j] = d * 2.0;
        dja[j] = -d * 2.0;
    }
    let mut dta = [Vec3::zeros(); NUM_POSE_JOINTS];
    let mut dtb = [Vec3::zeros(); NUM_POSE_JOINTS];
    for j in 0..NUM_POSE_JOINTS {
        let ra = axis_angle_to_matrix(&ta[j]);
        let rb = axis_angle_to_matrix(&tb[j]);
        let (d2, g_b, g_a) = geodesic_sq_grad(&rb, &ra);
        value += d2;
        dtb[j] = pull_back_rotation_grad(&axis_angle_jacobian(&tb[j]), &g_b);
        dta[j] = pull_back_rotation_grad(&axis_angle_jacobian(&ta[j]), &g_a);
    }
    (value, dja, djb, dta, dtb)
}

/// `Σ_t d(R_{t+1}, R_t)² + ‖τ_{t+1} − τ_t‖²` with gradients w.r.t. each matrix and translation.
pub fn camera_smoothness(rots: &[Mat3], trans: &[Vec3]) -> (f64, Vec<Mat3>, Vec<Vec3>) {
    let n = rots.len();
    let mut value = 0.0;
    let mut d_rot = vec![Mat3::zeros(); n];
    let mut d_trans = vec![Vec3::zeros(); n];
    for t in 1..n {
        let (d2, g_b, g_a) = geodesic_sq_grad(&rots[t], &rots[t - 1]);
        let dt = trans[t] - trans[t - 1];
        value += d2 + dt.norm_squared();
        d_rot[t] += g_b;
        d_rot[t - 1] += g_a;
        d_trans[t] += dt * 2.0;
        d_trans[t - 1] -= dt * 2.0;
    }
    (value, d_rot, d_trans)
}

/// Smoothness of a loaded camera trajectory.
pub fn loss_cam(camera: &CameraTrajectory) -> f64 {
    let rots: Vec<Mat3> = camera.poses.iter().map(|p| *p.rotation.matrix()).collect();
    let trans: Vec<Vec3> = camera.poses.iter().map(|p| p.translation).collect();
    camera_smoothness(&rots, &trans).0
}

/// `λ_θ Σ ‖θ‖² + λ_β ‖β‖²` for one hand's pose sequence.
pub fn loss_pose_shape(poses: &[LocalPose], beta: &[f64; NUM_BETAS], lambda_theta: f64, lambda_beta: f64) -> f64 {
    let pose: f64 = poses.iter().flat_map(|p| p.iter()).map(|v| v.norm_squared()).sum();
    lambda_theta * pose + lambda_beta * beta.iter().map(|b| b * b).sum::<f64>()
}

/// Quadratic part of the Gaussian negative log-likelihood, `Σ (z − μ)² / 2σ²`.
pub fn latent_penalty(z: &[f64], mu: &[f64], sigma: &[f64]) -> (f64, Vec<f64>) {
    let mut v = 0.0;
    let g = z
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((z, m), s)| {
            let d = z - m;
            v += d * d / (2.0 * s * s);
            d / (s * s)
        })
        .collect();
    (v, g)
}

/// Observations and presence of one hand over a chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct HandInputs {
    pub observations: Vec<Option<Observation>>,
    /// Frames on which the hand's state enters the objective.
    pub active: Vec<bool>,
}

impl HandInputs {
    pub fn any_active(&self) -> bool {
        self.active.iter().any(|&a| a)
    }
}

/// Frozen reference values for the prior terms of one hand.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    pub phi: Vec<Vec3>,
    pub tau: Vec<Vec3>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub struct PriorInputs<'a> {
    pub prior: &'a dyn MotionPrior,
    pub anchors: [Anchors; 2],
}

/// Everything fixed during one optimization phase.
pub struct Problem<'a> {
    pub models: [&'a HandModel; 2],
    pub biomech: [BiomechTerm; 2],
    pub intrinsics: Intrinsics,
    /// Loaded world-to-camera rotations per frame.
    pub slam_rotation: Vec<Mat3>,
    /// Loaded translations per frame, in the camera file's units.
    pub slam_translation: Vec<Vec3>,
    pub hands: [HandInputs; 2],
    /// Present for the prior-guided stage; enables the prior, biomechanical and penetration terms.
    pub stage3: Option<PriorInputs<'a>>,
    /// Per-frame penetration correspondences to use instead of detecting them on every evaluation.
    pub frozen_penetration: Option<Vec<Option<penetration::PenetrationPairs>>>,
}

impl Problem<'_> {
    pub fn frames(&self) -> usize {
        self.slam_rotation.len()
    }
}

/// Free variables of one hand.
#[derive(Debug, Clone, PartialEq)]
pub struct HandVars {
    pub beta: [f64; NUM_BETAS],
    pub phi: Vec<Vec3>,
    pub tau: Vec<Vec3>,
    /// Local pose, or the per-frame correction added to the decoded pose when `z` is non-empty.
    pub theta: Vec<LocalPose>,
    pub z: Vec<f64>,
}

impl HandVars {
    pub fn zeros(frames: usize, latent: usize) -> Self {
        Self {
            beta: [0.0; NUM_BETAS],
            phi: vec![Vec3::zeros(); frames],
            tau: vec![Vec3::zeros(); frames],
            theta: vec![[Vec3::zeros(); NUM_POSE_JOINTS]; frames],
            z: vec![0.0; latent],
        }
    }
}

/// All optimization variables (also used to hold gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Variables {
    pub hands: [HandVars; 2],
    pub omega: f64,
    /// Per-frame rotation delta (axis-angle), left-multiplied onto the loaded rotation.
    pub cam_rotation: Vec<Vec3>,
    /// Per-frame metric translation delta.
    pub cam_translation: Vec<Vec3>,
}

impl Variables {
    pub fn zeros_like(other: &Variables) -> Self {
        let t = other.cam_rotation.len();
        Self {
            hands: std::array::from_fn(|h| HandVars::zeros(t, other.hands[h].z.len())),
            omega: 0.0,
            cam_rotation: vec![Vec3::zeros(); t],
            cam_translation: vec![Vec3::zeros(); t],
        }
    }

    pub fn frames(&self) -> usize {
        self.cam_rotation.len()
    }

    /// Effective local pose per frame.
    pub fn poses(&self, h: usize, prior: Option<&dyn MotionPrior>) -> Vec<LocalPose> {
        let hv = &self.hands[h];
        match prior {
            Some(p) if !hv.z.is_empty() => {
                let mut dec = HandPrior::new(p, Handedness::BOTH[h]).decode(&hv.z, hv.theta.len());
                for (d, c) in dec.iter_mut().zip(&hv.theta) {
                    for j in 0..NUM_POSE_JOINTS {
                        d[j] += c[j];
                    }
                }
                dec
            }
            _ => hv.theta.clone(),
        }
    }

    pub fn state(&self, h: usize, t: usize, pose: &LocalPose) -> HandState {
        HandState {
            theta: *pose,
            beta: self.hands[h].beta,
            phi: self.hands[h].phi[t],
            tau: self.hands[h].tau[t],
            handedness: Handedness::BOTH[h],
        }
    }

    /// Camera of frame `t` after applying the deltas and scale.
    pub fn camera(&self, problem: &Problem, t: usize) -> FrameCamera {
        FrameCamera {
            rotation: axis_angle_to_matrix(&self.cam_rotation[t]) * problem.slam_rotation[t],
            translation: problem.slam_translation[t] * self.omega + self.cam_translation[t],
        }
    }
}

/// Unweighted term values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TermValues {
    pub l2d: f64,
    pub smooth: f64,
    pub cam: f64,
    pub pose: f64,
    pub shape: f64,
    pub z: f64,
    pub phi: f64,
    pub tau: f64,
    pub pen: f64,
    pub ja: f64,
    pub bl: f64,
    pub palm: f64,
}

impl TermValues {
    /// Each term multiplied by its weight.
    pub fn weighted(&self, c: &ObjectiveConfig) -> TermValues {
        TermValues {
            l2d: c.lambda_2d * self.l2d,
            smooth: c.lambda_smooth * self.smooth,
            cam: c.lambda_cam * self.cam,
            pose: c.lambda_theta * self.pose,
            shape: c.lambda_beta * self.shape,
            z: c.lambda_z * self.z,
            phi: c.lambda_phi * self.phi,
            tau: c.lambda_tau * self.tau,
            pen: c.lambda_pen * self.pen,
            ja: c.lambda_ja * self.ja,
            bl: c.lambda_bl * self.bl,
            palm: c.lambda_palm * self.palm,
        }
    }

    pub fn sum(&self) -> f64 {
        self.l2d
            + self.smooth
            + self.cam
            + self.pose
            + self.shape
            + self.z
            + self.phi
            + self.tau
            + self.pen
            + self.ja
            + self.bl
            + self.palm
    }

    pub fn total(&self, c: &ObjectiveConfig) -> f64 {
        self.weighted(c).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub terms: TermValues,
    pub total: f64,
    pub grad: Option<Variables>,
}

struct FrameEval {
    state: HandState,
    joints: [Vec3; NUM_JOINTS],
    cache: FkCache,
    vertices: Option<Vec<Vec3>>,
}

#[derive(Clone)]
struct FrameGrad {
    d_joints: [Vec3; NUM_JOINTS],
    d_theta: LocalPose,
    d_phi: Vec3,
    d_tau: Vec3,
    d_verts: Option<Vec<Vec3>>,
}

impl FrameGrad {
    fn zero() -> Self {
        Self {
            d_joints: [Vec3::zeros(); NUM_JOINTS],
            d_theta: [Vec3::zeros(); NUM_POSE_JOINTS],
            d_phi: Vec3::zeros(),
            d_tau: Vec3::zeros(),
            d_verts: None,
        }
    }
}

/// Penetration correspondences of every frame where both hands are active.
pub fn penetration_pairs(problem: &Problem, vars: &Variables) -> Vec<Option<penetration::PenetrationPairs>> {
    let prior = problem.stage3.as_ref().map(|s| s.prior);
    let poses: [Vec<LocalPose>; 2] = std::array::from_fn(|h| vars.poses(h, prior));
    (0..problem.frames())
        .into_par_iter()
        .map(|t| {
            if !(problem.hands[0].active[t] && problem.hands[1].active[t]) {
                return None;
            }
            let verts = |h: usize| problem.models[h].vertices(&vars.state(h, t, &poses[h][t]));
            let m = problem.models;
            Some(penetration::frame_pairs(&verts(0), m[0].faces(), &verts(1), m[1].faces()))
        })
        .collect()
}

/// Objective value, per-term breakdown and (optionally) gradient.
///
/// Stage II terms are always included; the prior-guided terms are added when
/// `problem.stage3` is set. A non-positive ω evaluates to `+∞`.
pub fn evaluate(problem: &Problem, vars: &Variables, cfg: &ObjectiveConfig, want_grad: bool) -> Evaluation {
    let n = problem.frames();
    if !(vars.omega > 0.0) {
        return Evaluation {
            terms: TermValues::default(),
            total: f64::INFINITY,
            grad: want_grad.then(|| Variables::zeros_like(vars)),
        };
    }
    let prior = problem.stage3.as_ref().map(|s| s.prior);
    let stage3 = problem.stage3.is_some();
    let mut terms = TermValues::default();

    let cams: Vec<FrameCamera> = (0..n).map(|t| vars.camera(problem, t)).collect();
    let poses: [Vec<LocalPose>; 2] = std::array::from_fn(|h| vars.poses(h, prior));
    let both: Vec<bool> = (0..n)
        .map(|t| problem.hands[0].active[t] && problem.hands[1].active[t])
        .collect();
    let need_verts = stage3 && cfg.lambda_pen > 0.0;

    let evals: [Vec<Option<FrameEval>>; 2] = std::array::from_fn(|h| {
        let model = problem.models[h];
        (0..n)
            .into_par_iter()
            .map(|t| {
                if !problem.hands[h].active[t] {
                    return None;
                }
                let state = vars.state(h, t, &poses[h][t]);
                let (joints, cache) = model.joints_with_cache(&state);
                let vertices = (need_verts && both[t]).then(|| model.vertices_from_cache(&state, &cache));
                Some(FrameEval {
                    state,
                    joints,
                    cache,
                    vertices,
                })
            })
            .collect()
    });

    let mut grads: [Vec<FrameGrad>; 2] = std::array::from_fn(|_| vec![FrameGrad::zero(); n]);
    let mut d_cam_rot = vec![Mat3::zeros(); n];
    let mut d_cam_trans = vec![Vec3::zeros(); n];

    // reprojection
    if cfg.lambda_2d > 0.0 {
        for h in 0..2 {
            let per_frame: Vec<Option<(f64, [Vec3; NUM_JOINTS], Mat3, Vec3)>> = (0..n)
                .into_par_iter()
                .map(|t| {
                    let (Some(e), Some(obs)) = (&evals[h][t], &problem.hands[h].observations[t]) else {
                        return None;
                    };
                    Some(reprojection(&e.joints, obs, &cams[t], &problem.intrinsics, cfg.gm_sigma, cfg.gm_scaled))
                })
                .collect();
            for (t, r) in per_frame.into_iter().enumerate() {
                if let Some((v, dj, dr, dt)) = r {
                    terms.l2d += v;
                    for j in 0..NUM_JOINTS {
                        grads[h][t].d_joints[j] += dj[j] * cfg.lambda_2d;
                    }
                    d_cam_rot[t] += dr * cfg.lambda_2d;
                    d_cam_trans[t] += dt * cfg.lambda_2d;
                }
            }
        }
    }

    // temporal smoothness of joints and local pose
    if cfg.lambda_smooth > 0.0 {
        for h in 0..2 {
            for t in 1..n {
                let (Some(a), Some(b)) = (&evals[h][t - 1], &evals[h][t]) else {
                    continue;
                };
                let (v, dja, djb, dta, dtb) = smooth_pair(&a.joints, &b.joints, &a.state.theta, &b.state.theta);
                terms.smooth += v;
                let w = cfg.lambda_smooth;
                for j in 0..NUM_JOINTS {
                    grads[h][t - 1].d_joints[j] += dja[j] * w;
                    grads[h][t].d_joints[j] += djb[j] * w;
                }
                for j in 0..NUM_POSE_JOINTS {
                    grads[h][t - 1].d_theta[j] += dta[j] * w;
                    grads[h][t].d_theta[j] += dtb[j] * w;
                }
            }
        }
    }

    let mut grad = want_grad.then(|| Variables::zeros_like(vars));

    // camera delta smoothness
    if cfg.lambda_cam > 0.0 && n > 1 {
        let rots: Vec<Mat3> = vars.cam_rotation.iter().map(axis_angle_to_matrix).collect();
        let (v, dr, dt) = camera_smoothness(&rots, &vars.cam_translation);
        terms.cam = v;
        if let Some(g) = grad.as_mut() {
            for t in 0..n {
                g.cam_rotation[t] +=
                    pull_back_rotation_grad(&axis_angle_jacobian(&vars.cam_rotation[t]), &dr[t]) * cfg.lambda_cam;
                g.cam_translation[t] += dt[t] * cfg.lambda_cam;
            }
        }
    }

    // pose and shape priors
    let mut d_corr: [Vec<LocalPose>; 2] = std::array::from_fn(|_| vec![[Vec3::zeros(); NUM_POSE_JOINTS]; n]);
    for h in 0..2 {
        let hv = &vars.hands[h];
        for t in 0..n {
            if !problem.hands[h].active[t] {
                continue;
            }
            for j in 0..NUM_POSE_JOINTS {
                terms.pose += hv.theta[t][j].norm_squared();
                d_corr[h][t][j] = hv.theta[t][j] * (2.0 * cfg.lambda_theta);
            }
        }
        if problem.hands[h].any_active() {
            terms.shape += hv.beta.iter().map(|b| b * b).sum::<f64>();
            if let Some(g) = grad.as_mut() {
                for b in 0..NUM_BETAS {
                    g.hands[h].beta[b] += 2.0 * cfg.lambda_beta * hv.beta[b];
                }
            }
        }
    }

    if let Some(s3) = &problem.stage3 {
        for h in 0..2 {
            let hv = &vars.hands[h];
            let anchors = &s3.anchors[h];
            if !hv.z.is_empty() && problem.hands[h].any_active() {
                let (v, dz) = latent_penalty(&hv.z, &anchors.mu, &anchors.sigma);
                terms.z += v;
                if let Some(g) = grad.as_mut() {
                    for (gz, d) in g.hands[h].z.iter_mut().zip(dz) {
                        *gz += cfg.lambda_z * d;
                    }
                }
            }
            for t in 0..n {
                if !problem.hands[h].active[t] {
                    continue;
                }
                let r = axis_angle_to_matrix(&hv.phi[t]);
                let (d, g_r, _) = geodesic_grad(&r, &axis_angle_to_matrix(&anchors.phi[t]));
                terms.phi += d;
                grads[h][t].d_phi += pull_back_rotation_grad(&axis_angle_jacobian(&hv.phi[t]), &g_r) * cfg.lambda_phi;
                let dt = hv.tau[t] - anchors.tau[t];
                terms.tau += dt.norm_squared();
                grads[h][t].d_tau += dt * (2.0 * cfg.lambda_tau);
            }

            if cfg.lambda_ja > 0.0 || cfg.lambda_bl > 0.0 || cfg.lambda_palm > 0.0 {
                let weights = [cfg.lambda_ja, cfg.lambda_bl, cfg.lambda_palm];
                let model = problem.models[h];
                let bio = &problem.biomech[h];
                let per_frame: Vec<Option<(biomech::BioValue, LocalPose, [Vec3; NUM_JOINTS])>> = (0..n)
                    .into_par_iter()
                    .map(|t| {
                        let e = evals[h][t].as_ref()?;
                        let mut dth = [Vec3::zeros(); NUM_POSE_JOINTS];
                        let mut dj = [Vec3::zeros(); NUM_JOINTS];
                        let v = bio.evaluate(model, &e.state.theta, &e.joints, weights, &mut dth, &mut dj);
                        Some((v, dth, dj))
                    })
                    .collect();
                for (t, r) in per_frame.into_iter().enumerate() {
                    if let Some((v, dth, dj)) = r {
                        terms.ja += v.ja;
                        terms.bl += v.bl;
                        terms.palm += v.palm;
                        for j in 0..NUM_POSE_JOINTS {
                            grads[h][t].d_theta[j] += dth[j];
                        }
                        for j in 0..NUM_JOINTS {
                            grads[h][t].d_joints[j] += dj[j];
                        }
                    }
                }
            }
        }

        if need_verts {
            let faces = [problem.models[0].faces(), problem.models[1].faces()];
            let per_frame: Vec<Option<(f64, Vec<Vec3>, Vec<Vec3>)>> = (0..n)
                .into_par_iter()
                .map(|t| {
                    let vl = evals[0][t].as_ref()?.vertices.as_ref()?;
                    let vr = evals[1][t].as_ref()?.vertices.as_ref()?;
                    match &problem.frozen_penetration {
                        Some(pairs) => Some(penetration::loss_from_pairs(vl, vr, pairs[t].as_ref()?)),
                        None => Some(penetration::loss_from_pairs(
                            vl,
                            vr,
                            &penetration::frame_pairs(vl, faces[0], vr, faces[1]),
                        )),
                    }
                })
                .collect();
            for (t, r) in per_frame.into_iter().enumerate() {
                if let Some((v, mut dl, mut dr)) = r {
                    terms.pen += v;
                    if v > 0.0 {
                        dl.iter_mut().for_each(|d| *d *= cfg.lambda_pen);
                        dr.iter_mut().for_each(|d| *d *= cfg.lambda_pen);
                        grads[0][t].d_verts = Some(dl);
                        grads[1][t].d_verts = Some(dr);
                    }
                }
            }
        }
    }

    let total = terms.total(cfg);
    let Some(mut g) = grad else {
        return Evaluation {
            terms,
            total,
            grad: None,
        };
    };

    // camera chain: R' = Exp(δr) R, t' = ω τ^c + δτ
    for t in 0..n {
        let dr = d_cam_rot[t] * problem.slam_rotation[t].transpose();
        g.cam_rotation[t] += pull_back_rotation_grad(&axis_angle_jacobian(&vars.cam_rotation[t]), &dr);
        g.cam_translation[t] += d_cam_trans[t];
        g.omega += problem.slam_translation[t].dot(&d_cam_trans[t]);
    }

    for h in 0..2 {
        let model = problem.models[h];
        let fg = &grads[h];
        let ev = &evals[h];
        let states: Vec<Option<crate::hand_model::StateGrad>> = (0..n)
            .into_par_iter()
            .map(|t| {
                let e = ev[t].as_ref()?;
                let mut sg = model.backward(&e.state, &e.cache, &fg[t].d_joints, fg[t].d_verts.as_deref());
                for j in 0..NUM_POSE_JOINTS {
                    sg.theta[j] += fg[t].d_theta[j];
                }
                sg.phi += fg[t].d_phi;
                sg.tau += fg[t].d_tau;
                Some(sg)
            })
            .collect();
        let hv = &vars.hands[h];
        let gh = &mut g.hands[h];
        let mut d_pose = vec![[Vec3::zeros(); NUM_POSE_JOINTS]; n];
        for (t, sg) in states.into_iter().enumerate() {
            if let Some(sg) = sg {
                gh.phi[t] += sg.phi;
                gh.tau[t] += sg.tau;
                for b in 0..NUM_BETAS {
                    gh.beta[b] += sg.beta[b];
                }
                d_pose[t] = sg.theta;
            }
            for j in 0..NUM_POSE_JOINTS {
                gh.theta[t][j] += d_pose[t][j] + d_corr[h][t][j];
            }
        }
        if let (Some(p), false) = (prior, hv.z.is_empty()) {
            let dz = HandPrior::new(p, Handedness::BOTH[h]).decode_backward(&hv.z, &d_pose);
            for (gz, d) in gh.z.iter_mut().zip(dz) {
                *gz += d;
            }
        }
    }

    Evaluation {
        terms,
        total,
        grad: Some(g),
    }
}
