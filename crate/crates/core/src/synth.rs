//! Synthetic two-hand scenes with known ground truth.
//!
//! Local pose is a sum of a few fixed pose synergies driven by sinusoids, so
//! every scenario is drawn from one low-dimensional family that a fitted prior
//! can represent. Synergies move each joint along its flexion and abduction axes
//! and stay inside the default biomechanical bounds. Roots follow natural cubic
//! splines. The world frame is the camera frame at frame 0, as a SLAM system
//! would report it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera_world::{CameraPose, CameraTrajectory};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle_to_matrix, matrix_to_axis_angle, project_perspective, Intrinsics, Mat3, Rotation, Vec2, Vec3};
use crate::hand_model::{HandModel, HandTrajectory, Handedness, PoseFrame, NUM_BETAS, NUM_JOINTS, NUM_POSE_JOINTS};
use crate::objectives::biomech::angle_frames;
use crate::prior::LocalPose;
use crate::tracks::{image_scale, Detection, HandSeed, ObservationTrack, WeakCam, MIN_TRACK_FRAMES};
use crate::world::WorldTrajectory;

/// Seed of the synergy family shared by every scenario.
const FAMILY_SEED: u64 = 0x5eed_f00d;
pub const NUM_SYNERGIES: usize = 4;
const ABDUCTION_SHARE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseMotion {
    /// Peak synergy excursion in degrees.
    pub amplitude_deg: f64,
    /// Constant flexion added to every joint, in degrees.
    pub base_flexion_deg: f64,
    pub frequencies_hz: Vec<f64>,
}

impl Default for PoseMotion {
    fn default() -> Self {
        Self {
            amplitude_deg: 10.0,
            base_flexion_deg: 5.0,
            frequencies_hz: vec![0.25, 0.6, 1.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RootMotion {
    /// Spline knots per hand (left, right), relative to the hand's rest position.
    /// Random knots are drawn when absent.
    pub control_points: Option<[Vec<[f64; 3]>; 2]>,
    pub random_knots: usize,
    /// Half-width of the box random knots are drawn from, in meters.
    pub range_m: f64,
    /// Distance between the two wrists at rest, in meters.
    pub separation_m: f64,
    /// Peak root rotation about the rest orientation, in degrees.
    pub rotation_deg: f64,
}

impl Default for RootMotion {
    fn default() -> Self {
        Self {
            control_points: None,
            random_knots: 5,
            range_m: 0.005,
            separation_m: 0.1,
            rotation_deg: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CameraMotion {
    Static,
    /// Rotation about the vertical axis through the scene center.
    Orbit { sweep_deg: f64 },
    /// Sinusoidal translation while looking at the scene center.
    Dolly { amplitude_m: [f64; 3], period_s: f64 },
    /// Camera center along a natural cubic spline through the knots (the first knot is moved to the origin).
    Spline { control_points: Vec<[f64; 3]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedNoise {
    pub theta_rad: f64,
    pub phi_rad: f64,
    pub tau_m: f64,
    pub beta: f64,
}

impl Default for SeedNoise {
    fn default() -> Self {
        Self {
            theta_rad: 0.05,
            phi_rad: 0.03,
            tau_m: 0.005,
            beta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub frames: usize,
    pub fps: f64,
    pub seed: u64,
    /// True world scale; emitted camera translations are divided by it.
    pub omega: f64,
    /// Distance from the first camera to the scene center, in meters.
    pub distance_m: f64,
    pub image_size: [f64; 2],
    pub focal: f64,
    pub pose: PoseMotion,
    pub root: RootMotion,
    pub camera: CameraMotion,
    pub beta_scale: f64,
    pub noise_px: f64,
    /// Fraction of (frame, hand) records dropped.
    pub occlusion_rate: f64,
    pub occlusion_max_gap: usize,
    pub seed_noise: SeedNoise,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            frames: 128,
            fps: 30.0,
            seed: 0,
            omega: 2.0,
            distance_m: 0.6,
            image_size: [1000.0, 1000.0],
            focal: 1000.0,
            pose: PoseMotion::default(),
            root: RootMotion::default(),
            camera: CameraMotion::Orbit { sweep_deg: 40.0 },
            beta_scale: 0.3,
            noise_px: 1.0,
            occlusion_rate: 0.1,
            occlusion_max_gap: 6,
            seed_noise: SeedNoise::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("scenario: {m}")));
        if self.frames < 2 {
            return bad("frames must be at least 2");
        }
        if !(self.fps > 0.0) || !(self.omega > 0.0) || !(self.distance_m > 0.0) || !(self.focal > 0.0) {
            return bad("fps, omega, distance_m and focal must be positive");
        }
        if !(self.image_size[0] > 0.0 && self.image_size[1] > 0.0) {
            return bad("image_size must be positive");
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return bad("occlusion_rate must lie in [0, 1)");
        }
        if self.occlusion_rate > 0.0 && self.occlusion_max_gap == 0 {
            return bad("occlusion_max_gap must be positive when occlusion is on");
        }
        if !(self.noise_px >= 0.0) || !(self.beta_scale >= 0.0) {
            return bad("noise_px and beta_scale must be non-negative");
        }
        let n = &self.seed_noise;
        if [n.theta_rad, n.phi_rad, n.tau_m, n.beta].iter().any(|v| !(*v >= 0.0)) {
            return bad("seed noise must be non-negative");
        }
        if self.pose.frequencies_hz.is_empty() {
            return bad("pose needs at least one frequency");
        }
        if let Some(cp) = &self.root.control_points {
            if cp.iter().any(|c| c.is_empty()) {
                return bad("root control points need at least one knot per hand");
            }
        } else if self.root.random_knots == 0 {
            return bad("random_knots must be positive");
        }
        if let CameraMotion::Spline { control_points } = &self.camera {
            if control_points.is_empty() {
                return bad("camera spline needs at least one knot");
            }
        }
        if let CameraMotion::Dolly { period_s, .. } = &self.camera {
            if !(*period_s > 0.0) {
                return bad("dolly period must be positive");
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: 0.5 * self.image_size[0],
            cy: 0.5 * self.image_size[1],
        }
    }
}

/// Everything a scenario produces.
#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub gt: WorldTrajectory,
    /// Camera with metric translations.
    pub metric_camera: CameraTrajectory,
    /// Camera as a SLAM system would report it: translations divided by ω.
    pub camera: CameraTrajectory,
    pub track: ObservationTrack,
    /// Frames whose record was dropped, per hand.
    pub occluded: [Vec<bool>; 2],
}

impl SynthBundle {
    pub const CAMERA_FILE: &'static str = "camera.json";
    pub const TRACK_FILE: &'static str = "tracks.jsonl";
    pub const GT_FILE: &'static str = "gt.jsonl";
    pub const GT_CAMERA_FILE: &'static str = "gt_camera.json";

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.camera.save(&dir.join(Self::CAMERA_FILE))?;
        self.metric_camera.save(&dir.join(Self::GT_CAMERA_FILE))?;
        crate::io::write_atomic(&dir.join(Self::TRACK_FILE), self.track.to_jsonl().as_bytes())?;
        self.gt.save(&dir.join(Self::GT_FILE))
    }
}

/// Fixed synergy weights: `[k][j] = (flexion, abduction)` with Σ_k |w| ≤ 1 per joint.
fn synergies() -> [[(f64, f64); NUM_POSE_JOINTS]; NUM_SYNERGIES] {
    let mut rng = ChaCha8Rng::seed_from_u64(FAMILY_SEED);
    let mut w = [[(0.0f64, 0.0f64); NUM_POSE_JOINTS]; NUM_SYNERGIES];
    for row in w.iter_mut() {
        for c in row.iter_mut() {
            *c = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
    }
    for j in 0..NUM_POSE_JOINTS {
        let sf: f64 = (0..NUM_SYNERGIES).map(|k| w[k][j].0.abs()).sum();
        let sa: f64 = (0..NUM_SYNERGIES).map(|k| w[k][j].1.abs()).sum();
        for row in w.iter_mut() {
            row[j] = (row[j].0 / sf, ABDUCTION_SHARE * row[j].1 / sa);
        }
    }
    w
}

/// Local pose sequence of one hand drawn from the synergy family.
pub fn pose_sequence(model: &HandModel, motion: &PoseMotion, frames: usize, fps: f64, rng: &mut impl Rng) -> Vec<LocalPose> {
    let axes = angle_frames(model);
    let w = synergies();
    let amp = motion.amplitude_deg.to_radians();
    let base = motion.base_flexion_deg.to_radians();
    // per synergy: (amplitude, phase) per frequency, amplitudes summing to one
    let drives: Vec<Vec<(f64, f64)>> = (0..NUM_SYNERGIES)
        .map(|_| {
            let raw: Vec<(f64, f64)> = motion
                .frequencies_hz
                .iter()
                .map(|_| (rng.random_range(0.05..1.0), rng.random_range(0.0..std::f64::consts::TAU)))
                .collect();
            let total: f64 = raw.iter().map(|r| r.0).sum();
            raw.into_iter().map(|(a, p)| (a / total, p)).collect()
        })
        .collect();
    (0..frames)
        .map(|t| {
            let time = t as f64 / fps;
            let a: Vec<f64> = drives
                .iter()
                .map(|d| {
                    d.iter()
                        .zip(&motion.frequencies_hz)
                        .map(|((amp_f, phase), f)| amp_f * (std::f64::consts::TAU * f * time + phase).sin())
                        .sum()
                })
                .collect();
            std::array::from_fn(|j| {
                let flex = base + amp * (0..NUM_SYNERGIES).map(|k| w[k][j].0 * a[k]).sum::<f64>();
                let abd = amp * (0..NUM_SYNERGIES).map(|k| w[k][j].1 * a[k]).sum::<f64>();
                axes[j].flexion_axis() * flex + axes[j].abduction_axis() * abd
            })
        })
        .collect()
}

/// Natural cubic spline through `knots` placed evenly over `[0, frames − 1]`, sampled per frame.
pub fn natural_spline(knots: &[Vec3], frames: usize) -> Vec<Vec3> {
    let k = knots.len();
    if k == 1 || frames == 1 {
        return vec![knots[0]; frames];
    }
    let h = (frames - 1) as f64 / (k - 1) as f64;
    // second derivatives with M_0 = M_{k-1} = 0 (Thomas algorithm)
    let mut m = vec![Vec3::zeros(); k];
    if k > 2 {
        let n = k - 2;
        let mut c = vec![0.0; n];
        let mut d = vec![Vec3::zeros(); n];
        for i in 0..n {
            let rhs = (knots[i + 2] - knots[i + 1] * 2.0 + knots[i]) * (6.0 / (h * h));
            let (a, b, cc) = (if i > 0 { 1.0 } else { 0.0 }, 4.0, if i + 1 < n { 1.0 } else { 0.0 });
            let denom = b - a * if i > 0 { c[i - 1] } else { 0.0 };
            c[i] = cc / denom;
            d[i] = (rhs - if i > 0 { d[i - 1] * a } else { Vec3::zeros() }) / denom;
        }
        for i in (0..n).rev() {
            m[i + 1] = d[i] - if i + 1 < n { m[i + 2] * c[i] } else { Vec3::zeros() };
        }
    }
    (0..frames)
        .map(|t| {
            let x = t as f64 / h;
            let i = (x.floor() as usize).min(k - 2);
            let u = x - i as f64;
            let (y0, y1, m0, m1) = (knots[i], knots[i + 1], m[i], m[i + 1]);
            let a = 1.0 - u;
            y0 * a + y1 * u + (m0 * (a * a * a - a) + m1 * (u * u * u - u)) * (h * h / 6.0)
        })
        .collect()
}

fn look_at(center: &Vec3, target: &Vec3) -> Mat3 {
    let z = (target - center).normalize();
    let x = Vec3::y().cross(&z).normalize();
    let y = z.cross(&x);
    Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

/// Metric camera poses (world to camera) with the first pose at identity.
fn camera_poses(cfg: &ScenarioConfig) -> Vec<CameraPose> {
    let n = cfg.frames;
    let target = Vec3::new(0.0, 0.0, cfg.distance_m);
    let pose = |r: Mat3, c: Vec3| CameraPose {
        rotation: Rotation::from_matrix_unchecked(r),
        translation: -(r * c),
    };
    match &cfg.camera {
        CameraMotion::Static => vec![CameraPose::identity(); n],
        CameraMotion::Orbit { sweep_deg } => (0..n)
            .map(|t| {
                let a = sweep_deg.to_radians() * t as f64 / (n - 1) as f64;
                let rcw = axis_angle_to_matrix(&(Vec3::y() * a));
                let c = target + rcw * Vec3::new(0.0, 0.0, -cfg.distance_m);
                pose(rcw.transpose(), c)
            })
            .collect(),
        CameraMotion::Dolly { amplitude_m, period_s } => (0..n)
            .map(|t| {
                let s = (std::f64::consts::TAU * t as f64 / (cfg.fps * period_s)).sin();
                let c = Vec3::from(*amplitude_m) * s;
                pose(look_at(&c, &target), c)
            })
            .collect(),
        CameraMotion::Spline { control_points } => {
            let first = Vec3::from(control_points[0]);
            let knots: Vec<Vec3> = control_points.iter().map(|p| Vec3::from(*p) - first).collect();
            natural_spline(&knots, n)
                .into_iter()
                .map(|c| pose(look_at(&c, &target), c))
                .collect()
        }
    }
}

/// Dropped frames: gaps of at most `max_gap`, separated by visible runs long
/// enough to survive track cleaning.
fn occlusion_mask(frames: usize, rate: f64, max_gap: usize, rng: &mut impl Rng) -> Result<Vec<bool>> {
    let target = (rate * frames as f64).round() as usize;
    let mut mask = vec![false; frames];
    if target == 0 {
        return Ok(mask);
    }
    let mut gaps = Vec::new();
    let mut left = target;
    while left > 0 {
        let g = rng.random_range(1..=max_gap.min(left));
        gaps.push(g);
        left -= g;
    }
    let visible = frames - target;
    let reserved = MIN_TRACK_FRAMES * (gaps.len() - 1);
    if visible < reserved {
        return Err(Error::Validation(format!(
            "occlusion rate {rate} with max gap {max_gap} leaves visible runs shorter than {MIN_TRACK_FRAMES} frames"
        )));
    }
    // spread the spare visible frames over the gaps.len() + 1 slots
    let mut slots = vec![0usize; gaps.len() + 1];
    for (i, s) in slots.iter_mut().enumerate() {
        if i > 0 && i < gaps.len() {
            *s = MIN_TRACK_FRAMES;
        }
    }
    for _ in 0..visible - reserved {
        let i = rng.random_range(0..slots.len());
        slots[i] += 1;
    }
    // leading or trailing runs shorter than the minimum would be dropped by cleaning
    for end in [0, slots.len() - 1] {
        if slots[end] > 0 && slots[end] < MIN_TRACK_FRAMES {
            let spare = slots[end];
            slots[end] = 0;
            slots[1.min(gaps.len())] += spare;
        }
    }
    let mut t = slots[0];
    for (g, run) in gaps.iter().zip(&slots[1..]) {
        mask[t..t + g].iter_mut().for_each(|m| *m = true);
        t += g + run;
    }
    Ok(mask)
}

fn gaussian(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    }
}

fn gaussian3(rng: &mut impl Rng, sigma: f64) -> Vec3 {
    Vec3::new(gaussian(rng, sigma), gaussian(rng, sigma), gaussian(rng, sigma))
}

/// Generates ground truth, camera files and the observation track of one scenario.
pub fn generate(cfg: &ScenarioConfig, models: [&HandModel; 2]) -> Result<SynthBundle> {
    cfg.validate()?;
    for (h, hand) in Handedness::BOTH.into_iter().enumerate() {
        if models[h].handedness() != hand {
            return Err(Error::InvalidInput(format!("model {h} must be the {} hand", hand.as_str())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.frames;
    let center = Vec3::new(0.0, 0.0, cfg.distance_m);
    let k = cfg.intrinsics();

    let mut trajectories = Vec::with_capacity(2);
    for h in 0..2 {
        let poses = pose_sequence(models[h], &cfg.pose, n, cfg.fps, &mut rng);
        let side = if h == 0 { -0.5 } else { 0.5 };
        let rest = center + Vec3::new(side * cfg.root.separation_m, 0.0, 0.0);
        let knots: Vec<Vec3> = match &cfg.root.control_points {
            Some(cp) => cp[h].iter().map(|p| rest + Vec3::from(*p)).collect(),
            None => (0..cfg.root.random_knots)
                .map(|_| {
                    rest + Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ) * cfg.root.range_m
                })
                .collect(),
        };
        let roots = natural_spline(&knots, n);
        let rot_amp = cfg.root.rotation_deg.to_radians();
        let rot_freq: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.5));
        let rot_phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
        let beta: [f64; NUM_BETAS] = std::array::from_fn(|_| gaussian(&mut rng, cfg.beta_scale));
        let frames: Vec<PoseFrame> = (0..n)
            .map(|t| {
                let time = t as f64 / cfg.fps;
                let wobble = Vec3::from_fn(|i, _| rot_amp * (std::f64::consts::TAU * rot_freq[i] * time + rot_phase[i]).sin());
                PoseFrame {
                    theta: poses[t],
                    phi: wobble,
                    tau: roots[t],
                }
            })
            .collect();
        trajectories.push(HandTrajectory::new(Handedness::BOTH[h], cfg.fps, beta, frames));
    }
    let mut it = trajectories.into_iter();
    let gt = WorldTrajectory {
        fps: cfg.fps,
        omega: cfg.omega,
        hands: [it.next().unwrap(), it.next().unwrap()],
        active: [vec![true; n], vec![true; n]],
    };

    let poses = camera_poses(cfg);
    let metric_camera = CameraTrajectory {
        fps: cfg.fps,
        intrinsics: Some(k),
        image_size: Some(cfg.image_size),
        poses: poses.clone(),
    };
    let camera = CameraTrajectory {
        poses: poses
            .iter()
            .map(|p| CameraPose {
                rotation: p.rotation,
                translation: p.translation / cfg.omega,
            })
            .collect(),
        ..metric_camera.clone()
    };

    let occluded = [
        occlusion_mask(n, cfg.occlusion_rate, cfg.occlusion_max_gap, &mut rng)?,
        occlusion_mask(n, cfg.occlusion_rate, cfg.occlusion_max_gap, &mut rng)?,
    ];
    let mut track = ObservationTrack::empty(n);
    for t in 0..n {
        let cam = &poses[t];
        let r = *cam.rotation.matrix();
        for h in 0..2 {
            let hand = Handedness::BOTH[h];
            let world_state = gt.hands[h].state(t);
            let joints = models[h].joints(&world_state);
            let cam_joints: Vec<Vec3> = joints.iter().map(|j| r * j + cam.translation).collect();
            if let Some(j) = cam_joints.iter().position(|p| p.z <= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "camera motion puts {} hand joint {j} behind the camera at frame {t}",
                    hand.as_str()
                )));
            }
            // noise is drawn for occluded records too so the mask does not shift the stream
            let noise: Vec<Vec2> = (0..NUM_JOINTS)
                .map(|_| Vec2::new(gaussian(&mut rng, cfg.noise_px), gaussian(&mut rng, cfg.noise_px)))
                .collect();
            let sn = &cfg.seed_noise;
            let d_theta: Vec<Vec3> = (0..NUM_POSE_JOINTS).map(|_| gaussian3(&mut rng, sn.theta_rad)).collect();
            let d_phi = gaussian3(&mut rng, sn.phi_rad);
            let d_tau = gaussian3(&mut rng, sn.tau_m);
            let d_beta: Vec<f64> = (0..NUM_BETAS).map(|_| gaussian(&mut rng, sn.beta)).collect();
            if occluded[h][t] {
                continue;
            }
            let mut keypoints = [Vec2::zeros(); NUM_JOINTS];
            for j in 0..NUM_JOINTS {
                keypoints[j] = project_perspective(&cam_joints[j], &k).expect("depth checked") + noise[j];
            }
            let (lo, hi) = keypoints.iter().fold(
                (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY)),
                |(lo, hi), p| (lo.inf(p), hi.sup(p)),
            );
            let pad = 10.0;
            let cam_phi = matrix_to_axis_angle(&(r * axis_angle_to_matrix(&world_state.phi)));
            let cam_tau = r * world_state.tau + cam.translation + d_tau;
            track.hands[h][t].push(Detection {
                det: 0,
                bbox: [lo.x - pad, lo.y - pad, hi.x - lo.x + 2.0 * pad, hi.y - lo.y + 2.0 * pad],
                score: 0.95,
                keypoints,
                confidence: [0.9; NUM_JOINTS],
                seed: Some(HandSeed {
                    theta: std::array::from_fn(|j| world_state.theta[j] + d_theta[j]),
                    beta: std::array::from_fn(|b| world_state.beta[b] + d_beta[b]),
                    phi: matrix_to_axis_angle(&(axis_angle_to_matrix(&d_phi) * axis_angle_to_matrix(&cam_phi))),
                }),
                weak_cam: Some(WeakCam {
                    s: 2.0 * cfg.focal / (cam_tau.z * image_scale(&cfg.image_size)),
                    tx: cam_tau.x,
                    ty: cam_tau.y,
                }),
                image_size: cfg.image_size,
            });
        }
    }
    Ok(SynthBundle {
        gt,
        metric_camera,
        camera,
        track,
        occluded,
    })
}

/// Local pose sequences from the scenario family, for fitting a prior.
pub fn training_poses(model: &HandModel, motion: &PoseMotion, sequences: usize, frames: usize, fps: f64, seed: u64) -> Vec<Vec<LocalPose>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sequences).map(|_| pose_sequence(model, motion, frames, fps, &mut rng)).collect()
}
