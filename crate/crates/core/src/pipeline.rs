//! End-to-end fitting: ingest, initialization, chunked optimization and stitching.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera_world::{cam_to_world, CameraPose, CameraTrajectory};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle_to_matrix, Intrinsics, Mat3, Rotation, Vec3};
use crate::hand_model::{HandModel, HandTrajectory, Handedness, PoseFrame, NUM_BETAS};
use crate::lbfgs::LbfgsConfig;
use crate::objectives::biomech::{BiomechBounds, BiomechTerm};
use crate::objectives::{HandInputs, HandVars, ObjectiveConfig, Observation, Problem, Variables};
use crate::optimize::{run_stage2, run_stage3, DiagRecord, Frozen, PhaseReport, RunContext, StageSchedule};
use crate::prior::{infill_slerp, MotionPrior, DEFAULT_WINDOW, MAX_INFILL_GAP};
use crate::tracks::{fuse_keypoints, seed_reprojections, suppress_hallucinations, CleanTrack, ObservationTrack};
use crate::world::WorldTrajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub objective: ObjectiveConfig,
    pub stage2: StageSchedule,
    pub stage3: StageSchedule,
    pub lbfgs: LbfgsConfig,
    pub chunk_size: usize,
    pub omega_init: f64,
    pub max_infill_gap: usize,
    pub skip_stage3: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::default(),
            stage2: StageSchedule::stage2(),
            stage3: StageSchedule::stage3(),
            lbfgs: LbfgsConfig::default(),
            chunk_size: DEFAULT_WINDOW,
            omega_init: 1.0,
            max_infill_gap: MAX_INFILL_GAP,
            skip_stage3: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.stage2.validate(&self.objective)?;
        self.stage3.validate(&self.objective)?;
        if self.chunk_size < 2 {
            return Err(Error::Validation("chunk_size must be at least 2".into()));
        }
        if !(self.omega_init > 0.0 && self.omega_init.is_finite()) {
            return Err(Error::Validation("omega_init must be positive".into()));
        }
        if self.lbfgs.history == 0 || !(self.lbfgs.c1 > 0.0 && self.lbfgs.c1 < self.lbfgs.c2 && self.lbfgs.c2 < 1.0) {
            return Err(Error::Validation("lbfgs needs history > 0 and 0 < c1 < c2 < 1".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> u8 {
        if self.skip_stage3 {
            2
        } else {
            3
        }
    }
}

/// Track after hallucination suppression and keypoint fusion, with solver inputs.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub track: CleanTrack,
    pub intrinsics: Intrinsics,
    pub hands: [HandInputs; 2],
}

pub fn ingest(
    track: &ObservationTrack,
    camera: &CameraTrajectory,
    models: [&HandModel; 2],
    max_gap: usize,
) -> Result<Ingested> {
    if camera.is_empty() {
        return Err(Error::InvalidInput("camera trajectory has no frames".into()));
    }
    let track = track.clone().with_frames(camera.len())?;
    let clean = suppress_hallucinations(&track);
    let fused = fuse_keypoints(&clean, &seed_reprojections(&clean, models));
    let intrinsics = camera.resolve_intrinsics(fused.image_size())?;
    let hands = std::array::from_fn(|h| {
        let hand = &fused.hands[h];
        HandInputs {
            observations: hand
                .frames
                .iter()
                .zip(&hand.visible)
                .map(|(f, vis)| {
                    f.as_ref().map(|d| Observation {
                        keypoints: d.keypoints,
                        mask: *vis,
                    })
                })
                .collect(),
            active: hand.active_mask(max_gap),
        }
    });
    Ok(Ingested {
        track: fused,
        intrinsics,
        hands,
    })
}

/// World-frame starting point from the per-frame seeds at scale `omega`.
///
/// Seeds are lifted to the world with the SLAM camera, short gaps are filled by
/// slerp and the shape is the mean of the seed shapes.
pub fn initialize(ingested: &Ingested, camera: &CameraTrajectory, omega: f64, max_gap: usize) -> Result<Variables> {
    let n = camera.len();
    let mut hands: Vec<HandVars> = Vec::with_capacity(2);
    for hand in Handedness::BOTH {
        let h = hand.index();
        let clean = &ingested.track.hands[h];
        let mut beta = [0.0; NUM_BETAS];
        let mut count = 0usize;
        let lifted: Vec<Option<PoseFrame>> = (0..n)
            .map(|t| {
                let state = clean.frames[t].as_ref()?.seed_state(hand, ingested.intrinsics.fx)?;
                for (b, s) in beta.iter_mut().zip(state.beta) {
                    *b += s;
                }
                count += 1;
                let pose = &camera.poses[t];
                Some(PoseFrame::from_state(&cam_to_world(&state, &pose.rotation, &pose.translation, omega)))
            })
            .collect();
        let active = &ingested.hands[h].active;
        if count == 0 {
            if active.iter().any(|&a| a) {
                return Err(Error::InvalidInput(format!(
                    "{} hand has detections but none carries a seed and weak camera",
                    hand.as_str()
                )));
            }
            hands.push(HandVars::zeros(n, 0));
            continue;
        }
        beta.iter_mut().for_each(|b| *b /= count as f64);
        let filled = hold_nearest(&infill_slerp(&lifted, max_gap));
        let mut hv = HandVars::zeros(n, 0);
        hv.beta = beta;
        for (t, f) in filled.iter().enumerate() {
            hv.theta[t] = f.theta;
            hv.phi[t] = f.phi;
            hv.tau[t] = f.tau;
        }
        hands.push(hv);
    }
    let mut it = hands.into_iter();
    Ok(Variables {
        hands: [it.next().unwrap(), it.next().unwrap()],
        omega,
        cam_rotation: vec![Vec3::zeros(); n],
        cam_translation: vec![Vec3::zeros(); n],
    })
}

/// Fills every remaining hole with the nearest earlier frame, or the first known one.
fn hold_nearest(frames: &[Option<PoseFrame>]) -> Vec<PoseFrame> {
    let first = frames.iter().flatten().next().copied().unwrap_or_else(PoseFrame::rest);
    let mut last = first;
    frames
        .iter()
        .map(|f| {
            if let Some(f) = f {
                last = *f;
            }
            last
        })
        .collect()
}

pub struct PipelineInputs<'a> {
    pub track: &'a ObservationTrack,
    pub camera: &'a CameraTrajectory,
    pub models: [&'a HandModel; 2],
    pub prior: Option<&'a dyn MotionPrior>,
    /// Per-hand bounds; derived from the objective config when absent.
    pub bounds: Option<[BiomechBounds; 2]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChunkReport {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    /// Scale after this chunk; fixed from the first chunk on.
    pub omega: f64,
    pub stage2_seconds: f64,
    pub stage3_seconds: f64,
    pub phases: Vec<PhaseReport>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub world: WorldTrajectory,
    /// Result after the second stage, before the prior stage.
    pub stage2: WorldTrajectory,
    /// SLAM trajectory with the optimized deltas applied, translation in metric units.
    pub camera: CameraTrajectory,
    pub chunks: Vec<ChunkReport>,
    pub stages: u8,
}

/// Chunk boundaries `[start, end)` covering `frames`.
pub fn chunk_ranges(frames: usize, size: usize) -> Vec<(usize, usize)> {
    (0..frames).step_by(size.max(1)).map(|s| (s, (s + size).min(frames))).collect()
}

/// Full-sequence solver state assembled from per-chunk results.
struct Assembled {
    vars: Variables,
}

impl Assembled {
    fn store(&mut self, start: usize, chunk: &Variables, poses: &[Vec<[Vec3; 15]>; 2]) {
        self.vars.omega = chunk.omega;
        for h in 0..2 {
            let dst = &mut self.vars.hands[h];
            let src = &chunk.hands[h];
            dst.beta = src.beta;
            for t in 0..chunk.frames() {
                dst.theta[start + t] = poses[h][t];
                dst.phi[start + t] = src.phi[t];
                dst.tau[start + t] = src.tau[t];
            }
        }
        for t in 0..chunk.frames() {
            self.vars.cam_rotation[start + t] = chunk.cam_rotation[t];
            self.vars.cam_translation[start + t] = chunk.cam_translation[t];
        }
    }
}

fn slice_vars(v: &Variables, s: usize, e: usize) -> Variables {
    Variables {
        hands: std::array::from_fn(|h| {
            let hv = &v.hands[h];
            HandVars {
                beta: hv.beta,
                phi: hv.phi[s..e].to_vec(),
                tau: hv.tau[s..e].to_vec(),
                theta: hv.theta[s..e].to_vec(),
                z: Vec::new(),
            }
        }),
        omega: v.omega,
        cam_rotation: v.cam_rotation[s..e].to_vec(),
        cam_translation: v.cam_translation[s..e].to_vec(),
    }
}

fn slice_inputs(h: &HandInputs, s: usize, e: usize) -> HandInputs {
    HandInputs {
        observations: h.observations[s..e].to_vec(),
        active: h.active[s..e].to_vec(),
    }
}

/// Aligns translation across chunk boundaries.
///
/// At each boundary the later part of each hand's track is shifted so the
/// boundary step equals the mean of the steps on either side. The camera takes
/// the mean shift of the hands present there, so reprojections move only by the
/// difference between the two hands' corrections.
pub fn stitch(vars: &mut Variables, active: &[Vec<bool>; 2], slam: &CameraTrajectory, starts: &[usize]) -> Vec<[Vec3; 2]> {
    let n = vars.frames();
    let mut shifts = Vec::new();
    for &s in starts.iter().filter(|&&s| s >= 2 && s < n) {
        let d: [Vec3; 2] = std::array::from_fn(|h| {
            let tau = &vars.hands[h].tau;
            let before = tau[s - 1] - tau[s - 2];
            let step = if s + 1 < n { 0.5 * (before + (tau[s + 1] - tau[s])) } else { before };
            tau[s - 1] + step - tau[s]
        });
        let present: Vec<usize> = (0..2).filter(|&h| active[h][s - 1] || active[h][s]).collect();
        let cam = if present.is_empty() {
            Vec3::zeros()
        } else {
            present.iter().map(|&h| d[h]).sum::<Vec3>() / present.len() as f64
        };
        for h in 0..2 {
            for tau in &mut vars.hands[h].tau[s..] {
                *tau += d[h];
            }
        }
        for t in s..n {
            let r = axis_angle_to_matrix(&vars.cam_rotation[t]) * slam.poses[t].rotation.matrix();
            vars.cam_translation[t] -= r * cam;
        }
        shifts.push(d);
    }
    shifts
}

fn to_world(vars: &Variables, active: &[Vec<bool>; 2], fps: f64) -> WorldTrajectory {
    let hands = std::array::from_fn(|h| {
        let hv = &vars.hands[h];
        let frames = (0..vars.frames())
            .map(|t| PoseFrame {
                theta: hv.theta[t],
                phi: hv.phi[t],
                tau: hv.tau[t],
            })
            .collect();
        HandTrajectory::new(Handedness::BOTH[h], fps, hv.beta, frames)
    });
    WorldTrajectory {
        fps,
        omega: vars.omega,
        hands,
        active: active.clone(),
    }
}

/// Camera trajectory with the deltas applied, translations in metric units.
pub fn refined_camera(vars: &Variables, slam: &CameraTrajectory, intrinsics: Intrinsics) -> CameraTrajectory {
    let poses = slam
        .poses
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let r = axis_angle_to_matrix(&vars.cam_rotation[t]) * p.rotation.matrix();
            CameraPose {
                rotation: Rotation::from_matrix_unchecked(r),
                translation: p.translation * vars.omega + vars.cam_translation[t],
            }
        })
        .collect();
    CameraTrajectory {
        fps: slam.fps,
        intrinsics: Some(intrinsics),
        image_size: slam.image_size,
        poses,
    }
}

/// Runs both stages over 128-frame chunks (by default) and stitches the result.
///
/// Chunk k+1 starts from the last frame of chunk k: that frame's hand state and
/// camera delta seed the first frame, and scale and shape stay fixed at the
/// values found on the first chunk.
pub fn run(inputs: &PipelineInputs, cfg: &PipelineConfig, log: &mut dyn FnMut(DiagRecord)) -> Result<PipelineOutput> {
    cfg.validate()?;
    let prior = match (cfg.skip_stage3, inputs.prior) {
        (true, _) => None,
        (false, Some(p)) => {
            let longest = cfg.chunk_size.min(inputs.camera.len());
            if p.window() < longest {
                return Err(Error::InvalidInput(format!(
                    "prior window {} is shorter than the {longest}-frame chunks",
                    p.window()
                )));
            }
            Some(p)
        }
        (false, None) => return Err(Error::InvalidInput("the prior stage needs a motion prior".into())),
    };
    let camera = inputs.camera;
    let ingested = ingest(inputs.track, camera, inputs.models, cfg.max_infill_gap)?;
    let n = camera.len();
    let bounds = match &inputs.bounds {
        Some(b) => b.clone(),
        None => std::array::from_fn(|h| BiomechBounds::defaults_for(inputs.models[h], &cfg.objective.bounds)),
    };
    let biomech: [BiomechTerm; 2] = {
        let [bl, br] = bounds;
        [BiomechTerm::new(inputs.models[0], bl), BiomechTerm::new(inputs.models[1], br)]
    };
    let slam_rotation: Vec<Mat3> = camera.poses.iter().map(|p| *p.rotation.matrix()).collect();
    let slam_translation: Vec<Vec3> = camera.poses.iter().map(|p| p.translation).collect();
    let active = [ingested.hands[0].active.clone(), ingested.hands[1].active.clone()];

    let mut init = initialize(&ingested, camera, cfg.omega_init, cfg.max_infill_gap)?;
    let mut final_state = Assembled { vars: init.clone() };
    let mut stage2_state = Assembled { vars: init.clone() };
    let ranges = chunk_ranges(n, cfg.chunk_size);
    let mut reports = Vec::with_capacity(ranges.len());

    for (k, &(s, e)) in ranges.iter().enumerate() {
        let mut vars = slice_vars(&init, s, e);
        if k > 0 {
            let prev = &final_state.vars;
            vars.omega = prev.omega;
            for h in 0..2 {
                vars.hands[h].beta = prev.hands[h].beta;
                if active[h][s - 1] && active[h][s] {
                    vars.hands[h].theta[0] = prev.hands[h].theta[s - 1];
                    vars.hands[h].phi[0] = prev.hands[h].phi[s - 1];
                    vars.hands[h].tau[0] = prev.hands[h].tau[s - 1];
                }
            }
            vars.cam_rotation[0] = prev.cam_rotation[s - 1];
            vars.cam_translation[0] = prev.cam_translation[s - 1];
        }
        let mut problem = Problem {
            models: inputs.models,
            biomech: biomech.clone(),
            intrinsics: ingested.intrinsics,
            slam_rotation: slam_rotation[s..e].to_vec(),
            slam_translation: slam_translation[s..e].to_vec(),
            hands: std::array::from_fn(|h| slice_inputs(&ingested.hands[h], s, e)),
            stage3: None,
            frozen_penetration: None,
        };
        let mut ctx = RunContext {
            chunk: k,
            lbfgs: cfg.lbfgs,
            frozen: Frozen {
                scale: k > 0,
                shape: k > 0,
            },
            log: &mut *log,
        };
        let clock = Instant::now();
        let mut phases = run_stage2(&problem, &mut vars, &cfg.objective, &cfg.stage2, &mut ctx)?;
        let stage2_seconds = clock.elapsed().as_secs_f64();
        let plain = [vars.hands[0].theta.clone(), vars.hands[1].theta.clone()];
        stage2_state.store(s, &vars, &plain);

        let clock = Instant::now();
        match prior {
            Some(p) => {
                let (v3, more) = run_stage3(&mut problem, p, &vars, &cfg.objective, &cfg.stage3, &mut ctx)?;
                phases.extend(more);
                let poses = [v3.poses(0, Some(p)), v3.poses(1, Some(p))];
                final_state.store(s, &v3, &poses);
            }
            None => final_state.store(s, &vars, &plain),
        }
        let stage3_seconds = clock.elapsed().as_secs_f64();
        reports.push(ChunkReport {
            index: k,
            start: s,
            end: e,
            omega: final_state.vars.omega,
            stage2_seconds,
            stage3_seconds,
            phases,
        });
        if k == 0 && ranges.len() > 1 {
            // later chunks start from seeds lifted at the recovered scale
            init = initialize(&ingested, camera, final_state.vars.omega, cfg.max_infill_gap)?;
        }
    }

    let starts: Vec<usize> = ranges.iter().skip(1).map(|r| r.0).collect();
    let mut final_vars = final_state.vars;
    let mut stage2_vars = stage2_state.vars;
    stitch(&mut final_vars, &active, camera, &starts);
    stitch(&mut stage2_vars, &active, camera, &starts);
    Ok(PipelineOutput {
        world: to_world(&final_vars, &active, camera.fps),
        stage2: to_world(&stage2_vars, &active, camera.fps),
        camera: refined_camera(&final_vars, camera, ingested.intrinsics),
        chunks: reports,
        stages: cfg.stages(),
    })
}
