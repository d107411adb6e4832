//! Evaluation metrics over predicted and ground-truth world trajectories.
//!
//! Joint inputs are in meters. Position errors are reported in millimeters,
//! jerk in units of 10 m/s³, penetration in cm³ and RTE in percent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{umeyama_align, SimilarityTransform, Vec3};
use crate::hand_model::{HandModel, NUM_JOINTS};
use crate::mesh::MeshIndex;
use crate::world::WorldTrajectory;

pub type Joints = [Vec3; NUM_JOINTS];

/// Frames per global-alignment segment.
pub const SEGMENT: usize = 128;
/// Voxel edge for the penetration volume, in meters.
pub const VOXEL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Align {
    None,
    Procrustes,
    /// Subtract the wrist joint per frame.
    Root,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMode {
    FirstTwo,
    Whole,
}

/// Per-frame joints of both hands; `None` where a hand is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSequence {
    pub fps: f64,
    pub frames: Vec<[Option<Joints>; 2]>,
}

impl JointSequence {
    pub fn from_world(world: &WorldTrajectory, models: [&HandModel; 2]) -> Self {
        let [l, r] = world.joints(models);
        Self {
            fps: world.fps,
            frames: l.into_iter().zip(r).map(|(a, b)| [a, b]).collect(),
        }
    }

    /// Single-hand sequence (in the left slot) from plain joint frames.
    pub fn single(fps: f64, joints: &[Joints]) -> Self {
        Self {
            fps,
            frames: joints.iter().map(|j| [Some(*j), None]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn check_pair(pred: &JointSequence, gt: &JointSequence) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// (frame, hand, pred, gt) for every hand present in both sequences.
fn common<'a>(pred: &'a JointSequence, gt: &'a JointSequence) -> impl Iterator<Item = (usize, usize, &'a Joints, &'a Joints)> {
    pred.frames.iter().zip(&gt.frames).enumerate().flat_map(|(t, (p, g))| {
        (0..2).filter_map(move |h| match (&p[h], &g[h]) {
            (Some(a), Some(b)) => Some((t, h, a, b)),
            _ => None,
        })
    })
}

fn mean_error(pred: &Joints, gt: &Joints, xf: &SimilarityTransform) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (xf.apply(p) - g).norm()).sum::<f64>() / NUM_JOINTS as f64
}

/// Mean per-joint position error in millimeters.
pub fn mpjpe(pred: &JointSequence, gt: &JointSequence, align: Align) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (_, _, p, g) in common(pred, gt) {
        let xf = match align {
            Align::None => SimilarityTransform::identity(),
            Align::Root => SimilarityTransform {
                translation: g[0] - p[0],
                ..SimilarityTransform::identity()
            },
            Align::Procrustes => umeyama_align(p, g, true)?,
        };
        sum += mean_error(p, g, &xf);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidInput("no frame has the same hand in both sequences".into()));
    }
    Ok(1e3 * sum / count as f64)
}

/// Global MPJPE of each segment, in millimeters.
///
/// Each segment is aligned with one similarity fitted on every joint of its
/// first two frames (`FirstTwo`) or of all its frames (`Whole`).
pub fn global_mpjpe_segments(pred: &JointSequence, gt: &JointSequence, mode: GlobalMode, segment: usize) -> Result<Vec<f64>> {
    check_pair(pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::InvalidInput("global MPJPE needs at least 2 frames".into()));
    }
    let pairs: Vec<_> = common(pred, gt).collect();
    let mut out = Vec::new();
    for start in (0..pred.len()).step_by(segment.max(1)) {
        let end = (start + segment).min(pred.len());
        let seg: Vec<_> = pairs.iter().filter(|p| p.0 >= start && p.0 < end).collect();
        if seg.is_empty() {
            continue;
        }
        let fit_frames: Vec<usize> = {
            let mut f: Vec<usize> = seg.iter().map(|p| p.0).collect();
            f.dedup();
            match mode {
                GlobalMode::FirstTwo => f.into_iter().take(2).collect(),
                GlobalMode::Whole => f,
            }
        };
        let (src, dst): (Vec<Vec3>, Vec<Vec3>) = seg
            .iter()
            .filter(|p| fit_frames.contains(&p.0))
            .flat_map(|p| p.2.iter().copied().zip(p.3.iter().copied()))
            .unzip();
        let xf = umeyama_align(&src, &dst, true)?;
        let err = seg.iter().map(|p| mean_error(p.2, p.3, &xf)).sum::<f64>() / seg.len() as f64;
        out.push(1e3 * err);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("no frame has the same hand in both sequences".into()));
    }
    Ok(out)
}

pub fn global_mpjpe(pred: &JointSequence, gt: &JointSequence, mode: GlobalMode) -> Result<f64> {
    let s = global_mpjpe_segments(pred, gt, mode, SEGMENT)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

fn root_relative(j: &Joints) -> Joints {
    std::array::from_fn(|k| j[k] - j[0])
}

/// Acceleration error on root-relative joints.
///
/// Without division the result is in millimeters per frame²; with division
/// by Δt² it is in m/s².
pub fn acc_err(pred: &JointSequence, gt: &JointSequence, divide: bool) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 1..pred.len().saturating_sub(1) {
        for h in 0..2 {
            let get = |s: &JointSequence, k: usize| s.frames[k][h].as_ref().map(root_relative);
            let (Some(p0), Some(p1), Some(p2), Some(g0), Some(g1), Some(g2)) =
                (get(pred, t - 1), get(pred, t), get(pred, t + 1), get(gt, t - 1), get(gt, t), get(gt, t + 1))
            else {
                continue;
            };
            for k in 0..NUM_JOINTS {
                let ap = p0[k] - 2.0 * p1[k] + p2[k];
                let ag = g0[k] - 2.0 * g1[k] + g2[k];
                sum += (ap - ag).norm();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("acceleration error needs three consecutive common frames".into()));
    }
    let mean = sum / count as f64;
    Ok(if divide { mean * pred.fps * pred.fps } else { 1e3 * mean })
}

/// Mean norm of the third difference of world joints, in units of 10 m/s³.
pub fn jerk(seq: &JointSequence) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..seq.len().saturating_sub(3) {
        for h in 0..2 {
            let w: Option<Vec<&Joints>> = (t..t + 4).map(|k| seq.frames[k][h].as_ref()).collect();
            let Some(w) = w else { continue };
            for k in 0..NUM_JOINTS {
                let d3 = w[3][k] - 3.0 * w[2][k] + 3.0 * w[1][k] - w[0][k];
                sum += d3.norm();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("jerk needs four consecutive frames of one hand".into()));
    }
    Ok(sum / count as f64 * seq.fps.powi(3) / 10.0)
}

/// Root trajectory error in percent of the ground-truth path length.
pub fn rte(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput("root trajectories differ in length".into()));
    }
    let delta: f64 = gt.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    if !(delta > 0.0) {
        return Err(Error::Degenerate("ground-truth root path has zero length; RTE is undefined".into()));
    }
    let xf = umeyama_align(pred, gt, false)?;
    let mean = pred.iter().zip(gt).map(|(p, g)| (xf.apply(p) - g).norm()).sum::<f64>() / pred.len() as f64;
    Ok(100.0 * mean / delta)
}

/// Mean RTE over the hands, using wrist positions on frames common to both sequences.
pub fn rte_hands(pred: &JointSequence, gt: &JointSequence) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut values = Vec::new();
    for h in 0..2 {
        let (p, g): (Vec<Vec3>, Vec<Vec3>) = common(pred, gt).filter(|c| c.1 == h).map(|c| (c.2[0], c.3[0])).unzip();
        if p.len() >= 3 {
            values.push(rte(&p, &g)?);
        }
    }
    if values.is_empty() {
        return Err(Error::InvalidInput("RTE needs at least three common frames of one hand".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn overlap(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(a0, a1) in a {
        for &(b0, b1) in b {
            let (lo, hi) = (a0.max(b0), a1.min(b1));
            if hi > lo {
                out.push((lo, hi));
            }
        }
    }
    out
}

/// Volume inside both meshes in cm³, counted on a grid of `VOXEL` cells.
///
/// Cells tile the intersection of the two bounding boxes; a cell counts when
/// its center lies inside both meshes.
pub fn overlap_volume(a: &MeshIndex, b: &MeshIndex) -> f64 {
    let (alo, ahi) = a.bounds();
    let (blo, bhi) = b.bounds();
    let lo = alo.sup(&blo);
    let hi = ahi.inf(&bhi);
    if (0..3).any(|k| hi[k] <= lo[k]) {
        return 0.0;
    }
    let cells = |k: usize| ((hi[k] - lo[k]) / VOXEL).ceil() as usize;
    let center = |k: usize, i: usize| lo[k] + (i as f64 + 0.5) * VOXEL;
    let mut count = 0usize;
    for iy in 0..cells(1) {
        let y = center(1, iy);
        for iz in 0..cells(2) {
            let z = center(2, iz);
            for (x0, x1) in overlap(&a.inside_intervals(y, z), &b.inside_intervals(y, z)) {
                // cell centers lo.x + (i + 0.5)·h strictly inside (x0, x1)
                let first = ((x0 - lo.x) / VOXEL - 0.5).floor() as i64 + 1;
                let last = ((x1 - lo.x) / VOXEL - 0.5).ceil() as i64 - 1;
                let first = first.max(0);
                let last = last.min(cells(0) as i64 - 1);
                if last >= first {
                    count += (last - first + 1) as usize;
                }
            }
        }
    }
    count as f64 * VOXEL.powi(3) * 1e6
}

/// Mean overlap volume over frames where both hands are present, in cm³.
pub fn penetration_volume(world: &WorldTrajectory, models: [&HandModel; 2]) -> f64 {
    let frames: Vec<usize> = (0..world.frames()).filter(|&t| world.active[0][t] && world.active[1][t]).collect();
    if frames.is_empty() {
        return 0.0;
    }
    let total: f64 = frames
        .par_iter()
        .map(|&t| {
            let l = MeshIndex::new(models[0].vertices(&world.hands[0].state(t)), models[0].faces());
            let r = MeshIndex::new(models[1].vertices(&world.hands[1].state(t)), models[1].faces());
            overlap_volume(&l, &r)
        })
        .sum();
    total / frames.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub g_mpjpe: f64,
    pub ga_mpjpe: f64,
    pub acc_err_raw: f64,
    pub acc_err_div: f64,
    pub jerk: f64,
    pub rte: f64,
    pub pen_volume: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "sequence,mpjpe,pa_mpjpe,g_mpjpe,ga_mpjpe,acc_err_raw,acc_err_div,jerk,rte,pen_volume";

    pub fn csv_row(&self, name: &str) -> String {
        format!(
            "{name},{},{},{},{},{},{},{},{},{}",
            self.mpjpe,
            self.pa_mpjpe,
            self.g_mpjpe,
            self.ga_mpjpe,
            self.acc_err_raw,
            self.acc_err_div,
            self.jerk,
            self.rte,
            self.pen_volume
        )
    }

    /// Unweighted mean over sequences.
    pub fn mean(reports: &[EvalReport]) -> Option<EvalReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(EvalReport {
            mpjpe: avg(|r| r.mpjpe),
            pa_mpjpe: avg(|r| r.pa_mpjpe),
            g_mpjpe: avg(|r| r.g_mpjpe),
            ga_mpjpe: avg(|r| r.ga_mpjpe),
            acc_err_raw: avg(|r| r.acc_err_raw),
            acc_err_div: avg(|r| r.acc_err_div),
            jerk: avg(|r| r.jerk),
            rte: avg(|r| r.rte),
            pen_volume: avg(|r| r.pen_volume),
        })
    }
}

/// Full report for one sequence. MPJPE is root-aligned; jerk and penetration
/// describe the prediction alone.
pub fn evaluate(pred: &WorldTrajectory, gt: &WorldTrajectory, models: [&HandModel; 2]) -> Result<EvalReport> {
    let p = JointSequence::from_world(pred, models);
    let g = JointSequence::from_world(gt, models);
    Ok(EvalReport {
        mpjpe: mpjpe(&p, &g, Align::Root)?,
        pa_mpjpe: mpjpe(&p, &g, Align::Procrustes)?,
        g_mpjpe: global_mpjpe(&p, &g, GlobalMode::FirstTwo)?,
        ga_mpjpe: global_mpjpe(&p, &g, GlobalMode::Whole)?,
        acc_err_raw: acc_err(&p, &g, false)?,
        acc_err_div: acc_err(&p, &g, true)?,
        jerk: jerk(&p)?,
        rte: rte_hands(&p, &g)?,
        pen_volume: penetration_volume(pred, models),
    })
}
