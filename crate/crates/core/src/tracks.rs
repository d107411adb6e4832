//! Detector track ingestion and cleaning.
//!
//! Records arrive one per (frame, hand, detection) as JSON Lines. Cleaning keeps
//! at most one detection per hand and frame, drops short-lived and
//! handedness-swapped detections, and fuses low-confidence keypoints with
//! reprojections of the per-frame 3D seed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec2, Vec3};
use crate::hand_model::{HandModel, HandState, Handedness, NUM_BETAS, NUM_JOINTS, NUM_POSE_JOINTS};

pub const DEDUP_IOU: f64 = 0.9;
pub const FLIP_IOU: f64 = 0.1;
pub const MIN_TRACK_FRAMES: usize = 10;
pub const KEYPOINT_CONF_THRESHOLD: f64 = 0.5;

/// Weak-perspective camera of a crop, in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakCam {
    pub s: f64,
    pub tx: f64,
    pub ty: f64,
}

/// Camera-frame pose and shape estimated by the per-frame regressor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandSeed {
    pub theta: [Vec3; NUM_POSE_JOINTS],
    pub beta: [f64; NUM_BETAS],
    pub phi: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub det: u32,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
    pub keypoints: [Vec2; NUM_JOINTS],
    pub confidence: [f64; NUM_JOINTS],
    pub seed: Option<HandSeed>,
    pub weak_cam: Option<WeakCam>,
    pub image_size: [f64; 2],
}

impl Detection {
    /// Camera-frame state from the seed, with translation lifted from the weak camera.
    pub fn seed_state(&self, handedness: Handedness, focal: f64) -> Option<HandState> {
        let seed = self.seed?;
        let wc = self.weak_cam?;
        let tau = lift_translation(wc.s, wc.tx, wc.ty, image_scale(&self.image_size), focal).ok()?;
        Some(HandState {
            theta: seed.theta,
            beta: seed.beta,
            phi: seed.phi,
            tau,
            handedness,
        })
    }
}

/// Raw detections: `hands[h][t]` lists detections of hand `h` at frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTrack {
    pub frames: usize,
    pub hands: [Vec<Vec<Detection>>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanHand {
    /// `None` where the hand is absent or its detection was rejected.
    pub frames: Vec<Option<Detection>>,
    /// Per-joint visibility after fusion.
    pub visible: Vec<[bool; NUM_JOINTS]>,
    /// Maximal `[start, end)` runs of missing frames.
    pub gaps: Vec<(usize, usize)>,
}

impl CleanHand {
    fn from_frames(frames: Vec<Option<Detection>>) -> Self {
        let visible = frames
            .iter()
            .map(|f| match f {
                Some(d) => d.confidence.map(|c| c >= KEYPOINT_CONF_THRESHOLD),
                None => [false; NUM_JOINTS],
            })
            .collect();
        let gaps = missing_gaps(&frames.iter().map(Option::is_some).collect::<Vec<_>>());
        Self { frames, visible, gaps }
    }

    pub fn valid(&self, t: usize) -> bool {
        self.frames[t].is_some()
    }

    pub fn valid_count(&self) -> usize {
        self.frames.iter().filter(|f| f.is_some()).count()
    }

    pub fn first_valid(&self) -> Option<usize> {
        self.frames.iter().position(Option::is_some)
    }

    pub fn last_valid(&self) -> Option<usize> {
        self.frames.iter().rposition(Option::is_some)
    }

    /// Frames inside the observed span that are not in a gap of at least `max_gap` frames.
    pub fn active_mask(&self, max_gap: usize) -> Vec<bool> {
        let n = self.frames.len();
        let (Some(first), Some(last)) = (self.first_valid(), self.last_valid()) else {
            return vec![false; n];
        };
        let mut mask: Vec<bool> = (0..n).map(|t| t >= first && t <= last).collect();
        for &(s, e) in &self.gaps {
            if e - s >= max_gap {
                mask[s..e].iter_mut().for_each(|m| *m = false);
            }
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanTrack {
    pub frames: usize,
    pub hands: [CleanHand; 2],
}

impl CleanTrack {
    pub fn hand(&self, h: Handedness) -> &CleanHand {
        &self.hands[h.index()]
    }

    /// Back to the raw representation, so cleaning can be re-applied.
    pub fn to_observation(&self) -> ObservationTrack {
        let hands = std::array::from_fn(|h| {
            self.hands[h]
                .frames
                .iter()
                .map(|f| f.iter().cloned().collect())
                .collect()
        });
        ObservationTrack {
            frames: self.frames,
            hands,
        }
    }

    /// Image size of the first valid record of either hand.
    pub fn image_size(&self) -> Option<[f64; 2]> {
        self.hands
            .iter()
            .flat_map(|h| h.frames.iter().flatten())
            .map(|d| d.image_size)
            .next()
    }
}

pub fn missing_gaps(valid: &[bool]) -> Vec<(usize, usize)> {
    let mut gaps = Vec::new();
    let mut start = None;
    for (t, &v) in valid.iter().enumerate() {
        match (v, start) {
            (false, None) => start = Some(t),
            (true, Some(s)) => {
                gaps.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        gaps.push((s, valid.len()));
    }
    gaps
}

/// Camera translation from a weak-perspective crop camera: `(tx, ty, 2f/(s·s_I))`.
pub fn lift_translation(s: f64, tx: f64, ty: f64, image_size: f64, focal: f64) -> Result<Vec3> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidInput(format!("weak-perspective scale must be positive, got {s}")));
    }
    if !(image_size > 0.0 && image_size.is_finite()) {
        return Err(Error::InvalidInput(format!("image size must be positive, got {image_size}")));
    }
    Ok(Vec3::new(tx, ty, 2.0 * focal / (s * image_size)))
}

/// Longer image side, the normalizer of weak-perspective crop coordinates.
pub fn image_scale(image_size: &[f64; 2]) -> f64 {
    image_size[0].max(image_size[1])
}

/// Pixel reprojection of camera-frame points under a weak camera.
pub fn weak_to_pixels(points: &[Vec3], wc: &WeakCam, image_size: &[f64; 2]) -> Vec<Vec2> {
    let s = wc.s * image_scale(image_size) / 2.0;
    let c = Vec2::new(image_size[0] / 2.0, image_size[1] / 2.0);
    points
        .iter()
        .map(|p| Vec2::new(s * (p.x + wc.tx) + c.x, s * (p.y + wc.ty) + c.y))
        .collect()
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let x0 = a[0].max(b[0]);
    let y0 = a[1].max(b[1]);
    let x1 = (a[0] + a[2]).min(b[0] + b[2]);
    let y1 = (a[1] + a[3]).min(b[1] + b[3]);
    let inter = (x1 - x0).max(0.0) * (y1 - y0).max(0.0);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Deserialize, Serialize)]
struct Record {
    frame: usize,
    hand: Handedness,
    #[serde(default)]
    det: u32,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    kp2d: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mano: Option<ManoRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weak_cam: Option<WeakCam>,
    image_size: [f64; 2],
}

#[derive(Deserialize, Serialize)]
struct ManoRecord {
    theta: Vec<f64>,
    beta: Vec<f64>,
    phi: [f64; 3],
}

fn record_to_detection(r: Record, line: usize) -> Result<Detection> {
    let bad = |msg: String| Error::Validation(format!("track line {line}: {msg}"));
    if r.kp2d.len() != NUM_JOINTS {
        return Err(bad(format!("expected {NUM_JOINTS} keypoints, found {}", r.kp2d.len())));
    }
    if !(r.bbox[2] > 0.0 && r.bbox[3] > 0.0) || r.bbox.iter().any(|x| !x.is_finite()) {
        return Err(bad("bbox width and height must be positive".into()));
    }
    if !(r.image_size[0] > 0.0 && r.image_size[1] > 0.0) {
        return Err(bad("image_size must be positive".into()));
    }
    let mut keypoints = [Vec2::zeros(); NUM_JOINTS];
    let mut confidence = [0.0; NUM_JOINTS];
    for (j, k) in r.kp2d.iter().enumerate() {
        if !(0.0..=1.0).contains(&k[2]) || !k[0].is_finite() || !k[1].is_finite() {
            return Err(bad(format!("keypoint {j} has invalid value or confidence outside [0, 1]")));
        }
        keypoints[j] = Vec2::new(k[0], k[1]);
        confidence[j] = k[2];
    }
    let seed = match r.mano {
        None => None,
        Some(m) => {
            if m.theta.len() != 3 * NUM_POSE_JOINTS || m.beta.len() != NUM_BETAS {
                return Err(bad("mano needs 45 theta and 10 beta values".into()));
            }
            Some(HandSeed {
                theta: std::array::from_fn(|j| Vec3::new(m.theta[3 * j], m.theta[3 * j + 1], m.theta[3 * j + 2])),
                beta: std::array::from_fn(|b| m.beta[b]),
                phi: Vec3::from(m.phi),
            })
        }
    };
    let score = r
        .score
        .unwrap_or_else(|| confidence.iter().sum::<f64>() / NUM_JOINTS as f64);
    Ok(Detection {
        det: r.det,
        bbox: r.bbox,
        score,
        keypoints,
        confidence,
        seed,
        weak_cam: r.weak_cam,
        image_size: r.image_size,
    })
}

impl ObservationTrack {
    pub fn empty(frames: usize) -> Self {
        Self {
            frames,
            hands: [vec![Vec::new(); frames], vec![Vec::new(); frames]],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&crate::io::read_to_string(path)?)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut by_key: BTreeMap<(usize, Handedness, u32), Detection> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("track line {}: {e}", i + 1)))?;
            let key = (rec.frame, rec.hand, rec.det);
            let det = record_to_detection(rec, i + 1)?;
            if by_key.insert(key, det).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate record for frame {}, hand {}, det {}",
                    key.0,
                    key.1.as_str(),
                    key.2
                )));
            }
        }
        let frames = by_key.keys().map(|k| k.0 + 1).max().unwrap_or(0);
        let mut track = Self::empty(frames);
        for ((frame, hand, _), det) in by_key {
            track.hands[hand.index()][frame].push(det);
        }
        Ok(track)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in 0..self.frames {
            for hand in Handedness::BOTH {
                for d in &self.hands[hand.index()][t] {
                    let rec = Record {
                        frame: t,
                        hand,
                        det: d.det,
                        bbox: d.bbox,
                        score: Some(d.score),
                        kp2d: (0..NUM_JOINTS)
                            .map(|j| [d.keypoints[j].x, d.keypoints[j].y, d.confidence[j]])
                            .collect(),
                        mano: d.seed.map(|s| ManoRecord {
                            theta: s.theta.iter().flat_map(|v| [v.x, v.y, v.z]).collect(),
                            beta: s.beta.to_vec(),
                            phi: [s.phi.x, s.phi.y, s.phi.z],
                        }),
                        weak_cam: d.weak_cam,
                        image_size: d.image_size,
                    };
                    out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                    out.push('\n');
                }
            }
        }
        out
    }

    /// Extends or checks the frame count against the camera trajectory length.
    pub fn with_frames(mut self, frames: usize) -> Result<Self> {
        if self.frames > frames {
            return Err(Error::Validation(format!(
                "track has detections at frame {} but the camera covers {frames} frames",
                self.frames - 1
            )));
        }
        for h in &mut self.hands {
            h.resize(frames, Vec::new());
        }
        self.frames = frames;
        Ok(self)
    }
}

/// Keeps one detection per hand and frame, then rejects handedness flips and short pieces.
pub fn suppress_hallucinations(track: &ObservationTrack) -> CleanTrack {
    let hands = std::array::from_fn(|h| {
        let chosen: Vec<Option<Detection>> = track.hands[h].iter().map(|dets| pick_detection(dets)).collect();
        let flagged = reject_flips(chosen);
        CleanHand::from_frames(drop_short_pieces(flagged))
    });
    CleanTrack {
        frames: track.frames,
        hands,
    }
}

/// Highest score wins; ties keep the earlier-listed detection.
fn pick_detection(dets: &[Detection]) -> Option<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= DEDUP_IOU) {
            kept.push(i);
        }
    }
    // Non-overlapping survivors still compete for the single slot of this hand.
    kept.first().map(|&i| dets[i].clone())
}

fn reject_flips(mut frames: Vec<Option<Detection>>) -> Vec<Option<Detection>> {
    let mut last: Option<[f64; 4]> = None;
    for f in frames.iter_mut() {
        match f {
            None => last = None,
            // A rejected frame keeps `last`, so later frames are checked against the last valid box.
            Some(d) => match last {
                Some(prev) if iou(&prev, &d.bbox) < FLIP_IOU => *f = None,
                _ => last = Some(d.bbox),
            },
        }
    }
    frames
}

fn drop_short_pieces(mut frames: Vec<Option<Detection>>) -> Vec<Option<Detection>> {
    let valid: Vec<bool> = frames.iter().map(Option::is_some).collect();
    let mut t = 0;
    while t < valid.len() {
        if !valid[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < valid.len() && valid[t] {
            t += 1;
        }
        if t - start < MIN_TRACK_FRAMES {
            frames[start..t].iter_mut().for_each(|f| *f = None);
        }
    }
    frames
}

/// Replaces keypoints below the confidence threshold with seed reprojections.
///
/// `reprojected[h][t]` holds pixel reprojections where a 3D seed exists.
/// Replaced joints get confidence exactly at the threshold; joints with no
/// source are masked with confidence 0.
pub fn fuse_keypoints(track: &CleanTrack, reprojected: &[Vec<Option<Vec<Vec2>>>; 2]) -> CleanTrack {
    let hands = std::array::from_fn(|h| {
        let frames = track.hands[h]
            .frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                f.as_ref().map(|d| {
                    let mut d = d.clone();
                    let rep = reprojected[h].get(t).and_then(|r| r.as_ref());
                    for j in 0..NUM_JOINTS {
                        if d.confidence[j] >= KEYPOINT_CONF_THRESHOLD {
                            continue;
                        }
                        match rep {
                            Some(r) => {
                                d.keypoints[j] = r[j];
                                d.confidence[j] = KEYPOINT_CONF_THRESHOLD;
                            }
                            None => d.confidence[j] = 0.0,
                        }
                    }
                    d
                })
            })
            .collect();
        CleanHand::from_frames(frames)
    });
    CleanTrack {
        frames: track.frames,
        hands,
    }
}

/// Seed reprojections for every valid frame that carries both a seed and a weak camera.
pub fn seed_reprojections(track: &CleanTrack, models: [&HandModel; 2]) -> [Vec<Option<Vec<Vec2>>>; 2] {
    std::array::from_fn(|h| {
        let handedness = models[h].handedness();
        track.hands[h]
            .frames
            .iter()
            .map(|f| {
                let d = f.as_ref()?;
                let seed = d.seed?;
                let wc = d.weak_cam?;
                let state = HandState {
                    theta: seed.theta,
                    beta: seed.beta,
                    phi: seed.phi,
                    tau: Vec3::zeros(),
                    handedness,
                };
                Some(weak_to_pixels(&models[h].joints(&state), &wc, &d.image_size))
            })
            .collect()
    })
}
