//! World-frame trajectory files.
//!
//! One JSON line per active (frame, hand), keyed like the track format, with the
//! world-frame MANO parameters under `mano` and the root translation in `tau`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::hand_model::{HandModel, HandTrajectory, Handedness, PoseFrame, NUM_BETAS, NUM_JOINTS, NUM_POSE_JOINTS};

#[derive(Debug, Clone, PartialEq)]
pub struct WorldTrajectory {
    pub fps: f64,
    pub omega: f64,
    pub hands: [HandTrajectory; 2],
    /// Frames on which each hand is present.
    pub active: [Vec<bool>; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldMano {
    theta: Vec<f64>,
    beta: Vec<f64>,
    phi: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldRecord {
    frame: usize,
    hand: Handedness,
    frames: usize,
    fps: f64,
    omega: f64,
    mano: WorldMano,
    tau: [f64; 3],
}

impl WorldTrajectory {
    pub fn frames(&self) -> usize {
        self.active[0].len()
    }

    /// World joints per hand and frame, `None` where the hand is absent.
    pub fn joints(&self, models: [&HandModel; 2]) -> [Vec<Option<[Vec3; NUM_JOINTS]>>; 2] {
        std::array::from_fn(|h| {
            (0..self.frames())
                .map(|t| self.active[h][t].then(|| models[h].joints(&self.hands[h].state(t))))
                .collect()
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in 0..self.frames() {
            for hand in Handedness::BOTH {
                let h = hand.index();
                if !self.active[h][t] {
                    continue;
                }
                let f = &self.hands[h].frames[t];
                let rec = WorldRecord {
                    frame: t,
                    hand,
                    frames: self.frames(),
                    fps: self.fps,
                    omega: self.omega,
                    mano: WorldMano {
                        theta: f.theta.iter().flat_map(|v| [v.x, v.y, v.z]).collect(),
                        beta: self.hands[h].shared_beta.to_vec(),
                        phi: [f.phi.x, f.phi.y, f.phi.z],
                    },
                    tau: [f.tau.x, f.tau.y, f.tau.z],
                };
                out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = BTreeMap::new();
        let mut header: Option<(usize, f64, f64)> = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: WorldRecord =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("trajectory line {}: {e}", i + 1)))?;
            let bad = |m: &str| Error::Validation(format!("trajectory line {}: {m}", i + 1));
            if r.mano.theta.len() != 3 * NUM_POSE_JOINTS || r.mano.beta.len() != NUM_BETAS {
                return Err(bad("mano needs 45 theta and 10 beta values"));
            }
            if r.frame >= r.frames {
                return Err(bad("frame index beyond the declared frame count"));
            }
            match header {
                None => header = Some((r.frames, r.fps, r.omega)),
                Some(h) if h != (r.frames, r.fps, r.omega) => {
                    return Err(bad("frames, fps and omega must agree on every line"));
                }
                _ => {}
            }
            if records.insert((r.frame, r.hand), r).is_some() {
                return Err(bad("duplicate frame and hand"));
            }
        }
        let (frames, fps, omega) = header.ok_or_else(|| Error::Format("trajectory file has no records".into()))?;
        let mut active = [vec![false; frames], vec![false; frames]];
        let mut poses = [vec![PoseFrame::rest(); frames], vec![PoseFrame::rest(); frames]];
        let mut betas: [Option<[f64; NUM_BETAS]>; 2] = [None, None];
        for ((t, hand), r) in records {
            let h = hand.index();
            let beta: [f64; NUM_BETAS] = std::array::from_fn(|b| r.mano.beta[b]);
            match betas[h] {
                None => betas[h] = Some(beta),
                Some(b) if b != beta => {
                    return Err(Error::Validation(format!("{} hand shape changes at frame {t}", hand.as_str())));
                }
                _ => {}
            }
            let th = &r.mano.theta;
            poses[h][t] = PoseFrame {
                theta: std::array::from_fn(|j| Vec3::new(th[3 * j], th[3 * j + 1], th[3 * j + 2])),
                phi: Vec3::from(r.mano.phi),
                tau: Vec3::from(r.tau),
            };
            active[h][t] = true;
        }
        let [pl, pr] = poses;
        Ok(Self {
            fps,
            omega,
            hands: [
                HandTrajectory::new(Handedness::Left, fps, betas[0].unwrap_or([0.0; NUM_BETAS]), pl),
                HandTrajectory::new(Handedness::Right, fps, betas[1].unwrap_or([0.0; NUM_BETAS]), pr),
            ],
            active,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&crate::io::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_jsonl().as_bytes())
    }
}
