//! Camera trajectory, world scale and the camera/world lifts of hand states.
//!
//! Stored poses map world to camera: `x_c = R_t x_w + ω τ^c_t`, where `τ^c_t` is
//! in SLAM units and `ω` converts it to meters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orthogonality_error, polar_project, Intrinsics, Mat3, Rotation, Vec3};
use crate::hand_model::HandState;

/// Orthogonality error accepted as-is.
pub const ROTATION_EXACT_TOL: f64 = 1e-6;
/// Orthogonality error repaired by polar projection; anything larger is rejected.
pub const ROTATION_REPAIR_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrajectory {
    pub fps: f64,
    pub intrinsics: Option<Intrinsics>,
    pub image_size: Option<[f64; 2]>,
    pub poses: Vec<CameraPose>,
}

/// Positive scalar between SLAM translation units and meters.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct WorldScale(f64);

impl WorldScale {
    pub fn new(omega: f64) -> Result<Self> {
        if omega.is_finite() && omega > 0.0 {
            Ok(Self(omega))
        } else {
            Err(Error::InvalidInput(format!("world scale must be positive, got {omega}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for WorldScale {
    fn default() -> Self {
        Self(1.0)
    }
}

/// Camera-frame state to world frame: `φ_w = R⁻¹∘φ_c`, `τ_w = R⁻¹τ_c − ωR⁻¹τ^c`.
pub fn cam_to_world(state: &HandState, rotation: &Rotation, translation: &Vec3, omega: f64) -> HandState {
    let r_inv = rotation.inverse();
    let phi = r_inv.compose(&Rotation::from_axis_angle(&state.phi));
    HandState {
        phi: phi.to_axis_angle(),
        tau: r_inv.apply(&(state.tau - translation * omega)),
        ..*state
    }
}

/// Exact inverse of [`cam_to_world`].
pub fn world_to_cam(state: &HandState, rotation: &Rotation, translation: &Vec3, omega: f64) -> HandState {
    let phi = rotation.compose(&Rotation::from_axis_angle(&state.phi));
    HandState {
        phi: phi.to_axis_angle(),
        tau: rotation.apply(&state.tau) + translation * omega,
        ..*state
    }
}

impl CameraTrajectory {
    pub fn static_identity(frames: usize, fps: f64) -> Self {
        Self {
            fps,
            intrinsics: None,
            image_size: None,
            poses: vec![CameraPose::identity(); frames],
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn is_static(&self) -> bool {
        self.poses.iter().all(|p| p.rotation == Rotation::identity() && p.translation == Vec3::zeros())
    }

    /// Intrinsics from the file, else the fixed focal length with the principal
    /// point at the center of `fallback_image` (or of the file's image size).
    pub fn resolve_intrinsics(&self, fallback_image: Option<[f64; 2]>) -> Result<Intrinsics> {
        if let Some(k) = self.intrinsics {
            return Ok(k);
        }
        let size = self
            .image_size
            .or(fallback_image)
            .ok_or_else(|| Error::InvalidInput("no intrinsics and no image size to derive them from".into()))?;
        Ok(Intrinsics::default_for_image(size[0], size[1]))
    }

    /// A sub-range of frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            poses: self.poses[start..end].to_vec(),
            ..self.clone()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CameraFile = serde_json::from_str(text)?;
        if let Some(conv) = &file.convention {
            if conv != CONVENTION {
                return Err(Error::Format(format!(
                    "camera convention `{conv}` unsupported, expected `{CONVENTION}`"
                )));
            }
        }
        if !(file.fps.is_finite() && file.fps > 0.0) {
            return Err(Error::Validation(format!("fps must be positive, got {}", file.fps)));
        }
        let poses = if file.is_static {
            let frames = file
                .frames
                .ok_or_else(|| Error::Format("static camera needs a `frames` count".into()))?;
            vec![CameraPose::identity(); frames]
        } else {
            let mut raw = file
                .poses
                .ok_or_else(|| Error::Format("camera file needs `poses` or `static: true`".into()))?;
            raw.sort_by_key(|p| p.frame);
            for (i, p) in raw.iter().enumerate() {
                if p.frame != i {
                    return Err(Error::Validation(format!(
                        "camera poses must cover frames 0..{} exactly once (problem at frame {})",
                        raw.len(),
                        p.frame
                    )));
                }
            }
            raw.iter().map(parse_pose).collect::<Result<Vec<_>>>()?
        };
        if poses.is_empty() {
            return Err(Error::Validation("camera trajectory has no frames".into()));
        }
        Ok(Self {
            fps: file.fps,
            intrinsics: file.intrinsics,
            image_size: file.image_size,
            poses,
        })
    }

    pub fn to_json(&self) -> String {
        let file = CameraFile {
            fps: self.fps,
            convention: Some(CONVENTION.to_string()),
            intrinsics: self.intrinsics,
            image_size: self.image_size,
            is_static: false,
            frames: None,
            poses: Some(
                self.poses
                    .iter()
                    .enumerate()
                    .map(|(frame, p)| PoseRecord {
                        frame,
                        quaternion: Some(p.rotation.to_quaternion()),
                        rotation: None,
                        translation: [p.translation.x, p.translation.y, p.translation.z],
                    })
                    .collect(),
            ),
        };
        serde_json::to_string_pretty(&file).expect("camera serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }
}

const CONVENTION: &str = "world_to_camera";

#[derive(Serialize, Deserialize)]
struct CameraFile {
    fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    convention: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intrinsics: Option<Intrinsics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_size: Option<[f64; 2]>,
    #[serde(default, rename = "static", skip_serializing_if = "std::ops::Not::not")]
    is_static: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    poses: Option<Vec<PoseRecord>>,
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    frame: usize,
    /// Unit quaternion `[w, x, y, z]`; normalized on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quaternion: Option<[f64; 4]>,
    /// Row-major 3x3 rotation, as an alternative to `quaternion`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<[[f64; 3]; 3]>,
    translation: [f64; 3],
}

fn parse_pose(p: &PoseRecord) -> Result<CameraPose> {
    let rotation = match (&p.quaternion, &p.rotation) {
        (Some(q), None) => {
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n.is_finite() && n > 1e-12) {
                return Err(Error::Validation(format!("frame {}: zero-norm quaternion", p.frame)));
            }
            Rotation::from_quaternion(q.map(|x| x / n))
        }
        (None, Some(m)) => rotation_from_rows(m, p.frame)?,
        _ => {
            return Err(Error::Format(format!(
                "frame {}: give exactly one of `quaternion` or `rotation`",
                p.frame
            )))
        }
    };
    let t = Vec3::from(p.translation);
    if !t.iter().all(|x| x.is_finite()) {
        return Err(Error::Validation(format!("frame {}: non-finite translation", p.frame)));
    }
    Ok(CameraPose {
        rotation,
        translation: t,
    })
}

/// Applies the tolerance policy: exact up to 1e-6, polar-projected up to 1e-3, rejected beyond.
pub fn rotation_from_rows(rows: &[[f64; 3]; 3], frame: usize) -> Result<Rotation> {
    let m = Mat3::from_fn(|i, j| rows[i][j]);
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::Validation(format!("frame {frame}: non-finite rotation")));
    }
    let err = orthogonality_error(&m);
    if err <= ROTATION_EXACT_TOL && m.determinant() > 0.0 {
        Ok(Rotation::from_matrix_unchecked(m))
    } else if err <= ROTATION_REPAIR_TOL && m.determinant() > 0.0 {
        Ok(Rotation::from_matrix_unchecked(polar_project(&m)))
    } else {
        Err(Error::Validation(format!(
            "frame {frame}: rotation orthogonality error {err:.3e} exceeds {ROTATION_REPAIR_TOL:.0e}"
        )))
    }
}
