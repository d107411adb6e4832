//! Motion prior: gap infilling and a latent sequence model over local pose.
//!
//! The shipped prior is linear-Gaussian: per-frame 6D rotation features are
//! stacked over a window, projected onto a PCA basis, and the coefficients are
//! treated as independent Gaussians. Decoding maps features back through
//! Gram–Schmidt and the rotation log map, with an analytic reverse pass.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::geometry::{axis_angle_to_matrix, matrix_to_axis_angle, right_jacobian_inv, skew, slerp_axis_angle, Mat3, Vec3};
use crate::hand_model::{Handedness, PoseFrame, NUM_POSE_JOINTS};

pub const LATENT_DIM: usize = 128;
pub const DEFAULT_WINDOW: usize = 128;
/// Gaps at least this long are not infilled.
pub const MAX_INFILL_GAP: usize = 50;
const FEATURES_PER_JOINT: usize = 6;
const FRAME_FEATURES: usize = NUM_POSE_JOINTS * FEATURES_PER_JOINT;
const SIGMA_FLOOR: f64 = 1e-3;
/// Per-feature noise assumed by the masked encode (6D features are unit scale).
const FEATURE_NOISE: f64 = 1e-2;
const FEATURE_SPEC: &str = "rot6d-columns;joints=15;layout=frame-major";

pub type LocalPose = [Vec3; NUM_POSE_JOINTS];

/// Fills short gaps by slerp between the bounding frames.
///
/// Rotations are interpolated per joint on the geodesic, translation linearly.
/// A gap touching a sequence end is held at the single neighbouring frame.
/// Gaps of `max_gap` frames or more stay `None`.
pub fn infill_slerp(frames: &[Option<PoseFrame>], max_gap: usize) -> Vec<Option<PoseFrame>> {
    let mut out = frames.to_vec();
    let valid: Vec<bool> = frames.iter().map(Option::is_some).collect();
    if !valid.iter().any(|&v| v) {
        return out;
    }
    for (start, end) in crate::tracks::missing_gaps(&valid) {
        if end - start >= max_gap {
            continue;
        }
        let before = start.checked_sub(1).and_then(|t| frames[t]);
        let after = frames.get(end).copied().flatten();
        for (t, slot) in out.iter_mut().enumerate().take(end).skip(start) {
            *slot = match (before, after) {
                (Some(a), Some(b)) => {
                    let u = (t + 1 - start) as f64 / (end - start + 1) as f64;
                    Some(interpolate(&a, &b, u))
                }
                (Some(a), None) => Some(a),
                (None, Some(b)) => Some(b),
                (None, None) => None,
            };
        }
    }
    out
}

pub fn interpolate(a: &PoseFrame, b: &PoseFrame, u: f64) -> PoseFrame {
    if a == b {
        return *a;
    }
    PoseFrame {
        theta: std::array::from_fn(|j| slerp_axis_angle(&a.theta[j], &b.theta[j], u)),
        phi: slerp_axis_angle(&a.phi, &b.phi, u),
        tau: a.tau + (b.tau - a.tau) * u,
    }
}

/// Latent sequence model over local pose.
pub trait MotionPrior: Send + Sync {
    fn latent_dim(&self) -> usize;

    /// Longest sequence the prior decodes.
    fn window(&self) -> usize;

    /// Posterior mean and standard deviation of the latent code.
    fn encode(&self, poses: &[LocalPose]) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Latent estimate from the frames flagged in `observed` only, so that
    /// gaps are filled by the prior rather than by whatever currently sits
    /// there. Defaults to [`MotionPrior::encode`] over all frames.
    fn encode_observed(&self, poses: &[LocalPose], observed: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
        let _ = observed;
        self.encode(poses)
    }

    fn decode(&self, z: &[f64], frames: usize) -> Vec<LocalPose>;

    /// Decoded poses with the gradient of `Σ_t <d_poses[t], poses[t]>` w.r.t. `z`.
    fn decode_backward(&self, z: &[f64], d_poses: &[LocalPose]) -> Vec<f64>;
}

/// Reflection of a local pose across the x = 0 plane: `(a, b, c) ↦ (a, −b, −c)`.
/// Maps a left hand's pose onto the equivalent right-hand pose and back.
pub fn mirror_pose(p: &LocalPose) -> LocalPose {
    p.map(|v| Vec3::new(v.x, -v.y, -v.z))
}

/// A right-hand prior seen from one hand. Left-hand poses are mirrored on the
/// way in and out, so a single prior serves both hands.
#[derive(Clone, Copy)]
pub struct HandPrior<'a> {
    inner: &'a dyn MotionPrior,
    mirror: bool,
}

impl<'a> HandPrior<'a> {
    pub fn new(inner: &'a dyn MotionPrior, hand: Handedness) -> Self {
        Self {
            inner,
            mirror: hand == Handedness::Left,
        }
    }

    fn map(&self, poses: Vec<LocalPose>) -> Vec<LocalPose> {
        if self.mirror {
            poses.iter().map(mirror_pose).collect()
        } else {
            poses
        }
    }
}

impl MotionPrior for HandPrior<'_> {
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn window(&self) -> usize {
        self.inner.window()
    }

    fn encode(&self, poses: &[LocalPose]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.inner.encode(&self.map(poses.to_vec()))
    }

    fn encode_observed(&self, poses: &[LocalPose], observed: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.inner.encode_observed(&self.map(poses.to_vec()), observed)
    }

    fn decode(&self, z: &[f64], frames: usize) -> Vec<LocalPose> {
        self.map(self.inner.decode(z, frames))
    }

    // the reflection is linear and its own transpose
    fn decode_backward(&self, z: &[f64], d_poses: &[LocalPose]) -> Vec<f64> {
        self.inner.decode_backward(z, &self.map(d_poses.to_vec()))
    }
}

/// Negative log-likelihood `Σ log σ + (z − μ)² / (2σ²)` without the `2π` constant.
pub fn nll(z: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(z
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((z, m), s)| s.ln() + (z - m).powi(2) / (2.0 * s * s))
        .sum())
}

pub fn nll_grad(z: &[f64], mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    Ok(z.iter().zip(mu).zip(sigma).map(|((z, m), s)| (z - m) / (s * s)).collect())
}

fn check_sigma(sigma: &[f64]) -> Result<()> {
    match sigma.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        Some(i) => Err(Error::InvalidInput(format!("sigma[{i}] must be positive"))),
        None => Ok(()),
    }
}

/// First two columns of the rotation matrix.
pub fn rot6d(v: &Vec3) -> [f64; 6] {
    let r = axis_angle_to_matrix(v);
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

struct GramSchmidt {
    b1: Vec3,
    b2: Vec3,
    a1_norm: f64,
    u_norm: f64,
    a2: Vec3,
}

fn gram_schmidt(f: &[f64]) -> (Mat3, GramSchmidt) {
    let a1 = Vec3::new(f[0], f[1], f[2]);
    let a2 = Vec3::new(f[3], f[4], f[5]);
    let a1_norm = a1.norm().max(1e-12);
    let b1 = a1 / a1_norm;
    let u = a2 - b1 * b1.dot(&a2);
    let u_norm = u.norm().max(1e-12);
    let b2 = u / u_norm;
    let b3 = b1.cross(&b2);
    (
        Mat3::from_columns(&[b1, b2, b3]),
        GramSchmidt {
            b1,
            b2,
            a1_norm,
            u_norm,
            a2,
        },
    )
}

/// Reverse pass of 6D features → rotation vector, given the gradient `g` on the rotation vector.
fn rot6d_backward(r: &Mat3, gs: &GramSchmidt, g: &Vec3) -> [f64; 6] {
    let omega = matrix_to_axis_angle(r);
    let h = right_jacobian_inv(&omega).transpose() * g;
    let grad_r = r * skew(&h) * 0.5;
    let gb1 = grad_r.column(0).into_owned();
    let gb2 = grad_r.column(1).into_owned();
    let gb3 = grad_r.column(2).into_owned();
    let GramSchmidt {
        b1,
        b2,
        a1_norm,
        u_norm,
        a2,
    } = gs;
    let mut gb1 = gb1 + b2.cross(&gb3);
    let gb2 = gb2 + gb3.cross(b1);
    let gu = (gb2 - b2 * b2.dot(&gb2)) / *u_norm;
    let ga2 = gu - b1 * b1.dot(&gu);
    gb1 += -gu * b1.dot(a2) - a2 * b1.dot(&gu);
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / *a1_norm;
    [ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z]
}

/// PCA basis over windowed 6D pose features with a diagonal Gaussian on the coefficients.
#[derive(Debug, Clone)]
pub struct LinearGaussianPrior {
    window: usize,
    mean: DVector<f64>,
    /// `D × K`, orthonormal columns (zero columns beyond the data rank).
    basis: DMatrix<f64>,
    sigma: Vec<f64>,
}

impl LinearGaussianPrior {
    /// Fits the basis to sequences of exactly `window` frames.
    pub fn fit(sequences: &[Vec<LocalPose>], window: usize) -> Result<Self> {
        if sequences.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "prior fit needs at least 2 training sequences, got {}",
                sequences.len()
            )));
        }
        if let Some((i, s)) = sequences.iter().enumerate().find(|(_, s)| s.len() != window) {
            return Err(Error::InvalidInput(format!(
                "training sequence {i} has {} frames, expected {window}",
                s.len()
            )));
        }
        let d = window * FRAME_FEATURES;
        let n = sequences.len();
        let mut x = DMatrix::zeros(d, n);
        for (c, s) in sequences.iter().enumerate() {
            x.set_column(c, &features(s, window));
        }
        let mean = x.column_mean();
        for mut c in x.column_iter_mut() {
            c -= &mean;
        }
        // Eigen-decomposition of the small Gram matrix gives the principal directions.
        let gram = x.transpose() * &x;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap().then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let mut basis = DMatrix::zeros(d, LATENT_DIM);
        let mut sigma = vec![SIGMA_FLOOR; LATENT_DIM];
        let denom = (n - 1).max(1) as f64;
        let mut k = 0;
        for &i in &order {
            if k == LATENT_DIM {
                break;
            }
            let lambda = eig.eigenvalues[i];
            if lambda <= top * 1e-20 || lambda <= 0.0 {
                break;
            }
            let dir = &x * eig.eigenvectors.column(i);
            let norm = dir.norm();
            if norm < 1e-12 {
                break;
            }
            basis.set_column(k, &(dir / norm));
            sigma[k] = (lambda / denom).sqrt().max(SIGMA_FLOOR);
            k += 1;
        }
        Ok(Self {
            window,
            mean,
            basis,
            sigma,
        })
    }

    pub fn rank(&self) -> usize {
        self.basis.column_iter().filter(|c| c.norm() > 0.0).count()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let spec = c.str("feature_spec")?;
        if spec != FEATURE_SPEC {
            return Err(Error::Format(format!("unsupported prior feature spec `{spec}`")));
        }
        let (shape, mean) = c.f64("mean")?;
        if shape.len() != 2 || shape[1] != FRAME_FEATURES {
            return Err(Error::Shape {
                name: "mean".into(),
                expected: vec![shape.first().copied().unwrap_or(0), FRAME_FEATURES],
                found: shape.to_vec(),
            });
        }
        let window = shape[0];
        let d = window * FRAME_FEATURES;
        let (shape, basis) = c.f64("basis")?;
        if shape != [LATENT_DIM, d] {
            return Err(Error::Shape {
                name: "basis".into(),
                expected: vec![LATENT_DIM, d],
                found: shape.to_vec(),
            });
        }
        let (shape, sigma) = c.f64("sigma")?;
        if shape != [LATENT_DIM] {
            return Err(Error::Shape {
                name: "sigma".into(),
                expected: vec![LATENT_DIM],
                found: shape.to_vec(),
            });
        }
        check_sigma(sigma)?;
        Ok(Self {
            window,
            mean: DVector::from_column_slice(mean),
            basis: DMatrix::from_row_slice(LATENT_DIM, d, basis).transpose(),
            sigma: sigma.to_vec(),
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert_str("feature_spec", FEATURE_SPEC);
        c.insert_f64("mean", &[self.window, FRAME_FEATURES], self.mean.as_slice().to_vec());
        // Column-major D×K storage is row-major K×D.
        c.insert_f64(
            "basis",
            &[LATENT_DIM, self.window * FRAME_FEATURES],
            self.basis.as_slice().to_vec(),
        );
        c.insert_f64("sigma", &[LATENT_DIM], self.sigma.clone());
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    fn decode_features(&self, z: &[f64], frames: usize) -> DVector<f64> {
        let rows = frames * FRAME_FEATURES;
        let zv = DVector::from_column_slice(z);
        self.mean.rows(0, rows) + self.basis.rows(0, rows) * zv
    }
}

/// Frame-major feature vector, padded by holding the last frame up to `window`.
fn features(poses: &[LocalPose], window: usize) -> DVector<f64> {
    let mut f = DVector::zeros(window * FRAME_FEATURES);
    for t in 0..window {
        let pose = &poses[t.min(poses.len() - 1)];
        for (j, v) in pose.iter().enumerate() {
            let six = rot6d(v);
            let at = t * FRAME_FEATURES + j * FEATURES_PER_JOINT;
            f.as_mut_slice()[at..at + FEATURES_PER_JOINT].copy_from_slice(&six);
        }
    }
    f
}

impl MotionPrior for LinearGaussianPrior {
    fn latent_dim(&self) -> usize {
        LATENT_DIM
    }

    fn window(&self) -> usize {
        self.window
    }

    fn encode(&self, poses: &[LocalPose]) -> Result<(Vec<f64>, Vec<f64>)> {
        if poses.is_empty() || poses.len() > self.window {
            return Err(Error::InvalidInput(format!(
                "prior encodes 1..={} frames, got {}",
                self.window,
                poses.len()
            )));
        }
        let f = features(poses, self.window) - &self.mean;
        let mu = self.basis.transpose() * f;
        Ok((mu.as_slice().to_vec(), self.sigma.clone()))
    }

    /// Posterior mean of the coefficients given the observed frames' features
    /// with isotropic noise `FEATURE_NOISE`: a ridge solve against the prior σ.
    fn encode_observed(&self, poses: &[LocalPose], observed: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
        if observed.len() != poses.len() {
            return Err(Error::InvalidInput(format!(
                "observed mask has {} frames, poses have {}",
                observed.len(),
                poses.len()
            )));
        }
        if poses.is_empty() || poses.len() > self.window {
            return Err(Error::InvalidInput(format!(
                "prior encodes 1..={} frames, got {}",
                self.window,
                poses.len()
            )));
        }
        let f = features(poses, self.window) - &self.mean;
        let rows: Vec<usize> = (0..poses.len())
            .filter(|&t| observed[t])
            .flat_map(|t| t * FRAME_FEATURES..(t + 1) * FRAME_FEATURES)
            .collect();
        let b = self.basis.select_rows(&rows);
        let mut a = b.transpose() * &b;
        for (k, s) in self.sigma.iter().enumerate() {
            a[(k, k)] += (FEATURE_NOISE / s).powi(2);
        }
        let rhs = b.transpose() * f.select_rows(&rows);
        let mu = a
            .cholesky()
            .ok_or_else(|| Error::Degenerate("masked prior encode is not positive definite".into()))?
            .solve(&rhs);
        Ok((mu.as_slice().to_vec(), self.sigma.clone()))
    }

    fn decode(&self, z: &[f64], frames: usize) -> Vec<LocalPose> {
        assert!(frames <= self.window, "decode past the prior window");
        let f = self.decode_features(z, frames);
        (0..frames)
            .map(|t| {
                std::array::from_fn(|j| {
                    let at = t * FRAME_FEATURES + j * FEATURES_PER_JOINT;
                    let (r, _) = gram_schmidt(&f.as_slice()[at..at + FEATURES_PER_JOINT]);
                    matrix_to_axis_angle(&r)
                })
            })
            .collect()
    }

    fn decode_backward(&self, z: &[f64], d_poses: &[LocalPose]) -> Vec<f64> {
        let frames = d_poses.len();
        let f = self.decode_features(z, frames);
        let mut df = DVector::zeros(frames * FRAME_FEATURES);
        for (t, dp) in d_poses.iter().enumerate() {
            for (j, g) in dp.iter().enumerate() {
                if g.x == 0.0 && g.y == 0.0 && g.z == 0.0 {
                    continue;
                }
                let at = t * FRAME_FEATURES + j * FEATURES_PER_JOINT;
                let (r, gs) = gram_schmidt(&f.as_slice()[at..at + FEATURES_PER_JOINT]);
                let g6 = rot6d_backward(&r, &gs, g);
                df.as_mut_slice()[at..at + FEATURES_PER_JOINT].copy_from_slice(&g6);
            }
        }
        (self.basis.rows(0, frames * FRAME_FEATURES).transpose() * df)
            .as_slice()
            .to_vec()
    }
}

/// Summary used by `prior inspect`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PriorSummary {
    pub window: usize,
    pub latent_dim: usize,
    pub rank: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub feature_spec: &'static str,
}

impl LinearGaussianPrior {
    pub fn summary(&self) -> PriorSummary {
        PriorSummary {
            window: self.window,
            latent_dim: LATENT_DIM,
            rank: self.rank(),
            sigma_max: self.sigma.iter().cloned().fold(f64::MIN, f64::max),
            sigma_min: self.sigma.iter().cloned().fold(f64::MAX, f64::min),
            feature_spec: FEATURE_SPEC,
        }
    }
}
