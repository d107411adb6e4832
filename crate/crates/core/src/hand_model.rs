//! Parametric hand model: shape blending, linear blend skinning and joint regression.
//!
//! The root orientation rotates the hand about the model origin, so a hand state
//! maps to a rigid motion of the locally posed mesh:
//! `V = R(phi) * X(theta, beta) + tau`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::geometry::{axis_angle_jacobian, axis_angle_to_matrix, pull_back_rotation_grad, Mat3, Vec3};

pub const NUM_VERTICES: usize = 778;
pub const NUM_KIN_JOINTS: usize = 16;
pub const NUM_POSE_JOINTS: usize = 15;
pub const NUM_JOINTS: usize = 21;
pub const NUM_BETAS: usize = 10;

const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handedness {
    Left,
    Right,
}

impl Handedness {
    pub const BOTH: [Handedness; 2] = [Handedness::Left, Handedness::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Handedness::Left => "left",
            Handedness::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Handedness::Left),
            "right" => Ok(Handedness::Right),
            other => Err(Error::Format(format!("unknown handedness `{other}`"))),
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Handedness::Left => Handedness::Right,
            Handedness::Right => Handedness::Left,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Handedness::Left => 0,
            Handedness::Right => 1,
        }
    }
}

/// Per-frame parameter block of one hand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandState {
    /// Local joint rotations (axis-angle, radians).
    pub theta: [Vec3; NUM_POSE_JOINTS],
    pub beta: [f64; NUM_BETAS],
    /// Root orientation (axis-angle).
    pub phi: Vec3,
    /// Root translation in meters.
    pub tau: Vec3,
    pub handedness: Handedness,
}

impl HandState {
    pub fn rest(handedness: Handedness) -> Self {
        Self {
            theta: [Vec3::zeros(); NUM_POSE_JOINTS],
            beta: [0.0; NUM_BETAS],
            phi: Vec3::zeros(),
            tau: Vec3::zeros(),
            handedness,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.beta.iter().all(|x| x.is_finite())
            && self.phi.iter().all(|x| x.is_finite())
            && self.tau.iter().all(|x| x.is_finite())
    }

    pub fn theta_flat(&self) -> [f64; 3 * NUM_POSE_JOINTS] {
        let mut out = [0.0; 3 * NUM_POSE_JOINTS];
        for (j, v) in self.theta.iter().enumerate() {
            out[3 * j..3 * j + 3].copy_from_slice(v.as_slice());
        }
        out
    }

    pub fn set_theta_flat(&mut self, flat: &[f64]) {
        for j in 0..NUM_POSE_JOINTS {
            self.theta[j] = Vec3::new(flat[3 * j], flat[3 * j + 1], flat[3 * j + 2]);
        }
    }
}

/// Per-frame pose of a trajectory; shape lives on the trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseFrame {
    pub theta: [Vec3; NUM_POSE_JOINTS],
    pub phi: Vec3,
    pub tau: Vec3,
}

impl PoseFrame {
    pub fn rest() -> Self {
        Self {
            theta: [Vec3::zeros(); NUM_POSE_JOINTS],
            phi: Vec3::zeros(),
            tau: Vec3::zeros(),
        }
    }

    pub fn from_state(s: &HandState) -> Self {
        Self {
            theta: s.theta,
            phi: s.phi,
            tau: s.tau,
        }
    }
}

/// Ordered hand states sharing one shape vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HandTrajectory {
    pub handedness: Handedness,
    pub frame_rate: f64,
    pub shared_beta: [f64; NUM_BETAS],
    pub frames: Vec<PoseFrame>,
}

impl HandTrajectory {
    pub fn new(handedness: Handedness, frame_rate: f64, shared_beta: [f64; NUM_BETAS], frames: Vec<PoseFrame>) -> Self {
        Self {
            handedness,
            frame_rate,
            shared_beta,
            frames,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn state(&self, t: usize) -> HandState {
        let f = &self.frames[t];
        HandState {
            theta: f.theta,
            beta: self.shared_beta,
            phi: f.phi,
            tau: f.tau,
            handedness: self.handedness,
        }
    }

    pub fn states(&self) -> impl Iterator<Item = HandState> + '_ {
        (0..self.len()).map(|t| self.state(t))
    }
}

/// Gradient of a scalar w.r.t. the parameters of one hand state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateGrad {
    pub theta: [Vec3; NUM_POSE_JOINTS],
    pub beta: [f64; NUM_BETAS],
    pub phi: Vec3,
    pub tau: Vec3,
}

impl Default for StateGrad {
    fn default() -> Self {
        Self {
            theta: [Vec3::zeros(); NUM_POSE_JOINTS],
            beta: [0.0; NUM_BETAS],
            phi: Vec3::zeros(),
            tau: Vec3::zeros(),
        }
    }
}

impl StateGrad {
    pub fn add_assign(&mut self, other: &StateGrad) {
        for j in 0..NUM_POSE_JOINTS {
            self.theta[j] += other.theta[j];
        }
        for b in 0..NUM_BETAS {
            self.beta[b] += other.beta[b];
        }
        self.phi += other.phi;
        self.tau += other.tau;
    }
}

/// Precomputed regressor·skinning product for one (output joint, kinematic joint) pair.
#[derive(Debug, Clone)]
struct JointPair {
    joint: usize,
    kin: usize,
    weight: f64,
    point: Vec3,
    point_shape: [Vec3; NUM_BETAS],
}

/// Finger topology derived from the kinematic tree and rest geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct HandTopology {
    /// Output-joint index of the bone end for each articulated joint 1..16.
    pub bone_child: [usize; NUM_KIN_JOINTS],
    /// Finger chains ordered thumb, then radial to ulnar; each lists kinematic joints root to tip.
    pub fingers: Vec<Vec<usize>>,
    /// Index into `fingers` of the thumb (always 0).
    pub thumb: usize,
    /// Palmar-facing unit normal of the rest pose.
    pub palm_normal: Vec3,
}

#[derive(Debug, Clone)]
pub struct HandModel {
    template: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    shape_basis: Vec<[Vec3; NUM_BETAS]>,
    skinning: Vec<[f64; NUM_KIN_JOINTS]>,
    skin_sparse: Vec<Vec<(usize, f64)>>,
    regressor: Vec<Vec<(usize, f64)>>,
    parents: [Option<usize>; NUM_KIN_JOINTS],
    order: Vec<usize>,
    handedness: Handedness,
    rest_joints: [Vec3; NUM_KIN_JOINTS],
    rest_joints_shape: [[Vec3; NUM_BETAS]; NUM_KIN_JOINTS],
    pairs: Vec<JointPair>,
    topology: HandTopology,
}

/// Raw arrays of a model before validation.
#[derive(Debug, Clone)]
pub struct ModelArrays {
    pub template: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub shape_basis: Vec<[Vec3; NUM_BETAS]>,
    pub skinning: Vec<[f64; NUM_KIN_JOINTS]>,
    /// Dense `NUM_JOINTS x NUM_VERTICES`, row-major.
    pub regressor: Vec<f64>,
    pub parents: Vec<i32>,
    pub handedness: Handedness,
}

/// Intermediate transforms kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FkCache {
    local: [Mat3; NUM_KIN_JOINTS],
    jac: [[Mat3; 3]; NUM_KIN_JOINTS],
    rot: [Mat3; NUM_KIN_JOINTS],
    trans: [Vec3; NUM_KIN_JOINTS],
    rest: [Vec3; NUM_KIN_JOINTS],
}

impl FkCache {
    /// Local rotation of kinematic joint `j` (0 is the root).
    pub fn local_rotation(&self, j: usize) -> &Mat3 {
        &self.local[j]
    }

    pub fn local_jacobian(&self, j: usize) -> &[Mat3; 3] {
        &self.jac[j]
    }

    pub fn global_rotation(&self, j: usize) -> &Mat3 {
        &self.rot[j]
    }

    pub fn rest_joint(&self, j: usize) -> &Vec3 {
        &self.rest[j]
    }
}

impl HandModel {
    pub fn from_arrays(a: ModelArrays) -> Result<Self> {
        if a.template.len() != NUM_VERTICES {
            return Err(Error::Shape {
                name: "template".into(),
                expected: vec![NUM_VERTICES, 3],
                found: vec![a.template.len(), 3],
            });
        }
        if a.shape_basis.len() != NUM_VERTICES {
            return Err(Error::Shape {
                name: "shape_basis".into(),
                expected: vec![NUM_VERTICES, 3, NUM_BETAS],
                found: vec![a.shape_basis.len(), 3, NUM_BETAS],
            });
        }
        if a.skinning.len() != NUM_VERTICES {
            return Err(Error::Shape {
                name: "skinning".into(),
                expected: vec![NUM_VERTICES, NUM_KIN_JOINTS],
                found: vec![a.skinning.len(), NUM_KIN_JOINTS],
            });
        }
        if a.regressor.len() != NUM_JOINTS * NUM_VERTICES {
            return Err(Error::Shape {
                name: "regressor".into(),
                expected: vec![NUM_JOINTS, NUM_VERTICES],
                found: vec![a.regressor.len() / NUM_VERTICES.max(1), NUM_VERTICES],
            });
        }
        if a.parents.len() != NUM_KIN_JOINTS {
            return Err(Error::Shape {
                name: "parents".into(),
                expected: vec![NUM_KIN_JOINTS],
                found: vec![a.parents.len()],
            });
        }
        let finite = a.template.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && a.shape_basis.iter().flatten().all(|v| v.iter().all(|x| x.is_finite()))
            && a.regressor.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::Validation("model arrays contain non-finite values".into()));
        }
        for (i, f) in a.faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= NUM_VERTICES) {
                return Err(Error::Validation(format!("face {i} indexes past the vertex count")));
            }
        }
        for (v, row) in a.skinning.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Validation(format!(
                    "skinning row {v} is not a convex weight vector (sum {sum})"
                )));
            }
        }
        let mut regressor = Vec::with_capacity(NUM_JOINTS);
        for k in 0..NUM_JOINTS {
            let row = &a.regressor[k * NUM_VERTICES..(k + 1) * NUM_VERTICES];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Validation(format!(
                    "regressor row {k} is not row-stochastic (sum {sum})"
                )));
            }
            regressor.push(
                row.iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(v, &w)| (v, w))
                    .collect::<Vec<_>>(),
            );
        }
        let (parents, order) = validate_tree(&a.parents)?;

        let skin_sparse: Vec<Vec<(usize, f64)>> = a
            .skinning
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(j, &w)| (j, w))
                    .collect()
            })
            .collect();

        let mut rest_joints = [Vec3::zeros(); NUM_KIN_JOINTS];
        let mut rest_joints_shape = [[Vec3::zeros(); NUM_BETAS]; NUM_KIN_JOINTS];
        for j in 0..NUM_KIN_JOINTS {
            for &(v, w) in &regressor[j] {
                rest_joints[j] += a.template[v] * w;
                for b in 0..NUM_BETAS {
                    rest_joints_shape[j][b] += a.shape_basis[v][b] * w;
                }
            }
        }

        let mut pairs = Vec::new();
        for (k, row) in regressor.iter().enumerate() {
            let mut acc: Vec<Option<JointPair>> = vec![None; NUM_KIN_JOINTS];
            for &(v, lw) in row {
                for &(j, sw) in &skin_sparse[v] {
                    let w = lw * sw;
                    let p = acc[j].get_or_insert_with(|| JointPair {
                        joint: k,
                        kin: j,
                        weight: 0.0,
                        point: Vec3::zeros(),
                        point_shape: [Vec3::zeros(); NUM_BETAS],
                    });
                    p.weight += w;
                    p.point += a.template[v] * w;
                    for b in 0..NUM_BETAS {
                        p.point_shape[b] += a.shape_basis[v][b] * w;
                    }
                }
            }
            pairs.extend(acc.into_iter().flatten());
        }

        let topology = derive_topology(&parents, &rest_joints, &regressor, &skin_sparse, &a.template, a.handedness)?;

        Ok(Self {
            template: a.template,
            faces: a.faces,
            shape_basis: a.shape_basis,
            skinning: a.skinning,
            skin_sparse,
            regressor,
            parents,
            order,
            handedness: a.handedness,
            rest_joints,
            rest_joints_shape,
            pairs,
            topology,
        })
    }

    pub fn to_arrays(&self) -> ModelArrays {
        let mut regressor = vec![0.0; NUM_JOINTS * NUM_VERTICES];
        for (k, row) in self.regressor.iter().enumerate() {
            for &(v, w) in row {
                regressor[k * NUM_VERTICES + v] = w;
            }
        }
        ModelArrays {
            template: self.template.clone(),
            faces: self.faces.clone(),
            shape_basis: self.shape_basis.clone(),
            skinning: self.skinning.clone(),
            regressor,
            parents: self.parents.iter().map(|p| p.map_or(-1, |x| x as i32)).collect(),
            handedness: self.handedness,
        }
    }

    /// Loads and validates a neutral model file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (shape, template) = c.f64("template")?;
        expect_shape("template", shape, &[NUM_VERTICES, 3])?;
        let template = template.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])).collect();

        let (shape, faces) = c.u32("faces")?;
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::Shape {
                name: "faces".into(),
                expected: vec![shape.first().copied().unwrap_or(0), 3],
                found: shape.to_vec(),
            });
        }
        let faces = faces.chunks_exact(3).map(|f| [f[0], f[1], f[2]]).collect();

        let (shape, basis) = c.f64("shape_basis")?;
        expect_shape("shape_basis", shape, &[NUM_VERTICES, 3, NUM_BETAS])?;
        let shape_basis = (0..NUM_VERTICES)
            .map(|v| {
                std::array::from_fn(|b| {
                    let at = |d: usize| basis[(v * 3 + d) * NUM_BETAS + b];
                    Vec3::new(at(0), at(1), at(2))
                })
            })
            .collect();

        let (shape, skin) = c.f64("skinning")?;
        expect_shape("skinning", shape, &[NUM_VERTICES, NUM_KIN_JOINTS])?;
        let skinning = skin
            .chunks_exact(NUM_KIN_JOINTS)
            .map(|r| std::array::from_fn(|j| r[j]))
            .collect();

        let (shape, regressor) = c.f64("regressor")?;
        expect_shape("regressor", shape, &[NUM_JOINTS, NUM_VERTICES])?;

        let (shape, parents) = c.i32("parents")?;
        expect_shape("parents", shape, &[NUM_KIN_JOINTS])?;

        let handedness = Handedness::parse(c.str("handedness")?)?;
        Self::from_arrays(ModelArrays {
            template,
            faces,
            shape_basis,
            skinning,
            regressor: regressor.to_vec(),
            parents: parents.to_vec(),
            handedness,
        })
    }

    pub fn to_container(&self) -> Container {
        let a = self.to_arrays();
        let mut c = Container::new();
        c.insert_f64(
            "template",
            &[NUM_VERTICES, 3],
            a.template.iter().flat_map(|v| [v.x, v.y, v.z]).collect(),
        );
        c.insert_u32("faces", &[a.faces.len(), 3], a.faces.iter().flatten().copied().collect());
        let mut basis = vec![0.0; NUM_VERTICES * 3 * NUM_BETAS];
        for (v, row) in a.shape_basis.iter().enumerate() {
            for (b, d) in row.iter().enumerate() {
                for k in 0..3 {
                    basis[(v * 3 + k) * NUM_BETAS + b] = d[k];
                }
            }
        }
        c.insert_f64("shape_basis", &[NUM_VERTICES, 3, NUM_BETAS], basis);
        c.insert_f64(
            "skinning",
            &[NUM_VERTICES, NUM_KIN_JOINTS],
            a.skinning.iter().flatten().copied().collect(),
        );
        c.insert_f64("regressor", &[NUM_JOINTS, NUM_VERTICES], a.regressor);
        c.insert_i32("parents", &[NUM_KIN_JOINTS], a.parents);
        c.insert_str("handedness", a.handedness.as_str());
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    /// Mirror image across the x = 0 plane, for the opposite hand.
    ///
    /// Face winding is reversed so normals keep pointing outward.
    pub fn mirrored(&self) -> Self {
        let flip = |v: &Vec3| Vec3::new(-v.x, v.y, v.z);
        let mut a = self.to_arrays();
        a.template = a.template.iter().map(flip).collect();
        a.shape_basis = a.shape_basis.iter().map(|row| row.map(|d| flip(&d))).collect();
        a.faces = a.faces.iter().map(|f| [f[0], f[2], f[1]]).collect();
        a.handedness = a.handedness.opposite();
        Self::from_arrays(a).expect("mirroring preserves validity")
    }

    pub fn handedness(&self) -> Handedness {
        self.handedness
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn template(&self) -> &[Vec3] {
        &self.template
    }

    pub fn shape_basis(&self) -> &[[Vec3; NUM_BETAS]] {
        &self.shape_basis
    }

    pub fn skinning(&self) -> &[[f64; NUM_KIN_JOINTS]] {
        &self.skinning
    }

    pub fn regressor_row(&self, k: usize) -> &[(usize, f64)] {
        &self.regressor[k]
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn topology(&self) -> &HandTopology {
        &self.topology
    }

    /// Kinematic joint positions of the shaped rest pose.
    pub fn rest_kinematic_joints(&self, beta: &[f64; NUM_BETAS]) -> [Vec3; NUM_KIN_JOINTS] {
        std::array::from_fn(|j| {
            let mut p = self.rest_joints[j];
            for b in 0..NUM_BETAS {
                p += self.rest_joints_shape[j][b] * beta[b];
            }
            p
        })
    }

    /// All 21 joints of the shaped rest pose (no rotation, no translation).
    pub fn rest_joints(&self, beta: &[f64; NUM_BETAS]) -> [Vec3; NUM_JOINTS] {
        self.joints(&HandState {
            beta: *beta,
            ..HandState::rest(self.handedness)
        })
    }

    pub fn shaped_vertices(&self, beta: &[f64; NUM_BETAS]) -> Vec<Vec3> {
        self.template
            .iter()
            .zip(&self.shape_basis)
            .map(|(t, s)| {
                let mut v = *t;
                for b in 0..NUM_BETAS {
                    v += s[b] * beta[b];
                }
                v
            })
            .collect()
    }

    /// Evaluates per-joint rigid transforms along the kinematic tree.
    pub fn kinematics(&self, state: &HandState) -> FkCache {
        let rest = self.rest_kinematic_joints(&state.beta);
        let mut local = [Mat3::identity(); NUM_KIN_JOINTS];
        let mut jac = [[Mat3::zeros(); 3]; NUM_KIN_JOINTS];
        local[0] = axis_angle_to_matrix(&state.phi);
        jac[0] = axis_angle_jacobian(&state.phi);
        for j in 1..NUM_KIN_JOINTS {
            local[j] = axis_angle_to_matrix(&state.theta[j - 1]);
            jac[j] = axis_angle_jacobian(&state.theta[j - 1]);
        }
        let mut rot = [Mat3::identity(); NUM_KIN_JOINTS];
        let mut trans = [Vec3::zeros(); NUM_KIN_JOINTS];
        for &j in &self.order {
            match self.parents[j] {
                None => {
                    rot[j] = local[j];
                    trans[j] = local[j] * rest[j];
                }
                Some(p) => {
                    rot[j] = rot[p] * local[j];
                    trans[j] = rot[p] * (rest[j] - rest[p]) + trans[p];
                }
            }
        }
        FkCache {
            local,
            jac,
            rot,
            trans,
            rest,
        }
    }

    fn joints_from_cache(&self, state: &HandState, cache: &FkCache) -> [Vec3; NUM_JOINTS] {
        let mut out = [state.tau; NUM_JOINTS];
        for p in &self.pairs {
            let q = pair_point(p, &state.beta) - cache.rest[p.kin] * p.weight;
            out[p.joint] += cache.rot[p.kin] * q + cache.trans[p.kin] * p.weight;
        }
        out
    }

    /// The 21 joints, evaluated through precomputed regressor·skinning products.
    pub fn joints(&self, state: &HandState) -> [Vec3; NUM_JOINTS] {
        let cache = self.kinematics(state);
        self.joints_from_cache(state, &cache)
    }

    pub fn joints_with_cache(&self, state: &HandState) -> ([Vec3; NUM_JOINTS], FkCache) {
        let cache = self.kinematics(state);
        (self.joints_from_cache(state, &cache), cache)
    }

    pub fn vertices_from_cache(&self, state: &HandState, cache: &FkCache) -> Vec<Vec3> {
        let shaped = self.shaped_vertices(&state.beta);
        let skin_t: [Vec3; NUM_KIN_JOINTS] =
            std::array::from_fn(|j| cache.trans[j] - cache.rot[j] * cache.rest[j]);
        shaped
            .iter()
            .zip(&self.skin_sparse)
            .map(|(v, weights)| {
                let mut a = Mat3::zeros();
                let mut t = state.tau;
                for &(j, w) in weights {
                    a += cache.rot[j] * w;
                    t += skin_t[j] * w;
                }
                a * v + t
            })
            .collect()
    }

    pub fn vertices(&self, state: &HandState) -> Vec<Vec3> {
        let cache = self.kinematics(state);
        self.vertices_from_cache(state, &cache)
    }

    /// Posed mesh vertices and the 21 joints regressed from them.
    pub fn forward(&self, state: &HandState) -> (Vec<Vec3>, [Vec3; NUM_JOINTS]) {
        let vertices = self.vertices(state);
        let joints = std::array::from_fn(|k| {
            self.regressor[k]
                .iter()
                .fold(Vec3::zeros(), |acc, &(v, w)| acc + vertices[v] * w)
        });
        (vertices, joints)
    }

    pub fn forward_batch(&self, traj: &HandTrajectory) -> Vec<(Vec<Vec3>, [Vec3; NUM_JOINTS])> {
        traj.states().map(|s| self.forward(&s)).collect()
    }

    pub fn joints_batch(&self, traj: &HandTrajectory) -> Vec<[Vec3; NUM_JOINTS]> {
        traj.states().map(|s| self.joints(&s)).collect()
    }

    /// Reverse-mode pass: maps gradients on joints (and optionally vertices)
    /// to gradients on the state parameters.
    pub fn backward(
        &self,
        state: &HandState,
        cache: &FkCache,
        d_joints: &[Vec3; NUM_JOINTS],
        d_vertices: Option<&[Vec3]>,
    ) -> StateGrad {
        let mut d_rot = [Mat3::zeros(); NUM_KIN_JOINTS];
        let mut d_trans = [Vec3::zeros(); NUM_KIN_JOINTS];
        let mut d_rest = [Vec3::zeros(); NUM_KIN_JOINTS];
        let mut grad = StateGrad::default();

        for dj in d_joints {
            grad.tau += dj;
        }
        for p in &self.pairs {
            let dj = &d_joints[p.joint];
            if dj.x == 0.0 && dj.y == 0.0 && dj.z == 0.0 {
                continue;
            }
            let q = pair_point(p, &state.beta) - cache.rest[p.kin] * p.weight;
            d_rot[p.kin] += dj * q.transpose();
            d_trans[p.kin] += dj * p.weight;
            let dq = cache.rot[p.kin].transpose() * dj;
            for b in 0..NUM_BETAS {
                grad.beta[b] += dq.dot(&p.point_shape[b]);
            }
            d_rest[p.kin] -= dq * p.weight;
        }

        if let Some(dv) = d_vertices {
            let mut rot_t = [Mat3::zeros(); NUM_KIN_JOINTS];
            for j in 0..NUM_KIN_JOINTS {
                rot_t[j] = cache.rot[j].transpose();
            }
            for (v, d) in dv.iter().enumerate() {
                if d.x == 0.0 && d.y == 0.0 && d.z == 0.0 {
                    continue;
                }
                grad.tau += d;
                let mut shaped = self.template[v];
                for b in 0..NUM_BETAS {
                    shaped += self.shape_basis[v][b] * state.beta[b];
                }
                let mut d_shaped = Vec3::zeros();
                for &(j, w) in &self.skin_sparse[v] {
                    d_rot[j] += (d * w) * (shaped - cache.rest[j]).transpose();
                    d_trans[j] += d * w;
                    let back = rot_t[j] * d * w;
                    d_shaped += back;
                    d_rest[j] -= back;
                }
                for b in 0..NUM_BETAS {
                    grad.beta[b] += d_shaped.dot(&self.shape_basis[v][b]);
                }
            }
        }

        let mut d_local = [Mat3::zeros(); NUM_KIN_JOINTS];
        for &j in self.order.iter().rev() {
            match self.parents[j] {
                None => {
                    d_local[j] = d_rot[j] + d_trans[j] * cache.rest[j].transpose();
                    d_rest[j] += cache.local[j].transpose() * d_trans[j];
                }
                Some(p) => {
                    let dr = d_rot[j];
                    let dt = d_trans[j];
                    d_rot[p] += dr * cache.local[j].transpose();
                    d_local[j] = cache.rot[p].transpose() * dr;
                    let e = cache.rest[j] - cache.rest[p];
                    d_rot[p] += dt * e.transpose();
                    d_trans[p] += dt;
                    let de = cache.rot[p].transpose() * dt;
                    d_rest[j] += de;
                    d_rest[p] -= de;
                }
            }
        }

        for j in 0..NUM_KIN_JOINTS {
            for b in 0..NUM_BETAS {
                grad.beta[b] += d_rest[j].dot(&self.rest_joints_shape[j][b]);
            }
        }
        grad.phi = pull_back_rotation_grad(&cache.jac[0], &d_local[0]);
        for j in 1..NUM_KIN_JOINTS {
            grad.theta[j - 1] = pull_back_rotation_grad(&cache.jac[j], &d_local[j]);
        }
        grad
    }
}

#[inline]
fn pair_point(p: &JointPair, beta: &[f64; NUM_BETAS]) -> Vec3 {
    let mut q = p.point;
    for b in 0..NUM_BETAS {
        q += p.point_shape[b] * beta[b];
    }
    q
}

fn expect_shape(name: &str, found: &[usize], expected: &[usize]) -> Result<()> {
    if found != expected {
        return Err(Error::Shape {
            name: name.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

type Tree = ([Option<usize>; NUM_KIN_JOINTS], Vec<usize>);

/// Checks that `parents` is a tree rooted at joint 0; returns a parent-first order.
fn validate_tree(raw: &[i32]) -> Result<Tree> {
    let mut parents = [None; NUM_KIN_JOINTS];
    for (j, &p) in raw.iter().enumerate() {
        match (j, p) {
            (0, -1) => {}
            (0, _) => return Err(Error::Validation("joint 0 must be the root (parent -1)".into())),
            (_, p) if p < 0 || p as usize >= NUM_KIN_JOINTS || p as usize == j => {
                return Err(Error::Validation(format!("joint {j} has invalid parent {p}")))
            }
            (_, p) => parents[j] = Some(p as usize),
        }
    }
    let mut depth = [usize::MAX; NUM_KIN_JOINTS];
    depth[0] = 0;
    for j in 1..NUM_KIN_JOINTS {
        let mut chain = vec![j];
        let mut cur = j;
        while depth[cur] == usize::MAX {
            cur = parents[cur].unwrap();
            if chain.contains(&cur) {
                return Err(Error::Validation(format!("kinematic tree has a cycle through joint {j}")));
            }
            chain.push(cur);
        }
        let mut d = depth[cur];
        for &c in chain.iter().rev().skip(1) {
            d += 1;
            depth[c] = d;
        }
    }
    let mut order: Vec<usize> = (0..NUM_KIN_JOINTS).collect();
    order.sort_by_key(|&j| (depth[j], j));
    Ok((parents, order))
}

fn derive_topology(
    parents: &[Option<usize>; NUM_KIN_JOINTS],
    rest: &[Vec3; NUM_KIN_JOINTS],
    regressor: &[Vec<(usize, f64)>],
    skinning: &[Vec<(usize, f64)>],
    template: &[Vec3],
    handedness: Handedness,
) -> Result<HandTopology> {
    let children: Vec<Vec<usize>> = (0..NUM_KIN_JOINTS)
        .map(|j| (0..NUM_KIN_JOINTS).filter(|&c| parents[c] == Some(j)).collect())
        .collect();
    let tips: Vec<Vec3> = (NUM_KIN_JOINTS..NUM_JOINTS)
        .map(|k| regressor[k].iter().fold(Vec3::zeros(), |a, &(v, w)| a + template[v] * w))
        .collect();

    let mut bone_child = [0usize; NUM_KIN_JOINTS];
    let mut used_tips = Vec::new();
    for j in 1..NUM_KIN_JOINTS {
        bone_child[j] = match children[j].first() {
            Some(&c) => c,
            None => {
                // The tip row whose vertices ride on this joint; nearest
                // position alone can pick a neighbouring finger's tip.
                let weight = |k: usize| -> f64 {
                    regressor[NUM_KIN_JOINTS + k]
                        .iter()
                        .map(|&(v, w)| w * skinning[v].iter().find(|e| e.0 == j).map_or(0.0, |e| e.1))
                        .sum()
                };
                let (best, _) = (0..tips.len())
                    .filter(|i| !used_tips.contains(i))
                    .map(|i| (i, (-weight(i), (tips[i] - rest[j]).norm())))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .ok_or_else(|| Error::Validation("more finger leaves than fingertip rows".into()))?;
                used_tips.push(best);
                NUM_KIN_JOINTS + best
            }
        };
    }

    let roots = &children[0];
    let mut fingers: Vec<Vec<usize>> = roots
        .iter()
        .map(|&r| {
            let mut chain = vec![r];
            let mut cur = r;
            while let Some(&c) = children[cur].first() {
                chain.push(c);
                cur = c;
            }
            chain
        })
        .collect();
    if fingers.len() != 5 {
        return Err(Error::Validation(format!(
            "expected 5 fingers off the wrist, found {}",
            fingers.len()
        )));
    }
    // The thumb root direction deviates most from the other finger roots.
    let dirs: Vec<Vec3> = fingers.iter().map(|f| (rest[f[0]] - rest[0]).normalize()).collect();
    let thumb = (0..5)
        .map(|i| {
            let spread: f64 = (0..5).filter(|&k| k != i).map(|k| dirs[i].angle(&dirs[k])).sum();
            (i, spread)
        })
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap()
        .0;
    let thumb_root = rest[fingers[thumb][0]];
    let thumb_chain = fingers.remove(thumb);
    fingers.sort_by(|a, b| {
        let da = (rest[a[0]] - thumb_root).norm();
        let db = (rest[b[0]] - thumb_root).norm();
        da.partial_cmp(&db).unwrap()
    });
    fingers.insert(0, thumb_chain);

    let wrist = rest[0];
    let middle = rest[fingers[2][0]];
    let index = rest[fingers[1][0]];
    let pinky = rest[fingers[4][0]];
    let mut normal = (middle - wrist).cross(&(index - pinky));
    if handedness == Handedness::Left {
        normal = -normal;
    }
    let palm_normal = normal
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Validation("degenerate palm geometry".into()))?;

    Ok(HandTopology {
        bone_child,
        fingers,
        thumb: 0,
        palm_normal,
    })
}
