//! Joint-angle hulls, bone-length intervals and palm constraints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle_jacobian, axis_angle_to_matrix, Vec2, Vec3};
use crate::hand_model::{HandModel, Handedness, NUM_BETAS, NUM_JOINTS, NUM_KIN_JOINTS, NUM_POSE_JOINTS};

pub const NUM_BONES: usize = 20;
pub const NUM_PALM_ANGLES: usize = 3;
pub const NUM_PALM_CURVATURES: usize = 2;

/// `max(0, a − x)² + max(0, x − b)²` and its derivative.
#[inline]
pub fn interval_loss(x: f64, min: f64, max: f64) -> (f64, f64) {
    if x < min {
        ((min - x).powi(2), 2.0 * (x - min))
    } else if x > max {
        ((x - max).powi(2), 2.0 * (x - max))
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min < max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::Validation(format!("interval [{min}, {max}] is empty")));
        }
        Ok(Self { min, max })
    }

    pub fn around(center: f64, half_width: f64) -> Self {
        Self {
            min: center - half_width,
            max: center + half_width,
        }
    }

    pub fn loss(&self, x: f64) -> (f64, f64) {
        interval_loss(x, self.min, self.max)
    }
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Vec2>,
}

impl ConvexPolygon {
    /// Accepts either orientation; rejects non-convex or degenerate input.
    pub fn new(mut vertices: Vec<Vec2>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::Validation("hull needs at least 3 vertices".into()));
        }
        let area: f64 = (0..vertices.len())
            .map(|i| {
                let a = vertices[i];
                let b = vertices[(i + 1) % vertices.len()];
                a.x * b.y - a.y * b.x
            })
            .sum::<f64>()
            * 0.5;
        if area.abs() < 1e-12 {
            return Err(Error::Validation("hull polygon is degenerate".into()));
        }
        if area < 0.0 {
            vertices.reverse();
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            let cross = (b - a).perp(&(c - b));
            if cross < -1e-12 {
                return Err(Error::Validation("hull polygon is not convex".into()));
            }
        }
        Ok(Self { vertices })
    }

    pub fn rectangle(x: (f64, f64), y: (f64, f64)) -> Self {
        Self::new(vec![
            Vec2::new(x.0, y.0),
            Vec2::new(x.1, y.0),
            Vec2::new(x.1, y.1),
            Vec2::new(x.0, y.1),
        ])
        .expect("rectangle is convex")
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            (b - a).perp(&(p - a)) >= 0.0
        })
    }

    /// Euclidean distance to the polygon (0 inside) and the closest point.
    pub fn distance(&self, p: &Vec2) -> (f64, Vec2) {
        if self.contains(p) {
            return (0.0, *p);
        }
        let n = self.vertices.len();
        let mut best = (f64::INFINITY, *p);
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let ab = b - a;
            let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            let q = a + ab * t;
            let d = (p - q).norm();
            if d < best.0 {
                best = (d, q);
            }
        }
        best
    }
}

/// Rest-pose reference axes for decomposing one bone's local rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleFrame {
    /// Rest bone direction.
    pub axis: Vec3,
    /// Palmar normal with the bone component removed.
    pub palmar: Vec3,
    /// `axis × palmar-normal`, negated on left hands so that positive
    /// abduction points the same anatomical way on both hands.
    pub lateral: Vec3,
}

impl AngleFrame {
    /// Rotation axis that flexes the bone toward the palm.
    pub fn flexion_axis(&self) -> Vec3 {
        self.axis.cross(&self.palmar)
    }

    /// Rotation axis that moves the bone toward `lateral`.
    pub fn abduction_axis(&self) -> Vec3 {
        self.axis.cross(&self.lateral)
    }

    /// (flexion, abduction) of a rotated bone direction, with gradients w.r.t. the direction.
    pub fn angles(&self, dir: &Vec3) -> ([f64; 2], [Vec3; 2]) {
        let p = dir.dot(&self.palmar);
        let q = dir.dot(&self.axis);
        let r = dir.dot(&self.lateral);
        let h2 = p * p + q * q;
        let h = h2.sqrt();
        let flex = p.atan2(q);
        let abd = r.atan2(h);
        let g_flex = if h2 > 0.0 {
            (self.palmar * q - self.axis * p) / h2
        } else {
            Vec3::zeros()
        };
        let g_abd = if h > 0.0 {
            (self.lateral * h - (self.axis * q + self.palmar * p) * (r / h)) / (h2 + r * r)
        } else {
            Vec3::zeros()
        };
        ([flex, abd], [g_flex, g_abd])
    }
}

/// Bones as (start, end) output-joint pairs: 15 finger bones, then 5 wrist-to-root bones.
pub fn bones(model: &HandModel) -> [(usize, usize); NUM_BONES] {
    let topo = model.topology();
    let mut out = [(0, 0); NUM_BONES];
    for j in 1..NUM_KIN_JOINTS {
        out[j - 1] = (j, topo.bone_child[j]);
    }
    for (f, chain) in topo.fingers.iter().enumerate() {
        out[NUM_POSE_JOINTS + f] = (0, chain[0]);
    }
    out
}

pub fn angle_frames(model: &HandModel) -> [AngleFrame; NUM_POSE_JOINTS] {
    let rest = model.rest_joints(&[0.0; NUM_BETAS]);
    let n = model.topology().palm_normal;
    let side = if model.handedness() == Handedness::Left { -1.0 } else { 1.0 };
    std::array::from_fn(|i| {
        let j = i + 1;
        let child = model.topology().bone_child[j];
        let axis = (rest[child] - rest[j]).normalize();
        let palmar = (n - axis * axis.dot(&n)).normalize();
        let lateral = axis.cross(&n).normalize() * side;
        AngleFrame {
            axis,
            palmar,
            lateral,
        }
    })
}

/// Non-thumb finger roots ordered radial to ulnar.
fn palm_roots(model: &HandModel) -> [usize; 4] {
    let f = &model.topology().fingers;
    [f[1][0], f[2][0], f[3][0], f[4][0]]
}

fn angle_between(a: &Vec3, b: &Vec3) -> (f64, Vec3, Vec3) {
    let w = a.cross(b);
    let s = w.norm();
    let c = a.dot(b);
    let angle = s.atan2(c);
    let denom = s * s + c * c;
    if denom == 0.0 {
        return (angle, Vec3::zeros(), Vec3::zeros());
    }
    let (ds_da, ds_db) = if s > 0.0 {
        let w = w / s;
        (b.cross(&w), w.cross(a))
    } else {
        (Vec3::zeros(), Vec3::zeros())
    };
    let ga = (ds_da * c - b * s) / denom;
    let gb = (ds_db * c - a * s) / denom;
    (angle, ga, gb)
}

/// Signed dihedral angle between planes (m1, m2) and (m2, m3) about m2.
fn dihedral(m1: &Vec3, m2: &Vec3, m3: &Vec3) -> (f64, [Vec3; 3]) {
    let n1 = m1.cross(m2);
    let n2 = m2.cross(m3);
    let len2 = m2.norm();
    if len2 == 0.0 {
        return (0.0, [Vec3::zeros(); 3]);
    }
    let u = m2 / len2;
    let cross = n1.cross(&n2);
    let y = cross.dot(&u);
    let x = n1.dot(&n2);
    let denom = x * x + y * y;
    if denom == 0.0 {
        return (0.0, [Vec3::zeros(); 3]);
    }
    let gx = -y / denom;
    let gy = x / denom;
    let g_n1 = n2 * gx + n2.cross(&u) * gy;
    let g_n2 = n1 * gx + u.cross(&n1) * gy;
    let g_u = cross * gy;
    let g_m1 = m2.cross(&g_n1);
    let g_m2 = g_n1.cross(m1) + m3.cross(&g_n2) + (g_u - u * u.dot(&g_u)) / len2;
    let g_m3 = g_n2.cross(m2);
    (y.atan2(x), [g_m1, g_m2, g_m3])
}

/// Palm angular distances and curvatures of posed joints, with joint-space gradients
/// of `Σ w_k · value_k` supplied through the `weights` closure results.
pub struct PalmMeasures {
    pub angles: [f64; NUM_PALM_ANGLES],
    pub curvatures: [f64; NUM_PALM_CURVATURES],
    angle_grads: [[Vec3; 2]; NUM_PALM_ANGLES],
    curvature_grads: [[Vec3; 3]; NUM_PALM_CURVATURES],
    roots: [usize; 4],
}

impl PalmMeasures {
    pub fn new(model: &HandModel, joints: &[Vec3; NUM_JOINTS]) -> Self {
        let roots = palm_roots(model);
        let m: [Vec3; 4] = roots.map(|r| joints[r] - joints[0]);
        let mut angles = [0.0; NUM_PALM_ANGLES];
        let mut angle_grads = [[Vec3::zeros(); 2]; NUM_PALM_ANGLES];
        for k in 0..NUM_PALM_ANGLES {
            let (a, ga, gb) = angle_between(&m[k], &m[k + 1]);
            angles[k] = a;
            angle_grads[k] = [ga, gb];
        }
        let mut curvatures = [0.0; NUM_PALM_CURVATURES];
        let mut curvature_grads = [[Vec3::zeros(); 3]; NUM_PALM_CURVATURES];
        for k in 0..NUM_PALM_CURVATURES {
            let (c, g) = dihedral(&m[k], &m[k + 1], &m[k + 2]);
            curvatures[k] = c;
            curvature_grads[k] = g;
        }
        Self {
            angles,
            curvatures,
            angle_grads,
            curvature_grads,
            roots,
        }
    }

    /// Adds `d_angle[k] ∂angle_k/∂J + d_curv[k] ∂curv_k/∂J` into `d_joints`.
    pub fn backward(
        &self,
        d_angle: &[f64; NUM_PALM_ANGLES],
        d_curv: &[f64; NUM_PALM_CURVATURES],
        d_joints: &mut [Vec3; NUM_JOINTS],
    ) {
        let mut dm = [Vec3::zeros(); 4];
        for k in 0..NUM_PALM_ANGLES {
            dm[k] += self.angle_grads[k][0] * d_angle[k];
            dm[k + 1] += self.angle_grads[k][1] * d_angle[k];
        }
        for k in 0..NUM_PALM_CURVATURES {
            for i in 0..3 {
                dm[k + i] += self.curvature_grads[k][i] * d_curv[k];
            }
        }
        for (i, &r) in self.roots.iter().enumerate() {
            d_joints[r] += dm[i];
            d_joints[0] -= dm[i];
        }
    }
}

/// Per-hand constraint tables.
#[derive(Debug, Clone, PartialEq)]
pub struct BiomechBounds {
    /// Indexed by pose joint (kinematic joint − 1), in radians.
    pub hulls: Vec<ConvexPolygon>,
    pub bone_length: [Interval; NUM_BONES],
    pub palm_angle: [Interval; NUM_PALM_ANGLES],
    pub palm_curvature: [Interval; NUM_PALM_CURVATURES],
}

/// Knobs for the model-derived default bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsDefaults {
    pub flexion_deg: (f64, f64),
    pub abduction_deg: (f64, f64),
    pub thumb_flexion_deg: (f64, f64),
    pub thumb_abduction_deg: (f64, f64),
    pub bone_length_tolerance: f64,
    pub palm_angle_window_deg: f64,
    pub palm_curvature_window_deg: f64,
}

impl Default for BoundsDefaults {
    fn default() -> Self {
        Self {
            flexion_deg: (-30.0, 110.0),
            abduction_deg: (-20.0, 20.0),
            thumb_flexion_deg: (-45.0, 90.0),
            thumb_abduction_deg: (-45.0, 45.0),
            bone_length_tolerance: 0.15,
            palm_angle_window_deg: 10.0,
            palm_curvature_window_deg: 15.0,
        }
    }
}

impl BiomechBounds {
    pub fn defaults_for(model: &HandModel, d: &BoundsDefaults) -> Self {
        let thumb: Vec<usize> = model.topology().fingers[model.topology().thumb].clone();
        let rad = |(a, b): (f64, f64)| (a.to_radians(), b.to_radians());
        let hulls = (1..NUM_KIN_JOINTS)
            .map(|j| {
                if thumb.contains(&j) {
                    ConvexPolygon::rectangle(rad(d.thumb_flexion_deg), rad(d.thumb_abduction_deg))
                } else {
                    ConvexPolygon::rectangle(rad(d.flexion_deg), rad(d.abduction_deg))
                }
            })
            .collect();
        let rest = model.rest_joints(&[0.0; NUM_BETAS]);
        let bone_length = bones(model).map(|(a, b)| {
            let l = (rest[b] - rest[a]).norm();
            Interval {
                min: l * (1.0 - d.bone_length_tolerance),
                max: l * (1.0 + d.bone_length_tolerance),
            }
        });
        let palm = PalmMeasures::new(model, &rest);
        Self {
            hulls,
            bone_length,
            palm_angle: palm.angles.map(|a| Interval::around(a, d.palm_angle_window_deg.to_radians())),
            palm_curvature: palm
                .curvatures
                .map(|c| Interval::around(c, d.palm_curvature_window_deg.to_radians())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: BoundsFile = serde_json::from_str(text)?;
        if f.hulls_deg.len() != NUM_POSE_JOINTS {
            return Err(Error::Shape {
                name: "hulls_deg".into(),
                expected: vec![NUM_POSE_JOINTS],
                found: vec![f.hulls_deg.len()],
            });
        }
        let hulls = f
            .hulls_deg
            .iter()
            .map(|pts| ConvexPolygon::new(pts.iter().map(|p| Vec2::new(p[0].to_radians(), p[1].to_radians())).collect()))
            .collect::<Result<Vec<_>>>()?;
        let intervals = |name: &str, v: &[[f64; 2]], n: usize, to_rad: bool| -> Result<Vec<Interval>> {
            if v.len() != n {
                return Err(Error::Shape {
                    name: name.into(),
                    expected: vec![n, 2],
                    found: vec![v.len(), 2],
                });
            }
            v.iter()
                .map(|p| {
                    let s = if to_rad { std::f64::consts::PI / 180.0 } else { 1.0 };
                    Interval::new(p[0] * s, p[1] * s)
                })
                .collect()
        };
        let bl = intervals("bone_length_m", &f.bone_length_m, NUM_BONES, false)?;
        let pa = intervals("palm_angle_deg", &f.palm_angle_deg, NUM_PALM_ANGLES, true)?;
        let pc = intervals("palm_curvature_deg", &f.palm_curvature_deg, NUM_PALM_CURVATURES, true)?;
        Ok(Self {
            hulls,
            bone_length: std::array::from_fn(|i| bl[i]),
            palm_angle: std::array::from_fn(|i| pa[i]),
            palm_curvature: std::array::from_fn(|i| pc[i]),
        })
    }

    pub fn to_json(&self) -> String {
        let f = BoundsFile {
            hulls_deg: self
                .hulls
                .iter()
                .map(|h| h.vertices().iter().map(|v| [v.x.to_degrees(), v.y.to_degrees()]).collect())
                .collect(),
            bone_length_m: self.bone_length.iter().map(|i| [i.min, i.max]).collect(),
            palm_angle_deg: self.palm_angle.iter().map(|i| [i.min.to_degrees(), i.max.to_degrees()]).collect(),
            palm_curvature_deg: self
                .palm_curvature
                .iter()
                .map(|i| [i.min.to_degrees(), i.max.to_degrees()])
                .collect(),
        };
        serde_json::to_string_pretty(&f).expect("bounds serialize")
    }
}

#[derive(Serialize, Deserialize)]
struct BoundsFile {
    hulls_deg: Vec<Vec<[f64; 2]>>,
    bone_length_m: Vec<[f64; 2]>,
    palm_angle_deg: Vec<[f64; 2]>,
    palm_curvature_deg: Vec<[f64; 2]>,
}

/// Value of the three biomechanical terms for one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BioValue {
    pub ja: f64,
    pub bl: f64,
    pub palm: f64,
}

/// Precomputed per-hand geometry for the biomechanical terms.
#[derive(Debug, Clone)]
pub struct BiomechTerm {
    frames: [AngleFrame; NUM_POSE_JOINTS],
    bones: [(usize, usize); NUM_BONES],
    pub bounds: BiomechBounds,
}

impl BiomechTerm {
    pub fn new(model: &HandModel, bounds: BiomechBounds) -> Self {
        Self {
            frames: angle_frames(model),
            bones: bones(model),
            bounds,
        }
    }

    pub fn angle_frames(&self) -> &[AngleFrame; NUM_POSE_JOINTS] {
        &self.frames
    }

    /// (flexion, abduction) per pose joint.
    pub fn joint_angles(&self, theta: &[Vec3; NUM_POSE_JOINTS]) -> [[f64; 2]; NUM_POSE_JOINTS] {
        std::array::from_fn(|i| {
            let dir = axis_angle_to_matrix(&theta[i]) * self.frames[i].axis;
            self.frames[i].angles(&dir).0
        })
    }

    /// Evaluates the terms and accumulates weighted gradients into `d_theta` and `d_joints`.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        &self,
        model: &HandModel,
        theta: &[Vec3; NUM_POSE_JOINTS],
        joints: &[Vec3; NUM_JOINTS],
        weights: [f64; 3],
        d_theta: &mut [Vec3; NUM_POSE_JOINTS],
        d_joints: &mut [Vec3; NUM_JOINTS],
    ) -> BioValue {
        let [w_ja, w_bl, w_palm] = weights;
        let mut v = BioValue::default();

        for i in 0..NUM_POSE_JOINTS {
            let frame = &self.frames[i];
            let r = axis_angle_to_matrix(&theta[i]);
            let dir = r * frame.axis;
            let (ang, g) = frame.angles(&dir);
            let p = Vec2::new(ang[0], ang[1]);
            let (dist, closest) = self.bounds.hulls[i].distance(&p);
            if dist == 0.0 {
                continue;
            }
            v.ja += dist * dist;
            let dp = (p - closest) * (2.0 * w_ja);
            let g_dir = g[0] * dp.x + g[1] * dp.y;
            let jac = axis_angle_jacobian(&theta[i]);
            for k in 0..3 {
                d_theta[i][k] += g_dir.dot(&(jac[k] * frame.axis));
            }
        }

        for (b, &(s, e)) in self.bones.iter().enumerate() {
            let vec = joints[e] - joints[s];
            let len = vec.norm();
            let (loss, dl) = self.bounds.bone_length[b].loss(len);
            if loss == 0.0 {
                continue;
            }
            v.bl += loss;
            if len > 0.0 {
                let g = vec * (w_bl * dl / len);
                d_joints[e] += g;
                d_joints[s] -= g;
            }
        }

        let palm = PalmMeasures::new(model, joints);
        let mut d_angle = [0.0; NUM_PALM_ANGLES];
        let mut d_curv = [0.0; NUM_PALM_CURVATURES];
        for k in 0..NUM_PALM_ANGLES {
            let (loss, dl) = self.bounds.palm_angle[k].loss(palm.angles[k]);
            v.palm += loss;
            d_angle[k] = w_palm * dl;
        }
        for k in 0..NUM_PALM_CURVATURES {
            let (loss, dl) = self.bounds.palm_curvature[k].loss(palm.curvatures[k]);
            v.palm += loss;
            d_curv[k] = w_palm * dl;
        }
        if v.palm > 0.0 {
            palm.backward(&d_angle, &d_curv, d_joints);
        }
        v
    }
}
