//! Procedural stand-in for the licensed hand model.
//!
//! Same array shapes and joint ordering as the real asset. The palm is an
//! ellipsoid and each finger bone is a capped tube, so the mesh is closed and
//! every part is convex. Fingers point along +x, the palm faces -y and the
//! thumb sits toward +z (right hand).

use crate::geometry::Vec3;
use crate::hand_model::{
    HandModel, Handedness, ModelArrays, NUM_BETAS, NUM_JOINTS, NUM_KIN_JOINTS, NUM_VERTICES,
};

pub const PARENTS: [i32; NUM_KIN_JOINTS] = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14];

const PALM_RINGS: usize = 19;
const PALM_SEGMENTS: usize = 14;
const TUBE_RINGS: usize = 4;
const TUBE_SEGMENTS: usize = 8;
const TUBE_VERTS: usize = TUBE_RINGS * TUBE_SEGMENTS + 2;
const PALM_VERTS: usize = PALM_RINGS * PALM_SEGMENTS + 2;

/// Tip regressor rows in output order: thumb, index, middle, ring, pinky.
const TIP_BONES: [usize; 5] = [15, 3, 6, 12, 9];

struct Finger {
    root: Vec3,
    dir: Vec3,
    lengths: [f64; 3],
    radius: f64,
}

fn fingers() -> [Finger; 5] {
    let x = Vec3::x();
    let thumb_dir = Vec3::new(1.0, -0.25, 1.0).normalize();
    [
        // index, middle, pinky, ring, thumb: the order of the kinematic chains.
        Finger { root: Vec3::new(0.085, 0.0, 0.027), dir: x, lengths: [0.040, 0.024, 0.019], radius: 0.0085 },
        Finger { root: Vec3::new(0.088, 0.0, 0.009), dir: x, lengths: [0.044, 0.027, 0.020], radius: 0.0088 },
        Finger { root: Vec3::new(0.078, 0.0, -0.027), dir: x, lengths: [0.032, 0.019, 0.017], radius: 0.0072 },
        Finger { root: Vec3::new(0.084, 0.0, -0.009), dir: x, lengths: [0.041, 0.026, 0.019], radius: 0.0082 },
        Finger { root: Vec3::new(0.022, -0.006, 0.026), dir: thumb_dir, lengths: [0.036, 0.031, 0.026], radius: 0.0095 },
    ]
}

/// Rest positions of the 16 kinematic joints and 5 tips before shaping.
fn skeleton() -> ([Vec3; NUM_KIN_JOINTS], [Vec3; NUM_KIN_JOINTS]) {
    let mut joints = [Vec3::zeros(); NUM_KIN_JOINTS];
    let mut ends = [Vec3::zeros(); NUM_KIN_JOINTS];
    for (f, finger) in fingers().iter().enumerate() {
        let mut p = finger.root;
        for b in 0..3 {
            let j = 1 + 3 * f + b;
            joints[j] = p;
            p += finger.dir * finger.lengths[b];
            ends[j] = p;
        }
    }
    (joints, ends)
}

fn orthonormal_frame(d: &Vec3) -> (Vec3, Vec3) {
    let helper = if d.y.abs() < 0.9 { Vec3::y() } else { Vec3::z() };
    let u = d.cross(&helper).normalize();
    let v = d.cross(&u);
    (u, v)
}

/// Builds the procedural right-hand model.
pub fn synthetic_hand_model() -> HandModel {
    let (joints, ends) = skeleton();
    let finger_radius: Vec<f64> = fingers().iter().map(|f| f.radius).collect();

    let mut template = Vec::with_capacity(NUM_VERTICES);
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut skinning = vec![[0.0; NUM_KIN_JOINTS]; NUM_VERTICES];
    let mut regressor = vec![0.0; NUM_JOINTS * NUM_VERTICES];
    // Per-vertex centre used to orient faces outward.
    let mut part_faces: Vec<(usize, Box<dyn Fn(&Vec3) -> Vec3>)> = Vec::new();

    // Palm ellipsoid with its axis along x, poles at the wrist and at the knuckle line.
    let centre = Vec3::new(0.045, 0.0, 0.0);
    let (ax, ay, az) = (0.045, 0.014, 0.036);
    template.push(centre - Vec3::new(ax, 0.0, 0.0));
    for r in 0..PALM_RINGS {
        let polar = std::f64::consts::PI * (r + 1) as f64 / (PALM_RINGS + 1) as f64;
        for s in 0..PALM_SEGMENTS {
            let az_angle = 2.0 * std::f64::consts::PI * s as f64 / PALM_SEGMENTS as f64;
            template.push(
                centre
                    + Vec3::new(
                        -ax * polar.cos(),
                        ay * polar.sin() * az_angle.sin(),
                        az * polar.sin() * az_angle.cos(),
                    ),
            );
        }
    }
    template.push(centre + Vec3::new(ax, 0.0, 0.0));
    let first = 0u32;
    let ring = |r: usize, s: usize| (1 + r * PALM_SEGMENTS + s % PALM_SEGMENTS) as u32;
    let last = (PALM_VERTS - 1) as u32;
    let start_faces = faces.len();
    for s in 0..PALM_SEGMENTS {
        faces.push([first, ring(0, s), ring(0, s + 1)]);
        faces.push([last, ring(PALM_RINGS - 1, s + 1), ring(PALM_RINGS - 1, s)]);
    }
    for r in 0..PALM_RINGS - 1 {
        for s in 0..PALM_SEGMENTS {
            faces.push([ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)]);
            faces.push([ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)]);
        }
    }
    part_faces.push((start_faces, Box::new(move |_| centre)));
    for row in skinning.iter_mut().take(PALM_VERTS) {
        row[0] = 1.0;
    }
    regressor[0] = 1.0;

    for j in 1..NUM_KIN_JOINTS {
        let base = template.len();
        let a = joints[j];
        let b = ends[j];
        let d = (b - a).normalize();
        let (u, v) = orthonormal_frame(&d);
        let finger = (j - 1) / 3;
        let taper = 1.0 - 0.12 * ((j - 1) % 3) as f64;
        let radius = finger_radius[finger] * taper;
        let parent = PARENTS[j] as usize;

        template.push(a - d * (0.5 * radius));
        for r in 0..TUBE_RINGS {
            let c = a + (b - a) * (r as f64 / (TUBE_RINGS - 1) as f64);
            for s in 0..TUBE_SEGMENTS {
                let ang = 2.0 * std::f64::consts::PI * s as f64 / TUBE_SEGMENTS as f64;
                template.push(c + (u * ang.cos() + v * ang.sin()) * radius);
            }
        }
        template.push(b + d * (0.5 * radius));

        let start_cap = base as u32;
        let end_cap = (base + TUBE_VERTS - 1) as u32;
        let rv = |r: usize, s: usize| (base + 1 + r * TUBE_SEGMENTS + s % TUBE_SEGMENTS) as u32;
        let start_faces = faces.len();
        for s in 0..TUBE_SEGMENTS {
            faces.push([start_cap, rv(0, s + 1), rv(0, s)]);
            faces.push([end_cap, rv(TUBE_RINGS - 1, s), rv(TUBE_RINGS - 1, s + 1)]);
        }
        for r in 0..TUBE_RINGS - 1 {
            for s in 0..TUBE_SEGMENTS {
                faces.push([rv(r, s), rv(r, s + 1), rv(r + 1, s + 1)]);
                faces.push([rv(r, s), rv(r + 1, s + 1), rv(r + 1, s)]);
            }
        }
        part_faces.push((
            start_faces,
            Box::new(move |p: &Vec3| {
                let t = (p - a).dot(&d).clamp(0.0, (b - a).norm());
                a + d * t
            }),
        ));

        // The proximal cap and ring blend with the parent bone.
        for k in 0..TUBE_VERTS {
            let vtx = base + k;
            if k <= TUBE_SEGMENTS {
                skinning[vtx][j] = 0.5;
                skinning[vtx][parent] = 0.5;
            } else {
                skinning[vtx][j] = 1.0;
            }
        }
        for s in 0..TUBE_SEGMENTS {
            regressor[j * NUM_VERTICES + rv(0, s) as usize] = 1.0 / TUBE_SEGMENTS as f64;
        }
    }
    debug_assert_eq!(template.len(), NUM_VERTICES);

    for (row, &bone) in TIP_BONES.iter().enumerate() {
        let end_cap = PALM_VERTS + (bone - 1) * TUBE_VERTS + TUBE_VERTS - 1;
        regressor[(NUM_KIN_JOINTS + row) * NUM_VERTICES + end_cap] = 1.0;
    }

    orient_outward(&template, &mut faces, &part_faces);

    let shape_basis = template.iter().map(shape_directions).collect();

    HandModel::from_arrays(ModelArrays {
        template,
        faces,
        shape_basis,
        skinning,
        regressor,
        parents: PARENTS.to_vec(),
        handedness: Handedness::Right,
    })
    .expect("procedural model is valid")
}

fn orient_outward(
    template: &[Vec3],
    faces: &mut [[u32; 3]],
    parts: &[(usize, Box<dyn Fn(&Vec3) -> Vec3>)],
) {
    for (i, (start, centre_of)) in parts.iter().enumerate() {
        let end = parts.get(i + 1).map_or(faces.len(), |p| p.0);
        for f in &mut faces[*start..end] {
            let [a, b, c] = f.map(|k| template[k as usize]);
            let n = (b - a).cross(&(c - a));
            let centroid = (a + b + c) / 3.0;
            if n.dot(&(centroid - centre_of(&centroid))) < 0.0 {
                f.swap(1, 2);
            }
        }
    }
}

/// Smooth per-vertex displacement fields; unit beta moves points by a few millimetres.
fn shape_directions(p: &Vec3) -> [Vec3; NUM_BETAS] {
    let (x, y, z) = (p.x, p.y, p.z);
    [
        p * 0.08,
        Vec3::new(0.6 * x * x, 0.0, 0.0),
        Vec3::new(0.0, 0.0, 0.1 * z),
        Vec3::new(0.0, 0.15 * y, 0.0),
        Vec3::new(0.0, 0.0, 0.8 * x * z),
        Vec3::new(1.2 * z * z, 0.0, 0.0),
        Vec3::new(0.6 * x * z, 0.0, 0.0),
        Vec3::new(0.0, 1.5 * x * y, 0.0),
        Vec3::new(0.0, 0.002 * (40.0 * x).sin(), 0.002 * (30.0 * x).cos()),
        Vec3::new(0.002 * (25.0 * z).cos(), 0.0015 * (20.0 * z).sin(), 0.0),
    ]
}
