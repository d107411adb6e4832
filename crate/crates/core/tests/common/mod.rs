#![allow(dead_code)]
//! Fixtures shared by the objective tests and the acceptance target.

use handtraj::fixture::synthetic_hand_model;
use handtraj::geometry::{axis_angle_to_matrix, Intrinsics, Mat3, Vec2, Vec3};
use handtraj::objectives::biomech::{BiomechBounds, BiomechTerm, BoundsDefaults};
use handtraj::objectives::{
    evaluate, penetration_pairs, Anchors, HandInputs, HandVars, ObjectiveConfig, Observation, PriorInputs, Problem,
    Variables,
};
use handtraj::prior::{LinearGaussianPrior, LocalPose, MotionPrior};
use handtraj::{HandModel, HandState, Handedness, NUM_BETAS, NUM_JOINTS, NUM_KIN_JOINTS, NUM_POSE_JOINTS, NUM_VERTICES};
use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn models() -> [HandModel; 2] {
    let right = synthetic_hand_model();
    [right.mirrored(), right]
}

pub fn rvec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

pub fn k() -> Intrinsics {
    Intrinsics {
        fx: 1000.0,
        fy: 1000.0,
        cx: 320.0,
        cy: 240.0,
    }
}

pub struct Case {
    pub models: [HandModel; 2],
    pub slam_r: Vec<Mat3>,
    pub slam_t: Vec<Vec3>,
    pub hands: [HandInputs; 2],
    pub vars: Variables,
    pub prior: LinearGaussianPrior,
    pub anchors: [Anchors; 2],
    pub bounds: [BiomechBounds; 2],
}

impl Case {
    pub fn problem(&self, stage3: bool) -> Problem<'_> {
        Problem {
            models: [&self.models[0], &self.models[1]],
            biomech: std::array::from_fn(|h| BiomechTerm::new(&self.models[h], self.bounds[h].clone())),
            intrinsics: k(),
            slam_rotation: self.slam_r.clone(),
            slam_translation: self.slam_t.clone(),
            hands: self.hands.clone(),
            stage3: stage3.then(|| PriorInputs {
                prior: &self.prior as &dyn MotionPrior,
                anchors: self.anchors.clone(),
            }),
            frozen_penetration: None,
        }
    }
}

pub const T: usize = 5;
pub const WINDOW: usize = 8;

pub fn random_case(seed: u64, overlap: bool, latent: bool) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models = models();
    let slam_r: Vec<Mat3> = (0..T).map(|_| axis_angle_to_matrix(&rvec(&mut rng, 0.1))).collect();
    let slam_t: Vec<Vec3> = (0..T).map(|_| rvec(&mut rng, 0.05)).collect();
    let base = if overlap {
        [Vec3::new(0.02, 0.0, 0.5), Vec3::new(-0.04, 0.004, 0.5)]
    } else {
        [Vec3::new(-0.12, 0.0, 0.5), Vec3::new(0.04, 0.0, 0.5)]
    };
    let noise = Normal::new(0.0, 30.0).unwrap();
    let mut hands_vars: [HandVars; 2] = std::array::from_fn(|_| HandVars::zeros(T, if latent { 128 } else { 0 }));
    let omega = rng.random_range(0.8..1.5);
    let cam_rotation: Vec<Vec3> = (0..T).map(|_| rvec(&mut rng, 0.02)).collect();
    let cam_translation: Vec<Vec3> = (0..T).map(|_| rvec(&mut rng, 0.01)).collect();

    let mut train: Vec<Vec<LocalPose>> = Vec::new();
    for _ in 0..6 {
        train.push((0..WINDOW).map(|_| std::array::from_fn(|_| rvec(&mut rng, 0.3))).collect());
    }
    let prior = LinearGaussianPrior::fit(&train, WINDOW).unwrap();

    let mut inputs: Vec<HandInputs> = Vec::new();
    let mut anchors: Vec<Anchors> = Vec::new();
    for h in 0..2 {
        let hv = &mut hands_vars[h];
        for b in hv.beta.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        for t in 0..T {
            hv.phi[t] = rvec(&mut rng, 0.15);
            hv.tau[t] = base[h] + rvec(&mut rng, if overlap { 0.002 } else { 0.01 });
            hv.theta[t] = std::array::from_fn(|_| rvec(&mut rng, if latent { 0.05 } else { 0.3 }));
        }
        let mut active = vec![true; T];
        if h == 0 && seed % 2 == 1 {
            active[T - 1] = false;
        }
        let mut obs = Vec::new();
        for t in 0..T {
            if !active[t] || (t == 1 && h == 1) {
                obs.push(None);
                continue;
            }
            let state = HandState {
                theta: hv.theta[t],
                beta: hv.beta,
                phi: hv.phi[t],
                tau: hv.tau[t],
                handedness: Handedness::BOTH[h],
            };
            let joints = models[h].joints(&state);
            let r = axis_angle_to_matrix(&cam_rotation[t]) * slam_r[t];
            let tr = slam_t[t] * omega + cam_translation[t];
            let mut kp = [Vec2::zeros(); NUM_JOINTS];
            let mut mask = [false; NUM_JOINTS];
            for j in 0..NUM_JOINTS {
                let p = r * joints[j] + tr;
                kp[j] = Vec2::new(1000.0 * p.x / p.z + 320.0, 1000.0 * p.y / p.z + 240.0)
                    + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                mask[j] = rng.random_bool(0.8);
            }
            obs.push(Some(Observation { keypoints: kp, mask }));
        }
        let (mu, sigma) = prior.encode(&hv.theta).unwrap();
        anchors.push(Anchors {
            phi: hv.phi.iter().map(|p| p + rvec(&mut rng, 0.05)).collect(),
            tau: hv.tau.iter().map(|p| p + rvec(&mut rng, 0.01)).collect(),
            mu: mu.clone(),
            sigma,
        });
        if latent {
            let decoded = prior.decode(&mu, T);
            for t in 0..T {
                for j in 0..NUM_POSE_JOINTS {
                    hv.theta[t][j] -= decoded[t][j];
                }
            }
            // only the fitted components move the decoder; the rest sit at their floor σ
            let rank = prior.rank();
            hv.z = mu
                .iter()
                .enumerate()
                .map(|(i, m)| if i < rank { m + rng.random_range(-0.05..0.05) } else { *m })
                .collect();
        }
        inputs.push(HandInputs {
            observations: obs,
            active,
        });
    }
    let tight = BoundsDefaults {
        flexion_deg: (-5.0, 5.0),
        abduction_deg: (-3.0, 3.0),
        thumb_flexion_deg: (-4.0, 6.0),
        thumb_abduction_deg: (-2.0, 2.0),
        bone_length_tolerance: 0.01,
        palm_angle_window_deg: 0.5,
        palm_curvature_window_deg: 0.5,
    };
    let bounds = std::array::from_fn(|h| BiomechBounds::defaults_for(&models[h], &tight));
    let mut inputs = inputs.into_iter();
    let mut anchors = anchors.into_iter();
    Case {
        models,
        slam_r,
        slam_t,
        hands: [inputs.next().unwrap(), inputs.next().unwrap()],
        vars: Variables {
            hands: hands_vars,
            omega,
            cam_rotation,
            cam_translation,
        },
        prior,
        anchors: [anchors.next().unwrap(), anchors.next().unwrap()],
        bounds,
    }
}

/// Visits every scalar of the variables in a fixed order.
pub fn visit(v: &mut Variables, f: &mut dyn FnMut(&str, &mut f64)) {
    for (h, hv) in v.hands.iter_mut().enumerate() {
        let tag = |s: &str| format!("{}{}", ["l.", "r."][h], s);
        for b in hv.beta.iter_mut() {
            f(&tag("beta"), b);
        }
        for p in hv.phi.iter_mut() {
            for c in p.iter_mut() {
                f(&tag("phi"), c);
            }
        }
        for p in hv.tau.iter_mut() {
            for c in p.iter_mut() {
                f(&tag("tau"), c);
            }
        }
        for pose in hv.theta.iter_mut() {
            for p in pose.iter_mut() {
                for c in p.iter_mut() {
                    f(&tag("theta"), c);
                }
            }
        }
        for z in hv.z.iter_mut() {
            f(&tag("z"), z);
        }
    }
    f("omega", &mut v.omega);
    for p in v.cam_rotation.iter_mut() {
        for c in p.iter_mut() {
            f("cam_rot", c);
        }
    }
    for p in v.cam_translation.iter_mut() {
        for c in p.iter_mut() {
            f("cam_trans", c);
        }
    }
}

pub fn flat(v: &Variables) -> Vec<(String, f64)> {
    let mut v = v.clone();
    let mut out = Vec::new();
    visit(&mut v, &mut |n, x| out.push((n.to_string(), *x)));
    out
}

pub fn perturbed(v: &Variables, k: usize, h: f64) -> Variables {
    let mut v = v.clone();
    let mut i = 0;
    visit(&mut v, &mut |_, x| {
        if i == k {
            *x += h;
        }
        i += 1;
    });
    v
}

/// Relative error of sampled gradient coordinates against central differences
/// with step 1e-5, as (coordinate name, error). Each variable group's first
/// coordinate is always included.
pub fn gradient_errors(
    problem: &Problem,
    vars: &Variables,
    cfg: &ObjectiveConfig,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Vec<(String, f64)> {
    let eval = evaluate(problem, vars, cfg, true);
    let grad = flat(eval.grad.as_ref().unwrap());
    let n = grad.len();
    let mut picks: Vec<usize> = (0..samples).map(|_| rng.random_range(0..n)).collect();
    let mut seen = std::collections::BTreeSet::new();
    for (i, (name, _)) in grad.iter().enumerate() {
        if seen.insert(name.clone()) {
            picks.push(i);
        }
    }
    let h = 1e-5;
    picks
        .into_iter()
        .map(|k| {
            let fp = evaluate(problem, &perturbed(vars, k, h), cfg, false).total;
            let fm = evaluate(problem, &perturbed(vars, k, -h), cfg, false).total;
            let fd = (fp - fm) / (2.0 * h);
            let an = grad[k].1;
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            (format!("{k} ({}) fd {fd} analytic {an}", grad[k].0), rel)
        })
        .collect()
}

/// Holds the penetration correspondences at the base point; the analytic gradient differentiates that piece.
pub fn frozen<'a>(mut problem: Problem<'a>, vars: &Variables) -> Problem<'a> {
    let cfg = ObjectiveConfig::default();
    let live = evaluate(&problem, vars, &cfg, false).total;
    problem.frozen_penetration = Some(penetration_pairs(&problem, vars));
    let held = evaluate(&problem, vars, &cfg, false).total;
    assert_eq!(live, held);
    problem
}

pub fn only(cfg: &ObjectiveConfig, keep: &str) -> ObjectiveConfig {
    let mut c = *cfg;
    let set = |name: &str, v: &mut f64| {
        if name != keep {
            *v = 0.0;
        }
    };
    set("2d", &mut c.lambda_2d);
    set("smooth", &mut c.lambda_smooth);
    set("cam", &mut c.lambda_cam);
    set("theta", &mut c.lambda_theta);
    set("beta", &mut c.lambda_beta);
    set("z", &mut c.lambda_z);
    set("phi", &mut c.lambda_phi);
    set("tau", &mut c.lambda_tau);
    set("pen", &mut c.lambda_pen);
    set("ja", &mut c.lambda_ja);
    set("bl", &mut c.lambda_bl);
    set("palm", &mut c.lambda_palm);
    c
}

pub const TERMS: [&str; 12] = ["2d", "smooth", "cam", "theta", "beta", "z", "phi", "tau", "pen", "ja", "bl", "palm"];

/// Random state with poses up to 0.8 rad per axis and shapes in ±2.
pub fn random_state(rng: &mut impl Rng, handedness: Handedness) -> HandState {
    let mut s = HandState::rest(handedness);
    for t in s.theta.iter_mut() {
        *t = Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
    }
    for b in s.beta.iter_mut() {
        *b = rng.random_range(-2.0..2.0);
    }
    s.phi = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    s.tau = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0));
    s
}

/// Homogeneous rotation from axis-angle via the exponential series, independent of the library.
pub fn exp_homogeneous(v: &Vec3) -> Matrix4<f64> {
    let k = Matrix4::new(
        0.0, -v.z, v.y, 0.0, //
        v.z, 0.0, -v.x, 0.0, //
        -v.y, v.x, 0.0, 0.0, //
        0.0, 0.0, 0.0, 0.0,
    );
    let mut out = Matrix4::identity();
    let mut term = Matrix4::identity();
    for n in 1..40 {
        term = term * k / n as f64;
        out += term;
    }
    out
}

pub fn translation(t: &Vec3) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m[(0, 3)] = t.x;
    m[(1, 3)] = t.y;
    m[(2, 3)] = t.z;
    m
}

/// Naive per-joint 4x4 chain, full per-vertex skinning, then dense regression.
pub fn oracle_joints(model: &HandModel, s: &HandState) -> [Vec3; NUM_JOINTS] {
    let shaped: Vec<Vec3> = (0..NUM_VERTICES)
        .map(|v| {
            let mut p = model.template()[v];
            for b in 0..NUM_BETAS {
                p += model.shape_basis()[v][b] * s.beta[b];
            }
            p
        })
        .collect();
    let rest: Vec<Vec3> = (0..NUM_KIN_JOINTS)
        .map(|j| model.regressor_row(j).iter().fold(Vec3::zeros(), |a, &(v, w)| a + shaped[v] * w))
        .collect();
    // Frame of joint j: origin at the posed joint, axes rotated by the accumulated pose.
    let mut global = vec![Matrix4::identity(); NUM_KIN_JOINTS];
    for j in 0..NUM_KIN_JOINTS {
        global[j] = match model.parent(j) {
            None => exp_homogeneous(&s.phi) * translation(&rest[0]),
            Some(p) => global[p] * translation(&(rest[j] - rest[p])) * exp_homogeneous(&s.theta[j - 1]),
        };
    }
    let posed: Vec<Vec3> = (0..NUM_VERTICES)
        .map(|v| {
            let mut acc = Vec3::zeros();
            for j in 0..NUM_KIN_JOINTS {
                let w = model.skinning()[v][j];
                if w == 0.0 {
                    continue;
                }
                let local = shaped[v] - rest[j];
                let p = global[j] * Vector4::new(local.x, local.y, local.z, 1.0);
                acc += Vec3::new(p.x, p.y, p.z) * w;
            }
            acc + s.tau
        })
        .collect();
    std::array::from_fn(|k| model.regressor_row(k).iter().fold(Vec3::zeros(), |a, &(v, w)| a + posed[v] * w))
}
