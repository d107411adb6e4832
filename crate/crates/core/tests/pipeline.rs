use std::collections::BTreeMap;

use handtraj::fixture::synthetic_hand_model;
use handtraj::objectives::biomech::{BiomechBounds, BiomechTerm};
use handtraj::objectives::{evaluate, HandVars, ObjectiveConfig, Problem, Variables};
use handtraj::optimize::{
    apply_overrides, prepare_stage3, run_phase, run_stage2, Frozen, Group, Layout, Phase, RunContext, StageSchedule,
};
use handtraj::pipeline::{chunk_ranges, ingest, run, stitch, PipelineConfig, PipelineInputs};
use handtraj::prior::{LinearGaussianPrior, MotionPrior};
use handtraj::synth::{generate, training_poses, CameraMotion, ScenarioConfig, SeedNoise, SynthBundle};
use handtraj::lbfgs::LbfgsConfig;
use handtraj::{HandModel, Vec3};

fn models() -> [HandModel; 2] {
    let right = synthetic_hand_model();
    [right.mirrored(), right]
}

fn short_scenario(frames: usize, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        frames,
        seed,
        ..ScenarioConfig::default()
    }
}

fn exact(mut sc: ScenarioConfig) -> ScenarioConfig {
    sc.noise_px = 0.0;
    sc.occlusion_rate = 0.0;
    sc.seed_noise = SeedNoise {
        theta_rad: 0.0,
        phi_rad: 0.0,
        tau_m: 0.0,
        beta: 0.0,
    };
    sc
}

fn problem<'a>(b: &SynthBundle, models: [&'a HandModel; 2], cfg: &ObjectiveConfig) -> Problem<'a> {
    let ing = ingest(&b.track, &b.camera, models, 50).unwrap();
    Problem {
        models,
        biomech: std::array::from_fn(|h| BiomechTerm::new(models[h], BiomechBounds::defaults_for(models[h], &cfg.bounds))),
        intrinsics: ing.intrinsics,
        slam_rotation: b.camera.poses.iter().map(|p| *p.rotation.matrix()).collect(),
        slam_translation: b.camera.poses.iter().map(|p| p.translation).collect(),
        hands: ing.hands,
        stage3: None,
        frozen_penetration: None,
    }
}

fn gt_vars(b: &SynthBundle) -> Variables {
    let n = b.gt.frames();
    Variables {
        hands: std::array::from_fn(|h| {
            let tr = &b.gt.hands[h];
            let mut hv = HandVars::zeros(n, 0);
            hv.beta = tr.shared_beta;
            for t in 0..n {
                hv.theta[t] = tr.frames[t].theta;
                hv.phi[t] = tr.frames[t].phi;
                hv.tau[t] = tr.frames[t].tau;
            }
            hv
        }),
        omega: b.gt.omega,
        cam_rotation: vec![Vec3::zeros(); n],
        cam_translation: vec![Vec3::zeros(); n],
    }
}

fn phase(groups: Vec<Group>, iterations: usize) -> Phase {
    Phase {
        name: "test".into(),
        groups,
        iterations,
        per_hand: false,
        overrides: BTreeMap::new(),
    }
}

fn ctx(log: &mut dyn FnMut(handtraj::optimize::DiagRecord)) -> RunContext<'_> {
    RunContext {
        chunk: 0,
        lbfgs: LbfgsConfig::default(),
        frozen: Frozen::default(),
        log,
    }
}

fn quick_config(steps: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        skip_stage3: true,
        ..PipelineConfig::default()
    };
    for p in &mut cfg.stage2.phases {
        p.iterations = steps;
    }
    cfg
}

#[test]
fn chunk_ranges_cover_the_sequence() {
    assert_eq!(chunk_ranges(300, 128), vec![(0, 128), (128, 256), (256, 300)]);
    assert_eq!(chunk_ranges(128, 128), vec![(0, 128)]);
    assert_eq!(chunk_ranges(5, 128), vec![(0, 5)]);
}

#[test]
fn schedules_reject_bad_phases() {
    let base = ObjectiveConfig::default();
    StageSchedule::stage2().validate(&base).unwrap();
    StageSchedule::stage3().validate(&base).unwrap();

    let mut s = StageSchedule::stage2();
    s.phases[1].iterations = 0;
    assert!(s.validate(&base).is_err());

    let mut s = StageSchedule::stage2();
    s.phases[0].groups.push(Group::Scale);
    assert!(s.validate(&base).is_err());

    let mut s = StageSchedule::stage2();
    s.inner_iterations = 0;
    assert!(s.validate(&base).is_err());

    let bad = BTreeMap::from([("lambda_nope".to_string(), 1.0)]);
    assert!(apply_overrides(&base, &bad).is_err());
    let good = BTreeMap::from([("lambda_smooth".to_string(), 1.0)]);
    assert_eq!(apply_overrides(&base, &good).unwrap().lambda_smooth, 1.0);
}

#[test]
fn schedule_round_trips_through_json() {
    let s = StageSchedule::stage2();
    let back: StageSchedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
    assert_eq!(back, s);
}

#[test]
fn layout_gradient_matches_finite_differences() {
    let m = models();
    let refs = [&m[0], &m[1]];
    let b = generate(&short_scenario(12, 3), refs).unwrap();
    let cfg = ObjectiveConfig::default();
    let p = problem(&b, refs, &cfg);
    let mut vars = gt_vars(&b);
    vars.omega = 1.7;
    vars.cam_translation[5] = Vec3::new(0.003, -0.002, 0.001);
    let groups = [Group::Root, Group::Pose, Group::Shape, Group::Scale, Group::Camera];
    let layout = Layout::new(&p, &vars, &groups, [true, true], Frozen::default());
    let x0 = layout.pack(&vars);
    let f = |x: &[f64]| {
        let mut v = vars.clone();
        layout.unpack(&mut v, x);
        evaluate(&p, &v, &cfg, true)
    };
    let e = f(&x0);
    let g = layout.pack_gradient(e.grad.as_ref().unwrap());
    assert_eq!(g.len(), layout.len());
    // spot-check every 37th coordinate plus the last (the scale)
    let mut idx: Vec<usize> = (0..x0.len()).step_by(37).collect();
    idx.push(x0.len() - 1);
    let h = 1e-6;
    for i in idx {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[i] += h;
        xm[i] -= h;
        let fd = (f(&xp).total - f(&xm).total) / (2.0 * h);
        let tol = 1e-4 * fd.abs().max(g[i].abs()).max(1e-2);
        assert!((fd - g[i]).abs() < tol, "coordinate {i}: analytic {} vs fd {fd}", g[i]);
    }
}

#[test]
fn layout_pack_unpack_round_trips() {
    let m = models();
    let refs = [&m[0], &m[1]];
    let b = generate(&short_scenario(10, 1), refs).unwrap();
    let cfg = ObjectiveConfig::default();
    let p = problem(&b, refs, &cfg);
    let vars = gt_vars(&b);
    let layout = Layout::new(&p, &vars, &[Group::Root, Group::Scale], [true, true], Frozen::default());
    let mut back = Variables::zeros_like(&vars);
    back.hands.iter_mut().zip(&vars.hands).for_each(|(a, b)| a.theta = b.theta.clone());
    layout.unpack(&mut back, &layout.pack(&vars));
    assert!((back.omega - vars.omega).abs() < 1e-12);
    for h in 0..2 {
        // inactive frames carry no free variables
        for t in (0..vars.frames()).filter(|&t| p.hands[h].active[t]) {
            assert!((back.hands[h].tau[t] - vars.hands[h].tau[t]).norm() < 1e-12);
            assert_eq!(back.hands[h].phi[t], vars.hands[h].phi[t]);
        }
    }
    // frame 0's camera delta is never a free variable
    let cam = Layout::new(&p, &vars, &[Group::Camera], [true, true], Frozen::default());
    assert_eq!(cam.len(), 6 * (vars.frames() - 1));
}

#[test]
fn frozen_groups_stay_bit_identical() {
    let m = models();
    let refs = [&m[0], &m[1]];
    let b = generate(&short_scenario(16, 2), refs).unwrap();
    let cfg = ObjectiveConfig::default();
    let p = problem(&b, refs, &cfg);
    let mut vars = gt_vars(&b);
    for hv in &mut vars.hands {
        for tau in &mut hv.tau {
            tau.x += 0.01;
        }
    }
    vars.cam_rotation[3] = Vec3::new(0.01, 0.0, 0.0);
    let before = vars.clone();
    let mut sink = |_| {};
    let mut c = ctx(&mut sink);
    run_phase(&p, &mut vars, &cfg, &phase(vec![Group::Root], 3), 5, 2, &mut c).unwrap();
    assert_eq!(vars.omega.to_bits(), before.omega.to_bits());
    assert_eq!(vars.cam_rotation, before.cam_rotation);
    assert_eq!(vars.cam_translation, before.cam_translation);
    for h in 0..2 {
        assert_eq!(vars.hands[h].theta, before.hands[h].theta);
        assert_eq!(vars.hands[h].beta, before.hands[h].beta);
    }
    assert_ne!(vars.hands[1].tau, before.hands[1].tau);

    // a frozen scale is left out even when its group is listed
    let mut c = RunContext {
        frozen: Frozen { scale: true, shape: true },
        ..ctx(&mut sink)
    };
    let before = vars.clone();
    run_phase(&p, &mut vars, &cfg, &phase(vec![Group::Root, Group::Scale, Group::Shape], 2), 5, 2, &mut c).unwrap();
    assert_eq!(vars.omega.to_bits(), before.omega.to_bits());
    assert_eq!(vars.hands[0].beta, before.hands[0].beta);
}

#[test]
fn root_phase_recovers_a_one_centimetre_offset() {
    let m = models();
    let refs = [&m[0], &m[1]];
    let b = generate(&exact(short_scenario(32, 4)), refs).unwrap();
    let cfg = ObjectiveConfig::default();
    let p = problem(&b, refs, &cfg);
    let gt = gt_vars(&b);
    let mut vars = gt.clone();
    for tau in &mut vars.hands[1].tau {
        *tau += Vec3::new(0.01, 0.0, 0.0);
    }
    let mut sink = |_| {};
    let mut c = ctx(&mut sink);
    let reports = run_phase(&p, &mut vars, &cfg, &phase(vec![Group::Root], 50), 20, 2, &mut c).unwrap();
    assert!(reports[0].total_after < reports[0].total_before);
    let worst = (0..32).map(|t| (vars.hands[1].tau[t] - gt.hands[1].tau[t]).norm()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "worst translation error {worst} m");
}

#[test]
fn stage_two_never_increases_the_objective() {
    let m = models();
    let refs = [&m[0], &m[1]];
    let b = generate(&short_scenario(24, 5), refs).unwrap();
    let cfg = ObjectiveConfig::default();
    let p = problem(&b, refs, &cfg);
    let ing = ingest(&b.track, &b.camera, refs, 50).unwrap();
    let mut vars = handtraj::pipeline::initialize(&ing, &b.camera, 1.0, 50).unwrap();
    let mut records = Vec::new();
    let mut sink = |r| records.push(r);
    let mut c = ctx(&mut sink);
    let mut schedule = StageSchedule::stage2();
    schedule.phases.iter_mut().for_each(|p| p.iterations = 3);
    let reports = run_stage2(&p, &mut vars, &cfg, &schedule, &mut c).unwrap();
    assert_eq!(reports.len(), 3, "two per-hand root phases and one joint phase");
    for r in &reports {
        assert!(r.total_after <= r.total_before, "{}: {} -> {}", r.phase, r.total_before, r.total_after);
    }
    assert!(!records.is_empty());
    assert!(records.iter().any(|r| r.terms.is_some()));
}

#[test]
fn stage_two_rejects_prior_inputs() {
    let m = models();
    let refs = [&m[0], &m[1]];
    let b = generate(&short_scenario(8, 6), refs).unwrap();
    let cfg = ObjectiveConfig::default();
    let p = problem(&b, refs, &cfg);
    let train = training_poses(&m[1], &ScenarioConfig::default().pose, 4, 8, 30.0, 1);
    let prior = LinearGaussianPrior::fit(&train, 8).unwrap();
    let vars = gt_vars(&b);
    let (_, anchors) = prepare_stage3(&prior, &p, &vars).unwrap();
    let p3 = Problem {
        stage3: Some(handtraj::objectives::PriorInputs {
            prior: &prior,
            anchors,
        }),
        ..p
    };
    let mut v = vars.clone();
    let mut sink = |_| {};
    let mut c = ctx(&mut sink);
    assert!(run_stage2(&p3, &mut v, &cfg, &StageSchedule::stage2(), &mut c).is_err());
}

#[test]
fn stage_three_starts_from_the_stage_two_poses() {
    let m = models();
    let refs = [&m[0], &m[1]];
    let mut sc = short_scenario(32, 7);
    sc.occlusion_rate = 0.2;
    let b = generate(&sc, refs).unwrap();
    let cfg = ObjectiveConfig::default();
    let p = problem(&b, refs, &cfg);
    let train = training_poses(&m[1], &sc.pose, 16, 32, sc.fps, 2);
    let prior = LinearGaussianPrior::fit(&train, 32).unwrap();
    let stage2 = gt_vars(&b);
    let (v3, anchors) = prepare_stage3(&prior, &p, &stage2).unwrap();
    for h in 0..2 {
        assert_eq!(v3.hands[h].z.len(), prior.latent_dim());
        assert_eq!(anchors[h].tau, stage2.hands[h].tau);
        let poses = v3.poses(h, Some(&prior));
        for t in 0..32 {
            if p.hands[h].observations[t].is_some() {
                for j in 0..15 {
                    assert!((poses[t][j] - stage2.hands[h].theta[t][j]).norm() < 1e-9);
                }
            } else {
                // masked frames come from the prior alone
                assert!(v3.hands[h].theta[t].iter().all(|c| c.norm() == 0.0));
            }
        }
    }
}

#[test]
fn static_camera_leaves_the_scale_untouched() {
    let m = models();
    let refs = [&m[0], &m[1]];
    let mut sc = short_scenario(40, 8);
    sc.camera = CameraMotion::Static;
    let b = generate(&sc, refs).unwrap();
    let mut cfg = quick_config(2);
    cfg.omega_init = 1.3;
    let inputs = PipelineInputs {
        track: &b.track,
        camera: &b.camera,
        models: refs,
        prior: None,
        bounds: None,
    };
    let out = run(&inputs, &cfg, &mut |_| {}).unwrap();
    assert!((out.world.omega - 1.3).abs() < 1e-6, "omega moved to {}", out.world.omega);
}

#[test]
fn pipeline_is_deterministic() {
    let m = models();
    let refs = [&m[0], &m[1]];
    let b = generate(&short_scenario(30, 9), refs).unwrap();
    let cfg = quick_config(2);
    let inputs = PipelineInputs {
        track: &b.track,
        camera: &b.camera,
        models: refs,
        prior: None,
        bounds: None,
    };
    let a = run(&inputs, &cfg, &mut |_| {}).unwrap();
    let c = run(&inputs, &cfg, &mut |_| {}).unwrap();
    assert_eq!(a.world.to_jsonl(), c.world.to_jsonl());
    assert_eq!(a.world.omega.to_bits(), c.world.omega.to_bits());
}

#[test]
fn chunks_share_one_scale() {
    let m = models();
    let refs = [&m[0], &m[1]];
    let b = generate(&short_scenario(300, 10), refs).unwrap();
    let cfg = quick_config(1);
    let inputs = PipelineInputs {
        track: &b.track,
        camera: &b.camera,
        models: refs,
        prior: None,
        bounds: None,
    };
    let out = run(&inputs, &cfg, &mut |_| {}).unwrap();
    let lens: Vec<usize> = out.chunks.iter().map(|c| c.end - c.start).collect();
    assert_eq!(lens, vec![128, 128, 44]);
    for c in &out.chunks {
        assert_eq!(c.omega.to_bits(), out.world.omega.to_bits());
    }
    assert_eq!(out.world.frames(), 300);
}

#[test]
fn stitching_matches_boundary_velocity() {
    let n = 12;
    let mut vars = Variables {
        hands: std::array::from_fn(|_| HandVars::zeros(n, 0)),
        omega: 1.0,
        cam_rotation: vec![Vec3::zeros(); n],
        cam_translation: vec![Vec3::zeros(); n],
    };
    let v = Vec3::new(0.01, 0.0, -0.002);
    for h in 0..2 {
        for t in 0..n {
            // constant velocity with a 3 cm jump at the boundary
            let jump = if t >= 6 { Vec3::new(0.0, 0.03 * (h + 1) as f64, 0.0) } else { Vec3::zeros() };
            vars.hands[h].tau[t] = v * t as f64 + jump + Vec3::new(h as f64 * 0.1, 0.0, 0.0);
        }
    }
    let m = models();
    let b = generate(&short_scenario(n, 1), [&m[0], &m[1]]).unwrap();
    let active = [vec![true; n], vec![true; n]];
    let shifts = stitch(&mut vars, &active, &b.camera, &[6]);
    assert!((shifts[0][0] - Vec3::new(0.0, -0.03, 0.0)).norm() < 1e-12);
    assert!((shifts[0][1] - Vec3::new(0.0, -0.06, 0.0)).norm() < 1e-12);
    // the camera follows the mean correction
    for t in 0..n {
        let expect = if t >= 6 { Vec3::new(0.0, 0.045, 0.0) } else { Vec3::zeros() };
        let r = b.camera.poses[t].rotation.matrix();
        assert!((vars.cam_translation[t] - r * expect).norm() < 1e-12, "frame {t}");
    }
    for h in 0..2 {
        for t in 1..n {
            let step = vars.hands[h].tau[t] - vars.hands[h].tau[t - 1];
            assert!((step - v).norm() < 1e-12);
        }
    }
}

#[test]
fn config_rejects_unknown_keys() {
    let err = serde_json::from_str::<PipelineConfig>(r#"{"chunk_size": 64, "bogus": 1}"#);
    assert!(err.is_err());
    let cfg: PipelineConfig = serde_json::from_str(r#"{"chunk_size": 64}"#).unwrap();
    assert_eq!(cfg.chunk_size, 64);
    assert_eq!(cfg.stage2, StageSchedule::stage2());
    let bad = PipelineConfig {
        omega_init: 0.0,
        ..PipelineConfig::default()
    };
    assert!(bad.validate().is_err());
}
