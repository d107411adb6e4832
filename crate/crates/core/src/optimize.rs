//! Staged fitting: variable groups, phase schedules and the two optimization stages.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::hand_model::{Handedness, NUM_BETAS, NUM_POSE_JOINTS};
use crate::lbfgs::{lbfgs_minimize, IterationLog, LbfgsConfig, LbfgsReport};
use crate::objectives::{evaluate, Anchors, ObjectiveConfig, PriorInputs, Problem, TermValues, Variables};
use crate::prior::{HandPrior, LocalPose, MotionPrior};

/// Variable groups that a phase can switch on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Root orientation and translation.
    Root,
    /// Local pose, or its per-frame correction once a latent code exists.
    Pose,
    Shape,
    Scale,
    Camera,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    pub groups: Vec<Group>,
    pub iterations: usize,
    /// Optimize each hand on its own (only valid when no shared group is active).
    #[serde(default)]
    pub per_hand: bool,
    /// Objective config keys replaced for this phase, e.g. `lambda_smooth`.
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub phases: Vec<Phase>,
    /// L-BFGS iterations per counted phase iteration. Stage II runs each
    /// iteration as an optimizer step of 20 inner iterations (the usual
    /// torch L-BFGS step); Stage III starts converged and counts plainly.
    pub inner_iterations: usize,
}

impl StageSchedule {
    pub fn stage2() -> Self {
        Self {
            phases: vec![
                Phase {
                    name: "root".into(),
                    groups: vec![Group::Root],
                    iterations: 20,
                    per_hand: true,
                    overrides: BTreeMap::from([("lambda_smooth".to_string(), 1.0)]),
                },
                Phase {
                    name: "full".into(),
                    groups: vec![Group::Root, Group::Pose, Group::Shape, Group::Scale, Group::Camera],
                    iterations: 60,
                    per_hand: false,
                    overrides: BTreeMap::new(),
                },
            ],
            inner_iterations: 20,
        }
    }

    pub fn stage3() -> Self {
        Self {
            phases: vec![
                Phase {
                    name: "root".into(),
                    groups: vec![Group::Root],
                    iterations: 200,
                    per_hand: false,
                    overrides: BTreeMap::new(),
                },
                Phase {
                    name: "latent".into(),
                    groups: vec![Group::Root, Group::Pose, Group::Latent, Group::Camera, Group::Scale],
                    iterations: 200,
                    per_hand: false,
                    overrides: BTreeMap::new(),
                },
            ],
            inner_iterations: 1,
        }
    }

    pub fn validate(&self, base: &ObjectiveConfig) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Validation("schedule has no phases".into()));
        }
        if self.inner_iterations == 0 {
            return Err(Error::Validation("inner_iterations must be positive".into()));
        }
        for p in &self.phases {
            if p.iterations == 0 {
                return Err(Error::Validation(format!("phase '{}' has zero iterations", p.name)));
            }
            if p.per_hand && p.groups.iter().any(|g| matches!(g, Group::Scale | Group::Camera)) {
                return Err(Error::Validation(format!(
                    "phase '{}' is per-hand but optimizes shared variables",
                    p.name
                )));
            }
            apply_overrides(base, &p.overrides)?;
        }
        Ok(())
    }
}

/// Objective config with a phase's overrides applied.
pub fn apply_overrides(base: &ObjectiveConfig, overrides: &BTreeMap<String, f64>) -> Result<ObjectiveConfig> {
    if overrides.is_empty() {
        return Ok(*base);
    }
    let mut v = serde_json::to_value(base)?;
    for (k, x) in overrides {
        match v.get_mut(k) {
            Some(slot) if slot.is_number() => *slot = serde_json::json!(x),
            _ => return Err(Error::Validation(format!("unknown objective override '{k}'"))),
        }
    }
    let cfg: ObjectiveConfig = serde_json::from_value(v)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Variables held fixed regardless of the phase.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Frozen {
    pub scale: bool,
    pub shape: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Phi(usize, usize),
    Tau(usize, usize),
    Theta(usize, usize),
    Beta(usize),
    Z(usize),
    Omega,
    CamRot(usize),
    CamTrans(usize),
}

/// Ordered list of the free scalars of one phase.
///
/// While the scale is free, root translations are packed as `τ + ω·Rᵀτ^c`,
/// the world position a hand would have if it stayed fixed in the SLAM camera.
/// A scale step then keeps the image unchanged, which removes the long valley
/// that couples ω to every frame's translation. The change of variables is
/// linear and invertible, so minimizers are the same.
#[derive(Debug, Clone)]
pub struct Layout {
    slots: Vec<Slot>,
    len: usize,
    /// `Rᵀτ^c` per frame when the scale is free.
    camera_offset: Option<Vec<Vec3>>,
    /// ω is packed as `ω·k`, see [`omega_scale`].
    omega_scale: f64,
}

/// Metres of camera displacement per unit of ω (RMS over frames, relative to
/// frame 0), floored at 1 mm.
///
/// Packing ω in these units gives it a curvature comparable to the
/// translations, which matters because L-BFGS starts from a scalar Hessian
/// guess. Unscaled, ω crawls along its valley for thousands of iterations.
fn omega_scale(offsets: &[Vec3]) -> f64 {
    let Some(first) = offsets.first() else {
        return 1.0;
    };
    let ms = offsets.iter().map(|o| (o - first).norm_squared()).sum::<f64>() / offsets.len() as f64;
    ms.sqrt().max(1e-3)
}

impl Layout {
    /// Frame 0's camera delta is never free: it anchors the world frame.
    pub fn new(problem: &Problem, vars: &Variables, groups: &[Group], hands: [bool; 2], frozen: Frozen) -> Self {
        let n = problem.frames();
        let has = |g: Group| groups.contains(&g);
        let mut slots = Vec::new();
        for h in 0..2 {
            let inputs = &problem.hands[h];
            if !hands[h] || !inputs.any_active() {
                continue;
            }
            let latent = !vars.hands[h].z.is_empty();
            for t in 0..n {
                if !inputs.active[t] {
                    continue;
                }
                if has(Group::Root) {
                    slots.push(Slot::Phi(h, t));
                    slots.push(Slot::Tau(h, t));
                }
                let pose_free = if latent { inputs.observations[t].is_some() } else { true };
                if has(Group::Pose) && pose_free {
                    slots.push(Slot::Theta(h, t));
                }
            }
            if has(Group::Shape) && !frozen.shape {
                slots.push(Slot::Beta(h));
            }
            if has(Group::Latent) && latent {
                slots.push(Slot::Z(h));
            }
        }
        if has(Group::Scale) && !frozen.scale {
            slots.push(Slot::Omega);
        }
        if has(Group::Camera) {
            for t in 1..n {
                slots.push(Slot::CamRot(t));
                slots.push(Slot::CamTrans(t));
            }
        }
        let len = slots
            .iter()
            .map(|s| match s {
                Slot::Phi(..) | Slot::Tau(..) | Slot::CamRot(_) | Slot::CamTrans(_) => 3,
                Slot::Theta(..) => 3 * NUM_POSE_JOINTS,
                Slot::Beta(_) => NUM_BETAS,
                Slot::Z(h) => vars.hands[*h].z.len(),
                Slot::Omega => 1,
            })
            .sum();
        let camera_offset = slots.contains(&Slot::Omega).then(|| {
            problem
                .slam_rotation
                .iter()
                .zip(&problem.slam_translation)
                .map(|(r, t)| r.transpose() * t)
                .collect()
        });
        let omega_scale = camera_offset.as_deref().map_or(1.0, omega_scale);
        Self { slots, len, camera_offset, omega_scale }
    }

    fn shift_translations(&self, v: &mut Variables, sign: f64) {
        if let Some(off) = &self.camera_offset {
            let w = v.omega * sign;
            for s in &self.slots {
                if let Slot::Tau(h, t) = *s {
                    v.hands[h].tau[t] += off[t] * w;
                }
            }
        }
    }

    /// Gradient in packed coordinates from the gradient in model variables.
    pub fn pack_gradient(&self, g: &Variables) -> Vec<f64> {
        let mut g = g.clone();
        if let Some(off) = &self.camera_offset {
            for s in &self.slots {
                if let Slot::Tau(h, t) = *s {
                    g.omega -= g.hands[h].tau[t].dot(&off[t]);
                }
            }
        }
        g.omega /= self.omega_scale;
        let mut out = Vec::with_capacity(self.len);
        self.visit(&mut g, |x| out.push(*x));
        out
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn visit(&self, v: &mut Variables, mut f: impl FnMut(&mut f64)) {
        let v3 = |x: &mut Vec3, f: &mut dyn FnMut(&mut f64)| x.iter_mut().for_each(f);
        for s in &self.slots {
            match *s {
                Slot::Phi(h, t) => v3(&mut v.hands[h].phi[t], &mut f),
                Slot::Tau(h, t) => v3(&mut v.hands[h].tau[t], &mut f),
                Slot::Theta(h, t) => v.hands[h].theta[t].iter_mut().for_each(|x| x.iter_mut().for_each(&mut f)),
                Slot::Beta(h) => v.hands[h].beta.iter_mut().for_each(&mut f),
                Slot::Z(h) => v.hands[h].z.iter_mut().for_each(&mut f),
                Slot::Omega => f(&mut v.omega),
                Slot::CamRot(t) => v3(&mut v.cam_rotation[t], &mut f),
                Slot::CamTrans(t) => v3(&mut v.cam_translation[t], &mut f),
            }
        }
    }

    pub fn pack(&self, v: &Variables) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len);
        let mut v = v.clone();
        self.shift_translations(&mut v, 1.0);
        v.omega *= self.omega_scale;
        self.visit(&mut v, |x| out.push(*x));
        out
    }

    pub fn unpack(&self, v: &mut Variables, x: &[f64]) {
        let mut i = 0;
        self.visit(v, |slot| {
            *slot = x[i];
            i += 1;
        });
        if self.slots.contains(&Slot::Omega) {
            v.omega /= self.omega_scale;
        }
        self.shift_translations(v, -1.0);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseReport {
    pub stage: u8,
    pub phase: String,
    pub hand: Option<Handedness>,
    pub variables: usize,
    pub lbfgs: LbfgsReport,
    pub total_before: f64,
    pub total_after: f64,
    pub terms_after: TermValues,
}

/// One line of the diagnostics log.
#[derive(Debug, Clone, Serialize)]
pub struct DiagRecord {
    pub chunk: usize,
    pub stage: u8,
    pub phase: String,
    pub hand: Option<Handedness>,
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub terms: Option<TermValues>,
}

pub struct RunContext<'a> {
    pub chunk: usize,
    pub lbfgs: LbfgsConfig,
    pub frozen: Frozen,
    pub log: &'a mut dyn FnMut(DiagRecord),
}

/// Runs one phase in place and reports it.
pub fn run_phase(
    problem: &Problem,
    vars: &mut Variables,
    base: &ObjectiveConfig,
    phase: &Phase,
    inner_iterations: usize,
    stage: u8,
    ctx: &mut RunContext,
) -> Result<Vec<PhaseReport>> {
    let cfg = apply_overrides(base, &phase.overrides)?;
    let hand_sets: Vec<(Option<Handedness>, [bool; 2])> = if phase.per_hand {
        vec![(Some(Handedness::Left), [true, false]), (Some(Handedness::Right), [false, true])]
    } else {
        vec![(None, [true, true])]
    };
    let mut reports = Vec::new();
    for (hand, mask) in hand_sets {
        let layout = Layout::new(problem, vars, &phase.groups, mask, ctx.frozen);
        let before = evaluate(problem, vars, &cfg, false);
        if layout.is_empty() {
            continue;
        }
        let x0 = layout.pack(vars);
        let recent: RefCell<Vec<(u64, TermValues)>> = RefCell::new(Vec::new());
        let objective = |x: &[f64]| {
            let mut v = vars.clone();
            layout.unpack(&mut v, x);
            let e = evaluate(problem, &v, &cfg, true);
            let flat = layout.pack_gradient(&e.grad.expect("gradient requested"));
            let mut r = recent.borrow_mut();
            if r.len() == 32 {
                r.remove(0);
            }
            r.push((e.total.to_bits(), e.terms));
            (e.total, flat)
        };
        let chunk = ctx.chunk;
        let log = &mut ctx.log;
        let (x, report) = lbfgs_minimize(objective, &x0, &ctx.lbfgs.for_steps(phase.iterations, inner_iterations), |it: &IterationLog| {
            let terms = recent.borrow().iter().rev().find(|(b, _)| *b == it.value.to_bits()).map(|(_, t)| *t);
            log(DiagRecord {
                chunk,
                stage,
                phase: phase.name.clone(),
                hand,
                iteration: it.iteration,
                value: it.value,
                grad_norm: it.grad_norm,
                step: it.step,
                terms,
            });
        });
        layout.unpack(vars, &x);
        let after = evaluate(problem, vars, &cfg, false);
        reports.push(PhaseReport {
            stage,
            phase: phase.name.clone(),
            hand,
            variables: layout.len(),
            lbfgs: report,
            total_before: before.total,
            total_after: after.total,
            terms_after: after.terms,
        });
    }
    Ok(reports)
}

impl LbfgsConfig {
    /// Budget for `steps` optimizer steps of `inner` iterations each.
    /// History carries across steps, so this is one continuous run.
    pub fn for_steps(&self, steps: usize, inner: usize) -> LbfgsConfig {
        LbfgsConfig {
            max_iter: steps * inner,
            ..*self
        }
    }
}

pub fn run_stage2(
    problem: &Problem,
    vars: &mut Variables,
    cfg: &ObjectiveConfig,
    schedule: &StageSchedule,
    ctx: &mut RunContext,
) -> Result<Vec<PhaseReport>> {
    if problem.stage3.is_some() {
        return Err(Error::InvalidInput("stage 2 problem must not carry prior inputs".into()));
    }
    schedule.validate(cfg)?;
    let mut out = Vec::new();
    for phase in &schedule.phases {
        out.extend(run_phase(problem, vars, cfg, phase, schedule.inner_iterations, 2, ctx)?);
    }
    Ok(out)
}

/// Builds the prior-stage variables and anchors from a stage-2 solution.
///
/// The latent code starts at the encoder mean of the stage-2 pose, and each
/// observed frame's correction starts at the residual `θ − decode(z)`.
/// Unobserved frames carry no correction, so their pose comes from the decoder.
pub fn prepare_stage3(
    prior: &dyn MotionPrior,
    problem: &Problem,
    stage2: &Variables,
) -> Result<(Variables, [Anchors; 2])> {
    let n = problem.frames();
    if n > prior.window() {
        return Err(Error::InvalidInput(format!(
            "chunk of {n} frames exceeds the prior window {}",
            prior.window()
        )));
    }
    let mut vars = stage2.clone();
    let mut anchors = Vec::with_capacity(2);
    for h in 0..2 {
        let hv = &mut vars.hands[h];
        let hand_prior = HandPrior::new(prior, Handedness::BOTH[h]);
        let observed: Vec<bool> = (0..n)
            .map(|t| problem.hands[h].observations[t].is_some() && problem.hands[h].active[t])
            .collect();
        let (mu, sigma) = hand_prior.encode_observed(&hv.theta, &observed)?;
        let decoded = hand_prior.decode(&mu, n);
        for t in 0..n {
            let corr: LocalPose = if observed[t] {
                std::array::from_fn(|j| hv.theta[t][j] - decoded[t][j])
            } else {
                [Vec3::zeros(); NUM_POSE_JOINTS]
            };
            hv.theta[t] = corr;
        }
        hv.z = mu.clone();
        anchors.push(Anchors {
            phi: hv.phi.clone(),
            tau: hv.tau.clone(),
            mu,
            sigma,
        });
    }
    let mut it = anchors.into_iter();
    Ok((vars, [it.next().unwrap(), it.next().unwrap()]))
}

/// Runs the prior stage; `problem.stage3` must be unset on entry and is restored on exit.
pub fn run_stage3<'a>(
    problem: &mut Problem<'a>,
    prior: &'a dyn MotionPrior,
    stage2: &Variables,
    cfg: &ObjectiveConfig,
    schedule: &StageSchedule,
    ctx: &mut RunContext,
) -> Result<(Variables, Vec<PhaseReport>)> {
    schedule.validate(cfg)?;
    let (mut vars, anchors) = prepare_stage3(prior, problem, stage2)?;
    problem.stage3 = Some(PriorInputs { prior, anchors });
    let mut out = Vec::new();
    let mut result = Ok(());
    for phase in &schedule.phases {
        match run_phase(problem, &mut vars, cfg, phase, schedule.inner_iterations, 3, ctx) {
            Ok(r) => out.extend(r),
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    problem.stage3 = None;
    result.map(|_| (vars, out))
}

/// Effective local poses after the prior stage (decoded pose plus correction).
pub fn effective_poses(vars: &Variables, prior: Option<&dyn MotionPrior>) -> [Vec<LocalPose>; 2] {
    std::array::from_fn(|h| vars.poses(h, prior))
}
