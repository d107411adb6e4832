use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use handtraj::camera_world::CameraTrajectory;
use handtraj::fixture::synthetic_hand_model;
use handtraj::hand_model::{HandModel, Handedness};
use handtraj::metrics::EvalReport;
use handtraj::objectives::biomech::{BiomechBounds, BoundsDefaults};
use handtraj::pipeline::{self, PipelineConfig, PipelineInputs};
use handtraj::prior::{mirror_pose, LinearGaussianPrior, LocalPose, MotionPrior};
use handtraj::synth::{self, ScenarioConfig};
use handtraj::tracks::ObservationTrack;
use handtraj::world::WorldTrajectory;
use rayon::prelude::*;
use serde_json::json;

use crate::config;
use crate::error::{CliError, EXIT_INPUT};
use crate::{EvaluateArgs, ModelArg, OptimizeArgs, PriorFitArgs, SynthArgs};

pub const WORLD_FILE: &str = "world.jsonl";
pub const STAGE2_FILE: &str = "stage2.jsonl";
pub const CAMERA_FILE: &str = "camera.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Left and right models from one file; the missing side is its mirror image.
fn load_models(arg: &ModelArg) -> Result<[HandModel; 2], CliError> {
    let model = load_model(arg)?;
    let other = model.mirrored();
    Ok(match model.handedness() {
        Handedness::Left => [model, other],
        Handedness::Right => [other, model],
    })
}

fn load_model(arg: &ModelArg) -> Result<HandModel, CliError> {
    if arg.model == "builtin" {
        Ok(synthetic_hand_model())
    } else {
        HandModel::load(Path::new(&arg.model)).map_err(CliError::input)
    }
}

fn refs(m: &[HandModel; 2]) -> [&HandModel; 2] {
    [&m[0], &m[1]]
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| handtraj::Error::io(dir, e).into())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializes");
    text.push('\n');
    Ok(handtraj::io::write_atomic(path, text.as_bytes())?)
}

/// A closed pipe on stdout is not an error worth reporting.
fn print_json(value: &impl serde::Serialize) {
    let text = serde_json::to_string_pretty(value).expect("serializes");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

pub fn optimize(a: &OptimizeArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mut cfg: PipelineConfig = config::resolve(a.config.config.as_deref(), &a.config.sets)?;
    cfg.skip_stage3 |= a.skip_stage3;
    cfg.validate().map_err(CliError::input)?;

    let track = ObservationTrack::load(&a.tracks).map_err(CliError::input)?;
    let camera = CameraTrajectory::load(&a.camera).map_err(CliError::input)?;
    let models = load_models(&a.model)?;
    let prior = match (&a.prior, cfg.skip_stage3) {
        (Some(p), false) => Some(LinearGaussianPrior::load(p).map_err(CliError::input)?),
        (None, false) => return Err(CliError::config("the prior stage needs --prior (or pass --skip-stage3)")),
        (_, true) => None,
    };
    let bounds = match &a.bounds {
        Some(p) => {
            let b = BiomechBounds::load(p).map_err(CliError::input)?;
            Some([b.clone(), b])
        }
        None => None,
    };

    create_dir(&a.out)?;
    let diag_path = a.out.join(DIAGNOSTICS_FILE);
    let mut diag = BufWriter::new(File::create(&diag_path).map_err(|e| handtraj::Error::io(&diag_path, e))?);
    let mut diag_err = None;
    let inputs = PipelineInputs {
        track: &track,
        camera: &camera,
        models: refs(&models),
        prior: prior.as_ref().map(|p| p as &dyn MotionPrior),
        bounds,
    };
    let out = pipeline::run(&inputs, &cfg, &mut |rec| {
        if diag_err.is_none() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            diag_err = writeln!(diag, "{line}").err();
        }
    })?;
    if let Some(e) = diag_err.or_else(|| diag.flush().err()) {
        return Err(handtraj::Error::io(&diag_path, e).into());
    }

    let paths = [WORLD_FILE, STAGE2_FILE, CAMERA_FILE, CONFIG_FILE].map(|f| a.out.join(f));
    out.world.save(&paths[0])?;
    out.stage2.save(&paths[1])?;
    out.camera.save(&paths[2])?;
    write_json(&paths[3], &cfg)?;

    let stage2_seconds: f64 = out.chunks.iter().map(|c| c.stage2_seconds).sum();
    let stage3_seconds: f64 = out.chunks.iter().map(|c| c.stage3_seconds).sum();
    let manifest = json!({
        "tool": "handtraj",
        "version": env!("CARGO_PKG_VERSION"),
        "inputs": {
            "tracks": a.tracks,
            "camera": a.camera,
            "model": a.model.model,
            "prior": a.prior,
            "bounds": a.bounds,
            "config": a.config.config,
            "overrides": a.config.sets,
        },
        "config_sha256": config::hash(&cfg),
        "stages": out.stages,
        "frames": out.world.frames(),
        "omega": out.world.omega,
        "chunks": out.chunks.iter().map(|c| json!({
            "index": c.index,
            "start": c.start,
            "end": c.end,
            "omega": c.omega,
            "stage2_seconds": c.stage2_seconds,
            "stage3_seconds": c.stage3_seconds,
        })).collect::<Vec<_>>(),
        "timings": {
            "stage2_seconds": stage2_seconds,
            "stage3_seconds": stage3_seconds,
            "total_seconds": started.elapsed().as_secs_f64(),
        },
        "outputs": {
            "world": paths[0],
            "stage2": paths[1],
            "camera": paths[2],
            "config": paths[3],
            "diagnostics": diag_path,
        },
    });
    write_json(&a.out.join(MANIFEST_FILE), &manifest)?;
    eprintln!(
        "optimized {} frames in {} chunk(s), omega {:.4}, {:.1} s",
        out.world.frames(),
        out.chunks.len(),
        out.world.omega,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// `(name, pred, gt)` triples; directories pair files by name.
fn pair_sequences(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, CliError> {
    if !pred.is_dir() {
        let name = pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, pred.to_path_buf(), gt.to_path_buf())]);
    }
    let entries = std::fs::read_dir(pred).map_err(|e| CliError::input(handtraj::Error::io(pred, e)))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::config(format!("no .jsonl files in {}", pred.display())).with_path(pred));
    }
    Ok(files
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            let g = gt.join(p.file_name().unwrap());
            (name, p, g)
        })
        .collect())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let models = load_models(&a.model)?;
    let pairs = pair_sequences(&a.pred, &a.gt)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::config(e.to_string()))?;
    let results: Vec<Result<(String, EvalReport), CliError>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|(name, p, g)| {
                let pred = WorldTrajectory::load(p).map_err(CliError::input)?;
                let gt = WorldTrajectory::load(g).map_err(CliError::input)?;
                let r = handtraj::metrics::evaluate(&pred, &gt, refs(&models))?;
                Ok((name.clone(), r))
            })
            .collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let all: Vec<EvalReport> = reports.iter().map(|(_, r)| *r).collect();
    let mean = EvalReport::mean(&all).expect("at least one sequence");

    let doc = json!({
        "sequences": reports.iter().map(|(n, r)| (n.clone(), json!(r))).collect::<serde_json::Map<_, _>>(),
        "mean": mean,
    });
    match &a.out {
        Some(p) => write_json(p, &doc)?,
        None => print_json(&doc),
    }
    if let Some(p) = &a.csv {
        let mut csv = format!("{}\n", EvalReport::CSV_HEADER);
        for (n, r) in &reports {
            csv.push_str(&r.csv_row(n));
            csv.push('\n');
        }
        if reports.len() > 1 {
            csv.push_str(&mean.csv_row("mean"));
            csv.push('\n');
        }
        handtraj::io::write_atomic(p, csv.as_bytes())?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let sc: ScenarioConfig = config::resolve(a.config.config.as_deref(), &a.config.sets)?;
    sc.validate().map_err(CliError::input)?;
    let models = load_models(&a.model)?;
    let bundle = synth::generate(&sc, refs(&models))?;
    create_dir(&a.out)?;
    bundle.write(&a.out)?;
    write_json(&a.out.join("scenario.json"), &sc)?;
    eprintln!("wrote {} frames to {}", sc.frames, a.out.display());
    Ok(())
}

/// Every window of `window` frames, stepped by `stride`, on which the hand is
/// present throughout. Left-hand poses are mirrored into the right-hand frame.
fn windows_from(world: &WorldTrajectory, window: usize, stride: usize) -> Vec<Vec<LocalPose>> {
    let mut out = Vec::new();
    for hand in Handedness::BOTH {
        let h = hand.index();
        let poses: Vec<LocalPose> = world.hands[h]
            .frames
            .iter()
            .map(|f| if hand == Handedness::Left { mirror_pose(&f.theta) } else { f.theta })
            .collect();
        let mut start = 0;
        while start + window <= world.frames() {
            if world.active[h][start..start + window].iter().all(|&a| a) {
                out.push(poses[start..start + window].to_vec());
            }
            start += stride;
        }
    }
    out
}

pub fn prior_fit(a: &PriorFitArgs) -> Result<(), CliError> {
    if a.window < 2 {
        return Err(CliError::config("--window must be at least 2"));
    }
    let stride = a.stride.unwrap_or(a.window);
    if stride == 0 {
        return Err(CliError::config("--stride must be positive"));
    }
    if a.inputs.is_empty() && a.synthetic == 0 {
        return Err(CliError::config("give world trajectory files, --synthetic N, or both"));
    }
    let mut train = Vec::new();
    for p in &a.inputs {
        let world = WorldTrajectory::load(p).map_err(CliError::input)?;
        train.extend(windows_from(&world, a.window, stride));
    }
    if a.synthetic > 0 {
        let sc: ScenarioConfig = config::resolve(a.scenario.as_deref(), &[])?;
        let models = load_models(&a.model)?;
        train.extend(synth::training_poses(&models[1], &sc.pose, a.synthetic, a.window, sc.fps, sc.seed));
    }
    let prior = LinearGaussianPrior::fit(&train, a.window).map_err(|e| CliError {
        exit: EXIT_INPUT,
        ..e.into()
    })?;
    prior.save(&a.out)?;
    print_json(&json!({ "training_windows": train.len(), "summary": prior.summary() }));
    Ok(())
}

pub fn prior_inspect(path: &Path) -> Result<(), CliError> {
    let prior = LinearGaussianPrior::load(path).map_err(CliError::input)?;
    print_json(&prior.summary());
    Ok(())
}

pub fn model_validate(arg: &ModelArg) -> Result<(), CliError> {
    let [_, right] = load_models(arg)?;
    let mesh = handtraj::mesh::is_closed(right.faces());
    let topo = right.topology();
    print_json(&json!({
        "model": arg.model,
        "vertices": right.template().len(),
        "faces": right.faces().len(),
        "closed_mesh": mesh,
        "bone_child": topo.bone_child,
        "fingers": topo.fingers,
        "palm_normal": [topo.palm_normal.x, topo.palm_normal.y, topo.palm_normal.z],
    }));
    Ok(())
}

pub fn model_export(arg: &ModelArg, out: &Path, mirror: bool) -> Result<(), CliError> {
    let m = load_model(arg)?;
    let m = if mirror { m.mirrored() } else { m };
    Ok(m.save(out)?)
}

pub fn model_bounds(arg: &ModelArg, out: &Path) -> Result<(), CliError> {
    let [_, right] = load_models(arg)?;
    let b = BiomechBounds::defaults_for(&right, &BoundsDefaults::default());
    Ok(handtraj::io::write_atomic(out, b.to_json().as_bytes())?)
}
