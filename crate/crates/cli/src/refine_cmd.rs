use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use forcefit::eval::inject_finger_noise;
use forcefit::forces::PhysicsConstants;
use forcefit::geometry::write_obj;
use forcefit::refine::{refine, EpochRecord, RefineConfig, RunManifest};
use forcefit::scene::{load_model, read_scene, write_scene, SceneFile};

use crate::args::RefineArgs;
use crate::jobs::run_all;
use crate::synth::physics_constants;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const INITIAL: &str = "initial.scene";
pub const REFINED: &str = "refined.scene";

/// One scene to refine with its full configuration.
#[derive(Debug, Clone)]
struct Job {
    manifest: RunManifest,
    out: PathBuf,
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Defaults overridden by flags. Mass and frame interval come from the
/// scene unless given explicitly.
fn config_for(args: &RefineArgs, scene_consts: PhysicsConstants) -> Result<RefineConfig, CliError> {
    let mut c = RefineConfig::default();
    if let Some(e) = args.epochs {
        c = c.with_epochs(e);
    }
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    if let Some(v) = args.batch_frames {
        c.batch_frames = v;
    }
    if let Some(v) = args.sample_vertices {
        c.sample_vertices = v;
    }
    set(&mut c.anneal.z_start, args.z_start);
    set(&mut c.anneal.z_end, args.z_end);
    set(&mut c.p0, args.p0);
    set(&mut c.weights.physics, args.gamma_phy);
    set(&mut c.weights.force_reg, args.gamma_fr);
    set(&mut c.weights.penetration, args.gamma_pen);
    set(&mut c.weights.deviation, args.gamma_dev);
    set(&mut c.weights.smooth, args.gamma_smooth);
    set(&mut c.lr_pose, args.lr_pose);
    set(&mut c.lr_field, args.lr_field);
    if let Some(v) = args.hidden {
        c.hidden = v;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.share_finger_pose {
        c.share_finger_pose = v;
    }
    c.consts = physics_constants(scene_consts, &args.physics)?;
    c.validate().map_err(usage)?;
    Ok(c)
}

fn scene_constants(file: &SceneFile) -> PhysicsConstants {
    PhysicsConstants {
        mass: file.scene.mass,
        frame_dt: file.scene.frame_dt,
        ..PhysicsConstants::default()
    }
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    std::fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))
}

fn jobs_from_flags(args: &RefineArgs) -> Result<Vec<Job>, CliError> {
    // Reject bad flags before touching any file.
    config_for(args, PhysicsConstants::default())?;
    let model = args.model.as_deref().map(absolute).transpose()?;
    let mut jobs = Vec::new();
    for path in &args.scene {
        let scene = absolute(path)?;
        let file = read_scene(&scene).with_context(|| format!("reading {}", scene.display()))?;
        let config = config_for(args, scene_constants(&file))?;
        let stem = scene.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        jobs.push(Job {
            manifest: RunManifest {
                config,
                scene: scene.display().to_string(),
                model: model.as_ref().map(|m| m.display().to_string()),
                noise_seed: args.noise_seed,
                frames: file.scene.frames(),
                history: Vec::new(),
            },
            out: args.out.join(stem),
        });
    }
    let mut names: Vec<&PathBuf> = jobs.iter().map(|j| &j.out).collect();
    names.sort();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Usage("two scenes share a file name; refine them into separate --out directories".into()));
    }
    Ok(jobs)
}

fn epoch_table(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\tz\tbatches\ttotal\tphysics\tforce_reg\tpenetration\tdeviation\tsmooth\n");
    for r in history {
        let p = &r.energy.parts;
        let _ = writeln!(
            s,
            "{}\t{:e}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}",
            r.epoch, r.z, r.batches, r.energy.total, p.physics, p.force_reg, p.penetration, p.deviation, p.smooth
        );
    }
    s
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Loads the scene named by the manifest, applies the recorded noise and
/// refines it.
fn run_job(job: &Job) -> anyhow::Result<RunManifest> {
    let m = &job.manifest;
    let scene_path = Path::new(&m.scene);
    let mut file = read_scene(scene_path).with_context(|| format!("reading {}", m.scene))?;
    if let Some(model) = &m.model {
        file.scene.hand_model = load_model(model, Path::new("."))?;
        file.model_ref = model.clone();
    }
    let mut start = file.scene.clone();
    if let Some(seed) = m.noise_seed {
        start.hand = inject_finger_noise(&start.hand, seed, m.config.share_finger_pose);
    }
    let outcome = refine(&start, &m.config)?;

    std::fs::create_dir_all(&job.out).with_context(|| format!("creating {}", job.out.display()))?;
    write_obj(&job.out.join("object.obj"), &file.scene.object_mesh)?;
    let model_ref = if file.model_ref.starts_with("builtin:") {
        file.model_ref.clone()
    } else {
        absolute(&scene_path.parent().unwrap_or(Path::new(".")).join(&file.model_ref))?
            .display()
            .to_string()
    };
    let annotated = |scene| SceneFile {
        scene,
        object_ref: "object.obj".into(),
        model_ref: model_ref.clone(),
        truth: file.truth.clone(),
        certificate: None,
    };
    write_scene(&job.out.join(INITIAL), &annotated(start))?;
    write_scene(&job.out.join(REFINED), &annotated(outcome.scene))?;
    write(&job.out.join("field.json"), &serde_json::to_string(&outcome.field)?)?;
    write(&job.out.join("epochs.tsv"), &epoch_table(&outcome.history))?;
    // Wall-clock time lives apart from the manifest so reruns compare equal.
    write(&job.out.join("timing.json"), &serde_json::to_string_pretty(&outcome.epoch_seconds)?)?;
    let manifest = RunManifest {
        history: outcome.history,
        ..m.clone()
    };
    write(&job.out.join(MANIFEST), &manifest.to_text())?;
    Ok(manifest)
}

pub fn run(args: &RefineArgs) -> Result<(), CliError> {
    if args.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let jobs = match &args.manifest {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let manifest = RunManifest::from_text(&text).map_err(usage)?;
            manifest.config.validate().map_err(usage)?;
            vec![Job {
                manifest,
                out: args.out.clone(),
            }]
        }
        None => jobs_from_flags(args)?,
    };
    let results = run_all(&jobs, args.jobs, run_job);
    let mut first_error = None;
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok(m) => {
                let last = m.history.last().map(|r| r.energy.total).unwrap_or(f64::NAN);
                println!("{}\tfinal energy {last:e}", job.out.display());
            }
            Err(e) => {
                eprintln!("{}: {e:#}", job.manifest.scene);
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(CliError::Runtime(e)),
        None => Ok(()),
    }
}
