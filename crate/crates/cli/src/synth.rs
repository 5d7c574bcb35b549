use std::path::{Path, PathBuf};

use anyhow::Context;
use forcefit::forces::PhysicsConstants;
use forcefit::geometry::write_obj;
use forcefit::scene::{write_scene, SceneFile, BUILTIN_HAND};
use forcefit::scenegen::{generate_static_grasp, GraspConfig};

use crate::args::{PhysicsArgs, SynthArgs};
use crate::jobs::run_all;
use crate::CliError;

pub fn physics_constants(base: PhysicsConstants, args: &PhysicsArgs) -> Result<PhysicsConstants, CliError> {
    let mut c = base;
    if let Some(v) = args.fmax {
        c.max_normal_force = v;
    }
    if let Some(v) = args.mu {
        c.friction = v;
    }
    if let Some(v) = args.mass {
        c.mass = v;
    }
    if let Some(v) = args.frame_dt {
        c.frame_dt = v;
    }
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

/// File stem of a generated scene.
pub fn scene_name(args: &SynthArgs, seed: u64) -> String {
    format!("{}-{}-{seed}", args.shape, args.grasp)
}

fn write_one(args: &SynthArgs, config: &GraspConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let synth = generate_static_grasp(config)?;
    let name = scene_name(args, config.seed);
    let obj = format!("{name}.obj");
    write_obj(&out.join(&obj), &synth.scene.object_mesh)?;
    let file = SceneFile {
        scene: synth.scene,
        object_ref: obj,
        model_ref: BUILTIN_HAND.to_string(),
        truth: Some(synth.truth),
        certificate: Some(synth.certificate),
    };
    let path = out.join(format!("{name}.scene"));
    write_scene(&path, &file)?;
    Ok(path)
}

pub fn run(args: &SynthArgs) -> Result<(), CliError> {
    if args.frames < 3 {
        return Err(CliError::Usage(format!("--frames must be at least 3, got {}", args.frames)));
    }
    if args.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    if args.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let consts = physics_constants(PhysicsConstants::default(), &args.physics)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let configs: Vec<GraspConfig> = (0..args.count)
        .map(|k| {
            let mut c = GraspConfig::new(args.shape, args.grasp, args.frames, args.seed + k);
            c.consts = consts;
            if let Some(s) = args.spacing {
                c.object_spacing = s;
            }
            c
        })
        .collect();
    let results = run_all(&configs, args.jobs, |c| write_one(args, c, &args.out));
    let mut first_error = None;
    for (c, r) in configs.iter().zip(results) {
        match r {
            Ok(path) => println!("{}", path.display()),
            Err(e) => {
                eprintln!("seed {}: {e:#}", c.seed);
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(CliError::Runtime(e)),
        None => Ok(()),
    }
}
