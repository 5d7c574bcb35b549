use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use forcefit::scenegen::{GraspStyle, ObjectShape};

#[derive(Debug, Parser)]
#[command(name = "forcefit", version, about = "Physics-based refinement of hand-object grasps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic static-grasp scenes with ground truth.
    Synth(SynthArgs),
    /// Refine scene poses and fit a force field.
    Refine(RefineArgs),
    /// Score refinement runs against ground truth.
    Eval(EvalArgs),
}

/// Object and contact constants shared by several commands.
#[derive(Debug, Clone, Args)]
pub struct PhysicsArgs {
    /// Largest per-vertex normal force (N).
    #[arg(long)]
    pub fmax: Option<f64>,
    /// Static friction coefficient.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Object mass (kg).
    #[arg(long)]
    pub mass: Option<f64>,
    /// Seconds between frames.
    #[arg(long)]
    pub frame_dt: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "cylinder")]
    pub shape: ObjectShape,
    #[arg(long, default_value = "pinch")]
    pub grasp: GraspStyle,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of scenes, with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    /// Target object mesh edge length (m).
    #[arg(long)]
    pub spacing: Option<f64>,
    #[command(flatten)]
    pub physics: PhysicsArgs,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Scenes generated concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Scene files to refine.
    #[arg(long, required_unless_present = "manifest")]
    pub scene: Vec<PathBuf>,
    /// Re-run the configuration stored in a manifest.
    #[arg(long, conflicts_with = "scene")]
    pub manifest: Option<PathBuf>,
    /// Skinning model replacing the one named in the scene.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "refined")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_frames: Option<usize>,
    #[arg(long)]
    pub sample_vertices: Option<usize>,
    /// Initial contact width (m).
    #[arg(long)]
    pub z_start: Option<f64>,
    /// Final contact width (m).
    #[arg(long)]
    pub z_end: Option<f64>,
    /// Contact probability at zero distance.
    #[arg(long)]
    pub p0: Option<f64>,
    #[command(flatten)]
    pub physics: PhysicsArgs,
    #[arg(long)]
    pub gamma_phy: Option<f64>,
    #[arg(long)]
    pub gamma_fr: Option<f64>,
    #[arg(long)]
    pub gamma_pen: Option<f64>,
    #[arg(long)]
    pub gamma_dev: Option<f64>,
    #[arg(long)]
    pub gamma_smooth: Option<f64>,
    #[arg(long)]
    pub lr_pose: Option<f64>,
    #[arg(long)]
    pub lr_field: Option<f64>,
    /// Hidden width of the force field.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Multiply finger coefficients by N(1, 0.1) noise before refining.
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long)]
    pub share_finger_pose: Option<bool>,
    /// Scenes refined concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directories of `refine` runs.
    #[arg(long = "run")]
    pub runs: Vec<PathBuf>,
    /// Ground-truth scene, for scoring a single refined scene.
    #[arg(long, requires = "refined")]
    pub truth: Option<PathBuf>,
    #[arg(long, requires = "truth")]
    pub refined: Option<PathBuf>,
    #[arg(long, requires = "truth")]
    pub initial: Option<PathBuf>,
    /// Contact width used for the predicted maps (m).
    #[arg(long)]
    pub z: Option<f64>,
    #[arg(long)]
    pub p0: Option<f64>,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
    /// Also write plot data and SVG renderings.
    #[arg(long)]
    pub plots: bool,
}
