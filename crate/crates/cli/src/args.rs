use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use relu_fields::{Mode, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "relufield", version, about = "Fit and render ReLU-activated feature grids")]
pub struct Cli {
    /// Worker threads (default: all hardware threads).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a 2D grid to an image.
    FitImage(FitImageArgs),
    /// Fit a 3D occupancy grid to a closed OBJ mesh.
    FitOccupancy(FitOccupancyArgs),
    /// Reconstruct a radiance grid from a posed image dataset.
    FitRadiance(FitRadianceArgs),
    /// Render a saved grid to images.
    Render(RenderArgs),
    /// Score a saved grid against a dataset or mesh.
    Eval(EvalArgs),
    /// Run the built-in numerical checks.
    Selfcheck(SelfcheckArgs),
    /// Generate a synthetic test input.
    MakeScene(MakeSceneArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Relu,
    None,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Relu => Mode::Relu,
            ModeArg::None => Mode::None,
        }
    }
}

/// Training options. Anything not given falls back to `--config`, then to
/// the built-in defaults.
#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Start from a saved run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Final vertex count per axis: one value, or one per axis.
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Train at the final resolution only, for the same total iterations.
    #[arg(long)]
    pub no_progressive: bool,
    /// Number of halvings of the final resolution for the first stage.
    #[arg(long)]
    pub shrink_exponent: Option<u32>,
    #[arg(long)]
    pub stage_iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
    #[arg(long)]
    pub batch_rays: Option<usize>,
    #[arg(long)]
    pub batch_points: Option<usize>,
    /// World box as `lo,hi` (cube) or per-axis mins then maxes.
    #[arg(long, allow_hyphen_values = true)]
    pub aabb: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Background color as `v` or `r,g,b`.
    #[arg(long)]
    pub background: Option<String>,
    /// Highest spherical-harmonic band for radiance color (0 to 2).
    #[arg(long)]
    pub sh_degree: Option<usize>,
}

impl TrainArgs {
    pub fn resolve(&self, threads: Option<usize>) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
            Ok(())
        };
        set("dims", self.dims.clone())?;
        set("shrink_exponent", self.shrink_exponent.map(|v| v.to_string()))?;
        set("stage_iters", self.stage_iters.map(|v| v.to_string()))?;
        set("lr", self.lr.map(|v| v.to_string()))?;
        set("samples_per_ray", self.samples_per_ray.map(|v| v.to_string()))?;
        set("batch_rays", self.batch_rays.map(|v| v.to_string()))?;
        set("batch_points", self.batch_points.map(|v| v.to_string()))?;
        set("aabb", self.aabb.clone())?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("background", self.background.clone())?;
        set("sh_degree", self.sh_degree.map(|v| v.to_string()))?;
        set("threads", threads.map(|v| v.to_string()))?;
        if let Some(m) = self.mode {
            cfg.mode = m.into();
        }
        if self.no_progressive {
            cfg.progressive = false;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct OutputArgs {
    /// Directory that receives the run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Name of the run directory (default derived from the inputs).
    #[arg(long)]
    pub run_id: Option<String>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct FitImageArgs {
    /// PNG to fit.
    #[arg(long)]
    pub image: PathBuf,
    /// Fit a single gray channel instead of RGB.
    #[arg(long)]
    pub gray: bool,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct FitOccupancyArgs {
    /// Closed triangle mesh in OBJ format.
    #[arg(long)]
    pub mesh: PathBuf,
    /// Monte-Carlo samples for the final IoU against the mesh.
    #[arg(long, default_value_t = 1_000_000)]
    pub iou_samples: usize,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct FitRadianceArgs {
    /// Dataset root containing transforms_train.json (and optionally
    /// transforms_val.json and transforms_test.json).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct ViewArgs {
    /// Saved grid file.
    #[arg(long)]
    pub grid: PathBuf,
    /// Activation the grid was trained with (default: from the run's
    /// config.txt next to the grid, else relu).
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Take cameras from this dataset instead of an orbit.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 256)]
    pub samples_per_ray: usize,
    #[arg(long, default_value = "1")]
    pub background: String,
    /// Orbit views when no dataset is given.
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    /// Orbit image size in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    /// Score an occupancy grid against this mesh instead of images.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000_000)]
    pub iou_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SelfcheckArgs {
    /// Scale one spherical-harmonic constant by 1% (negative control).
    #[arg(long, hide = true)]
    pub perturb_sh: bool,
}

#[derive(Args, Debug)]
pub struct MakeSceneArgs {
    #[command(subcommand)]
    pub scene: SceneKind,
}

#[derive(Subcommand, Debug)]
pub enum SceneKind {
    /// Three colored boxes seen by orbiting cameras, as a posed dataset.
    Desk {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        train: usize,
        #[arg(long, default_value_t = 5)]
        held_out: usize,
        /// Resolution of the ground-truth grid.
        #[arg(long, default_value_t = 64)]
        gt_dims: usize,
        #[arg(long, default_value_t = 256)]
        samples_per_ray: usize,
    },
    /// Icosphere mesh as OBJ.
    Sphere {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 5)]
        subdivisions: u32,
    },
    /// Flat-shaded shapes with sharp edges as PNG.
    Shapes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        size: usize,
    },
}
