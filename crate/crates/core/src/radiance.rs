//! Radiance-grid reconstruction from posed images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::grid::{Aabb, FetchMode, FieldGrid, GradSink};
use crate::image_fit::psnr;
use crate::optim::{run_progressive, GridInit, ProgressiveTask, StageContext, StageReport};
use crate::parallel;
use crate::raster::RasterImage;
use crate::render::{
    generate_ray, mix_seed, render_image, CameraPose, RadianceField, RayScratch, RenderSettings, RADIANCE_CHANNELS,
};
use crate::render::sh::SH_COEFFS;

/// An RGB image and the camera it was taken from.
#[derive(Clone, Debug)]
pub struct PosedImage {
    pub pose: CameraPose,
    pub image: RasterImage,
}

impl PosedImage {
    pub fn new(pose: CameraPose, image: RasterImage) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::invalid("radiance supervision needs RGB images"));
        }
        if image.width() != pose.width() || image.height() != pose.height() {
            return Err(Error::Validation(format!(
                "image is {}x{} but its camera is {}x{}",
                image.width(),
                image.height(),
                pose.width(),
                pose.height()
            )));
        }
        Ok(PosedImage { pose, image })
    }
}

pub fn density_mode(mode: Mode) -> FetchMode {
    match mode {
        Mode::Relu => FetchMode::ReLU,
        Mode::None => FetchMode::None,
    }
}

/// Samples per ray for a stage: the full-resolution count scaled by the
/// stage's share of the final resolution, never below 8.
pub fn stage_samples(full: usize, stage_dims: &[usize], final_dims: &[usize]) -> usize {
    let stage = *stage_dims.iter().max().unwrap_or(&1) as f64;
    let fin = *final_dims.iter().max().unwrap_or(&1) as f64;
    ((full as f64 * stage / fin).round() as usize).max(8)
}

/// Mean per-view PSNR of `grid` rendered from each posed image.
pub fn evaluate_views(
    grid: &FieldGrid,
    density: FetchMode,
    views: &[PosedImage],
    settings: &RenderSettings,
) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::UndefinedMetric("no views to evaluate".into()));
    }
    let mut total = 0.0;
    for v in views {
        let rendered = render_image(grid, density, &v.pose, settings)?;
        total += psnr(&rendered.rgb, &v.image)?;
    }
    Ok(total / views.len() as f64)
}

/// Zeroes the color coefficients of bands above `degree`, so the grid
/// renders the same at full degree.
pub fn zero_sh_above(grid: &mut FieldGrid, degree: usize) {
    let terms = (degree + 1) * (degree + 1);
    if terms >= SH_COEFFS {
        return;
    }
    for vertex in grid.values_mut().chunks_exact_mut(RADIANCE_CHANNELS) {
        for ch in 0..3 {
            vertex[1 + ch * SH_COEFFS + terms..1 + (ch + 1) * SH_COEFFS].fill(0.0);
        }
    }
}

/// Per-stage summary handed to the observer of [`fit_radiance_with`].
#[derive(Clone, Debug)]
pub struct RadianceStage {
    pub report: StageReport,
    pub samples_per_ray: usize,
    /// Mean PSNR over the validation views, if any were given.
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RadianceFit {
    pub grid: FieldGrid,
    pub density: FetchMode,
    pub stages: Vec<RadianceStage>,
}

struct RadianceTask<'a> {
    train: &'a [PosedImage],
    val: &'a [PosedImage],
    /// First global pixel index of each training view.
    starts: Vec<usize>,
    total_pixels: usize,
    cfg: &'a TrainConfig,
    density: FetchMode,
    batch: Vec<(u32, u32)>,
    spares: Vec<GradSink>,
    samples: usize,
    stages: Vec<RadianceStage>,
    on_stage: &'a mut dyn FnMut(&RadianceStage, &FieldGrid) -> Result<()>,
}

const JITTER_STREAM: u64 = 0x6a09_e667_f3bc_c908;

impl ProgressiveTask for RadianceTask<'_> {
    fn step(&mut self, grid: &FieldGrid, sink: &mut GradSink, ctx: &StageContext) -> Result<f64> {
        self.samples = stage_samples(self.cfg.samples_per_ray, &ctx.dims, &ctx.final_dims);
        let iter = ctx.global_iteration as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, iter));
        self.batch.clear();
        for _ in 0..self.cfg.batch_rays {
            let g = rng.gen_range(0..self.total_pixels);
            let view = self.starts.partition_point(|&s| s <= g) - 1;
            self.batch.push((view as u32, (g - self.starts[view]) as u32));
        }
        let settings = RenderSettings {
            samples_per_ray: self.samples,
            background: self.cfg.background,
            stratified_jitter: true,
            seed: mix_seed(self.cfg.seed ^ JITTER_STREAM, iter),
        };
        let field = RadianceField::new(grid, self.density)?.with_sh_degree(self.cfg.sh_degree)?;
        let count = (self.batch.len() * 3) as f64;
        let (train, starts) = (self.train, &self.starts);
        let aabb = grid.aabb();
        let sum = parallel::accumulate(&self.batch, sink, &mut self.spares, |chunk, grads| {
            let mut scratch = RayScratch::default();
            let mut sum = 0.0;
            for &(view, pixel) in chunk {
                let v = &train[view as usize];
                let w = v.pose.width();
                let (x, y) = (pixel as usize % w, pixel as usize / w);
                let ray = generate_ray(&v.pose, (x, y), aabb);
                let ray_id = (starts[view as usize] + pixel as usize) as u64;
                let c = field.trace(&ray, &settings, ray_id, &mut scratch)?;
                let target = v.image.pixel(x, y);
                let mut up = [0.0; 3];
                for ch in 0..3 {
                    let d = c.rgb[ch] - target[ch];
                    sum += d * d;
                    up[ch] = 2.0 * d / count;
                }
                field.backprop(&settings, &scratch, up, grads);
            }
            Ok(sum)
        })?;
        Ok(sum / count)
    }

    fn project(&self, grid: &mut FieldGrid) {
        if self.density == FetchMode::None {
            grid.clamp_channel(0, 0.0, f64::INFINITY);
        }
        zero_sh_above(grid, self.cfg.sh_degree);
    }

    fn stage_finished(&mut self, grid: &FieldGrid, report: &StageReport) -> Result<()> {
        let val_psnr = if self.val.is_empty() {
            None
        } else {
            let settings = RenderSettings {
                samples_per_ray: self.samples,
                background: self.cfg.background,
                stratified_jitter: false,
                seed: self.cfg.seed,
            };
            Some(evaluate_views(grid, self.density, self.val, &settings)?)
        };
        let stage = RadianceStage {
            report: report.clone(),
            samples_per_ray: self.samples,
            val_psnr,
        };
        (self.on_stage)(&stage, grid)?;
        self.stages.push(stage);
        Ok(())
    }
}

/// Reconstructs a radiance grid over `aabb` from `train`, reporting PSNR on
/// `val` after each stage.
pub fn fit_radiance(train: &[PosedImage], val: &[PosedImage], aabb: Aabb, cfg: &TrainConfig) -> Result<RadianceFit> {
    fit_radiance_with(train, val, aabb, cfg, &mut |_, _| Ok(()))
}

pub fn fit_radiance_with(
    train: &[PosedImage],
    val: &[PosedImage],
    aabb: Aabb,
    cfg: &TrainConfig,
    on_stage: &mut dyn FnMut(&RadianceStage, &FieldGrid) -> Result<()>,
) -> Result<RadianceFit> {
    if train.is_empty() {
        return Err(Error::Validation("no training views".into()));
    }
    if cfg.batch_rays == 0 {
        return Err(Error::invalid("batch_rays must be positive"));
    }
    if cfg.sh_degree > 2 {
        return Err(Error::invalid(format!("SH degree must be 0, 1 or 2, got {}", cfg.sh_degree)));
    }
    if aabb.ndim() != 3 {
        return Err(Error::invalid("radiance grids are three-dimensional"));
    }
    RenderSettings {
        samples_per_ray: cfg.samples_per_ray,
        background: cfg.background,
        ..RenderSettings::default()
    }
    .validate()?;
    let mut starts = Vec::with_capacity(train.len());
    let mut total_pixels = 0;
    for v in train {
        starts.push(total_pixels);
        total_pixels += v.pose.width() * v.pose.height();
    }
    let schedule = cfg.schedule(3)?;
    let density = density_mode(cfg.mode);
    let init = GridInit {
        channels: RADIANCE_CHANNELS,
        aabb,
        range: cfg.init_range,
        seed: cfg.seed,
    };
    let mut task = RadianceTask {
        train,
        val,
        starts,
        total_pixels,
        cfg,
        density,
        batch: Vec::with_capacity(cfg.batch_rays),
        spares: Vec::new(),
        samples: cfg.samples_per_ray,
        stages: Vec::new(),
        on_stage,
    };
    let outcome = run_progressive(&mut task, &schedule, &init, cfg.adam())?;
    Ok(RadianceFit {
        grid: outcome.grid,
        density,
        stages: task.stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{desk_cameras, desk_ground_truth, render_views};

    #[test]
    fn sample_count_scales_with_stage() {
        assert_eq!(stage_samples(256, &[8; 3], &[64; 3]), 32);
        assert_eq!(stage_samples(256, &[64; 3], &[64; 3]), 256);
        assert_eq!(stage_samples(64, &[4; 3], &[128; 3]), 8);
    }

    #[test]
    fn image_and_pose_sizes_must_agree() {
        let pose = CameraPose::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 4, 4, 4.0).unwrap();
        let img = RasterImage::filled(5, 4, 3, 0.5).unwrap();
        assert!(matches!(PosedImage::new(pose, img), Err(Error::Validation(_))));
    }

    #[test]
    fn small_refit_improves_and_is_reproducible() {
        let gt = desk_ground_truth(16).unwrap();
        let cams = desk_cameras(6, 24).unwrap();
        let settings = RenderSettings {
            samples_per_ray: 48,
            ..RenderSettings::default()
        };
        let views = render_views(&gt, &cams, &settings).unwrap();
        let (train, val) = views.split_at(5);
        let cfg = TrainConfig {
            dims: vec![16],
            shrink_exponent: 1,
            stage_iters: 60,
            batch_rays: 256,
            samples_per_ray: 48,
            sh_degree: 0,
            ..TrainConfig::default()
        };
        let a = fit_radiance(train, val, gt.aabb().clone(), &cfg).unwrap();
        let first = a.stages[0].val_psnr.unwrap();
        let last = a.stages.last().unwrap().val_psnr.unwrap();
        assert!(last > first, "{first} -> {last}");
        let b = fit_radiance(train, val, gt.aabb().clone(), &cfg).unwrap();
        assert_eq!(a.grid.values(), b.grid.values());
        for vertex in a.grid.values().chunks(RADIANCE_CHANNELS) {
            for ch in 0..3 {
                assert!(vertex[2 + ch * SH_COEFFS..1 + (ch + 1) * SH_COEFFS].iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn rejects_bad_sh_degree() {
        let gt = desk_ground_truth(8).unwrap();
        let cams = desk_cameras(2, 8).unwrap();
        let views = render_views(&gt, &cams, &RenderSettings::default()).unwrap();
        let cfg = TrainConfig {
            sh_degree: 3,
            ..TrainConfig::default()
        };
        assert!(fit_radiance(&views, &[], gt.aabb().clone(), &cfg).is_err());
    }
}
