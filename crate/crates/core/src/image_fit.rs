//! Fitting a 2D grid to a raster image.

use crate::config::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::grid::{Aabb, FetchMode, FieldGrid, GradSink};
use crate::optim::{run_progressive, GridInit, ProgressiveTask, StageContext, StageReport};
use crate::parallel;
use crate::raster::RasterImage;
use crate::render::image_mse;

/// Peak signal-to-noise ratio in dB for values in `[0, 1]`. Identical
/// images give `f64::INFINITY`.
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    let mse = image_mse(a, b)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Activation used for image fitting under each ablation mode.
pub fn image_fetch_mode(mode: Mode) -> FetchMode {
    match mode {
        Mode::Relu => FetchMode::ReLUClamp01,
        Mode::None => FetchMode::None,
    }
}

/// World box whose grid coordinates put pixel `(x, y)` at `(x + 0.5, y + 0.5)`.
pub fn image_aabb(width: usize, height: usize) -> Aabb {
    Aabb::new(vec![0.0, 0.0], vec![width as f64, height as f64]).expect("positive image size")
}

/// Evaluates the field at every pixel center.
pub fn render_field_image(grid: &FieldGrid, mode: FetchMode, width: usize, height: usize) -> Result<RasterImage> {
    if grid.ndim() != 2 {
        return Err(Error::invalid("image fields are two-dimensional"));
    }
    let ch = grid.channels();
    let mut values = Vec::with_capacity(width * height * ch);
    let mut out = vec![0.0; ch];
    for y in 0..height {
        for x in 0..width {
            let g = grid.world_to_grid(&[x as f64 + 0.5, y as f64 + 0.5]);
            grid.fetch_into(mode, &g, &mut out)?;
            values.extend_from_slice(&out);
        }
    }
    RasterImage::from_clamped(width, height, ch, values)
}

#[derive(Clone, Debug)]
pub struct ImageFit {
    pub grid: FieldGrid,
    pub mode: FetchMode,
    pub stages: Vec<StageReport>,
    pub reconstruction: RasterImage,
    pub psnr_db: f64,
}

struct PixelCache {
    dims: Vec<usize>,
    corners: Vec<([usize; 4], [f64; 4])>,
}

struct ImageTask<'a> {
    target: &'a RasterImage,
    mode: FetchMode,
    cache: PixelCache,
    pixels: Vec<u32>,
    spares: Vec<GradSink>,
    on_stage: &'a mut dyn FnMut(&StageReport, &FieldGrid) -> Result<()>,
}

impl ImageTask<'_> {
    fn refresh_cache(&mut self, grid: &FieldGrid) {
        if self.cache.dims == grid.dims() {
            return;
        }
        let (w, h) = (self.target.width(), self.target.height());
        self.cache.dims = grid.dims().to_vec();
        self.cache.corners = (0..w * h)
            .map(|p| {
                let g = grid.world_to_grid(&[(p % w) as f64 + 0.5, (p / w) as f64 + 0.5]);
                let c = grid.locate(&g);
                let w = c.weights();
                let o = c.offsets();
                ([o[0], o[1], o[2], o[3]], [w[0], w[1], w[2], w[3]])
            })
            .collect();
    }
}

impl ProgressiveTask for ImageTask<'_> {
    fn step(&mut self, grid: &FieldGrid, sink: &mut GradSink, _ctx: &StageContext) -> Result<f64> {
        self.refresh_cache(grid);
        let ch = grid.channels();
        let count = self.pixels.len() * ch;
        let scale = 2.0 / count as f64;
        let (values, target, mode, corners) = (grid.values(), self.target.values(), self.mode, &self.cache.corners);
        let total = parallel::accumulate(&self.pixels, sink, &mut self.spares, |chunk, grads| {
            let mut sum = 0.0;
            for &p in chunk {
                let p = p as usize;
                let (offs, ws) = &corners[p];
                for c in 0..ch {
                    let mut pre = 0.0;
                    for k in 0..4 {
                        pre += ws[k] * values[offs[k] + c];
                    }
                    let d = mode.post(pre) - target[p * ch + c];
                    sum += d * d;
                    let g = scale * d * mode.post_grad(pre);
                    if g != 0.0 {
                        for k in 0..4 {
                            grads[offs[k] + c] += g * ws[k];
                        }
                    }
                }
            }
            Ok(sum)
        })?;
        Ok(total / count as f64)
    }

    fn project(&self, grid: &mut FieldGrid) {
        // plain grids are kept in the image range by projection
        if self.mode == FetchMode::None {
            for c in 0..grid.channels() {
                grid.clamp_channel(c, 0.0, 1.0);
            }
        }
    }

    fn stage_finished(&mut self, grid: &FieldGrid, report: &StageReport) -> Result<()> {
        (self.on_stage)(report, grid)
    }
}

/// Fits `target` with the schedule and mode in `cfg`, supervising at pixel
/// centers. The grid may not be finer than the image along either axis.
pub fn fit_image(target: &RasterImage, cfg: &TrainConfig) -> Result<ImageFit> {
    fit_image_with(target, cfg, &mut |_, _| Ok(()))
}

/// [`fit_image`] with a callback after every stage.
pub fn fit_image_with(
    target: &RasterImage,
    cfg: &TrainConfig,
    on_stage: &mut dyn FnMut(&StageReport, &FieldGrid) -> Result<()>,
) -> Result<ImageFit> {
    let (w, h) = (target.width(), target.height());
    let dims = cfg.final_dims(2)?;
    if dims[0] > w || dims[1] > h {
        return Err(Error::invalid(format!(
            "grid {}x{} is larger than the {w}x{h} image",
            dims[0], dims[1]
        )));
    }
    let schedule = cfg.schedule(2)?;
    let mode = image_fetch_mode(cfg.mode);
    let init = GridInit {
        channels: target.channels(),
        aabb: image_aabb(w, h),
        range: cfg.init_range,
        seed: cfg.seed,
    };
    let mut task = ImageTask {
        target,
        mode,
        cache: PixelCache {
            dims: Vec::new(),
            corners: Vec::new(),
        },
        pixels: (0..(w * h) as u32).collect(),
        spares: Vec::new(),
        on_stage,
    };
    let outcome = run_progressive(&mut task, &schedule, &init, cfg.adam())?;
    let reconstruction = render_field_image(&outcome.grid, mode, w, h)?;
    let psnr_db = psnr(&reconstruction, target)?;
    Ok(ImageFit {
        grid: outcome.grid,
        mode,
        stages: outcome.stages,
        reconstruction,
        psnr_db,
    })
}
