//! Occupancy fields: fitting a grid to the inside of a closed mesh.

mod mesh;

pub use mesh::{parity_directions, point_in_mesh, Parity, TriangleMesh};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::grid::{Aabb, FetchMode, FieldGrid, GradSink};
use crate::optim::{run_progressive, GridInit, ProgressiveTask, StageContext, StageReport};
use crate::parallel;
use crate::render::{generate_ray, mix_seed, CameraPose, RenderSettings};

/// Clamp applied to predictions before taking logs.
pub const BCE_EPS: f64 = 1e-7;
/// Probability at which a point counts as occupied.
pub const OCCUPANCY_THRESHOLD: f64 = 0.5;
/// Fraction of the mesh box extent added on every side for sampling.
pub const SAMPLE_PADDING: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OccupancySample {
    pub position: [f64; 3],
    pub inside: bool,
}

/// Box that training points are drawn from and that the grid covers.
pub fn sampling_box(mesh: &TriangleMesh) -> Aabb {
    mesh.aabb().dilated(SAMPLE_PADDING)
}

/// `count` uniform points over [`sampling_box`], labeled by the parity test.
pub fn sample_training_points(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<Vec<OccupancySample>> {
    let mut out = Vec::new();
    sample_into(mesh, &sampling_box(mesh), count, seed, &mut out)?;
    Ok(out)
}

fn sample_into(mesh: &TriangleMesh, region: &Aabb, count: usize, seed: u64, out: &mut Vec<OccupancySample>) -> Result<()> {
    if count == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (region.min(), region.max());
    out.clear();
    out.extend((0..count).map(|_| OccupancySample {
        position: [0, 1, 2].map(|a| rng.gen_range(lo[a]..=hi[a])),
        inside: false,
    }));
    out.par_iter_mut().try_for_each(|s| {
        s.inside = point_in_mesh(mesh, s.position)?;
        Ok(())
    })
}

/// Binary cross-entropy and its derivative with respect to `p`, both taken
/// at `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
#[inline]
pub fn bce_loss(p: f64, inside: bool) -> (f64, f64) {
    let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if inside {
        (-q.ln(), -1.0 / q)
    } else {
        (-(1.0 - q).ln(), 1.0 / (1.0 - q))
    }
}

pub fn occupancy_fetch_mode(mode: Mode) -> FetchMode {
    match mode {
        Mode::Relu => FetchMode::TanhThenReLU,
        Mode::None => FetchMode::None,
    }
}

/// A one-channel grid read as an occupancy probability.
#[derive(Clone, Copy, Debug)]
pub struct OccupancyField<'a> {
    pub grid: &'a FieldGrid,
    pub mode: FetchMode,
}

impl<'a> OccupancyField<'a> {
    pub fn new(grid: &'a FieldGrid, mode: FetchMode) -> Result<Self> {
        if grid.ndim() != 3 || grid.channels() != 1 {
            return Err(Error::invalid("occupancy fields are 3D with one channel"));
        }
        Ok(OccupancyField { grid, mode })
    }

    /// Occupancy probability in `[0, 1]`; zero outside the grid box.
    pub fn probability(&self, x: [f64; 3]) -> f64 {
        if !self.grid.aabb().contains(&x) {
            return 0.0;
        }
        let g = self.grid.world_to_grid(&x);
        let (offs, ws) = self.grid.locate3([g[0], g[1], g[2]]);
        let values = self.grid.values();
        let pre: f64 = (0..8).map(|k| ws[k] * self.mode.vertex(values[offs[k]])).sum();
        self.mode.post(pre).clamp(0.0, 1.0)
    }

    pub fn occupied(&self, x: [f64; 3]) -> bool {
        self.probability(x) >= OCCUPANCY_THRESHOLD
    }
}

const IOU_BLOCK: usize = 4096;

/// Monte-Carlo intersection over union of two indicator functions over
/// `region`. Points are drawn in fixed blocks, so the estimate does not
/// depend on the thread count.
pub fn volumetric_iou<A, B>(a: A, b: B, region: &Aabb, samples: usize, seed: u64) -> Result<f64>
where
    A: Fn([f64; 3]) -> bool + Sync,
    B: Fn([f64; 3]) -> bool + Sync,
{
    if region.ndim() != 3 {
        return Err(Error::invalid("volumetric IoU needs a 3D region"));
    }
    if samples == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let (lo, hi) = (region.min(), region.max());
    let blocks = samples.div_ceil(IOU_BLOCK);
    let (inter, union) = (0..blocks)
        .into_par_iter()
        .map(|block| {
            let n = IOU_BLOCK.min(samples - block * IOU_BLOCK);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, block as u64));
            let (mut i, mut u) = (0u64, 0u64);
            for _ in 0..n {
                let x = [0, 1, 2].map(|k| rng.gen_range(lo[k]..=hi[k]));
                let (in_a, in_b) = (a(x), b(x));
                i += (in_a && in_b) as u64;
                u += (in_a || in_b) as u64;
            }
            (i, u)
        })
        .reduce(|| (0, 0), |x, y| (x.0 + y.0, x.1 + y.1));
    if union == 0 {
        return Err(Error::UndefinedMetric("both occupancy sets are empty".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// Per-pixel depth of the first occupied sample; `f64::INFINITY` on a miss.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    /// Smallest entry and largest exit distance over all rays that hit the
    /// grid box, used to normalize the image for display.
    pub near: f64,
    pub far: f64,
}

/// Marches every pixel ray through the grid box and records the depth of
/// the first sample whose occupancy reaches [`OCCUPANCY_THRESHOLD`].
pub fn render_occupancy_depth(field: &OccupancyField, pose: &CameraPose, settings: &RenderSettings) -> Result<DepthImage> {
    settings.validate()?;
    let (w, h) = (pose.width(), pose.height());
    let aabb = field.grid.aabb();
    let n = settings.samples_per_ray;
    let rows: Vec<(Vec<f64>, f64, f64)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![f64::INFINITY; w];
            let (mut near, mut far) = (f64::INFINITY, f64::NEG_INFINITY);
            for (x, out) in row.iter_mut().enumerate() {
                let ray = generate_ray(pose, (x, y), aabb);
                if !ray.hit {
                    continue;
                }
                near = near.min(ray.t_near);
                far = far.max(ray.t_far);
                let step = (ray.t_far - ray.t_near) / n as f64;
                for i in 0..n {
                    let t = if settings.stratified_jitter {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(settings.seed, (y * w + x) as u64));
                        ray.t_near + (i as f64 + rng.gen::<f64>()) * step
                    } else {
                        ray.t_near + (i as f64 + 0.5) * step
                    };
                    if field.occupied(ray.at(t)) {
                        *out = t;
                        break;
                    }
                }
            }
            (row, near, far)
        })
        .collect();
    let mut depth = Vec::with_capacity(w * h);
    let (mut near, mut far) = (f64::INFINITY, f64::NEG_INFINITY);
    for (row, n0, f0) in rows {
        depth.extend(row);
        near = near.min(n0);
        far = far.max(f0);
    }
    if near > far {
        (near, far) = (0.0, 0.0);
    }
    Ok(DepthImage {
        width: w,
        height: h,
        depth,
        near,
        far,
    })
}

#[derive(Clone, Debug)]
pub struct OccupancyFit {
    pub grid: FieldGrid,
    pub mode: FetchMode,
    pub stages: Vec<StageReport>,
}

struct OccupancyTask<'a> {
    mesh: &'a TriangleMesh,
    region: Aabb,
    cfg: &'a TrainConfig,
    mode: FetchMode,
    batch: Vec<OccupancySample>,
    spares: Vec<GradSink>,
    on_stage: &'a mut dyn FnMut(&StageReport, &FieldGrid) -> Result<()>,
}

impl ProgressiveTask for OccupancyTask<'_> {
    fn step(&mut self, grid: &FieldGrid, sink: &mut GradSink, ctx: &StageContext) -> Result<f64> {
        let seed = mix_seed(self.cfg.seed, ctx.global_iteration as u64);
        sample_into(self.mesh, &self.region, self.cfg.batch_points, seed, &mut self.batch)?;
        let (scale, offset) = grid.world_to_grid_affine();
        let (values, mode) = (grid.values(), self.mode);
        let norm = 1.0 / self.batch.len() as f64;
        let sum = parallel::accumulate(&self.batch, sink, &mut self.spares, |chunk, grads| {
            let mut sum = 0.0;
            for s in chunk {
                let g = [0, 1, 2].map(|a| scale[a] * s.position[a] + offset[a]);
                let (offs, ws) = grid.locate3(g);
                let mut pre = 0.0;
                for k in 0..8 {
                    pre += ws[k] * mode.vertex(values[offs[k]]);
                }
                let p = mode.post(pre);
                let (loss, dp) = bce_loss(p.min(1.0), s.inside);
                sum += loss;
                if p >= 1.0 {
                    continue;
                }
                let d = norm * dp * mode.post_grad(pre);
                if d != 0.0 {
                    for k in 0..8 {
                        grads[offs[k]] += d * ws[k] * mode.vertex_grad(values[offs[k]]);
                    }
                }
            }
            Ok(sum)
        })?;
        Ok(sum * norm)
    }

    fn project(&self, grid: &mut FieldGrid) {
        if self.mode == FetchMode::None {
            grid.clamp_channel(0, 0.0, 1.0);
        }
    }

    fn stage_finished(&mut self, grid: &FieldGrid, report: &StageReport) -> Result<()> {
        (self.on_stage)(report, grid)
    }
}

/// Fits a one-channel occupancy grid over [`sampling_box`] of `mesh`.
pub fn fit_occupancy(mesh: &TriangleMesh, cfg: &TrainConfig) -> Result<OccupancyFit> {
    fit_occupancy_with(mesh, cfg, &mut |_, _| Ok(()))
}

pub fn fit_occupancy_with(
    mesh: &TriangleMesh,
    cfg: &TrainConfig,
    on_stage: &mut dyn FnMut(&StageReport, &FieldGrid) -> Result<()>,
) -> Result<OccupancyFit> {
    if cfg.batch_points == 0 {
        return Err(Error::invalid("batch_points must be positive"));
    }
    let schedule = cfg.schedule(3)?;
    let mode = occupancy_fetch_mode(cfg.mode);
    let region = sampling_box(mesh);
    let init = GridInit {
        channels: 1,
        aabb: region.clone(),
        range: cfg.init_range,
        seed: cfg.seed,
    };
    let mut task = OccupancyTask {
        mesh,
        region,
        cfg,
        mode,
        batch: Vec::with_capacity(cfg.batch_points),
        spares: Vec::new(),
        on_stage,
    };
    let outcome = run_progressive(&mut task, &schedule, &init, cfg.adam())?;
    Ok(OccupancyFit {
        grid: outcome.grid,
        mode,
        stages: outcome.stages,
    })
}
