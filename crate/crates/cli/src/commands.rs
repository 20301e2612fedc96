use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use relu_fields::image_fit::{fit_image_with, image_fetch_mode, psnr, render_field_image};
use relu_fields::io::{
    self, format_dims, load_grid, load_nerf_dataset, load_obj, read_png_gray, read_png_rgb, save_grid, write_depth_png,
    write_nerf_dataset, write_obj, write_png, MetricsRow, MetricsWriter, Split,
};
use relu_fields::occupancy::{
    fit_occupancy_with, occupancy_fetch_mode, point_in_mesh, render_occupancy_depth, sampling_box, volumetric_iou,
    OccupancyField, TriangleMesh,
};
use relu_fields::radiance::{density_mode, evaluate_views, fit_radiance_with, PosedImage};
use relu_fields::render::{render_image, CameraPose, RenderSettings, ShConstants, RADIANCE_CHANNELS};
use relu_fields::scenes::{desk_scene, flat_shapes_image, DESK_SCALE};
use relu_fields::selfcheck::{format_report, run_selfcheck, SelfcheckOptions};
use relu_fields::{Aabb, FieldGrid, Mode, TrainConfig};

use crate::args::*;
use crate::run_dir::RunDir;
use crate::Usage;

const CONFIG_FILE: &str = "config.txt";
const GRID_FILE: &str = "grid.rluf";
const METRICS_FILE: &str = "metrics.csv";

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Usage(format!("{} does not exist", path.display())).into())
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}

fn default_run_id(kind: &str, scene: &str, cfg: &TrainConfig) -> String {
    let progressive = if cfg.progressive { "" } else { "-flat" };
    format!("{kind}-{scene}-{}-{}{progressive}-s{}", cfg.mode.as_str(), format_dims(&cfg.dims), cfg.seed)
}

struct Run {
    dir: RunDir,
    run_id: String,
    scene: String,
    metrics: MetricsWriter,
    started: Instant,
}

impl Run {
    fn start(output: &OutputArgs, kind: &str, scene: String, cfg: &TrainConfig) -> Result<Self> {
        let run_id = output
            .run_id
            .clone()
            .unwrap_or_else(|| default_run_id(kind, &scene, cfg));
        let dir = RunDir::create(&output.out, &run_id, output.force)?;
        cfg.save(&dir.file(CONFIG_FILE))?;
        let metrics = MetricsWriter::create(&dir.file(METRICS_FILE))?;
        Ok(Run {
            dir,
            run_id,
            scene,
            metrics,
            started: Instant::now(),
        })
    }

    fn log(&mut self, cfg: &TrainConfig, report: &relu_fields::optim::StageReport, iteration: usize, psnr_db: Option<f64>) -> Result<()> {
        self.metrics.append(&MetricsRow {
            run_id: self.run_id.clone(),
            scene: self.scene.clone(),
            mode: cfg.mode.as_str().into(),
            grid_dims: format_dims(&report.dims),
            stage: report.stage,
            iteration,
            loss: report.tail_loss,
            psnr_db,
            wall_seconds: report.wall_seconds,
        })?;
        Ok(())
    }
}

pub fn fit_image(args: &FitImageArgs, threads: Option<usize>) -> Result<()> {
    let cfg = args.train.resolve(threads)?;
    require_file(&args.image)?;
    let target = if args.gray {
        read_png_gray(&args.image)?
    } else {
        read_png_rgb(&args.image, cfg.background)?
    };
    let mut run = Run::start(&args.output, "image", stem(&args.image), &cfg)?;
    let mode = image_fetch_mode(cfg.mode);
    let mut iteration = 0;
    let fit = fit_image_with(&target, &cfg, &mut |report, grid| {
        iteration += report.iterations;
        let recon = render_field_image(grid, mode, target.width(), target.height())?;
        let p = psnr(&recon, &target)?;
        run.log(&cfg, report, iteration, Some(p)).map_err(into_core)
    })?;
    save_grid(&fit.grid, &run.dir.file(GRID_FILE))?;
    write_png(&fit.reconstruction, &run.dir.file("reconstruction.png"))?;
    let seconds = run.started.elapsed().as_secs_f64();
    run.dir.commit()?;
    println!("grid_dims,mode,psnr_db,seconds");
    println!("{},{},{:.4},{seconds:.2}", format_dims(fit.grid.dims()), cfg.mode.as_str(), fit.psnr_db);
    Ok(())
}

/// Library callbacks return the library error type; anything else is
/// carried as an I/O error so it still reports as a runtime failure.
fn into_core(e: anyhow::Error) -> relu_fields::Error {
    match e.downcast::<relu_fields::Error>() {
        Ok(core) => core,
        Err(other) => relu_fields::Error::Io(std::io::Error::other(other.to_string())),
    }
}

/// Camera on a ring around `aabb`, looking at its center.
fn orbit_cameras(aabb: &Aabb, count: usize, size: usize) -> Result<Vec<CameraPose>> {
    let center: Vec<f64> = (0..3).map(|a| 0.5 * (aabb.min()[a] + aabb.max()[a])).collect();
    let half_diag = (0..3).map(|a| (0.5 * aabb.extent(a)).powi(2)).sum::<f64>().sqrt();
    let radius = 2.5 * half_diag;
    let angle: f64 = 0.9;
    let focal = 0.5 * size as f64 / (0.5 * angle).tan();
    let elevation: f64 = 0.4;
    (0..count.max(1))
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / count.max(1) as f64;
            let eye = [
                center[0] + radius * elevation.cos() * az.cos(),
                center[1] + radius * elevation.sin(),
                center[2] + radius * elevation.cos() * az.sin(),
            ];
            Ok(CameraPose::look_at(eye, [center[0], center[1], center[2]], [0.0, 1.0, 0.0], size, size, focal)?)
        })
        .collect()
}

pub fn fit_occupancy(args: &FitOccupancyArgs, threads: Option<usize>) -> Result<()> {
    let cfg = args.train.resolve(threads)?;
    require_file(&args.mesh)?;
    let mesh = load_obj(&args.mesh).with_context(|| format!("loading {}", args.mesh.display()))?;
    let mut run = Run::start(&args.output, "occupancy", stem(&args.mesh), &cfg)?;
    let mut iteration = 0;
    let fit = fit_occupancy_with(&mesh, &cfg, &mut |report, _| {
        iteration += report.iterations;
        run.log(&cfg, report, iteration, None).map_err(into_core)
    })?;
    save_grid(&fit.grid, &run.dir.file(GRID_FILE))?;
    let field = OccupancyField::new(&fit.grid, fit.mode)?;
    let iou = mesh_iou(&field, &mesh, args.iou_samples, cfg.seed)?;
    std::fs::write(run.dir.file("iou.txt"), format!("{iou}\n"))?;
    let settings = RenderSettings {
        samples_per_ray: cfg.samples_per_ray,
        ..RenderSettings::default()
    };
    let pose = &orbit_cameras(fit.grid.aabb(), 8, 256)?[1];
    write_depth_png(&render_occupancy_depth(&field, pose, &settings)?, &run.dir.file("depth.png"))?;
    let seconds = run.started.elapsed().as_secs_f64();
    run.dir.commit()?;
    println!("grid_dims,mode,iou,seconds");
    println!("{},{},{iou:.5},{seconds:.2}", format_dims(fit.grid.dims()), cfg.mode.as_str());
    Ok(())
}

fn mesh_iou(field: &OccupancyField, mesh: &TriangleMesh, samples: usize, seed: u64) -> Result<f64> {
    let region = sampling_box(mesh);
    // a degenerate parity cast counts as outside here; training never does this
    let inside = |x: [f64; 3]| point_in_mesh(mesh, x).unwrap_or(false);
    Ok(volumetric_iou(|x| field.occupied(x), inside, &region, samples, seed)?)
}

fn load_split(root: &Path, split: Split, cfg: &TrainConfig) -> Result<Option<Vec<PosedImage>>> {
    if !io::nerf::transforms_path(root, split).is_file() {
        return Ok(None);
    }
    let aabb = match &cfg.aabb {
        Some((lo, hi)) => Some(Aabb::new(lo.clone(), hi.clone())?),
        None => None,
    };
    let manifest = load_nerf_dataset(root, split, aabb)?;
    Ok(Some(manifest.load_images(cfg.background)?))
}

pub fn fit_radiance(args: &FitRadianceArgs, threads: Option<usize>) -> Result<()> {
    let cfg = args.train.resolve(threads)?;
    let train_json = io::nerf::transforms_path(&args.data, Split::Train);
    require_file(&train_json)?;
    let aabb = load_nerf_dataset(
        &args.data,
        Split::Train,
        cfg.aabb.as_ref().map(|(lo, hi)| Aabb::new(lo.clone(), hi.clone())).transpose()?,
    )?
    .aabb;
    let train = load_split(&args.data, Split::Train, &cfg)?.unwrap_or_default();
    let mut val = load_split(&args.data, Split::Val, &cfg)?.unwrap_or_default();
    val.truncate(cfg.val_views);
    let test = load_split(&args.data, Split::Test, &cfg)?;
    let mut run = Run::start(&args.output, "radiance", stem(&args.data), &cfg)?;
    let mut iteration = 0;
    let checkpoint = run.dir.file("checkpoint.rluf");
    let fit = fit_radiance_with(&train, &val, aabb, &cfg, &mut |stage, grid| {
        iteration += stage.report.iterations;
        save_grid(grid, &checkpoint)?;
        run.log(&cfg, &stage.report, iteration, stage.val_psnr).map_err(into_core)
    })?;
    save_grid(&fit.grid, &run.dir.file(GRID_FILE))?;
    let _ = std::fs::remove_file(&checkpoint);
    let settings = RenderSettings {
        samples_per_ray: cfg.samples_per_ray,
        background: cfg.background,
        stratified_jitter: false,
        seed: cfg.seed,
    };
    let mut test_psnr = None;
    if let Some(test) = &test {
        let renders = run.dir.path().join("renders");
        std::fs::create_dir_all(&renders)?;
        let mut total = 0.0;
        for (i, view) in test.iter().enumerate() {
            let out = render_image(&fit.grid, fit.density, &view.pose, &settings)?;
            total += psnr(&out.rgb, &view.image)?;
            write_png(&out.rgb, &renders.join(format!("test_{i:03}.png")))?;
        }
        test_psnr = Some(total / test.len() as f64);
    }
    let val_psnr = fit.stages.last().and_then(|s| s.val_psnr);
    let seconds = run.started.elapsed().as_secs_f64();
    run.dir.commit()?;
    let fmt = |v: Option<f64>| v.map(|p| format!("{p:.4}")).unwrap_or_default();
    println!("grid_dims,mode,val_psnr_db,test_psnr_db,seconds");
    println!(
        "{},{},{},{},{seconds:.2}",
        format_dims(fit.grid.dims()),
        cfg.mode.as_str(),
        fmt(val_psnr),
        fmt(test_psnr)
    );
    Ok(())
}

/// Mode from the flag, else from the run config beside the grid.
fn grid_mode(view: &ViewArgs) -> Result<Mode> {
    if let Some(m) = view.mode {
        return Ok(m.into());
    }
    let cfg_path = view.grid.parent().map(|p| p.join(CONFIG_FILE));
    match cfg_path.filter(|p| p.is_file()) {
        Some(p) => Ok(TrainConfig::load(&p)?.mode),
        None => Ok(Mode::Relu),
    }
}

fn parse_background(text: &str) -> Result<[f64; 3]> {
    let mut cfg = TrainConfig::default();
    cfg.set("background", text)?;
    Ok(cfg.background)
}

struct Views {
    grid: FieldGrid,
    mode: Mode,
    settings: RenderSettings,
    cameras: Vec<CameraPose>,
    targets: Option<Vec<PosedImage>>,
}

fn prepare_views(view: &ViewArgs) -> Result<Views> {
    require_file(&view.grid)?;
    let grid = load_grid(&view.grid)?;
    let mode = grid_mode(view)?;
    let background = parse_background(&view.background)?;
    let settings = RenderSettings {
        samples_per_ray: view.samples_per_ray,
        background,
        stratified_jitter: false,
        seed: 0,
    };
    let (cameras, targets) = match &view.data {
        Some(root) => {
            let split: Split = view.split.parse()?;
            let manifest = load_nerf_dataset(root, split, Some(grid.aabb().clone()))?;
            let images = manifest.load_images(background)?;
            (images.iter().map(|v| v.pose.clone()).collect(), Some(images))
        }
        None => (orbit_cameras(grid.aabb(), view.views, view.size)?, None),
    };
    Ok(Views {
        grid,
        mode,
        settings,
        cameras,
        targets,
    })
}

pub fn render(args: &RenderArgs) -> Result<()> {
    let v = prepare_views(&args.view)?;
    let run_id = args.output.run_id.clone().unwrap_or_else(|| format!("render-{}", stem(&args.view.grid)));
    let dir = RunDir::create(&args.output.out, &run_id, args.output.force)?;
    match v.grid.channels() {
        RADIANCE_CHANNELS => {
            let density = density_mode(v.mode);
            for (i, pose) in v.cameras.iter().enumerate() {
                let out = render_image(&v.grid, density, pose, &v.settings)?;
                write_png(&out.rgb, &dir.file(&format!("view_{i:03}.png")))?;
            }
        }
        1 => {
            let field = OccupancyField::new(&v.grid, occupancy_fetch_mode(v.mode))?;
            for (i, pose) in v.cameras.iter().enumerate() {
                let depth = render_occupancy_depth(&field, pose, &v.settings)?;
                write_depth_png(&depth, &dir.file(&format!("depth_{i:03}.png")))?;
            }
        }
        c => return Err(Usage(format!("cannot render a {c}-channel grid; expected 1 or {RADIANCE_CHANNELS}")).into()),
    }
    let out = dir.commit()?;
    println!("{} views written to {}", v.cameras.len(), out.display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    if let Some(mesh_path) = &args.mesh {
        require_file(mesh_path)?;
        require_file(&args.view.grid)?;
        let grid = load_grid(&args.view.grid)?;
        let mesh = load_obj(mesh_path)?;
        let field = OccupancyField::new(&grid, occupancy_fetch_mode(grid_mode(&args.view)?))?;
        let iou = mesh_iou(&field, &mesh, args.iou_samples, args.seed)?;
        println!("iou");
        println!("{iou:.5}");
        return Ok(());
    }
    let v = prepare_views(&args.view)?;
    let targets = v
        .targets
        .ok_or_else(|| Usage("eval needs --data (images) or --mesh (occupancy)".into()))?;
    let value = evaluate_views(&v.grid, density_mode(v.mode), &targets, &v.settings)?;
    println!("views,psnr_db");
    println!("{},{value:.4}", targets.len());
    Ok(())
}

/// Returns whether every check passed.
pub fn selfcheck(args: &SelfcheckArgs) -> bool {
    let mut options = SelfcheckOptions::default();
    if args.perturb_sh {
        let mut k = ShConstants::default();
        k.0[6] *= 1.01;
        options.sh_constants = k;
    }
    let results = run_selfcheck(&options);
    print!("{}", format_report(&results));
    results.iter().all(|r| r.passed)
}

pub fn make_scene(args: &MakeSceneArgs) -> Result<()> {
    match &args.scene {
        SceneKind::Desk {
            out,
            size,
            train,
            held_out,
            gt_dims,
            samples_per_ray,
        } => {
            if *held_out == 0 {
                return Err(Usage("the desk scene needs at least one held-out view".into()).into());
            }
            let scene = desk_scene(*gt_dims, *train, *held_out, *size, *samples_per_ray)?;
            std::fs::create_dir_all(out)?;
            write_nerf_dataset(out, Split::Train, &scene.train)?;
            write_nerf_dataset(out, Split::Val, &scene.held_out)?;
            write_nerf_dataset(out, Split::Test, &scene.held_out)?;
            save_grid(&scene.ground_truth, &out.join("ground_truth.rluf"))?;
            println!(
                "desk dataset: {} train, {} held-out views at {size}x{size}; use --aabb {},{}",
                scene.train.len(),
                scene.held_out.len(),
                -DESK_SCALE,
                DESK_SCALE
            );
        }
        SceneKind::Sphere {
            out,
            radius,
            subdivisions,
        } => {
            let mesh = TriangleMesh::icosphere([0.0; 3], *radius, *subdivisions)?;
            write_obj(&mesh, out)?;
            println!("sphere mesh: {} triangles", mesh.triangles().len());
        }
        SceneKind::Shapes { out, size } => {
            write_png(&flat_shapes_image(*size)?, out)?;
            println!("shapes image: {size}x{size}");
        }
    }
    Ok(())
}
