//! Built-in numerical checks: analytic gradients against finite
//! differences, compositing identities, basis orthonormality and file
//! round trips.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::Result;
use crate::grid::{Aabb, FetchMode, FieldGrid, GradSink};
use crate::image_fit::psnr;
use crate::io::{load_grid, save_grid};
use crate::occupancy::{bce_loss, point_in_mesh, TriangleMesh};
use crate::optim::{AdamConfig, AdamState};
use crate::raster::RasterImage;
use crate::render::sh::SH_COEFFS;
use crate::render::{
    composite_ea, composite_weights, render_backward, render_image, sample_ray, CameraPose, Ray, RenderSettings,
    ShConstants, RADIANCE_CHANNELS,
};

pub const FETCH_GRADIENT_TOL: f64 = 1e-5;
pub const RENDER_GRADIENT_TOL: f64 = 1e-3;
pub const CONSERVATION_TOL: f64 = 1e-12;
pub const ORTHONORMALITY_TOL: f64 = 5e-3;

pub const FETCH_MODES: [FetchMode; 4] = [
    FetchMode::None,
    FetchMode::ReLU,
    FetchMode::ReLUClamp01,
    FetchMode::TanhThenReLU,
];

/// Worst relative error between [`FieldGrid::fetch_backward`] and central
/// differences over every grid value, for a random 2D or 3D grid, point and
/// upstream vector. `None` when the point sits within `1e-3` of a kink of
/// the activation, where differences are meaningless.
pub fn fetch_gradient_error(mode: FetchMode, seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ndim = if seed % 2 == 0 { 2 } else { 3 };
    let dims: Vec<usize> = (0..ndim).map(|_| rng.gen_range(2..5)).collect();
    let channels = rng.gen_range(1..4);
    let aabb = Aabb::cube(-1.0, 1.0, ndim).expect("unit box");
    let g = FieldGrid::init_uniform(&dims, channels, aabb, (-1.0, 1.0), seed).expect("valid grid");
    let x: Vec<f64> = dims.iter().map(|&d| rng.gen::<f64>() * (d - 1) as f64).collect();
    let up: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let corners = g.locate(&x);
    for ch in 0..channels {
        let y = g.pre_activation(&corners, ch, mode);
        if y.abs() <= 1e-3 || (mode == FetchMode::ReLUClamp01 && (y - 1.0).abs() <= 1e-3) {
            return None;
        }
    }
    let mut sink = GradSink::for_grid(&g);
    g.fetch_backward(mode, &x, &up, &mut sink).ok()?;
    let objective = |grid: &FieldGrid| -> f64 {
        let y = grid.fetch(mode, &x).expect("finite point");
        y.iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut probe = g.clone();
    for i in 0..g.values().len() {
        let v = g.values()[i];
        probe.values_mut()[i] = v + h;
        let plus = objective(&probe);
        probe.values_mut()[i] = v - h;
        let minus = objective(&probe);
        probe.values_mut()[i] = v;
        let fd = (plus - minus) / (2.0 * h);
        let an = sink.values()[i];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
    }
    Some(worst)
}

/// Worst relative error between [`render_backward`] and central differences
/// on a random 3x3x3 radiance grid seen by a random 4x4 camera.
pub fn render_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aabb = Aabb::cube(-1.0, 1.0, 3)?;
    let mut g = FieldGrid::zeros(&[3, 3, 3], RADIANCE_CHANNELS, aabb)?;
    for (i, v) in g.values_mut().iter_mut().enumerate() {
        *v = match i % RADIANCE_CHANNELS {
            0 => rng.gen_range(0.5..2.0),
            1 | 10 | 19 => rng.gen_range(1.2..2.2),
            _ => rng.gen_range(-0.1..0.1),
        };
    }
    let z: f64 = rng.gen_range(-0.8..0.8);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    let eye = [3.0 * r * phi.cos(), 3.0 * z, 3.0 * r * phi.sin()];
    let pose = CameraPose::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], 4, 4, 4.5)?;
    let settings = RenderSettings {
        samples_per_ray: 8,
        background: [rng.gen(), rng.gen(), rng.gen()],
        stratified_jitter: true,
        seed,
    };
    let upstream: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objective = |grid: &FieldGrid| -> Result<f64> {
        let view = render_image(grid, FetchMode::ReLU, &pose, &settings)?;
        Ok(view.rgb.values().iter().zip(&upstream).map(|(a, b)| a * b).sum())
    };
    let mut sink = GradSink::for_grid(&g);
    render_backward(&g, FetchMode::ReLU, &pose, &settings, &upstream, &mut sink)?;
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut probe = g.clone();
    for i in 0..g.values().len() {
        let v = g.values()[i];
        probe.values_mut()[i] = v + h;
        let plus = objective(&probe)?;
        probe.values_mut()[i] = v - h;
        let minus = objective(&probe)?;
        probe.values_mut()[i] = v;
        let fd = (plus - minus) / (2.0 * h);
        let an = sink.values()[i];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    Ok(worst)
}

/// Largest `|sum_i T_i alpha_i + T_final - 1|` over `rays` random rays with
/// 1 to 64 samples, densities up to 50 and steps up to 0.1.
pub fn composite_conservation_error(rays: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let (mut sigmas, mut deltas) = (Vec::new(), Vec::new());
    for _ in 0..rays {
        let n = rng.gen_range(1..=64);
        sigmas.clear();
        deltas.clear();
        for _ in 0..n {
            sigmas.push(if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..50.0) });
            deltas.push(rng.gen_range(1e-4..0.1));
        }
        let (w, t_final) = composite_weights(&sigmas, &deltas)?;
        worst = worst.max((w.iter().sum::<f64>() + t_final - 1.0).abs());
    }
    Ok(worst)
}

/// Largest deviation of the Gram matrix `4 pi E[Y_i Y_j]` from the
/// identity, estimated with `samples` directions stratified in
/// `(z, azimuth)` and jittered within each cell.
pub fn sh_orthonormality_error(constants: &ShConstants, samples: usize, seed: u64) -> f64 {
    let side = (samples as f64).sqrt().ceil().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gram = [[0.0; SH_COEFFS]; SH_COEFFS];
    for i in 0..side {
        for j in 0..side {
            let z = -1.0 + 2.0 * (i as f64 + rng.gen::<f64>()) / side as f64;
            let phi = std::f64::consts::TAU * (j as f64 + rng.gen::<f64>()) / side as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let y = constants.basis([r * phi.cos(), r * phi.sin(), z]);
            for a in 0..SH_COEFFS {
                for b in a..SH_COEFFS {
                    gram[a][b] += y[a] * y[b];
                }
            }
        }
    }
    let scale = 4.0 * std::f64::consts::PI / (side * side) as f64;
    let mut worst: f64 = 0.0;
    for (a, row) in gram.iter().enumerate() {
        for (b, v) in row.iter().enumerate().skip(a) {
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((v * scale - target).abs());
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Knobs for exercising the suite itself.
#[derive(Clone, Debug, Default)]
pub struct SelfcheckOptions {
    /// Basis constants fed to the orthonormality check.
    pub sh_constants: ShConstants,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn fetch_gradients() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for mode in FETCH_MODES {
        for seed in 0..100 {
            if let Some(e) = fetch_gradient_error(mode, seed) {
                worst = worst.max(e);
                count += 1;
            }
        }
    }
    Ok((worst <= FETCH_GRADIENT_TOL && count >= 100, format!("{count} instances, max rel err {worst:.2e}")))
}

fn render_gradients() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        worst = worst.max(render_gradient_error(seed)?);
    }
    Ok((worst <= RENDER_GRADIENT_TOL, format!("3 scenes, max rel err {worst:.2e}")))
}

fn conservation() -> Result<(bool, String)> {
    let e = composite_conservation_error(10_000, 1)?;
    Ok((e <= CONSERVATION_TOL, format!("10000 rays, max err {e:.2e}")))
}

fn single_sample_composite() -> Result<(bool, String)> {
    let (sigma, delta, c, bg) = (2.0f64, 0.3, [0.9, 0.1, 0.4], [0.2, 0.5, 1.0]);
    let out = composite_ea(&[sigma], &[c], &[delta], &[1.0], 2.0, bg)?;
    let a = 1.0 - (-sigma * delta).exp();
    let worst = (0..3)
        .map(|k| (out.rgb[k] - (a * c[k] + (1.0 - a) * bg[k])).abs())
        .fold((out.opacity - a).abs(), f64::max);
    Ok((worst < 1e-14, format!("max err {worst:.1e}")))
}

fn orthonormality(constants: &ShConstants) -> Result<(bool, String)> {
    let e = sh_orthonormality_error(constants, 1_000_000, 2);
    Ok((e <= ORTHONORMALITY_TOL, format!("1e6 directions, max |G - I| {e:.2e}")))
}

fn interpolation_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let g = FieldGrid::init_uniform(&[4, 5, 3], 2, Aabb::cube(0.0, 1.0, 3)?, (-1.0, 1.0), rng.gen())?;
        let x = [rng.gen_range(0.0..3.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..2.0)];
        let got = g.fetch(FetchMode::None, &x)?;
        let i0 = x.map(|v| v.floor() as usize);
        let f = [0, 1, 2].map(|a| x[a] - i0[a] as f64);
        for (ch, value) in got.iter().enumerate() {
            let mut expect = 0.0;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut idx = [0; 3];
                for a in 0..3 {
                    let bit = (corner >> a) & 1;
                    idx[a] = i0[a] + bit;
                    w *= if bit == 1 { f[a] } else { 1.0 - f[a] };
                }
                if w != 0.0 {
                    expect += w * g.values()[g.vertex_offset(&idx) + ch];
                }
            }
            worst = worst.max((value - expect).abs());
        }
    }
    Ok((worst < 1e-12, format!("200 points, max err {worst:.1e}")))
}

fn upsample_linear() -> Result<(bool, String)> {
    let aabb = Aabb::cube(-1.0, 1.0, 3)?;
    let mut g = FieldGrid::zeros(&[5, 5, 5], 1, aabb)?;
    for v in 0..g.vertex_count() {
        let i = g.vertex_index(v);
        g.values_mut()[v] = 0.3 * i[0] as f64 - 0.7 * i[1] as f64 + 0.2 * i[2] as f64 + 1.0;
    }
    let up = g.upsample_trilinear(2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = g.fetch(FetchMode::None, &g.world_to_grid(&x))?[0];
        let b = up.fetch(FetchMode::None, &up.world_to_grid(&x))?[0];
        worst = worst.max((a - b).abs());
    }
    Ok((worst < 1e-9, format!("500 points, max err {worst:.1e}")))
}

fn adam_first_step() -> Result<(bool, String)> {
    let cfg = AdamConfig::default();
    let mut state = AdamState::with_len(4, cfg)?;
    let mut params = vec![0.0; 4];
    state.update(&mut params, &[3.0, -0.01, 0.0, 250.0])?;
    let expect = [-cfg.lr, cfg.lr, 0.0, -cfg.lr];
    let worst = params
        .iter()
        .zip(expect)
        .map(|(p, e)| (p - e).abs())
        .fold(0.0, f64::max);
    Ok((worst < 1e-6 * cfg.lr, format!("max deviation from lr-sized step {worst:.1e}")))
}

fn grid_file_round_trip() -> Result<(bool, String)> {
    let g = FieldGrid::init_uniform(&[3, 4, 5], 7, Aabb::cube(-2.0, 3.0, 3)?, (-1.0, 1.0), 8)?;
    let narrowed: Vec<f64> = g.values().iter().map(|&v| v as f32 as f64).collect();
    let g = FieldGrid::from_values(g.dims(), g.channels(), g.aabb().clone(), narrowed)?;
    let nonce = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let path = std::env::temp_dir().join(format!("relufield-check-{}-{nonce}.rluf", std::process::id()));
    let result = save_grid(&g, &path).and_then(|_| load_grid(&path));
    let _ = std::fs::remove_file(&path);
    let back = result?;
    let same = back.dims() == g.dims()
        && back.aabb() == g.aabb()
        && back.values().iter().zip(g.values()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((same, format!("{} values", g.values().len())))
}

fn config_round_trip() -> Result<(bool, String)> {
    let cfg = TrainConfig {
        dims: vec![32, 16, 8],
        progressive: false,
        lr: 0.0125,
        seed: 99,
        background: [0.25, 0.5, 1.0],
        sh_degree: 1,
        ..TrainConfig::default()
    };
    let back = TrainConfig::from_kv_str(&cfg.to_kv_string())?;
    Ok((back == cfg, "all fields".into()))
}

fn bce_gradient() -> Result<(bool, String)> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 1..10 {
        let p = i as f64 / 10.0;
        for y in [false, true] {
            let fd = (bce_loss(p + h, y).0 - bce_loss(p - h, y).0) / (2.0 * h);
            worst = worst.max((fd - bce_loss(p, y).1).abs());
        }
    }
    let ln2 = (bce_loss(0.5, true).0 - std::f64::consts::LN_2).abs();
    Ok((worst < 1e-6 && ln2 < 1e-12, format!("max abs err {worst:.1e}")))
}

fn parity_vs_sphere() -> Result<(bool, String)> {
    let mesh = TriangleMesh::icosphere([0.0; 3], 1.0, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 4000;
    let mut agree = 0;
    for _ in 0..n {
        let x = [0, 1, 2].map(|_| rng.gen_range(-1.2..1.2));
        let inside = x.iter().map(|v| v * v).sum::<f64>() < 1.0;
        agree += (point_in_mesh(&mesh, x)? == inside) as usize;
    }
    Ok((agree as f64 >= 0.999 * n as f64, format!("{agree}/{n} agree")))
}

fn psnr_reference() -> Result<(bool, String)> {
    let a = RasterImage::filled(8, 8, 3, 0.5)?;
    let b = RasterImage::filled(8, 8, 3, 0.6)?;
    let v = psnr(&a, &b)?;
    Ok(((v - 20.0).abs() < 1e-9 && psnr(&a, &a)?.is_infinite(), format!("{v:.9} dB")))
}

fn stratified_bins() -> Result<(bool, String)> {
    let ray = Ray {
        origin: [0.0; 3],
        direction: [0.0, 0.0, -1.0],
        t_near: 1.0,
        t_far: 3.0,
        hit: true,
    };
    let settings = RenderSettings {
        samples_per_ray: 16,
        stratified_jitter: true,
        seed: 12,
        ..RenderSettings::default()
    };
    let s = sample_ray(&ray, &settings, 7)?;
    let in_bins = s
        .t
        .iter()
        .enumerate()
        .all(|(i, t)| (1.0 + i as f64 * 0.125..1.0 + (i + 1) as f64 * 0.125).contains(t));
    let again = sample_ray(&ray, &settings, 7)? == s;
    Ok((in_bins && again, "16 jittered samples".into()))
}

fn camera_center_ray() -> Result<(bool, String)> {
    let pose = CameraPose::look_at([1.0, 2.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 2, 2, 1.0)?;
    let d = pose.pixel_direction(0, 0);
    let n = (1.0f64 + 4.0 + 9.0).sqrt();
    let forward = [-1.0 / n, -2.0 / n, -3.0 / n];
    // pixel (0, 0) of a 2x2 image is up-left of center by half a pixel
    let center = {
        let r = pose.rotation();
        let c = [r[0][2], r[1][2], r[2][2]];
        [-c[0], -c[1], -c[2]]
    };
    let err = (0..3).map(|k| (center[k] - forward[k]).abs()).fold(0.0, f64::max);
    let dot: f64 = (0..3).map(|k| d[k] * forward[k]).sum();
    Ok((err < 1e-12 && dot > 0.0, format!("axis err {err:.1e}")))
}

/// Runs the whole suite. Each check is independent; a failure or error in
/// one does not stop the others.
pub fn run_selfcheck(options: &SelfcheckOptions) -> Vec<CheckResult> {
    vec![
        check("fetch gradient vs finite differences", fetch_gradients),
        check("render gradient vs finite differences", render_gradients),
        check("compositing weights sum to one", conservation),
        check("single-sample compositing", single_sample_composite),
        check("SH basis orthonormality", || orthonormality(&options.sh_constants)),
        check("multilinear interpolation oracle", interpolation_oracle),
        check("upsampling preserves linear fields", upsample_linear),
        check("Adam first step has size lr", adam_first_step),
        check("grid file round trip", grid_file_round_trip),
        check("config round trip", config_round_trip),
        check("BCE gradient", bce_gradient),
        check("mesh parity vs analytic sphere", parity_vs_sphere),
        check("PSNR reference values", psnr_reference),
        check("stratified samples stay in bins", stratified_bins),
        check("camera looks at its target", camera_center_ray),
    ]
}

/// Fixed-width report, one row per check.
pub fn format_report(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "{status}  {:<width$}  {}", r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let _ = writeln!(s, "{} checks, {failed} failed", results.len());
    s
}
