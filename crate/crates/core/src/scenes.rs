//! Procedural test scenes: a three-box "desk" radiance grid with orbiting
//! cameras, and a flat-shaded image with sharp edges.

use crate::error::Result;
use crate::grid::{Aabb, FetchMode, FieldGrid};
use crate::radiance::PosedImage;
use crate::raster::RasterImage;
use crate::render::{render_image, CameraPose, RenderSettings, RADIANCE_CHANNELS};

/// Horizontal field of view of the desk cameras, in radians.
pub const DESK_CAMERA_ANGLE_X: f64 = 0.9;
/// Half-width of the scene box in world units.
pub const DESK_SCALE: f64 = 3.0;
pub const DESK_CAMERA_RADIUS: f64 = 4.0 * DESK_SCALE;
/// Density magnitude inside (positive) and outside (negative) the boxes.
pub const DESK_DENSITY: f64 = 40.0;

const DC: f64 = 0.282_094_791_773_878_14;

/// `(min, max, rgb)` of each box in unit coordinates; world positions are
/// these times [`DESK_SCALE`].
pub const DESK_BOXES: [([f64; 3], [f64; 3], [f64; 3]); 3] = [
    ([-0.75, -0.7, -0.55], [-0.1, 0.15, 0.35], [0.9, 0.2, 0.2]),
    ([0.1, -0.7, -0.65], [0.75, -0.15, 0.05], [0.2, 0.8, 0.3]),
    ([-0.3, 0.25, 0.1], [0.45, 0.7, 0.7], [0.25, 0.35, 0.9]),
];

fn box_distance(p: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> f64 {
    (0..3)
        .map(|a| (lo[a] - p[a]).max(p[a] - hi[a]).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Ground-truth radiance grid over the scene box with `dims^3` vertices.
/// Colors are view-independent; vertices outside every box carry the color
/// of the nearest box so that edges do not blend towards black.
pub fn desk_ground_truth(dims: usize) -> Result<FieldGrid> {
    let aabb = Aabb::cube(-DESK_SCALE, DESK_SCALE, 3)?;
    let mut grid = FieldGrid::zeros(&[dims; 3], RADIANCE_CHANNELS, aabb)?;
    let step = 2.0 / (dims - 1) as f64;
    for v in 0..grid.vertex_count() {
        let idx = grid.vertex_index(v);
        let p = [0, 1, 2].map(|a| -1.0 + idx[a] as f64 * step);
        let (dist, rgb) = DESK_BOXES
            .iter()
            .map(|(lo, hi, rgb)| (box_distance(p, *lo, *hi), rgb))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("three boxes");
        let off = grid.vertex_offset(&idx[..3]);
        let values = grid.values_mut();
        values[off] = if dist == 0.0 { DESK_DENSITY } else { -DESK_DENSITY };
        for ch in 0..3 {
            values[off + 1 + ch * 9] = rgb[ch] / DC;
        }
    }
    Ok(grid)
}

/// Lowest and highest camera elevation above the desk plane, in radians.
pub const DESK_ELEVATION: (f64, f64) = (0.25, 1.1);

/// `count` cameras on a spiral over the upper hemisphere of radius
/// [`DESK_CAMERA_RADIUS`], all looking at the origin.
pub fn desk_cameras(count: usize, size: usize) -> Result<Vec<CameraPose>> {
    let focal = 0.5 * size as f64 / (0.5 * DESK_CAMERA_ANGLE_X).tan();
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let (lo, hi) = DESK_ELEVATION;
    (0..count)
        .map(|i| {
            let u = (i as f64 + 0.5) / count as f64;
            let elevation = lo + (hi - lo) * u;
            let azimuth = golden * i as f64;
            let (y, r) = (elevation.sin(), elevation.cos());
            let eye = [r * azimuth.cos(), y, r * azimuth.sin()].map(|c| c * DESK_CAMERA_RADIUS);
            CameraPose::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], size, size, focal)
        })
        .collect()
}

/// Renders `grid` from every camera.
pub fn render_views(grid: &FieldGrid, cameras: &[CameraPose], settings: &RenderSettings) -> Result<Vec<PosedImage>> {
    cameras
        .iter()
        .map(|pose| {
            let view = render_image(grid, FetchMode::ReLU, pose, settings)?;
            PosedImage::new(pose.clone(), view.rgb)
        })
        .collect()
}

/// Training and held-out views of the desk scene.
#[derive(Clone, Debug)]
pub struct DeskScene {
    pub ground_truth: FieldGrid,
    pub train: Vec<PosedImage>,
    pub held_out: Vec<PosedImage>,
}

/// Renders `train + held_out` interleaved views of the desk ground truth;
/// every fifth camera (offset 2) is held out.
pub fn desk_scene(gt_dims: usize, train: usize, held_out: usize, size: usize, samples: usize) -> Result<DeskScene> {
    let ground_truth = desk_ground_truth(gt_dims)?;
    let total = train + held_out;
    let cams = desk_cameras(total, size)?;
    let stride = if held_out == 0 { usize::MAX } else { total / held_out };
    let (mut t, mut h) = (Vec::new(), Vec::new());
    for (i, cam) in cams.into_iter().enumerate() {
        if held_out > 0 && i % stride == stride / 2 && h.len() < held_out {
            h.push(cam);
        } else {
            t.push(cam);
        }
    }
    let settings = RenderSettings {
        samples_per_ray: samples,
        background: [1.0; 3],
        ..RenderSettings::default()
    };
    Ok(DeskScene {
        train: render_views(&ground_truth, &t, &settings)?,
        held_out: render_views(&ground_truth, &h, &settings)?,
        ground_truth,
    })
}

/// Flat-shaded RGB test image on black: a diagonal split, a disc, a
/// triangle and a thin bar, each with a constant color. Every color has a
/// zero channel, so each edge is a zero crossing in at least one channel.
pub fn flat_shapes_image(size: usize) -> Result<RasterImage> {
    let s = size as f64;
    let mut values = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let (x, y) = ((px as f64 + 0.5) / s, (py as f64 + 0.5) / s);
            let inside_tri = {
                let (ax, ay, bx, by, cx, cy) = (0.62, 0.12, 0.92, 0.48, 0.55, 0.42);
                let e = |x0: f64, y0: f64, x1: f64, y1: f64| (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
                let (d0, d1, d2) = (e(ax, ay, bx, by), e(bx, by, cx, cy), e(cx, cy, ax, ay));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            };
            let rgb = if (x - 0.3).powi(2) + (y - 0.65).powi(2) < 0.18f64.powi(2) {
                [0.95, 0.8, 0.0]
            } else if inside_tri {
                [0.0, 0.3, 0.85]
            } else if (0.08..0.92).contains(&x) && (0.86..0.9).contains(&y) {
                [0.9, 0.9, 0.9]
            } else if x + 0.4 * y > 0.75 {
                [0.85, 0.0, 0.2]
            } else {
                [0.0, 0.0, 0.0]
            };
            values.extend_from_slice(&rgb);
        }
    }
    RasterImage::new(size, size, 3, values)
}

/// Binary image that is 1 strictly above the main diagonal.
pub fn half_plane_image(size: usize) -> Result<RasterImage> {
    let values = (0..size * size)
        .map(|p| if p % size > p / size { 1.0 } else { 0.0 })
        .collect();
    RasterImage::new(size, size, 1, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_are_disjoint_and_inside_the_scene() {
        for (i, (lo, hi, _)) in DESK_BOXES.iter().enumerate() {
            for a in 0..3 {
                assert!(-1.0 < lo[a] && lo[a] < hi[a] && hi[a] < 1.0);
            }
            for (lo2, hi2, _) in &DESK_BOXES[i + 1..] {
                assert!((0..3).any(|a| hi[a] <= lo2[a] || hi2[a] <= lo[a]));
            }
        }
    }

    #[test]
    fn cameras_see_the_whole_scene_box() {
        let aabb = Aabb::cube(-DESK_SCALE, DESK_SCALE, 3).unwrap();
        for pose in desk_cameras(25, 32).unwrap() {
            let center = crate::render::generate_ray(&pose, (16, 16), &aabb);
            assert!(center.hit);
            for (x, y) in [(0, 0), (31, 0), (0, 31), (31, 31)] {
                assert!(!crate::render::generate_ray(&pose, (x, y), &aabb).hit);
            }
        }
    }

    #[test]
    fn views_show_box_colors_and_background() {
        let scene = desk_scene(24, 8, 2, 32, 96).unwrap();
        assert_eq!((scene.train.len(), scene.held_out.len()), (8, 2));
        let img = &scene.train[0].image;
        assert_eq!(img.pixel(0, 0), &[1.0, 1.0, 1.0]);
        let colored = img
            .values()
            .chunks(3)
            .filter(|p| p.iter().any(|v| (v - 1.0).abs() > 0.1))
            .count();
        assert!(colored > 32);
    }

    #[test]
    fn flat_image_has_few_distinct_colors() {
        let img = flat_shapes_image(64).unwrap();
        let mut colors: Vec<[u64; 3]> = img
            .values()
            .chunks(3)
            .map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()])
            .collect();
        colors.sort();
        colors.dedup();
        assert_eq!(colors.len(), 5);
    }
}
