//! Raymarching through a 28-channel radiance grid and the matching
//! reverse-mode pass.
//!
//! Channel 0 holds pre-activation density; channels 1..28 hold degree-2 SH
//! coefficients, nine per color channel (red first). Only the density goes
//! through the ReLU.

use rayon::prelude::*;

use super::camera::{generate_ray, CameraPose, Ray};
use super::composite::Composite;
use super::sampling::{fill_samples, RaySamples, RenderSettings};
use super::sh::{sh_basis, sh_raw_color, SH_COEFFS, SH_COLOR_COEFFS};
use crate::error::{Error, Result};
use crate::grid::{FetchMode, FieldGrid, GradSink};
use crate::parallel;
use crate::raster::RasterImage;

pub const RADIANCE_CHANNELS: usize = 1 + SH_COLOR_COEFFS;

/// A radiance grid together with the activation used on its density.
#[derive(Clone, Copy, Debug)]
pub struct RadianceField<'a> {
    grid: &'a FieldGrid,
    density: FetchMode,
    /// SH terms per color channel in use: 1, 4 or 9.
    sh_terms: usize,
    scale: [f64; 3],
    offset: [f64; 3],
}

#[derive(Clone, Copy, Debug)]
struct ActiveSample {
    offsets: [usize; 8],
    weights: [f64; 8],
    pre: f64,
    delta: f64,
    transmittance: f64,
    decay: f64,
    alpha: f64,
    color: [f64; 3],
    raw: [f64; 3],
}

/// Per-worker buffers reused across rays.
#[derive(Clone, Debug, Default)]
pub struct RayScratch {
    samples: RaySamples,
    active: Vec<ActiveSample>,
    basis: [f64; SH_COEFFS],
    t_final: f64,
}

impl<'a> RadianceField<'a> {
    /// `density` must be [`FetchMode::ReLU`] or [`FetchMode::None`]; the
    /// latter expects non-negative stored densities.
    pub fn new(grid: &'a FieldGrid, density: FetchMode) -> Result<Self> {
        if grid.ndim() != 3 || grid.channels() != RADIANCE_CHANNELS {
            return Err(Error::invalid(format!(
                "radiance grids are 3D with {RADIANCE_CHANNELS} channels, got {}D with {}",
                grid.ndim(),
                grid.channels()
            )));
        }
        if !matches!(density, FetchMode::ReLU | FetchMode::None) {
            return Err(Error::invalid(format!(
                "density activation must be ReLU or None, got {density:?}"
            )));
        }
        let (scale, offset) = grid.world_to_grid_affine();
        Ok(RadianceField {
            grid,
            density,
            sh_terms: SH_COEFFS,
            scale,
            offset,
        })
    }

    /// Truncates the color expansion to bands `0..=degree`. Higher
    /// coefficients are ignored by the forward pass and receive no gradient.
    pub fn with_sh_degree(mut self, degree: usize) -> Result<Self> {
        if degree > 2 {
            return Err(Error::invalid(format!("SH degree must be 0, 1 or 2, got {degree}")));
        }
        self.sh_terms = (degree + 1) * (degree + 1);
        Ok(self)
    }

    pub fn grid(&self) -> &FieldGrid {
        self.grid
    }

    /// Forward pass for one ray. The visible samples are kept in `scratch`
    /// for a following [`RadianceField::backprop`].
    pub fn trace(
        &self,
        ray: &Ray,
        settings: &RenderSettings,
        ray_id: u64,
        scratch: &mut RayScratch,
    ) -> Result<Composite> {
        scratch.active.clear();
        scratch.t_final = 1.0;
        if !ray.hit {
            return Ok(Composite {
                rgb: settings.background,
                depth: 0.0,
                opacity: 0.0,
            });
        }
        fill_samples(ray, settings, ray_id, &mut scratch.samples);
        scratch.basis = sh_basis(ray.direction);
        let values = self.grid.values();
        let relu = self.density == FetchMode::ReLU;
        let mut transmittance = 1.0;
        let mut rgb = [0.0; 3];
        let mut depth = 0.0;
        for (&t, &delta) in scratch.samples.t.iter().zip(&scratch.samples.delta) {
            let p = ray.at(t);
            let x = [
                self.scale[0] * p[0] + self.offset[0],
                self.scale[1] * p[1] + self.offset[1],
                self.scale[2] * p[2] + self.offset[2],
            ];
            let (offsets, weights) = self.grid.locate3(x);
            let mut pre = 0.0;
            for k in 0..8 {
                pre += weights[k] * values[offsets[k]];
            }
            let sigma = if relu {
                if pre <= 0.0 {
                    continue;
                }
                pre
            } else if pre < 0.0 {
                return Err(Error::invalid(format!(
                    "negative density {pre} with plain activation; density vertices must be projected to >= 0"
                )));
            } else {
                pre
            };
            let raw = if self.sh_terms == SH_COEFFS {
                let mut coeffs = [0.0; SH_COLOR_COEFFS];
                for k in 0..8 {
                    let w = weights[k];
                    let v = &values[offsets[k] + 1..offsets[k] + 1 + SH_COLOR_COEFFS];
                    for (c, x) in coeffs.iter_mut().zip(v) {
                        *c += w * x;
                    }
                }
                sh_raw_color(&coeffs, &scratch.basis)
            } else {
                let mut raw = [0.0; 3];
                for (ch, r) in raw.iter_mut().enumerate() {
                    for j in 0..self.sh_terms {
                        let c = 1 + ch * SH_COEFFS + j;
                        let mut coeff = 0.0;
                        for k in 0..8 {
                            coeff += weights[k] * values[offsets[k] + c];
                        }
                        *r += coeff * scratch.basis[j];
                    }
                }
                raw
            };
            let color = raw.map(|v| v.clamp(0.0, 1.0));
            let tau = sigma * delta;
            let alpha = -(-tau).exp_m1();
            let decay = (-tau).exp();
            let w = transmittance * alpha;
            for ch in 0..3 {
                rgb[ch] += w * color[ch];
            }
            depth += w * t;
            scratch.active.push(ActiveSample {
                offsets,
                weights,
                pre,
                delta,
                transmittance,
                decay,
                alpha,
                color,
                raw,
            });
            transmittance *= decay;
        }
        for ch in 0..3 {
            rgb[ch] += transmittance * settings.background[ch];
        }
        scratch.t_final = transmittance;
        Ok(Composite {
            rgb,
            depth: depth + transmittance * ray.t_far,
            opacity: 1.0 - transmittance,
        })
    }

    /// Accumulates `d(upstream . rgb) / d(values)` for the ray last passed to
    /// [`RadianceField::trace`] with this scratch.
    pub fn backprop(&self, settings: &RenderSettings, scratch: &RayScratch, upstream: [f64; 3], sink: &mut [f64]) {
        let relu = self.density == FetchMode::ReLU;
        let g_bg: f64 = (0..3).map(|ch| upstream[ch] * settings.background[ch]).sum();
        // upstream . (sum_{i>k} w_i c_i + T_final * background)
        let mut suffix = scratch.t_final * g_bg;
        for s in scratch.active.iter().rev() {
            let gc: f64 = (0..3).map(|ch| upstream[ch] * s.color[ch]).sum();
            let w = s.transmittance * s.alpha;
            let d_sigma = s.delta * (s.transmittance * s.decay * gc - suffix);
            suffix += w * gc;
            let d_pre = if relu && s.pre <= 0.0 { 0.0 } else { d_sigma };

            let mut d_coeffs = [0.0; SH_COLOR_COEFFS];
            let mut any_color = false;
            for ch in 0..3 {
                if s.raw[ch] < 0.0 || s.raw[ch] > 1.0 {
                    continue;
                }
                let d_color = w * upstream[ch];
                if d_color == 0.0 {
                    continue;
                }
                any_color = true;
                for j in 0..self.sh_terms {
                    d_coeffs[ch * SH_COEFFS + j] = d_color * scratch.basis[j];
                }
            }
            for k in 0..8 {
                let wk = s.weights[k];
                if wk == 0.0 {
                    continue;
                }
                let off = s.offsets[k];
                sink[off] += wk * d_pre;
                if any_color {
                    if self.sh_terms == SH_COEFFS {
                        let dst = &mut sink[off + 1..off + 1 + SH_COLOR_COEFFS];
                        for (d, g) in dst.iter_mut().zip(&d_coeffs) {
                            *d += wk * g;
                        }
                    } else {
                        for ch in 0..3 {
                            for j in 0..self.sh_terms {
                                let c = ch * SH_COEFFS + j;
                                sink[off + 1 + c] += wk * d_coeffs[c];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output of [`render_image`].
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub rgb: RasterImage,
    /// Expected termination depth per pixel, for visualization only.
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

#[inline]
fn pixel_ray_id(pose: &CameraPose, x: usize, y: usize) -> u64 {
    (y * pose.width() + x) as u64
}

/// Renders every pixel of `pose`. Missed rays show the background.
pub fn render_image(
    grid: &FieldGrid,
    density: FetchMode,
    pose: &CameraPose,
    settings: &RenderSettings,
) -> Result<RenderedView> {
    settings.validate()?;
    let field = RadianceField::new(grid, density)?;
    let (w, h) = (pose.width(), pose.height());
    let rows: Vec<Vec<(Composite, usize)>> = (0..h)
        .into_par_iter()
        .map_init(RayScratch::default, |scratch, y| {
            (0..w)
                .map(|x| {
                    let ray = generate_ray(pose, (x, y), grid.aabb());
                    field
                        .trace(&ray, settings, pixel_ray_id(pose, x, y), scratch)
                        .map(|c| (c, x))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    let mut opacity = Vec::with_capacity(w * h);
    for (c, _) in rows.iter().flatten() {
        rgb.extend_from_slice(&c.rgb);
        depth.push(c.depth);
        opacity.push(c.opacity);
    }
    Ok(RenderedView {
        rgb: RasterImage::from_clamped(w, h, 3, rgb)?,
        depth,
        opacity,
    })
}

/// Accumulates the gradient of `sum(upstream * rendered_rgb)` into `sink`.
/// `upstream` is interleaved RGB per pixel, row-major.
pub fn render_backward(
    grid: &FieldGrid,
    density: FetchMode,
    pose: &CameraPose,
    settings: &RenderSettings,
    upstream: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    settings.validate()?;
    sink.check_matches(grid)?;
    let field = RadianceField::new(grid, density)?;
    let (w, h) = (pose.width(), pose.height());
    if upstream.len() != w * h * 3 {
        return Err(Error::invalid(format!(
            "upstream has {} entries, expected {}",
            upstream.len(),
            w * h * 3
        )));
    }
    let pixels: Vec<usize> = (0..w * h)
        .filter(|p| upstream[p * 3..p * 3 + 3].iter().any(|v| *v != 0.0))
        .collect();
    let mut spares = Vec::new();
    parallel::accumulate(&pixels, sink, &mut spares, |chunk, values| {
        let mut scratch = RayScratch::default();
        for &p in chunk {
            let (x, y) = (p % w, p / w);
            let ray = generate_ray(pose, (x, y), grid.aabb());
            field.trace(&ray, settings, pixel_ray_id(pose, x, y), &mut scratch)?;
            let up = [upstream[p * 3], upstream[p * 3 + 1], upstream[p * 3 + 2]];
            field.backprop(settings, &scratch, up, values);
        }
        Ok(0.0)
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Aabb;
    use crate::render::composite::composite_ea;
    use crate::render::sh::eval_sh_color;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube() -> Aabb {
        Aabb::cube(-1.0, 1.0, 3).unwrap()
    }

    fn front_camera(size: usize) -> CameraPose {
        CameraPose::look_at([0.0, 0.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0], size, size, size as f64 * 1.2).unwrap()
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let g = FieldGrid::zeros(&[4, 4, 4], 4, cube()).unwrap();
        assert!(render_image(&g, FetchMode::ReLU, &front_camera(4), &RenderSettings::default()).is_err());
    }

    #[test]
    fn negative_density_renders_background() {
        let mut g = FieldGrid::init_uniform(&[5, 5, 5], RADIANCE_CHANNELS, cube(), (-1.0, 1.0), 3).unwrap();
        g.clamp_channel(0, -50.0, -10.0);
        let settings = RenderSettings {
            samples_per_ray: 32,
            background: [0.2, 0.5, 0.9],
            ..Default::default()
        };
        let view = render_image(&g, FetchMode::ReLU, &front_camera(8), &settings).unwrap();
        for p in view.rgb.values().chunks(3) {
            assert_eq!(p, &[0.2, 0.5, 0.9]);
        }
    }

    #[test]
    fn forward_agrees_with_composite_of_fetches() {
        let g = FieldGrid::init_uniform(&[4, 4, 4], RADIANCE_CHANNELS, cube(), (-0.5, 1.5), 1).unwrap();
        let pose = front_camera(6);
        let settings = RenderSettings {
            samples_per_ray: 24,
            background: [1.0, 1.0, 1.0],
            stratified_jitter: true,
            seed: 5,
        };
        let field = RadianceField::new(&g, FetchMode::ReLU).unwrap();
        let mut scratch = RayScratch::default();
        for (x, y) in [(2, 2), (2, 3), (3, 4)] {
            let ray = generate_ray(&pose, (x, y), g.aabb());
            let got = field.trace(&ray, &settings, 99, &mut scratch).unwrap();
            let samples = crate::render::sampling::sample_ray(&ray, &settings, 99).unwrap();
            let mut sigmas = vec![];
            let mut colors = vec![];
            for &t in &samples.t {
                let xg = g.world_to_grid(&ray.at(t));
                let f = g.fetch(FetchMode::None, &xg).unwrap();
                sigmas.push(f[0].max(0.0));
                colors.push(eval_sh_color(&f[1..], ray.direction));
            }
            let want = composite_ea(&sigmas, &colors, &samples.delta, &samples.t, ray.t_far, settings.background).unwrap();
            for ch in 0..3 {
                assert!((got.rgb[ch] - want.rgb[ch]).abs() < 1e-12);
            }
            assert!((got.depth - want.depth).abs() < 1e-12);
            assert!((got.opacity - want.opacity).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_render_is_bit_identical() {
        let g = FieldGrid::init_uniform(&[6, 6, 6], RADIANCE_CHANNELS, cube(), (-1.0, 2.0), 2).unwrap();
        let s = RenderSettings {
            samples_per_ray: 16,
            ..Default::default()
        };
        let a = render_image(&g, FetchMode::ReLU, &front_camera(10), &s).unwrap();
        let b = render_image(&g, FetchMode::ReLU, &front_camera(10), &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_leaves_sink_untouched() {
        let g = FieldGrid::init_uniform(&[4, 4, 4], RADIANCE_CHANNELS, cube(), (0.1, 1.0), 2).unwrap();
        let pose = front_camera(8);
        let mut sink = GradSink::for_grid(&g);
        render_backward(&g, FetchMode::ReLU, &pose, &RenderSettings::default(), &vec![0.0; 8 * 8 * 3], &mut sink)
            .unwrap();
        assert!(sink.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn occluded_samples_get_no_density_gradient() {
        // opaque slab in front (z > 0) of a dense region behind it
        let mut g = FieldGrid::zeros(&[5, 5, 5], RADIANCE_CHANNELS, cube()).unwrap();
        for v in 0..g.vertex_count() {
            let idx = g.vertex_index(v);
            let off = g.vertex_offset(&idx);
            g.values_mut()[off] = if idx[2] >= 3 { 1e4 } else { 2.0 };
            g.values_mut()[off + 1] = 1.0;
        }
        let pose = front_camera(4);
        let settings = RenderSettings {
            samples_per_ray: 64,
            ..Default::default()
        };
        let mut sink = GradSink::for_grid(&g);
        render_backward(&g, FetchMode::ReLU, &pose, &settings, &vec![1.0; 4 * 4 * 3], &mut sink).unwrap();
        for v in 0..g.vertex_count() {
            let idx = g.vertex_index(v);
            if idx[2] <= 1 {
                assert!(sink.values()[g.vertex_offset(&idx)].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn plain_density_with_negative_values_is_rejected() {
        let g = FieldGrid::init_uniform(&[4, 4, 4], RADIANCE_CHANNELS, cube(), (-1.0, -0.5), 2).unwrap();
        let s = RenderSettings {
            samples_per_ray: 8,
            ..Default::default()
        };
        assert!(render_image(&g, FetchMode::None, &front_camera(4), &s).is_err());
        assert!(RadianceField::new(&g, FetchMode::TanhThenReLU).is_err());
    }

    #[test]
    fn truncated_sh_ignores_and_freezes_higher_bands() {
        let mut g = FieldGrid::init_uniform(&[4, 4, 4], RADIANCE_CHANNELS, cube(), (0.2, 1.0), 6).unwrap();
        let pose = front_camera(6);
        let settings = RenderSettings {
            samples_per_ray: 16,
            ..Default::default()
        };
        let mut sink = GradSink::for_grid(&g);
        let field = RadianceField::new(&g, FetchMode::ReLU).unwrap().with_sh_degree(1).unwrap();
        let mut scratch = RayScratch::default();
        for p in 0..36 {
            let ray = generate_ray(&pose, (p % 6, p / 6), g.aabb());
            field.trace(&ray, &settings, p as u64, &mut scratch).unwrap();
            field.backprop(&settings, &scratch, [0.5; 3], sink.values_mut());
        }
        for v in sink.values().chunks(RADIANCE_CHANNELS) {
            for ch in 0..3 {
                assert!(v[1 + ch * 9 + 4..1 + ch * 9 + 9].iter().all(|x| *x == 0.0));
            }
        }
        // with higher bands zeroed, truncated and full rendering agree
        for v in g.values_mut().chunks_mut(RADIANCE_CHANNELS) {
            for ch in 0..3 {
                v[1 + ch * 9 + 4..1 + ch * 9 + 9].fill(0.0);
            }
        }
        let full = RadianceField::new(&g, FetchMode::ReLU).unwrap();
        let cut = full.with_sh_degree(1).unwrap();
        let ray = generate_ray(&pose, (3, 3), g.aabb());
        let a = full.trace(&ray, &settings, 0, &mut scratch).unwrap();
        let b = cut.trace(&ray, &settings, 0, &mut scratch).unwrap();
        for ch in 0..3 {
            assert!((a.rgb[ch] - b.rgb[ch]).abs() < 1e-14);
        }
        assert!(full.with_sh_degree(3).is_err());
    }

    #[test]
    fn opaque_red_block_covers_the_center_only() {
        let mut g = FieldGrid::zeros(&[9, 9, 9], RADIANCE_CHANNELS, cube()).unwrap();
        for v in 0..g.vertex_count() {
            let idx = g.vertex_index(v);
            let off = g.vertex_offset(&idx);
            let inside = idx[..3].iter().all(|i| (3..=5).contains(i));
            g.values_mut()[off] = if inside { 500.0 } else { -500.0 };
            g.values_mut()[off + 1] = 1.0 / 0.282_094_791_773_878_14;
        }
        let pose = front_camera(32);
        let settings = RenderSettings {
            samples_per_ray: 512,
            ..Default::default()
        };
        let view = render_image(&g, FetchMode::ReLU, &pose, &settings).unwrap();
        let center = view.rgb.pixel(16, 16);
        assert!((center[0] - 1.0).abs() < 1e-3 && center[1] < 1e-3 && center[2] < 1e-3, "{center:?}");
        for (x, y) in [(0, 0), (31, 0), (0, 31), (31, 31), (16, 0), (0, 16)] {
            assert_eq!(view.rgb.pixel(x, y), &[1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_a_small_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut g = FieldGrid::zeros(&[4, 4, 4], RADIANCE_CHANNELS, cube()).unwrap();
        for (i, v) in g.values_mut().iter_mut().enumerate() {
            *v = match i % RADIANCE_CHANNELS {
                0 => rng.gen_range(0.5..2.0),
                1 | 10 | 19 => rng.gen_range(1.2..2.2),
                _ => rng.gen_range(-0.1..0.1),
            };
        }
        let pose = CameraPose::look_at([2.5, 1.5, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 8, 8, 9.0).unwrap();
        let settings = RenderSettings {
            samples_per_ray: 16,
            background: [0.3, 0.6, 0.9],
            stratified_jitter: true,
            seed: 4,
        };
        let upstream: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |grid: &FieldGrid| -> f64 {
            let view = render_image(grid, FetchMode::ReLU, &pose, &settings).unwrap();
            view.rgb.values().iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let mut sink = GradSink::for_grid(&g);
        render_backward(&g, FetchMode::ReLU, &pose, &settings, &upstream, &mut sink).unwrap();
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for i in 0..g.values().len() {
            let mut plus = g.clone();
            plus.values_mut()[i] += h;
            let mut minus = g.clone();
            minus.values_mut()[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = sink.values()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
