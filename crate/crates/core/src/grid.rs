//! Dense vertex grids with multilinear interpolation and a single
//! post-interpolation nonlinearity.
//!
//! Values are stored row-major (axis 0 slowest) with the channel index
//! fastest, so all channels of a vertex share a cache line during a fetch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_AXES: usize = 3;
pub const MAX_CORNERS: usize = 1 << MAX_AXES;

/// World-space axis-aligned box spanned by a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Aabb {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl Aabb {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() || !(2..=MAX_AXES).contains(&min.len()) {
            return Err(Error::invalid(format!(
                "aabb corners must both have 2 or 3 components, got {} and {}",
                min.len(),
                max.len()
            )));
        }
        for (axis, (lo, hi)) in min.iter().zip(&max).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!(
                    "aabb axis {axis}: need finite min < max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Aabb { min, max })
    }

    /// Cube `[lo, hi]^ndim`.
    pub fn cube(lo: f64, hi: f64, ndim: usize) -> Result<Self> {
        Aabb::new(vec![lo; ndim], vec![hi; ndim])
    }

    pub fn ndim(&self) -> usize {
        self.min.len()
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn volume(&self) -> f64 {
        (0..self.ndim()).map(|a| self.extent(a)).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Grows every side by `fraction` of the extent along that axis.
    pub fn dilated(&self, fraction: f64) -> Aabb {
        let pad: Vec<f64> = (0..self.ndim())
            .map(|a| self.extent(a) * fraction)
            .collect();
        Aabb {
            min: self.min.iter().zip(&pad).map(|(v, p)| v - p).collect(),
            max: self.max.iter().zip(&pad).map(|(v, p)| v + p).collect(),
        }
    }
}

/// Nonlinearity applied around the multilinear interpolation of a fetch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FetchMode {
    /// Plain interpolation, the classic grid baseline.
    None,
    /// `max(0, interp(G))`.
    ReLU,
    /// `min(1, max(0, interp(G)))`, used for `[0, 1]` image signals.
    ReLUClamp01,
    /// `max(0, interp(tanh(G)))`, tanh applied per vertex before
    /// interpolation. Used for occupancy.
    TanhThenReLU,
}

impl FetchMode {
    /// Per-vertex transform applied before interpolation.
    #[inline]
    pub fn vertex(self, v: f64) -> f64 {
        match self {
            FetchMode::TanhThenReLU => v.tanh(),
            _ => v,
        }
    }

    #[inline]
    pub fn vertex_grad(self, v: f64) -> f64 {
        match self {
            FetchMode::TanhThenReLU => {
                let t = v.tanh();
                1.0 - t * t
            }
            _ => 1.0,
        }
    }

    #[inline]
    pub fn post(self, y: f64) -> f64 {
        match self {
            FetchMode::None => y,
            FetchMode::ReLU | FetchMode::TanhThenReLU => y.max(0.0),
            FetchMode::ReLUClamp01 => y.clamp(0.0, 1.0),
        }
    }

    /// Derivative of [`FetchMode::post`]; kinks get the zero subgradient.
    #[inline]
    pub fn post_grad(self, y: f64) -> f64 {
        match self {
            FetchMode::None => 1.0,
            FetchMode::ReLU | FetchMode::TanhThenReLU => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            FetchMode::ReLUClamp01 => {
                if y > 0.0 && y < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// The `2^m` vertices surrounding a (clamped) grid coordinate.
///
/// Corner `k` takes the upper vertex along axis `a` iff bit `a` of `k` is set.
#[derive(Clone, Copy, Debug)]
pub struct Corners {
    ndim: usize,
    offsets: [usize; MAX_CORNERS],
    fracs: [f64; MAX_AXES],
}

impl Corners {
    #[inline]
    pub fn count(&self) -> usize {
        1 << self.ndim
    }

    /// Index into the value array of channel 0 at each corner.
    #[inline]
    pub fn offsets(&self) -> &[usize] {
        &self.offsets[..self.count()]
    }

    #[inline]
    pub fn fracs(&self) -> &[f64] {
        &self.fracs[..self.ndim]
    }

    /// Multilinear weight of corner `k`.
    #[inline]
    pub fn weight(&self, k: usize) -> f64 {
        let mut w = 1.0;
        for a in 0..self.ndim {
            let f = self.fracs[a];
            w *= if k >> a & 1 == 1 { f } else { 1.0 - f };
        }
        w
    }

    #[inline]
    pub fn weights(&self) -> [f64; MAX_CORNERS] {
        let mut w = [0.0; MAX_CORNERS];
        for (k, slot) in w.iter_mut().enumerate().take(self.count()) {
            *slot = self.weight(k);
        }
        w
    }
}

#[inline]
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    (1.0 - f) * a + f * b
}

/// Reduces `2^ndim` corner values by nested linear interpolation, axis 0
/// first. Exact at vertices and for constant fields.
#[inline]
fn nested_lerp(buf: &mut [f64; MAX_CORNERS], ndim: usize, fracs: &[f64; MAX_AXES]) -> f64 {
    let mut n = 1 << ndim;
    for f in fracs.iter().take(ndim) {
        n >>= 1;
        for i in 0..n {
            buf[i] = lerp(buf[2 * i], buf[2 * i + 1], *f);
        }
    }
    buf[0]
}

/// Dense grid of unbounded feature vectors over an [`Aabb`].
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrid {
    dims: Vec<usize>,
    channels: usize,
    values: Vec<f64>,
    aabb: Aabb,
    strides: [usize; MAX_AXES],
}

fn vertex_strides(dims: &[usize]) -> [usize; MAX_AXES] {
    let mut strides = [0; MAX_AXES];
    let mut s = 1;
    for a in (0..dims.len()).rev() {
        strides[a] = s;
        s *= dims[a];
    }
    strides
}

fn check_shape(dims: &[usize], channels: usize, aabb: &Aabb) -> Result<usize> {
    if !(2..=MAX_AXES).contains(&dims.len()) {
        return Err(Error::invalid(format!(
            "grids have 2 or 3 axes, got {}",
            dims.len()
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("non-positive grid dims {dims:?}")));
    }
    if channels == 0 {
        return Err(Error::invalid("grid needs at least one channel"));
    }
    if aabb.ndim() != dims.len() {
        return Err(Error::invalid(format!(
            "aabb has {} axes but grid has {}",
            aabb.ndim(),
            dims.len()
        )));
    }
    dims.iter()
        .try_fold(channels, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid("grid size overflows usize"))
}

impl FieldGrid {
    /// All-zero grid.
    pub fn zeros(dims: &[usize], channels: usize, aabb: Aabb) -> Result<Self> {
        let len = check_shape(dims, channels, &aabb)?;
        Ok(FieldGrid {
            dims: dims.to_vec(),
            channels,
            values: vec![0.0; len],
            strides: vertex_strides(dims),
            aabb,
        })
    }

    pub fn from_values(
        dims: &[usize],
        channels: usize,
        aabb: Aabb,
        values: Vec<f64>,
    ) -> Result<Self> {
        let len = check_shape(dims, channels, &aabb)?;
        if values.len() != len {
            return Err(Error::invalid(format!(
                "expected {len} values for dims {dims:?} x {channels} channels, got {}",
                values.len()
            )));
        }
        Ok(FieldGrid {
            dims: dims.to_vec(),
            channels,
            values,
            strides: vertex_strides(dims),
            aabb,
        })
    }

    /// I.i.d. uniform values in `[lo, hi]`, reproducible from `seed`.
    pub fn init_uniform(
        dims: &[usize],
        channels: usize,
        aabb: Aabb,
        range: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        let (lo, hi) = range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(format!("bad init range [{lo}, {hi}]")));
        }
        let mut grid = FieldGrid::zeros(dims, channels, aabb)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = hi - lo;
        for v in grid.values.iter_mut() {
            *v = lo + span * rng.gen::<f64>();
        }
        Ok(grid)
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn aabb(&self) -> &Aabb {
        &self.aabb
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn vertex_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Index of channel 0 of the vertex at `index` in the value array.
    pub fn vertex_offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.ndim());
        let v: usize = index
            .iter()
            .zip(&self.strides)
            .map(|(i, s)| i * s)
            .sum();
        v * self.channels
    }

    /// Inverse of [`FieldGrid::vertex_offset`] for a flat vertex number.
    pub fn vertex_index(&self, vertex: usize) -> [usize; MAX_AXES] {
        let mut idx = [0; MAX_AXES];
        let mut rest = vertex;
        for a in 0..self.ndim() {
            idx[a] = rest / self.strides[a];
            rest %= self.strides[a];
        }
        idx
    }

    /// Affine map taking `aabb.min` to 0 and `aabb.max` to `dims - 1`.
    pub fn world_to_grid(&self, x_world: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ndim()];
        self.world_to_grid_into(x_world, &mut out);
        out
    }

    #[inline]
    pub fn world_to_grid_into(&self, x_world: &[f64], out: &mut [f64]) {
        for a in 0..self.ndim() {
            let t = (x_world[a] - self.aabb.min[a]) / self.aabb.extent(a);
            out[a] = t * (self.dims[a] - 1) as f64;
        }
    }

    /// Per-axis `(scale, offset)` such that `grid = scale * world + offset`.
    pub fn world_to_grid_affine(&self) -> ([f64; MAX_AXES], [f64; MAX_AXES]) {
        let mut scale = [0.0; MAX_AXES];
        let mut offset = [0.0; MAX_AXES];
        for a in 0..self.ndim() {
            scale[a] = (self.dims[a] - 1) as f64 / self.aabb.extent(a);
            offset[a] = -self.aabb.min[a] * scale[a];
        }
        (scale, offset)
    }

    /// Surrounding vertices of `x_grid`, clamped into `[0, dims - 1]`.
    /// The caller guarantees finite coordinates.
    #[inline]
    pub fn locate(&self, x_grid: &[f64]) -> Corners {
        let ndim = self.ndim();
        let mut base = 0usize;
        let mut step = [0usize; MAX_AXES];
        let mut fracs = [0.0; MAX_AXES];
        for a in 0..ndim {
            let d = self.dims[a];
            if d == 1 {
                continue;
            }
            let c = x_grid[a].clamp(0.0, (d - 1) as f64);
            let i0 = (c.floor() as usize).min(d - 2);
            fracs[a] = c - i0 as f64;
            base += i0 * self.strides[a];
            step[a] = self.strides[a];
        }
        let mut offsets = [0usize; MAX_CORNERS];
        for (k, off) in offsets.iter_mut().enumerate().take(1 << ndim) {
            let mut v = base;
            for a in 0..ndim {
                if k >> a & 1 == 1 {
                    v += step[a];
                }
            }
            *off = v * self.channels;
        }
        Corners {
            ndim,
            offsets,
            fracs,
        }
    }

    /// Three-axis [`FieldGrid::locate`] returning value offsets and
    /// multilinear weights directly.
    #[inline]
    pub fn locate3(&self, x_grid: [f64; 3]) -> ([usize; 8], [f64; 8]) {
        debug_assert_eq!(self.ndim(), 3);
        let mut base = 0usize;
        let mut step = [0usize; 3];
        let mut f = [0.0; 3];
        for a in 0..3 {
            let d = self.dims[a];
            if d == 1 {
                continue;
            }
            let c = x_grid[a].clamp(0.0, (d - 1) as f64);
            let i0 = (c as usize).min(d - 2);
            f[a] = c - i0 as f64;
            base += i0 * self.strides[a];
            step[a] = self.strides[a];
        }
        let ch = self.channels;
        let (sx, sy, sz) = (step[0] * ch, step[1] * ch, step[2] * ch);
        let b = base * ch;
        let offsets = [
            b,
            b + sx,
            b + sy,
            b + sx + sy,
            b + sz,
            b + sx + sz,
            b + sy + sz,
            b + sx + sy + sz,
        ];
        let (gx, gy, gz) = (1.0 - f[0], 1.0 - f[1], 1.0 - f[2]);
        let (a00, a10, a01, a11) = (gx * gy, f[0] * gy, gx * f[1], f[0] * f[1]);
        let weights = [
            a00 * gz,
            a10 * gz,
            a01 * gz,
            a11 * gz,
            a00 * f[2],
            a10 * f[2],
            a01 * f[2],
            a11 * f[2],
        ];
        (offsets, weights)
    }

    #[inline]
    pub(crate) fn pre_activation(&self, corners: &Corners, channel: usize, mode: FetchMode) -> f64 {
        let mut buf = [0.0; MAX_CORNERS];
        for (k, off) in corners.offsets().iter().enumerate() {
            buf[k] = mode.vertex(self.values[off + channel]);
        }
        nested_lerp(&mut buf, corners.ndim, &corners.fracs)
    }

    fn check_point(&self, x_grid: &[f64]) -> Result<()> {
        if x_grid.len() != self.ndim() {
            return Err(Error::invalid(format!(
                "point has {} coordinates, grid has {} axes",
                x_grid.len(),
                self.ndim()
            )));
        }
        if x_grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite grid coordinate {x_grid:?}")));
        }
        Ok(())
    }

    /// Interpolated, activated feature vector at a grid coordinate.
    pub fn fetch(&self, mode: FetchMode, x_grid: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.fetch_into(mode, x_grid, &mut out)?;
        Ok(out)
    }

    pub fn fetch_into(&self, mode: FetchMode, x_grid: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_point(x_grid)?;
        if out.len() != self.channels {
            return Err(Error::invalid("output buffer length != channels"));
        }
        let corners = self.locate(x_grid);
        for (ch, o) in out.iter_mut().enumerate() {
            *o = mode.post(self.pre_activation(&corners, ch, mode));
        }
        Ok(())
    }

    /// Single channel of [`FieldGrid::fetch`] without allocating.
    #[inline]
    pub fn fetch_channel(&self, mode: FetchMode, x_grid: &[f64], channel: usize) -> f64 {
        let corners = self.locate(x_grid);
        mode.post(self.pre_activation(&corners, channel, mode))
    }

    /// Accumulates `d(upstream . fetch(x_grid)) / d(values)` into `sink`.
    pub fn fetch_backward(
        &self,
        mode: FetchMode,
        x_grid: &[f64],
        upstream: &[f64],
        sink: &mut GradSink,
    ) -> Result<()> {
        self.check_point(x_grid)?;
        sink.check_matches(self)?;
        if upstream.len() != self.channels {
            return Err(Error::invalid("upstream length != channels"));
        }
        let corners = self.locate(x_grid);
        let weights = corners.weights();
        for (ch, &up) in upstream.iter().enumerate() {
            if up == 0.0 {
                continue;
            }
            let y = self.pre_activation(&corners, ch, mode);
            let g = up * mode.post_grad(y);
            if g == 0.0 {
                continue;
            }
            for (k, off) in corners.offsets().iter().enumerate() {
                let v = self.values[off + ch];
                sink.values[off + ch] += g * weights[k] * mode.vertex_grad(v);
            }
        }
        Ok(())
    }

    /// Doubles the vertex count per axis. New vertex `t` samples the source
    /// interpolant at `t * (src - 1) / (dst - 1)`, so the AABB corners map to
    /// themselves.
    pub fn upsample_trilinear(&self, factor: usize) -> Result<FieldGrid> {
        if factor != 2 {
            return Err(Error::invalid(format!(
                "only factor-2 upsampling is supported, got {factor}"
            )));
        }
        let ndim = self.ndim();
        let dst_dims: Vec<usize> = self.dims.iter().map(|d| d * 2).collect();
        let mut out = FieldGrid::zeros(&dst_dims, self.channels, self.aabb.clone())?;
        let ratio: Vec<f64> = (0..ndim)
            .map(|a| (self.dims[a] - 1) as f64 / (dst_dims[a] - 1) as f64)
            .collect();
        let mut coord = [0.0; MAX_AXES];
        let channels = self.channels;
        for (vertex, chunk) in out.values.chunks_exact_mut(channels).enumerate() {
            let idx = {
                let mut idx = [0; MAX_AXES];
                let mut rest = vertex;
                for a in 0..ndim {
                    idx[a] = rest / out.strides[a];
                    rest %= out.strides[a];
                }
                idx
            };
            for a in 0..ndim {
                coord[a] = idx[a] as f64 * ratio[a];
            }
            let corners = self.locate(&coord[..ndim]);
            for (ch, v) in chunk.iter_mut().enumerate() {
                *v = self.pre_activation(&corners, ch, FetchMode::None);
            }
        }
        Ok(out)
    }

    /// Clamps one channel of every vertex into `[lo, hi]`.
    pub fn clamp_channel(&mut self, channel: usize, lo: f64, hi: f64) {
        let c = self.channels;
        for v in self.values.iter_mut().skip(channel).step_by(c) {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Gradient accumulator shaped like a [`FieldGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSink {
    dims: Vec<usize>,
    channels: usize,
    values: Vec<f64>,
}

impl GradSink {
    pub fn for_grid(grid: &FieldGrid) -> Self {
        GradSink {
            dims: grid.dims.clone(),
            channels: grid.channels,
            values: vec![0.0; grid.values.len()],
        }
    }

    pub fn zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn check_matches(&self, grid: &FieldGrid) -> Result<()> {
        if self.dims != grid.dims || self.channels != grid.channels {
            return Err(Error::invalid(format!(
                "gradient sink shape {:?}x{} does not match grid {:?}x{}",
                self.dims, self.channels, grid.dims, grid.channels
            )));
        }
        Ok(())
    }

    /// Adds another sink of the same shape into this one.
    pub fn merge_from(&mut self, other: &GradSink) -> Result<()> {
        if self.dims != other.dims || self.channels != other.channels {
            return Err(Error::invalid("cannot merge gradient sinks of different shape"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_cube3() -> Aabb {
        Aabb::cube(0.0, 1.0, 3).unwrap()
    }

    fn random_grid(dims: &[usize], channels: usize, seed: u64) -> FieldGrid {
        let aabb = Aabb::cube(-1.0, 1.0, dims.len()).unwrap();
        FieldGrid::init_uniform(dims, channels, aabb, (-1.0, 1.0), seed).unwrap()
    }

    #[test]
    fn world_to_grid_corners_and_midpoint() {
        let g = FieldGrid::zeros(&[2, 2, 2], 1, unit_cube3()).unwrap();
        assert_eq!(g.world_to_grid(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        let g = FieldGrid::zeros(&[5, 5, 5], 1, unit_cube3()).unwrap();
        assert_eq!(g.world_to_grid(&[1.0, 1.0, 1.0]), vec![4.0, 4.0, 4.0]);
        let g = FieldGrid::zeros(&[3, 3, 3], 1, Aabb::cube(-1.0, 1.0, 3).unwrap()).unwrap();
        assert_eq!(g.world_to_grid(&[0.0, 0.0, 0.0]), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn affine_form_agrees_with_world_to_grid() {
        let aabb = Aabb::new(vec![-1.0, 0.5, 2.0], vec![3.0, 1.5, 2.5]).unwrap();
        let g = FieldGrid::zeros(&[7, 4, 9], 1, aabb).unwrap();
        let (s, o) = g.world_to_grid_affine();
        let x = [0.3, 0.9, 2.1];
        let direct = g.world_to_grid(&x);
        for a in 0..3 {
            assert!((s[a] * x[a] + o[a] - direct[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_relu() {
        for c in [-0.7, 0.0, 0.3, 2.5] {
            let aabb = Aabb::cube(0.0, 1.0, 2).unwrap();
            let g = FieldGrid::from_values(&[2, 2], 1, aabb, vec![c; 4]).unwrap();
            let y = g.fetch(FetchMode::ReLU, &[0.37, 0.81]).unwrap();
            assert_eq!(y[0], c.max(0.0));
        }
    }

    #[test]
    fn single_cell_zero_crossing() {
        // values -1 and +1 along axis 0, constant along axis 1
        let aabb = Aabb::cube(0.0, 1.0, 2).unwrap();
        let g = FieldGrid::from_values(&[2, 1], 1, aabb, vec![-1.0, 1.0]).unwrap();
        assert_eq!(g.fetch(FetchMode::ReLU, &[0.5, 0.0]).unwrap()[0], 0.0);
        assert_eq!(g.fetch(FetchMode::ReLU, &[0.75, 0.0]).unwrap()[0], 0.5);
        assert_eq!(g.fetch(FetchMode::None, &[0.25, 0.0]).unwrap()[0], -0.5);
    }

    /// Textbook bilinear formula over the four cell corners.
    fn bilinear_oracle(v00: f64, v10: f64, v01: f64, v11: f64, x: f64, y: f64) -> f64 {
        v00 * (1.0 - x) * (1.0 - y) + v10 * x * (1.0 - y) + v01 * (1.0 - x) * y + v11 * x * y
    }

    #[test]
    fn bilinear_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_grid(&[2, 2], 1, 5);
        let v = |i: usize, j: usize| g.values()[g.vertex_offset(&[i, j])];
        for _ in 0..100 {
            let x: f64 = rng.gen();
            let y: f64 = rng.gen();
            let got = g.fetch(FetchMode::None, &[x, y]).unwrap()[0];
            let want = bilinear_oracle(v(0, 0), v(1, 0), v(0, 1), v(1, 1), x, y);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn locate3_agrees_with_generic_locate() {
        let g = random_grid(&[4, 1, 6], 3, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let x = [rng.gen_range(-1.0..5.0), rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..7.0)];
            let c = g.locate(&x);
            let (offsets, weights) = g.locate3(x);
            assert_eq!(c.offsets(), &offsets);
            for k in 0..8 {
                assert!((c.weight(k) - weights[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn out_of_range_coordinates_clamp() {
        let g = random_grid(&[3, 4], 2, 9);
        let inside = g.fetch(FetchMode::None, &[2.0, 0.0]).unwrap();
        let outside = g.fetch(FetchMode::None, &[7.5, -3.0]).unwrap();
        assert_eq!(inside, outside);
    }

    #[test]
    fn non_finite_point_is_rejected() {
        let g = random_grid(&[3, 3, 3], 1, 1);
        let err = g.fetch(FetchMode::ReLU, &[0.5, f64::NAN, 1.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn backward_of_plain_fetch_is_partition_of_unity() {
        let g = random_grid(&[4, 4, 4], 3, 2);
        let mut sink = GradSink::for_grid(&g);
        let x = [1.3, 0.2, 2.9];
        g.fetch_backward(FetchMode::None, &x, &[1.0; 3], &mut sink)
            .unwrap();
        let corners = g.locate(&x);
        for ch in 0..3 {
            let total: f64 = corners.offsets().iter().map(|o| sink.values()[o + ch]).sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (k, o) in corners.offsets().iter().enumerate() {
                assert!((sink.values()[o + ch] - corners.weight(k)).abs() < 1e-15);
            }
        }
        let nonzero = sink.values().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 8 * 3);
    }

    #[test]
    fn clipped_region_has_zero_gradient() {
        let aabb = Aabb::cube(0.0, 1.0, 2).unwrap();
        let g = FieldGrid::from_values(&[2, 2], 1, aabb, vec![-1.0, -0.5, -0.2, 0.1]).unwrap();
        let mut sink = GradSink::for_grid(&g);
        let x = [0.3, 0.3];
        assert_eq!(g.fetch(FetchMode::ReLU, &x).unwrap()[0], 0.0);
        g.fetch_backward(FetchMode::ReLU, &x, &[1.0], &mut sink)
            .unwrap();
        assert!(sink.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sink_shape_mismatch_is_rejected() {
        let g = random_grid(&[3, 3, 3], 2, 1);
        let other = random_grid(&[3, 3, 4], 2, 1);
        let mut sink = GradSink::for_grid(&other);
        let err = g
            .fetch_backward(FetchMode::None, &[0.5, 0.5, 0.5], &[1.0, 1.0], &mut sink)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for mode in [
            FetchMode::None,
            FetchMode::ReLU,
            FetchMode::ReLUClamp01,
            FetchMode::TanhThenReLU,
        ] {
            let mut checked = 0;
            for seed in 0..200 {
                if let Some(err) = crate::selfcheck::fetch_gradient_error(mode, seed) {
                    assert!(err < 1e-5, "{mode:?} seed {seed}: rel err {err}");
                    checked += 1;
                }
            }
            assert!(checked > 20, "{mode:?}: only {checked} instances away from kinks");
        }
    }

    #[test]
    fn tanh_is_applied_before_interpolation() {
        let aabb = Aabb::cube(0.0, 1.0, 2).unwrap();
        let g = FieldGrid::from_values(&[2, 1], 1, aabb, vec![0.2, 3.0]).unwrap();
        let y = g.fetch(FetchMode::TanhThenReLU, &[0.5, 0.0]).unwrap()[0];
        let expected = 0.5 * 0.2f64.tanh() + 0.5 * 3.0f64.tanh();
        assert!((y - expected).abs() < 1e-15);
        assert!((y - 1.6f64.tanh()).abs() > 1e-3);
    }

    #[test]
    fn upsample_constant_and_ramp() {
        let aabb = Aabb::cube(0.0, 1.0, 3).unwrap();
        let g = FieldGrid::from_values(&[2, 3, 2], 2, aabb, vec![0.25; 24]).unwrap();
        let up = g.upsample_trilinear(2).unwrap();
        assert_eq!(up.dims(), &[4, 6, 4]);
        assert!(up.values().iter().all(|v| (*v - 0.25).abs() < 1e-15));

        let aabb = Aabb::cube(0.0, 1.0, 2).unwrap();
        let ramp = FieldGrid::from_values(&[2, 1], 1, aabb, vec![0.0, 1.0]).unwrap();
        let up = ramp.upsample_trilinear(2).unwrap();
        assert_eq!(up.dims(), &[4, 2]);
        let along_x: Vec<f64> = (0..4).map(|i| up.values()[up.vertex_offset(&[i, 0])]).collect();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in along_x.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn upsample_vertices_sample_source_interpolant() {
        let g = random_grid(&[4, 4, 4], 2, 21);
        let up = g.upsample_trilinear(2).unwrap();
        assert_eq!(up.aabb(), g.aabb());
        for vertex in 0..up.vertex_count() {
            let idx = up.vertex_index(vertex);
            // independent coordinate: t * (4 - 1) / (8 - 1)
            let c: Vec<f64> = idx[..3].iter().map(|&t| t as f64 * 3.0 / 7.0).collect();
            let want = g.fetch(FetchMode::None, &c).unwrap();
            let off = up.vertex_offset(&idx[..3]);
            for ch in 0..2 {
                assert!((up.values()[off + ch] - want[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_rejects_other_factors() {
        let g = random_grid(&[4, 4], 1, 0);
        assert!(g.upsample_trilinear(3).is_err());
    }

    #[test]
    fn upsample_preserves_multilinear_fields_everywhere() {
        // f(x, y, z) = 1 + 2x - y + 0.5z + xy - 3yz is linear along each axis
        let aabb = Aabb::new(vec![-1.0, 0.0, 2.0], vec![1.0, 3.0, 2.5]).unwrap();
        let mut g = FieldGrid::zeros(&[3, 5, 4], 1, aabb).unwrap();
        let f = |p: &[f64]| 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[2] + p[0] * p[1] - 3.0 * p[1] * p[2];
        for vertex in 0..g.vertex_count() {
            let idx = g.vertex_index(vertex);
            let off = g.vertex_offset(&idx[..3]);
            let p: Vec<f64> = (0..3)
                .map(|a| {
                    g.aabb().min()[a] + idx[a] as f64 / (g.dims()[a] - 1) as f64 * g.aabb().extent(a)
                })
                .collect();
            g.values_mut()[off] = f(&p);
        }
        let up = g.upsample_trilinear(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p: Vec<f64> = (0..3)
                .map(|a| g.aabb().min()[a] + rng.gen::<f64>() * g.aabb().extent(a))
                .collect();
            let a = g.fetch(FetchMode::None, &g.world_to_grid(&p)).unwrap()[0];
            let b = up.fetch(FetchMode::None, &up.world_to_grid(&p)).unwrap()[0];
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            assert!((a - f(&p)).abs() < 1e-9);
        }
    }

    #[test]
    fn init_uniform_contracts() {
        let aabb = unit_cube3();
        let zero = FieldGrid::init_uniform(&[3, 3, 3], 2, aabb.clone(), (0.0, 0.0), 4).unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));

        let a = FieldGrid::init_uniform(&[5, 6, 7], 3, aabb.clone(), (-0.1, 0.1), 99).unwrap();
        let b = FieldGrid::init_uniform(&[5, 6, 7], 3, aabb.clone(), (-0.1, 0.1), 99).unwrap();
        assert!(a
            .values()
            .iter()
            .zip(b.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.values().iter().all(|v| (-0.1..=0.1).contains(v)));

        assert!(matches!(
            FieldGrid::init_uniform(&[0, 3, 3], 1, aabb, (-1.0, 1.0), 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn init_uniform_mean_within_three_sigma() {
        let aabb = Aabb::cube(0.0, 1.0, 2).unwrap();
        let g = FieldGrid::init_uniform(&[1000, 1000], 1, aabb, (-1e-4, 1e-4), 7).unwrap();
        let n = g.values().len() as f64;
        let mean = g.values().iter().sum::<f64>() / n;
        // U(-a, a) has std a / sqrt(3)
        let sigma = 1e-4 / 3f64.sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
    }

    #[test]
    fn aabb_validation() {
        assert!(Aabb::new(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(Aabb::new(vec![0.0], vec![1.0]).is_err());
        assert!(Aabb::new(vec![0.0, 0.0], vec![1.0, f64::INFINITY]).is_err());
        let b = Aabb::cube(0.0, 2.0, 3).unwrap().dilated(0.1);
        assert_eq!(b.min(), &[-0.2, -0.2, -0.2]);
        assert_eq!(b.max(), &[2.2, 2.2, 2.2]);
    }

    proptest! {
        #[test]
        fn all_ones_grid_interpolates_to_exactly_one(
            x in -3.0f64..10.0, y in -3.0f64..10.0, z in -3.0f64..10.0,
            dx in 1usize..6, dy in 1usize..6, dz in 1usize..6,
        ) {
            let aabb = unit_cube3();
            let len = dx * dy * dz;
            let g = FieldGrid::from_values(&[dx, dy, dz], 1, aabb, vec![1.0; len]).unwrap();
            prop_assert_eq!(g.fetch(FetchMode::None, &[x, y, z]).unwrap()[0], 1.0);
        }

        #[test]
        fn integer_coordinates_reproduce_vertices(seed in 0u64..1000, i in 0usize..4, j in 0usize..5, k in 0usize..3) {
            let g = random_grid(&[4, 5, 3], 2, seed);
            let got = g.fetch(FetchMode::None, &[i as f64, j as f64, k as f64]).unwrap();
            let off = g.vertex_offset(&[i, j, k]);
            prop_assert_eq!(got[0].to_bits(), g.values()[off].to_bits());
            prop_assert_eq!(got[1].to_bits(), g.values()[off + 1].to_bits());
        }

        #[test]
        fn activations_stay_in_range(seed in 0u64..1000, x in -1.0f64..5.0, y in -1.0f64..5.0) {
            let aabb = Aabb::cube(0.0, 1.0, 2).unwrap();
            let g = FieldGrid::init_uniform(&[4, 4], 2, aabb, (-3.0, 3.0), seed).unwrap();
            for v in g.fetch(FetchMode::ReLU, &[x, y]).unwrap() {
                prop_assert!(v >= 0.0);
            }
            for v in g.fetch(FetchMode::ReLUClamp01, &[x, y]).unwrap() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            for v in g.fetch(FetchMode::TanhThenReLU, &[x, y]).unwrap() {
                prop_assert!((0.0..1.0).contains(&v));
            }
        }
    }
}
