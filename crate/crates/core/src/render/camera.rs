//! Pinhole cameras looking down their local -z axis (x right, y up).

use crate::error::{Error, Result};
use crate::grid::Aabb;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn normalize(v: Vec3) -> Vec3 {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[inline]
fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn det3(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Camera-to-world rotation, camera position and intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    rotation: Mat3,
    translation: Vec3,
    width: usize,
    height: usize,
    focal: f64,
}

impl CameraPose {
    pub fn new(rotation: Mat3, translation: Vec3, width: usize, height: usize, focal: f64) -> Result<Self> {
        Self::with_tolerance(rotation, translation, width, height, focal, 1e-6)
    }

    /// Validates `rotation` against `tol` in the infinity norm of `R^T R - I`.
    pub fn with_tolerance(
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
        focal: f64,
        tol: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("empty image plane {width}x{height}")));
        }
        if !(focal.is_finite() && focal > 0.0) {
            return Err(Error::invalid(format!("focal length must be positive, got {focal}")));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite camera translation"));
        }
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let id = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((rtr - id).abs());
            }
        }
        if !(worst < tol) || det3(&rotation) <= 0.0 {
            return Err(Error::Validation(format!(
                "camera rotation is not a proper rotation (|R^T R - I| = {worst:e}, det = {:.6})",
                det3(&rotation)
            )));
        }
        Ok(CameraPose {
            rotation,
            translation,
            width,
            height,
            focal,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` roughly vertical in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, width: usize, height: usize, focal: f64) -> Result<Self> {
        let back = normalize([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
        let right = cross(up, back);
        if dot(right, right) < 1e-20 {
            return Err(Error::invalid("look_at: up vector parallel to view direction"));
        }
        let right = normalize(right);
        let true_up = cross(back, right);
        let rotation = [
            [right[0], true_up[0], back[0]],
            [right[1], true_up[1], back[1]],
            [right[2], true_up[2], back[2]],
        ];
        CameraPose::new(rotation, eye, width, height, focal)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    /// Unit world-space direction through the center of pixel `(px, py)`.
    #[inline]
    pub fn pixel_direction(&self, px: usize, py: usize) -> Vec3 {
        let x = (px as f64 + 0.5 - self.width as f64 / 2.0) / self.focal;
        let y = -(py as f64 + 0.5 - self.height as f64 / 2.0) / self.focal;
        normalize(mat_vec(&self.rotation, [x, y, -1.0]))
    }
}

/// A camera ray clipped against the grid box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    pub hit: bool,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// Slab test; returns the parametric interval `[max(t0, 0), t1]` when it is non-empty.
#[inline]
pub fn intersect_aabb(origin: Vec3, direction: Vec3, aabb: &Aabb) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let inv = 1.0 / direction[a];
        let mut ta = (aabb.min()[a] - origin[a]) * inv;
        let mut tb = (aabb.max()[a] - origin[a]) * inv;
        if ta.is_nan() || tb.is_nan() {
            // origin on a slab plane with a parallel ray
            if origin[a] < aabb.min()[a] || origin[a] > aabb.max()[a] {
                return None;
            }
            continue;
        }
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}

/// Ray through the center of pixel `px = (x, y)`, clipped against `aabb`.
pub fn generate_ray(pose: &CameraPose, px: (usize, usize), aabb: &Aabb) -> Ray {
    let direction = pose.pixel_direction(px.0, px.1);
    let origin = pose.translation;
    match intersect_aabb(origin, direction, aabb) {
        Some((t_near, t_far)) => Ray {
            origin,
            direction,
            t_near,
            t_far,
            hit: true,
        },
        None => Ray {
            origin,
            direction,
            t_near: 0.0,
            t_far: 0.0,
            hit: false,
        },
    }
}
