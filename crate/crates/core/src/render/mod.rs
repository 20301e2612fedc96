//! Differentiable emission-absorption volume rendering.

pub mod camera;
pub mod composite;
pub mod loss;
pub mod raymarch;
pub mod sampling;
pub mod sh;

pub use camera::{generate_ray, intersect_aabb, CameraPose, Ray};
pub use composite::{composite_ea, composite_weights, Composite};
pub use loss::{image_mse, photometric_loss};
pub use raymarch::{render_backward, render_image, RadianceField, RayScratch, RenderedView, RADIANCE_CHANNELS};
pub use sampling::{mix_seed, sample_ray, RaySamples, RenderSettings};
pub use sh::{eval_sh_color, sh_basis, ShConstants};
