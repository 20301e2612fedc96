//! File formats: grid checkpoints, datasets, images, meshes and metrics.

pub mod grid_file;
pub mod metrics;
pub mod nerf;
pub mod obj;
pub mod png;

pub use grid_file::{load_grid, read_grid_header, save_grid, write_grid_stream, GridHeader};
pub use metrics::{format_dims, read_metrics, MetricsRow, MetricsWriter};
pub use nerf::{load_nerf_dataset, write_nerf_dataset, DatasetFrame, DatasetManifest, Split};
pub use obj::{load_obj, parse_obj, write_obj};
pub use png::{read_png_gray, read_png_rgb, write_depth_png, write_png};
