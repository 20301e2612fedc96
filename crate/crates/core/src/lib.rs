pub mod config;
pub mod error;
pub mod grid;
pub mod image_fit;
pub mod io;
pub mod occupancy;
pub mod optim;
mod parallel;
pub mod radiance;
pub mod raster;
pub mod render;
pub mod scenes;
pub mod selfcheck;

pub use config::{Mode, TrainConfig};
pub use error::{Error, Result};
pub use grid::{Aabb, FetchMode, FieldGrid, GradSink};
pub use raster::RasterImage;
