//! Blender-style synthetic datasets: `transforms_<split>.json` plus PNGs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::grid::Aabb;
use crate::io::png::{read_png_rgb, write_png};
use crate::radiance::PosedImage;
use crate::render::CameraPose;

/// Half-width of the scene box used when none is given.
pub const DEFAULT_SCENE_BOUND: f64 = 1.5;
/// Allowed deviation of a frame's rotation from orthonormality.
pub const ROTATION_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::parse("split", format!("expected train, val or test, got {s:?}"))),
        }
    }
}

/// Pinhole focal length in pixels for a horizontal field of view.
pub fn focal_from_angle(width: usize, camera_angle_x: f64) -> f64 {
    0.5 * width as f64 / (0.5 * camera_angle_x).tan()
}

pub fn angle_from_focal(width: usize, focal: f64) -> f64 {
    2.0 * (0.5 * width as f64 / focal).atan()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFrame {
    pub image_path: PathBuf,
    pub pose: CameraPose,
}

/// One split of a dataset, with images not yet decoded.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub camera_angle_x: f64,
    pub frames: Vec<DatasetFrame>,
    pub aabb: Aabb,
}

impl DatasetManifest {
    /// Decodes every frame, compositing alpha over `background`.
    pub fn load_images(&self, background: [f64; 3]) -> Result<Vec<PosedImage>> {
        self.frames
            .iter()
            .map(|f| PosedImage::new(f.pose.clone(), read_png_rgb(&f.image_path, background)?))
            .collect()
    }
}

pub fn transforms_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("transforms_{split}.json"))
}

fn number(v: &Value, field: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::parse(field, "expected a finite number"))
}

fn resolve_image(root: &Path, file_path: &str) -> PathBuf {
    let rel = file_path.strip_prefix("./").unwrap_or(file_path);
    let mut path = root.join(rel);
    if path.extension().is_none() {
        path.set_extension("png");
    }
    path
}

/// Reads `transforms_<split>.json` under `root`. Image sizes come from the
/// PNG headers and must agree across the split. `aabb` defaults to the cube
/// of half-width [`DEFAULT_SCENE_BOUND`].
pub fn load_nerf_dataset(root: &Path, split: Split, aabb: Option<Aabb>) -> Result<DatasetManifest> {
    let path = transforms_path(root, split);
    let text = std::fs::read_to_string(&path)?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let camera_angle_x = number(
        doc.get("camera_angle_x").ok_or_else(|| Error::parse("camera_angle_x", "missing"))?,
        "camera_angle_x",
    )?;
    if !(camera_angle_x > 0.0 && camera_angle_x < std::f64::consts::PI) {
        return Err(Error::Validation(format!("camera_angle_x {camera_angle_x} is not in (0, pi)")));
    }
    let frames_json = doc
        .get("frames")
        .ok_or_else(|| Error::parse("frames", "missing"))?
        .as_array()
        .ok_or_else(|| Error::parse("frames", "expected an array"))?;
    if frames_json.is_empty() {
        return Err(Error::Validation(format!("{} has no frames", path.display())));
    }
    let mut size = None;
    let mut frames = Vec::with_capacity(frames_json.len());
    for (i, f) in frames_json.iter().enumerate() {
        let fp_field = format!("frames[{i}].file_path");
        let file_path = f
            .get("file_path")
            .ok_or_else(|| Error::parse(&fp_field, "missing"))?
            .as_str()
            .ok_or_else(|| Error::parse(&fp_field, "expected a string"))?;
        let tm_field = format!("frames[{i}].transform_matrix");
        let rows = f
            .get("transform_matrix")
            .ok_or_else(|| Error::parse(&tm_field, "missing"))?
            .as_array()
            .filter(|r| r.len() == 4 || r.len() == 3)
            .ok_or_else(|| Error::parse(&tm_field, "expected 3 or 4 rows"))?;
        let mut m = [[0.0; 4]; 3];
        for (r, row) in rows.iter().take(3).enumerate() {
            let row = row
                .as_array()
                .filter(|c| c.len() == 4)
                .ok_or_else(|| Error::parse(&tm_field, format!("row {r} needs 4 entries")))?;
            for (c, v) in row.iter().enumerate() {
                m[r][c] = number(v, &tm_field)?;
            }
        }
        let image_path = resolve_image(root, file_path);
        if !image_path.is_file() {
            return Err(Error::Validation(format!("missing image {}", image_path.display())));
        }
        let dims = image::image_dimensions(&image_path)?;
        match size {
            None => size = Some(dims),
            Some(s) if s != dims => {
                return Err(Error::Validation(format!(
                    "{} is {}x{}, earlier frames are {}x{}",
                    image_path.display(),
                    dims.0,
                    dims.1,
                    s.0,
                    s.1
                )))
            }
            _ => {}
        }
        let (w, h) = (dims.0 as usize, dims.1 as usize);
        let rotation = [0, 1, 2].map(|r| [m[r][0], m[r][1], m[r][2]]);
        let translation = [m[0][3], m[1][3], m[2][3]];
        let pose = CameraPose::with_tolerance(
            rotation,
            translation,
            w,
            h,
            focal_from_angle(w, camera_angle_x),
            ROTATION_TOLERANCE,
        )
        .map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("{tm_field}: {msg}")),
            other => other,
        })?;
        frames.push(DatasetFrame { image_path, pose });
    }
    let aabb = match aabb {
        Some(a) => a,
        None => Aabb::cube(-DEFAULT_SCENE_BOUND, DEFAULT_SCENE_BOUND, 3)?,
    };
    Ok(DatasetManifest {
        split,
        camera_angle_x,
        frames,
        aabb,
    })
}

/// Writes `views` as split `split` under `root`: PNGs in `<split>/r_<i>.png`
/// and a transforms file referencing them without extension. All views
/// must share one image size and focal length.
pub fn write_nerf_dataset(root: &Path, split: Split, views: &[PosedImage]) -> Result<()> {
    let first = views
        .first()
        .ok_or_else(|| Error::Validation("no views to write".into()))?;
    let (w, focal) = (first.pose.width(), first.pose.focal());
    std::fs::create_dir_all(root.join(split.as_str()))?;
    let mut frames = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        if v.pose.width() != w || v.pose.height() != first.pose.height() || v.pose.focal() != focal {
            return Err(Error::Validation("views differ in intrinsics".into()));
        }
        let rel = format!("./{split}/r_{i}");
        write_png(&v.image, &resolve_image(root, &rel))?;
        let (r, t) = (v.pose.rotation(), v.pose.translation());
        let matrix: Vec<Vec<f64>> = (0..3)
            .map(|k| vec![r[k][0], r[k][1], r[k][2], t[k]])
            .chain(std::iter::once(vec![0.0, 0.0, 0.0, 1.0]))
            .collect();
        frames.push(json!({ "file_path": rel, "transform_matrix": matrix }));
    }
    let doc = json!({ "camera_angle_x": angle_from_focal(w, focal), "frames": frames });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(transforms_path(root, split), text)?;
    Ok(())
}
