//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Aabb;
use crate::optim::{AdamConfig, ProgressiveSchedule};

/// Grid-vs-ReLU-field ablation switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Relu,
    None,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Relu => "relu",
            Mode::None => "none",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "relu" => Ok(Mode::Relu),
            "none" => Ok(Mode::None),
            other => Err(Error::parse("mode", format!("expected relu or none, got `{other}`"))),
        }
    }
}

/// Everything needed to reproduce a fitting run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Final vertex count per axis; a single entry applies to every axis.
    pub dims: Vec<usize>,
    pub progressive: bool,
    pub shrink_exponent: u32,
    pub stage_iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub init_range: (f64, f64),
    pub seed: u64,
    /// Worker threads; 0 means all hardware threads.
    pub threads: usize,
    pub samples_per_ray: usize,
    pub batch_rays: usize,
    pub batch_points: usize,
    pub background: [f64; 3],
    /// Explicit world box `(min, max)`; pipelines fall back to their own default.
    pub aabb: Option<(Vec<f64>, Vec<f64>)>,
    /// Validation views rendered at each stage boundary.
    pub val_views: usize,
    /// Highest SH band fitted for radiance color (0, 1 or 2).
    pub sh_degree: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Relu,
            dims: vec![128],
            progressive: true,
            shrink_exponent: 4,
            stage_iters: 2000,
            lr: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            init_range: (-0.1, 0.1),
            seed: 0,
            threads: 0,
            samples_per_ray: 256,
            batch_rays: 4096,
            batch_points: 32768,
            background: [1.0, 1.0, 1.0],
            aabb: None,
            val_views: 5,
            sh_degree: 2,
        }
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_num<T: std::str::FromStr>(field: &str, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.trim()
        .parse::<T>()
        .map_err(|e| Error::parse(field, format!("`{}`: {e}", s.trim())))
}

fn parse_list<T: std::str::FromStr>(field: &str, s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split([',', 'x'])
        .map(|part| parse_num(field, part))
        .collect()
}

fn parse_bool(field: &str, s: &str) -> Result<bool> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::parse(field, format!("expected true or false, got `{other}`"))),
    }
}

impl TrainConfig {
    /// Final per-axis dims for a grid with `ndim` axes.
    pub fn final_dims(&self, ndim: usize) -> Result<Vec<usize>> {
        match self.dims.len() {
            1 => Ok(vec![self.dims[0]; ndim]),
            n if n == ndim => Ok(self.dims.clone()),
            n => Err(Error::invalid(format!(
                "dims has {n} entries but the pipeline needs 1 or {ndim}"
            ))),
        }
    }

    /// Coarse-to-fine schedule, or a single stage with the same total
    /// iteration budget when progressive growing is disabled.
    pub fn schedule(&self, ndim: usize) -> Result<ProgressiveSchedule> {
        let final_dims = self.final_dims(ndim)?;
        let stages = self.shrink_exponent as usize + 1;
        if self.progressive {
            ProgressiveSchedule::new(self.shrink_exponent, self.stage_iters, final_dims)
        } else {
            ProgressiveSchedule::new(0, self.stage_iters * stages, final_dims)
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn aabb_or(&self, default: Aabb) -> Result<Aabb> {
        match &self.aabb {
            Some((min, max)) => Aabb::new(min.clone(), max.clone()),
            None => Ok(default),
        }
    }

    /// Serializes every field, one `key = value` per line.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", self.mode.as_str());
        let _ = writeln!(s, "dims = {}", join(&self.dims));
        let _ = writeln!(s, "progressive = {}", self.progressive);
        let _ = writeln!(s, "shrink_exponent = {}", self.shrink_exponent);
        let _ = writeln!(s, "stage_iters = {}", self.stage_iters);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "eps = {}", self.eps);
        let _ = writeln!(s, "init_range = {},{}", self.init_range.0, self.init_range.1);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "samples_per_ray = {}", self.samples_per_ray);
        let _ = writeln!(s, "batch_rays = {}", self.batch_rays);
        let _ = writeln!(s, "batch_points = {}", self.batch_points);
        let _ = writeln!(s, "background = {}", join(&self.background));
        match &self.aabb {
            Some((min, max)) => {
                let all: Vec<f64> = min.iter().chain(max).copied().collect();
                let _ = writeln!(s, "aabb = {}", join(&all));
            }
            None => {
                let _ = writeln!(s, "aabb = default");
            }
        }
        let _ = writeln!(s, "val_views = {}", self.val_views);
        let _ = writeln!(s, "sh_degree = {}", self.sh_degree);
        s
    }

    /// Parses the text form. Missing keys keep their defaults; unknown keys
    /// are rejected.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(format!("line {}", lineno + 1), "expected `key = value`")
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "dims" => self.dims = parse_list(key, value)?,
            "progressive" => self.progressive = parse_bool(key, value)?,
            "shrink_exponent" => self.shrink_exponent = parse_num(key, value)?,
            "stage_iters" => self.stage_iters = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "init_range" => {
                let v: Vec<f64> = parse_list(key, value)?;
                if v.len() != 2 {
                    return Err(Error::parse(key, "expected lo,hi"));
                }
                self.init_range = (v[0], v[1]);
            }
            "seed" => self.seed = parse_num(key, value)?,
            "threads" => self.threads = parse_num(key, value)?,
            "samples_per_ray" => self.samples_per_ray = parse_num(key, value)?,
            "batch_rays" => self.batch_rays = parse_num(key, value)?,
            "batch_points" => self.batch_points = parse_num(key, value)?,
            "background" => {
                let v: Vec<f64> = parse_list(key, value)?;
                self.background = match v.len() {
                    1 => [v[0]; 3],
                    3 => [v[0], v[1], v[2]],
                    _ => return Err(Error::parse(key, "expected one or three values")),
                };
            }
            "aabb" => self.aabb = parse_aabb(value)?,
            "val_views" => self.val_views = parse_num(key, value)?,
            "sh_degree" => {
                let d: usize = parse_num(key, value)?;
                if d > 2 {
                    return Err(Error::parse(key, format!("expected 0, 1 or 2, got {d}")));
                }
                self.sh_degree = d;
            }
            other => return Err(Error::parse(other, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainConfig::from_kv_str(&std::fs::read_to_string(path)?)
    }
}

/// `default`, `lo,hi` (a cube), or `x0,y0,z0,x1,y1,z1`.
pub fn parse_aabb(value: &str) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    if value.trim() == "default" {
        return Ok(None);
    }
    let v: Vec<f64> = value
        .split(',')
        .map(|p| parse_num("aabb", p))
        .collect::<Result<_>>()?;
    let (min, max) = match v.len() {
        2 => (vec![v[0]; 3], vec![v[1]; 3]),
        4 | 6 => {
            let h = v.len() / 2;
            (v[..h].to_vec(), v[h..].to_vec())
        }
        n => return Err(Error::parse("aabb", format!("expected 2, 4 or 6 numbers, got {n}"))),
    };
    Aabb::new(min.clone(), max.clone()).map_err(|e| Error::parse("aabb", e.to_string()))?;
    Ok(Some((min, max)))
}
