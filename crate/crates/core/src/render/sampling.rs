use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::camera::Ray;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    pub background: [f64; 3],
    pub stratified_jitter: bool,
    pub seed: u64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            samples_per_ray: 256,
            background: [1.0; 3],
            stratified_jitter: false,
            seed: 0,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 samples per ray, got {}",
                self.samples_per_ray
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!(
                "background {:?} outside [0, 1]",
                self.background
            )));
        }
        Ok(())
    }
}

/// Sample depths along a ray and the width of each depth bin.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

/// SplitMix64 finalizer; decorrelates per-ray seeds.
#[inline]
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fills `out` with one depth per equal-width bin of `[t_near, t_far]`.
/// `ray_id` selects the jitter stream so a ray can be replayed exactly.
pub(crate) fn fill_samples(ray: &Ray, settings: &RenderSettings, ray_id: u64, out: &mut RaySamples) {
    let n = settings.samples_per_ray;
    let width = (ray.t_far - ray.t_near) / n as f64;
    out.t.clear();
    out.delta.clear();
    if settings.stratified_jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(settings.seed, ray_id));
        for i in 0..n {
            let u: f64 = rng.gen();
            out.t.push(ray.t_near + (i as f64 + u) * width);
        }
    } else {
        for i in 0..n {
            out.t.push(ray.t_near + (i as f64 + 0.5) * width);
        }
    }
    out.delta.resize(n, width);
}

pub fn sample_ray(ray: &Ray, settings: &RenderSettings, ray_id: u64) -> Result<RaySamples> {
    if !ray.hit {
        return Err(Error::invalid("cannot sample a ray that misses the grid box"));
    }
    settings.validate()?;
    let mut out = RaySamples::default();
    fill_samples(ray, settings, ray_id, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ray(t_near: f64, t_far: f64) -> Ray {
        Ray {
            origin: [0.0; 3],
            direction: [0.0, 0.0, -1.0],
            t_near,
            t_far,
            hit: true,
        }
    }

    fn settings(n: usize, jitter: bool) -> RenderSettings {
        RenderSettings {
            samples_per_ray: n,
            stratified_jitter: jitter,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn midpoints_of_equal_bins() {
        let s = sample_ray(&ray(0.0, 1.0), &settings(4, false), 0).unwrap();
        assert_eq!(s.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.delta, vec![0.25; 4]);
    }

    #[test]
    fn bin_widths_partition_the_interval() {
        let s = sample_ray(&ray(0.5, 2.5), &settings(8, false), 0).unwrap();
        assert_eq!(s.delta.iter().sum::<f64>(), 2.0);
        for (a, b, n) in [(0.3, 1.7, 7), (1.1, 4.35, 33), (0.0, 2.0f64.sqrt(), 100)] {
            let s = sample_ray(&ray(a, b), &settings(n, true), 1).unwrap();
            let total: f64 = s.delta.iter().sum();
            assert!((total - (b - a)).abs() <= 1e-12 * (b - a));
        }
    }

    #[test]
    fn jitter_is_reproducible_and_stays_in_bins() {
        let r = ray(1.0, 3.0);
        let a = sample_ray(&r, &settings(16, true), 42).unwrap();
        let b = sample_ray(&r, &settings(16, true), 42).unwrap();
        assert_eq!(a, b);
        let c = sample_ray(&r, &settings(16, true), 43).unwrap();
        assert_ne!(a.t, c.t);
        let w = 2.0 / 16.0;
        for (i, t) in a.t.iter().enumerate() {
            let lo = 1.0 + i as f64 * w;
            assert!(*t >= lo && *t < lo + w + 1e-12, "sample {i} at {t}");
        }
    }

    #[test]
    fn missed_ray_is_rejected() {
        let mut r = ray(0.0, 1.0);
        r.hit = false;
        assert!(matches!(
            sample_ray(&r, &settings(4, false), 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(sample_ray(&ray(0.0, 1.0), &settings(1, false), 0).is_err());
    }
}
