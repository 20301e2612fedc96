//! Front-to-back emission-absorption compositing.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
}

/// Opacity of one sample, `1 - exp(-sigma * delta)`.
#[inline]
pub fn alpha(sigma: f64, delta: f64) -> f64 {
    -(-sigma * delta).exp_m1()
}

/// Per-sample weights `T_i * alpha_i` and the transmittance left after the
/// last sample.
pub fn composite_weights(sigmas: &[f64], deltas: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_inputs(sigmas, deltas)?;
    let mut transmittance = 1.0;
    let weights = sigmas
        .iter()
        .zip(deltas)
        .map(|(&s, &d)| {
            let w = transmittance * alpha(s, d);
            transmittance *= (-s * d).exp();
            w
        })
        .collect();
    Ok((weights, transmittance))
}

fn check_inputs(sigmas: &[f64], deltas: &[f64]) -> Result<()> {
    if sigmas.len() != deltas.len() {
        return Err(Error::invalid("sigma and delta arrays differ in length"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("negative or NaN density {s}")));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::invalid(format!("non-positive step size {d}")));
    }
    Ok(())
}

/// Composites colors `c_i` at depths `t_i` over `background`. Rays that
/// pass through contribute `t_far` to the expected depth.
pub fn composite_ea(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    depths: &[f64],
    t_far: f64,
    background: [f64; 3],
) -> Result<Composite> {
    if colors.len() != sigmas.len() || depths.len() != sigmas.len() {
        return Err(Error::invalid("per-sample arrays differ in length"));
    }
    let (weights, t_final) = composite_weights(sigmas, deltas)?;
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    for ((w, c), t) in weights.iter().zip(colors).zip(depths) {
        for ch in 0..3 {
            rgb[ch] += w * c[ch];
        }
        depth += w * t;
    }
    for ch in 0..3 {
        rgb[ch] += t_final * background[ch];
    }
    Ok(Composite {
        rgb,
        depth: depth + t_final * t_far,
        opacity: 1.0 - t_final,
    })
}
