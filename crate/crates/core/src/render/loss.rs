use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Mean squared error over every stored value, and its gradient with
/// respect to `rendered`.
pub fn photometric_loss(rendered: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if rendered.len() != target.len() || rendered.is_empty() {
        return Err(Error::invalid(format!(
            "cannot compare {} values against {}",
            rendered.len(),
            target.len()
        )));
    }
    let n = rendered.len() as f64;
    let mut loss = 0.0;
    let grad = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| {
            let d = r - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

pub fn image_mse(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::invalid("images differ in shape"));
    }
    Ok(photometric_loss(a.values(), b.values())?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_and_gradient() {
        let (l, g) = photometric_loss(&[0.5, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(l, 0.125);
        assert_eq!(g, vec![0.5, 0.0]);
        assert!(photometric_loss(&[], &[]).is_err());
        assert!(photometric_loss(&[1.0], &[1.0, 2.0]).is_err());
    }
}
