//! Real spherical harmonics up to degree 2.

pub const SH_COEFFS: usize = 9;
/// Nine coefficients for each of the three color channels.
pub const SH_COLOR_COEFFS: usize = 3 * SH_COEFFS;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2_OFF: f64 = 1.092_548_430_592_079_2;
const C2_ZZ: f64 = 0.315_391_565_252_520_05;
const C2_XY: f64 = 0.546_274_215_296_039_6;

/// Signed normalization constant of each basis function. Basis `j` is
/// `constants[j] * poly_j(x, y, z)` with polynomials
/// `1, y, z, x, xy, yz, 2z^2 - x^2 - y^2, xz, x^2 - y^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShConstants(pub [f64; SH_COEFFS]);

impl Default for ShConstants {
    fn default() -> Self {
        ShConstants([C0, -C1, C1, -C1, C2_OFF, -C2_OFF, C2_ZZ, -C2_OFF, C2_XY])
    }
}

impl ShConstants {
    #[inline]
    pub fn basis(&self, dir: [f64; 3]) -> [f64; SH_COEFFS] {
        let [x, y, z] = dir;
        let k = &self.0;
        [
            k[0],
            k[1] * y,
            k[2] * z,
            k[3] * x,
            k[4] * x * y,
            k[5] * y * z,
            k[6] * (2.0 * z * z - x * x - y * y),
            k[7] * x * z,
            k[8] * (x * x - y * y),
        ]
    }
}

/// Basis values `Y_j(dir)` with the standard constants.
#[inline]
pub fn sh_basis(dir: [f64; 3]) -> [f64; SH_COEFFS] {
    ShConstants::default().basis(dir)
}

/// Unclamped per-channel dot products of coefficients with the basis.
#[inline]
pub fn sh_raw_color(coeffs: &[f64], basis: &[f64; SH_COEFFS]) -> [f64; 3] {
    let mut rgb = [0.0; 3];
    for (ch, c) in rgb.iter_mut().enumerate() {
        let k = &coeffs[ch * SH_COEFFS..(ch + 1) * SH_COEFFS];
        *c = k.iter().zip(basis).map(|(a, b)| a * b).sum();
    }
    rgb
}

/// View-dependent color, clamped into `[0, 1]`.
pub fn eval_sh_color(coeffs: &[f64], view_dir: [f64; 3]) -> [f64; 3] {
    debug_assert_eq!(coeffs.len(), SH_COLOR_COEFFS);
    let raw = sh_raw_color(coeffs, &sh_basis(view_dir));
    raw.map(|v| v.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dir(rng: &mut ChaCha8Rng) -> [f64; 3] {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).sqrt();
        [r * phi.cos(), r * phi.sin(), z]
    }

    #[test]
    fn dc_term_is_direction_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y00 = 1.0 / (2.0 * std::f64::consts::PI.sqrt());
        assert!((y00 - 0.2820948).abs() < 1e-7);
        let mut coeffs = [0.0; SH_COLOR_COEFFS];
        coeffs[0] = 1.5;
        coeffs[9] = 0.7;
        coeffs[18] = 3.0;
        for _ in 0..50 {
            let d = random_dir(&mut rng);
            let raw = sh_raw_color(&coeffs, &sh_basis(d));
            assert!((raw[0] - 1.5 * y00).abs() < 1e-15);
            assert!((raw[1] - 0.7 * y00).abs() < 1e-15);
            assert!((raw[2] - 3.0 * y00).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_coefficients_give_black() {
        assert_eq!(eval_sh_color(&[0.0; 27], [0.0, 0.0, 1.0]), [0.0; 3]);
    }

    #[test]
    fn even_degree_terms_are_antipodally_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mut coeffs = [0.0; SH_COLOR_COEFFS];
            for ch in 0..3 {
                for j in [0, 4, 5, 6, 7, 8] {
                    coeffs[ch * 9 + j] = rng.gen_range(-0.5..0.5);
                }
                coeffs[ch * 9] += 1.5;
            }
            let d = random_dir(&mut rng);
            let a = sh_raw_color(&coeffs, &sh_basis(d));
            let b = sh_raw_color(&coeffs, &sh_basis([-d[0], -d[1], -d[2]]));
            for ch in 0..3 {
                assert!((a[ch] - b[ch]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn odd_degree_terms_flip_sign() {
        let d = [0.48, -0.6, 0.64];
        let nd = [-0.48, 0.6, -0.64];
        let a = sh_basis(d);
        let b = sh_basis(nd);
        for j in 1..4 {
            assert!((a[j] + b[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn output_is_clamped() {
        let mut coeffs = [0.0; SH_COLOR_COEFFS];
        coeffs[0] = 100.0;
        coeffs[9] = -100.0;
        coeffs[18] = 1.0;
        let c = eval_sh_color(&coeffs, [1.0, 0.0, 0.0]);
        assert_eq!(c[0], 1.0);
        assert_eq!(c[1], 0.0);
        assert!((c[2] - C0).abs() < 1e-15);
    }
}
