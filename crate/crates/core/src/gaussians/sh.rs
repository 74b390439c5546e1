//! Real spherical harmonics up to degree 2, in the sign convention used by
//! 3DGS reference rasterizers.

use crate::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

pub const MAX_SH_DEGREE: u32 = 2;

pub fn coeff_count(degree: u32) -> usize {
    ((degree + 1) * (degree + 1)) as usize
}

/// Basis values at a unit direction; only the first `coeff_count(degree)`
/// entries are meaningful.
pub fn basis(dir: [f64; 3], degree: u32) -> [f64; 9] {
    let [x, y, z] = dir;
    let mut b = [0.0; 9];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (x * x - y * y);
    }
    b
}

/// `∂basis[i]/∂dir` as rows `[∂x, ∂y, ∂z]`.
pub(crate) fn basis_jacobian(dir: [f64; 3], degree: u32) -> [[f64; 3]; 9] {
    let [x, y, z] = dir;
    let mut j = [[0.0; 3]; 9];
    if degree >= 1 {
        j[1] = [0.0, -SH_C1, 0.0];
        j[2] = [0.0, 0.0, SH_C1];
        j[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        j[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        j[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        j[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        j[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        j[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    }
    j
}

/// Unclamped color: `0.5 + Σ basis_i · coeffs_i` per channel. `coeffs` is
/// `k × 3` row-major.
pub fn sh_to_rgb(coeffs: &[f64], dir: [f64; 3], degree: u32) -> Result<[f64; 3]> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::OutOfRange {
            what: "sh_degree",
            value: degree as f64,
            min: 0.0,
            max: MAX_SH_DEGREE as f64,
        });
    }
    let k = coeff_count(degree);
    if coeffs.len() != k * 3 {
        return Err(Error::ShCoefficientCount {
            expected: k,
            got: coeffs.len() / 3,
        });
    }
    Ok(eval(coeffs, dir, degree))
}

pub(crate) fn eval(coeffs: &[f64], dir: [f64; 3], degree: u32) -> [f64; 3] {
    let b = basis(dir, degree);
    let mut rgb = [0.5; 3];
    for (i, bi) in b.iter().take(coeff_count(degree)).enumerate() {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += bi * coeffs[i * 3 + c];
        }
    }
    rgb
}

/// DC coefficient that yields `rgb` after the 0.5 offset.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffeng::{finite_diff, max_relative_error, Tensor};

    #[test]
    fn degree_zero_is_constant_offset() {
        let c = [0.7, -0.2, 1.5];
        for dir in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]] {
            let rgb = sh_to_rgb(&c, dir, 0).unwrap();
            for ch in 0..3 {
                assert!((rgb[ch] - (0.5 + 0.2820948 * c[ch])).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn zero_coefficients_give_mid_gray() {
        let rgb = sh_to_rgb(&[0.0; 27], [0.6, 0.0, 0.8], 2).unwrap();
        assert_eq!(rgb, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn z_band_flips_with_view_direction() {
        let mut c = [0.0; 12];
        c[2 * 3] = 1.0;
        let up = sh_to_rgb(&c, [0.0, 0.0, 1.0], 1).unwrap()[0] - 0.5;
        let down = sh_to_rgb(&c, [0.0, 0.0, -1.0], 1).unwrap()[0] - 0.5;
        assert!((up - SH_C1).abs() < 1e-15);
        assert_eq!(up, -down);
    }

    #[test]
    fn coefficient_count_checked() {
        assert!(matches!(
            sh_to_rgb(&[0.0; 6], [0.0, 0.0, 1.0], 1),
            Err(Error::ShCoefficientCount { expected: 4, got: 2 })
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let dir = [0.3, -0.5, 0.81];
        let jac = basis_jacobian(dir, 2);
        for i in 0..9 {
            let numeric = finite_diff(
                |t| {
                    let d = t.data();
                    basis([d[0], d[1], d[2]], 2)[i]
                },
                &Tensor::from_vec(dir.to_vec()),
                1e-6,
            );
            if numeric.data().iter().all(|v| v.abs() < 1e-12) {
                assert!(jac[i].iter().all(|v| v.abs() < 1e-12));
            } else {
                assert!(max_relative_error(&jac[i], numeric.data()) < 1e-6, "basis {i}");
            }
        }
    }
}
