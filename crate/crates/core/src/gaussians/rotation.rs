use crate::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

/// Unit quaternion `(w, x, y, z)` to a rotation matrix.
pub fn quat_to_rotmat(q: [f64; 4]) -> Result<Mat3> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::NotUnitQuaternion { norm });
    }
    Ok(rotmat_unchecked(q))
}

pub(crate) fn rotmat_unchecked([w, x, y, z]: [f64; 4]) -> Mat3 {
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Pulls `dL/dR` back to `dL/dq` through [`rotmat_unchecked`].
pub(crate) fn rotmat_vjp([w, x, y, z]: [f64; 4], g: &Mat3) -> [f64; 4] {
    let dw = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let dx = [[0.0, y, z], [y, -2.0 * x, -w], [z, w, -2.0 * x]];
    let dy = [[-2.0 * y, x, w], [x, 0.0, z], [-w, z, -2.0 * y]];
    let dz = [[-2.0 * z, -w, x], [w, -2.0 * z, y], [x, y, 0.0]];
    let contract = |d: &Mat3| {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += g[i][j] * d[i][j];
            }
        }
        2.0 * s
    };
    [contract(&dw), contract(&dx), contract(&dy), contract(&dz)]
}

/// `Σ = R · diag(s)² · Rᵀ`.
pub fn covariance3d(scale: [f64; 3], rot: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            m[i][k] = rot[i][k] * scale[k];
        }
    }
    mat_mul_transpose(&m, &m)
}

/// `A · Bᵀ`
pub(crate) fn mat_mul_transpose(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[j][k]).sum();
        }
    }
    out
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub(crate) fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub(crate) fn determinant(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}
