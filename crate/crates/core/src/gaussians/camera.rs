use serde::{Deserialize, Serialize};

use super::rotation::{determinant, Mat3};
use crate::{Error, Result};

/// Pinhole camera in the OpenCV convention (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 4×4 rigid transform.
    pub world_to_cam: [f64; 16],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fx", self.fx), ("fy", self.fy)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("width/height", "image extent must be non-zero"));
        }
        if self.world_to_cam.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("world_to_cam", "non-finite entry"));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::invalid("world_to_cam", "rotation block is not orthonormal"));
                }
            }
        }
        if (determinant(&r) - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("world_to_cam", "rotation block has determinant != +1"));
        }
        let m = &self.world_to_cam;
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::invalid("world_to_cam", "last row must be [0, 0, 0, 1]"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3 {
        let m = &self.world_to_cam;
        [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]
    }

    pub fn translation(&self) -> [f64; 3] {
        let m = &self.world_to_cam;
        [m[3], m[7], m[11]]
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        std::array::from_fn(|j| -(0..3).map(|i| r[i][j] * t[i]).sum::<f64>())
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        std::array::from_fn(|i| (0..3).map(|k| r[i][k] * p[k]).sum::<f64>() + t[i])
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        (fx, fy): (f64, f64),
        (width, height): (u32, u32),
    ) -> Result<Self> {
        let forward = normalize(sub(target, eye)).ok_or_else(|| Error::invalid("look_at", "eye equals target"))?;
        // Image y points down, so "down" in the image is -up.
        let right = normalize(cross(forward, up)).ok_or_else(|| Error::invalid("look_at", "up is parallel to view"))?;
        let down = cross(forward, right);
        let rows = [right, down, forward];
        let mut m = [0.0; 16];
        for (i, row) in rows.iter().enumerate() {
            m[i * 4..i * 4 + 3].copy_from_slice(row);
            m[i * 4 + 3] = -dot(*row, eye);
        }
        m[15] = 1.0;
        let cam = Self {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_cam: m,
        };
        cam.validate()?;
        Ok(cam)
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(a, a).sqrt();
    (n > 1e-12).then(|| a.map(|v| v / n))
}
