use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn normalize_heading(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Oriented box: center, `(width, length, height)` and heading about +z.
///
/// `width` spans the box-frame x axis, `length` the box-frame y axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f32; 3],
    pub size: [f32; 3],
    pub heading: f32,
}

impl Box3D {
    pub fn new(center: [f32; 3], size: [f32; 3], heading: f32) -> Result<Self> {
        if !center.iter().chain(&size).all(|v| v.is_finite()) || !heading.is_finite() {
            return Err(Error::NonFinite(format!("box {center:?} {size:?} {heading}")));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument(format!("box size must be positive, got {size:?}")));
        }
        Ok(Self { center, size, heading: normalize_heading(heading as f64) as f32 })
    }

    pub fn center_f64(&self) -> [f64; 3] {
        self.center.map(f64::from)
    }

    pub fn half_extents(&self) -> [f64; 3] {
        self.size.map(|s| s as f64 / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().map(|&s| s as f64).product()
    }

    /// World point → box frame (translation, then rotation by `-heading`).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = (self.heading as f64).sin_cos();
        let d = [
            p[0] - self.center[0] as f64,
            p[1] - self.center[1] as f64,
            p[2] - self.center[2] as f64,
        ];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Box frame → world.
    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = (self.heading as f64).sin_cos();
        [
            c * q[0] - s * q[1] + self.center[0] as f64,
            s * q[0] + c * q[1] + self.center[1] as f64,
            q[2] + self.center[2] as f64,
        ]
    }

    /// Boundary-inclusive membership.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        let h = self.half_extents();
        q[0].abs() <= h[0] && q[1].abs() <= h[1] && q[2].abs() <= h[2]
    }

    /// Same center and heading, each extent grown by `2 · margin`.
    pub fn enlarged(&self, margin: f64) -> Self {
        Self {
            size: self.size.map(|s| (s as f64 + 2.0 * margin) as f32),
            ..*self
        }
    }

    /// Same center and heading, each extent multiplied by `r`.
    pub fn scaled(&self, r: f64) -> Self {
        Self { size: self.size.map(|s| (s as f64 * r) as f32), ..*self }
    }

    /// Footprint corners in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let [hw, hl, _] = self.half_extents();
        [[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]].map(|[u, v]| {
            let p = self.to_world([u, v, 0.0]);
            [p[0], p[1]]
        })
    }

    /// Bottom and top z.
    pub fn z_range(&self) -> (f64, f64) {
        let c = self.center[2] as f64;
        let h = self.size[2] as f64 / 2.0;
        (c - h, c + h)
    }
}

/// Corners of the rotated cuboid, enumerated as
/// `(±w/2, ±l/2, ±h/2)` with x varying slowest, rotated then translated.
pub fn box_corners(b: &Box3D) -> [[f64; 3]; 8] {
    let [hw, hl, hh] = b.half_extents();
    let mut out = [[0.0; 3]; 8];
    let mut k = 0;
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                out[k] = b.to_world([sx * hw, sy * hl, sz * hh]);
                k += 1;
            }
        }
    }
    out
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    let (p, q) = (a.center_f64(), b.center_f64());
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heading_wraps_into_half_open_interval() {
        assert_eq!(normalize_heading(PI), PI);
        assert!((normalize_heading(-PI) - PI).abs() < 1e-12);
        assert!((normalize_heading(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((normalize_heading(7.0) - (7.0 - 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0).is_err());
        assert!(Box3D::new([f32::NAN, 0.0, 0.0], [1.0; 3], 0.0).is_err());
    }

    #[test]
    fn local_world_round_trip() {
        let b = Box3D::new([1.0, -2.0, 0.5], [2.0, 1.0, 1.5], 0.7).unwrap();
        let p = [3.0, 4.0, -1.0];
        let q = b.to_world(b.to_local(p));
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-12);
        }
    }
}
