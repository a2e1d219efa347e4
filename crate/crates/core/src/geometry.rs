//! Points, oriented boxes, detections and frames.
//!
//! Boxes are gravity-aligned with seven degrees of freedom: a center, three
//! extents and a yaw about the vertical axis. Every type here is a plain value.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn sub(&self, other: &Point3) -> Point3 {
        Point3::new(self.x - other.x, self.y - other.y, self.z - other.z)
    }

    pub fn add(&self, other: &Point3) -> Point3 {
        Point3::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let d = self.sub(other);
        (d.x * d.x + d.y * d.y + d.z * d.z).sqrt()
    }

    /// Rotates about the z axis by `angle` radians (counter-clockwise).
    pub fn rotate_z(&self, angle: f64) -> Point3 {
        let (s, c) = angle.sin_cos();
        Point3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

/// One sensor sweep. Point order carries no meaning.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame_index: u64,
}

impl PointCloud {
    pub fn new(frame_index: u64, points: Vec<Point3>) -> Self {
        Self { points, frame_index }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3 {
    pub center: Point3,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Rotation about +z, in `[-pi, pi)`.
    pub yaw: f64,
}

impl OrientedBox3 {
    /// Builds a box, rejecting non-positive extents and normalizing the yaw.
    pub fn new(center: Point3, length: f64, width: f64, height: f64, yaw: f64) -> Result<Self> {
        if !center.is_finite() {
            return Err(Error::InvalidArgument("box center must be finite".into()));
        }
        for (name, v) in [("length", length), ("width", width), ("height", height)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "box {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Self {
            center,
            length,
            width,
            height,
            yaw: yaw_normalize(yaw)?,
        })
    }

    /// Maps a world point into the box frame: translate by `-center`, then
    /// rotate by `-yaw`.
    pub fn to_local(&self, p: &Point3) -> Point3 {
        p.sub(&self.center).rotate_z(-self.yaw)
    }

    pub fn to_world(&self, local: &Point3) -> Point3 {
        local.rotate_z(self.yaw).add(&self.center)
    }

    pub fn contains(&self, p: &Point3) -> bool {
        box_contains(self, p)
    }

    pub fn diagonal(&self) -> f64 {
        (self.length * self.length + self.width * self.width + self.height * self.height).sqrt()
    }
}

/// Closed containment test: points on a face are inside.
pub fn box_contains(b: &OrientedBox3, p: &Point3) -> bool {
    let local = b.to_local(p);
    local.x.abs() <= b.length / 2.0 && local.y.abs() <= b.width / 2.0 && local.z.abs() <= b.height / 2.0
}

/// Wraps an angle into `[-pi, pi)`.
pub fn yaw_normalize(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::InvalidArgument(format!("yaw must be finite, got {theta}")));
    }
    if (-PI..PI).contains(&theta) {
        return Ok(theta);
    }
    let mut r = (theta + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly TAU
    if r >= PI {
        r -= TAU;
    }
    if r < -PI {
        r = -PI;
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox3,
    pub confidence: f64,
    /// Ground-truth identity; only present in labeled data.
    pub gt_id: Option<u64>,
}

impl Detection {
    pub fn new(bbox: OrientedBox3, confidence: f64, gt_id: Option<u64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidArgument(format!(
                "confidence must lie in [0, 1], got {confidence}"
            )));
        }
        Ok(Self {
            bbox,
            confidence,
            gt_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub index: u64,
    pub cloud: PointCloud,
    pub detections: Vec<Detection>,
}
