//! Small vector and planar-geometry helpers shared across the crate.
//!
//! World space is right-handed: +X right, +Y up, +Z into the scene, with
//! Y = 0 as the ground plane. Everything here is deliberately plain `f64`
//! arithmetic; the shapes involved are tiny (boxes, hulls of a few thousand
//! points) and explicit code keeps the conventions auditable.

use std::ops::{Add, Mul, Neg, Sub};

/// A 3D point or direction in world coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    #[inline]
    pub const fn zero() -> Self {
        Vec3::new(0.0, 0.0, 0.0)
    }

    #[inline]
    pub fn dot(self, rhs: Vec3) -> f64 {
        self.x * rhs.x + self.y * rhs.y + self.z * rhs.z
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Rotates `(x, z)` by `angle_rad` about the +Y axis, matching the action of
/// the 3D yaw rotation on the ground plane.
#[inline]
pub fn rotate_xz(x: f64, z: f64, angle_rad: f64) -> (f64, f64) {
    let (s, c) = angle_rad.sin_cos();
    (x * c + z * s, -x * s + z * c)
}

/// Twice the signed area of triangle `(a, b, c)` in the plane. Positive when
/// the turn a -> b -> c is counter-clockwise.
#[inline]
pub fn cross2(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Convex hull of a planar point set by Andrew's monotone chain.
///
/// Returns the hull vertices in counter-clockwise order with no repeated
/// endpoint. Nearly collinear points are dropped using a tolerance scaled by
/// the bounding-box diagonal, so the hull of a noisy edge does not sprout
/// micro-vertices. Degenerate inputs collapse gracefully: a single point
/// yields one vertex, a collinear set yields its two extremes.
pub fn convex_hull_2d(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }

    let (mut min_x, mut min_y, mut max_x, mut max_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &pts {
        min_x = min_x.min(p[0]);
        min_y = min_y.min(p[1]);
        max_x = max_x.max(p[0]);
        max_y = max_y.max(p[1]);
    }
    let diag = ((max_x - min_x).powi(2) + (max_y - min_y).powi(2)).sqrt();
    let eps = 1e-12 * diag.max(1.0);

    let half_hull = |iter: &mut dyn Iterator<Item = [f64; 2]>| {
        let mut chain: Vec<[f64; 2]> = Vec::new();
        for p in iter {
            while chain.len() >= 2 && cross2(chain[chain.len() - 2], chain[chain.len() - 1], p) <= eps {
                chain.pop();
            }
            chain.push(p);
        }
        chain
    };

    let lower = half_hull(&mut pts.iter().copied());
    let upper = half_hull(&mut pts.iter().rev().copied());

    let mut hull = lower;
    hull.pop();
    hull.extend(upper.iter().take(upper.len().saturating_sub(1)));
    if hull.len() < 2 {
        // All points collapsed onto one another within tolerance.
        hull = vec![pts[0], *pts.last().unwrap()];
        hull.dedup();
    }
    hull
}
