//! Point-cloud back-projection and minimal oriented-box fitting.
//!
//! Masked depth pixels become a 3D point cloud, and the cloud is wrapped in
//! the smallest gravity-aligned box: a minimum-area rectangle of the XZ
//! projection found with rotating calipers, extruded over the cloud's Y
//! range. Scenes are upright, so only yaw is searched; the optimal
//! rectangle has a side collinear with a convex-hull edge, which reduces
//! the search to one candidate angle per edge. A brute-force angle sweep is
//! kept alongside as an independent check.

use crate::camera::{CameraModel, EntityMask2D};
use crate::depth::DepthMap;
use crate::geom::{convex_hull_2d, rotate_xz, Vec3};
use crate::scene::EntitySpec;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum ObbError {
    /// The mask selected no finite-depth pixel.
    EmptySelection,
    DimsMismatch(String),
    BadFormat(String),
}

impl fmt::Display for ObbError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObbError::EmptySelection => write!(f, "mask selects no finite-depth pixels"),
            ObbError::DimsMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            ObbError::BadFormat(msg) => write!(f, "bad point cloud data: {msg}"),
        }
    }
}

impl std::error::Error for ObbError {}

/// Coordinate frame of a point cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFrame {
    /// World meters, from unprojecting depth samples.
    Metric,
    /// Raw (pixel-x, pixel-y, depth) triples, untransformed.
    Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub frame: PointFrame,
}

/// A gravity-aligned oriented box: yaw about +Y only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3D {
    pub center: Vec3,
    /// Half sizes along the box's local X, Y, and Z axes.
    pub half_extents: [f64; 3],
    /// Rotation about +Y, canonicalized to [0, 90) by rectangle symmetry.
    pub yaw_deg: f64,
}

impl OrientedBox3D {
    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents[0] * self.half_extents[1] * self.half_extents[2]
    }

    /// Whether `p` lies inside the box inflated by `slack` on every face.
    pub fn contains(&self, p: Vec3, slack: f64) -> bool {
        let d = p - self.center;
        let (lx, lz) = rotate_xz(d.x, d.z, -self.yaw_deg.to_radians());
        lx.abs() <= self.half_extents[0] + slack
            && d.y.abs() <= self.half_extents[1] + slack
            && lz.abs() <= self.half_extents[2] + slack
    }

    /// The box as a scene-plan entity: size `[2hx, 2hz, 2hy]`, position at
    /// the bottom-face center.
    pub fn to_entity_fragment(&self, name: &str) -> EntitySpec {
        EntitySpec {
            entity_name: name.to_string(),
            local_prompt: None,
            size: [
                2.0 * self.half_extents[0],
                2.0 * self.half_extents[2],
                2.0 * self.half_extents[1],
            ],
            position: [self.center.x, self.center.y - self.half_extents[1], self.center.z],
            yaw_deg: self.yaw_deg,
        }
    }
}

/// Lifts the masked finite-depth pixels of a depth map into a point cloud.
///
/// Metric mode unprojects each selected pixel at its center; pixel mode
/// keeps the raw (x, y, depth) triple. Pixels whose stored depth is not
/// finite are skipped; selecting none of the finite ones is
/// [`ObbError::EmptySelection`].
pub fn backproject_masked_depth(
    camera: &CameraModel,
    depth: &DepthMap,
    mask: &EntityMask2D,
    frame: PointFrame,
) -> Result<PointCloud, ObbError> {
    if depth.width() != mask.width() || depth.height() != mask.height() {
        return Err(ObbError::DimsMismatch(format!(
            "depth is {}x{}, mask is {}x{}",
            depth.width(),
            depth.height(),
            mask.width(),
            mask.height()
        )));
    }
    if depth.width() != camera.image_width || depth.height() != camera.image_height {
        return Err(ObbError::DimsMismatch(format!(
            "depth is {}x{}, camera renders {}x{}",
            depth.width(),
            depth.height(),
            camera.image_width,
            camera.image_height
        )));
    }
    let mut points = Vec::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if !mask.get(x, y) {
                continue;
            }
            let d = depth.get(x, y) as f64;
            if !d.is_finite() || d <= 0.0 {
                continue;
            }
            match frame {
                PointFrame::Metric => {
                    let p = camera
                        .unproject_pixel(x as f64 + 0.5, y as f64 + 0.5, d)
                        .expect("depth checked positive and finite");
                    points.push(p);
                }
                PointFrame::Pixel => points.push(Vec3::new(x as f64, y as f64, d)),
            }
        }
    }
    if points.is_empty() {
        return Err(ObbError::EmptySelection);
    }
    Ok(PointCloud { points, frame })
}

/// Counter-clockwise convex hull of the cloud's XZ projection.
pub fn convex_hull_xz(cloud: &PointCloud) -> Vec<[f64; 2]> {
    let xz: Vec<[f64; 2]> = cloud.points.iter().map(|p| [p.x, p.z]).collect();
    convex_hull_2d(&xz)
}

/// The axis-aligned rectangle of the points after undoing a yaw of
/// `yaw_deg`, as (min lx, max lx, min lz, max lz) in the local frame.
fn local_rect(points: &[[f64; 2]], yaw_deg: f64) -> (f64, f64, f64, f64) {
    let rad = yaw_deg.to_radians();
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_z, mut max_z) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        let (lx, lz) = rotate_xz(p[0], p[1], -rad);
        min_x = min_x.min(lx);
        max_x = max_x.max(lx);
        min_z = min_z.min(lz);
        max_z = max_z.max(lz);
    }
    (min_x, max_x, min_z, max_z)
}

fn box_from_angle(cloud: &PointCloud, xz: &[[f64; 2]], yaw_deg: f64) -> OrientedBox3D {
    let (min_x, max_x, min_z, max_z) = local_rect(xz, yaw_deg);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &cloud.points {
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let rad = yaw_deg.to_radians();
    let (cx, cz) = rotate_xz((min_x + max_x) / 2.0, (min_z + max_z) / 2.0, rad);
    OrientedBox3D {
        center: Vec3::new(cx, (min_y + max_y) / 2.0, cz),
        half_extents: [
            (max_x - min_x) / 2.0,
            (max_y - min_y) / 2.0,
            (max_z - min_z) / 2.0,
        ],
        yaw_deg,
    }
}

/// Fits the smallest gravity-aligned box around the cloud.
///
/// Degenerate clouds (collinear, coplanar, single point) produce boxes with
/// zero extents along the flat directions.
pub fn fit_min_volume_obb(cloud: &PointCloud) -> OrientedBox3D {
    if cloud.points.is_empty() {
        return OrientedBox3D {
            center: Vec3::zero(),
            half_extents: [0.0; 3],
            yaw_deg: 0.0,
        };
    }
    let hull = convex_hull_xz(cloud);
    let mut candidates = vec![0.0f64];
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let (dx, dz) = (b[0] - a[0], b[1] - a[1]);
        if dx == 0.0 && dz == 0.0 {
            continue;
        }
        let mut deg = (-dz).atan2(dx).to_degrees().rem_euclid(90.0);
        if deg >= 90.0 {
            deg = 0.0;
        }
        candidates.push(deg);
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut best_yaw = 0.0;
    let mut best_area = f64::INFINITY;
    for &deg in &candidates {
        let (min_x, max_x, min_z, max_z) = local_rect(&hull, deg);
        let area = (max_x - min_x) * (max_z - min_z);
        if area < best_area {
            best_area = area;
            best_yaw = deg;
        }
    }
    box_from_angle(cloud, &hull, best_yaw)
}

/// Independent check for the calipers fit: sweeps yaw over [0, 90) in
/// `step_deg` increments and keeps the smallest volume, breaking ties
/// toward the smaller angle.
pub fn brute_force_obb_oracle(cloud: &PointCloud, step_deg: f64) -> OrientedBox3D {
    assert!(
        step_deg > 0.0 && step_deg <= 5.0,
        "step must be in (0, 5] degrees, got {step_deg}"
    );
    if cloud.points.is_empty() {
        return OrientedBox3D {
            center: Vec3::zero(),
            half_extents: [0.0; 3],
            yaw_deg: 0.0,
        };
    }
    let xz: Vec<[f64; 2]> = cloud.points.iter().map(|p| [p.x, p.z]).collect();
    let mut best: Option<OrientedBox3D> = None;
    let mut k = 0u32;
    loop {
        let deg = step_deg * k as f64;
        if deg >= 90.0 {
            break;
        }
        let candidate = box_from_angle(cloud, &xz, deg);
        let replace = match &best {
            None => true,
            Some(b) => candidate.volume() < b.volume(),
        };
        if replace {
            best = Some(candidate);
        }
        k += 1;
    }
    best.expect("at least the 0 degree angle is swept")
}

/// Writes the cloud as XYZ text, one `x y z` line per point.
pub fn write_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in &cloud.points {
        out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    out
}

/// Parses XYZ text. Blank lines are skipped; coordinates must be finite.
pub fn read_xyz(text: &str, frame: PointFrame) -> Result<PointCloud, ObbError> {
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(ObbError::BadFormat(format!(
                "line {}: expected 3 fields, got {}",
                idx + 1,
                fields.len()
            )));
        }
        let mut coords = [0.0f64; 3];
        for (c, field) in coords.iter_mut().zip(&fields) {
            *c = field
                .parse()
                .map_err(|_| ObbError::BadFormat(format!("line {}: bad number `{field}`", idx + 1)))?;
            if !c.is_finite() {
                return Err(ObbError::BadFormat(format!(
                    "line {}: non-finite coordinate",
                    idx + 1
                )));
            }
        }
        points.push(Vec3::new(coords[0], coords[1], coords[2]));
    }
    Ok(PointCloud { points, frame })
}

/// Writes the cloud as raw little-endian float32 triples.
pub fn write_xyz_raw(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.points.len() * 12);
    for p in &cloud.points {
        for c in [p.x, p.y, p.z] {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    out
}

/// Parses raw little-endian float32 triples.
pub fn read_xyz_raw(data: &[u8], frame: PointFrame) -> Result<PointCloud, ObbError> {
    if data.len() % 12 != 0 {
        return Err(ObbError::BadFormat(format!(
            "raw cloud length {} is not a multiple of 12",
            data.len()
        )));
    }
    let mut points = Vec::with_capacity(data.len() / 12);
    for chunk in data.chunks_exact(12) {
        let mut coords = [0.0f64; 3];
        for (i, c) in coords.iter_mut().enumerate() {
            let v = f32::from_le_bytes(chunk[i * 4..i * 4 + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(ObbError::BadFormat("non-finite coordinate".to_string()));
            }
            *c = v as f64;
        }
        points.push(Vec3::new(coords[0], coords[1], coords[2]));
    }
    Ok(PointCloud { points, frame })
}
