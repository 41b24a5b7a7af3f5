//! Pitched pinhole camera, point projection, and per-entity box masks.
//!
//! The camera is fully determined by the scene parameters plus the output
//! resolution. It sits at `(0, D tan(pitch), -D)` with `D = 1.2 *
//! scene_size`, looks through the world origin, and has a default vertical
//! field of view of 55 degrees. Screen coordinates put `u = 0` at the left,
//! `v = 0` at the top, and the optical axis at the image center, so the
//! world origin always lands on `(W/2, H/2)`.
//!
//! Depth here and everywhere else in the crate is distance along the
//! camera's forward axis, not Euclidean distance to the camera.

use crate::geom::{convex_hull_2d, rotate_xz, Vec3};
use crate::scene::{EntitySpec, SceneParameters};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Camera distance is this factor times `scene_size`.
pub const DEFAULT_DISTANCE_FACTOR: f64 = 1.2;
/// Default vertical field of view in degrees.
pub const DEFAULT_VFOV_DEG: f64 = 55.0;
/// Near clipping plane in meters; geometry closer than this is cut away
/// before projection.
pub const NEAR_PLANE: f64 = 0.05;

/// Tunable camera parameters; the defaults reproduce the standard setup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraConfig {
    pub distance_factor: f64,
    pub vfov_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            distance_factor: DEFAULT_DISTANCE_FACTOR,
            vfov_deg: DEFAULT_VFOV_DEG,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CameraError {
    /// Rejected configuration: out-of-range field of view, tiny image,
    /// non-positive distances, or a pitch outside [0, 89] degrees.
    InvalidConfig(String),
    /// The point sits at or behind the near plane and cannot be rasterized.
    BehindCamera,
    /// Unprojection requires a strictly positive depth.
    NonPositiveDepth(f64),
}

impl fmt::Display for CameraError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CameraError::InvalidConfig(msg) => write!(f, "invalid camera configuration: {msg}"),
            CameraError::BehindCamera => write!(f, "point is behind the camera"),
            CameraError::NonPositiveDepth(d) => {
                write!(f, "cannot unproject at non-positive depth {d}")
            }
        }
    }
}

impl std::error::Error for CameraError {}

/// A derived pinhole camera. Construct with [`derive_camera`] or
/// [`CameraModel::derive`]; the basis vectors are cached so projection is a
/// couple of dot products.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub position: Vec3,
    pub pitch_deg: f64,
    pub vfov_deg: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Focal length in pixels: `(H/2) / tan(vfov/2)`.
    pub focal_px: f64,
    right: Vec3,
    down: Vec3,
    forward: Vec3,
}

/// A projected point: pixel coordinates plus depth along the forward axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraModel {
    /// Derives the camera for a scene at the given output resolution.
    pub fn derive(
        params: &SceneParameters,
        image_width: u32,
        image_height: u32,
        config: &CameraConfig,
    ) -> Result<CameraModel, CameraError> {
        if !(config.vfov_deg > 10.0 && config.vfov_deg < 120.0) {
            return Err(CameraError::InvalidConfig(format!(
                "vertical field of view must lie in (10, 120) degrees, got {}",
                config.vfov_deg
            )));
        }
        if image_width < 16 || image_height < 16 {
            return Err(CameraError::InvalidConfig(format!(
                "image dimensions must be at least 16, got {image_width}x{image_height}"
            )));
        }
        if !(config.distance_factor > 0.0 && config.distance_factor.is_finite()) {
            return Err(CameraError::InvalidConfig(format!(
                "distance factor must be positive, got {}",
                config.distance_factor
            )));
        }
        if !(params.scene_size > 0.0 && params.scene_size.is_finite()) {
            return Err(CameraError::InvalidConfig(format!(
                "scene_size must be positive, got {}",
                params.scene_size
            )));
        }
        let pitch = params.camera_pitch_deg;
        if !(0.0..=89.0).contains(&pitch) || !pitch.is_finite() {
            return Err(CameraError::InvalidConfig(format!(
                "camera pitch must lie in [0, 89] degrees, got {pitch}"
            )));
        }

        let theta = pitch.to_radians();
        let distance = config.distance_factor * params.scene_size;
        let position = Vec3::new(0.0, distance * theta.tan(), -distance);
        let (sin_t, cos_t) = theta.sin_cos();
        let focal_px = (image_height as f64 / 2.0) / (config.vfov_deg.to_radians() / 2.0).tan();

        Ok(CameraModel {
            position,
            pitch_deg: pitch,
            vfov_deg: config.vfov_deg,
            image_width,
            image_height,
            focal_px,
            right: Vec3::new(1.0, 0.0, 0.0),
            down: Vec3::new(0.0, -cos_t, -sin_t),
            forward: Vec3::new(0.0, -sin_t, cos_t),
        })
    }

    /// The orthonormal view basis `(right, down, forward)` in world space.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        (self.right, self.down, self.forward)
    }

    /// World point expressed in camera coordinates `(x right, y down,
    /// z forward)`.
    #[inline]
    pub fn camera_space(&self, p: Vec3) -> Vec3 {
        let d = p - self.position;
        Vec3::new(self.right.dot(d), self.down.dot(d), self.forward.dot(d))
    }

    /// Projects a camera-space point onto the image plane; the caller must
    /// ensure `c.z > 0`.
    #[inline]
    pub fn pixel_from_camera_space(&self, c: Vec3) -> (f64, f64) {
        let u = self.image_width as f64 / 2.0 + self.focal_px * c.x / c.z;
        let v = self.image_height as f64 / 2.0 + self.focal_px * c.y / c.z;
        (u, v)
    }

    /// Projects a world point to pixel coordinates and forward depth.
    /// Points at or behind the near plane are rejected.
    pub fn project_point(&self, p: Vec3) -> Result<ProjectedPoint, CameraError> {
        let c = self.camera_space(p);
        if c.z <= NEAR_PLANE {
            return Err(CameraError::BehindCamera);
        }
        let (u, v) = self.pixel_from_camera_space(c);
        Ok(ProjectedPoint { u, v, depth: c.z })
    }

    /// Inverse of [`project_point`](Self::project_point): recovers the world
    /// point at pixel `(u, v)` and forward depth `depth`.
    pub fn unproject_pixel(&self, u: f64, v: f64, depth: f64) -> Result<Vec3, CameraError> {
        if !(depth > 0.0) {
            return Err(CameraError::NonPositiveDepth(depth));
        }
        let x = (u - self.image_width as f64 / 2.0) * depth / self.focal_px;
        let y = (v - self.image_height as f64 / 2.0) * depth / self.focal_px;
        Ok(self.position + self.right * x + self.down * y + self.forward * depth)
    }
}

/// Derives the standard camera for a scene; shorthand for
/// [`CameraModel::derive`] with the default configuration.
pub fn derive_camera(
    params: &SceneParameters,
    image_width: u32,
    image_height: u32,
) -> Result<CameraModel, CameraError> {
    CameraModel::derive(params, image_width, image_height, &CameraConfig::default())
}

/// A yaw-rotated box in world space, anchored at its bottom-center point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub bottom_center: Vec3,
    /// `[length_x, width_z, height_y]` before yaw is applied.
    pub extents: [f64; 3],
    pub yaw_deg: f64,
}

impl Box3D {
    pub fn from_entity(e: &EntitySpec) -> Box3D {
        Box3D {
            bottom_center: Vec3::new(e.position[0], e.position[1], e.position[2]),
            extents: e.size,
            yaw_deg: e.yaw_deg,
        }
    }

    pub fn center(&self) -> Vec3 {
        self.bottom_center + Vec3::new(0.0, self.extents[2] / 2.0, 0.0)
    }

    /// The eight corners; index bit 0 selects +X, bit 1 selects the top
    /// face, bit 2 selects +Z, all in the box's local frame before yaw.
    pub fn corners(&self) -> [Vec3; 8] {
        let yaw = self.yaw_deg.to_radians();
        let hx = self.extents[0] / 2.0;
        let hz = self.extents[1] / 2.0;
        let height = self.extents[2];
        let mut out = [Vec3::zero(); 8];
        for (i, slot) in out.iter_mut().enumerate() {
            let lx = if i & 1 != 0 { hx } else { -hx };
            let ly = if i & 2 != 0 { height } else { 0.0 };
            let lz = if i & 4 != 0 { hz } else { -hz };
            let (wx, wz) = rotate_xz(lx, lz, yaw);
            *slot = self.bottom_center + Vec3::new(wx, ly, wz);
        }
        out
    }
}

/// Corner index pairs for the twelve box edges.
pub(crate) const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (0, 2),
    (0, 4),
    (1, 3),
    (1, 5),
    (2, 3),
    (2, 6),
    (3, 7),
    (4, 5),
    (4, 6),
    (5, 7),
    (6, 7),
];

/// A binary per-pixel occupancy mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityMask2D {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

/// Run-length form of a mask for JSON export. Runs alternate starting with
/// zeros, so a mask whose first pixel is set begins with a zero-length run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRle {
    pub width: u32,
    pub height: u32,
    pub rle: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskFormatError {
    BadMagic,
    BadHeader(String),
    Truncated,
    /// Run lengths do not sum to `width * height`.
    BadRunLength { expected: usize, got: usize },
}

impl fmt::Display for MaskFormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskFormatError::BadMagic => write!(f, "not a P4 bitmap"),
            MaskFormatError::BadHeader(msg) => write!(f, "bad bitmap header: {msg}"),
            MaskFormatError::Truncated => write!(f, "bitmap data is truncated"),
            MaskFormatError::BadRunLength { expected, got } => {
                write!(f, "run lengths sum to {got}, expected {expected}")
            }
        }
    }
}

impl std::error::Error for MaskFormatError {}

impl EntityMask2D {
    pub fn new(width: u32, height: u32) -> EntityMask2D {
        EntityMask2D {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    /// Row-major pixel values.
    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| !b)
    }

    /// Mean pixel-center position `(u, v)` of the set pixels, or `None` for
    /// an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut su, mut sv) = (0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    n += 1;
                    su += x as f64 + 0.5;
                    sv += y as f64 + 0.5;
                }
            }
        }
        (n > 0).then(|| (su / n as f64, sv / n as f64))
    }

    /// Encodes as a binary PBM (P4) image, rows padded to whole bytes.
    pub fn to_pbm(&self) -> Vec<u8> {
        let mut out = format!("P4\n{} {}\n", self.width, self.height).into_bytes();
        let row_bytes = (self.width as usize + 7) / 8;
        for y in 0..self.height {
            let mut row = vec![0u8; row_bytes];
            for x in 0..self.width {
                if self.get(x, y) {
                    row[x as usize / 8] |= 0x80 >> (x % 8);
                }
            }
            out.extend_from_slice(&row);
        }
        out
    }

    pub fn from_pbm(data: &[u8]) -> Result<EntityMask2D, MaskFormatError> {
        let (magic, mut pos) = next_header_token(data, 0).ok_or(MaskFormatError::BadMagic)?;
        if magic != b"P4" {
            return Err(MaskFormatError::BadMagic);
        }
        let mut dims = [0u32; 2];
        for slot in dims.iter_mut() {
            let (tok, next) = next_header_token(data, pos)
                .ok_or_else(|| MaskFormatError::BadHeader("missing dimensions".to_string()))?;
            let text = std::str::from_utf8(tok)
                .map_err(|_| MaskFormatError::BadHeader("non-ascii dimension".to_string()))?;
            *slot = text
                .parse::<u32>()
                .map_err(|_| MaskFormatError::BadHeader(format!("bad dimension `{text}`")))?;
            pos = next;
        }
        // A single whitespace byte separates the header from the raster.
        let mut mask = EntityMask2D::new(dims[0], dims[1]);
        let row_bytes = (dims[0] as usize + 7) / 8;
        if data.len() < pos + row_bytes * dims[1] as usize {
            return Err(MaskFormatError::Truncated);
        }
        for y in 0..dims[1] {
            let row = &data[pos + y as usize * row_bytes..];
            for x in 0..dims[0] {
                let bit = row[x as usize / 8] & (0x80 >> (x % 8)) != 0;
                mask.set(x, y, bit);
            }
        }
        Ok(mask)
    }

    pub fn to_rle(&self) -> MaskRle {
        let mut runs = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &bit in &self.bits {
            if bit == current {
                run += 1;
            } else {
                runs.push(run);
                current = bit;
                run = 1;
            }
        }
        runs.push(run);
        if self.bits.is_empty() {
            runs.clear();
        }
        MaskRle {
            width: self.width,
            height: self.height,
            rle: runs,
        }
    }

    pub fn from_rle(rle: &MaskRle) -> Result<EntityMask2D, MaskFormatError> {
        let expected = rle.width as usize * rle.height as usize;
        let total: usize = rle.rle.iter().map(|&r| r as usize).sum();
        if total != expected {
            return Err(MaskFormatError::BadRunLength {
                expected,
                got: total,
            });
        }
        let mut mask = EntityMask2D::new(rle.width, rle.height);
        let mut idx = 0usize;
        let mut value = false;
        for &run in &rle.rle {
            if value {
                for i in idx..idx + run as usize {
                    mask.bits[i] = true;
                }
            }
            idx += run as usize;
            value = !value;
        }
        Ok(mask)
    }
}

/// Skips whitespace and `#` comments, returning the next header token and
/// the position just past its trailing whitespace byte.
fn next_header_token(data: &[u8], mut pos: usize) -> Option<(&[u8], usize)> {
    loop {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        break;
    }
    if pos >= data.len() {
        return None;
    }
    let start = pos;
    while pos < data.len() && !data[pos].is_ascii_whitespace() {
        pos += 1;
    }
    let token = &data[start..pos];
    if pos < data.len() {
        pos += 1;
    }
    Some((token, pos))
}

/// Result of projecting a box onto the image.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxMaskProjection {
    pub mask: EntityMask2D,
    /// True when every corner lies behind the near plane; the mask is then
    /// empty by construction.
    pub fully_behind: bool,
}

/// Projects a box to a filled 2D occupancy mask.
///
/// The twelve box edges are clipped against the near plane, the surviving
/// endpoints are projected, and the convex hull of the projected points is
/// filled with the pixel-center rule: pixel `(x, y)` is set when its center
/// `(x + 0.5, y + 0.5)` falls inside the hull, boundary included. When the
/// hull covers no pixel center but a corner still projects inside the image,
/// that corner's pixel is set, so any box with a visible corner gets a
/// non-empty mask.
pub fn project_box_mask(camera: &CameraModel, bx: &Box3D) -> BoxMaskProjection {
    let corners = bx.corners();
    let cam: Vec<Vec3> = corners.iter().map(|&c| camera.camera_space(c)).collect();

    if cam.iter().all(|c| c.z < NEAR_PLANE) {
        return BoxMaskProjection {
            mask: EntityMask2D::new(camera.image_width, camera.image_height),
            fully_behind: true,
        };
    }

    let mut points: Vec<[f64; 2]> = Vec::with_capacity(24);
    let mut push_projected = |c: Vec3| {
        let (u, v) = camera.pixel_from_camera_space(c);
        points.push([u, v]);
    };
    for &(a, b) in &BOX_EDGES {
        let (pa, pb) = (cam[a], cam[b]);
        let (fa, fb) = (pa.z >= NEAR_PLANE, pb.z >= NEAR_PLANE);
        match (fa, fb) {
            (true, true) => {
                push_projected(pa);
                push_projected(pb);
            }
            (false, false) => {}
            _ => {
                let t = (NEAR_PLANE - pa.z) / (pb.z - pa.z);
                let cut = pa + (pb - pa) * t;
                push_projected(if fa { pa } else { pb });
                push_projected(cut);
            }
        }
    }

    let mut mask = EntityMask2D::new(camera.image_width, camera.image_height);
    let hull = convex_hull_2d(&points);
    if hull.len() >= 3 {
        fill_convex_polygon(&mut mask, &hull);
    }

    if mask.is_empty() {
        for c in &cam {
            if c.z >= NEAR_PLANE {
                let (u, v) = camera.pixel_from_camera_space(*c);
                if u >= 0.0 && u < camera.image_width as f64 && v >= 0.0 && v < camera.image_height as f64 {
                    mask.set(u as u32, v as u32, true);
                }
            }
        }
    }

    BoxMaskProjection {
        mask,
        fully_behind: false,
    }
}

/// Sets every pixel whose center lies inside the convex polygon (boundary
/// included), by intersecting each pixel row's center line with the edges.
fn fill_convex_polygon(mask: &mut EntityMask2D, poly: &[[f64; 2]]) {
    let height = mask.height;
    let width = mask.width;
    let (mut y_min, mut y_max) = (f64::MAX, f64::MIN);
    for p in poly {
        y_min = y_min.min(p[1]);
        y_max = y_max.max(p[1]);
    }
    let row_lo = ((y_min - 0.5).ceil().max(0.0)) as i64;
    let row_hi = ((y_max - 0.5).floor().min(height as f64 - 1.0)) as i64;

    for y in row_lo..=row_hi {
        let yc = y as f64 + 0.5;
        let (mut x_lo, mut x_hi) = (f64::MAX, f64::MIN);
        for i in 0..poly.len() {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            if (a[1] - yc) * (b[1] - yc) > 0.0 {
                continue;
            }
            if a[1] == b[1] {
                if a[1] == yc {
                    x_lo = x_lo.min(a[0].min(b[0]));
                    x_hi = x_hi.max(a[0].max(b[0]));
                }
                continue;
            }
            let t = (yc - a[1]) / (b[1] - a[1]);
            if !(0.0..=1.0).contains(&t) {
                continue;
            }
            let x = a[0] + t * (b[0] - a[0]);
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
        }
        if x_lo > x_hi {
            continue;
        }
        let col_lo = ((x_lo - 0.5).ceil().max(0.0)) as i64;
        let col_hi = ((x_hi - 0.5).floor().min(width as f64 - 1.0)) as i64;
        for x in col_lo..=col_hi {
            mask.set(x as u32, y as u32, true);
        }
    }
}
