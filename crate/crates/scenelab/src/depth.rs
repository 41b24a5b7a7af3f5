//! Depth rendering and depth-file encoding.
//!
//! [`render_depth`] rasterizes the scene's boxes into a per-pixel depth map:
//! each box contributes its six faces, split into triangles, clipped against
//! the near plane, and scan-converted with perspective-correct interpolation
//! (1/z is affine in screen space, so planar faces come out exact). A
//! z-buffer keeps the minimum depth per pixel, which makes the result both
//! order-independent and automatically limited to visible surfaces.
//! Background pixels keep the +infinity sentinel.
//!
//! [`encode_depth`] produces two artifacts: a lossless raw file ("DPF1"
//! magic, little-endian header, row-major 32-bit floats with the sentinel
//! stored as `far`), and a 16-bit PGM preview where nearer is brighter.

use crate::camera::{Box3D, CameraModel, NEAR_PLANE};
use crate::geom::Vec3;
use crate::scene::SceneParameters;
use std::fmt;

/// Row-major depth values in meters; `+inf` marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32) -> DepthMap {
        DepthMap {
            width,
            height,
            values: vec![f32::INFINITY; width as usize * height as usize],
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
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: f32) {
        self.values[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DepthError {
    /// `near`/`far` must satisfy `0 < near < far` and be finite.
    InvalidRange { near: f32, far: f32 },
    BadMagic,
    BadHeader(String),
    Truncated,
}

impl fmt::Display for DepthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DepthError::InvalidRange { near, far } => {
                write!(f, "invalid depth range: near {near}, far {far}")
            }
            DepthError::BadMagic => write!(f, "not a DPF1 depth file"),
            DepthError::BadHeader(msg) => write!(f, "bad depth header: {msg}"),
            DepthError::Truncated => write!(f, "depth data is truncated"),
        }
    }
}

impl std::error::Error for DepthError {}

/// Quad corner indices for the six box faces, ordered around each face.
/// Corner indexing matches [`Box3D::corners`].
const BOX_FACES: [[usize; 4]; 6] = [
    [0, 1, 3, 2], // -Z
    [4, 5, 7, 6], // +Z
    [0, 2, 6, 4], // -X
    [1, 3, 7, 5], // +X
    [0, 1, 5, 4], // bottom
    [2, 3, 7, 6], // top
];

/// Renders the minimum-depth surface of the boxes as seen by the camera.
pub fn render_depth(camera: &CameraModel, boxes: &[Box3D]) -> DepthMap {
    let mut depth = DepthMap::new(camera.image_width, camera.image_height);
    for bx in boxes {
        let corners = bx.corners();
        let cam: Vec<Vec3> = corners.iter().map(|&c| camera.camera_space(c)).collect();
        for face in &BOX_FACES {
            let quad = [cam[face[0]], cam[face[1]], cam[face[2]], cam[face[3]]];
            for tri in [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]] {
                for clipped in clip_triangle_near(&tri) {
                    raster_triangle(&mut depth, camera, &clipped);
                }
            }
        }
    }
    depth
}

/// Clips a camera-space triangle against `z >= NEAR_PLANE` and returns the
/// result re-triangulated as a fan (zero, one, or two triangles).
fn clip_triangle_near(tri: &[Vec3; 3]) -> Vec<[Vec3; 3]> {
    let mut poly: Vec<Vec3> = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let (fa, fb) = (a.z >= NEAR_PLANE, b.z >= NEAR_PLANE);
        if fa {
            poly.push(a);
        }
        if fa != fb {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            poly.push(a + (b - a) * t);
        }
    }
    let mut out = Vec::with_capacity(2);
    for i in 1..poly.len().saturating_sub(1) {
        out.push([poly[0], poly[i], poly[i + 1]]);
    }
    out
}

fn raster_triangle(depth: &mut DepthMap, camera: &CameraModel, tri: &[Vec3; 3]) {
    let p: Vec<[f64; 2]> = tri
        .iter()
        .map(|&c| {
            let (u, v) = camera.pixel_from_camera_space(c);
            [u, v]
        })
        .collect();
    let area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
    if area.abs() < 1e-12 {
        return;
    }
    let inv_z = [1.0 / tri[0].z, 1.0 / tri[1].z, 1.0 / tri[2].z];

    let (w, h) = (depth.width as i64, depth.height as i64);
    let min_u = p.iter().map(|q| q[0]).fold(f64::MAX, f64::min);
    let max_u = p.iter().map(|q| q[0]).fold(f64::MIN, f64::max);
    let min_v = p.iter().map(|q| q[1]).fold(f64::MAX, f64::min);
    let max_v = p.iter().map(|q| q[1]).fold(f64::MIN, f64::max);
    let x_lo = ((min_u - 0.5).floor() as i64).max(0);
    let x_hi = ((max_u - 0.5).ceil() as i64).min(w - 1);
    let y_lo = ((min_v - 0.5).floor() as i64).max(0);
    let y_hi = ((max_v - 0.5).ceil() as i64).min(h - 1);

    for y in y_lo..=y_hi {
        let vc = y as f64 + 0.5;
        for x in x_lo..=x_hi {
            let uc = x as f64 + 0.5;
            let e0 = (p[2][0] - p[1][0]) * (vc - p[1][1]) - (p[2][1] - p[1][1]) * (uc - p[1][0]);
            let e1 = (p[0][0] - p[2][0]) * (vc - p[2][1]) - (p[0][1] - p[2][1]) * (uc - p[2][0]);
            let e2 = (p[1][0] - p[0][0]) * (vc - p[0][1]) - (p[1][1] - p[0][1]) * (uc - p[0][0]);
            let inside = if area > 0.0 {
                e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0
            } else {
                e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0
            };
            if !inside {
                continue;
            }
            let iz = (e0 * inv_z[0] + e1 * inv_z[1] + e2 * inv_z[2]) / area;
            if iz <= 0.0 {
                continue;
            }
            let d = (1.0 / iz) as f32;
            let (xu, yu) = (x as u32, y as u32);
            if d < depth.get(xu, yu) {
                depth.set(xu, yu, d);
            }
        }
    }
}

/// Deterministic preview depth range for a scene: near is a tenth of the
/// scene size, far is the camera-to-origin distance plus the scene size.
pub fn default_depth_range(params: &SceneParameters, camera: &CameraModel) -> (f32, f32) {
    let near = 0.1 * params.scene_size;
    let far = camera.position.norm() + params.scene_size;
    (near as f32, far as f32)
}

/// The two encoded artifacts: lossless raw bytes and a PGM preview.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthEncoding {
    pub raw: Vec<u8>,
    pub preview: Vec<u8>,
}

/// Encodes a depth map into the raw DPF1 format and a 16-bit PGM preview.
///
/// The raw file stores every finite value bit-exactly; the background
/// sentinel is stored as `far` so the file contains no infinities. The
/// preview maps depth linearly: `gray = round(65535 * clamp((far - d) /
/// (far - near), 0, 1))`, so `d = near` is white and `d >= far` (and the
/// sentinel) is black.
pub fn encode_depth(depth: &DepthMap, near: f32, far: f32) -> Result<DepthEncoding, DepthError> {
    if !(near > 0.0 && far > near && near.is_finite() && far.is_finite()) {
        return Err(DepthError::InvalidRange { near, far });
    }

    let mut raw = Vec::with_capacity(20 + depth.values.len() * 4);
    raw.extend_from_slice(b"DPF1");
    raw.extend_from_slice(&depth.width.to_le_bytes());
    raw.extend_from_slice(&depth.height.to_le_bytes());
    raw.extend_from_slice(&near.to_le_bytes());
    raw.extend_from_slice(&far.to_le_bytes());
    for &v in &depth.values {
        let stored = if v.is_finite() { v } else { far };
        raw.extend_from_slice(&stored.to_le_bytes());
    }

    let mut preview = format!("P5\n{} {}\n65535\n", depth.width, depth.height).into_bytes();
    let span = (far - near) as f64;
    for &v in &depth.values {
        let gray = if v.is_finite() {
            let t = ((far as f64 - v as f64) / span).clamp(0.0, 1.0);
            (65535.0 * t).round() as u16
        } else {
            0
        };
        preview.extend_from_slice(&gray.to_be_bytes());
    }

    Ok(DepthEncoding { raw, preview })
}

/// Decodes a DPF1 file back into a depth map plus its near/far range.
/// Values stored exactly at `far` become the background sentinel again.
pub fn decode_depth(raw: &[u8]) -> Result<(DepthMap, f32, f32), DepthError> {
    if raw.len() < 20 {
        return Err(if raw.len() >= 4 && &raw[..4] != b"DPF1" {
            DepthError::BadMagic
        } else {
            DepthError::Truncated
        });
    }
    if &raw[..4] != b"DPF1" {
        return Err(DepthError::BadMagic);
    }
    let width = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(raw[8..12].try_into().unwrap());
    let near = f32::from_le_bytes(raw[12..16].try_into().unwrap());
    let far = f32::from_le_bytes(raw[16..20].try_into().unwrap());
    if !(near > 0.0 && far > near && near.is_finite() && far.is_finite()) {
        return Err(DepthError::BadHeader(format!(
            "near {near} and far {far} out of order"
        )));
    }
    let count = width as usize * height as usize;
    if raw.len() < 20 + count * 4 {
        return Err(DepthError::Truncated);
    }
    let mut depth = DepthMap::new(width, height);
    for (i, chunk) in raw[20..20 + count * 4].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        depth.values[i] = if v == far { f32::INFINITY } else { v };
    }
    Ok((depth, near, far))
}
