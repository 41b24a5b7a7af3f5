//! Geometric grounding for layout-conditioned image generation.
//!
//! The crate turns a quantitative 3D scene plan (entity boxes on a ground
//! plane, plus a camera pitch) into the conditioning signals a generative
//! model consumes: a rendered depth map, per-entity 2D occupancy masks, and
//! a structured attention mask over the token sequence. Around that core it
//! provides the inverse direction (fitting gravity-aligned oriented boxes
//! back onto masked depth), a stepwise predict / evaluate / refine loop
//! driven by pluggable planner and denoiser ports, and spatial-relation
//! scoring utilities with a synthetic benchmark generator.
//!
//! Start with [`scene`] for the plan model, [`conditions`] for the one-call
//! plan-to-signals path, and [`refine`] for the loop.

pub mod attention;
pub mod camera;
pub mod conditions;
pub mod depth;
pub mod geom;
pub mod metrics;
pub mod obb;
pub mod refine;
pub mod scene;

/// Re-exported because latents and attention inputs in the public API are
/// [`ndarray::Array2`] values.
pub use ndarray;

mod doctests;
