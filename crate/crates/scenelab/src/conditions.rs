//! One-call rendering of every guidance signal for a scene plan.
//!
//! A plan turns into: the derived camera, a rendered depth map with its
//! near/far preview range, one 2D occupancy mask per entity, and the
//! structured attention mask built from the patchified entity masks. This
//! bundle is what the refinement loop re-renders after each plan revision,
//! and what the CLI materializes to files.

use crate::attention::{
    build_attention_mask, patchify_mask_with_coverage, AttentionMask, MaskError, MaskRules,
    TokenLayout,
};
use crate::camera::{
    project_box_mask, Box3D, CameraConfig, CameraError, CameraModel, EntityMask2D,
};
use crate::depth::{default_depth_range, render_depth, DepthMap};
use crate::scene::ScenePlan;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum ConditionError {
    Camera(CameraError),
    Mask(MaskError),
}

impl fmt::Display for ConditionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionError::Camera(e) => write!(f, "camera setup failed: {e}"),
            ConditionError::Mask(e) => write!(f, "attention mask failed: {e}"),
        }
    }
}

impl std::error::Error for ConditionError {}

impl From<CameraError> for ConditionError {
    fn from(e: CameraError) -> Self {
        ConditionError::Camera(e)
    }
}

impl From<MaskError> for ConditionError {
    fn from(e: MaskError) -> Self {
        ConditionError::Mask(e)
    }
}

/// Knobs for condition rendering. The defaults mirror common latent
/// geometry: 1024 x 1024 pixels at patch size 16.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSettings {
    pub width: u32,
    pub height: u32,
    pub patch_size: u32,
    pub camera: CameraConfig,
    pub rules: MaskRules,
    /// Minimum patch coverage fraction for patchify; 0 is any-overlap.
    pub min_coverage: f64,
}

impl Default for ConditionSettings {
    fn default() -> Self {
        ConditionSettings {
            width: 1024,
            height: 1024,
            patch_size: 16,
            camera: CameraConfig::default(),
            rules: MaskRules::default(),
            min_coverage: 0.0,
        }
    }
}

/// The rendered guidance bundle for one plan.
///
/// Segment lengths in the attention layout are one token each for the
/// global prompt, every entity prompt, and the depth condition; real
/// encoders produce model-specific counts, which callers can rebuild via
/// [`build_attention_mask`] with the bundled bitsets.
#[derive(Debug, Clone)]
pub struct Conditions {
    pub camera: CameraModel,
    pub depth: DepthMap,
    pub near: f32,
    pub far: f32,
    /// One occupancy mask per entity, in plan order.
    pub masks: Vec<EntityMask2D>,
    /// Patchified image-token bitsets, in plan order.
    pub bitsets: Vec<Vec<bool>>,
    pub attention: AttentionMask,
}

pub fn render_conditions(
    plan: &ScenePlan,
    settings: &ConditionSettings,
) -> Result<Conditions, ConditionError> {
    let camera = CameraModel::derive(
        &plan.parameters,
        settings.width,
        settings.height,
        &settings.camera,
    )?;
    let boxes: Vec<Box3D> = plan.entities.iter().map(Box3D::from_entity).collect();
    let depth = render_depth(&camera, &boxes);
    let (near, far) = default_depth_range(&plan.parameters, &camera);

    let mut masks = Vec::with_capacity(boxes.len());
    let mut bitsets = Vec::with_capacity(boxes.len());
    for bx in &boxes {
        let mask = project_box_mask(&camera, bx).mask;
        bitsets.push(patchify_mask_with_coverage(
            &mask,
            settings.patch_size,
            settings.min_coverage,
        )?);
        masks.push(mask);
    }

    let layout = TokenLayout::new(
        1,
        vec![1; plan.entities.len()],
        1,
        settings.width,
        settings.height,
        settings.patch_size,
    )?;
    let attention = build_attention_mask(&layout, &bitsets, settings.rules)?;

    Ok(Conditions {
        camera,
        depth,
        near,
        far,
        masks,
        bitsets,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::audit_mask;
    use crate::scene::parse_plan;

    fn example_plan() -> ScenePlan {
        parse_plan(
            r#"{
                "scene_parameters": {"scene_size": 10, "camera_pitch_angle": 30},
                "entity_layout": [
                    {"entity_name": "dog", "size": [1.5, 1.2, 1.1], "position": [-2, 0, 1]},
                    {"entity_name": "cat", "size": [1.2, 1.0, 0.9], "position": [2, 0, 3]}
                ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn bundle_is_internally_consistent() {
        let plan = example_plan();
        let settings = ConditionSettings {
            width: 128,
            height: 128,
            patch_size: 16,
            ..ConditionSettings::default()
        };
        let c = render_conditions(&plan, &settings).unwrap();
        assert_eq!(c.depth.width(), 128);
        assert_eq!(c.masks.len(), 2);
        assert_eq!(c.bitsets.len(), 2);
        assert_eq!(c.attention.layout().n_image(), 64);
        assert_eq!(c.attention.layout().total(), 1 + 2 + 1 + 64);
        assert!(c.near < c.far);
        assert!(audit_mask(&c.attention).is_clean());
        for (mask, bits) in c.masks.iter().zip(&c.bitsets) {
            assert!(!mask.is_empty());
            assert!(bits.iter().any(|&b| b));
        }
    }

    #[test]
    fn finite_depth_only_where_some_mask_covers() {
        let plan = example_plan();
        let settings = ConditionSettings {
            width: 96,
            height: 96,
            patch_size: 8,
            ..ConditionSettings::default()
        };
        let c = render_conditions(&plan, &settings).unwrap();
        for y in 0..96 {
            for x in 0..96 {
                if c.depth.get(x, y).is_finite() {
                    assert!(
                        c.masks.iter().any(|m| m.get(x, y)),
                        "finite depth at ({x}, {y}) outside every mask"
                    );
                }
            }
        }
    }

    #[test]
    fn indivisible_patch_size_is_rejected() {
        let plan = example_plan();
        let settings = ConditionSettings {
            width: 100,
            height: 100,
            patch_size: 16,
            ..ConditionSettings::default()
        };
        assert!(matches!(
            render_conditions(&plan, &settings),
            Err(ConditionError::Mask(MaskError::IndivisibleDims { .. }))
        ));
    }

    #[test]
    fn bad_camera_config_is_reported() {
        let plan = example_plan();
        let settings = ConditionSettings {
            width: 64,
            height: 64,
            patch_size: 8,
            camera: CameraConfig {
                vfov_deg: 5.0,
                ..CameraConfig::default()
            },
            ..ConditionSettings::default()
        };
        assert!(matches!(
            render_conditions(&plan, &settings),
            Err(ConditionError::Camera(_))
        ));
    }
}
