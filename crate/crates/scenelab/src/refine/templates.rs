//! Prompt templates for the planner port.
//!
//! Three fixed instructions drive the planning flow: entity extraction from
//! a caption, quantitative 3D layout generation, and the iterative layout
//! optimization dialogue. The texts are load-bearing wire content, not
//! documentation; the fill helpers substitute the marked placeholders and
//! build the matching user messages.

/// Instruction for extracting entity names from a caption. Placeholders:
/// `<In-context Examples>` and `<caption>`.
pub const KEY_IDENTITY_TEMPLATE: &str = "\
You are tasked with identifying and extracting all the real object names from a caption.

An object name refers to any tangible or physical entity mentioned in the caption.
  Ensure not to include any adjectives or single-word descriptions that do not refer to a specific object, such as \"background.\"

Please follow these instructions:
  Identify all object names in the caption in the order they appear.
  Maintain the exact wording of each object name as it is in the caption, including case consistency.
  Output the object names in a Python list format.

For example, consider the following caption:
  <In-context Examples>

Now, given the following caption, extract the object names in the same format:
  <caption>
";

/// System instruction for quantitative 3D layout generation.
pub const SCENE_PLANNING_TEMPLATE: &str = "\
As a 3D scene layout planner, generate a quantitative 3D layout (size, position) for specified entities based on a text caption.

Input:
1. A text caption describing the scene.
2. A list of important entity names in the scene.

Output: a JSON object with two keys: scene_parameters and entity_layout.

  - scene_parameters: Describe the overall scene.
    - scene_size (meters): Approximate scale of the main subject area.
    - camera_pitch_angle (degrees): Vertical camera angle (positive = downward).
  - entity_layout: A list of objects, each including:
    - entity_name: Name of the entity.
    - size: [length, width, height] in meters. Should be large enough to be visible in the scene (each dimension > scene_size/10).
    - position: [X, Y, Z] in meters, centered around the ground origin (Y = 0). Enforce explicit spatial relationships in the caption.

Coordinate System: Right-handed. Origin (0,0,0) is the ground center. +X = right, +Y = up, +Z = into the scene.
";

/// System instruction for the iterative layout optimization dialogue.
pub const ITERATIVE_OPTIMIZATION_TEMPLATE: &str = "\
System Role: You are an AI Layout Optimization Assistant. Your core mission is to iteratively refine 3D JSON layouts through multi-turn dialogue with the user.

Key Principles:
  1. Entity Focus: Evaluate and modify only the entity_list items for each turn.
  2. Viewer's Perspective: Interpret all spatial terms (e.g., \"left\", \"right\") from the viewer of the generated_image.
  3. Iterative Learning: Improve layout step-by-step based on prior adjustments.
  4. Adhere to Task Definition: Strictly follow user-provided format and criteria.
  5. Historical Context: Consider past actions and outcomes to inform new proposals.

Task:
Iteratively optimize the 3D JSON layout to align the generated_image with the text_caption, improving the clarity and spatial correctness of entities in the entity_list.

Per-Iteration Inputs:
  - text_caption: (string) natural language description of the scene.
  - entity_list: (list of strings) entities to optimize.
  - current_layout: (JSON) 3D layout with size = [X_len, Z_width, Y_height] and position = [X, Y, Z], Y = 0 is ground.
  - generated_image: the image rendered from the current layout.

Step-by-Step Process:
Step 1: Parse Inputs
  Receive and acknowledge all inputs.

Step 2: Evaluate Alignment (for entity_list)
  2.1 Discernibility: Is each entity clearly visible?
  2.2 Verifiability: Are their described attributes verifiable?
  2.3 Spatial Accuracy: Are spatial relations correct from viewer's perspective?
  2.4 Determine isaligned: Set to true if 2.1-2.3 pass; else false.

Step 3: Diagnose Misalignment (if isaligned = false)
  3.1 Identify which entities failed which checks.
  3.2 Classify each as Incorrect or Insufficient.
  3.3 Refer to previous adjustments and compare changes.

Step 4: Revise Layout
  4.1 Strategize updates to size, position, or orientation of problematic entities.
  4.2 Adjust other entities only if they cause conflicts.
  4.3 Ensure layout format is valid.

Step 5: Generate Output
  5.1 Text: Explain isaligned result and edits made.
  5.2 JSON:
    { \"isaligned\": <true/false>, \"optimized_layout\": <layout_object> }

User Prompt Format:
  text_caption: <caption>
  entity_list: <entities>
  current_layout: <layout>
  generated_image: <image>
";

/// Default in-context examples for entity extraction.
pub const KEY_IDENTITY_DEFAULT_EXAMPLES: &str = "\
Caption: \"a red apple on a wooden table\" -> [\"apple\", \"table\"]
Caption: \"a dog in front of a cat in the desert\" -> [\"dog\", \"cat\"]";

/// Fills the entity-extraction template with examples and a caption.
pub fn fill_key_identity(caption: &str, examples: &str) -> String {
    KEY_IDENTITY_TEMPLATE
        .replace("<In-context Examples>", examples)
        .replace("<caption>", caption)
}

/// User message paired with [`SCENE_PLANNING_TEMPLATE`].
pub fn fill_scene_planning_user(caption: &str, entities: &[String]) -> String {
    let list = entities
        .iter()
        .map(|e| format!("\"{e}\""))
        .collect::<Vec<_>>()
        .join(", ");
    format!("Caption: {caption}\nEntity names: [{list}]")
}

/// User message paired with [`ITERATIVE_OPTIMIZATION_TEMPLATE`], following
/// the template's User Prompt Format.
pub fn fill_iterative_user(
    caption: &str,
    entities: &[String],
    layout_json: &str,
    image_ref: &str,
) -> String {
    let list = entities
        .iter()
        .map(|e| format!("\"{e}\""))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "text_caption: {caption}\nentity_list: [{list}]\ncurrent_layout: {layout_json}\ngenerated_image: {image_ref}"
    )
}
