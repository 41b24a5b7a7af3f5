//! Scene-plan model: parsing, validation, serialization, and refinement.
//!
//! A plan is a JSON object produced by a language-model planner:
//!
//! ```json
//! {
//!   "scene_parameters": { "scene_size": 10, "camera_pitch_angle": 20 },
//!   "entity_layout": [
//!     { "entity_name": "dog", "size": [1, 0.5, 0.8], "position": [0, 0, 2] }
//!   ]
//! }
//! ```
//!
//! `scene_size` is the approximate extent of the subject area in meters and
//! `camera_pitch_angle` the downward camera tilt in degrees. Each entity is
//! an axis-aligned-by-default box: `size` is `[length_x, width_z, height_y]`
//! in meters, `position` is the bottom-center `[X, Y, Z]` with Y = 0 on the
//! ground, and an optional `yaw` (degrees about +Y) rotates the box. An
//! optional `local_prompt` overrides the text used to describe the entity
//! downstream; it defaults to `entity_name`.
//!
//! [`parse_plan`] is tolerant about the surrounding text: planners wrap JSON
//! in prose and markdown fences, so we scan for balanced top-level objects
//! and take the first one that satisfies the schema. Structural problems are
//! parse errors; numeric problems (bad pitch, non-positive sizes, entities
//! far outside the scene) are reported by [`validate_plan`] so a caller can
//! distinguish hard failures from advisories.

use std::fmt;

/// Global parameters shared by every entity in a plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParameters {
    /// Approximate extent of the main subject area, in meters.
    pub scene_size: f64,
    /// Downward camera tilt in degrees; 0 is horizontal, valid range [0, 89].
    pub camera_pitch_deg: f64,
}

/// One placed entity: a yaw-rotated box anchored by its bottom-center point.
#[derive(Debug, Clone, PartialEq)]
pub struct EntitySpec {
    pub entity_name: String,
    /// Optional per-entity text prompt; falls back to `entity_name`.
    pub local_prompt: Option<String>,
    /// `[length_x, width_z, height_y]` in meters.
    pub size: [f64; 3],
    /// Bottom-center `[X, Y, Z]` in meters; Y = 0 is the ground plane.
    pub position: [f64; 3],
    /// Rotation about +Y in degrees; 0 means axis-aligned.
    pub yaw_deg: f64,
}

impl EntitySpec {
    /// The text used to describe this entity downstream.
    pub fn prompt(&self) -> &str {
        self.local_prompt.as_deref().unwrap_or(&self.entity_name)
    }
}

/// A full scene plan: the global caption, parameters, and at least one
/// entity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlan {
    /// The scene-level text prompt. Planner JSON rarely carries it, so it
    /// defaults to empty and is usually filled in by the caller that knows
    /// the caption.
    pub global_prompt: String,
    pub parameters: SceneParameters,
    pub entities: Vec<EntitySpec>,
}

impl ScenePlan {
    pub fn entity(&self, name: &str) -> Option<&EntitySpec> {
        self.entities.iter().find(|e| e.entity_name == name)
    }

    pub fn entity_names(&self) -> Vec<String> {
        self.entities.iter().map(|e| e.entity_name.clone()).collect()
    }
}

/// Errors raised while interpreting planner text as a plan.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanError {
    /// No balanced JSON object anywhere in the input text.
    NoJsonFound,
    /// A required key is absent; the path is in `$.key[index]` form.
    MissingKey { path: String },
    /// A key holds the wrong JSON type.
    TypeMismatch { path: String, expected: &'static str },
    /// Structurally well formed but not a usable plan.
    InvalidPlan(String),
    /// A refinement fragment names an entity the plan does not contain.
    UnknownEntity(String),
}

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanError::NoJsonFound => write!(f, "no JSON object found in text"),
            PlanError::MissingKey { path } => write!(f, "missing key at `{path}`"),
            PlanError::TypeMismatch { path, expected } => {
                write!(f, "expected {expected} at `{path}`")
            }
            PlanError::InvalidPlan(msg) => write!(f, "invalid plan: {msg}"),
            PlanError::UnknownEntity(name) => {
                write!(f, "refinement references unknown entity `{name}`")
            }
        }
    }
}

impl std::error::Error for PlanError {}

/// Severity of a validation finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

/// Findings from [`validate_plan`]. A plan with zero errors is usable;
/// warnings flag layouts that render but probably should not.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub issues: Vec<PlanIssue>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &PlanIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &PlanIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }

    pub fn is_usable(&self) -> bool {
        self.errors().next().is_none()
    }
}

/// One validation finding; `entity` is set for per-entity findings.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanIssue {
    pub severity: Severity,
    pub entity: Option<String>,
    pub message: String,
}

impl fmt::Display for PlanIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        match &self.entity {
            Some(name) => write!(f, "{tag} [{name}]: {}", self.message),
            None => write!(f, "{tag}: {}", self.message),
        }
    }
}

/// Extracts every balanced top-level JSON object from free-form text.
///
/// The scan is string-aware: braces inside JSON string literals (and escaped
/// quotes inside those) do not affect nesting depth. Returned slices are in
/// order of appearance and include their outer braces.
pub fn extract_json_objects(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' if depth > 0 => in_string = true,
            b'{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            b'}' => {
                if depth > 0 {
                    depth -= 1;
                    if depth == 0 {
                        out.push(&text[start..=i]);
                    }
                }
            }
            _ => {}
        }
    }
    out
}

fn get_f64(v: &serde_json::Value, path: &str) -> Result<f64, PlanError> {
    v.as_f64().ok_or(PlanError::TypeMismatch {
        path: path.to_string(),
        expected: "number",
    })
}

fn get_triple(v: &serde_json::Value, path: &str) -> Result<[f64; 3], PlanError> {
    let arr = v.as_array().ok_or(PlanError::TypeMismatch {
        path: path.to_string(),
        expected: "array of 3 numbers",
    })?;
    if arr.len() != 3 {
        return Err(PlanError::TypeMismatch {
            path: path.to_string(),
            expected: "array of 3 numbers",
        });
    }
    let mut out = [0.0; 3];
    for (i, item) in arr.iter().enumerate() {
        out[i] = get_f64(item, &format!("{path}[{i}]"))?;
    }
    Ok(out)
}

fn interpret_plan(root: &serde_json::Value) -> Result<ScenePlan, PlanError> {
    let obj = root.as_object().ok_or(PlanError::TypeMismatch {
        path: "$".to_string(),
        expected: "object",
    })?;

    let params = obj.get("scene_parameters").ok_or(PlanError::MissingKey {
        path: "$.scene_parameters".to_string(),
    })?;
    let params_obj = params.as_object().ok_or(PlanError::TypeMismatch {
        path: "$.scene_parameters".to_string(),
        expected: "object",
    })?;
    let scene_size = get_f64(
        params_obj.get("scene_size").ok_or(PlanError::MissingKey {
            path: "$.scene_parameters.scene_size".to_string(),
        })?,
        "$.scene_parameters.scene_size",
    )?;
    let camera_pitch_deg = get_f64(
        params_obj
            .get("camera_pitch_angle")
            .ok_or(PlanError::MissingKey {
                path: "$.scene_parameters.camera_pitch_angle".to_string(),
            })?,
        "$.scene_parameters.camera_pitch_angle",
    )?;

    let layout = obj.get("entity_layout").ok_or(PlanError::MissingKey {
        path: "$.entity_layout".to_string(),
    })?;
    let entities = interpret_entities(layout, "$.entity_layout")?;
    if entities.is_empty() {
        return Err(PlanError::InvalidPlan("entity_layout is empty".to_string()));
    }

    let global_prompt = match obj.get("global_prompt") {
        Some(v) => v
            .as_str()
            .ok_or(PlanError::TypeMismatch {
                path: "$.global_prompt".to_string(),
                expected: "string",
            })?
            .to_string(),
        None => String::new(),
    };

    Ok(ScenePlan {
        global_prompt,
        parameters: SceneParameters {
            scene_size,
            camera_pitch_deg,
        },
        entities,
    })
}

fn interpret_entities(layout: &serde_json::Value, path: &str) -> Result<Vec<EntitySpec>, PlanError> {
    let arr = layout.as_array().ok_or(PlanError::TypeMismatch {
        path: path.to_string(),
        expected: "array",
    })?;
    let mut entities = Vec::with_capacity(arr.len());
    for (i, item) in arr.iter().enumerate() {
        let epath = format!("{path}[{i}]");
        let eobj = item.as_object().ok_or(PlanError::TypeMismatch {
            path: epath.clone(),
            expected: "object",
        })?;
        let entity_name = eobj
            .get("entity_name")
            .ok_or(PlanError::MissingKey {
                path: format!("{epath}.entity_name"),
            })?
            .as_str()
            .ok_or(PlanError::TypeMismatch {
                path: format!("{epath}.entity_name"),
                expected: "string",
            })?
            .to_string();
        let size = get_triple(
            eobj.get("size").ok_or(PlanError::MissingKey {
                path: format!("{epath}.size"),
            })?,
            &format!("{epath}.size"),
        )?;
        let position = get_triple(
            eobj.get("position").ok_or(PlanError::MissingKey {
                path: format!("{epath}.position"),
            })?,
            &format!("{epath}.position"),
        )?;
        let yaw_deg = match eobj.get("yaw") {
            Some(v) => get_f64(v, &format!("{epath}.yaw"))?,
            None => 0.0,
        };
        let local_prompt = match eobj.get("local_prompt") {
            Some(v) => Some(
                v.as_str()
                    .ok_or(PlanError::TypeMismatch {
                        path: format!("{epath}.local_prompt"),
                        expected: "string",
                    })?
                    .to_string(),
            ),
            None => None,
        };
        entities.push(EntitySpec {
            entity_name,
            local_prompt,
            size,
            position,
            yaw_deg,
        });
    }
    Ok(entities)
}

/// Parses planner output into a [`ScenePlan`].
///
/// Scans the text for balanced JSON objects and interprets the first one
/// that satisfies the plan schema. When every candidate is JSON but none
/// fits the schema, the error from the first candidate is returned; when
/// there is no JSON at all, [`PlanError::NoJsonFound`].
pub fn parse_plan(text: &str) -> Result<ScenePlan, PlanError> {
    let mut first_schema_err: Option<PlanError> = None;
    for candidate in extract_json_objects(text) {
        let value: serde_json::Value = match serde_json::from_str(candidate) {
            Ok(v) => v,
            Err(_) => continue,
        };
        match interpret_plan(&value) {
            Ok(plan) => return Ok(plan),
            Err(e) => {
                if first_schema_err.is_none() {
                    first_schema_err = Some(e);
                }
            }
        }
    }
    Err(first_schema_err.unwrap_or(PlanError::NoJsonFound))
}

fn fmt_number(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        let v = if x == 0.0 { 0.0 } else { x };
        return format!("{}", v as i64);
    }
    let mut s = format!("{x:.6}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

fn fmt_triple(v: [f64; 3]) -> String {
    format!("[{}, {}, {}]", fmt_number(v[0]), fmt_number(v[1]), fmt_number(v[2]))
}

fn push_entity_json(out: &mut String, e: &EntitySpec, indent: &str) {
    out.push_str(indent);
    out.push_str("{\n");
    out.push_str(&format!(
        "{indent}  \"entity_name\": {},\n",
        serde_json::Value::String(e.entity_name.clone())
    ));
    if let Some(p) = &e.local_prompt {
        out.push_str(&format!(
            "{indent}  \"local_prompt\": {},\n",
            serde_json::Value::String(p.clone())
        ));
    }
    out.push_str(&format!("{indent}  \"size\": {},\n", fmt_triple(e.size)));
    if e.yaw_deg != 0.0 {
        out.push_str(&format!("{indent}  \"position\": {},\n", fmt_triple(e.position)));
        out.push_str(&format!("{indent}  \"yaw\": {}\n", fmt_number(e.yaw_deg)));
    } else {
        out.push_str(&format!("{indent}  \"position\": {}\n", fmt_triple(e.position)));
    }
    out.push_str(indent);
    out.push('}');
}

/// Serializes a plan to schema JSON with a stable key order and number
/// format (at most six fractional digits, no trailing zeros), so identical
/// plans always produce identical bytes.
pub fn serialize_plan(plan: &ScenePlan) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    if !plan.global_prompt.is_empty() {
        out.push_str(&format!(
            "  \"global_prompt\": {},\n",
            serde_json::Value::String(plan.global_prompt.clone())
        ));
    }
    out.push_str("  \"scene_parameters\": {\n");
    out.push_str(&format!(
        "    \"scene_size\": {},\n",
        fmt_number(plan.parameters.scene_size)
    ));
    out.push_str(&format!(
        "    \"camera_pitch_angle\": {}\n",
        fmt_number(plan.parameters.camera_pitch_deg)
    ));
    out.push_str("  },\n  \"entity_layout\": [\n");
    for (i, e) in plan.entities.iter().enumerate() {
        push_entity_json(&mut out, e, "    ");
        if i + 1 < plan.entities.len() {
            out.push(',');
        }
        out.push('\n');
    }
    out.push_str("  ]\n}");
    out
}

/// Checks numeric and semantic constraints, returning findings rather than
/// failing fast. Errors make the plan unusable for rendering; warnings flag
/// layouts that are legal but likely to produce poor conditioning, such as
/// entities below the visibility threshold of a tenth of `scene_size`.
pub fn validate_plan(plan: &ScenePlan) -> ValidationReport {
    let mut issues = Vec::new();
    let p = &plan.parameters;
    if !p.scene_size.is_finite() || p.scene_size <= 0.0 {
        issues.push(PlanIssue {
            severity: Severity::Error,
            entity: None,
            message: format!("scene_size must be a positive number, got {}", p.scene_size),
        });
    }
    if !p.camera_pitch_deg.is_finite()
        || p.camera_pitch_deg < 0.0
        || p.camera_pitch_deg > 89.0
    {
        issues.push(PlanIssue {
            severity: Severity::Error,
            entity: None,
            message: format!(
                "camera_pitch_angle must lie in [0, 89] degrees, got {}",
                p.camera_pitch_deg
            ),
        });
    }
    if plan.entities.is_empty() {
        issues.push(PlanIssue {
            severity: Severity::Error,
            entity: None,
            message: "entity_layout is empty".to_string(),
        });
    }

    let mut seen: Vec<&str> = Vec::new();
    for e in &plan.entities {
        let name = e.entity_name.as_str();
        if seen.contains(&name) {
            issues.push(PlanIssue {
                severity: Severity::Error,
                entity: Some(e.entity_name.clone()),
                message: format!("duplicate entity_name `{name}`"),
            });
        } else {
            seen.push(name);
        }

        for (axis, &s) in ["length", "width", "height"].iter().zip(&e.size) {
            if !s.is_finite() || s <= 0.0 {
                issues.push(PlanIssue {
                    severity: Severity::Error,
                    entity: Some(e.entity_name.clone()),
                    message: format!("{axis} must be positive, got {s}"),
                });
            }
        }
        if e.position.iter().any(|v| !v.is_finite()) || !e.yaw_deg.is_finite() {
            issues.push(PlanIssue {
                severity: Severity::Error,
                entity: Some(e.entity_name.clone()),
                message: "position and yaw must be finite".to_string(),
            });
        }

        if p.scene_size > 0.0 && p.scene_size.is_finite() {
            let threshold = p.scene_size / 10.0;
            if e.size.iter().any(|&s| s.is_finite() && s > 0.0 && s <= threshold) {
                issues.push(PlanIssue {
                    severity: Severity::Warning,
                    entity: Some(e.entity_name.clone()),
                    message: format!(
                        "size {:?} has a component at or below the visibility threshold {threshold} (scene_size / 10)",
                        e.size
                    ),
                });
            }
            if e.position[0].abs() > p.scene_size || e.position[2].abs() > p.scene_size {
                issues.push(PlanIssue {
                    severity: Severity::Warning,
                    entity: Some(e.entity_name.clone()),
                    message: format!(
                        "position {:?} lies outside [-{s}, {s}] in X/Z",
                        e.position,
                        s = p.scene_size
                    ),
                });
            }
            if e.position[1] < 0.0 {
                issues.push(PlanIssue {
                    severity: Severity::Warning,
                    entity: Some(e.entity_name.clone()),
                    message: format!("position Y = {} is below the ground plane", e.position[1]),
                });
            }
        }
    }
    ValidationReport { issues }
}

/// A partial plan update: optional new global parameters plus replacement
/// entries for a subset of entities, keyed by `entity_name`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanFragment {
    pub parameters: Option<SceneParameters>,
    pub entities: Vec<EntitySpec>,
}

/// Parses a refinement fragment: either a full plan-shaped object (possibly
/// without `scene_parameters`) or a bare JSON array of entity entries.
pub fn parse_fragment(text: &str) -> Result<PlanFragment, PlanError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        let value: serde_json::Value =
            serde_json::from_str(text.trim()).map_err(|_| PlanError::NoJsonFound)?;
        let entities = interpret_entities(&value, "$")?;
        return Ok(PlanFragment {
            parameters: None,
            entities,
        });
    }

    let mut first_schema_err: Option<PlanError> = None;
    for candidate in extract_json_objects(text) {
        let value: serde_json::Value = match serde_json::from_str(candidate) {
            Ok(v) => v,
            Err(_) => continue,
        };
        match interpret_fragment(&value) {
            Ok(frag) => return Ok(frag),
            Err(e) => {
                if first_schema_err.is_none() {
                    first_schema_err = Some(e);
                }
            }
        }
    }
    Err(first_schema_err.unwrap_or(PlanError::NoJsonFound))
}

fn interpret_fragment(root: &serde_json::Value) -> Result<PlanFragment, PlanError> {
    let obj = root.as_object().ok_or(PlanError::TypeMismatch {
        path: "$".to_string(),
        expected: "object",
    })?;
    let parameters = match obj.get("scene_parameters") {
        Some(params) => {
            let params_obj = params.as_object().ok_or(PlanError::TypeMismatch {
                path: "$.scene_parameters".to_string(),
                expected: "object",
            })?;
            Some(SceneParameters {
                scene_size: get_f64(
                    params_obj.get("scene_size").ok_or(PlanError::MissingKey {
                        path: "$.scene_parameters.scene_size".to_string(),
                    })?,
                    "$.scene_parameters.scene_size",
                )?,
                camera_pitch_deg: get_f64(
                    params_obj
                        .get("camera_pitch_angle")
                        .ok_or(PlanError::MissingKey {
                            path: "$.scene_parameters.camera_pitch_angle".to_string(),
                        })?,
                    "$.scene_parameters.camera_pitch_angle",
                )?,
            })
        }
        None => None,
    };
    let layout = obj.get("entity_layout").ok_or(PlanError::MissingKey {
        path: "$.entity_layout".to_string(),
    })?;
    let entities = interpret_entities(layout, "$.entity_layout")?;
    Ok(PlanFragment {
        parameters,
        entities,
    })
}

/// Applies a refinement fragment to a plan, returning the updated plan.
///
/// Entities are matched by `entity_name` and replaced wholesale; the plan's
/// entity order is preserved. The input plan is never modified, and applying
/// the same fragment twice yields the same result as applying it once. A
/// fragment that names an entity absent from the plan is rejected with
/// [`PlanError::UnknownEntity`].
pub fn apply_refinement(plan: &ScenePlan, fragment: &PlanFragment) -> Result<ScenePlan, PlanError> {
    for e in &fragment.entities {
        if plan.entity(&e.entity_name).is_none() {
            return Err(PlanError::UnknownEntity(e.entity_name.clone()));
        }
    }
    let mut updated = plan.clone();
    if let Some(params) = fragment.parameters {
        updated.parameters = params;
    }
    for e in &fragment.entities {
        let slot = updated
            .entities
            .iter_mut()
            .find(|x| x.entity_name == e.entity_name)
            .expect("presence checked above");
        *slot = e.clone();
    }
    Ok(updated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXAMPLE: &str = r#"{
        "scene_parameters": {"scene_size": 10, "camera_pitch_angle": 20},
        "entity_layout": [
            {"entity_name": "dog", "size": [1, 0.5, 0.8], "position": [0, 0, 2]}
        ]
    }"#;

    fn example_plan() -> ScenePlan {
        parse_plan(EXAMPLE).unwrap()
    }

    #[test]
    fn parse_example_plan() {
        let plan = example_plan();
        assert_eq!(plan.parameters.scene_size, 10.0);
        assert_eq!(plan.parameters.camera_pitch_deg, 20.0);
        assert_eq!(plan.entities.len(), 1);
        let dog = &plan.entities[0];
        assert_eq!(dog.entity_name, "dog");
        assert_eq!(dog.size, [1.0, 0.5, 0.8]);
        assert_eq!(dog.position, [0.0, 0.0, 2.0]);
        assert_eq!(dog.yaw_deg, 0.0);
        assert_eq!(dog.prompt(), "dog");
    }

    #[test]
    fn parse_plan_embedded_in_prose() {
        let text = format!(
            "Sure! Here is the layout you asked for:\n```json\n{EXAMPLE}\n```\nLet me know."
        );
        assert_eq!(parse_plan(&text).unwrap(), example_plan());
    }

    #[test]
    fn parse_skips_non_plan_objects() {
        let text = format!("{{\"thoughts\": \"placing the dog\"}}\n{EXAMPLE}");
        assert_eq!(parse_plan(&text).unwrap(), example_plan());
    }

    #[test]
    fn parse_reports_no_json() {
        assert_eq!(parse_plan("there is no json here"), Err(PlanError::NoJsonFound));
        assert_eq!(parse_plan(""), Err(PlanError::NoJsonFound));
    }

    #[test]
    fn parse_reports_missing_scene_parameters() {
        let err = parse_plan(r#"{"entity_layout": []}"#).unwrap_err();
        assert_eq!(
            err,
            PlanError::MissingKey {
                path: "$.scene_parameters".to_string()
            }
        );
    }

    #[test]
    fn parse_reports_bad_size_type() {
        let text = r#"{
            "scene_parameters": {"scene_size": 10, "camera_pitch_angle": 20},
            "entity_layout": [
                {"entity_name": "dog", "size": "big", "position": [0, 0, 2]}
            ]
        }"#;
        let err = parse_plan(text).unwrap_err();
        assert_eq!(
            err,
            PlanError::TypeMismatch {
                path: "$.entity_layout[0].size".to_string(),
                expected: "array of 3 numbers"
            }
        );
    }

    #[test]
    fn parse_rejects_empty_layout() {
        let text = r#"{
            "scene_parameters": {"scene_size": 10, "camera_pitch_angle": 20},
            "entity_layout": []
        }"#;
        assert_eq!(
            parse_plan(text),
            Err(PlanError::InvalidPlan("entity_layout is empty".to_string()))
        );
    }

    #[test]
    fn extract_handles_braces_inside_strings() {
        let text = r#"prefix {"a": "closing } brace", "b": {"c": 1}} suffix"#;
        let objs = extract_json_objects(text);
        assert_eq!(objs, vec![r#"{"a": "closing } brace", "b": {"c": 1}}"#]);
    }

    #[test]
    fn extract_handles_escaped_quotes() {
        let text = r#"{"a": "quote \" then } brace"} and {"b": 2}"#;
        let objs = extract_json_objects(text);
        assert_eq!(objs.len(), 2);
        assert_eq!(objs[1], r#"{"b": 2}"#);
    }

    #[test]
    fn serialize_round_trips_with_optional_fields() {
        let plan = ScenePlan {
            global_prompt: "a red car next to a tree".to_string(),
            parameters: SceneParameters {
                scene_size: 12.5,
                camera_pitch_deg: 35.0,
            },
            entities: vec![
                EntitySpec {
                    entity_name: "car".to_string(),
                    local_prompt: Some("a red car".to_string()),
                    size: [4.2, 1.8, 1.5],
                    position: [-2.0, 0.0, 3.25],
                    yaw_deg: 30.0,
                },
                EntitySpec {
                    entity_name: "tree".to_string(),
                    local_prompt: None,
                    size: [2.0, 2.0, 6.0],
                    position: [4.0, 0.0, 6.0],
                    yaw_deg: 0.0,
                },
            ],
        };
        let text = serialize_plan(&plan);
        assert_eq!(parse_plan(&text).unwrap(), plan);
    }

    #[test]
    fn serialize_omits_defaults_and_keeps_integers_clean() {
        let text = serialize_plan(&example_plan());
        assert!(text.contains("\"scene_size\": 10,"), "{text}");
        assert!(!text.contains("yaw"), "{text}");
        assert!(!text.contains("local_prompt"), "{text}");
        assert!(text.contains("[1, 0.5, 0.8]"), "{text}");
    }

    #[test]
    fn serialize_trims_float_noise() {
        let mut plan = example_plan();
        plan.entities[0].size = [0.1 + 0.2, 0.5, 0.8];
        let text = serialize_plan(&plan);
        assert!(text.contains("[0.3, 0.5, 0.8]"), "{text}");
    }

    #[test]
    fn validate_declares_clean_plan_usable() {
        let mut plan = example_plan();
        plan.entities[0].size = [1.5, 1.2, 1.1];
        let report = validate_plan(&plan);
        assert!(report.issues.is_empty());
        assert!(report.is_usable());
    }

    #[test]
    fn validate_flags_pitch_out_of_range() {
        let mut plan = example_plan();
        plan.parameters.camera_pitch_deg = 95.0;
        let report = validate_plan(&plan);
        assert!(!report.is_usable());
        assert!(report.errors().any(|i| i.message.contains("camera_pitch_angle")));
    }

    #[test]
    fn validate_warns_below_visibility_threshold() {
        let mut plan = example_plan();
        plan.entities[0].size = [0.2, 0.2, 0.2];
        let report = validate_plan(&plan);
        assert!(report.is_usable(), "visibility is advisory only");
        assert_eq!(report.warnings().count(), 1);
        assert!(report.issues[0].message.contains("visibility threshold"));
    }

    #[test]
    fn validate_warns_far_outside_scene() {
        let mut plan = example_plan();
        plan.entities[0].size = [1.5, 1.2, 1.1];
        plan.entities[0].position = [30.0, 0.0, 2.0];
        let report = validate_plan(&plan);
        assert!(report.is_usable());
        assert_eq!(report.warnings().count(), 1);
        assert!(report.issues[0].message.contains("outside"));
    }

    #[test]
    fn validate_flags_duplicates_and_bad_sizes() {
        let mut plan = example_plan();
        let mut twin = plan.entities[0].clone();
        twin.size = [0.0, 0.5, 0.8];
        plan.entities.push(twin);
        let report = validate_plan(&plan);
        assert!(!report.is_usable());
        assert!(report.errors().any(|i| i.message.contains("duplicate")));
        assert!(report
            .errors()
            .any(|i| i.message.contains("length must be positive")));
    }

    #[test]
    fn apply_refinement_replaces_named_entity() {
        let plan = example_plan();
        let frag = parse_fragment(
            r#"[{"entity_name": "dog", "size": [1, 0.5, 0.8], "position": [1.5, 0, 3]}]"#,
        )
        .unwrap();
        let updated = apply_refinement(&plan, &frag).unwrap();
        assert_eq!(updated.entities[0].position, [1.5, 0.0, 3.0]);
        assert_eq!(plan.entities[0].position, [0.0, 0.0, 2.0], "input must not change");

        let twice = apply_refinement(&updated, &frag).unwrap();
        assert_eq!(twice, updated, "refinement must be idempotent");
    }

    #[test]
    fn apply_empty_fragment_is_identity() {
        let plan = example_plan();
        let frag = parse_fragment(r#"{"entity_layout": []}"#).unwrap();
        assert_eq!(apply_refinement(&plan, &frag).unwrap(), plan);
    }

    #[test]
    fn apply_refinement_rejects_unknown_entity() {
        let plan = example_plan();
        let frag = parse_fragment(
            r#"[{"entity_name": "cat", "size": [1, 0.5, 0.8], "position": [1.5, 0, 3]}]"#,
        )
        .unwrap();
        assert_eq!(
            apply_refinement(&plan, &frag),
            Err(PlanError::UnknownEntity("cat".to_string()))
        );
    }

    #[test]
    fn apply_refinement_updates_scene_parameters() {
        let plan = example_plan();
        let frag = parse_fragment(
            r#"{
                "scene_parameters": {"scene_size": 14, "camera_pitch_angle": 25},
                "entity_layout": [
                    {"entity_name": "dog", "size": [1.2, 0.6, 0.9], "position": [0, 0, 2]}
                ]
            }"#,
        )
        .unwrap();
        let updated = apply_refinement(&plan, &frag).unwrap();
        assert_eq!(updated.parameters.scene_size, 14.0);
        assert_eq!(updated.parameters.camera_pitch_deg, 25.0);
        assert_eq!(updated.entities[0].size, [1.2, 0.6, 0.9]);
    }

    fn micros_to_f64(micros: i64) -> f64 {
        // Route through the decimal text form so the value is exactly what
        // the serializer will print with six fractional digits.
        format!("{}", micros as f64 / 1e6).parse::<f64>().unwrap()
    }

    fn quantized() -> impl Strategy<Value = f64> {
        (-20_000_000i64..20_000_000i64).prop_map(micros_to_f64)
    }

    fn quantized_pos() -> impl Strategy<Value = f64> {
        (500_000i64..20_000_000i64).prop_map(micros_to_f64)
    }

    proptest! {
        #[test]
        fn plan_round_trip_is_identity(
            scene_size in 1u32..100u32,
            pitch in 0u32..=89u32,
            sizes in proptest::collection::vec(quantized_pos(), 3 * 3),
            coords in proptest::collection::vec(quantized(), 3 * 3),
            yaw in quantized(),
            k in 1usize..=3usize,
        ) {
            let mut entities = Vec::new();
            for j in 0..k {
                let base = j * 3;
                entities.push(EntitySpec {
                    entity_name: format!("entity_{j}"),
                    local_prompt: if j % 2 == 0 { None } else { Some(format!("prompt {j}")) },
                    size: [sizes[base], sizes[base + 1], sizes[base + 2]],
                    position: [coords[base], coords[base + 1], coords[base + 2]],
                    yaw_deg: yaw,
                });
            }
            let plan = ScenePlan {
                global_prompt: "two entities in a field".to_string(),
                parameters: SceneParameters {
                    scene_size: scene_size as f64,
                    camera_pitch_deg: pitch as f64,
                },
                entities,
            };
            let text = serialize_plan(&plan);
            prop_assert_eq!(parse_plan(&text).unwrap(), plan);
        }
    }
}
