//! The stepwise predict-evaluate-refine loop.
//!
//! Sampling follows the rectified-flow convention: time runs from 1 (pure
//! noise) to 0, the velocity estimate advances the latent by Euler steps,
//! and `z_t - t * v_t` is the one-step clean prediction available at any
//! point along the way. At scheduled steps a planner inspects that
//! prediction; if it flags misalignment, the plan is patched, conditions
//! are re-rendered, and the same step's velocity is recomputed before the
//! loop advances. Everything lands in a deterministic JSON-lines trace.

pub mod ports;
pub mod templates;

pub use ports::{
    AttachMode, DenoiserPort, HttpPlanner, ImageArtifact, PlannerPort, PortError, RefineRequest,
    ScriptedPlanner, ToyDenoiser,
};

use crate::conditions::{render_conditions, ConditionError, ConditionSettings, Conditions};
use crate::scene::{
    apply_refinement, extract_json_objects, parse_fragment, parse_plan, PlanError, PlanFragment,
    ScenePlan,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum LoopError {
    BadConfig(String),
    ShapeMismatch(String),
    /// Time must lie in [0, 1].
    InvalidTime(f64),
    /// Planner text contained no JSON object with an `isaligned` key.
    NoVerdictFound,
    /// A misaligned verdict carried no usable layout.
    MalformedLayout(PlanError),
    /// A port failed; `step` is None when it happened during planning.
    PortFailure {
        step: Option<usize>,
        message: String,
    },
    BadPlan(PlanError),
    Condition(ConditionError),
}

impl fmt::Display for LoopError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoopError::BadConfig(msg) => write!(f, "bad loop config: {msg}"),
            LoopError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            LoopError::InvalidTime(t) => write!(f, "time {t} outside [0, 1]"),
            LoopError::NoVerdictFound => write!(f, "planner response has no isaligned verdict"),
            LoopError::MalformedLayout(e) => write!(f, "unusable optimized_layout: {e}"),
            LoopError::PortFailure { step, message } => match step {
                Some(i) => write!(f, "port failed at step {i}: {message}"),
                None => write!(f, "port failed during planning: {message}"),
            },
            LoopError::BadPlan(e) => write!(f, "unusable plan: {e}"),
            LoopError::Condition(e) => write!(f, "condition rendering failed: {e}"),
        }
    }
}

impl std::error::Error for LoopError {}

/// One-step clean prediction `z_t - t * v_t`.
pub fn predict_clean(
    z: &Array2<f64>,
    v: &Array2<f64>,
    t: f64,
) -> Result<Array2<f64>, LoopError> {
    if z.dim() != v.dim() {
        return Err(LoopError::ShapeMismatch(format!(
            "latent is {:?}, velocity is {:?}",
            z.dim(),
            v.dim()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(LoopError::InvalidTime(t));
    }
    Ok(z - &(v * t))
}

/// Loop controls. `eval_schedule` lists the step indices at which the
/// planner is consulted; the default consults every step until stability.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub num_steps: usize,
    pub eval_schedule: Vec<usize>,
    pub max_refinements: usize,
    /// Consecutive aligned verdicts after which evaluation stops.
    pub stability_window: usize,
    pub seed: u64,
    pub conditions: ConditionSettings,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig::with_steps(20)
    }
}

impl LoopConfig {
    /// `num_steps` steps with every step scheduled for evaluation.
    pub fn with_steps(num_steps: usize) -> LoopConfig {
        LoopConfig {
            num_steps,
            eval_schedule: (0..num_steps).collect(),
            max_refinements: 5,
            stability_window: 2,
            seed: 0,
            conditions: ConditionSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), LoopError> {
        if self.num_steps == 0 {
            return Err(LoopError::BadConfig("num_steps must be at least 1".into()));
        }
        if self.stability_window == 0 {
            return Err(LoopError::BadConfig(
                "stability_window must be at least 1".into(),
            ));
        }
        for &s in &self.eval_schedule {
            if s >= self.num_steps {
                return Err(LoopError::BadConfig(format!(
                    "eval step {s} outside [0, {})",
                    self.num_steps
                )));
            }
        }
        Ok(())
    }
}

/// Planner answer at one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerVerdict {
    pub isaligned: bool,
    /// Present exactly when `isaligned` is false.
    pub optimized_layout: Option<PlanFragment>,
    pub rationale: String,
}

/// One loop step as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: usize,
    pub t: f64,
    /// Content hash of the predicted clean image.
    pub artifact: String,
    /// `isaligned` when the planner was consulted at this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<bool>,
    /// The applied layout patch, when this step revised the plan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<serde_json::Value>,
    /// Whether conditions were re-rendered at this step.
    pub re_rendered: bool,
    /// Hash of the re-guided prediction after a revision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub re_guided_artifact: Option<String>,
}

/// Full record of one loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTrace {
    pub events: Vec<TraceEvent>,
    pub revisions: usize,
    pub final_plan: ScenePlan,
}

impl RefinementTrace {
    /// JSON-lines serialization, one event per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn events_from_jsonl(text: &str) -> Result<Vec<TraceEvent>, serde_json::Error> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    }
}

/// Extracts a [`PlannerVerdict`] from planner text.
///
/// The first balanced JSON object containing an `isaligned` key wins;
/// surrounding prose becomes the rationale unless the object carries its
/// own `rationale` string. A misaligned verdict must include an
/// `optimized_layout` readable under the plan-fragment rules.
pub fn parse_planner_response(text: &str) -> Result<PlannerVerdict, LoopError> {
    for candidate in extract_json_objects(text) {
        let value: serde_json::Value = match serde_json::from_str(candidate) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let isaligned = match value.get("isaligned").and_then(|v| v.as_bool()) {
            Some(flag) => flag,
            None => continue,
        };
        let rationale = match value.get("rationale").and_then(|v| v.as_str()) {
            Some(r) => r.to_string(),
            None => {
                let start = text.find(candidate).unwrap_or(0);
                text[..start].trim().to_string()
            }
        };
        let optimized_layout = if isaligned {
            None
        } else {
            let layout = value.get("optimized_layout").ok_or_else(|| {
                LoopError::MalformedLayout(PlanError::MissingKey {
                    path: "optimized_layout".to_string(),
                })
            })?;
            Some(parse_fragment(&layout.to_string()).map_err(LoopError::MalformedLayout)?)
        };
        return Ok(PlannerVerdict {
            isaligned,
            optimized_layout,
            rationale,
        });
    }
    Err(LoopError::NoVerdictFound)
}

fn hash_grid(grid: &Array2<f64>) -> String {
    let mut hasher = Sha256::new();
    let (rows, cols) = grid.dim();
    hasher.update((rows as u64).to_le_bytes());
    hasher.update((cols as u64).to_le_bytes());
    for v in grid.iter() {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// 8-bit PGM rendering of a grid clamped to [0, 1].
fn grid_to_pgm(grid: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = grid.dim();
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(
        grid.iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

fn fragment_value(fragment: &PlanFragment) -> serde_json::Value {
    let mut obj = serde_json::Map::new();
    if let Some(p) = &fragment.parameters {
        obj.insert(
            "scene_parameters".to_string(),
            serde_json::json!({
                "scene_size": p.scene_size,
                "camera_pitch_angle": p.camera_pitch_deg,
            }),
        );
    }
    let entities: Vec<serde_json::Value> = fragment
        .entities
        .iter()
        .map(|e| {
            let mut entry = serde_json::Map::new();
            entry.insert("entity_name".into(), e.entity_name.clone().into());
            if let Some(p) = &e.local_prompt {
                entry.insert("local_prompt".into(), p.clone().into());
            }
            entry.insert("size".into(), serde_json::json!(e.size));
            entry.insert("position".into(), serde_json::json!(e.position));
            if e.yaw_deg != 0.0 {
                entry.insert("yaw".into(), serde_json::json!(e.yaw_deg));
            }
            serde_json::Value::Object(entry)
        })
        .collect();
    obj.insert("entity_layout".into(), serde_json::Value::Array(entities));
    serde_json::Value::Object(obj)
}

fn port_failure(step: Option<usize>) -> impl Fn(PortError) -> LoopError {
    move |e| LoopError::PortFailure {
        step,
        message: e.to_string(),
    }
}

/// Runs the full loop: plan, render conditions, then denoise step by step
/// with scheduled planner evaluations and same-step re-guidance after each
/// revision. Deterministic given the config seed and port behavior.
pub fn run_refinement_loop(
    prompt: &str,
    denoiser: &mut dyn DenoiserPort,
    planner: &mut dyn PlannerPort,
    cfg: &LoopConfig,
) -> Result<RefinementTrace, LoopError> {
    cfg.validate()?;

    let plan_text = planner.plan(prompt).map_err(port_failure(None))?;
    let mut plan = parse_plan(&plan_text).map_err(LoopError::BadPlan)?;
    let mut conditions: Conditions =
        render_conditions(&plan, &cfg.conditions).map_err(LoopError::Condition)?;
    let entities = plan.entity_names();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = (cfg.conditions.height as usize, cfg.conditions.width as usize);
    let mut z = Array2::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng));

    let n = cfg.num_steps;
    let dt = 1.0 / n as f64;
    let mut events = Vec::with_capacity(n);
    let mut revisions = 0usize;
    let mut consecutive_aligned = 0usize;
    let mut evaluating = true;

    for i in 0..n {
        let t = (n - i) as f64 / n as f64;
        let mut v = denoiser.step(&z, t, &conditions).map_err(port_failure(Some(i)))?;
        let xhat = predict_clean(&z, &v, t)?;
        let mut event = TraceEvent {
            step: i,
            t,
            artifact: hash_grid(&xhat),
            verdict: None,
            revision: None,
            re_rendered: false,
            re_guided_artifact: None,
        };

        if evaluating && cfg.eval_schedule.contains(&i) {
            if revisions >= cfg.max_refinements {
                evaluating = false;
            } else {
                let image = ImageArtifact {
                    id: event.artifact.clone(),
                    pgm: grid_to_pgm(&xhat),
                };
                let response = planner
                    .refine(&RefineRequest {
                        prompt,
                        entities: &entities,
                        plan: &plan,
                        image: &image,
                    })
                    .map_err(port_failure(Some(i)))?;
                let verdict = parse_planner_response(&response)?;
                event.verdict = Some(verdict.isaligned);
                if verdict.isaligned {
                    consecutive_aligned += 1;
                    if consecutive_aligned >= cfg.stability_window {
                        evaluating = false;
                    }
                } else {
                    consecutive_aligned = 0;
                    let fragment = verdict
                        .optimized_layout
                        .expect("parser guarantees a layout on misaligned verdicts");
                    plan = apply_refinement(&plan, &fragment).map_err(LoopError::BadPlan)?;
                    conditions =
                        render_conditions(&plan, &cfg.conditions).map_err(LoopError::Condition)?;
                    event.revision = Some(fragment_value(&fragment));
                    event.re_rendered = true;
                    revisions += 1;
                    v = denoiser.step(&z, t, &conditions).map_err(port_failure(Some(i)))?;
                    let reguided = predict_clean(&z, &v, t)?;
                    event.re_guided_artifact = Some(hash_grid(&reguided));
                    if revisions >= cfg.max_refinements {
                        evaluating = false;
                    }
                }
            }
        }

        events.push(event);
        z = z - v * dt;
    }

    Ok(RefinementTrace {
        events,
        revisions,
        final_plan: plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const PLAN_TEXT: &str = r#"{
        "scene_parameters": {"scene_size": 8, "camera_pitch_angle": 35},
        "entity_layout": [
            {"entity_name": "dog", "size": [1.5, 1.2, 1.1], "position": [-1, 0, 2]},
            {"entity_name": "cat", "size": [1.2, 1.0, 0.9], "position": [1.5, 0, 2]}
        ]
    }"#;

    const ALIGNED: &str = r#"Looks right. {"isaligned": true}"#;

    const MOVE_DOG: &str = r#"The dog sits too close.
        {"isaligned": false, "optimized_layout": {"entity_layout": [
            {"entity_name": "dog", "size": [1.5, 1.2, 1.1], "position": [-1, 0, 4]}
        ]}}"#;

    fn small_cfg(steps: usize) -> LoopConfig {
        let mut cfg = LoopConfig::with_steps(steps);
        cfg.conditions = ConditionSettings {
            width: 32,
            height: 32,
            patch_size: 8,
            ..ConditionSettings::default()
        };
        cfg
    }

    struct CountingDenoiser {
        calls: usize,
    }

    impl DenoiserPort for CountingDenoiser {
        fn step(
            &mut self,
            z: &Array2<f64>,
            _t: f64,
            _conditions: &Conditions,
        ) -> Result<Array2<f64>, PortError> {
            self.calls += 1;
            Ok(Array2::zeros(z.dim()))
        }
    }

    #[test]
    fn predict_clean_formula_endpoints() {
        let z = array![[2.0, -1.0], [0.5, 4.0]];
        let v = array![[-2.0, 3.0], [1.0, 0.0]];
        assert_eq!(predict_clean(&z, &v, 0.0).unwrap(), z);

        let z2 = array![[2.0]];
        let v2 = array![[-2.0]];
        assert_eq!(predict_clean(&z2, &v2, 0.5).unwrap(), array![[3.0]]);

        let same = array![[0.25, -3.5]];
        let out = predict_clean(&same, &same, 1.0).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn predict_clean_rejects_bad_inputs() {
        let z = Array2::<f64>::zeros((2, 2));
        let v = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            predict_clean(&z, &v, 0.5),
            Err(LoopError::ShapeMismatch(_))
        ));
        let v = Array2::<f64>::zeros((2, 2));
        assert!(matches!(
            predict_clean(&z, &v, 1.5),
            Err(LoopError::InvalidTime(_))
        ));
    }

    #[test]
    fn predict_clean_is_linear_in_scale() {
        let z = array![[1.5, -2.25], [0.125, 3.0]];
        let v = array![[0.5, 1.75], [-1.25, 2.0]];
        let a = 3.7;
        let scaled = predict_clean(&(&z * a), &(&v * a), 0.4).unwrap();
        let base = predict_clean(&z, &v, 0.4).unwrap();
        for (s, b) in scaled.iter().zip(base.iter()) {
            assert!((s - a * b).abs() <= 1e-12 * (1.0 + b.abs() * a.abs()));
        }
    }

    #[test]
    fn parse_response_examples() {
        let aligned = parse_planner_response(
            "I checked sizes.\n\nEverything matches.\n{\"isaligned\": true}",
        )
        .unwrap();
        assert!(aligned.isaligned);
        assert!(aligned.optimized_layout.is_none());
        assert_eq!(aligned.rationale, "I checked sizes.\n\nEverything matches.");

        let misaligned = parse_planner_response(MOVE_DOG).unwrap();
        assert!(!misaligned.isaligned);
        let frag = misaligned.optimized_layout.unwrap();
        assert_eq!(frag.entities.len(), 1);
        assert_eq!(frag.entities[0].position[2], 4.0);

        assert_eq!(
            parse_planner_response("no json at all"),
            Err(LoopError::NoVerdictFound)
        );
        assert!(matches!(
            parse_planner_response(r#"{"isaligned": false}"#),
            Err(LoopError::MalformedLayout(_))
        ));
    }

    #[test]
    fn parse_response_skips_unrelated_objects() {
        let text = r#"{"note": "warmup"} then {"isaligned": true, "rationale": "all good"}"#;
        let verdict = parse_planner_response(text).unwrap();
        assert!(verdict.isaligned);
        assert_eq!(verdict.rationale, "all good");
    }

    #[test]
    fn always_aligned_planner_stops_after_stability_window() {
        let mut planner = ScriptedPlanner::new(PLAN_TEXT, vec![ALIGNED.to_string()]);
        let mut denoiser = CountingDenoiser { calls: 0 };
        let cfg = small_cfg(6);
        let trace = run_refinement_loop("two pets", &mut denoiser, &mut planner, &cfg).unwrap();

        assert_eq!(trace.events.len(), 6);
        assert_eq!(trace.revisions, 0);
        assert_eq!(planner.calls(), 2);
        assert_eq!(denoiser.calls, 6);
        assert_eq!(trace.events[0].verdict, Some(true));
        assert_eq!(trace.events[1].verdict, Some(true));
        for e in &trace.events[2..] {
            assert_eq!(e.verdict, None);
            assert!(!e.re_rendered);
        }
    }

    #[test]
    fn single_revision_scenario_walks_as_scripted() {
        let mut planner =
            ScriptedPlanner::new(PLAN_TEXT, vec![MOVE_DOG.to_string(), ALIGNED.to_string()]);
        let mut denoiser = CountingDenoiser { calls: 0 };
        let cfg = small_cfg(5);
        let trace = run_refinement_loop("two pets", &mut denoiser, &mut planner, &cfg).unwrap();

        assert_eq!(trace.revisions, 1);
        assert_eq!(trace.final_plan.entity("dog").unwrap().position[2], 4.0);
        assert_eq!(trace.final_plan.entity("cat").unwrap().position[2], 2.0);

        let first = &trace.events[0];
        assert_eq!(first.verdict, Some(false));
        assert!(first.re_rendered);
        assert!(first.revision.is_some());
        assert!(first.re_guided_artifact.is_some());

        let re_renders = trace.events.iter().filter(|e| e.re_rendered).count();
        assert_eq!(re_renders, 1);
        assert_eq!(denoiser.calls, 5 + 1);
        assert_eq!(planner.calls(), 1 + 2);
        assert_eq!(trace.events[3].verdict, None);
    }

    #[test]
    fn zero_refinement_budget_completes_without_revisions() {
        let mut planner = ScriptedPlanner::new(PLAN_TEXT, vec![MOVE_DOG.to_string()]);
        let mut denoiser = CountingDenoiser { calls: 0 };
        let mut cfg = small_cfg(5);
        cfg.max_refinements = 0;
        let trace = run_refinement_loop("two pets", &mut denoiser, &mut planner, &cfg).unwrap();

        assert_eq!(trace.revisions, 0);
        assert_eq!(trace.events.len(), 5);
        assert_eq!(planner.calls(), 0);
        assert_eq!(denoiser.calls, 5);
        assert!(trace.events.iter().all(|e| !e.re_rendered));
    }

    #[test]
    fn refinement_budget_caps_revisions() {
        let mut planner = ScriptedPlanner::new(PLAN_TEXT, vec![MOVE_DOG.to_string()]);
        let mut denoiser = CountingDenoiser { calls: 0 };
        let mut cfg = small_cfg(8);
        cfg.max_refinements = 3;
        let trace = run_refinement_loop("two pets", &mut denoiser, &mut planner, &cfg).unwrap();

        assert_eq!(trace.revisions, 3);
        assert_eq!(planner.calls(), 3);
        assert_eq!(denoiser.calls, 8 + 3);
        let evaluated = trace.events.iter().filter(|e| e.verdict.is_some()).count();
        assert_eq!(evaluated, 3);
    }

    #[test]
    fn traces_are_byte_identical_across_runs() {
        let cfg = small_cfg(6);
        let run = || {
            let mut planner =
                ScriptedPlanner::new(PLAN_TEXT, vec![MOVE_DOG.to_string(), ALIGNED.to_string()]);
            let mut denoiser = ToyDenoiser;
            run_refinement_loop("two pets", &mut denoiser, &mut planner, &cfg)
                .unwrap()
                .to_jsonl()
        };
        let a = run();
        let b = run();
        assert!(!a.is_empty());
        assert_eq!(a, b);

        let events = RefinementTrace::events_from_jsonl(&a).unwrap();
        assert_eq!(events.len(), 6);
        assert!(events.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn different_seeds_change_the_artifacts() {
        let mut cfg = small_cfg(3);
        let run = |seed: u64, cfg: &mut LoopConfig| {
            cfg.seed = seed;
            let mut planner = ScriptedPlanner::new(PLAN_TEXT, vec![ALIGNED.to_string()]);
            let mut denoiser = ToyDenoiser;
            run_refinement_loop("two pets", &mut denoiser, &mut planner, cfg).unwrap()
        };
        let a = run(1, &mut cfg);
        let b = run(2, &mut cfg);
        assert_ne!(a.events[0].artifact, b.events[0].artifact);
    }

    #[test]
    fn port_failures_carry_the_step_index() {
        struct FailingDenoiser;
        impl DenoiserPort for FailingDenoiser {
            fn step(
                &mut self,
                _z: &Array2<f64>,
                _t: f64,
                _c: &Conditions,
            ) -> Result<Array2<f64>, PortError> {
                Err(PortError::new("gpu on fire"))
            }
        }
        let mut planner = ScriptedPlanner::new(PLAN_TEXT, vec![]);
        let mut denoiser = FailingDenoiser;
        let cfg = small_cfg(3);
        let err = run_refinement_loop("x", &mut denoiser, &mut planner, &cfg).unwrap_err();
        assert_eq!(
            err,
            LoopError::PortFailure {
                step: Some(0),
                message: "gpu on fire".to_string()
            }
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_cfg(4);
        cfg.eval_schedule = vec![4];
        assert!(matches!(
            run_refinement_loop(
                "x",
                &mut ToyDenoiser,
                &mut ScriptedPlanner::new(PLAN_TEXT, vec![]),
                &cfg
            ),
            Err(LoopError::BadConfig(_))
        ));
        let mut cfg = small_cfg(4);
        cfg.num_steps = 0;
        assert!(cfg.validate().is_err());
    }
}
