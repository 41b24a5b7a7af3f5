//! Pluggable denoiser and planner backends for the refinement loop.
//!
//! The loop only needs two behaviors: a velocity estimate per step and a
//! planner that can produce and revise scene plans. Shipped backends: a
//! scripted planner replaying canned responses, an HTTP planner speaking a
//! chat-completions wire format, and a toy denoiser that steers latents
//! toward the rendered layout preview so the whole loop runs without any
//! model weights.

use crate::conditions::Conditions;
use crate::refine::templates::{
    fill_iterative_user, fill_key_identity, fill_scene_planning_user,
    KEY_IDENTITY_DEFAULT_EXAMPLES, ITERATIVE_OPTIMIZATION_TEMPLATE, SCENE_PLANNING_TEMPLATE,
};
use crate::scene::{serialize_plan, ScenePlan};
use base64::Engine as _;
use ndarray::Array2;
use std::fmt;
use std::time::Duration;

/// Failure inside a port; the loop wraps it with the step index.
#[derive(Debug, Clone, PartialEq)]
pub struct PortError {
    pub message: String,
}

impl PortError {
    pub fn new(message: impl Into<String>) -> PortError {
        PortError {
            message: message.into(),
        }
    }
}

impl fmt::Display for PortError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for PortError {}

/// The predicted-clean image of one step, in attachable form: an 8-bit PGM
/// rendering plus a content hash identifying it in the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArtifact {
    pub id: String,
    pub pgm: Vec<u8>,
}

/// Everything a planner sees when asked to re-evaluate alignment.
pub struct RefineRequest<'a> {
    pub prompt: &'a str,
    pub entities: &'a [String],
    pub plan: &'a ScenePlan,
    pub image: &'a ImageArtifact,
}

/// Produces a velocity estimate for the current latent at time `t`.
pub trait DenoiserPort {
    fn step(
        &mut self,
        z: &Array2<f64>,
        t: f64,
        conditions: &Conditions,
    ) -> Result<Array2<f64>, PortError>;
}

/// Produces an initial plan from a prompt and revises it on request.
/// Both methods return raw response text; the loop parses it.
pub trait PlannerPort {
    fn plan(&mut self, prompt: &str) -> Result<String, PortError>;
    fn refine(&mut self, request: &RefineRequest<'_>) -> Result<String, PortError>;
}

/// Replays canned responses; the workhorse for tests and offline runs.
///
/// The first response answers `plan`, the rest answer `refine` calls in
/// order. Once the refine list runs out the last entry repeats, unless
/// `strict()` was set, in which case running out is an error.
#[derive(Debug, Clone)]
pub struct ScriptedPlanner {
    plan_response: String,
    refine_responses: Vec<String>,
    refine_calls: usize,
    strict: bool,
}

impl ScriptedPlanner {
    pub fn new(plan_response: impl Into<String>, refine_responses: Vec<String>) -> ScriptedPlanner {
        ScriptedPlanner {
            plan_response: plan_response.into(),
            refine_responses,
            refine_calls: 0,
            strict: false,
        }
    }

    /// Error instead of repeating the last refine response when exhausted.
    pub fn strict(mut self) -> ScriptedPlanner {
        self.strict = true;
        self
    }

    /// Loads a script from JSON: `{"plan": "...", "refine": ["...", ...]}`.
    pub fn from_json(text: &str) -> Result<ScriptedPlanner, PortError> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| PortError::new(format!("bad planner script: {e}")))?;
        let plan = value
            .get("plan")
            .and_then(|v| v.as_str())
            .ok_or_else(|| PortError::new("planner script needs a string `plan` key"))?;
        let refine = match value.get("refine") {
            None => Vec::new(),
            Some(arr) => arr
                .as_array()
                .ok_or_else(|| PortError::new("`refine` must be an array of strings"))?
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(String::from)
                        .ok_or_else(|| PortError::new("`refine` must be an array of strings"))
                })
                .collect::<Result<_, _>>()?,
        };
        Ok(ScriptedPlanner::new(plan, refine))
    }

    /// How many refine calls have been answered so far.
    pub fn calls(&self) -> usize {
        self.refine_calls
    }
}

impl PlannerPort for ScriptedPlanner {
    fn plan(&mut self, _prompt: &str) -> Result<String, PortError> {
        Ok(self.plan_response.clone())
    }

    fn refine(&mut self, _request: &RefineRequest<'_>) -> Result<String, PortError> {
        let idx = self.refine_calls;
        self.refine_calls += 1;
        if idx < self.refine_responses.len() {
            Ok(self.refine_responses[idx].clone())
        } else if self.strict {
            Err(PortError::new(format!(
                "script exhausted after {} refine responses",
                self.refine_responses.len()
            )))
        } else {
            match self.refine_responses.last() {
                Some(last) => Ok(last.clone()),
                None => Err(PortError::new("script has no refine responses")),
            }
        }
    }
}

/// How the predicted-clean image travels to an HTTP planner.
#[derive(Debug, Clone, PartialEq)]
pub enum AttachMode {
    /// Embed the PGM as a base64 data URL in the message text.
    Base64,
    /// Write the PGM under this directory and pass the file path.
    FilePath(std::path::PathBuf),
}

/// Planner speaking a chat-completions wire format.
///
/// `plan` runs the two-call flow: entity extraction from the caption, then
/// layout generation with the extracted names. `refine` sends the
/// iterative-optimization instruction with the current layout and image.
/// Transient failures (connection errors, 429, 5xx) are retried twice with
/// exponential backoff.
pub struct HttpPlanner {
    url: String,
    key: Option<String>,
    model: String,
    attach: AttachMode,
    retries: u32,
    backoff: Duration,
    client: reqwest::blocking::Client,
}

impl HttpPlanner {
    pub fn new(url: impl Into<String>, key: Option<String>) -> HttpPlanner {
        HttpPlanner {
            url: url.into(),
            key,
            model: "default".to_string(),
            attach: AttachMode::Base64,
            retries: 2,
            backoff: Duration::from_millis(1000),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("default TLS-free client construction cannot fail"),
        }
    }

    /// Reads `PLANNER_URL` (required) and `PLANNER_KEY` (optional).
    pub fn from_env() -> Result<HttpPlanner, PortError> {
        let url = std::env::var("PLANNER_URL")
            .map_err(|_| PortError::new("PLANNER_URL is not set"))?;
        let key = std::env::var("PLANNER_KEY").ok();
        Ok(HttpPlanner::new(url, key))
    }

    pub fn with_model(mut self, model: impl Into<String>) -> HttpPlanner {
        self.model = model.into();
        self
    }

    pub fn with_attach_mode(mut self, attach: AttachMode) -> HttpPlanner {
        self.attach = attach;
        self
    }

    /// Base delay before the first retry; doubles per attempt. Tests use a
    /// short value to keep the retry path fast.
    pub fn with_backoff(mut self, backoff: Duration) -> HttpPlanner {
        self.backoff = backoff;
        self
    }

    fn chat(&self, messages: serde_json::Value) -> Result<String, PortError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
        });
        let mut last_error = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            let mut req = self.client.post(&self.url).json(&body);
            if let Some(key) = &self.key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Err(e) => last_error = format!("request failed: {e}"),
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let value: serde_json::Value = resp
                            .json()
                            .map_err(|e| PortError::new(format!("bad response body: {e}")))?;
                        return value["choices"][0]["message"]["content"]
                            .as_str()
                            .map(String::from)
                            .ok_or_else(|| {
                                PortError::new("response has no choices[0].message.content")
                            });
                    }
                    last_error = format!("endpoint returned {status}");
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        break;
                    }
                }
            }
        }
        Err(PortError::new(last_error))
    }

    fn image_ref(&self, image: &ImageArtifact) -> Result<String, PortError> {
        match &self.attach {
            AttachMode::Base64 => Ok(format!(
                "data:image/x-portable-graymap;base64,{}",
                base64::engine::general_purpose::STANDARD.encode(&image.pgm)
            )),
            AttachMode::FilePath(dir) => {
                let path = dir.join(format!("{}.pgm", image.id));
                std::fs::write(&path, &image.pgm)
                    .map_err(|e| PortError::new(format!("writing {}: {e}", path.display())))?;
                Ok(path.display().to_string())
            }
        }
    }
}

/// Pulls the first bracketed list out of planner text and reads it as a
/// list of strings, accepting both JSON and Python-style quoting.
pub fn parse_entity_list(text: &str) -> Result<Vec<String>, PortError> {
    let start = text
        .find('[')
        .ok_or_else(|| PortError::new("no list found in entity response"))?;
    let end = text[start..]
        .find(']')
        .map(|i| start + i)
        .ok_or_else(|| PortError::new("unterminated list in entity response"))?;
    let slice = &text[start..=end];
    if let Ok(list) = serde_json::from_str::<Vec<String>>(slice) {
        return Ok(list);
    }
    let json_ish = slice.replace('\'', "\"");
    serde_json::from_str::<Vec<String>>(&json_ish)
        .map_err(|e| PortError::new(format!("unreadable entity list `{slice}`: {e}")))
}

impl PlannerPort for HttpPlanner {
    fn plan(&mut self, prompt: &str) -> Result<String, PortError> {
        let extraction = self.chat(serde_json::json!([
            {"role": "user", "content": fill_key_identity(prompt, KEY_IDENTITY_DEFAULT_EXAMPLES)},
        ]))?;
        let entities = parse_entity_list(&extraction)?;
        self.chat(serde_json::json!([
            {"role": "system", "content": SCENE_PLANNING_TEMPLATE},
            {"role": "user", "content": fill_scene_planning_user(prompt, &entities)},
        ]))
    }

    fn refine(&mut self, request: &RefineRequest<'_>) -> Result<String, PortError> {
        let image_ref = self.image_ref(request.image)?;
        let user = fill_iterative_user(
            request.prompt,
            request.entities,
            &serialize_plan(request.plan),
            &image_ref,
        );
        self.chat(serde_json::json!([
            {"role": "system", "content": ITERATIVE_OPTIMIZATION_TEMPLATE},
            {"role": "user", "content": user},
        ]))
    }
}

/// Denoiser that steers latents toward the normalized depth preview.
///
/// The target `x*` maps each rendered depth to `(far - d) / (far - near)`
/// clamped to [0, 1], with empty pixels at 0. The returned velocity is
/// `(z - x*) / t`, so the predicted clean image is exactly `x*` at every
/// step; this exercises the full loop, including re-guidance after plan
/// revisions, with no model in sight.
#[derive(Debug, Clone, Default)]
pub struct ToyDenoiser;

impl ToyDenoiser {
    /// The preview target for the current conditions.
    pub fn target(conditions: &Conditions) -> Array2<f64> {
        let (w, h) = (conditions.depth.width(), conditions.depth.height());
        let near = conditions.near as f64;
        let far = conditions.far as f64;
        Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            let d = conditions.depth.get(x as u32, y as u32) as f64;
            if d.is_finite() {
                ((far - d) / (far - near)).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
    }
}

impl DenoiserPort for ToyDenoiser {
    fn step(
        &mut self,
        z: &Array2<f64>,
        t: f64,
        conditions: &Conditions,
    ) -> Result<Array2<f64>, PortError> {
        let target = ToyDenoiser::target(conditions);
        if target.dim() != z.dim() {
            return Err(PortError::new(format!(
                "latent is {:?} but conditions render {:?}",
                z.dim(),
                target.dim()
            )));
        }
        if t > 0.0 {
            Ok((z - &target) / t)
        } else {
            Ok(z - &target)
        }
    }
}
