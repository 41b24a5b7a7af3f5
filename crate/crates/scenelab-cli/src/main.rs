//! Command-line front end: one subcommand per pipeline stage.
//!
//! Every file-emitting subcommand writes its outputs plus a `meta.json`
//! recording the command, the effective configuration, and SHA-256 hashes
//! of all inputs and outputs, so any stage can be re-verified later.
//! Exit codes: 0 success, 1 validation failure, 2 I/O or port failure,
//! 64 usage error.

use clap::{Args, Parser, Subcommand};
use scenelab::attention::MaskExport;
use scenelab::camera::{project_box_mask, Box3D, CameraConfig, CameraModel, EntityMask2D};
use scenelab::conditions::{render_conditions, ConditionSettings};
use scenelab::depth::{decode_depth, default_depth_range, encode_depth, render_depth};
use scenelab::metrics::{
    bench_to_jsonl, consistency_3d, detections_from_json, generate_bench_prompts,
    generate_multi_prompts, score_relation, score_relation_soft, CategoryTable, DetectionRecord,
    Relation, RelationSpec, ScoreMargins, SoftScales,
};
use scenelab::obb::{
    backproject_masked_depth, brute_force_obb_oracle, fit_min_volume_obb, read_xyz, read_xyz_raw,
    OrientedBox3D, PointCloud, PointFrame,
};
use scenelab::refine::{
    run_refinement_loop, HttpPlanner, LoopConfig, LoopError, PlannerPort, ScriptedPlanner,
    ToyDenoiser,
};
use scenelab::scene::{
    apply_refinement, parse_fragment, parse_plan, serialize_plan, validate_plan, ScenePlan,
    Severity,
};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "scenelab", version, about = "Scene-plan conditioning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a scene plan or apply a refinement fragment.
    Plan {
        #[command(subcommand)]
        action: PlanCmd,
    },
    /// Render a depth map or per-entity occupancy masks.
    Render {
        #[command(subcommand)]
        action: RenderCmd,
    },
    /// Build or audit a structured attention mask.
    Mask {
        #[command(subcommand)]
        action: MaskCmd,
    },
    /// Fit gravity-aligned oriented boxes to 3D points.
    Fit {
        #[command(subcommand)]
        action: FitCmd,
    },
    /// Run the predict-evaluate-refine loop.
    Loop {
        #[command(subcommand)]
        action: LoopCmd,
    },
    /// Score spatial relations or depth consistency.
    Score {
        #[command(subcommand)]
        action: ScoreCmd,
    },
    /// Generate benchmark prompts.
    Bench {
        #[command(subcommand)]
        action: BenchCmd,
    },
}

#[derive(Subcommand)]
enum PlanCmd {
    /// Parse a plan and report validation findings.
    Validate {
        /// Plan JSON file (prose around the JSON is tolerated).
        #[arg(long)]
        plan: PathBuf,
        /// Directory for the normalized plan and meta.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a refinement fragment and print the patched plan.
    Apply {
        #[arg(long)]
        plan: PathBuf,
        /// Fragment JSON: a partial plan or a bare entity array.
        #[arg(long)]
        fragment: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RenderCmd {
    /// Z-buffer the plan's boxes into depth.dpf1 and depth.pgm.
    Depth {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        image: ImageArgs,
        #[command(flatten)]
        camera: CameraArgs,
        /// Near distance for the preview encoding; default derived.
        #[arg(long)]
        near: Option<f32>,
        /// Far distance for the preview encoding; default derived.
        #[arg(long)]
        far: Option<f32>,
    },
    /// Project every entity to a filled occupancy mask.
    Masks {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        image: ImageArgs,
        #[command(flatten)]
        camera: CameraArgs,
    },
}

#[derive(Subcommand)]
enum MaskCmd {
    /// Render conditions and export the token-level attention mask.
    Build {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        image: ImageArgs,
        #[command(flatten)]
        camera: CameraArgs,
        /// Square patch edge in pixels for image tokenization.
        #[arg(long, default_value_t = 16)]
        patch: u32,
        /// Minimum fraction of covered pixels for a patch bit.
        #[arg(long, default_value_t = 0.0)]
        min_coverage: f64,
        /// Let condition segments attend to each other.
        #[arg(long)]
        no_global_isolation: bool,
        /// Restrict depth tokens to entity-owned image tokens.
        #[arg(long)]
        local_depth: bool,
    },
    /// Re-derive every cell of an exported mask and report mismatches.
    Audit {
        /// Mask export JSON produced by `mask build`.
        #[arg(long)]
        mask: PathBuf,
    },
}

#[derive(Subcommand)]
enum FitCmd {
    /// Fit the minimum-volume gravity-aligned box.
    Obb {
        /// Point cloud file: .xyz text or .bin packed f32 triples.
        #[arg(long)]
        cloud: Option<PathBuf>,
        /// DPF1 depth file; requires --mask and --plan.
        #[arg(long)]
        depth: Option<PathBuf>,
        /// PBM occupancy mask selecting the depth pixels to lift.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Plan file supplying the camera parameters.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        camera: CameraArgs,
        /// Entity name used in the emitted plan fragment.
        #[arg(long, default_value = "fitted")]
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exhaustive yaw sweep for cross-checking the fitter.
    Oracle {
        #[arg(long)]
        cloud: PathBuf,
        /// Yaw step in degrees, in (0, 5].
        #[arg(long, default_value_t = 0.25)]
        step: f64,
        #[arg(long, default_value = "fitted")]
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum LoopCmd {
    /// Drive the loop with the built-in denoiser and a planner port.
    Run {
        /// User prompt handed to the planner.
        #[arg(long)]
        prompt: String,
        /// Scripted planner JSON; without it PLANNER_URL must be set.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Comma-separated step indices to evaluate; default all.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long, default_value_t = 5)]
        max_refinements: usize,
        #[arg(long, default_value_t = 2)]
        stability_window: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        image: ImageArgs,
        #[command(flatten)]
        camera: CameraArgs,
        #[arg(long, default_value_t = 16)]
        patch: u32,
    },
}

#[derive(Subcommand)]
enum ScoreCmd {
    /// Score one relation clause against a detections file.
    Relation {
        /// JSON array of {label, bbox, depth} records.
        #[arg(long)]
        detections: PathBuf,
        /// RelationSpec JSON file; alternative to the three flags below.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        object: Option<String>,
        /// front, behind, front_left, front_right, back_left, back_right.
        #[arg(long)]
        relation: Option<String>,
        /// Required center separation in pixels for horizontal components.
        #[arg(long, default_value_t = 0.0)]
        margin_horizontal: f64,
        /// Required separation in depth units for depth components.
        #[arg(long, default_value_t = 0.0)]
        margin_depth: f64,
        /// Sigmoid diagnostic score instead of the binary benchmark score.
        #[arg(long)]
        soft: bool,
    },
    /// Print the depth-consistency score for two shift values.
    Consistency {
        #[arg(long)]
        d1: f64,
        #[arg(long)]
        d2: f64,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Write benchmark prompts as JSON lines.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Basic prompts per relation.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Additional two-clause prompts.
        #[arg(long, default_value_t = 0)]
        multi: usize,
        /// Comma-separated relation names; default all six.
        #[arg(long)]
        relations: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Category table JSON; default the built-in table.
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ImageArgs {
    /// Image width in pixels.
    #[arg(long, default_value_t = 1024)]
    width: u32,
    /// Image height in pixels.
    #[arg(long, default_value_t = 1024)]
    height: u32,
}

#[derive(Args)]
struct CameraArgs {
    /// Camera distance as a multiple of scene_size.
    #[arg(long)]
    distance_factor: Option<f64>,
    /// Vertical field of view in degrees.
    #[arg(long)]
    vfov: Option<f64>,
}

impl CameraArgs {
    fn config(&self) -> CameraConfig {
        let mut config = CameraConfig::default();
        if let Some(d) = self.distance_factor {
            config.distance_factor = d;
        }
        if let Some(v) = self.vfov {
            config.vfov_deg = v;
        }
        config
    }

    fn echo(&self) -> serde_json::Value {
        let config = self.config();
        serde_json::json!({
            "distance_factor": config.distance_factor,
            "vfov_deg": config.vfov_deg,
        })
    }
}

enum CliError {
    /// Bad input content or arguments; exit 1.
    Validation(String),
    /// Filesystem or port trouble; exit 2.
    Io(String),
}

fn validation(e: impl fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Collects outputs under one directory and writes the closing meta.json.
struct Emitter {
    dir: PathBuf,
    meta: Meta,
}

#[derive(serde::Serialize)]
struct Meta {
    command: String,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Emitter {
    fn new(dir: &Path, command: &str, config: serde_json::Value) -> Result<Emitter, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Emitter {
            dir: dir.to_path_buf(),
            meta: Meta {
                command: command.to_string(),
                config,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
        })
    }

    fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.meta
            .inputs
            .insert(path.display().to_string(), sha256_hex(bytes));
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.meta.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn finish(self) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        text.push('\n');
        let path = self.dir.join("meta.json");
        fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes)
        .map_err(|_| CliError::Validation(format!("{}: not valid UTF-8", path.display())))
}

fn plan_from_file(path: &Path) -> Result<(ScenePlan, Vec<u8>), CliError> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| CliError::Validation(format!("{}: not valid UTF-8", path.display())))?;
    let plan = parse_plan(text).map_err(validation)?;
    Ok((plan, bytes))
}

fn entity_slug(name: &str) -> String {
    name.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn parse_relation_list(text: Option<&str>) -> Result<Vec<Relation>, CliError> {
    match text {
        None => Ok(Relation::ALL.to_vec()),
        Some(list) => list
            .split(',')
            .map(|t| t.trim().parse::<Relation>().map_err(validation))
            .collect(),
    }
}

fn obb_json(obb: &OrientedBox3D) -> serde_json::Value {
    serde_json::json!({
        "center": [obb.center.x, obb.center.y, obb.center.z],
        "half_extents": obb.half_extents,
        "yaw_deg": obb.yaw_deg,
        "volume": obb.volume(),
    })
}

fn fragment_json(obb: &OrientedBox3D, name: &str) -> serde_json::Value {
    let spec = obb.to_entity_fragment(name);
    let mut entry = serde_json::Map::new();
    entry.insert("entity_name".into(), spec.entity_name.clone().into());
    entry.insert("size".into(), serde_json::json!(spec.size));
    entry.insert("position".into(), serde_json::json!(spec.position));
    if spec.yaw_deg != 0.0 {
        entry.insert("yaw".into(), serde_json::json!(spec.yaw_deg));
    }
    serde_json::json!({ "entity_layout": [serde_json::Value::Object(entry)] })
}

fn pretty(value: &serde_json::Value) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    text.into_bytes()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Plan { action } => run_plan(action),
        Command::Render { action } => run_render(action),
        Command::Mask { action } => run_mask(action),
        Command::Fit { action } => run_fit(action),
        Command::Loop { action } => run_loop(action),
        Command::Score { action } => run_score(action),
        Command::Bench { action } => run_bench(action),
    }
}

fn run_plan(action: PlanCmd) -> Result<(), CliError> {
    match action {
        PlanCmd::Validate { plan, out } => {
            let (parsed, bytes) = plan_from_file(&plan)?;
            let report = validate_plan(&parsed);
            for issue in &report.issues {
                let severity = match issue.severity {
                    Severity::Error => "error",
                    Severity::Warning => "warning",
                };
                match &issue.entity {
                    Some(name) => println!("{severity}: [{name}] {}", issue.message),
                    None => println!("{severity}: {}", issue.message),
                }
            }
            if !report.is_usable() {
                return Err(CliError::Validation(format!(
                    "plan has {} validation error(s)",
                    report.errors().count()
                )));
            }
            println!(
                "ok: {} entities, {} warning(s)",
                parsed.entities.len(),
                report.warnings().count()
            );
            if let Some(dir) = out {
                let mut emitter = Emitter::new(
                    &dir,
                    "plan validate",
                    serde_json::json!({"plan": plan.display().to_string()}),
                )?;
                emitter.record_input(&plan, &bytes);
                emitter.write("plan.json", serialize_plan(&parsed).as_bytes())?;
                emitter.finish()?;
            }
            Ok(())
        }
        PlanCmd::Apply { plan, fragment, out } => {
            let (parsed, plan_bytes) = plan_from_file(&plan)?;
            let fragment_text = read_text(&fragment)?;
            let parsed_fragment = parse_fragment(&fragment_text).map_err(validation)?;
            let patched = apply_refinement(&parsed, &parsed_fragment).map_err(validation)?;
            let serialized = serialize_plan(&patched);
            print!("{serialized}");
            if let Some(dir) = out {
                let mut emitter = Emitter::new(
                    &dir,
                    "plan apply",
                    serde_json::json!({
                        "plan": plan.display().to_string(),
                        "fragment": fragment.display().to_string(),
                    }),
                )?;
                emitter.record_input(&plan, &plan_bytes);
                emitter.record_input(&fragment, fragment_text.as_bytes());
                emitter.write("plan.json", serialized.as_bytes())?;
                emitter.finish()?;
            }
            Ok(())
        }
    }
}

fn run_render(action: RenderCmd) -> Result<(), CliError> {
    match action {
        RenderCmd::Depth {
            plan,
            out,
            image,
            camera,
            near,
            far,
        } => {
            let (parsed, bytes) = plan_from_file(&plan)?;
            let model =
                CameraModel::derive(&parsed.parameters, image.width, image.height, &camera.config())
                    .map_err(validation)?;
            let boxes: Vec<Box3D> = parsed.entities.iter().map(Box3D::from_entity).collect();
            let depth = render_depth(&model, &boxes);
            let (default_near, default_far) = default_depth_range(&parsed.parameters, &model);
            let near = near.unwrap_or(default_near);
            let far = far.unwrap_or(default_far);
            let encoding = encode_depth(&depth, near, far).map_err(validation)?;

            let mut emitter = Emitter::new(
                &out,
                "render depth",
                serde_json::json!({
                    "plan": plan.display().to_string(),
                    "width": image.width,
                    "height": image.height,
                    "camera": camera.echo(),
                    "near": near,
                    "far": far,
                }),
            )?;
            emitter.record_input(&plan, &bytes);
            emitter.write("depth.dpf1", &encoding.raw)?;
            emitter.write("depth.pgm", &encoding.preview)?;
            emitter.finish()?;
            println!("wrote depth.dpf1 and depth.pgm to {}", out.display());
            Ok(())
        }
        RenderCmd::Masks {
            plan,
            out,
            image,
            camera,
        } => {
            let (parsed, bytes) = plan_from_file(&plan)?;
            let model =
                CameraModel::derive(&parsed.parameters, image.width, image.height, &camera.config())
                    .map_err(validation)?;
            let mut emitter = Emitter::new(
                &out,
                "render masks",
                serde_json::json!({
                    "plan": plan.display().to_string(),
                    "width": image.width,
                    "height": image.height,
                    "camera": camera.echo(),
                }),
            )?;
            emitter.record_input(&plan, &bytes);

            let mut summaries = Vec::new();
            for (i, entity) in parsed.entities.iter().enumerate() {
                let projection = project_box_mask(&model, &Box3D::from_entity(entity));
                let name = format!("mask_{i:02}_{}.pbm", entity_slug(&entity.entity_name));
                emitter.write(&name, &projection.mask.to_pbm())?;
                let rle = projection.mask.to_rle();
                summaries.push(serde_json::json!({
                    "entity_name": entity.entity_name,
                    "file": name,
                    "fully_behind": projection.fully_behind,
                    "pixels": projection.mask.count_ones(),
                    "rle": rle.rle,
                }));
            }
            let bundle = serde_json::json!({
                "width": image.width,
                "height": image.height,
                "masks": summaries,
            });
            emitter.write("masks.json", &pretty(&bundle))?;
            emitter.finish()?;
            println!(
                "wrote {} mask(s) and masks.json to {}",
                parsed.entities.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn run_mask(action: MaskCmd) -> Result<(), CliError> {
    match action {
        MaskCmd::Build {
            plan,
            out,
            image,
            camera,
            patch,
            min_coverage,
            no_global_isolation,
            local_depth,
        } => {
            let (parsed, bytes) = plan_from_file(&plan)?;
            let mut settings = ConditionSettings {
                width: image.width,
                height: image.height,
                patch_size: patch,
                camera: camera.config(),
                min_coverage,
                ..ConditionSettings::default()
            };
            settings.rules.global_isolated = !no_global_isolation;
            settings.rules.depth_global = !local_depth;
            let conditions = render_conditions(&parsed, &settings).map_err(validation)?;
            let export = conditions.attention.to_export();

            let mut emitter = Emitter::new(
                &out,
                "mask build",
                serde_json::json!({
                    "plan": plan.display().to_string(),
                    "width": image.width,
                    "height": image.height,
                    "patch": patch,
                    "min_coverage": min_coverage,
                    "camera": camera.echo(),
                    "global_isolated": settings.rules.global_isolated,
                    "depth_global": settings.rules.depth_global,
                }),
            )?;
            emitter.record_input(&plan, &bytes);
            let export_json = serde_json::to_value(&export).expect("export serializes");
            emitter.write("attention.json", &pretty(&export_json))?;

            let total = conditions.attention.layout().total();
            if total <= 1024 {
                emitter.write("attention.pbm", &conditions.attention.materialize().to_pbm())?;
            }
            emitter.finish()?;
            println!(
                "wrote attention.json ({total} tokens{}) to {}",
                if total <= 1024 { " + attention.pbm" } else { "" },
                out.display()
            );
            Ok(())
        }
        MaskCmd::Audit { mask } => {
            let text = read_text(&mask)?;
            let export: MaskExport = serde_json::from_str(&text).map_err(validation)?;
            let rebuilt = scenelab::attention::AttentionMask::from_export(&export)
                .map_err(validation)?;
            let report = scenelab::attention::audit_mask(&rebuilt);
            if report.is_clean() {
                println!("clean: {} cells checked", report.checked);
                return Ok(());
            }
            for v in report.violations.iter().take(10) {
                println!(
                    "violation: q={} ({}) k={} ({}) expected {} got {}",
                    v.q, v.q_segment, v.k, v.k_segment, v.expected, v.actual
                );
            }
            Err(CliError::Validation(format!(
                "{} violation(s) in {} cells",
                report.violations.len(),
                report.checked
            )))
        }
    }
}

fn load_cloud(path: &Path) -> Result<(PointCloud, Vec<u8>), CliError> {
    let bytes = read_bytes(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let cloud = match ext {
        "xyz" => {
            let text = std::str::from_utf8(&bytes)
                .map_err(|_| CliError::Validation(format!("{}: not valid UTF-8", path.display())))?;
            read_xyz(text, PointFrame::Metric).map_err(validation)?
        }
        "bin" => read_xyz_raw(&bytes, PointFrame::Metric).map_err(validation)?,
        other => {
            return Err(CliError::Validation(format!(
                "cloud file must end in .xyz or .bin, got {other:?}"
            )))
        }
    };
    Ok((cloud, bytes))
}

fn emit_obb(
    obb: &OrientedBox3D,
    name: &str,
    out: Option<&Path>,
    command: &str,
    config: serde_json::Value,
    inputs: &[(&Path, &[u8])],
) -> Result<(), CliError> {
    let summary = obb_json(obb);
    print!("{}", String::from_utf8(pretty(&summary)).expect("utf8"));
    if let Some(dir) = out {
        let mut emitter = Emitter::new(dir, command, config)?;
        for (path, bytes) in inputs {
            emitter.record_input(path, bytes);
        }
        emitter.write("obb.json", &pretty(&summary))?;
        emitter.write("fragment.json", &pretty(&fragment_json(obb, name)))?;
        emitter.finish()?;
    }
    Ok(())
}

fn run_fit(action: FitCmd) -> Result<(), CliError> {
    match action {
        FitCmd::Obb {
            cloud,
            depth,
            mask,
            plan,
            camera,
            name,
            out,
        } => match (cloud, depth, mask, plan) {
            (Some(cloud_path), None, None, None) => {
                let (points, bytes) = load_cloud(&cloud_path)?;
                let obb = fit_min_volume_obb(&points);
                emit_obb(
                    &obb,
                    &name,
                    out.as_deref(),
                    "fit obb",
                    serde_json::json!({
                        "cloud": cloud_path.display().to_string(),
                        "name": name,
                    }),
                    &[(&cloud_path, &bytes)],
                )
            }
            (None, Some(depth_path), Some(mask_path), Some(plan_path)) => {
                let depth_bytes = read_bytes(&depth_path)?;
                let (depth_map, _near, _far) = decode_depth(&depth_bytes).map_err(validation)?;
                let mask_bytes = read_bytes(&mask_path)?;
                let mask = EntityMask2D::from_pbm(&mask_bytes).map_err(validation)?;
                let (parsed, plan_bytes) = plan_from_file(&plan_path)?;
                let model = CameraModel::derive(
                    &parsed.parameters,
                    depth_map.width(),
                    depth_map.height(),
                    &camera.config(),
                )
                .map_err(validation)?;
                let points =
                    backproject_masked_depth(&model, &depth_map, &mask, PointFrame::Metric)
                        .map_err(validation)?;
                let obb = fit_min_volume_obb(&points);
                emit_obb(
                    &obb,
                    &name,
                    out.as_deref(),
                    "fit obb",
                    serde_json::json!({
                        "depth": depth_path.display().to_string(),
                        "mask": mask_path.display().to_string(),
                        "plan": plan_path.display().to_string(),
                        "camera": camera.echo(),
                        "name": name,
                    }),
                    &[
                        (&depth_path, &depth_bytes),
                        (&mask_path, &mask_bytes),
                        (&plan_path, &plan_bytes),
                    ],
                )
            }
            _ => Err(CliError::Validation(
                "pass either --cloud, or all of --depth, --mask, and --plan".into(),
            )),
        },
        FitCmd::Oracle {
            cloud,
            step,
            name,
            out,
        } => {
            if !(step > 0.0 && step <= 5.0) {
                return Err(CliError::Validation(format!(
                    "--step must be in (0, 5], got {step}"
                )));
            }
            let (points, bytes) = load_cloud(&cloud)?;
            let obb = brute_force_obb_oracle(&points, step);
            emit_obb(
                &obb,
                &name,
                out.as_deref(),
                "fit oracle",
                serde_json::json!({
                    "cloud": cloud.display().to_string(),
                    "step": step,
                    "name": name,
                }),
                &[(&cloud, &bytes)],
            )
        }
    }
}

fn run_loop(action: LoopCmd) -> Result<(), CliError> {
    let LoopCmd::Run {
        prompt,
        script,
        out,
        steps,
        schedule,
        max_refinements,
        stability_window,
        seed,
        image,
        camera,
        patch,
    } = action;

    let mut script_input: Option<(PathBuf, String)> = None;
    let mut planner: Box<dyn PlannerPort> = match &script {
        Some(path) => {
            let text = read_text(path)?;
            let scripted = ScriptedPlanner::from_json(&text).map_err(validation)?;
            script_input = Some((path.clone(), text));
            Box::new(scripted)
        }
        None => match HttpPlanner::from_env() {
            Ok(http) => Box::new(http),
            Err(e) => {
                return Err(CliError::Validation(format!(
                    "no --script and no usable planner endpoint: {e}"
                )))
            }
        },
    };

    let eval_schedule = match &schedule {
        None => (0..steps).collect(),
        Some(list) => list
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Validation(format!("bad schedule entry {t:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    let cfg = LoopConfig {
        num_steps: steps,
        eval_schedule,
        max_refinements,
        stability_window,
        seed,
        conditions: ConditionSettings {
            width: image.width,
            height: image.height,
            patch_size: patch,
            camera: camera.config(),
            ..ConditionSettings::default()
        },
    };

    let mut denoiser = ToyDenoiser;
    let trace = run_refinement_loop(&prompt, &mut denoiser, planner.as_mut(), &cfg).map_err(
        |e| match e {
            LoopError::PortFailure { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        },
    )?;

    let mut emitter = Emitter::new(
        &out,
        "loop run",
        serde_json::json!({
            "prompt": prompt,
            "script": script.as_ref().map(|p| p.display().to_string()),
            "steps": steps,
            "schedule": cfg.eval_schedule,
            "max_refinements": max_refinements,
            "stability_window": stability_window,
            "seed": seed,
            "width": image.width,
            "height": image.height,
            "patch": patch,
            "camera": camera.echo(),
        }),
    )?;
    if let Some((path, text)) = &script_input {
        emitter.record_input(path, text.as_bytes());
    }
    emitter.write("trace.jsonl", trace.to_jsonl().as_bytes())?;
    emitter.write("final_plan.json", serialize_plan(&trace.final_plan).as_bytes())?;
    emitter.finish()?;
    println!(
        "completed {} step(s) with {} revision(s); trace.jsonl and final_plan.json in {}",
        trace.events.len(),
        trace.revisions,
        out.display()
    );
    Ok(())
}

fn run_score(action: ScoreCmd) -> Result<(), CliError> {
    match action {
        ScoreCmd::Relation {
            detections,
            spec,
            subject,
            object,
            relation,
            margin_horizontal,
            margin_depth,
            soft,
        } => {
            let text = read_text(&detections)?;
            let records = detections_from_json(&text).map_err(validation)?;
            let (subject_label, object_label, relation) = match (spec, subject, object, relation) {
                (Some(path), None, None, None) => {
                    let spec_text = read_text(&path)?;
                    let parsed: RelationSpec =
                        serde_json::from_str(&spec_text).map_err(validation)?;
                    (parsed.subject, parsed.object, parsed.relation)
                }
                (None, Some(s), Some(o), Some(r)) => {
                    (s, o, r.parse::<Relation>().map_err(validation)?)
                }
                _ => {
                    return Err(CliError::Validation(
                        "pass either --spec, or all of --subject, --object, and --relation".into(),
                    ))
                }
            };

            let find = |label: &str| -> Option<&DetectionRecord> {
                records.iter().find(|r| r.label == label)
            };
            let (Some(subject_record), Some(object_record)) =
                (find(&subject_label), find(&object_label))
            else {
                for label in [&subject_label, &object_label] {
                    if find(label).is_none() {
                        eprintln!("note: no detection labeled {label:?}; scoring 0");
                    }
                }
                println!("0");
                return Ok(());
            };

            let score = if soft {
                score_relation_soft(subject_record, object_record, relation, SoftScales::default())
            } else {
                score_relation(
                    subject_record,
                    object_record,
                    relation,
                    ScoreMargins {
                        horizontal: margin_horizontal,
                        depth: margin_depth,
                    },
                )
            };
            println!("{score}");
            Ok(())
        }
        ScoreCmd::Consistency { d1, d2 } => {
            if !d1.is_finite() || !d2.is_finite() {
                return Err(CliError::Validation(format!(
                    "shift values must be finite, got {d1} and {d2}"
                )));
            }
            println!("{}", consistency_3d(d1, d2));
            Ok(())
        }
    }
}

fn run_bench(action: BenchCmd) -> Result<(), CliError> {
    let BenchCmd::Gen {
        out,
        count,
        multi,
        relations,
        seed,
        table,
    } = action;

    let mut table_input: Option<(PathBuf, String)> = None;
    let owned;
    let category_table: &CategoryTable = match &table {
        Some(path) => {
            let text = read_text(path)?;
            owned = CategoryTable::from_json(&text).map_err(validation)?;
            table_input = Some((path.clone(), text));
            &owned
        }
        None => CategoryTable::builtin(),
    };
    let relation_list = parse_relation_list(relations.as_deref())?;

    let mut prompts =
        generate_bench_prompts(category_table, &relation_list, count, seed).map_err(validation)?;
    if multi > 0 {
        prompts.extend(
            generate_multi_prompts(category_table, &relation_list, multi, seed.wrapping_add(1))
                .map_err(validation)?,
        );
    }

    let mut emitter = Emitter::new(
        &out,
        "bench gen",
        serde_json::json!({
            "count": count,
            "multi": multi,
            "relations": relation_list.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
            "seed": seed,
            "table": table.as_ref().map(|p| p.display().to_string()),
        }),
    )?;
    if let Some((path, text)) = &table_input {
        emitter.record_input(path, text.as_bytes());
    }
    emitter.write("bench.jsonl", bench_to_jsonl(&prompts).as_bytes())?;
    emitter.finish()?;
    println!("wrote {} prompt(s) to {}", prompts.len(), out.display());
    Ok(())
}
