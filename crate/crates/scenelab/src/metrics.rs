//! Spatial-relation scoring and benchmark prompt generation.
//!
//! The scorer consumes detection records (label, bounding box, estimated
//! depth) produced by an external detector; nothing here looks at pixels.
//! Relations decompose into one-dimensional components: a depth comparison
//! and, for diagonal relations, a horizontal comparison. Component scores
//! are binary with a strict margin and the relation score is their mean.
//! Smaller depth means closer to the camera, so "front" wins when the
//! subject's depth is smaller.
//!
//! The prompt generator samples subject/object pairs from a category table
//! (shipped as a JSON asset) whose scene sets intersect, and renders them
//! through the fixed benchmark template.

use crate::camera::EntityMask2D;
use crate::depth::DepthMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    UnknownRelation(String),
    BadDetection(String),
    BadTable(String),
    BadFormat(String),
    /// The sampler could not reach the requested prompt count.
    ExhaustedCombinations { needed: usize, produced: usize },
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::UnknownRelation(name) => write!(f, "unknown relation {name:?}"),
            MetricError::BadDetection(msg) => write!(f, "bad detection: {msg}"),
            MetricError::BadTable(msg) => write!(f, "bad category table: {msg}"),
            MetricError::BadFormat(msg) => write!(f, "bad format: {msg}"),
            MetricError::ExhaustedCombinations { needed, produced } => write!(
                f,
                "ran out of unique combinations: needed {needed}, produced {produced}"
            ),
        }
    }
}

impl std::error::Error for MetricError {}

/// The closed set of benchmark relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Front,
    Behind,
    FrontLeft,
    FrontRight,
    BackLeft,
    BackRight,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::Front,
        Relation::Behind,
        Relation::FrontLeft,
        Relation::FrontRight,
        Relation::BackLeft,
        Relation::BackRight,
    ];

    /// The relation seen from the other participant's point of view.
    pub fn opposite(self) -> Relation {
        match self {
            Relation::Front => Relation::Behind,
            Relation::Behind => Relation::Front,
            Relation::FrontLeft => Relation::BackRight,
            Relation::FrontRight => Relation::BackLeft,
            Relation::BackLeft => Relation::FrontRight,
            Relation::BackRight => Relation::FrontLeft,
        }
    }

    /// English phrase used between the two object mentions in a prompt.
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::Front => "in front of",
            Relation::Behind => "behind",
            Relation::FrontLeft => "to the front left of",
            Relation::FrontRight => "to the front right of",
            Relation::BackLeft => "to the back left of",
            Relation::BackRight => "to the back right of",
        }
    }

    fn token(self) -> &'static str {
        match self {
            Relation::Front => "front",
            Relation::Behind => "behind",
            Relation::FrontLeft => "front_left",
            Relation::FrontRight => "front_right",
            Relation::BackLeft => "back_left",
            Relation::BackRight => "back_right",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Relation {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Relation, MetricError> {
        Relation::ALL
            .into_iter()
            .find(|r| r.token() == s)
            .ok_or_else(|| MetricError::UnknownRelation(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Front,
    Back,
}

/// One single-axis comparison extracted from a relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationComponent {
    pub axis: Axis,
    pub direction: Direction,
}

impl RelationComponent {
    pub const fn new(axis: Axis, direction: Direction) -> RelationComponent {
        RelationComponent { axis, direction }
    }
}

/// Splits a relation into its one-dimensional components, depth first.
pub fn decompose_relation(relation: Relation) -> Vec<RelationComponent> {
    use Axis::{Depth, Horizontal};
    use Direction::{Back, Front, Left, Right};
    match relation {
        Relation::Front => vec![RelationComponent::new(Depth, Front)],
        Relation::Behind => vec![RelationComponent::new(Depth, Back)],
        Relation::FrontLeft => vec![
            RelationComponent::new(Depth, Front),
            RelationComponent::new(Horizontal, Left),
        ],
        Relation::FrontRight => vec![
            RelationComponent::new(Depth, Front),
            RelationComponent::new(Horizontal, Right),
        ],
        Relation::BackLeft => vec![
            RelationComponent::new(Depth, Back),
            RelationComponent::new(Horizontal, Left),
        ],
        Relation::BackRight => vec![
            RelationComponent::new(Depth, Back),
            RelationComponent::new(Horizontal, Right),
        ],
    }
}

/// One detected object: label, pixel bounding box, and a depth estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub label: String,
    /// `[x1, y1, x2, y2]` in pixels, `x1 < x2` and `y1 < y2`.
    pub bbox: [f64; 4],
    /// Estimated depth for the box; smaller is closer to the camera.
    pub depth: f64,
}

impl DetectionRecord {
    pub fn validate(&self) -> Result<(), MetricError> {
        let [x1, y1, x2, y2] = self.bbox;
        if !(x1 < x2 && y1 < y2) || !self.bbox.iter().all(|v| v.is_finite()) {
            return Err(MetricError::BadDetection(format!(
                "{:?}: bbox must satisfy x1 < x2 and y1 < y2, got {:?}",
                self.label, self.bbox
            )));
        }
        if !self.depth.is_finite() {
            return Err(MetricError::BadDetection(format!(
                "{:?}: depth must be finite, got {}",
                self.label, self.depth
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.bbox[0] + self.bbox[2]) / 2.0,
            (self.bbox[1] + self.bbox[3]) / 2.0,
        )
    }
}

/// Parses a detections file: a JSON array of records, each validated.
pub fn detections_from_json(text: &str) -> Result<Vec<DetectionRecord>, MetricError> {
    let records: Vec<DetectionRecord> =
        serde_json::from_str(text).map_err(|e| MetricError::BadFormat(e.to_string()))?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// One ground-truth clause of a benchmark prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub subject: String,
    pub object: String,
    pub relation: Relation,
    pub scene: String,
}

/// Strict thresholds for the binary component comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreMargins {
    /// Pixels of required center separation for horizontal components.
    pub horizontal: f64,
    /// Depth units of required separation for depth components.
    pub depth: f64,
}

/// Signed separation in the component's required direction; positive means
/// the subject is on the correct side of the object.
fn component_gap(
    subject: &DetectionRecord,
    object: &DetectionRecord,
    component: RelationComponent,
) -> f64 {
    match (component.axis, component.direction) {
        (Axis::Horizontal, Direction::Left) => object.center().0 - subject.center().0,
        (Axis::Horizontal, Direction::Right) => subject.center().0 - object.center().0,
        (Axis::Depth, Direction::Front) => object.depth - subject.depth,
        (Axis::Depth, Direction::Back) => subject.depth - object.depth,
        (Axis::Horizontal, _) | (Axis::Depth, _) => {
            unreachable!("decompose_relation never pairs these")
        }
    }
}

/// Binary relation score: the mean over components of a strict
/// greater-than-margin test. Ties score 0.
pub fn score_relation(
    subject: &DetectionRecord,
    object: &DetectionRecord,
    relation: Relation,
    margins: ScoreMargins,
) -> f64 {
    let components = decompose_relation(relation);
    let total: f64 = components
        .iter()
        .map(|&c| {
            let margin = match c.axis {
                Axis::Horizontal => margins.horizontal,
                Axis::Depth => margins.depth,
            };
            if component_gap(subject, object, c) > margin {
                1.0
            } else {
                0.0
            }
        })
        .sum();
    total / components.len() as f64
}

/// Length scales for the sigmoid diagnostic score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftScales {
    pub horizontal: f64,
    pub depth: f64,
}

impl Default for SoftScales {
    fn default() -> Self {
        SoftScales {
            horizontal: 10.0,
            depth: 0.5,
        }
    }
}

/// Diagnostic variant: each component becomes a sigmoid of its signed gap
/// over the axis scale, so a tie scores 0.5 and the result varies smoothly.
/// Never used by the binary benchmark path.
pub fn score_relation_soft(
    subject: &DetectionRecord,
    object: &DetectionRecord,
    relation: Relation,
    scales: SoftScales,
) -> f64 {
    let components = decompose_relation(relation);
    let total: f64 = components
        .iter()
        .map(|&c| {
            let scale = match c.axis {
                Axis::Horizontal => scales.horizontal,
                Axis::Depth => scales.depth,
            };
            let gap = component_gap(subject, object, c) / scale.max(f64::MIN_POSITIVE);
            1.0 / (1.0 + (-gap).exp())
        })
        .sum();
    total / components.len() as f64
}

/// Agreement between an intended depth shift and a measured one:
/// `1 - |d1 - d2| / (|d1| + |d2|)`, with both-zero treated as perfect
/// agreement. Symmetric, scale-invariant, and within [0, 1] for finite
/// inputs.
pub fn consistency_3d(d1: f64, d2: f64) -> f64 {
    if d1 == 0.0 && d2 == 0.0 {
        return 1.0;
    }
    1.0 - (d1 - d2).abs() / (d1.abs() + d2.abs())
}

/// Which depth statistic a mask-derived detection reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthStat {
    /// Depth at the bounding-box center pixel.
    #[default]
    CenterPixel,
    /// Mean depth over the finite masked pixels.
    RegionMean,
}

/// Builds a detection from an occupancy mask and a rendered depth map:
/// the bounding box spans the set pixels (exclusive upper edge) and the
/// depth comes from `stat`.
pub fn detection_from_mask(
    label: &str,
    mask: &EntityMask2D,
    depth: &DepthMap,
    stat: DepthStat,
) -> Result<DetectionRecord, MetricError> {
    if mask.width() != depth.width() || mask.height() != depth.height() {
        return Err(MetricError::BadDetection(format!(
            "mask is {}x{} but depth is {}x{}",
            mask.width(),
            mask.height(),
            depth.width(),
            depth.height()
        )));
    }
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    if min_x == u32::MAX {
        return Err(MetricError::BadDetection(format!(
            "{label:?}: mask has no set pixels"
        )));
    }
    let bbox = [
        min_x as f64,
        min_y as f64,
        (max_x + 1) as f64,
        (max_y + 1) as f64,
    ];
    let value = match stat {
        DepthStat::CenterPixel => {
            let cx = ((bbox[0] + bbox[2]) / 2.0) as u32;
            let cy = ((bbox[1] + bbox[3]) / 2.0) as u32;
            let d = depth.get(cx.min(depth.width() - 1), cy.min(depth.height() - 1));
            if !d.is_finite() {
                return Err(MetricError::BadDetection(format!(
                    "{label:?}: no finite depth at bbox center ({cx}, {cy})"
                )));
            }
            d as f64
        }
        DepthStat::RegionMean => {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for y in 0..mask.height() {
                for x in 0..mask.width() {
                    let d = depth.get(x, y);
                    if mask.get(x, y) && d.is_finite() {
                        sum += d as f64;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                return Err(MetricError::BadDetection(format!(
                    "{label:?}: no finite depth under the mask"
                )));
            }
            sum / n as f64
        }
    };
    Ok(DetectionRecord {
        label: label.to_string(),
        bbox,
        depth: value,
    })
}

/// One object category: a name, its usable scene phrases, and its objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub scenes: Vec<String>,
    /// Usable in every scene; its own scene list is empty.
    #[serde(default)]
    pub universal: bool,
    pub objects: Vec<String>,
}

/// The benchmark's category table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryTable {
    pub version: u32,
    pub categories: Vec<Category>,
}

const BUILTIN_TABLE: &str = include_str!("../assets/bench_categories.json");

impl CategoryTable {
    /// The table shipped with the crate.
    pub fn builtin() -> &'static CategoryTable {
        static TABLE: OnceLock<CategoryTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            CategoryTable::from_json(BUILTIN_TABLE).expect("shipped table is valid")
        })
    }

    pub fn from_json(text: &str) -> Result<CategoryTable, MetricError> {
        let table: CategoryTable =
            serde_json::from_str(text).map_err(|e| MetricError::BadTable(e.to_string()))?;
        if table.categories.is_empty() {
            return Err(MetricError::BadTable("no categories".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &table.categories {
            if c.objects.is_empty() {
                return Err(MetricError::BadTable(format!(
                    "category {:?} has no objects",
                    c.name
                )));
            }
            if !c.universal && c.scenes.is_empty() {
                return Err(MetricError::BadTable(format!(
                    "category {:?} has no scenes and is not universal",
                    c.name
                )));
            }
            for o in &c.objects {
                if !seen.insert(o.clone()) {
                    return Err(MetricError::BadTable(format!(
                        "object {o:?} appears in more than one category"
                    )));
                }
            }
        }
        Ok(table)
    }

    /// Scenes usable by category `idx`: its own list, or for a universal
    /// category the union of every non-universal list in first-appearance
    /// order.
    pub fn effective_scenes(&self, idx: usize) -> Vec<String> {
        let category = &self.categories[idx];
        if !category.universal {
            return category.scenes.clone();
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for c in &self.categories {
            if c.universal {
                continue;
            }
            for s in &c.scenes {
                if seen.insert(s.clone()) {
                    out.push(s.clone());
                }
            }
        }
        out
    }

    /// All `(category index, object)` pairs in table order.
    fn object_pool(&self) -> Vec<(usize, &str)> {
        self.categories
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.objects.iter().map(move |o| (i, o.as_str())))
            .collect()
    }

    /// Scenes usable by both categories, in the first category's order.
    fn shared_scenes(&self, a: usize, b: usize) -> Vec<String> {
        let sb: BTreeSet<String> = self.effective_scenes(b).into_iter().collect();
        self.effective_scenes(a)
            .into_iter()
            .filter(|s| sb.contains(s))
            .collect()
    }
}

/// One generated benchmark prompt with its ground-truth clauses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPrompt {
    pub prompt: String,
    pub specs: Vec<RelationSpec>,
    pub scene: String,
}

/// JSON-lines serialization of a prompt list.
pub fn bench_to_jsonl(prompts: &[BenchPrompt]) -> String {
    let mut out = String::new();
    for p in prompts {
        out.push_str(&serde_json::to_string(p).expect("prompts serialize"));
        out.push('\n');
    }
    out
}

pub fn bench_from_jsonl(text: &str) -> Result<Vec<BenchPrompt>, MetricError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| MetricError::BadFormat(e.to_string())))
        .collect()
}

struct ClauseSample {
    subject: String,
    object: String,
    scene: String,
}

/// Draws a subject/object pair from categories with intersecting scenes,
/// plus a scene from the intersection. Objects already in `exclude` and
/// scenes outside `fixed_scene` (when set) are rejected.
fn sample_clause(
    table: &CategoryTable,
    pool: &[(usize, &str)],
    rng: &mut ChaCha8Rng,
    exclude: &BTreeSet<String>,
    fixed_scene: Option<&str>,
) -> Option<ClauseSample> {
    let &(ci, subject) = pool.choose(rng)?;
    let &(cj, object) = pool.choose(rng)?;
    if subject == object || exclude.contains(subject) || exclude.contains(object) {
        return None;
    }
    let scenes = table.shared_scenes(ci, cj);
    if scenes.is_empty() {
        return None;
    }
    let scene = match fixed_scene {
        Some(s) => {
            if !scenes.iter().any(|x| x == s) {
                return None;
            }
            s.to_string()
        }
        None => scenes[rng.gen_range(0..scenes.len())].clone(),
    };
    Some(ClauseSample {
        subject: subject.to_string(),
        object: object.to_string(),
        scene,
    })
}

fn basic_prompt_text(spec: &RelationSpec) -> String {
    format!(
        "a {} {} a {} {}",
        spec.subject,
        spec.relation.phrase(),
        spec.object,
        spec.scene
    )
}

/// Generates `count` single-relation prompts per relation, deduplicated,
/// with a seeded sampler. The output is deterministic for a given table,
/// relation list, count, and seed.
pub fn generate_bench_prompts(
    table: &CategoryTable,
    relations: &[Relation],
    count: usize,
    seed: u64,
) -> Result<Vec<BenchPrompt>, MetricError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = table.object_pool();
    let empty = BTreeSet::new();
    let mut out = Vec::new();
    for &relation in relations {
        let mut seen = BTreeSet::new();
        let mut produced = 0usize;
        let attempts = count.saturating_mul(1000).max(10_000);
        for _ in 0..attempts {
            if produced == count {
                break;
            }
            let Some(clause) = sample_clause(table, &pool, &mut rng, &empty, None) else {
                continue;
            };
            let key = (clause.subject.clone(), clause.object.clone(), clause.scene.clone());
            if !seen.insert(key) {
                continue;
            }
            let spec = RelationSpec {
                subject: clause.subject,
                object: clause.object,
                relation,
                scene: clause.scene.clone(),
            };
            out.push(BenchPrompt {
                prompt: basic_prompt_text(&spec),
                specs: vec![spec],
                scene: clause.scene,
            });
            produced += 1;
        }
        if produced < count {
            return Err(MetricError::ExhaustedCombinations {
                needed: count,
                produced,
            });
        }
    }
    Ok(out)
}

/// Generates `count` two-clause prompts, each combining two basic clauses
/// that share a scene and mention four distinct objects. Relations are
/// drawn from `relations`.
pub fn generate_multi_prompts(
    table: &CategoryTable,
    relations: &[Relation],
    count: usize,
    seed: u64,
) -> Result<Vec<BenchPrompt>, MetricError> {
    if count > 0 && relations.is_empty() {
        return Err(MetricError::ExhaustedCombinations {
            needed: count,
            produced: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = table.object_pool();
    let empty = BTreeSet::new();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let attempts = count.saturating_mul(1000).max(10_000);
    for _ in 0..attempts {
        if out.len() == count {
            break;
        }
        let Some(first) = sample_clause(table, &pool, &mut rng, &empty, None) else {
            continue;
        };
        let used: BTreeSet<String> = [first.subject.clone(), first.object.clone()].into();
        let Some(second) = sample_clause(table, &pool, &mut rng, &used, Some(&first.scene)) else {
            continue;
        };
        let r1 = relations[rng.gen_range(0..relations.len())];
        let r2 = relations[rng.gen_range(0..relations.len())];
        let key = (
            first.subject.clone(),
            first.object.clone(),
            second.subject.clone(),
            second.object.clone(),
            r1,
            r2,
            first.scene.clone(),
        );
        if !seen.insert(key) {
            continue;
        }
        let scene = first.scene.clone();
        let spec1 = RelationSpec {
            subject: first.subject,
            object: first.object,
            relation: r1,
            scene: scene.clone(),
        };
        let spec2 = RelationSpec {
            subject: second.subject,
            object: second.object,
            relation: r2,
            scene: scene.clone(),
        };
        let prompt = format!(
            "a {} {} a {} and a {} {} a {} {}",
            spec1.subject,
            r1.phrase(),
            spec1.object,
            spec2.subject,
            r2.phrase(),
            spec2.object,
            scene
        );
        out.push(BenchPrompt {
            prompt,
            specs: vec![spec1, spec2],
            scene,
        });
    }
    if out.len() < count {
        return Err(MetricError::ExhaustedCombinations {
            needed: count,
            produced: out.len(),
        });
    }
    Ok(out)
}
