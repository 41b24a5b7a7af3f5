//! Structured attention masking over the unified token sequence.
//!
//! The sequence is ordered as: one global-prompt segment `P`, one local
//! segment `P_j` per entity, the depth-condition segment `CD`, and the
//! image-latent segment `X` (one token per image patch, row-major). The
//! mask implements a small set of block rules:
//!
//! - tokens inside one segment always see each other (diagonal included);
//! - the condition segments `P_1..P_k` and `CD` are mutually isolated, and
//!   by default the global prompt is isolated from them too;
//! - `P` and `CD` see all image tokens;
//! - `P_j` sees exactly the image tokens covered by its entity's patchified
//!   2D mask, symmetrically;
//! - image tokens see each other freely.
//!
//! Storage is block-structured (segment pair rules plus per-entity bitsets),
//! so a 4096-token image costs kilobytes instead of a dense |S|² matrix.
//! [`masked_attention`] is a plain reference kernel for checking behavior,
//! not a performance implementation.

use crate::camera::EntityMask2D;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum MaskError {
    IndivisibleDims {
        width: u32,
        height: u32,
        patch_size: u32,
    },
    /// Every segment must hold at least one token.
    ZeroLength(String),
    /// Bitset count or length does not match the layout.
    LengthMismatch { expected: usize, got: usize },
    ShapeMismatch(String),
    BadExport(String),
}

impl fmt::Display for MaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskError::IndivisibleDims {
                width,
                height,
                patch_size,
            } => write!(
                f,
                "dimensions {width}x{height} not divisible by patch size {patch_size}"
            ),
            MaskError::ZeroLength(which) => write!(f, "segment {which} has zero length"),
            MaskError::LengthMismatch { expected, got } => {
                write!(f, "expected length {expected}, got {got}")
            }
            MaskError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            MaskError::BadExport(msg) => write!(f, "bad mask export: {msg}"),
        }
    }
}

impl std::error::Error for MaskError {}

/// One segment of the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Segment {
    Global,
    Local(usize),
    Depth,
    Image,
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segment::Global => write!(f, "P"),
            Segment::Local(j) => write!(f, "P{}", j + 1),
            Segment::Depth => write!(f, "CD"),
            Segment::Image => write!(f, "X"),
        }
    }
}

/// Token counts per segment plus the image patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLayout {
    n_global: usize,
    n_local: Vec<usize>,
    n_depth: usize,
    n_image: usize,
    patch_size: u32,
    grid_width: u32,
    grid_height: u32,
}

impl TokenLayout {
    /// Lays out tokens for an image of the given pixel dimensions split into
    /// `patch_size` × `patch_size` patches.
    pub fn new(
        n_global: usize,
        n_local: Vec<usize>,
        n_depth: usize,
        image_width: u32,
        image_height: u32,
        patch_size: u32,
    ) -> Result<TokenLayout, MaskError> {
        if patch_size == 0 || image_width % patch_size != 0 || image_height % patch_size != 0 {
            return Err(MaskError::IndivisibleDims {
                width: image_width,
                height: image_height,
                patch_size,
            });
        }
        let grid_width = image_width / patch_size;
        let grid_height = image_height / patch_size;
        Self::build(
            n_global,
            n_local,
            n_depth,
            (grid_width * grid_height) as usize,
            patch_size,
            grid_width,
            grid_height,
        )
    }

    /// Layout with an explicit image-token count and no meaningful patch
    /// grid; used for imports and small hand-built cases.
    pub fn flat(
        n_global: usize,
        n_local: Vec<usize>,
        n_depth: usize,
        n_image: usize,
    ) -> Result<TokenLayout, MaskError> {
        Self::build(n_global, n_local, n_depth, n_image, 1, n_image as u32, 1)
    }

    fn build(
        n_global: usize,
        n_local: Vec<usize>,
        n_depth: usize,
        n_image: usize,
        patch_size: u32,
        grid_width: u32,
        grid_height: u32,
    ) -> Result<TokenLayout, MaskError> {
        if n_global == 0 {
            return Err(MaskError::ZeroLength("P".to_string()));
        }
        for (j, &n) in n_local.iter().enumerate() {
            if n == 0 {
                return Err(MaskError::ZeroLength(format!("P{}", j + 1)));
            }
        }
        if n_depth == 0 {
            return Err(MaskError::ZeroLength("CD".to_string()));
        }
        if n_image == 0 {
            return Err(MaskError::ZeroLength("X".to_string()));
        }
        Ok(TokenLayout {
            n_global,
            n_local,
            n_depth,
            n_image,
            patch_size,
            grid_width,
            grid_height,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.n_local.len()
    }

    pub fn n_image(&self) -> usize {
        self.n_image
    }

    pub fn patch_size(&self) -> u32 {
        self.patch_size
    }

    pub fn grid_dims(&self) -> (u32, u32) {
        (self.grid_width, self.grid_height)
    }

    pub fn total(&self) -> usize {
        self.n_global + self.n_local.iter().sum::<usize>() + self.n_depth + self.n_image
    }

    /// Segments in sequence order.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = vec![Segment::Global];
        out.extend((0..self.n_local.len()).map(Segment::Local));
        out.push(Segment::Depth);
        out.push(Segment::Image);
        out
    }

    pub fn segment_len(&self, seg: Segment) -> usize {
        match seg {
            Segment::Global => self.n_global,
            Segment::Local(j) => self.n_local[j],
            Segment::Depth => self.n_depth,
            Segment::Image => self.n_image,
        }
    }

    pub fn segment_range(&self, seg: Segment) -> std::ops::Range<usize> {
        let mut start = 0usize;
        for s in self.segments() {
            let len = self.segment_len(s);
            if s == seg {
                return start..start + len;
            }
            start += len;
        }
        unreachable!("segment {seg} not in layout");
    }

    /// The segment containing token `idx`, plus the offset inside it.
    pub fn segment_of(&self, idx: usize) -> (Segment, usize) {
        let mut start = 0usize;
        for s in self.segments() {
            let len = self.segment_len(s);
            if idx < start + len {
                return (s, idx - start);
            }
            start += len;
        }
        panic!("token index {idx} out of range for layout of {}", self.total());
    }
}

/// Tunable rule flags. Defaults give the standard mask: the global prompt is
/// isolated from the other condition segments, and the depth condition sees
/// all image tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskRules {
    /// When true, `CD` attends all of `X` (and symmetrically).
    pub depth_global: bool,
    /// When true, `P` is blocked against `P_1..P_k` and `CD`.
    pub global_isolated: bool,
}

impl Default for MaskRules {
    fn default() -> Self {
        MaskRules {
            depth_global: true,
            global_isolated: true,
        }
    }
}

/// The structured attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    layout: TokenLayout,
    rules: MaskRules,
    /// Segment pairs that block each other, stored with ordered elements.
    blocked: BTreeSet<(Segment, Segment)>,
    /// One image-token bitset per entity.
    bitsets: Vec<Vec<bool>>,
    /// Per-cell forced values; used to model faults for auditing.
    overrides: BTreeMap<(usize, usize), bool>,
}

fn pair(a: Segment, b: Segment) -> (Segment, Segment) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Converts a 2D pixel mask into image-token bits with the any-overlap
/// rule: a token is set when its patch contains at least one set pixel.
pub fn patchify_mask(mask: &EntityMask2D, patch_size: u32) -> Result<Vec<bool>, MaskError> {
    patchify_mask_with_coverage(mask, patch_size, 0.0)
}

/// Patchify with a minimum coverage fraction: a token is set when the
/// fraction of set pixels in its patch is at least `min_coverage` and the
/// patch is not empty. `min_coverage` of 0 is the any-overlap rule.
pub fn patchify_mask_with_coverage(
    mask: &EntityMask2D,
    patch_size: u32,
    min_coverage: f64,
) -> Result<Vec<bool>, MaskError> {
    if patch_size == 0 || mask.width() % patch_size != 0 || mask.height() % patch_size != 0 {
        return Err(MaskError::IndivisibleDims {
            width: mask.width(),
            height: mask.height(),
            patch_size,
        });
    }
    let grid_w = mask.width() / patch_size;
    let grid_h = mask.height() / patch_size;
    let patch_area = (patch_size * patch_size) as f64;
    let mut bits = Vec::with_capacity((grid_w * grid_h) as usize);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut count = 0usize;
            for py in 0..patch_size {
                for px in 0..patch_size {
                    if mask.get(gx * patch_size + px, gy * patch_size + py) {
                        count += 1;
                    }
                }
            }
            bits.push(count > 0 && count as f64 / patch_area >= min_coverage);
        }
    }
    Ok(bits)
}

/// Builds the attention mask for a layout from per-entity image bitsets.
pub fn build_attention_mask(
    layout: &TokenLayout,
    entity_bitsets: &[Vec<bool>],
    rules: MaskRules,
) -> Result<AttentionMask, MaskError> {
    if entity_bitsets.len() != layout.entity_count() {
        return Err(MaskError::LengthMismatch {
            expected: layout.entity_count(),
            got: entity_bitsets.len(),
        });
    }
    for bits in entity_bitsets {
        if bits.len() != layout.n_image() {
            return Err(MaskError::LengthMismatch {
                expected: layout.n_image(),
                got: bits.len(),
            });
        }
    }

    let k = layout.entity_count();
    let mut blocked = BTreeSet::new();
    for i in 0..k {
        for j in i + 1..k {
            blocked.insert(pair(Segment::Local(i), Segment::Local(j)));
        }
        blocked.insert(pair(Segment::Local(i), Segment::Depth));
    }
    if rules.global_isolated {
        for i in 0..k {
            blocked.insert(pair(Segment::Global, Segment::Local(i)));
        }
        blocked.insert(pair(Segment::Global, Segment::Depth));
    }
    if !rules.depth_global {
        blocked.insert(pair(Segment::Depth, Segment::Image));
    }

    Ok(AttentionMask {
        layout: layout.clone(),
        rules,
        blocked,
        bitsets: entity_bitsets.to_vec(),
        overrides: BTreeMap::new(),
    })
}

impl AttentionMask {
    /// Assembles a mask from explicit parts; the blocked set is taken
    /// verbatim rather than derived from rules. Imports and hand-built test
    /// masks go through here.
    pub fn from_parts(
        layout: TokenLayout,
        rules: MaskRules,
        blocked: BTreeSet<(Segment, Segment)>,
        bitsets: Vec<Vec<bool>>,
    ) -> Result<AttentionMask, MaskError> {
        if bitsets.len() != layout.entity_count() {
            return Err(MaskError::LengthMismatch {
                expected: layout.entity_count(),
                got: bitsets.len(),
            });
        }
        for bits in &bitsets {
            if bits.len() != layout.n_image() {
                return Err(MaskError::LengthMismatch {
                    expected: layout.n_image(),
                    got: bits.len(),
                });
            }
        }
        Ok(AttentionMask {
            layout,
            rules,
            blocked: blocked.into_iter().map(|(a, b)| pair(a, b)).collect(),
            bitsets,
            overrides: BTreeMap::new(),
        })
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn rules(&self) -> MaskRules {
        self.rules
    }

    pub fn bitsets(&self) -> &[Vec<bool>] {
        &self.bitsets
    }

    /// Whether query token `q` may attend key token `k`.
    pub fn allows(&self, q: usize, k: usize) -> bool {
        if let Some(&v) = self.overrides.get(&(q, k)) {
            return v;
        }
        let (sq, oq) = self.layout.segment_of(q);
        let (sk, ok) = self.layout.segment_of(k);
        if sq == sk {
            return true;
        }
        if self.blocked.contains(&pair(sq, sk)) {
            return false;
        }
        match (sq, sk) {
            (Segment::Local(j), Segment::Image) => self.bitsets[j][ok],
            (Segment::Image, Segment::Local(j)) => self.bitsets[j][oq],
            _ => true,
        }
    }

    /// Forces one cell to a value, modeling a corrupted mask for audits.
    pub fn set_override(&mut self, q: usize, k: usize, value: bool) {
        self.overrides.insert((q, k), value);
    }

    /// The dense matrix as a square bitmap; intended for small layouts.
    pub fn materialize(&self) -> EntityMask2D {
        let n = self.layout.total();
        let mut out = EntityMask2D::new(n as u32, n as u32);
        for q in 0..n {
            for k in 0..n {
                if self.allows(q, k) {
                    out.set(k as u32, q as u32, true);
                }
            }
        }
        out
    }

    /// Serializable form: segment table, blocked pairs, and run-length
    /// encoded entity bitsets. Cell overrides are a fault-injection device
    /// and are deliberately not representable here.
    pub fn to_export(&self) -> MaskExport {
        let segments = self
            .layout
            .segments()
            .iter()
            .map(|&s| SegmentInfo {
                name: s.to_string(),
                length: self.layout.segment_len(s),
            })
            .collect();
        let blocked_pairs = self
            .blocked
            .iter()
            .map(|&(a, b)| [a.to_string(), b.to_string()])
            .collect();
        let entity_bitsets = self.bitsets.iter().map(|bits| rle_encode(bits)).collect();
        MaskExport {
            segments,
            blocked_pairs,
            entity_bitsets,
        }
    }

    /// Rebuilds a mask from its export. The blocked-pair list is trusted as
    /// given, so a tampered export round-trips into a mask that
    /// [`audit_mask`] will then flag.
    pub fn from_export(export: &MaskExport) -> Result<AttentionMask, MaskError> {
        let mut names: Vec<(Segment, usize)> = Vec::new();
        let mut n_local: Vec<usize> = Vec::new();
        let (mut n_global, mut n_depth, mut n_image) = (None, None, None);
        for info in &export.segments {
            let seg = parse_segment(&info.name)?;
            names.push((seg, info.length));
            match seg {
                Segment::Global => n_global = Some(info.length),
                Segment::Local(j) => {
                    if j != n_local.len() {
                        return Err(MaskError::BadExport(format!(
                            "local segment {} out of order",
                            info.name
                        )));
                    }
                    n_local.push(info.length);
                }
                Segment::Depth => n_depth = Some(info.length),
                Segment::Image => n_image = Some(info.length),
            }
        }
        let (n_global, n_depth, n_image) = match (n_global, n_depth, n_image) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(MaskError::BadExport(
                    "export must list P, CD, and X segments".to_string(),
                ))
            }
        };
        let layout = TokenLayout::flat(n_global, n_local, n_depth, n_image)?;

        let mut blocked = BTreeSet::new();
        for p in &export.blocked_pairs {
            blocked.insert(pair(parse_segment(&p[0])?, parse_segment(&p[1])?));
        }
        let rules = MaskRules {
            depth_global: !blocked.contains(&pair(Segment::Depth, Segment::Image)),
            global_isolated: blocked.contains(&pair(Segment::Global, Segment::Depth)),
        };

        let mut bitsets = Vec::with_capacity(export.entity_bitsets.len());
        for runs in &export.entity_bitsets {
            bitsets.push(rle_decode(runs, n_image)?);
        }
        AttentionMask::from_parts(layout, rules, blocked, bitsets)
    }
}

fn parse_segment(name: &str) -> Result<Segment, MaskError> {
    match name {
        "P" => Ok(Segment::Global),
        "CD" => Ok(Segment::Depth),
        "X" => Ok(Segment::Image),
        _ => {
            let idx: usize = name
                .strip_prefix('P')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| MaskError::BadExport(format!("unknown segment `{name}`")))?;
            if idx == 0 {
                return Err(MaskError::BadExport("local segments start at P1".to_string()));
            }
            Ok(Segment::Local(idx - 1))
        }
    }
}

fn rle_encode(bits: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in bits {
        if b == current {
            run += 1;
        } else {
            runs.push(run);
            current = b;
            run = 1;
        }
    }
    if !bits.is_empty() {
        runs.push(run);
    }
    runs
}

fn rle_decode(runs: &[u32], expected: usize) -> Result<Vec<bool>, MaskError> {
    let total: usize = runs.iter().map(|&r| r as usize).sum();
    if total != expected {
        return Err(MaskError::LengthMismatch {
            expected,
            got: total,
        });
    }
    let mut bits = Vec::with_capacity(expected);
    let mut value = false;
    for &run in runs {
        bits.extend(std::iter::repeat(value).take(run as usize));
        value = !value;
    }
    Ok(bits)
}

/// JSON-facing form of an attention mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskExport {
    pub segments: Vec<SegmentInfo>,
    pub blocked_pairs: Vec<[String; 2]>,
    pub entity_bitsets: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub name: String,
    pub length: usize,
}

/// Reference masked-attention kernel:
/// `Softmax(Q Kᵀ / sqrt(d_k) + log M) V` with `log 0 = -inf`, implemented
/// by summing only over allowed keys so blocked weights are exactly zero.
pub fn masked_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    mask: &AttentionMask,
) -> Result<Array2<f64>, MaskError> {
    let n = mask.layout.total();
    if q.nrows() != n || k.nrows() != n || v.nrows() != n {
        return Err(MaskError::ShapeMismatch(format!(
            "expected {n} rows, got Q {}, K {}, V {}",
            q.nrows(),
            k.nrows(),
            v.nrows()
        )));
    }
    if q.ncols() != k.ncols() {
        return Err(MaskError::ShapeMismatch(format!(
            "Q has width {}, K has width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut out = Array2::zeros((n, v.ncols()));
    let mut scores: Vec<(usize, f64)> = Vec::with_capacity(n);
    for qi in 0..n {
        scores.clear();
        let mut max_score = f64::MIN;
        for ki in 0..n {
            if !mask.allows(qi, ki) {
                continue;
            }
            let mut dot = 0.0;
            for c in 0..q.ncols() {
                dot += q[[qi, c]] * k[[ki, c]];
            }
            let s = dot * scale;
            max_score = max_score.max(s);
            scores.push((ki, s));
        }
        let mut total = 0.0;
        for (_, s) in scores.iter_mut() {
            *s = (*s - max_score).exp();
            total += *s;
        }
        for &(ki, w) in &scores {
            let weight = w / total;
            for c in 0..v.ncols() {
                out[[qi, c]] += weight * v[[ki, c]];
            }
        }
    }
    Ok(out)
}

/// One cell whose value contradicts the rules.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditViolation {
    pub q: usize,
    pub k: usize,
    pub q_segment: String,
    pub k_segment: String,
    pub expected: bool,
    pub actual: bool,
}

/// Result of [`audit_mask`]; empty `violations` means the mask is valid.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub checked: usize,
    pub violations: Vec<AuditViolation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// What the rules say a single cell must be; deliberately written as a
/// direct case analysis, independent of how [`AttentionMask`] stores its
/// blocked pairs.
fn expected_cell(
    layout: &TokenLayout,
    rules: MaskRules,
    bitsets: &[Vec<bool>],
    q: usize,
    k: usize,
) -> bool {
    let (sq, oq) = layout.segment_of(q);
    let (sk, ok) = layout.segment_of(k);
    match (sq, sk) {
        (a, b) if a == b => true,
        (Segment::Global, Segment::Image) | (Segment::Image, Segment::Global) => true,
        (Segment::Depth, Segment::Image) | (Segment::Image, Segment::Depth) => rules.depth_global,
        (Segment::Local(j), Segment::Image) => bitsets[j][ok],
        (Segment::Image, Segment::Local(j)) => bitsets[j][oq],
        (Segment::Global, Segment::Local(_)) | (Segment::Local(_), Segment::Global) => {
            !rules.global_isolated
        }
        (Segment::Global, Segment::Depth) | (Segment::Depth, Segment::Global) => {
            !rules.global_isolated
        }
        (Segment::Local(_), Segment::Local(_)) => false,
        (Segment::Local(_), Segment::Depth) | (Segment::Depth, Segment::Local(_)) => false,
        _ => unreachable!("all segment pairs covered"),
    }
}

/// Re-derives every cell from the rules and reports disagreements.
pub fn audit_mask(mask: &AttentionMask) -> AuditReport {
    let n = mask.layout.total();
    let mut violations = Vec::new();
    for q in 0..n {
        for k in 0..n {
            let expected = expected_cell(&mask.layout, mask.rules, &mask.bitsets, q, k);
            let actual = mask.allows(q, k);
            if expected != actual {
                let (sq, _) = mask.layout.segment_of(q);
                let (sk, _) = mask.layout.segment_of(k);
                violations.push(AuditViolation {
                    q,
                    k,
                    q_segment: sq.to_string(),
                    k_segment: sk.to_string(),
                    expected,
                    actual,
                });
            }
        }
    }
    AuditReport {
        checked: n * n,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_layout() -> TokenLayout {
        TokenLayout::flat(1, vec![1], 1, 4).unwrap()
    }

    fn mask_4x4(bits: [bool; 4]) -> EntityMask2D {
        let mut m = EntityMask2D::new(4, 4);
        for gy in 0..2u32 {
            for gx in 0..2u32 {
                if bits[(gy * 2 + gx) as usize] {
                    for py in 0..2 {
                        for px in 0..2 {
                            m.set(gx * 2 + px, gy * 2 + py, true);
                        }
                    }
                }
            }
        }
        m
    }

    #[test]
    fn patchify_quadrant_example() {
        let m = mask_4x4([true, false, false, false]);
        assert_eq!(
            patchify_mask(&m, 2).unwrap(),
            vec![true, false, false, false]
        );
    }

    #[test]
    fn patchify_saturation_and_empty() {
        assert_eq!(
            patchify_mask(&EntityMask2D::new(4, 4), 2).unwrap(),
            vec![false; 4]
        );
        let m = mask_4x4([true, true, true, true]);
        assert_eq!(patchify_mask(&m, 2).unwrap(), vec![true; 4]);
    }

    #[test]
    fn patchify_single_pixel_sets_token() {
        let mut m = EntityMask2D::new(4, 4);
        m.set(3, 3, true);
        assert_eq!(
            patchify_mask(&m, 2).unwrap(),
            vec![false, false, false, true]
        );
    }

    #[test]
    fn patchify_rejects_indivisible_dims() {
        let m = EntityMask2D::new(5, 4);
        assert!(matches!(
            patchify_mask(&m, 2),
            Err(MaskError::IndivisibleDims { .. })
        ));
    }

    #[test]
    fn patchify_coverage_threshold() {
        let mut m = EntityMask2D::new(4, 4);
        m.set(0, 0, true); // quarter of the top-left patch
        let quarter = patchify_mask_with_coverage(&m, 2, 0.25).unwrap();
        assert_eq!(quarter, vec![true, false, false, false]);
        let half = patchify_mask_with_coverage(&m, 2, 0.5).unwrap();
        assert_eq!(half, vec![false; 4]);
    }

    #[test]
    fn seven_token_matrix_matches_hand_enumeration() {
        let mask = build_attention_mask(
            &small_layout(),
            &[vec![true, true, false, false]],
            MaskRules::default(),
        )
        .unwrap();
        // Tokens: 0=P, 1=P1, 2=CD, 3..6=X. Enumerated cell by cell from the
        // five block rules with the default flags.
        let expected: [[u8; 7]; 7] = [
            [1, 0, 0, 1, 1, 1, 1],
            [0, 1, 0, 1, 1, 0, 0],
            [0, 0, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1, 1],
            [1, 0, 1, 1, 1, 1, 1],
            [1, 0, 1, 1, 1, 1, 1],
        ];
        for q in 0..7 {
            for k in 0..7 {
                assert_eq!(
                    mask.allows(q, k),
                    expected[q][k] == 1,
                    "cell ({q}, {k}) disagrees"
                );
            }
        }
    }

    #[test]
    fn diagonal_is_always_allowed() {
        let layouts = [
            TokenLayout::flat(2, vec![], 1, 3).unwrap(),
            TokenLayout::flat(1, vec![2, 1, 3], 2, 6).unwrap(),
        ];
        for layout in layouts {
            let bitsets: Vec<Vec<bool>> = (0..layout.entity_count())
                .map(|j| (0..layout.n_image()).map(|t| (t + j) % 2 == 0).collect())
                .collect();
            let mask = build_attention_mask(&layout, &bitsets, MaskRules::default()).unwrap();
            for i in 0..layout.total() {
                assert!(mask.allows(i, i), "diagonal cell {i}");
            }
        }
    }

    #[test]
    fn disjoint_bitsets_share_no_image_token() {
        let layout = TokenLayout::flat(1, vec![1, 1], 1, 6).unwrap();
        let a = vec![true, true, false, false, false, false];
        let b = vec![false, false, true, true, true, false];
        let mask = build_attention_mask(&layout, &[a, b], MaskRules::default()).unwrap();
        let x_start = layout.segment_range(Segment::Image).start;
        let p1 = layout.segment_range(Segment::Local(0)).start;
        let p2 = layout.segment_range(Segment::Local(1)).start;
        for t in 0..6 {
            let both = mask.allows(p1, x_start + t) && mask.allows(p2, x_start + t);
            assert!(!both, "image token {t} attended by both locals");
        }
    }

    #[test]
    fn build_rejects_length_mismatches() {
        let layout = small_layout();
        assert_eq!(
            build_attention_mask(&layout, &[], MaskRules::default()),
            Err(MaskError::LengthMismatch {
                expected: 1,
                got: 0
            })
        );
        assert_eq!(
            build_attention_mask(&layout, &[vec![true; 3]], MaskRules::default()),
            Err(MaskError::LengthMismatch {
                expected: 4,
                got: 3
            })
        );
    }

    #[test]
    fn rule_flags_change_global_and_depth_blocks() {
        let layout = small_layout();
        let bits = vec![vec![true, false, true, false]];
        let literal = build_attention_mask(
            &layout,
            &bits,
            MaskRules {
                depth_global: true,
                global_isolated: false,
            },
        )
        .unwrap();
        assert!(literal.allows(0, 1), "P may see P1 in the literal reading");
        assert!(literal.allows(0, 2), "P may see CD in the literal reading");

        let local_depth = build_attention_mask(
            &layout,
            &bits,
            MaskRules {
                depth_global: false,
                global_isolated: true,
            },
        )
        .unwrap();
        assert!(!local_depth.allows(2, 3), "CD must not see X");
        assert!(!local_depth.allows(3, 2), "X must not see CD");
        assert!(audit_mask(&literal).is_clean());
        assert!(audit_mask(&local_depth).is_clean());
    }

    #[test]
    fn mask_is_symmetric_between_locals_and_image() {
        let layout = TokenLayout::flat(2, vec![2, 1], 1, 8).unwrap();
        let bitsets = vec![
            vec![true, false, true, false, true, false, true, false],
            vec![false, false, true, true, false, false, true, true],
        ];
        let mask = build_attention_mask(&layout, &bitsets, MaskRules::default()).unwrap();
        let n = layout.total();
        for q in 0..n {
            for k in 0..n {
                assert_eq!(mask.allows(q, k), mask.allows(k, q), "asymmetry at ({q}, {k})");
            }
        }
    }

    #[test]
    fn enlarging_a_bitset_only_adds_cells() {
        let layout = TokenLayout::flat(1, vec![1], 1, 6).unwrap();
        let small = vec![vec![false, true, false, false, true, false]];
        let large = vec![vec![true, true, false, true, true, false]];
        let a = build_attention_mask(&layout, &small, MaskRules::default()).unwrap();
        let b = build_attention_mask(&layout, &large, MaskRules::default()).unwrap();
        let n = layout.total();
        for q in 0..n {
            for k in 0..n {
                if a.allows(q, k) {
                    assert!(b.allows(q, k), "cell ({q}, {k}) lost by enlargement");
                }
            }
        }
    }

    #[test]
    fn audit_passes_built_masks_and_catches_flips() {
        let mask = build_attention_mask(
            &small_layout(),
            &[vec![true, true, false, false]],
            MaskRules::default(),
        )
        .unwrap();
        assert!(audit_mask(&mask).is_clean());

        // Flip a condition-condition cell (P1 -> CD) open.
        let mut corrupted = mask.clone();
        corrupted.set_override(1, 2, true);
        let report = audit_mask(&corrupted);
        assert_eq!(report.violations.len(), 1);
        let v = &report.violations[0];
        assert_eq!((v.q, v.k), (1, 2));
        assert_eq!((v.q_segment.as_str(), v.k_segment.as_str()), ("P1", "CD"));
        assert!(!v.expected && v.actual);

        // Open a P1 <-> X cell outside the bitset.
        let mut leaky = mask.clone();
        leaky.set_override(1, 5, true);
        let report = audit_mask(&leaky);
        assert_eq!(report.violations.len(), 1);
        assert_eq!((report.violations[0].q, report.violations[0].k), (1, 5));

        // Close part of the diagonal.
        let mut broken_diag = mask;
        broken_diag.set_override(3, 3, false);
        assert!(!audit_mask(&broken_diag).is_clean());
    }

    #[test]
    fn export_round_trips_and_tampering_is_detected() {
        let layout = TokenLayout::new(1, vec![1, 2], 1, 8, 8, 4).unwrap();
        let bitsets = vec![
            vec![true, false, false, true],
            vec![false, true, true, false],
        ];
        let mask = build_attention_mask(&layout, &bitsets, MaskRules::default()).unwrap();
        let export = mask.to_export();
        assert_eq!(export.segments.len(), 5);
        assert_eq!(export.entity_bitsets.len(), 2);

        let rebuilt = AttentionMask::from_export(&export).unwrap();
        assert_eq!(rebuilt.materialize(), mask.materialize());
        assert!(audit_mask(&rebuilt).is_clean());

        let mut tampered = export.clone();
        tampered
            .blocked_pairs
            .push(["P".to_string(), "X".to_string()]);
        let bad = AttentionMask::from_export(&tampered).unwrap();
        let report = audit_mask(&bad);
        assert!(!report.is_clean());
        assert!(report
            .violations
            .iter()
            .all(|v| (v.q_segment == "P" && v.k_segment == "X")
                || (v.q_segment == "X" && v.k_segment == "P")));
    }

    #[test]
    fn export_json_shape_is_stable() {
        let mask = build_attention_mask(
            &small_layout(),
            &[vec![true, true, false, false]],
            MaskRules::default(),
        )
        .unwrap();
        let json = serde_json::to_value(mask.to_export()).unwrap();
        assert_eq!(
            json["segments"][0],
            serde_json::json!({"name": "P", "length": 1})
        );
        assert_eq!(json["entity_bitsets"][0], serde_json::json!([0, 2, 2]));
        let pairs = json["blocked_pairs"].as_array().unwrap();
        assert!(pairs.contains(&serde_json::json!(["P", "P1"])));
        assert!(pairs.contains(&serde_json::json!(["P1", "CD"])));
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-2.0..2.0))
    }

    /// Naive per-query subset attention, used as the oracle.
    fn subset_attention(
        q: &Array2<f64>,
        k: &Array2<f64>,
        v: &Array2<f64>,
        allowed: &dyn Fn(usize, usize) -> bool,
    ) -> Array2<f64> {
        let n = q.nrows();
        let scale = 1.0 / (q.ncols() as f64).sqrt();
        let mut out = Array2::zeros((n, v.ncols()));
        for qi in 0..n {
            let keys: Vec<usize> = (0..n).filter(|&ki| allowed(qi, ki)).collect();
            let raw: Vec<f64> = keys
                .iter()
                .map(|&ki| {
                    (0..q.ncols()).map(|c| q[[qi, c]] * k[[ki, c]]).sum::<f64>() * scale
                })
                .collect();
            let m = raw.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = raw.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (i, &ki) in keys.iter().enumerate() {
                for c in 0..v.ncols() {
                    out[[qi, c]] += exps[i] / total * v[[ki, c]];
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_mask_equals_unmasked_attention() {
        let layout = TokenLayout::flat(1, vec![1], 1, 3).unwrap();
        let mask = AttentionMask::from_parts(
            layout.clone(),
            MaskRules::default(),
            BTreeSet::new(),
            vec![vec![true; 3]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = layout.total();
        let q = random_matrix(&mut rng, n, 5);
        let k = random_matrix(&mut rng, n, 5);
        let v = random_matrix(&mut rng, n, 4);
        let masked = masked_attention(&q, &k, &v, &mask).unwrap();
        let unmasked = subset_attention(&q, &k, &v, &|_, _| true);
        for (a, b) in masked.iter().zip(unmasked.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_mask_returns_value_rows() {
        let layout = TokenLayout::flat(1, vec![1], 1, 1).unwrap();
        let mut blocked = BTreeSet::new();
        for &a in &[Segment::Global, Segment::Local(0), Segment::Depth, Segment::Image] {
            for &b in &[Segment::Global, Segment::Local(0), Segment::Depth, Segment::Image] {
                if a != b {
                    blocked.insert(pair(a, b));
                }
            }
        }
        let mask =
            AttentionMask::from_parts(layout, MaskRules::default(), blocked, vec![vec![false]])
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_matrix(&mut rng, 4, 3);
        let k = random_matrix(&mut rng, 4, 3);
        let v = random_matrix(&mut rng, 4, 2);
        let out = masked_attention(&q, &k, &v, &mask).unwrap();
        for i in 0..4 {
            for c in 0..2 {
                assert_eq!(out[[i, c]], v[[i, c]], "row {i} col {c}");
            }
        }
    }

    #[test]
    fn masked_attention_rejects_shape_mismatch() {
        let layout = small_layout();
        let mask =
            build_attention_mask(&layout, &[vec![true; 4]], MaskRules::default()).unwrap();
        let q = Array2::zeros((3, 2));
        let k = Array2::zeros((7, 2));
        let v = Array2::zeros((7, 2));
        assert!(matches!(
            masked_attention(&q, &k, &v, &mask),
            Err(MaskError::ShapeMismatch(_))
        ));
        let q = Array2::zeros((7, 3));
        assert!(matches!(
            masked_attention(&q, &k, &v, &mask),
            Err(MaskError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn blocked_weight_is_zero_at_any_scale() {
        let layout = small_layout();
        let mask =
            build_attention_mask(&layout, &[vec![true, true, false, false]], MaskRules::default())
                .unwrap();
        // V row 2 (the CD token) carries a huge payload; P (row 0) must not
        // pick any of it up no matter how large the logits get.
        let q = Array2::from_elem((7, 2), 1e6);
        let k = Array2::from_elem((7, 2), 1e6);
        let mut v = Array2::zeros((7, 1));
        v[[2, 0]] = 1e12;
        let out = masked_attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(out[[0, 0]], 0.0);
    }

    proptest! {
        #[test]
        fn kernel_matches_subset_oracle(
            seed in 0u64..500,
            k in 0usize..=8,
            n_image in 1usize..6,
            depth_global in any::<bool>(),
            global_isolated in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_local: Vec<usize> = (0..k).map(|_| rng.gen_range(1..3)).collect();
            let layout = TokenLayout::flat(
                rng.gen_range(1..3),
                n_local,
                rng.gen_range(1..3),
                n_image,
            ).unwrap();
            let bitsets: Vec<Vec<bool>> = (0..k)
                .map(|_| (0..n_image).map(|_| rng.gen_bool(0.5)).collect())
                .collect();
            let rules = MaskRules { depth_global, global_isolated };
            let mask = build_attention_mask(&layout, &bitsets, rules).unwrap();
            let n = layout.total();
            let q = random_matrix(&mut rng, n, 4);
            let key = random_matrix(&mut rng, n, 4);
            let v = random_matrix(&mut rng, n, 3);
            let fast = masked_attention(&q, &key, &v, &mask).unwrap();
            let slow = subset_attention(&q, &key, &v, &|a, b| mask.allows(a, b));
            for (a, b) in fast.iter().zip(slow.iter()) {
                let denom = b.abs().max(1.0);
                prop_assert!((a - b).abs() / denom < 1e-9);
            }
            prop_assert!(audit_mask(&mask).is_clean());
        }
    }
}
