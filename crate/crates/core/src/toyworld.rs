//! Procedural chairs and tables with known part Gaussians, an analytic
//! occupancy decoder over (extrinsic, intrinsic) pairs, point sampling, and
//! template captions.
//!
//! Shapes are y-up. Each part is a box with half-extents `h`; its Gaussian has
//! eigenvalues `h^2 / 3` (sorted descending, eigenvectors sign-fixed so their
//! largest-magnitude component is positive) and weight proportional to volume.
//! Shape `i` of a dataset is generated from `NoiseRng::indexed(seed, i)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parts::{ExtrinsicVec, IntrinsicVec, Part, PartSet, Point};
use crate::rng::NoiseRng;

pub mod labels {
    pub const LEG: u32 = 1;
    pub const SEAT: u32 = 2;
    pub const BACK: u32 = 3;
    pub const TOP: u32 = 4;

    pub fn name(label: u32) -> Option<&'static str> {
        match label {
            LEG => Some("leg"),
            SEAT => Some("seat"),
            BACK => Some("back"),
            TOP => Some("top"),
            _ => None,
        }
    }

    pub fn from_name(name: &str) -> Option<u32> {
        match name {
            "leg" | "legs" => Some(LEG),
            "seat" => Some(SEAT),
            "back" => Some(BACK),
            "top" => Some(TOP),
            _ => None,
        }
    }
}

/// Uniform proposals tried before switching to mixture proposals.
pub const UNIFORM_PROPOSAL_BUDGET: usize = 1_000_000;
const MIXTURE_PROPOSAL_BUDGET: usize = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Chair,
    Table,
}

impl Family {
    pub fn part_count(self) -> usize {
        match self {
            Family::Chair => 6,
            Family::Table => 5,
        }
    }

    /// The semantic labels every shape of the family carries.
    pub fn label_set(self) -> &'static [u32] {
        match self {
            Family::Chair => &[labels::LEG, labels::SEAT, labels::BACK],
            Family::Table => &[labels::LEG, labels::TOP],
        }
    }

    pub fn from_part_count(n: usize) -> Option<Self> {
        match n {
            6 => Some(Family::Chair),
            5 => Some(Family::Table),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Chair => "chair",
            Family::Table => "table",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chair" => Ok(Family::Chair),
            "table" => Ok(Family::Table),
            other => Err(Error::Param(format!("unknown family {other:?}"))),
        }
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn sample(&self, rng: &mut NoiseRng) -> f64 {
        rng.uniform_in(self.lo, self.hi)
    }

    fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Geometry ranges. `top_*` fields size the seat of a chair or the top of a table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRanges {
    pub leg_length: Range,
    pub leg_half_thickness: Range,
    pub top_half_width: Range,
    /// Half-depth as a fraction of the half-width.
    pub top_depth_ratio: Range,
    pub top_half_thickness: Range,
    pub back_half_height: Range,
    pub back_half_thickness: Range,
    /// Maximum yaw of the whole shape, radians.
    pub yaw_jitter: f64,
    /// Maximum per-part center offset.
    pub center_jitter: f64,
}

impl ToyRanges {
    pub fn for_family(family: Family) -> Self {
        match family {
            Family::Chair => ToyRanges {
                leg_length: Range::new(0.35, 0.6),
                leg_half_thickness: Range::new(0.04, 0.07),
                top_half_width: Range::new(0.38, 0.5),
                top_depth_ratio: Range::new(0.75, 0.95),
                top_half_thickness: Range::new(0.03, 0.05),
                back_half_height: Range::new(0.18, 0.34),
                back_half_thickness: Range::new(0.025, 0.04),
                yaw_jitter: 0.08,
                center_jitter: 0.01,
            },
            Family::Table => ToyRanges {
                leg_length: Range::new(0.45, 0.8),
                leg_half_thickness: Range::new(0.035, 0.07),
                top_half_width: Range::new(0.45, 0.8),
                top_depth_ratio: Range::new(0.55, 0.9),
                top_half_thickness: Range::new(0.02, 0.045),
                back_half_height: Range::new(0.0, 0.0),
                back_half_thickness: Range::new(0.0, 0.0),
                yaw_jitter: 0.08,
                center_jitter: 0.01,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub family: Family,
    pub seed: u64,
    pub intrinsic_dim: usize,
    pub ranges: ToyRanges,
}

impl ToySpec {
    pub fn new(family: Family, seed: u64) -> Self {
        ToySpec {
            family,
            seed,
            intrinsic_dim: 32,
            ranges: ToyRanges::for_family(family),
        }
    }

    pub fn with_intrinsic_dim(mut self, d: usize) -> Self {
        self.intrinsic_dim = d;
        self
    }
}

/// A generated shape: labeled parts plus caption token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyShape {
    pub parts: PartSet,
    pub caption: Vec<u32>,
}

/// Decoder parameters read from the first four intrinsic entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntrinsicCode {
    pub exponent: f64,
    pub radius: f64,
    pub bump_amplitude: f64,
    pub bump_frequency: f64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl IntrinsicCode {
    /// `p = 1 + 3 s(c0)`, `rho = 0.5 + s(c1)`, `a = 0.3 s(c2)`, `k = round(4 s(c3))`
    /// with `s` the logistic function. Missing entries read as zero.
    pub fn from_code(code: &[f32]) -> Self {
        let c = |i: usize| code.get(i).copied().unwrap_or(0.0) as f64;
        IntrinsicCode {
            exponent: 1.0 + 3.0 * logistic(c(0)),
            radius: 0.5 + logistic(c(1)),
            bump_amplitude: 0.3 * logistic(c(2)),
            bump_frequency: (4.0 * logistic(c(3))).round(),
        }
    }

    /// Superquadric norm of local coordinates over the bumped radius; `<= 1` is inside.
    pub fn level(&self, y: &Vector3<f64>) -> f64 {
        let p = self.exponent;
        let norm = (y[0].abs().powf(p) + y[1].abs().powf(p) + y[2].abs().powf(p)).powf(1.0 / p);
        let angle = y[1].atan2(y[0]);
        let radius = 3f64.sqrt() * self.radius * (1.0 + self.bump_amplitude * (self.bump_frequency * angle).cos());
        norm / radius
    }

    /// Bound on `|y_j|` for any inside point.
    fn extent(&self) -> f64 {
        3f64.sqrt() * self.radius * (1.0 + self.bump_amplitude)
    }
}

/// Whitened local coordinates `diag(lambda)^(-1/2) U^T (x - c)`.
fn whitened(x: &Point, e: &ExtrinsicVec) -> Vector3<f64> {
    let y = e.local(x);
    Vector3::new(
        y[0] / (e.eigvals[0] as f64).sqrt(),
        y[1] / (e.eigvals[1] as f64).sqrt(),
        y[2] / (e.eigvals[2] as f64).sqrt(),
    )
}

/// Inside-ness of `x` for one part: `<= 1` means occupied.
pub fn part_level(x: &Point, part: &Part) -> f64 {
    IntrinsicCode::from_code(part.intrinsic.as_slice()).level(&whitened(x, &part.extrinsic))
}

/// Analytic occupancy: 1 when `x` lies inside any part, else 0.
pub fn decode_occupancy(x: &Point, parts: &PartSet) -> f32 {
    if parts.parts.iter().any(|p| part_level(x, p) <= 1.0) {
        1.0
    } else {
        0.0
    }
}

fn bounding_box(parts: &PartSet) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &parts.parts {
        let e = &p.extrinsic;
        let ext = IntrinsicCode::from_code(p.intrinsic.as_slice()).extent();
        let u = e.basis();
        for axis in 0..3 {
            let half: f64 = (0..3).map(|j| u[(axis, j)].abs() * (e.eigvals[j] as f64).sqrt() * ext).sum();
            lo[axis] = lo[axis].min(e.center[axis] as f64 - half);
            hi[axis] = hi[axis].max(e.center[axis] as f64 + half);
        }
    }
    (lo, hi)
}

/// Draw proposals until `count` interior points are found: uniform in the
/// bounding box first, Gaussian-mixture proposals after
/// [`UNIFORM_PROPOSAL_BUDGET`] rejections.
fn rejection_sample(parts: &PartSet, count: usize, seed: u64, mut accept: impl FnMut(Point) -> bool) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    let mut rng = NoiseRng::new(seed);
    let (lo, hi) = bounding_box(parts);
    if !lo.iter().chain(&hi).all(|v| v.is_finite()) {
        return Err(Error::EmptyShape);
    }
    let mut accepted = 0;
    let mut rejected = 0;
    while rejected < UNIFORM_PROPOSAL_BUDGET {
        let x = [0, 1, 2].map(|a| rng.uniform_in(lo[a], hi[a]) as f32);
        if accept(x) {
            accepted += 1;
            if accepted == count {
                return Ok(());
            }
        } else {
            rejected += 1;
        }
    }
    let weights: Vec<f64> = parts.parts.iter().map(|p| (p.extrinsic.weight as f64).max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    for _ in 0..MIXTURE_PROPOSAL_BUDGET {
        let pick = if total > 0.0 {
            let mut r = rng.uniform() * total;
            weights.iter().position(|&w| {
                r -= w;
                r < 0.0
            })
            .unwrap_or(weights.len() - 1)
        } else {
            rng.below(weights.len())
        };
        let e = &parts.parts[pick].extrinsic;
        let z = Vector3::new(rng.normal(), rng.normal(), rng.normal());
        let local = Vector3::new(
            z[0] * (e.eigvals[0] as f64).sqrt(),
            z[1] * (e.eigvals[1] as f64).sqrt(),
            z[2] * (e.eigvals[2] as f64).sqrt(),
        );
        let w = e.center_vec() + e.basis() * local;
        if accept([w[0] as f32, w[1] as f32, w[2] as f32]) {
            accepted += 1;
            if accepted == count {
                return Ok(());
            }
        }
    }
    Err(Error::EmptyShape)
}

/// `count` interior points of the decoded shape; deterministic given `seed`.
pub fn sample_points(parts: &PartSet, count: usize, seed: u64) -> Result<Vec<Point>> {
    let mut out = Vec::with_capacity(count);
    rejection_sample(parts, count, seed, |x| {
        if decode_occupancy(&x, parts) > 0.0 {
            out.push(x);
            true
        } else {
            false
        }
    })?;
    Ok(out)
}

/// Interior points tagged with the label of the part that contains them most
/// deeply. The shape must be labeled.
pub fn sample_labeled_points(parts: &PartSet, count: usize, seed: u64) -> Result<Vec<(Point, u32)>> {
    let labels = parts
        .labels
        .as_ref()
        .ok_or_else(|| Error::Param("labeled sampling needs part labels".into()))?;
    let mut out = Vec::with_capacity(count);
    rejection_sample(parts, count, seed, |x| {
        let best = parts
            .parts
            .iter()
            .enumerate()
            .map(|(i, p)| (part_level(&x, p), i))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            Some((level, i)) if level <= 1.0 => {
                out.push((x, labels[i]));
                true
            }
            _ => false,
        }
    })?;
    Ok(out)
}

/// Caption vocabulary; a token's id is its index.
pub const VOCABULARY: &[&str] = &[
    "a", "chair", "table", "with", "and", "tall", "short", "thin", "thick", "legs", "wide", "narrow", "seat", "top",
    "high", "low", "back", "no", "round", "square", "four", "bumpy", "smooth",
];

pub fn vocab_size() -> usize {
    VOCABULARY.len()
}

/// Lower-cased, whitespace-separated words with punctuation stripped.
pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .map(|w| {
            VOCABULARY
                .iter()
                .position(|v| *v == w)
                .map(|i| i as u32)
                .ok_or(Error::UnknownToken(w))
        })
        .collect()
}

pub fn detokenize(ids: &[u32]) -> String {
    ids.iter()
        .map(|&i| VOCABULARY.get(i as usize).copied().unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

struct BoxPart {
    center: [f64; 3],
    half: [f64; 3],
    label: u32,
    code: Vec<f32>,
}

fn yaw(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn box_extrinsic(b: &BoxPart, rot: &Matrix3<f64>, jitter: [f64; 3]) -> ExtrinsicVec {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| b.half[j].total_cmp(&b.half[i]).then(i.cmp(&j)));
    let center = rot * Vector3::new(b.center[0] + jitter[0], b.center[1] + jitter[1], b.center[2] + jitter[2]);
    let mut e = ExtrinsicVec {
        center: [center[0] as f32, center[1] as f32, center[2] as f32],
        eigvals: [0.0; 3],
        eigvecs: [[0.0; 3]; 3],
        weight: (8.0 * b.half[0] * b.half[1] * b.half[2]) as f32,
    };
    for (j, &axis) in order.iter().enumerate() {
        e.eigvals[j] = (b.half[axis] * b.half[axis] / 3.0) as f32;
        let mut v: Vector3<f64> = rot.column(axis).into();
        let lead = (0..3).max_by(|&a, &c| v[a].abs().total_cmp(&v[c].abs())).unwrap_or(0);
        if v[lead] < 0.0 {
            v = -v;
        }
        e.eigvecs[j] = [v[0] as f32, v[1] as f32, v[2] as f32];
    }
    e
}

/// Fixed unit-row mixing matrix tying the free code entries to the style seed.
fn free_mixing(rows: usize) -> Vec<[f64; 4]> {
    let mut rng = NoiseRng::new(0x5a1a_d0c0_de00_0001);
    (0..rows)
        .map(|_| {
            let r = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.map(|v| v / n)
        })
        .collect()
}

/// Intrinsic code from a 4-D standard-normal style seed. The decoder-visible
/// entries are affine in the seed; the free entries are unit-variance mixtures
/// of the seed plus a little independent noise.
fn style_code(rng: &mut NoiseRng, dim: usize, mixing: &[[f64; 4]]) -> (Vec<f32>, [f64; 4]) {
    let w = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
    let head = [0.5 + w[0], 0.3 * w[1], -1.5 + 0.5 * w[2], w[3]];
    let mut code: Vec<f32> = head.iter().take(dim).map(|&v| v as f32).collect();
    for row in mixing.iter().take(dim.saturating_sub(4)) {
        let mixed: f64 = row.iter().zip(&w).map(|(m, s)| m * s).sum();
        code.push((0.98 * mixed + 0.2 * rng.normal()) as f32);
    }
    (code, head)
}

fn generate_one(spec: &ToySpec, index: u64, mixing: &[[f64; 4]]) -> ToyShape {
    let mut rng = NoiseRng::indexed(spec.seed, index);
    let r = &spec.ranges;
    let dim = spec.intrinsic_dim;
    let leg_len = r.leg_length.sample(&mut rng);
    let leg_r = r.leg_half_thickness.sample(&mut rng);
    let width = r.top_half_width.sample(&mut rng);
    let depth = width * r.top_depth_ratio.sample(&mut rng);
    let slab = r.top_half_thickness.sample(&mut rng);
    let (leg_code, leg_head) = style_code(&mut rng, dim, mixing);
    let (top_code, _) = style_code(&mut rng, dim, mixing);

    let top_label = match spec.family {
        Family::Chair => labels::SEAT,
        Family::Table => labels::TOP,
    };
    let inset = match spec.family {
        Family::Chair => 1.0,
        Family::Table => 1.5,
    };
    let mut boxes = Vec::new();
    for (sx, sz) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
        boxes.push(BoxPart {
            center: [sx * (width - inset * leg_r), 0.5 * leg_len, sz * (depth - inset * leg_r)],
            half: [leg_r, 0.5 * leg_len, 0.8 * leg_r],
            label: labels::LEG,
            code: leg_code.clone(),
        });
    }
    boxes.push(BoxPart {
        center: [0.0, leg_len + slab, 0.0],
        half: [width, slab, depth],
        label: top_label,
        code: top_code,
    });
    let mut back_height = 0.0;
    if spec.family == Family::Chair {
        back_height = r.back_half_height.sample(&mut rng);
        let thick = r.back_half_thickness.sample(&mut rng);
        let (back_code, _) = style_code(&mut rng, dim, mixing);
        boxes.push(BoxPart {
            center: [0.0, leg_len + 2.0 * slab + back_height, -(depth - thick)],
            half: [0.95 * width, back_height, thick],
            label: labels::BACK,
            code: back_code,
        });
    }

    let rot = yaw(rng.uniform_in(-r.yaw_jitter, r.yaw_jitter));
    let mut extrinsics: Vec<ExtrinsicVec> = boxes
        .iter()
        .map(|b| {
            let j = [0, 1, 2].map(|_| rng.uniform_in(-r.center_jitter, r.center_jitter));
            box_extrinsic(b, &rot, j)
        })
        .collect();
    let total: f32 = extrinsics.iter().map(|e| e.weight).sum();
    for e in &mut extrinsics {
        e.weight /= total;
    }
    let parts = extrinsics
        .into_iter()
        .zip(&boxes)
        .map(|(extrinsic, b)| Part {
            extrinsic,
            intrinsic: IntrinsicVec(b.code.clone()),
        })
        .collect();
    let labels = boxes.iter().map(|b| b.label).collect();

    let mut words: Vec<&str> = vec!["a", spec.family.name(), "with"];
    words.push(if leg_len > r.leg_length.mid() { "tall" } else { "short" });
    words.push(if leg_r > r.leg_half_thickness.mid() { "thick" } else { "thin" });
    if leg_head[0] < 0.0 {
        words.push("round");
    }
    words.extend(["legs", "and", "a"]);
    words.push(if width > r.top_half_width.mid() { "wide" } else { "narrow" });
    words.push(if spec.family == Family::Chair { "seat" } else { "top" });
    words.extend(["and"]);
    match spec.family {
        Family::Chair => {
            words.push("a");
            words.push(if back_height > r.back_half_height.mid() { "high" } else { "low" });
            words.push("back");
        }
        Family::Table => words.extend(["no", "back"]),
    }
    let caption = tokenize(&words.join(" ")).expect("caption words are in the vocabulary");

    ToyShape {
        parts: PartSet {
            parts,
            labels: Some(labels),
        },
        caption,
    }
}

/// `count` shapes of `spec.family`; shape `i` depends only on `(spec, i)`.
pub fn generate_dataset(spec: &ToySpec, count: usize) -> Vec<ToyShape> {
    let mixing = free_mixing(spec.intrinsic_dim.saturating_sub(4));
    (0..count as u64).map(|i| generate_one(spec, i, &mixing)).collect()
}

/// Seeded 90/10 split into (train, held-out).
pub fn split_train_test(shapes: Vec<ToyShape>, seed: u64) -> (Vec<ToyShape>, Vec<ToyShape>) {
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    NoiseRng::new(seed).shuffle(&mut order);
    let held = shapes.len() / 10;
    let mut slots: Vec<Option<ToyShape>> = shapes.into_iter().map(Some).collect();
    let test = order[..held].iter().map(|&i| slots[i].take().expect("unique")).collect();
    let train = order[held..].iter().map(|&i| slots[i].take().expect("unique")).collect();
    (train, test)
}

/// Geometric labeling rule for unlabeled part sets: a vertical major axis
/// below the shape's mid-height is a leg; a flat part whose thinnest axis is
/// vertical is the seat (chairs) or top (tables); any other flat part is a back.
pub fn infer_labels(parts: &PartSet, family: Family) -> Vec<u32> {
    let heights: Vec<f32> = parts.parts.iter().map(|p| p.extrinsic.center[1]).collect();
    let mid = heights.iter().copied().fold(f32::INFINITY, f32::min) * 0.5
        + heights.iter().copied().fold(f32::NEG_INFINITY, f32::max) * 0.5;
    parts
        .parts
        .iter()
        .map(|p| {
            let e = &p.extrinsic;
            let major_vertical = e.eigvecs[0][1].abs() > 0.7;
            let minor_vertical = e.eigvecs[2][1].abs() > 0.7;
            if major_vertical && e.center[1] <= mid {
                labels::LEG
            } else if minor_vertical {
                match family {
                    Family::Chair => labels::SEAT,
                    Family::Table => labels::TOP,
                }
            } else if family == Family::Chair {
                labels::BACK
            } else {
                labels::LEG
            }
        })
        .collect()
}
