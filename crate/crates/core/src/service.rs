//! JSON request handlers behind the HTTP endpoints, independent of any server.
//!
//! | method | path        | body                                             | reply          |
//! |--------|-------------|--------------------------------------------------|----------------|
//! | GET    | `/health`   |                                                  | `{status}`     |
//! | POST   | `/generate` | `{n, seed, text?, w?, parts?}`                   | `{shapes}`     |
//! | POST   | `/complete` | `{shape, mask?, seed, text?, w?}`                | `{shape}`      |
//! | POST   | `/mix`      | `{shape_a, shape_b, label, t_start?, seed}`      | `{shape}`      |
//! | POST   | `/decode`   | `{shape, grid?, seed?}`                          | `{points}`     |
//! | POST   | `/labels`   | `{shape}`                                        | `{labels}`     |
//!
//! Malformed bodies answer 400 and invariant violations 422, both with an
//! `error` field. Every handler is a pure function of the request.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::denoiser::ModelParams;
use crate::error::{Error, Result};
use crate::parts::{ExtrinsicVec, IntrinsicVec, Part, PartMask, PartSet, Point, Selection, EXTRINSIC_DIM};
use crate::sampler::{Cascade, DEFAULT_GUIDANCE, DEFAULT_REFINE_T};
use crate::rng::NoiseRng;
use crate::schedule::NoiseSchedule;
use crate::toyworld::{infer_labels, labels, sample_points, tokenize, Family};

/// Largest `n` accepted by `/generate`.
pub const MAX_GENERATE: usize = 256;
/// Largest point count accepted by `/decode`.
pub const MAX_DECODE_POINTS: usize = 65_536;
const DEFAULT_DECODE_POINTS: usize = 2048;

/// Wire form of a part set: one 16-float row and one code row per part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeJson {
    pub extrinsics: Vec<Vec<f32>>,
    pub intrinsics: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
}

impl From<&PartSet> for ShapeJson {
    fn from(s: &PartSet) -> Self {
        ShapeJson {
            extrinsics: s.parts.iter().map(|p| p.extrinsic.to_flat().to_vec()).collect(),
            intrinsics: s.parts.iter().map(|p| p.intrinsic.0.clone()).collect(),
            labels: s.labels.clone(),
        }
    }
}

impl TryFrom<&ShapeJson> for PartSet {
    type Error = Error;

    fn try_from(j: &ShapeJson) -> Result<Self> {
        if j.extrinsics.len() != j.intrinsics.len() {
            return Err(Error::Param(format!(
                "{} extrinsic rows but {} intrinsic rows",
                j.extrinsics.len(),
                j.intrinsics.len()
            )));
        }
        let parts = j
            .extrinsics
            .iter()
            .zip(&j.intrinsics)
            .map(|(e, s)| {
                if e.len() != EXTRINSIC_DIM {
                    return Err(Error::Param(format!("extrinsic rows have {EXTRINSIC_DIM} floats, got {}", e.len())));
                }
                Ok(Part {
                    extrinsic: ExtrinsicVec::from_flat(e)?,
                    intrinsic: IntrinsicVec(s.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PartSet::new(parts, j.labels.clone())
    }
}

/// Label given by id or by name (`"leg"`, `"seat"`, `"back"`, `"top"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelRef {
    Id(u32),
    Name(String),
}

impl LabelRef {
    pub fn resolve(&self) -> Result<u32> {
        match self {
            LabelRef::Id(id) => Ok(*id),
            LabelRef::Name(n) => labels::from_name(n).ok_or_else(|| Error::Param(format!("unknown label {n:?}"))),
        }
    }
}

/// Mask that regenerates the parts named by keywords in the text.
///
/// `legs`/`leg` select legs, `back` the back, and `seat`/`top` the seat or top.
/// Without a match every part is kept and `unmatched` is set.
pub fn text_part_selector(tokens: &[u32], part_labels: &[u32]) -> Selection {
    let words: Vec<&str> = tokens
        .iter()
        .filter_map(|&t| crate::toyworld::VOCABULARY.get(t as usize).copied())
        .collect();
    let mut targets = Vec::new();
    for w in words {
        match w {
            "legs" => targets.push(labels::LEG),
            "back" => targets.push(labels::BACK),
            "seat" | "top" => targets.extend([labels::SEAT, labels::TOP]),
            _ => {}
        }
    }
    let keep: Vec<bool> = part_labels.iter().map(|l| !targets.contains(l)).collect();
    let unmatched = keep.iter().all(|&k| k);
    if unmatched {
        log::warn!("text selected no parts; keeping all");
    }
    Selection {
        mask: PartMask::from_keep(keep),
        unmatched,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateBody {
    n: usize,
    seed: u64,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    w: Option<f64>,
    #[serde(default)]
    parts: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CompleteBody {
    shape: ShapeJson,
    #[serde(default)]
    mask: Option<Vec<u8>>,
    seed: u64,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    w: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MixBody {
    shape_a: ShapeJson,
    shape_b: ShapeJson,
    label: LabelRef,
    #[serde(default)]
    t_start: Option<usize>,
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecodeBody {
    shape: ShapeJson,
    #[serde(default)]
    grid: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsBody {
    shape: ShapeJson,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub body: String,
}

impl Response {
    fn ok(v: serde_json::Value) -> Self {
        Response {
            status: 200,
            body: v.to_string(),
        }
    }

    fn error(status: u16, msg: impl std::fmt::Display) -> Self {
        Response {
            status,
            body: json!({ "error": msg.to_string() }).to_string(),
        }
    }
}

/// Loaded models plus the metadata the handlers need.
pub struct Service {
    phase1: ModelParams,
    phase2: ModelParams,
    sched: NoiseSchedule,
    family: Family,
    part_count: usize,
}

impl Service {
    pub fn new(phase1: ModelParams, phase2: ModelParams, sched: NoiseSchedule, family: Family) -> Result<Self> {
        Cascade::new(&phase1, &phase2, &sched)?;
        Ok(Service {
            phase1,
            phase2,
            sched,
            family,
            part_count: family.part_count(),
        })
    }

    pub fn cascade(&self) -> Cascade<'_> {
        Cascade {
            phase1: &self.phase1,
            phase2: &self.phase2,
            sched: &self.sched,
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    /// Dispatch a request; never panics on user input.
    pub fn handle(&self, method: &str, path: &str, body: &[u8]) -> Response {
        match (method, path) {
            ("GET", "/health") => Response::ok(json!({ "status": "ok" })),
            ("POST", "/generate") => self.run(body, |b: GenerateBody| self.generate(b)),
            ("POST", "/complete") => self.run(body, |b: CompleteBody| self.complete(b)),
            ("POST", "/mix") => self.run(body, |b: MixBody| self.mix(b)),
            ("POST", "/decode") => self.run(body, |b: DecodeBody| self.decode(b)),
            ("POST", "/labels") => self.run(body, |b: LabelsBody| self.labels(b)),
            (_, "/health" | "/generate" | "/complete" | "/mix" | "/decode" | "/labels") => {
                Response::error(405, format!("{method} not allowed on {path}"))
            }
            _ => Response::error(404, format!("no endpoint {path}")),
        }
    }

    fn run<B: for<'de> Deserialize<'de>>(&self, body: &[u8], f: impl FnOnce(B) -> Result<serde_json::Value>) -> Response {
        let parsed: B = match serde_json::from_slice(body) {
            Ok(b) => b,
            Err(e) => return Response::error(400, format!("malformed body: {e}")),
        };
        match f(parsed) {
            Ok(v) => Response::ok(v),
            Err(e @ (Error::Io(_) | Error::Format(_))) => Response::error(500, e),
            Err(e) => Response::error(422, e),
        }
    }

    fn tokens(text: &Option<String>) -> Result<Option<Vec<u32>>> {
        text.as_deref().map(tokenize).transpose()
    }

    fn generate(&self, b: GenerateBody) -> Result<serde_json::Value> {
        if b.n == 0 || b.n > MAX_GENERATE {
            return Err(Error::Param(format!("n must be in 1..={MAX_GENERATE}")));
        }
        let text = Self::tokens(&b.text)?;
        let parts = b.parts.unwrap_or(self.part_count);
        let mut rng = NoiseRng::new(b.seed);
        let shapes = self
            .cascade()
            .sample(b.n, parts, &mut rng, text.as_deref(), b.w.unwrap_or(DEFAULT_GUIDANCE))?;
        let shapes: Vec<ShapeJson> = shapes.iter().map(ShapeJson::from).collect();
        Ok(json!({ "shapes": shapes }))
    }

    fn complete(&self, b: CompleteBody) -> Result<serde_json::Value> {
        let shape = PartSet::try_from(&b.shape)?;
        let text = Self::tokens(&b.text)?;
        let mask = match (b.mask, &text) {
            (Some(m), _) => {
                if m.iter().any(|&v| v > 1) {
                    return Err(Error::Param("mask entries must be 0 or 1".into()));
                }
                PartMask::from(m)
            }
            (None, Some(t)) => {
                let labels = shape.labels.clone().unwrap_or_else(|| infer_labels(&shape, self.family));
                text_part_selector(t, &labels).mask
            }
            (None, None) => return Err(Error::Param("complete needs a mask or a text".into())),
        };
        let mut rng = NoiseRng::new(b.seed);
        let out = self
            .cascade()
            .complete(&shape, &mask, &mut rng, text.as_deref(), b.w.unwrap_or(DEFAULT_GUIDANCE))?;
        Ok(json!({ "shape": ShapeJson::from(&out) }))
    }

    fn mix(&self, b: MixBody) -> Result<serde_json::Value> {
        let with_labels = |j: &ShapeJson| -> Result<PartSet> {
            let mut s = PartSet::try_from(j)?;
            if s.labels.is_none() {
                s.labels = Some(infer_labels(&s, self.family));
            }
            Ok(s)
        };
        let (a, c) = (with_labels(&b.shape_a)?, with_labels(&b.shape_b)?);
        let t = b.t_start.unwrap_or(DEFAULT_REFINE_T);
        if t > self.sched.steps() {
            return Err(Error::Timestep {
                t,
                steps: self.sched.steps(),
            });
        }
        let mut rng = NoiseRng::new(b.seed);
        let out = self.cascade().mix_and_refine(&a, &c, b.label.resolve()?, t, None, &mut rng)?;
        Ok(json!({ "shape": ShapeJson::from(&out) }))
    }

    fn decode(&self, b: DecodeBody) -> Result<serde_json::Value> {
        let shape = PartSet::try_from(&b.shape)?;
        let count = b.grid.unwrap_or(DEFAULT_DECODE_POINTS);
        if count > MAX_DECODE_POINTS {
            return Err(Error::Param(format!("at most {MAX_DECODE_POINTS} points")));
        }
        let points: Vec<Point> = sample_points(&shape, count, b.seed.unwrap_or(0))?;
        Ok(json!({ "points": points }))
    }

    fn labels(&self, b: LabelsBody) -> Result<serde_json::Value> {
        let shape = PartSet::try_from(&b.shape)?;
        Ok(json!({ "labels": infer_labels(&shape, self.family) }))
    }
}
