//! Binary checkpoint and shape-set files. All integers and floats are little-endian.
//!
//! Checkpoint: `"SLDCKPT1"`, `u64` header length, JSON header, `u32` tensor
//! count, then per tensor `u32` name length, UTF-8 name, `u32` rank, `rank`
//! `u32` extents and the row-major `f32` payload.
//!
//! Shape file: `"SLDSHP1"`, `u32` shape count, `u32` code size `d_s`, then per
//! shape `u32` part count `N`, `16 N` extrinsic floats, `N d_s` intrinsic
//! floats, `N` `u32` labels (0 = unlabeled), `u32` caption length and the
//! caption token ids. A shape whose labels are all 0 reads back unlabeled.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, ModelParams};
use crate::error::{Error, Result};
use crate::parts::{ExtrinsicStats, ExtrinsicVec, IntrinsicVec, Part, PartSet, EXTRINSIC_DIM};
use crate::schedule::ScheduleParams;
use crate::tensor::Tensor;
use crate::toyworld::ToyShape;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SLDCKPT1";
pub const SHAPE_MAGIC: &[u8; 7] = b"SLDSHP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub stats: ExtrinsicStats,
    pub step: usize,
    pub seed: u64,
    /// Keys this version does not know about, kept verbatim.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(params: &ModelParams, schedule: ScheduleParams, step: usize, seed: u64) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                config: params.config.clone(),
                schedule,
                stats: params.stats,
                step,
                seed,
                extra: serde_json::Map::new(),
            },
            tensors: params.named().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn to_model(&self) -> Result<ModelParams> {
        ModelParams::from_named(self.header.config.clone(), self.header.stats, self.tensors.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name:?} is too large")))?;
            let data = r.f32s(numel)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, t));
        }
        r.finish()?;
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn shapes_to_bytes(shapes: &[ToyShape]) -> Result<Vec<u8>> {
    let d = shapes.first().map_or(0, |s| s.parts.intrinsic_dim());
    let mut out = Vec::new();
    out.extend_from_slice(SHAPE_MAGIC);
    put_u32(&mut out, shapes.len())?;
    put_u32(&mut out, d)?;
    for s in shapes {
        let p = &s.parts;
        if p.intrinsic_dim() != d {
            return Err(Error::Param("all shapes in a file share one code size".into()));
        }
        put_u32(&mut out, p.len())?;
        for part in &p.parts {
            for v in part.extrinsic.to_flat() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for part in &p.parts {
            for v in part.intrinsic.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for i in 0..p.len() {
            out.extend_from_slice(&p.label(i).unwrap_or(0).to_le_bytes());
        }
        put_u32(&mut out, s.caption.len())?;
        for id in &s.caption {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn shapes_from_bytes(bytes: &[u8]) -> Result<Vec<ToyShape>> {
    let mut r = Cursor::new(bytes);
    if r.take(SHAPE_MAGIC.len())? != SHAPE_MAGIC {
        return Err(Error::Format("not a shape file (bad magic)".into()));
    }
    let count = r.u32()?;
    let d = r.u32()?;
    let mut shapes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()?;
        let ext = r.f32s(n.checked_mul(EXTRINSIC_DIM).ok_or_else(|| Error::Format("part count overflows".into()))?)?;
        let ints = r.f32s(n.checked_mul(d).ok_or_else(|| Error::Format("code size overflows".into()))?)?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u32()? as u32);
        }
        let cap_len = r.u32()?;
        let mut caption = Vec::with_capacity(cap_len.min(1 << 16));
        for _ in 0..cap_len {
            caption.push(r.u32()? as u32);
        }
        let parts = (0..n)
            .map(|i| {
                Ok(Part {
                    extrinsic: ExtrinsicVec::from_flat(&ext[i * EXTRINSIC_DIM..(i + 1) * EXTRINSIC_DIM])?,
                    intrinsic: IntrinsicVec(ints[i * d..(i + 1) * d].to_vec()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = labels.iter().any(|&l| l != 0).then_some(labels);
        shapes.push(ToyShape {
            parts: PartSet { parts, labels },
            caption,
        });
    }
    r.finish()?;
    Ok(shapes)
}

pub fn save_shapes(path: impl AsRef<Path>, shapes: &[ToyShape]) -> Result<()> {
    write_atomic(path.as_ref(), &shapes_to_bytes(shapes)?)
}

pub fn load_shapes(path: impl AsRef<Path>) -> Result<Vec<ToyShape>> {
    shapes_from_bytes(&fs::read(path)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload overflows".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}
