//! Model directories and toy model construction shared by the binary and the examples.
//!
//! A model directory holds `phase1.sldckpt` (extrinsics) and `phase2.sldckpt`
//! (intrinsics). Both carry the same schedule; the toy family, when known, is
//! stored under the `family` header key.

use std::path::{Path, PathBuf};

use crate::denoiser::{DenoiserConfig, ModelParams, Phase};
use crate::error::{Error, Result};
use crate::format::Checkpoint;
use crate::sampler::Cascade;
use crate::schedule::NoiseSchedule;
use crate::service::Service;
use crate::toyworld::{vocab_size, Family};
use crate::train::TrainingSet;

pub const PHASE1_FILE: &str = "phase1.sldckpt";
pub const PHASE2_FILE: &str = "phase2.sldckpt";
const FAMILY_KEY: &str = "family";

pub fn phase_path(dir: impl AsRef<Path>, phase: Phase) -> Result<PathBuf> {
    let file = match phase {
        Phase::Extrinsic => PHASE1_FILE,
        Phase::Intrinsic => PHASE2_FILE,
        Phase::Joint => return Err(Error::Param("model directories hold cascade phases only".into())),
    };
    Ok(dir.as_ref().join(file))
}

/// Untrained toy-size model for `phase` over the data's shapes; `text_dim == 0` drops text conditioning.
pub fn toy_model(phase: Phase, data: &TrainingSet, text_dim: usize, seed: u64) -> Result<ModelParams> {
    let mut cfg = DenoiserConfig::toy(phase, data.intrinsic_dim());
    if text_dim > 0 {
        cfg = cfg.with_text(text_dim, vocab_size());
    }
    ModelParams::init(cfg, data.stats(), seed)
}

pub fn save_phase(
    dir: impl AsRef<Path>,
    params: &ModelParams,
    sched: &NoiseSchedule,
    step: usize,
    seed: u64,
    family: Option<Family>,
) -> Result<()> {
    std::fs::create_dir_all(dir.as_ref())?;
    let mut ckpt = Checkpoint::from_model(params, sched.params(), step, seed);
    if let Some(f) = family {
        ckpt.header.extra.insert(FAMILY_KEY.into(), f.name().into());
    }
    ckpt.save(phase_path(dir, params.config.phase)?)
}

/// Loaded checkpoint with its schedule and family.
pub struct LoadedPhase {
    pub params: ModelParams,
    pub sched: NoiseSchedule,
    pub family: Option<Family>,
    pub step: usize,
}

pub fn load_phase(dir: impl AsRef<Path>, phase: Phase) -> Result<LoadedPhase> {
    let path = phase_path(dir, phase)?;
    let ckpt = Checkpoint::load(&path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        e => e,
    })?;
    let params = ckpt.to_model()?;
    if params.config.phase != phase {
        return Err(Error::ConfigMismatch(format!("{} holds a {:?} model", path.display(), params.config.phase)));
    }
    let family = match ckpt.header.extra.get(FAMILY_KEY) {
        Some(v) => Some(
            v.as_str()
                .ok_or_else(|| Error::Format("family must be a string".into()))?
                .parse()?,
        ),
        None => None,
    };
    Ok(LoadedPhase {
        sched: NoiseSchedule::from_params(ckpt.header.schedule)?,
        params,
        family,
        step: ckpt.header.step,
    })
}

/// Both cascade phases loaded from one directory.
pub struct ModelDir {
    pub phase1: ModelParams,
    pub phase2: ModelParams,
    pub sched: NoiseSchedule,
    pub family: Option<Family>,
}

impl ModelDir {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let p1 = load_phase(&dir, Phase::Extrinsic)?;
        let p2 = load_phase(&dir, Phase::Intrinsic)?;
        if p1.sched.params() != p2.sched.params() {
            return Err(Error::ConfigMismatch("phase checkpoints use different schedules".into()));
        }
        let dir = ModelDir {
            phase1: p1.params,
            phase2: p2.params,
            sched: p1.sched,
            family: p1.family.or(p2.family),
        };
        dir.cascade()?;
        Ok(dir)
    }

    pub fn cascade(&self) -> Result<Cascade<'_>> {
        Cascade::new(&self.phase1, &self.phase2, &self.sched)
    }

    /// Part count for generation: the family's when known.
    pub fn part_count(&self) -> Option<usize> {
        self.family.map(Family::part_count)
    }

    pub fn into_service(self, fallback: Family) -> Result<Service> {
        Service::new(self.phase1, self.phase2, self.sched, self.family.unwrap_or(fallback))
    }
}
