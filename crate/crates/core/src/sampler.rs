//! Reverse-process samplers: ancestral sampling, the two-phase cascade, masked
//! completion, mixing with refinement, and classifier-free guidance.
//!
//! Every routine draws from exactly one [`NoiseRng`]. Each reverse step draws
//! the noise for all tokens first; in guided mode, the fresh marginal noise for
//! preserved tokens comes after it. A mask that keeps nothing therefore
//! consumes the stream exactly like unguided sampling.

use serde::{Deserialize, Serialize};

use crate::denoiser::{predict_eps_batch, Cond, ModelParams, Phase};
use crate::error::{Error, Result};
use crate::parts::{denormalize_extrinsics, normalize_extrinsics, ExtrinsicVec, IntrinsicVec, Part, PartMask, PartSet, EXTRINSIC_DIM};
use crate::rng::NoiseRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Default guidance weight for text-conditioned sampling.
pub const DEFAULT_GUIDANCE: f64 = 2.0;
/// Default refinement start for mixing.
pub const DEFAULT_REFINE_T: usize = 10;

/// `(1 + w) * cond - w * uncond`; `w = 0` returns `cond` untouched.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, w: f64) -> Result<Tensor> {
    if w == 0.0 {
        return Ok(cond.clone());
    }
    let (a, b) = ((1.0 + w) as f32, w as f32);
    Ok(cond.zip_map(uncond, "cfg", |c, u| a * c - b * u)?)
}

/// A denoiser together with its conditioning for one batch of shapes.
#[derive(Clone, Debug)]
pub struct Predictor<'a> {
    pub params: &'a ModelParams,
    /// Clean normalized extrinsics aligned with the tokens (phase 2 only).
    pub e0: Option<Tensor>,
    pub conds: Vec<Cond>,
    /// Guidance weight; `None` disables the unconditional pass.
    pub guidance: Option<f64>,
}

impl<'a> Predictor<'a> {
    pub fn new(params: &'a ModelParams, conds: Vec<Cond>) -> Self {
        Predictor {
            params,
            e0: None,
            conds,
            guidance: None,
        }
    }

    pub fn with_extrinsics(mut self, e0: Tensor) -> Self {
        self.e0 = Some(e0);
        self
    }

    pub fn with_guidance(mut self, w: f64) -> Self {
        self.guidance = Some(w);
        self
    }

    /// Noise prediction at timestep `t` for every shape of the batch.
    pub fn predict(&self, x: &Tensor, n: usize, t: usize) -> Result<Tensor> {
        let ts = vec![t; self.conds.len()];
        let cond = predict_eps_batch(self.params, x, n, &ts, self.e0.as_ref(), &self.conds)?;
        match self.guidance {
            None => Ok(cond),
            Some(0.0) => Ok(cond),
            Some(w) => {
                let nulls = vec![Cond::null(); self.conds.len()];
                let uncond = predict_eps_batch(self.params, x, n, &ts, self.e0.as_ref(), &nulls)?;
                cfg_combine(&cond, &uncond, w)
            }
        }
    }
}

/// Guided noise prediction for a single shape.
pub fn cfg_predict(params: &ModelParams, x_t: &Tensor, t: usize, e0: Option<&Tensor>, cond: &Cond, w: f64) -> Result<Tensor> {
    let mut p = Predictor::new(params, vec![cond.clone()]).with_guidance(w);
    p.e0 = e0.cloned();
    let n = x_t.shape().first().copied().unwrap_or(0);
    p.predict(x_t, n, t)
}

/// `x_{t-1} = mu(x_t, eps_hat) + sqrt(beta_t) z`, with no noise at `t = 1`.
pub fn reverse_step_with(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule, rng: &mut NoiseRng) -> Result<Tensor> {
    let (c_xt, c_eps) = sched.posterior_mean_coeffs(t)?;
    let mut mu = x_t.zip_map(eps_hat, "reverse_step", |x, e| c_xt * (x - c_eps * e))?;
    if t > 1 {
        let sd = sched.reverse_std(t);
        let z: Tensor = rng.normal_tensor(mu.shape());
        for (m, zi) in mu.data_mut().iter_mut().zip(z.data()) {
            *m += sd * zi;
        }
    }
    Ok(mu)
}

pub fn reverse_step(pred: &Predictor, x_t: &Tensor, n: usize, t: usize, sched: &NoiseSchedule, rng: &mut NoiseRng) -> Result<Tensor> {
    let eps = pred.predict(x_t, n, t)?;
    reverse_step_with(x_t, &eps, t, sched, rng)
}

/// Run the reverse chain from `x` at `t_start` down to `t = 0`.
pub fn ancestral(pred: &Predictor, mut x: Tensor, n: usize, t_start: usize, sched: &NoiseSchedule, rng: &mut NoiseRng) -> Result<Tensor> {
    for t in (1..=t_start).rev() {
        x = reverse_step(pred, &x, n, t, sched, rng)?;
    }
    Ok(x)
}

/// Overwrite preserved rows of `x` with a draw from `q(x_s | x0)`.
fn resample_preserved(x: &mut Tensor, x0: &Tensor, keep: &[bool], s: usize, sched: &NoiseSchedule, rng: &mut NoiseRng) {
    let cols = x.shape()[1];
    if s == 0 {
        for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            x.row_mut(r).copy_from_slice(x0.row(r));
        }
        return;
    }
    let (a, b) = sched.marginal_coeffs(s);
    for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        let eps: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
        for ((o, &x0v), e) in x.row_mut(r).iter_mut().zip(x0.row(r)).zip(eps) {
            *o = a * x0v + b * e as f32;
        }
    }
}

/// Masked reverse process over stacked tokens `x0: [B * n, D]`.
///
/// `keep[r]` preserves row `r`: at every step it is redrawn from the forward
/// marginal of `x0`, and after the loop it is set to `x0` exactly. Other rows
/// follow the learned reverse chain. From `t_start = T` the chain starts from
/// pure noise; from smaller `t_start` every row starts from `q(x_t | x0)`.
pub fn guided_reverse(
    pred: &Predictor,
    x0: &Tensor,
    keep: &[bool],
    n: usize,
    t_start: usize,
    sched: &NoiseSchedule,
    rng: &mut NoiseRng,
) -> Result<Tensor> {
    let rows = x0.shape()[0];
    if keep.len() != rows {
        return Err(Error::Param(format!("mask has {} entries for {rows} tokens", keep.len())));
    }
    if t_start > sched.steps() {
        return Err(Error::Timestep {
            t: t_start,
            steps: sched.steps(),
        });
    }
    let mut x = if t_start == sched.steps() {
        rng.normal_tensor(x0.shape())
    } else if t_start == 0 {
        x0.clone()
    } else {
        let eps = rng.normal_tensor(x0.shape());
        sched.q_sample(x0, t_start, &eps)?
    };
    if t_start == sched.steps() {
        resample_preserved(&mut x, x0, keep, t_start, sched, rng);
    }
    for t in (1..=t_start).rev() {
        x = reverse_step(pred, &x, n, t, sched, rng)?;
        resample_preserved(&mut x, x0, keep, t - 1, sched, rng);
    }
    for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        x.row_mut(r).copy_from_slice(x0.row(r));
    }
    Ok(x)
}

/// The two trained denoisers and their shared schedule.
#[derive(Clone, Copy, Debug)]
pub struct Cascade<'a> {
    pub phase1: &'a ModelParams,
    pub phase2: &'a ModelParams,
    pub sched: &'a NoiseSchedule,
}

impl<'a> Cascade<'a> {
    pub fn new(phase1: &'a ModelParams, phase2: &'a ModelParams, sched: &'a NoiseSchedule) -> Result<Self> {
        if phase1.config.phase != Phase::Extrinsic || phase2.config.phase != Phase::Intrinsic {
            return Err(Error::ConfigMismatch("cascade needs an extrinsic then an intrinsic model".into()));
        }
        if phase1.stats != phase2.stats {
            return Err(Error::ConfigMismatch("phase models were trained with different statistics".into()));
        }
        Ok(Cascade { phase1, phase2, sched })
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.phase2.config.token_dim
    }

    fn conds(&self, params: &ModelParams, count: usize, text: Option<&[u32]>) -> Vec<Cond> {
        let text = if params.config.has_text() { text.unwrap_or(&[]).to_vec() } else { Vec::new() };
        vec![Cond::full(text); count]
    }

    /// Guidance is applied only to text-conditioned requests on text models.
    fn predictor(&self, params: &'a ModelParams, count: usize, text: Option<&[u32]>, w: f64) -> Predictor<'a> {
        let p = Predictor::new(params, self.conds(params, count, text));
        if text.is_some() && params.config.has_text() {
            p.with_guidance(w)
        } else {
            p
        }
    }

    /// Denormalize, project eigenvectors and floor eigenvalues.
    fn finalize(&self, flat: &Tensor) -> Result<Vec<ExtrinsicVec>> {
        Ok(denormalize_extrinsics(flat, &self.phase1.stats)?
            .into_iter()
            .map(|e| e.projected())
            .collect())
    }

    /// `count` shapes with `n` parts each, sampled as one batch.
    pub fn sample(&self, count: usize, n: usize, rng: &mut NoiseRng, text: Option<&[u32]>, w: f64) -> Result<Vec<PartSet>> {
        if count == 0 || n == 0 {
            return Err(Error::Empty("sample count and part count must be positive"));
        }
        let steps = self.sched.steps();
        let p1 = self.predictor(self.phase1, count, text, w);
        let xe = rng.normal_tensor(&[count * n, EXTRINSIC_DIM]);
        let e_norm = ancestral(&p1, xe, n, steps, self.sched, rng)?;
        let extrinsics = self.finalize(&e_norm)?;
        let e0 = normalize_extrinsics(&extrinsics, &self.phase1.stats);

        let p2 = self.predictor(self.phase2, count, text, w).with_extrinsics(e0);
        let xs = rng.normal_tensor(&[count * n, self.intrinsic_dim()]);
        let s = ancestral(&p2, xs, n, steps, self.sched, rng)?;
        Ok(assemble(&extrinsics, &s, n, None))
    }

    /// Regenerate the parts of `source` that `mask` does not keep.
    ///
    /// Kept parts are copied from `source`; regenerated parts get label 0.
    pub fn complete(&self, source: &PartSet, mask: &PartMask, rng: &mut NoiseRng, text: Option<&[u32]>, w: f64) -> Result<PartSet> {
        source.validate()?;
        let n = source.len();
        if mask.len() != n {
            return Err(Error::Param(format!("mask has {} entries for {n} parts", mask.len())));
        }
        self.check_source(source)?;
        if mask.as_slice().iter().all(|&k| k) {
            return Ok(source.clone());
        }
        let steps = self.sched.steps();
        let keep = mask.as_slice();
        let x0e = normalize_extrinsics(&source.extrinsics(), &self.phase1.stats);
        let p1 = self.predictor(self.phase1, 1, text, w);
        let e_norm = guided_reverse(&p1, &x0e, keep, n, steps, self.sched, rng)?;
        let generated = self.finalize(&e_norm)?;
        let extrinsics: Vec<ExtrinsicVec> = (0..n)
            .map(|i| if keep[i] { source.parts[i].extrinsic } else { generated[i] })
            .collect();

        let e0 = normalize_extrinsics(&extrinsics, &self.phase1.stats);
        let p2 = self.predictor(self.phase2, 1, text, w).with_extrinsics(e0);
        let s = guided_reverse(&p2, &source.intrinsics_tensor(), keep, n, steps, self.sched, rng)?;
        let mut out = assemble(&extrinsics, &s, n, None).remove(0);
        for (i, part) in out.parts.iter_mut().enumerate() {
            if keep[i] {
                *part = source.parts[i].clone();
            }
        }
        out.labels = source
            .labels
            .as_ref()
            .map(|l| l.iter().zip(keep).map(|(&l, &k)| if k { l } else { 0 }).collect());
        Ok(out)
    }

    /// Noise `shape` to `t_start` and denoise both phases back, optionally
    /// preserving the parts `mask` keeps. `t_start = 0` returns `shape`.
    pub fn refine(&self, shape: &PartSet, t_start: usize, mask: Option<&PartMask>, rng: &mut NoiseRng) -> Result<PartSet> {
        shape.validate()?;
        self.check_source(shape)?;
        let n = shape.len();
        if t_start == 0 {
            return Ok(shape.clone());
        }
        let all = vec![false; n];
        let keep = match mask {
            Some(m) if m.len() != n => {
                return Err(Error::Param(format!("mask has {} entries for {n} parts", m.len())));
            }
            Some(m) => m.as_slice(),
            None => &all,
        };
        let x0e = normalize_extrinsics(&shape.extrinsics(), &self.phase1.stats);
        let p1 = self.predictor(self.phase1, 1, None, 0.0);
        let e_norm = guided_reverse(&p1, &x0e, keep, n, t_start, self.sched, rng)?;
        let refined = self.finalize(&e_norm)?;
        let extrinsics: Vec<ExtrinsicVec> = (0..n)
            .map(|i| if keep[i] { shape.parts[i].extrinsic } else { refined[i] })
            .collect();
        let e0 = normalize_extrinsics(&extrinsics, &self.phase1.stats);
        let p2 = self.predictor(self.phase2, 1, None, 0.0).with_extrinsics(e0);
        let s = guided_reverse(&p2, &shape.intrinsics_tensor(), keep, n, t_start, self.sched, rng)?;
        let mut out = assemble(&extrinsics, &s, n, shape.labels.clone()).remove(0);
        for (i, part) in out.parts.iter_mut().enumerate() {
            if keep[i] {
                *part = shape.parts[i].clone();
            }
        }
        Ok(out)
    }

    /// Swap the parts labeled `label` from `b` into `a`, then refine from `t_start`.
    pub fn mix_and_refine(
        &self,
        a: &PartSet,
        b: &PartSet,
        label: u32,
        t_start: usize,
        mask: Option<&PartMask>,
        rng: &mut NoiseRng,
    ) -> Result<PartSet> {
        let mixed = naive_mix(a, b, label)?;
        self.refine(&mixed, t_start, mask, rng)
    }

    fn check_source(&self, s: &PartSet) -> Result<()> {
        if s.intrinsic_dim() != self.intrinsic_dim() {
            return Err(Error::ConfigMismatch(format!(
                "shape codes are {}-dimensional, model expects {}",
                s.intrinsic_dim(),
                self.intrinsic_dim()
            )));
        }
        Ok(())
    }
}

fn assemble(extrinsics: &[ExtrinsicVec], s: &Tensor, n: usize, labels: Option<Vec<u32>>) -> Vec<PartSet> {
    let parts: Vec<Part> = extrinsics
        .iter()
        .enumerate()
        .map(|(r, &extrinsic)| Part {
            extrinsic,
            intrinsic: IntrinsicVec(s.row(r).to_vec()),
        })
        .collect();
    parts
        .chunks(n)
        .map(|c| PartSet {
            parts: c.to_vec(),
            labels: labels.clone(),
        })
        .collect()
}

/// `a` with its parts labeled `label` replaced, in order, by those of `b`.
/// When the counts differ only the first `min` parts are swapped.
pub fn naive_mix(a: &PartSet, b: &PartSet, label: u32) -> Result<PartSet> {
    let ia = a.indices_of(label);
    let ib = b.indices_of(label);
    if ia.is_empty() || ib.is_empty() {
        return Err(Error::MissingLabel(label));
    }
    if a.intrinsic_dim() != b.intrinsic_dim() {
        return Err(Error::ConfigMismatch("shapes have different code sizes".into()));
    }
    let mut out = a.clone();
    for (&i, &j) in ia.iter().zip(&ib) {
        out.parts[i] = b.parts[j].clone();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Generate,
    Complete,
    Mix,
    Refine,
}

/// One inference request; `validate` checks that the mode's inputs are present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub mode: SampleMode,
    /// Parts per generated shape.
    #[serde(default)]
    pub n: usize,
    /// Number of shapes to generate.
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default)]
    pub text: Option<Vec<u32>>,
    #[serde(default)]
    pub sources: Vec<PartSet>,
    #[serde(default)]
    pub mask: Option<PartMask>,
    /// Label whose parts are taken from the second source when mixing.
    #[serde(default)]
    pub label: Option<u32>,
    #[serde(default)]
    pub t_start: Option<usize>,
    #[serde(default = "default_w")]
    pub w: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_w() -> f64 {
    DEFAULT_GUIDANCE
}

impl SampleRequest {
    pub fn generate(count: usize, n: usize, seed: u64) -> Self {
        SampleRequest {
            mode: SampleMode::Generate,
            n,
            count,
            text: None,
            sources: Vec::new(),
            mask: None,
            label: None,
            t_start: None,
            w: DEFAULT_GUIDANCE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Param(format!("{:?} request needs {what}", self.mode)))
            }
        };
        match self.mode {
            SampleMode::Generate => need(self.n > 0 && self.count > 0, "positive n and count"),
            SampleMode::Complete => need(self.sources.len() == 1 && self.mask.is_some(), "one source and a mask"),
            SampleMode::Refine => need(self.sources.len() == 1 && self.t_start.is_some(), "one source and t_start"),
            SampleMode::Mix => need(self.sources.len() == 2 && self.label.is_some(), "two sources and a label"),
        }
    }

    pub fn run(&self, cascade: &Cascade) -> Result<Vec<PartSet>> {
        self.validate()?;
        let mut rng = NoiseRng::new(self.seed);
        let text = self.text.as_deref();
        match self.mode {
            SampleMode::Generate => cascade.sample(self.count, self.n, &mut rng, text, self.w),
            SampleMode::Complete => {
                let mask = self.mask.as_ref().expect("validated");
                Ok(vec![cascade.complete(&self.sources[0], mask, &mut rng, text, self.w)?])
            }
            SampleMode::Refine => {
                let t = self.t_start.expect("validated");
                Ok(vec![cascade.refine(&self.sources[0], t, self.mask.as_ref(), &mut rng)?])
            }
            SampleMode::Mix => {
                let label = self.label.expect("validated");
                let t = self.t_start.unwrap_or(DEFAULT_REFINE_T);
                let (a, b) = (&self.sources[0], &self.sources[1]);
                Ok(vec![cascade.mix_and_refine(a, b, label, t, self.mask.as_ref(), &mut rng)?])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::parts::ExtrinsicStats;
    use crate::toyworld::{generate_dataset, Family, ToySpec};

    fn tiny(phase: Phase, d: usize, text: bool) -> ModelParams {
        let mut cfg = DenoiserConfig {
            embed_dim: 16,
            depth: 1,
            gamma_dim: 8,
            encoder_depth: 1,
            ..DenoiserConfig::toy(phase, d)
        };
        if text {
            cfg = cfg.with_text(4, 23);
        }
        let mut p = ModelParams::init(cfg, ExtrinsicStats::identity(), 3).unwrap();
        let mut rng = NoiseRng::new(4);
        for t in p.tensors_mut() {
            let noise: Tensor = rng.normal_tensor(t.shape());
            *t = t.add(&noise.scale(0.1)).unwrap();
        }
        p
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(20, 1e-4, 0.05).unwrap()
    }

    #[test]
    fn true_noise_inverts_a_step() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
        let mut rng = NoiseRng::new(1);
        let x0: Tensor = rng.normal_tensor(&[4, 3]);
        let eps: Tensor = rng.normal_tensor(&[4, 3]);
        let x1 = s.q_sample(&x0, 1, &eps).unwrap();
        let back = reverse_step_with(&x1, &eps, 1, &s, &mut rng).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-5);
        let mut r1 = NoiseRng::new(2);
        let mut r2 = NoiseRng::new(99);
        assert_eq!(
            reverse_step_with(&x1, &eps, 1, &s, &mut r1).unwrap(),
            reverse_step_with(&x1, &eps, 1, &s, &mut r2).unwrap()
        );
    }

    #[test]
    fn cfg_reductions() {
        let p = tiny(Phase::Extrinsic, 8, true);
        let mut rng = NoiseRng::new(5);
        let x: Tensor = rng.normal_tensor(&[5, 16]);
        let cond = Cond::full(vec![1, 9]);
        let c = predict_eps_batch(&p, &x, 5, &[7], None, std::slice::from_ref(&cond)).unwrap();
        let u = predict_eps_batch(&p, &x, 5, &[7], None, &[Cond::null()]).unwrap();
        assert_eq!(cfg_predict(&p, &x, 7, None, &cond, 0.0).unwrap(), c);
        assert_eq!(cfg_predict(&p, &x, 7, None, &cond, -1.0).unwrap(), u);
        let g = cfg_predict(&p, &x, 7, None, &cond, 2.0).unwrap();
        let want = c.scale(3.0).sub(&u.scale(2.0)).unwrap();
        assert!(g.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn guided_reverse_extremes() {
        let p = tiny(Phase::Extrinsic, 8, false);
        let s = sched();
        let mut rng = NoiseRng::new(6);
        let x0: Tensor = rng.normal_tensor(&[10, 16]);
        let pred = Predictor::new(&p, vec![Cond::null(); 2]);
        let all = guided_reverse(&pred, &x0, &[true; 10], 5, 20, &s, &mut NoiseRng::new(1)).unwrap();
        assert_eq!(all, x0);
        let none = guided_reverse(&pred, &x0, &[false; 10], 5, 20, &s, &mut NoiseRng::new(1)).unwrap();
        let mut r = NoiseRng::new(1);
        let start = r.normal_tensor(&[10, 16]);
        let plain = ancestral(&pred, start, 5, 20, &s, &mut r).unwrap();
        assert_eq!(none, plain);
        let mut keep = [false; 10];
        keep[3] = true;
        keep[8] = true;
        let part = guided_reverse(&pred, &x0, &keep, 5, 20, &s, &mut NoiseRng::new(1)).unwrap();
        assert_eq!(part.row(3), x0.row(3));
        assert_eq!(part.row(8), x0.row(8));
        assert_ne!(part.row(0), x0.row(0));
        assert!(guided_reverse(&pred, &x0, &[true; 9], 5, 20, &s, &mut rng).is_err());
    }

    fn cascade_models(d: usize) -> (ModelParams, ModelParams, NoiseSchedule) {
        (tiny(Phase::Extrinsic, d, true), tiny(Phase::Intrinsic, d, true), sched())
    }

    #[test]
    fn cascade_outputs_valid_and_seeded() {
        let (p1, p2, s) = cascade_models(8);
        let c = Cascade::new(&p1, &p2, &s).unwrap();
        let a = c.sample(2, 5, &mut NoiseRng::new(3), Some(&[0, 1]), 2.0).unwrap();
        let b = c.sample(2, 5, &mut NoiseRng::new(3), Some(&[0, 1]), 2.0).unwrap();
        assert_eq!(a, b);
        for shape in &a {
            assert_eq!(shape.len(), 5);
            for part in &shape.parts {
                assert!(part.extrinsic.orthogonality_error() < 1e-6);
                assert!(part.extrinsic.eigvals.iter().all(|&l| l >= 1e-4));
            }
        }
        assert!(Cascade::new(&p2, &p1, &s).is_err());
    }

    #[test]
    fn completion_preserves_kept_parts() {
        let (p1, p2, s) = cascade_models(8);
        let c = Cascade::new(&p1, &p2, &s).unwrap();
        let src = generate_dataset(&ToySpec::new(Family::Chair, 2).with_intrinsic_dim(8), 1)
            .remove(0)
            .parts;
        let same = c.complete(&src, &PartMask::keep_all(6), &mut NoiseRng::new(1), None, 2.0).unwrap();
        assert_eq!(same, src);
        let mask = PartMask::from_keep(vec![false, false, false, false, true, true]);
        let out = c.complete(&src, &mask, &mut NoiseRng::new(1), None, 2.0).unwrap();
        for i in 4..6 {
            assert_eq!(out.parts[i], src.parts[i]);
        }
        assert_eq!(out.labels.as_ref().unwrap()[..4], [0, 0, 0, 0]);
        assert!(out.parts[0].extrinsic.orthogonality_error() < 1e-6);
        assert!(c.complete(&src, &PartMask::keep_all(5), &mut NoiseRng::new(1), None, 2.0).is_err());
    }

    #[test]
    fn mixing() {
        let (p1, p2, s) = cascade_models(8);
        let c = Cascade::new(&p1, &p2, &s).unwrap();
        let shapes = generate_dataset(&ToySpec::new(Family::Chair, 5).with_intrinsic_dim(8), 2);
        let (a, b) = (&shapes[0].parts, &shapes[1].parts);
        let naive = naive_mix(a, b, crate::toyworld::labels::BACK).unwrap();
        assert_eq!(naive.parts[5], b.parts[5]);
        assert_eq!(naive.parts[0], a.parts[0]);
        let back = crate::toyworld::labels::BACK;
        assert_eq!(c.mix_and_refine(a, b, back, 0, None, &mut NoiseRng::new(1)).unwrap(), naive);
        let refined = c.mix_and_refine(a, b, back, 10, None, &mut NoiseRng::new(1)).unwrap();
        assert_eq!(refined.len(), a.len());
        assert_ne!(refined, naive);
        assert!(matches!(naive_mix(a, b, 4), Err(Error::MissingLabel(4))));
    }

    #[test]
    fn request_validation_and_run() {
        let (p1, p2, s) = cascade_models(8);
        let c = Cascade::new(&p1, &p2, &s).unwrap();
        let mut r = SampleRequest::generate(1, 5, 3);
        assert_eq!(r.run(&c).unwrap().len(), 1);
        r.mode = SampleMode::Mix;
        assert!(r.validate().is_err());
        r.mode = SampleMode::Complete;
        assert!(r.run(&c).is_err());
        let json = serde_json::to_string(&SampleRequest::generate(2, 5, 1)).unwrap();
        let back: SampleRequest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.count, 2);
    }
}
