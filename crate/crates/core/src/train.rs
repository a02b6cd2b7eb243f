//! Noise-prediction training for both cascade phases and the ablation baselines.

use serde::{Deserialize, Serialize};

use crate::denoiser::{gamma, Cond, ModelParams, Phase};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::parts::{normalize_extrinsics, ExtrinsicStats, PartSet, EXTRINSIC_DIM};
use crate::rng::NoiseRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::toyworld::ToyShape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub power: f64,
    pub steps: usize,
    pub cfg_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 64,
            lr: 1e-4,
            power: 0.999,
            steps: 10_000,
            cfg_dropout: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.batch == 0 {
            return Err(Error::Param("need lr > 0 and a nonempty batch".into()));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return Err(Error::Param(format!("cfg dropout {} outside [0, 1]", self.cfg_dropout)));
        }
        Ok(())
    }
}

/// `lr0 * (1 - step / total)^power`, floored at zero.
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let frac = (1.0 - step as f64 / total as f64).max(0.0);
    lr0 * frac.powf(power)
}

/// With probability `p`, the null condition (empty text, zeroed extrinsic features).
pub fn apply_cfg_dropout(cond: &Cond, rng: &mut NoiseRng, p: f64) -> Cond {
    if rng.bernoulli(p) {
        Cond::null()
    } else {
        cond.clone()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update. Returns false, leaving everything untouched, when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> bool {
        if !grads.iter().all(Tensor::is_finite) {
            return false;
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            for (((x, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *x = (*x as f64 - update) as f32;
            }
        }
        true
    }
}

/// Normalized tokens and captions of a dataset whose shapes all have `N` parts.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    n: usize,
    extrinsics: Vec<Tensor>,
    intrinsics: Vec<Tensor>,
    captions: Vec<Vec<u32>>,
    stats: ExtrinsicStats,
}

impl TrainingSet {
    pub fn new(shapes: &[PartSet], captions: Vec<Vec<u32>>, stats: ExtrinsicStats) -> Result<Self> {
        let first = shapes.first().ok_or(Error::Empty("training set"))?;
        let n = first.len();
        if captions.len() != shapes.len() {
            return Err(Error::Param("one caption per shape required".into()));
        }
        let d = first.intrinsic_dim();
        let mut extrinsics = Vec::with_capacity(shapes.len());
        let mut intrinsics = Vec::with_capacity(shapes.len());
        for s in shapes {
            s.validate()?;
            if s.len() != n || s.intrinsic_dim() != d {
                return Err(Error::Param(format!(
                    "training shapes must share part count and code size, got {}x{} and {n}x{d}",
                    s.len(),
                    s.intrinsic_dim()
                )));
            }
            extrinsics.push(normalize_extrinsics(&s.extrinsics(), &stats));
            intrinsics.push(s.intrinsics_tensor());
        }
        Ok(TrainingSet {
            n,
            extrinsics,
            intrinsics,
            captions,
            stats,
        })
    }

    /// Statistics are computed from the shapes themselves.
    pub fn from_toy(shapes: &[ToyShape]) -> Result<Self> {
        let sets: Vec<PartSet> = shapes.iter().map(|s| s.parts.clone()).collect();
        let stats = ExtrinsicStats::from_shapes(&sets)?;
        Self::new(&sets, shapes.iter().map(|s| s.caption.clone()).collect(), stats)
    }

    pub fn len(&self) -> usize {
        self.extrinsics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extrinsics.is_empty()
    }

    pub fn part_count(&self) -> usize {
        self.n
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsics[0].shape()[1]
    }

    pub fn stats(&self) -> ExtrinsicStats {
        self.stats
    }

    pub fn extrinsics(&self, i: usize) -> &Tensor {
        &self.extrinsics[i]
    }

    pub fn intrinsics(&self, i: usize) -> &Tensor {
        &self.intrinsics[i]
    }

    pub fn caption(&self, i: usize) -> &[u32] {
        &self.captions[i]
    }

    /// Tokens a model of `phase` denoises for shape `i`.
    pub fn tokens(&self, phase: Phase, i: usize) -> Tensor {
        match phase {
            Phase::Extrinsic => self.extrinsics[i].clone(),
            Phase::Intrinsic => self.intrinsics[i].clone(),
            Phase::Joint => {
                let (e, s) = (&self.extrinsics[i], &self.intrinsics[i]);
                let rows: Vec<Vec<f32>> = (0..self.n).map(|r| [e.row(r), s.row(r)].concat()).collect();
                Tensor::from_rows(&rows).expect("aligned rows")
            }
        }
    }

    /// Flattened `[e | s]` vector of shape `i`.
    pub fn flat(&self, i: usize) -> Vec<f32> {
        [self.extrinsics[i].data(), self.intrinsics[i].data()].concat()
    }
}

fn stack(parts: &[Tensor]) -> Tensor {
    let cols = parts[0].shape()[1];
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(vec![rows, cols], data).expect("stacked rows")
}

/// `x_t` for every shape of a stacked batch, each with its own timestep.
pub fn q_sample_batch(sched: &NoiseSchedule, x0: &Tensor, n: usize, t: &[usize], eps: &Tensor) -> Result<Tensor> {
    let cols = x0.shape()[1];
    let mut out = x0.clone();
    for (b, &ti) in t.iter().enumerate() {
        sched.check_t(ti)?;
        let (a, s) = sched.marginal_coeffs(ti);
        let range = b * n * cols..(b + 1) * n * cols;
        for (o, (&x, &e)) in out.data_mut()[range.clone()]
            .iter_mut()
            .zip(x0.data()[range.clone()].iter().zip(&eps.data()[range]))
        {
            *o = a * x + s * e;
        }
    }
    Ok(out)
}

/// Mean squared error of a prediction against the drawn noise.
pub fn eps_mse(pred: &Tensor, eps: &Tensor) -> Result<f32> {
    let d = pred.sub(eps)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f32>() / d.numel() as f32)
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f32,
    /// One gradient per parameter tensor, in storage order.
    pub grads: Vec<Tensor>,
}

/// Loss and gradients for fixed timesteps and noise.
#[allow(clippy::too_many_arguments)]
pub fn loss_with_noise(
    params: &ModelParams,
    sched: &NoiseSchedule,
    x0: &Tensor,
    e0: Option<&Tensor>,
    n: usize,
    t: &[usize],
    eps: &Tensor,
    conds: &[Cond],
) -> Result<LossOutput> {
    let xt = q_sample_batch(sched, x0, n, t, eps)?;
    let mut g = Graph::new();
    let net = params.bind(&mut g, true);
    let xv = g.constant(xt);
    let ev = e0.map(|e| g.constant(e.clone()));
    let pred = net.predict(&mut g, xv, n, t, ev, conds)?;
    let target = g.constant(eps.clone());
    let loss = g.mse(pred, target)?;
    let mut grads = g.backward(loss)?;
    let grads = collect_grads(&mut grads, net.vars(), params.tensors());
    Ok(LossOutput {
        loss: g.value(loss).data()[0],
        grads,
    })
}

fn collect_grads(grads: &mut crate::graph::Gradients<f32>, vars: &[Var], like: &[Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(like)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

/// A batch drawn from a [`TrainingSet`]: stacked clean tokens, the aligned
/// clean extrinsics, and per-shape conditions after dropout.
#[derive(Clone, Debug)]
pub struct DrawnBatch {
    pub x0: Tensor,
    pub e0: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub conds: Vec<Cond>,
}

/// Draw shape indices, timesteps, noise and condition dropout, in that order.
pub fn draw_batch(
    data: &TrainingSet,
    phase: Phase,
    sched: &NoiseSchedule,
    batch: usize,
    cfg_dropout: f64,
    rng: &mut NoiseRng,
) -> DrawnBatch {
    let idx: Vec<usize> = (0..batch).map(|_| rng.below(data.len())).collect();
    draw_for(data, phase, sched, &idx, cfg_dropout, rng)
}

fn draw_for(
    data: &TrainingSet,
    phase: Phase,
    sched: &NoiseSchedule,
    idx: &[usize],
    cfg_dropout: f64,
    rng: &mut NoiseRng,
) -> DrawnBatch {
    let x0 = stack(&idx.iter().map(|&i| data.tokens(phase, i)).collect::<Vec<_>>());
    let e0 = stack(&idx.iter().map(|&i| data.extrinsics(i).clone()).collect::<Vec<_>>());
    let t: Vec<usize> = idx.iter().map(|_| 1 + rng.below(sched.steps())).collect();
    let eps = rng.normal_tensor(x0.shape());
    let conds = idx
        .iter()
        .map(|&i| apply_cfg_dropout(&Cond::full(data.caption(i).to_vec()), rng, cfg_dropout))
        .collect();
    DrawnBatch { x0, e0, t, eps, conds }
}

fn phase_loss(
    params: &ModelParams,
    sched: &NoiseSchedule,
    data: &TrainingSet,
    idx: &[usize],
    cfg_dropout: f64,
    rng: &mut NoiseRng,
    phase: Phase,
) -> Result<LossOutput> {
    if params.config.phase != phase {
        return Err(Error::ConfigMismatch(format!("expected a {phase:?} model")));
    }
    let b = draw_for(data, phase, sched, idx, cfg_dropout, rng);
    let e0 = (phase == Phase::Intrinsic).then_some(&b.e0);
    loss_with_noise(params, sched, &b.x0, e0, data.part_count(), &b.t, &b.eps, &b.conds)
}

/// Extrinsic noise-prediction loss over the shapes `idx` of `data`.
pub fn loss_phase1(
    params: &ModelParams,
    sched: &NoiseSchedule,
    data: &TrainingSet,
    idx: &[usize],
    cfg_dropout: f64,
    rng: &mut NoiseRng,
) -> Result<LossOutput> {
    phase_loss(params, sched, data, idx, cfg_dropout, rng, Phase::Extrinsic)
}

/// Intrinsic noise-prediction loss conditioned on the clean extrinsics.
pub fn loss_phase2(
    params: &ModelParams,
    sched: &NoiseSchedule,
    data: &TrainingSet,
    idx: &[usize],
    cfg_dropout: f64,
    rng: &mut NoiseRng,
) -> Result<LossOutput> {
    phase_loss(params, sched, data, idx, cfg_dropout, rng, Phase::Intrinsic)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
    pub skipped: bool,
}

/// `step,loss,lr` rows with a header line.
pub fn curve_csv(curve: &[StepLog]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for l in curve {
        s.push_str(&format!("{},{},{}\n", l.step, l.loss, l.lr));
    }
    s
}

/// Mean loss over the last `k` logged steps.
pub fn trailing_mean(curve: &[StepLog], k: usize) -> f32 {
    let tail = &curve[curve.len().saturating_sub(k)..];
    if tail.is_empty() {
        return f32::NAN;
    }
    tail.iter().map(|l| l.loss).sum::<f32>() / tail.len() as f32
}

/// Stepwise trainer for one set denoiser.
pub struct Trainer<'d> {
    pub params: ModelParams,
    data: &'d TrainingSet,
    sched: &'d NoiseSchedule,
    config: TrainConfig,
    adam: Adam,
    rng: NoiseRng,
    step: usize,
    skipped: usize,
    curve: Vec<StepLog>,
}

impl<'d> Trainer<'d> {
    pub fn new(params: ModelParams, data: &'d TrainingSet, sched: &'d NoiseSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let want = match params.config.phase {
            Phase::Extrinsic => EXTRINSIC_DIM,
            Phase::Intrinsic => data.intrinsic_dim(),
            Phase::Joint => EXTRINSIC_DIM + data.intrinsic_dim(),
        };
        if params.config.token_dim != want {
            return Err(Error::ConfigMismatch(format!(
                "model tokens are {}-dimensional, data gives {want}",
                params.config.token_dim
            )));
        }
        let adam = Adam::new(params.tensors());
        let rng = NoiseRng::new(config.seed);
        Ok(Trainer {
            params,
            data,
            sched,
            config,
            adam,
            rng,
            step: 0,
            skipped: 0,
            curve: Vec::new(),
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn curve(&self) -> &[StepLog] {
        &self.curve
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let phase = self.params.config.phase;
        let idx: Vec<usize> = (0..self.config.batch).map(|_| self.rng.below(self.data.len())).collect();
        let out = phase_loss(
            &self.params,
            self.sched,
            self.data,
            &idx,
            self.config.cfg_dropout,
            &mut self.rng,
            phase,
        )?;
        let lr = poly_lr(self.config.lr, self.step, self.config.steps, self.config.power);
        let applied = out.loss.is_finite() && self.adam.step(self.params.tensors_mut(), &out.grads, lr);
        if !applied {
            self.skipped += 1;
            log::warn!("step {}: non-finite gradients, update skipped ({} total)", self.step, self.skipped);
        }
        let log = StepLog {
            step: self.step,
            loss: out.loss,
            lr,
            skipped: !applied,
        };
        self.step += 1;
        self.curve.push(log);
        Ok(log)
    }

    /// Run the remaining steps, calling `each` after every step.
    pub fn run(&mut self, mut each: impl FnMut(&Self, &StepLog) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let log = self.step()?;
            each(self, &log)?;
        }
        Ok(())
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }
}

/// Train a set denoiser on `(e_i, s_i)` tokens.
pub fn train_baseline_p(
    params: ModelParams,
    data: &TrainingSet,
    sched: &NoiseSchedule,
    config: TrainConfig,
) -> Result<(ModelParams, Vec<StepLog>)> {
    if params.config.phase != Phase::Joint {
        return Err(Error::ConfigMismatch("the p baseline uses joint tokens".into()));
    }
    let mut tr = Trainer::new(params, data, sched, config)?;
    tr.run(|_, _| Ok(()))?;
    let curve = tr.curve.clone();
    Ok((tr.into_params(), curve))
}

/// Width of the z-baseline latent.
pub const Z_DIM: usize = 512;

/// MLP noise predictor over a fixed random projection of flattened shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ZBaseline {
    /// `[flat_dim, Z_DIM]`, entries `N(0, 1 / flat_dim)`.
    pub projection: Tensor,
    pub gamma_dim: usize,
    /// `w1, b1, w2, b2, w3, b3`.
    pub weights: Vec<Tensor>,
}

impl ZBaseline {
    pub fn init(flat_dim: usize, hidden: usize, gamma_dim: usize, seed: u64) -> Self {
        let mut rng = NoiseRng::new(seed);
        let projection = rng.normal_tensor::<f32>(&[flat_dim, Z_DIM]).scale(1.0 / (flat_dim as f32).sqrt());
        let mut layer = |fan_in: usize, fan_out: usize| {
            let w = rng.normal_tensor::<f32>(&[fan_in, fan_out]).scale(1.0 / (fan_in as f32).sqrt());
            [w, Tensor::zeros(&[fan_out])]
        };
        let weights = [layer(Z_DIM + gamma_dim, hidden), layer(hidden, hidden), layer(hidden, Z_DIM)]
            .into_iter()
            .flatten()
            .collect();
        ZBaseline {
            projection,
            gamma_dim,
            weights,
        }
    }

    pub fn latent(&self, flat: &[f32]) -> Result<Tensor> {
        let row = Tensor::new(vec![1, flat.len()], flat.to_vec())?;
        Ok(row.matmul(&self.projection)?)
    }

    fn forward(&self, g: &mut Graph<f32>, w: &[Var], zt: Var, t: &[usize]) -> Result<Var> {
        let mut gam = Vec::with_capacity(t.len() * self.gamma_dim);
        for &ti in t {
            gam.extend(gamma(ti, self.gamma_dim)?.into_iter().map(|v| v as f32));
        }
        let gam = g.constant(Tensor::new(vec![t.len(), self.gamma_dim], gam)?);
        let mut h = g.concat_cols(&[zt, gam])?;
        for layer in 0..3 {
            h = g.matmul(h, w[2 * layer])?;
            h = g.add_row(h, w[2 * layer + 1])?;
            if layer < 2 {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }

    /// Predicted noise for a batch of latents `[B, Z_DIM]`.
    pub fn predict(&self, zt: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let w: Vec<Var> = self.weights.iter().map(|t| g.constant(t.clone())).collect();
        let z = g.constant(zt.clone());
        let out = self.forward(&mut g, &w, z, t)?;
        Ok(g.value(out).clone())
    }

    fn loss(&self, z0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<LossOutput> {
        let zt = q_sample_batch(sched, z0, 1, t, eps)?;
        let mut g = Graph::new();
        let w: Vec<Var> = self.weights.iter().map(|t| g.param(t.clone())).collect();
        let z = g.constant(zt);
        let pred = self.forward(&mut g, &w, z, t)?;
        let target = g.constant(eps.clone());
        let loss = g.mse(pred, target)?;
        let mut grads = g.backward(loss)?;
        let grads = collect_grads(&mut grads, &w, &self.weights);
        Ok(LossOutput {
            loss: g.value(loss).data()[0],
            grads,
        })
    }
}

/// Train the z baseline; deterministic given `config.seed`.
pub fn train_baseline_z(
    data: &TrainingSet,
    sched: &NoiseSchedule,
    config: &TrainConfig,
    hidden: usize,
    gamma_dim: usize,
) -> Result<(ZBaseline, Vec<StepLog>)> {
    config.validate()?;
    let mut model = ZBaseline::init(data.flat(0).len(), hidden, gamma_dim, config.seed ^ 0x2b);
    let latents: Vec<Tensor> = (0..data.len()).map(|i| model.latent(&data.flat(i))).collect::<Result<_>>()?;
    let mut adam = Adam::new(&model.weights);
    let mut rng = NoiseRng::new(config.seed);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch).map(|_| rng.below(data.len())).collect();
        let z0 = stack(&idx.iter().map(|&i| latents[i].clone()).collect::<Vec<_>>());
        let t: Vec<usize> = idx.iter().map(|_| 1 + rng.below(sched.steps())).collect();
        let eps = rng.normal_tensor(z0.shape());
        let out = model.loss(&z0, &t, &eps, sched)?;
        let lr = poly_lr(config.lr, step, config.steps, config.power);
        let applied = out.loss.is_finite() && adam.step(&mut model.weights, &out.grads, lr);
        curve.push(StepLog {
            step,
            loss: out.loss,
            lr,
            skipped: !applied,
        });
    }
    Ok((model, curve))
}
