//! Set-transformer noise predictors.
//!
//! Tokens of `B` shapes with `N` parts each are stacked row-wise into a
//! `[B * N, token_dim]` matrix; attention runs within each shape and there is
//! no positional encoding over the part index, so every network here is
//! permutation-equivariant per shape.
//!
//! Phase 1 (`Phase::Extrinsic`) conditions each block on `gamma(t)` and,
//! when configured, a pooled text feature. Phase 2 (`Phase::Intrinsic`) adds
//! per-token features of the clean extrinsics from a separate attention stack;
//! its per-token condition is `concat(gamma(t), E(e_i), text)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::graph::{Graph, Var};
use crate::parts::{ExtrinsicStats, EXTRINSIC_DIM};
use crate::rng::NoiseRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Extrinsic,
    Intrinsic,
    /// Concatenated `(e_i, s_i)` tokens denoised jointly, without an encoder.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub phase: Phase,
    /// 16 for phase 1, `d_s` for phase 2, `16 + d_s` for joint tokens.
    pub token_dim: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub gamma_dim: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Width of the pooled text feature; 0 builds a model without text input.
    pub text_dim: usize,
    pub vocab_size: usize,
    /// Blocks in the extrinsic encoder (phase 2 only).
    pub encoder_depth: usize,
}

impl DenoiserConfig {
    /// Full-size configuration: 512-wide, 6 blocks, 128-dim timestep encoding.
    pub fn full(phase: Phase, intrinsic_dim: usize) -> Self {
        DenoiserConfig {
            phase,
            token_dim: match phase {
                Phase::Extrinsic => EXTRINSIC_DIM,
                Phase::Intrinsic => intrinsic_dim,
                Phase::Joint => EXTRINSIC_DIM + intrinsic_dim,
            },
            embed_dim: 512,
            depth: 6,
            heads: 4,
            gamma_dim: 128,
            mlp_ratio: 4,
            text_dim: 0,
            vocab_size: 0,
            encoder_depth: 4,
        }
    }

    /// Small configuration for the toy world.
    pub fn toy(phase: Phase, intrinsic_dim: usize) -> Self {
        DenoiserConfig {
            embed_dim: 64,
            depth: 4,
            gamma_dim: 32,
            mlp_ratio: 2,
            ..Self::full(phase, intrinsic_dim)
        }
    }

    pub fn with_text(mut self, text_dim: usize, vocab_size: usize) -> Self {
        self.text_dim = text_dim;
        self.vocab_size = vocab_size;
        self
    }

    pub fn has_text(&self) -> bool {
        self.text_dim > 0
    }

    /// Width of the extrinsic features fed into phase-2 conditions.
    pub fn feature_dim(&self) -> usize {
        match self.phase {
            Phase::Extrinsic | Phase::Joint => 0,
            Phase::Intrinsic => self.embed_dim,
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.gamma_dim + self.feature_dim() + self.text_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Param(m));
        if self.token_dim == 0 || self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("denoiser dimensions must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.gamma_dim == 0 || !self.gamma_dim.is_multiple_of(2) {
            return fail(format!("gamma_dim must be even and positive, got {}", self.gamma_dim));
        }
        if self.embed_dim < 2 {
            return fail("embed_dim must be at least 2 for layer normalization".into());
        }
        if self.phase == Phase::Extrinsic && self.token_dim != EXTRINSIC_DIM {
            return fail(format!("phase-1 tokens are {EXTRINSIC_DIM}-dimensional"));
        }
        if self.has_text() && self.vocab_size == 0 {
            return fail("text conditioning needs a vocabulary".into());
        }
        Ok(())
    }
}

/// Sinusoidal timestep encoding `[sin(t w_0), cos(t w_0), sin(t w_1), ...]`
/// with `w_k = 10000^(-2k / dim)`.
pub fn gamma(t: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Param(format!("gamma dimension must be even, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let a = t as f64 * w;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// Per-shape conditioning. An empty `text` selects the null text embedding;
/// `extrinsic_features = false` replaces phase-2 extrinsic features by zeros.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cond {
    pub text: Vec<u32>,
    pub extrinsic_features: bool,
}

impl Cond {
    pub fn null() -> Self {
        Cond::default()
    }

    pub fn full(text: Vec<u32>) -> Self {
        Cond {
            text,
            extrinsic_features: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zero,
    One,
}

fn linear(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
    specs.push((format!("{name}.w"), vec![fan_in, fan_out], Init::Normal(1.0 / (fan_in as f64).sqrt())));
    if bias {
        specs.push((format!("{name}.b"), vec![fan_out], Init::Zero));
    }
}

fn zero_linear(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize) {
    specs.push((format!("{name}.w"), vec![fan_in, fan_out], Init::Zero));
    specs.push((format!("{name}.b"), vec![fan_out], Init::Zero));
}

fn attention_specs(specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, f: usize, hidden: usize) {
    for p in ["q", "k", "v"] {
        linear(specs, &format!("{prefix}.{p}"), f, f, false);
    }
    linear(specs, &format!("{prefix}.o"), f, f, true);
    linear(specs, &format!("{prefix}.mlp1"), f, hidden, true);
    linear(specs, &format!("{prefix}.mlp2"), hidden, f, true);
}

/// Names, shapes and initializers of every tensor, in storage order.
fn param_specs(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, Init)> {
    let f = cfg.embed_dim;
    let hidden = f * cfg.mlp_ratio;
    let c = cfg.cond_dim();
    let mut s = Vec::new();
    linear(&mut s, "in", cfg.token_dim, f, true);
    for i in 0..cfg.depth {
        let b = format!("block{i}");
        attention_specs(&mut s, &b, f, hidden);
        for ln in ["ln1", "ln2"] {
            zero_linear(&mut s, &format!("{b}.{ln}.scale"), c, f);
            zero_linear(&mut s, &format!("{b}.{ln}.shift"), c, f);
        }
    }
    s.push(("out.w".into(), vec![f, cfg.token_dim], Init::Normal(0.1 / (f as f64).sqrt())));
    s.push(("out.b".into(), vec![cfg.token_dim], Init::Zero));
    if cfg.phase == Phase::Intrinsic {
        linear(&mut s, "enc.in", EXTRINSIC_DIM, f, true);
        for i in 0..cfg.encoder_depth {
            let b = format!("enc{i}");
            attention_specs(&mut s, &b, f, hidden);
            for ln in ["ln1", "ln2"] {
                s.push((format!("{b}.{ln}.gain"), vec![f], Init::One));
                s.push((format!("{b}.{ln}.bias"), vec![f], Init::Zero));
            }
        }
    }
    if cfg.has_text() {
        s.push(("text.embed".into(), vec![cfg.vocab_size + 1, cfg.text_dim], Init::Normal(1.0)));
    }
    s
}

/// All learnable tensors of one denoiser plus the extrinsic normalization
/// statistics. Tensors are stored in a fixed, config-determined order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: DenoiserConfig,
    pub stats: ExtrinsicStats,
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn init(config: DenoiserConfig, stats: ExtrinsicStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = NoiseRng::new(seed);
        let specs = param_specs(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let t = match init {
                Init::Normal(std) => rng.normal_tensor::<f32>(&shape).scale(std as f32),
                Init::Zero => Tensor::zeros(&shape),
                Init::One => Tensor::ones(&shape),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(config, stats, names, tensors))
    }

    fn assemble(config: DenoiserConfig, stats: ExtrinsicStats, names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ModelParams {
            config,
            stats,
            names,
            index,
            tensors,
        }
    }

    /// Rebuild from named tensors; names and shapes must match the config exactly.
    pub fn from_named(config: DenoiserConfig, stats: ExtrinsicStats, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != named.len() {
            return Err(Error::ConfigMismatch(format!(
                "config expects {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut by_name: HashMap<String, Tensor> = HashMap::with_capacity(named.len());
        for (n, t) in named {
            if by_name.insert(n.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor name {n:?}")));
            }
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, _) in specs {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing tensor {name:?}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {name:?} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("tensor {name:?} is not finite")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(config, stats, names, tensors))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Place every tensor on `g` as a trainable leaf (or a constant).
    pub fn bind<'a, F: Scalar>(&'a self, g: &mut Graph<F>, trainable: bool) -> Net<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let t = t.cast::<F>();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Net {
            config: &self.config,
            index: &self.index,
            vars,
        }
    }

    /// Like [`ModelParams::bind`] but with caller-supplied values in storage
    /// order, e.g. higher-precision copies.
    pub fn bind_values<'a, F: Scalar>(&'a self, g: &mut Graph<F>, values: &[Tensor<F>]) -> Result<Net<'a>> {
        if values.len() != self.tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        let vars = values.iter().map(|t| g.param(t.clone())).collect();
        self.bind_vars(vars)
    }

    /// Wrap graph nodes already holding this model's tensors in storage order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Net<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                vars.len()
            )));
        }
        Ok(Net {
            config: &self.config,
            index: &self.index,
            vars,
        })
    }
}

/// A [`ModelParams`] bound to a graph.
pub struct Net<'a> {
    config: &'a DenoiserConfig,
    index: &'a HashMap<String, usize>,
    vars: Vec<Var>,
}

type GraphResult<T> = std::result::Result<T, TensorError>;

impl<'a> Net<'a> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.config
    }

    fn p(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn linear<F: Scalar>(&self, g: &mut Graph<F>, x: Var, name: &str) -> GraphResult<Var> {
        let y = g.matmul(x, self.p(&format!("{name}.w")))?;
        match self.index.get(&format!("{name}.b")) {
            Some(&i) => g.add_row(y, self.vars[i]),
            None => Ok(y),
        }
    }

    /// Multi-head self-attention within each group of `n` consecutive rows.
    fn attention<F: Scalar>(&self, g: &mut Graph<F>, h: Var, n: usize, prefix: &str) -> GraphResult<Var> {
        let (rows, f) = (g.shape(h)[0], g.shape(h)[1]);
        let b = rows / n;
        let heads = self.config.heads;
        let dh = f / heads;
        let split = |g: &mut Graph<F>, x: Var| -> GraphResult<Var> {
            let x = g.reshape(x, &[b, n, heads, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * heads, n, dh])
        };
        let q = self.linear(g, h, &format!("{prefix}.q"))?;
        let k = self.linear(g, h, &format!("{prefix}.k"))?;
        let v = self.linear(g, h, &format!("{prefix}.v"))?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, F::of(1.0 / (dh as f64).sqrt()))?;
        let attn = g.softmax(scores)?;
        let mixed = g.bmm(attn, v, false)?;
        let mixed = g.reshape(mixed, &[b, heads, n, dh])?;
        let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = g.reshape(mixed, &[rows, f])?;
        self.linear(g, mixed, &format!("{prefix}.o"))
    }

    fn mlp<F: Scalar>(&self, g: &mut Graph<F>, h: Var, prefix: &str) -> GraphResult<Var> {
        let x = self.linear(g, h, &format!("{prefix}.mlp1"))?;
        let x = g.silu(x)?;
        self.linear(g, x, &format!("{prefix}.mlp2"))
    }

    /// `layernorm(h) * (1 + W_s c + b_s) + (W_t c + b_t)`; `cond` has one row per row of `h`.
    pub fn adaln<F: Scalar>(&self, g: &mut Graph<F>, h: Var, cond: Var, prefix: &str) -> GraphResult<Var> {
        let want = self.config.cond_dim();
        if g.shape(cond).get(1) != Some(&want) || g.shape(cond)[0] != g.shape(h)[0] {
            return Err(TensorError::Shape {
                op: "adaln",
                expected: vec![g.shape(h)[0], want],
                got: g.shape(cond).to_vec(),
            });
        }
        let normed = g.layernorm(h)?;
        let scale = self.linear(g, cond, &format!("{prefix}.scale"))?;
        let scale = g.add_scalar(scale, F::one())?;
        let shift = self.linear(g, cond, &format!("{prefix}.shift"))?;
        let y = g.mul(normed, scale)?;
        g.add(y, shift)
    }

    fn affine_layernorm<F: Scalar>(&self, g: &mut Graph<F>, h: Var, prefix: &str) -> GraphResult<Var> {
        let normed = g.layernorm(h)?;
        let rows = g.shape(h)[0];
        let gain = self.p(&format!("{prefix}.gain"));
        // row-broadcast multiply as a gather of the gain into a full matrix
        let gain_rows = g.reshape(gain, &[1, self.config.embed_dim])?;
        let gain_full = g.gather_rows(gain_rows, &vec![0; rows])?;
        let y = g.mul(normed, gain_full)?;
        g.add_row(y, self.p(&format!("{prefix}.bias")))
    }

    /// Pooled text features, one row per entry of `texts`.
    pub fn text_features<F: Scalar>(&self, g: &mut Graph<F>, texts: &[&[u32]]) -> Result<Var> {
        let vocab = self.config.vocab_size;
        let mut pool = vec![F::zero(); texts.len() * (vocab + 1)];
        for (row, ids) in texts.iter().enumerate() {
            let r = &mut pool[row * (vocab + 1)..(row + 1) * (vocab + 1)];
            if ids.is_empty() {
                r[vocab] = F::one();
            }
            for &id in ids.iter() {
                if id as usize >= vocab {
                    return Err(Error::UnknownToken(format!("id {id}")));
                }
                r[id as usize] += F::of(1.0 / ids.len() as f64);
            }
        }
        let pool = g.constant(Tensor::new(vec![texts.len(), vocab + 1], pool)?);
        Ok(g.matmul(pool, self.p("text.embed"))?)
    }

    /// Per-token features of clean normalized extrinsics, `[rows, embed_dim]`.
    pub fn encode_extrinsics<F: Scalar>(&self, g: &mut Graph<F>, e0: Var, n: usize) -> Result<Var> {
        if self.config.phase != Phase::Intrinsic {
            return Err(Error::Param("only phase-2 models carry an extrinsic encoder".into()));
        }
        check_tokens(g, e0, n, EXTRINSIC_DIM)?;
        let mut h = self.linear(g, e0, "enc.in")?;
        for i in 0..self.config.encoder_depth {
            let b = format!("enc{i}");
            let a = self.attention(g, h, n, &b)?;
            let s = g.add(h, a)?;
            h = self.affine_layernorm(g, s, &format!("{b}.ln1"))?;
            let m = self.mlp(g, h, &b)?;
            let s = g.add(h, m)?;
            h = self.affine_layernorm(g, s, &format!("{b}.ln2"))?;
        }
        Ok(h)
    }

    /// Noise prediction for `B = t.len()` shapes of `n` tokens stacked in `x`.
    ///
    /// `e0` (phase 2 only) holds the clean normalized extrinsics aligned with `x`.
    /// `conds` has one entry per shape.
    pub fn predict<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        n: usize,
        t: &[usize],
        e0: Option<Var>,
        conds: &[Cond],
    ) -> Result<Var> {
        let cfg = self.config;
        let rows = check_tokens(g, x, n, cfg.token_dim)?;
        let b = rows / n;
        if t.len() != b || conds.len() != b {
            return Err(Error::Param(format!(
                "{b} shapes in the batch but {} timesteps and {} conditions",
                t.len(),
                conds.len()
            )));
        }
        let owner: Vec<usize> = (0..rows).map(|r| r / n).collect();

        let mut gam = Vec::with_capacity(b * cfg.gamma_dim);
        for &ti in t {
            gam.extend(gamma(ti, cfg.gamma_dim)?.into_iter().map(F::of));
        }
        let gam = g.constant(Tensor::new(vec![b, cfg.gamma_dim], gam)?);
        let mut pieces = vec![g.gather_rows(gam, &owner)?];
        if cfg.phase == Phase::Intrinsic {
            let e0 = e0.ok_or_else(|| Error::Param("phase-2 prediction needs clean extrinsics".into()))?;
            if g.shape(e0)[0] != rows {
                return Err(Error::Param(format!(
                    "{} extrinsic tokens for {rows} intrinsic tokens",
                    g.shape(e0)[0]
                )));
            }
            let feats = if conds.iter().all(|c| !c.extrinsic_features) {
                g.constant(Tensor::zeros(&[rows, cfg.embed_dim]))
            } else {
                let feats = self.encode_extrinsics(g, e0, n)?;
                if conds.iter().all(|c| c.extrinsic_features) {
                    feats
                } else {
                    let keep = Tensor::from_fn(&[rows, cfg.embed_dim], |i| {
                        if conds[owner[i / cfg.embed_dim]].extrinsic_features {
                            F::one()
                        } else {
                            F::zero()
                        }
                    });
                    let keep = g.constant(keep);
                    g.mul(feats, keep)?
                }
            };
            pieces.push(feats);
        }
        if cfg.has_text() {
            let texts: Vec<&[u32]> = conds.iter().map(|c| c.text.as_slice()).collect();
            let tf = self.text_features(g, &texts)?;
            pieces.push(g.gather_rows(tf, &owner)?);
        }
        let cond = if pieces.len() == 1 { pieces[0] } else { g.concat_cols(&pieces)? };

        let mut h = self.linear(g, x, "in")?;
        for i in 0..cfg.depth {
            let blk = format!("block{i}");
            let a = self.attention(g, h, n, &blk)?;
            let s = g.add(h, a)?;
            h = self.adaln(g, s, cond, &format!("{blk}.ln1"))?;
            let m = self.mlp(g, h, &blk)?;
            let s = g.add(h, m)?;
            h = self.adaln(g, s, cond, &format!("{blk}.ln2"))?;
        }
        Ok(self.linear(g, h, "out")?)
    }
}

fn check_tokens<F: Scalar>(g: &Graph<F>, x: Var, n: usize, width: usize) -> Result<usize> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != width {
        return Err(TensorError::Shape {
            op: "denoiser tokens",
            expected: vec![n, width],
            got: shape.to_vec(),
        }
        .into());
    }
    if n == 0 || !shape[0].is_multiple_of(n) {
        return Err(Error::Param(format!("{} rows do not split into sets of {n}", shape[0])));
    }
    Ok(shape[0])
}

/// Batched inference: `x` is `[B * n, token_dim]`.
pub fn predict_eps_batch(
    params: &ModelParams,
    x: &Tensor,
    n: usize,
    t: &[usize],
    e0: Option<&Tensor>,
    conds: &[Cond],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let net = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let ev = e0.map(|e| g.constant(e.clone()));
    let out = net.predict(&mut g, xv, n, t, ev, conds)?;
    Ok(g.value(out).clone())
}

/// Phase-1 prediction for one shape `[N, 16]`; `text` is ignored by models without text input.
pub fn predict_eps_phase1(params: &ModelParams, x_t: &Tensor, t: usize, text: Option<&[u32]>) -> Result<Tensor> {
    expect_phase(params, Phase::Extrinsic)?;
    let n = x_t.shape().first().copied().unwrap_or(0);
    let cond = Cond::full(text.map(<[u32]>::to_vec).unwrap_or_default());
    predict_eps_batch(params, x_t, n, &[t], None, &[cond])
}

/// Phase-2 prediction for one shape; `cond` selects the text and whether the
/// extrinsic features are used or nulled.
pub fn predict_eps_phase2(params: &ModelParams, s_t: &Tensor, t: usize, e0: &Tensor, cond: &Cond) -> Result<Tensor> {
    expect_phase(params, Phase::Intrinsic)?;
    let n = s_t.shape().first().copied().unwrap_or(0);
    if e0.shape().first() != Some(&n) {
        return Err(Error::Param(format!(
            "{n} intrinsic tokens but extrinsics of shape {:?}",
            e0.shape()
        )));
    }
    predict_eps_batch(params, s_t, n, &[t], Some(e0), std::slice::from_ref(cond))
}

pub fn encode_extrinsics(params: &ModelParams, e0: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let net = params.bind(&mut g, false);
    let n = e0.shape().first().copied().unwrap_or(0);
    let ev = g.constant(e0.clone());
    let out = net.encode_extrinsics(&mut g, ev, n)?;
    Ok(g.value(out).clone())
}

/// Mean of the token embeddings; the null embedding for an empty sequence.
pub fn encode_text(params: &ModelParams, ids: &[u32]) -> Result<Vec<f32>> {
    if !params.config.has_text() {
        return Err(Error::Param("model has no text encoder".into()));
    }
    let mut g = Graph::<f32>::new();
    let net = params.bind(&mut g, false);
    let out = net.text_features(&mut g, &[ids])?;
    Ok(g.value(out).data().to_vec())
}

fn expect_phase(params: &ModelParams, phase: Phase) -> Result<()> {
    if params.config.phase != phase {
        return Err(Error::ConfigMismatch(format!(
            "expected a {phase:?} model, got {:?}",
            params.config.phase
        )));
    }
    Ok(())
}
