//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Set `ACCEPTANCE_ONLY=name1,name2` to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::Matrix3;
use salad::denoiser::{predict_eps_batch, predict_eps_phase1, predict_eps_phase2, Cond, DenoiserConfig, ModelParams, Phase};
use salad::format::{shapes_from_bytes, shapes_to_bytes, Checkpoint};
use salad::gradcheck::{check_gradients, GradCheck};
use salad::metrics::{chamfer, cov_mmd_nna, emd, hungarian, shape_clouds, DistanceKind, CLOUD_POINTS};
use salad::parts::{
    denormalize_extrinsics, mask_for_label, normalize_extrinsics, project_o3, transfer_labels, ExtrinsicStats,
    IntrinsicVec, Part, PartSet, Point, EXTRINSIC_DIM,
};
use salad::pipeline::toy_model;
use salad::sampler::{ancestral, cfg_predict, guided_reverse, naive_mix, Cascade, Predictor};
use salad::schedule::NoiseSchedule;
use salad::toyworld::{generate_dataset, labels, sample_labeled_points, vocab_size, Family, ToyShape, ToySpec};
use salad::train::{trailing_mean, StepLog, TrainConfig, Trainer, TrainingSet};
use salad::{Graph, NoiseRng, Tensor, Var};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("{what} took {:.1} s, budget {limit_s} s", elapsed.as_secs_f64())
    })
}

fn e<T: std::fmt::Display>(err: T) -> String {
    err.to_string()
}

struct Suite {
    only: Option<Vec<String>>,
    failed: Vec<&'static str>,
    ran: usize,
}

impl Suite {
    fn wants(&self, name: &str) -> bool {
        self.only.as_ref().is_none_or(|o| o.iter().any(|x| x == name))
    }

    fn run(&mut self, name: &'static str, f: impl FnOnce() -> Outcome) {
        if !self.wants(name) {
            return;
        }
        self.ran += 1;
        eprintln!("running {name}");
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                println!("FAIL {name}: {detail} [{secs:.1} s]");
                self.failed.push(name);
            }
        }
    }
}

// ---------------------------------------------------------------- gradients

fn weighted_op(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> GradCheck {
    let mut rng = NoiseRng::new(name.len() as u64 * 131 + 3);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rng.normal_tensor(s)).collect();
    check_gradients(&inputs, 1e-4, |g, vars| {
        let out = f(g, vars);
        let shape = g.shape(out).to_vec();
        let w = g.constant(NoiseRng::new(77).normal_tensor(&shape));
        let prod = g.mul(out, w).unwrap();
        g.sum(prod).unwrap()
    })
}

fn small_config(phase: Phase) -> DenoiserConfig {
    DenoiserConfig {
        embed_dim: 32,
        depth: 2,
        gamma_dim: 8,
        encoder_depth: 2,
        ..DenoiserConfig::toy(phase, 6)
    }
    .with_text(4, vocab_size())
}

fn randomized(cfg: DenoiserConfig, seed: u64, scale: f32) -> ModelParams {
    let mut p = ModelParams::init(cfg, ExtrinsicStats::identity(), seed).unwrap();
    let mut rng = NoiseRng::new(seed ^ 0x5eed);
    for t in p.tensors_mut() {
        let noise: Tensor = rng.normal_tensor(t.shape());
        *t = t.add(&noise.scale(scale)).unwrap();
    }
    p
}

/// Gradient check of a model-level function over the tensors whose names start
/// with `prefix` plus extra inputs; other tensors enter as constants.
fn model_check(
    p: &ModelParams,
    prefix: &str,
    extra: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &salad::denoiser::Net, &[Var]) -> Var,
) -> GradCheck {
    let values: Vec<Tensor<f64>> = p.tensors().iter().map(|t| t.cast()).collect();
    let selected: Vec<usize> = (0..values.len()).filter(|&i| p.names()[i].starts_with(prefix)).collect();
    let mut inputs: Vec<Tensor<f64>> = selected.iter().map(|&i| values[i].clone()).collect();
    inputs.extend(extra);
    check_gradients(&inputs, 1e-5, |g, vars| {
        let mut bound = Vec::with_capacity(values.len());
        let mut next = 0;
        for (i, v) in values.iter().enumerate() {
            if selected.get(next) == Some(&i) {
                bound.push(vars[next]);
                next += 1;
            } else {
                bound.push(g.constant(v.clone()));
            }
        }
        let net = p.bind_vars(bound).unwrap();
        let out = f(g, &net, &vars[selected.len()..]);
        let shape = g.shape(out).to_vec();
        let w = g.constant(NoiseRng::new(78).normal_tensor(&shape));
        let prod = g.mul(out, w).unwrap();
        g.sum(prod).unwrap()
    })
}

fn gradcheck() -> Outcome {
    let start = Instant::now();
    let mut checks: Vec<(&str, GradCheck)> = vec![
        ("matmul", weighted_op("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap())),
        ("bmm", weighted_op("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false).unwrap())),
        ("bmm_t", weighted_op("bmm_t", &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true).unwrap())),
        ("add", weighted_op("add", &[&[3, 2], &[3, 2]], |g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", weighted_op("sub", &[&[3, 2], &[3, 2]], |g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", weighted_op("mul", &[&[3, 2], &[3, 2]], |g, v| g.mul(v[0], v[1]).unwrap())),
        ("add_row", weighted_op("add_row", &[&[3, 2], &[2]], |g, v| g.add_row(v[0], v[1]).unwrap())),
        ("scale", weighted_op("scale", &[&[4]], |g, v| g.scale(v[0], -1.7).unwrap())),
        ("add_scalar", weighted_op("add_scalar", &[&[4]], |g, v| g.add_scalar(v[0], 0.3).unwrap())),
        ("silu", weighted_op("silu", &[&[3, 3]], |g, v| g.silu(v[0]).unwrap())),
        ("softmax", weighted_op("softmax", &[&[3, 5]], |g, v| g.softmax(v[0]).unwrap())),
        ("layernorm", weighted_op("layernorm", &[&[4, 6]], |g, v| g.layernorm(v[0]).unwrap())),
        ("transpose", weighted_op("transpose", &[&[3, 2]], |g, v| g.transpose(v[0]).unwrap())),
        ("reshape", weighted_op("reshape", &[&[3, 4]], |g, v| g.reshape(v[0], &[2, 6]).unwrap())),
        ("permute", weighted_op("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[1, 2, 0]).unwrap())),
        ("concat", weighted_op("concat", &[&[3, 2], &[3, 4]], |g, v| g.concat_cols(&[v[0], v[1]]).unwrap())),
        ("slice", weighted_op("slice", &[&[3, 5]], |g, v| g.slice_cols(v[0], 1, 4).unwrap())),
        ("gather", weighted_op("gather", &[&[3, 2]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]).unwrap())),
        ("mean", weighted_op("mean", &[&[3, 2]], |g, v| g.mean(v[0]).unwrap())),
        ("mse", weighted_op("mse", &[&[3, 2], &[3, 2]], |g, v| g.mse(v[0], v[1]).unwrap())),
    ];

    let p1 = randomized(small_config(Phase::Extrinsic), 11, 0.15);
    let p2 = randomized(small_config(Phase::Intrinsic), 12, 0.15);
    let mut rng = NoiseRng::new(13);
    let n = 3;
    checks.push((
        "adaln",
        model_check(&p1, "block1.ln2.", vec![rng.normal_tensor(&[n, 32]), rng.normal_tensor(&[n, p1.config.cond_dim()])], |g, net, v| {
            net.adaln(g, v[0], v[1], "block1.ln2").unwrap()
        }),
    ));
    checks.push((
        "text_embedding",
        model_check(&p1, "text.", vec![], |g, net, _| net.text_features(g, &[&[1, 4, 4], &[], &[7]]).unwrap()),
    ));
    checks.push((
        "extrinsic_encoder",
        model_check(&p2, "enc", vec![rng.normal_tensor(&[2 * n, EXTRINSIC_DIM])], |g, net, v| {
            net.encode_extrinsics(g, v[0], n).unwrap()
        }),
    ));
    let conds = vec![Cond::full(vec![2, 9]), Cond::null()];
    for (name, p) in [("denoiser_phase1", &p1), ("denoiser_phase2", &p2)] {
        let d = p.config.token_dim;
        let extra = vec![rng.normal_tensor(&[2 * n, d]), rng.normal_tensor(&[2 * n, EXTRINSIC_DIM])];
        let phase = p.config.phase;
        checks.push((
            name,
            model_check(p, "", extra, |g, net, v| {
                let e = (phase == Phase::Intrinsic).then_some(v[1]);
                net.predict(g, v[0], n, &[5, 170], e, &conds).unwrap()
            }),
        ));
    }

    let mut total = GradCheck::default();
    let mut bad = Vec::new();
    for (name, c) in checks {
        if !c.passes(1e-4, 0.99) {
            bad.push(format!("{name} ({:.4} within tol)", c.fraction_within(1e-4)));
        }
        total.merge(c);
    }
    ensure(bad.is_empty(), || format!("failing layers: {}", bad.join(", ")))?;
    within(start.elapsed(), 60.0, "gradcheck")?;
    Ok(format!(
        "{} coordinates, {:.5} within rel 1e-4",
        total.coordinates(),
        total.fraction_within(1e-4)
    ))
}

// ---------------------------------------------------------------- forward process

fn forward_process() -> Outcome {
    let start = Instant::now();
    let sched = NoiseSchedule::linear(50, 1e-4, 0.05).map_err(e)?;
    let chains = 10_000usize;
    let x0 = [1.0f64, -0.5, 2.0];
    let mut rng = NoiseRng::new(2024);
    let mut x: Vec<[f64; 3]> = vec![x0; chains];
    let mut worst: f64 = 0.0;
    let mut oracle_bar = 1.0f64;
    for t in 1..=50 {
        let beta_oracle = 1e-4 + (0.05 - 1e-4) * (t - 1) as f64 / 49.0;
        oracle_bar *= 1.0 - beta_oracle;
        ensure((sched.alpha_bar_f64(t) - oracle_bar).abs() < 1e-6, || {
            format!("alpha_bar({t}) = {} but product gives {oracle_bar}", sched.alpha_bar_f64(t))
        })?;
        let (sa, sb) = ((sched.alpha(t) as f64).sqrt(), (sched.beta(t) as f64).sqrt());
        for xi in x.iter_mut() {
            for v in xi.iter_mut() {
                *v = sa * *v + sb * rng.normal();
            }
        }
        if [1, 25, 50].contains(&t) {
            let (a, b) = sched.marginal_coeffs(t);
            let var_true = (b as f64).powi(2);
            for k in 0..3 {
                let mean = x.iter().map(|v| v[k]).sum::<f64>() / chains as f64;
                let var = x.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / (chains - 1) as f64;
                let mean_true = a as f64 * x0[k];
                let se_mean = (var_true / chains as f64).sqrt();
                let se_var = var_true * (2.0 / (chains - 1) as f64).sqrt();
                let zm = (mean - mean_true).abs() / se_mean;
                let zv = (var - var_true).abs() / se_var;
                worst = worst.max(zm).max(zv);
                ensure(zm < 3.0 && zv < 3.0, || {
                    format!("t={t} dim {k}: mean z {zm:.2}, variance z {zv:.2}")
                })?;
            }
        }
    }
    within(start.elapsed(), 60.0, "forward process")?;
    Ok(format!("{chains} chains, worst deviation {worst:.2} standard errors"))
}

// ---------------------------------------------------------------- equivariance

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
}

fn equivariance() -> Outcome {
    let start = Instant::now();
    let d = 12;
    let mk = |phase, text: bool, seed| {
        let mut cfg = DenoiserConfig {
            embed_dim: 32,
            depth: 2,
            gamma_dim: 16,
            encoder_depth: 2,
            ..DenoiserConfig::toy(phase, d)
        };
        if text {
            cfg = cfg.with_text(8, vocab_size());
        }
        randomized(cfg, seed, 0.2)
    };
    let models = [
        mk(Phase::Extrinsic, false, 1),
        mk(Phase::Extrinsic, true, 2),
        mk(Phase::Intrinsic, false, 3),
        mk(Phase::Intrinsic, true, 4),
    ];
    let mut rng = NoiseRng::new(99);
    let mut worst = 0.0f32;
    for trial in 0..100 {
        let p = &models[trial % 4];
        let n = 2 + rng.below(7);
        let t = 1 + rng.below(1000);
        let text: Vec<u32> = (0..rng.below(4)).map(|_| rng.below(vocab_size()) as u32).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let x: Tensor = rng.normal_tensor(&[n, p.config.token_dim]);
        let (out, outp) = if p.config.phase == Phase::Extrinsic {
            (
                predict_eps_phase1(p, &x, t, Some(&text)).map_err(e)?,
                predict_eps_phase1(p, &permute_rows(&x, &perm), t, Some(&text)).map_err(e)?,
            )
        } else {
            let e0: Tensor = rng.normal_tensor(&[n, EXTRINSIC_DIM]);
            let cond = Cond::full(text);
            (
                predict_eps_phase2(p, &x, t, &e0, &cond).map_err(e)?,
                predict_eps_phase2(p, &permute_rows(&x, &perm), t, &permute_rows(&e0, &perm), &cond).map_err(e)?,
            )
        };
        worst = worst.max(permute_rows(&out, &perm).max_abs_diff(&outp));
    }
    ensure(worst < 1e-5, || format!("max deviation {worst:e}"))?;
    within(start.elapsed(), 30.0, "equivariance")?;
    Ok(format!("100 permutations, max deviation {worst:.2e}"))
}

// ---------------------------------------------------------------- preservation

fn preservation() -> Outcome {
    let start = Instant::now();
    let sched = NoiseSchedule::linear(20, 1e-4, 0.05).map_err(e)?;
    let p = randomized(
        DenoiserConfig {
            embed_dim: 32,
            depth: 2,
            gamma_dim: 16,
            ..DenoiserConfig::toy(Phase::Extrinsic, 8)
        },
        5,
        0.2,
    );
    let mut rng = NoiseRng::new(7);
    let mut kept_rows = 0;
    for trial in 0..100u64 {
        let (b, n) = (1 + rng.below(3), 1 + rng.below(7));
        let x0: Tensor = rng.normal_tensor(&[b * n, EXTRINSIC_DIM]);
        let keep: Vec<bool> = (0..b * n).map(|_| rng.bernoulli(0.5)).collect();
        let t_start = if trial % 2 == 0 { sched.steps() } else { 1 + rng.below(sched.steps()) };
        let pred = Predictor::new(&p, vec![Cond::full(vec![]); b]);
        let mut chain = NoiseRng::new(trial);
        let out = guided_reverse(&pred, &x0, &keep, n, t_start, &sched, &mut chain).map_err(e)?;
        for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            kept_rows += 1;
            let same = out.row(r).iter().zip(x0.row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("trial {trial}: kept row {r} changed"))?;
        }

        let zeros = vec![false; b * n];
        let guided = guided_reverse(&pred, &x0, &zeros, n, sched.steps(), &sched, &mut NoiseRng::new(trial + 1000)).map_err(e)?;
        let mut plain_rng = NoiseRng::new(trial + 1000);
        let start_x = plain_rng.normal_tensor(x0.shape());
        let plain = ancestral(&pred, start_x, n, sched.steps(), &sched, &mut plain_rng).map_err(e)?;
        let same = guided.data().iter().zip(plain.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("trial {trial}: all-zeros mask differs from unconditional sampling"))?;
    }

    // The same guarantees through the full cascade on toy chairs.
    let spec = ToySpec::new(Family::Chair, 3).with_intrinsic_dim(8);
    let chairs = generate_dataset(&spec, 10);
    let data = TrainingSet::from_toy(&chairs).map_err(e)?;
    let mut p1 = toy_model(Phase::Extrinsic, &data, 0, 1).map_err(e)?;
    let mut p2 = toy_model(Phase::Intrinsic, &data, 0, 2).map_err(e)?;
    let mut noise = NoiseRng::new(8);
    for t in p1.tensors_mut().iter_mut().chain(p2.tensors_mut()) {
        let z: Tensor = noise.normal_tensor(t.shape());
        *t = t.add(&z.scale(0.05)).map_err(e)?;
    }
    let cascade = Cascade::new(&p1, &p2, &sched).map_err(e)?;
    for (i, c) in chairs.iter().enumerate() {
        let src = &c.parts;
        let keep: Vec<bool> = (0..src.len()).map(|_| rng.bernoulli(0.5)).collect();
        let out = cascade
            .complete(src, &salad::parts::PartMask::from_keep(keep.clone()), &mut NoiseRng::new(i as u64), None, 0.0)
            .map_err(e)?;
        for (j, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            ensure(out.parts[j] == src.parts[j], || format!("chair {i}: part {j} changed"))?;
        }
        let regen = cascade
            .complete(src, &salad::parts::PartMask::regenerate_all(src.len()), &mut NoiseRng::new(50 + i as u64), None, 0.0)
            .map_err(e)?;
        let fresh = cascade.sample(1, src.len(), &mut NoiseRng::new(50 + i as u64), None, 0.0).map_err(e)?;
        ensure(regen.parts == fresh[0].parts, || format!("chair {i}: all-zeros completion differs from sampling"))?;
    }
    within(start.elapsed(), 60.0, "preservation")?;
    Ok(format!("100 masks ({kept_rows} kept rows) and 10 cascade completions bit-exact"))
}

// ---------------------------------------------------------------- procrustes

fn random_orthogonal(rng: &mut NoiseRng) -> Matrix3<f64> {
    let g = Matrix3::from_fn(|_, _| rng.normal());
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for k in 0..3 {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    if rng.bernoulli(0.5) {
        q.column_mut(0).neg_mut();
    }
    q
}

fn procrustes() -> Outcome {
    let start = Instant::now();
    let mut rng = NoiseRng::new(31);
    let candidates: Vec<Matrix3<f64>> = (0..10_000).map(|_| random_orthogonal(&mut rng)).collect();
    let (mut orth, mut idem, mut margin) = (0.0f64, 0.0f64, f64::INFINITY);
    for k in 0..100 {
        let m = Matrix3::from_fn(|_, _| rng.normal());
        let r = project_o3(&m);
        orth = orth.max((r.transpose() * r - Matrix3::identity()).abs().max());
        idem = idem.max((project_o3(&r) - r).abs().max());
        let best = (m - r).norm();
        for q in &candidates {
            let d = (m - q).norm();
            ensure(best <= d + 1e-12, || format!("matrix {k}: candidate beats projection ({d} < {best})"))?;
            margin = margin.min(d - best);
        }
    }
    ensure(orth <= 1e-9, || format!("orthogonality error {orth:e}"))?;
    ensure(idem <= 1e-8, || format!("idempotence error {idem:e}"))?;
    within(start.elapsed(), 30.0, "procrustes")?;
    Ok(format!("orthogonality {orth:.1e}, idempotence {idem:.1e}, closest candidate margin {margin:.2e}"))
}

// ---------------------------------------------------------------- cfg

fn cfg_reduction() -> Outcome {
    let start = Instant::now();
    let mut rng = NoiseRng::new(41);
    let mut cases = 0;
    for phase in [Phase::Extrinsic, Phase::Intrinsic] {
        let p = randomized(small_config(phase), 42, 0.2);
        for trial in 0..10 {
            let n = 2 + trial % 5;
            let x: Tensor = rng.normal_tensor(&[n, p.config.token_dim]);
            let e0: Tensor = rng.normal_tensor(&[n, EXTRINSIC_DIM]);
            let e0 = (phase == Phase::Intrinsic).then_some(&e0);
            let t = 1 + rng.below(1000);
            let cond = Cond::full(vec![rng.below(vocab_size()) as u32, 9]);
            let direct = |c: &Cond| predict_eps_batch(&p, &x, n, &[t], e0, std::slice::from_ref(c));
            let conditional = direct(&cond).map_err(e)?;
            let unconditional = direct(&Cond::null()).map_err(e)?;
            let w0 = cfg_predict(&p, &x, t, e0, &cond, 0.0).map_err(e)?;
            let wm1 = cfg_predict(&p, &x, t, e0, &cond, -1.0).map_err(e)?;
            let bits = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(bits(&w0, &conditional), || format!("{phase:?} trial {trial}: w=0 differs from conditional"))?;
            ensure(bits(&wm1, &unconditional), || format!("{phase:?} trial {trial}: w=-1 differs from unconditional"))?;
            ensure(!bits(&conditional, &unconditional), || "condition has no effect".into())?;
            cases += 1;
        }
    }
    within(start.elapsed(), 10.0, "cfg")?;
    Ok(format!("{cases} cases bit-exact at w=0 and w=-1"))
}

// ---------------------------------------------------------------- emd / chamfer

fn brute_force_matching(cost: &[f64], n: usize) -> f64 {
    fn go(row: usize, n: usize, used: &mut [bool], acc: f64, cost: &[f64], best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for c in 0..n {
            if !used[c] {
                used[c] = true;
                go(row + 1, n, used, acc + cost[row * n + c], cost, best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, n, &mut vec![false; n], 0.0, cost, &mut best);
    best
}

fn random_cloud(rng: &mut NoiseRng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.normal() as f32, rng.normal() as f32, rng.normal() as f32])
        .collect()
}

fn l2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt()
}

fn emd_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = NoiseRng::new(51);
    let mut worst = 0.0f64;
    for k in 0..200 {
        let n = 1 + k % 6;
        let (a, b) = (random_cloud(&mut rng, n), random_cloud(&mut rng, n));
        let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| l2(p, q))).collect();
        let want = brute_force_matching(&cost, n);
        let (assign, total) = hungarian(&cost, n);
        let mut seen = vec![false; n];
        for &c in &assign {
            ensure(!seen[c], || format!("instance {k}: assignment is not a permutation"))?;
            seen[c] = true;
        }
        let assigned: f64 = assign.iter().enumerate().map(|(r, &c)| cost[r * n + c]).sum();
        let got = emd(&a, &b).map_err(e)?;
        let err = (total - want).abs().max((assigned - want).abs()).max((got - want / n as f64).abs());
        worst = worst.max(err);
        ensure(err < 1e-9, || format!("instance {k} (n={n}): hungarian {total}, brute force {want}"))?;
    }
    let mut cd_worst = 0.0f64;
    for k in 0..100 {
        let (a, b) = (random_cloud(&mut rng, 1 + k % 40), random_cloud(&mut rng, 1 + (k * 7) % 50));
        let dir = |x: &[Point], y: &[Point]| {
            x.iter()
                .map(|p| y.iter().map(|q| l2(p, q).powi(2)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        let want = dir(&a, &b) + dir(&b, &a);
        let got = chamfer(&a, &b).map_err(e)?;
        let rel = (got - want).abs() / want.max(1e-12);
        cd_worst = cd_worst.max(rel);
        ensure(rel < 1e-9, || format!("chamfer instance {k}: {got} vs oracle {want}"))?;
    }
    within(start.elapsed(), 60.0, "emd")?;
    Ok(format!("200 matchings (max error {worst:.1e}), 100 chamfer pairs (max rel {cd_worst:.1e})"))
}

// ---------------------------------------------------------------- toy training

const TOY_T: usize = 200;
const TOY_DIM: usize = 32;

struct Trained {
    phase1: ModelParams,
    phase2: ModelParams,
    sched: NoiseSchedule,
    test: Vec<ToyShape>,
    loss1: f32,
    loss2: f32,
    train_time: Duration,
}

fn toy_world(family: Family, seed: u64) -> (Vec<ToyShape>, Vec<ToyShape>) {
    let mut all = generate_dataset(&ToySpec::new(family, seed).with_intrinsic_dim(TOY_DIM), 512 + 64);
    let test = all.split_off(512);
    (all, test)
}

fn train_toy(family: Family, steps: usize, seed: u64) -> Result<Trained, String> {
    let start = Instant::now();
    let (train, test) = toy_world(family, seed);
    let data = TrainingSet::from_toy(&train).map_err(e)?;
    let sched = NoiseSchedule::linear(TOY_T, 1e-4, 0.05).map_err(e)?;
    let run = |phase: Phase, s: u64| -> Result<(ModelParams, f32), String> {
        let cfg = TrainConfig {
            batch: 32,
            lr: 1e-3,
            steps,
            cfg_dropout: 0.0,
            seed: s,
            ..TrainConfig::default()
        };
        let params = toy_model(phase, &data, 0, s).map_err(e)?;
        let mut tr = Trainer::new(params, &data, &sched, cfg).map_err(e)?;
        tr.run(|tr, log: &StepLog| {
            if (log.step + 1).is_multiple_of(2000) {
                eprintln!("  {family:?} {phase:?} step {}: loss {:.4}", log.step + 1, trailing_mean(tr.curve(), 1000));
            }
            Ok(())
        })
        .map_err(e)?;
        let loss = trailing_mean(tr.curve(), 1000);
        Ok((tr.into_params(), loss))
    };
    let (phase1, loss1) = run(Phase::Extrinsic, seed * 2 + 1)?;
    let (phase2, loss2) = run(Phase::Intrinsic, seed * 2 + 2)?;
    Ok(Trained {
        phase1,
        phase2,
        sched,
        test,
        loss1,
        loss2,
        train_time: start.elapsed(),
    })
}

/// Shapes with standard-normal normalized extrinsics and phase-2 intrinsics.
fn prior_baseline(m: &Trained, count: usize, n: usize, rng: &mut NoiseRng) -> Result<Vec<PartSet>, String> {
    let stats = m.phase1.stats;
    let z: Tensor = rng.normal_tensor(&[count * n, EXTRINSIC_DIM]);
    let ext: Vec<_> = denormalize_extrinsics(&z, &stats).map_err(e)?.into_iter().map(|x| x.projected()).collect();
    let e0 = normalize_extrinsics(&ext, &stats);
    let pred = Predictor::new(&m.phase2, vec![Cond::full(vec![]); count]).with_extrinsics(e0);
    let s = ancestral(&pred, rng.normal_tensor(&[count * n, TOY_DIM]), n, m.sched.steps(), &m.sched, rng).map_err(e)?;
    (0..count)
        .map(|b| {
            let parts = (b * n..(b + 1) * n)
                .map(|r| Part {
                    extrinsic: ext[r],
                    intrinsic: IntrinsicVec(s.row(r).to_vec()),
                })
                .collect();
            PartSet::new(parts, None).map_err(e)
        })
        .collect()
}

fn toy_end_to_end(slot: &mut Option<Trained>) -> Outcome {
    let start = Instant::now();
    let m = train_toy(Family::Table, 20_000, 0)?;
    let (l1, l2, tt) = (m.loss1, m.loss2, m.train_time);
    eprintln!("  trained in {:.1} min", tt.as_secs_f64() / 60.0);
    let cascade = Cascade::new(&m.phase1, &m.phase2, &m.sched).map_err(e)?;
    let mut rng = NoiseRng::new(500);
    let samples = cascade.sample(200, 5, &mut rng, None, 0.0).map_err(e)?;
    let prior = prior_baseline(&m, 200, 5, &mut rng)?;
    let reference = shape_clouds(m.test.iter().map(|s| &s.parts), CLOUD_POINTS, 1).map_err(e)?;
    let gen = shape_clouds(&samples, CLOUD_POINTS, 10_000).map_err(e)?;
    let base = shape_clouds(&prior, CLOUD_POINTS, 20_000).map_err(e)?;
    let ours = cov_mmd_nna(&gen, &reference, DistanceKind::Chamfer, false).map_err(e)?;
    let theirs = cov_mmd_nna(&base, &reference, DistanceKind::Chamfer, false).map_err(e)?;
    let detail = format!(
        "L_e {l1:.4}, L_s {l2:.4}, training {:.1} min, 1-NNA {:.3}, COV {:.3}, MMD {:.5} vs prior {:.5} ({:.1}x)",
        tt.as_secs_f64() / 60.0,
        ours.nna,
        ours.cov,
        ours.mmd,
        theirs.mmd,
        theirs.mmd / ours.mmd
    );
    *slot = Some(m);
    let checks = [
        (l1 < 0.35, "L_e >= 0.35"),
        (l2 < 0.35, "L_s >= 0.35"),
        ((0.5..=0.85).contains(&ours.nna), "1-NNA outside [0.50, 0.85]"),
        (theirs.mmd >= 2.0 * ours.mmd, "MMD not 2x below the prior baseline"),
        (start.elapsed().as_secs_f64() < 45.0 * 60.0, "over 45 min"),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(ok, _)| !ok).map(|(_, m)| *m).collect();
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failed.join(", ")))
    }
}

// ---------------------------------------------------------------- completion

const CHAIR_STEPS: usize = 8_000;

fn completion(slot: &mut Option<Trained>) -> Outcome {
    let m = train_toy(Family::Chair, CHAIR_STEPS, 1)?;
    eprintln!("  chair models trained in {:.1} min (L_e {:.4}, L_s {:.4})", m.train_time.as_secs_f64() / 60.0, m.loss1, m.loss2);
    let start = Instant::now();
    let cascade = Cascade::new(&m.phase1, &m.phase2, &m.sched).map_err(e)?;
    let (mut legs, mut regenerated) = (0usize, 0usize);
    for (i, c) in m.test.iter().take(50).enumerate() {
        let src = &c.parts;
        let sel = mask_for_label(src.labels.as_ref().unwrap(), labels::LEG);
        let out = cascade.complete(src, &sel.mask, &mut NoiseRng::new(700 + i as u64), None, 0.0).map_err(e)?;
        for j in 0..src.len() {
            if sel.mask.keeps(j) {
                ensure(out.parts[j] == src.parts[j], || format!("chair {i}: preserved part {j} changed"))?;
            }
        }
        let points = sample_labeled_points(src, 4096, 900 + i as u64).map_err(e)?;
        let transferred = transfer_labels(&out.extrinsics(), &points).map_err(e)?;
        for j in sel.mask.regenerated() {
            regenerated += 1;
            legs += (transferred[j] == labels::LEG) as usize;
        }
    }
    let frac = legs as f64 / regenerated as f64;
    let detail = format!(
        "{legs}/{regenerated} regenerated parts relabelled leg ({:.1}%), completion {:.1} s after {:.1} min chair training",
        100.0 * frac,
        start.elapsed().as_secs_f64(),
        m.train_time.as_secs_f64() / 60.0
    );
    *slot = Some(m);
    ensure(frac >= 0.6, || format!("below 60%: {detail}"))?;
    within(start.elapsed(), 600.0, "completion")?;
    Ok(detail)
}

// ---------------------------------------------------------------- mix locality

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[k - 1] + v[k])
    } else {
        v[k]
    }
}

fn mix_locality(chairs: &Option<Trained>) -> Outcome {
    let m = chairs.as_ref().ok_or("chair models unavailable")?;
    let cascade = Cascade::new(&m.phase1, &m.phase2, &m.sched).map_err(e)?;
    let (mut refined_d, mut fresh_d) = (Vec::new(), Vec::new());
    for i in 0..20 {
        let (a, b) = (&m.test[2 * i].parts, &m.test[2 * i + 1].parts);
        let naive = naive_mix(a, b, labels::BACK).map_err(e)?;
        let mut rng = NoiseRng::new(1100 + i as u64);
        let refined = cascade.refine(&naive, 10, None, &mut rng).map_err(e)?;
        let fresh = cascade.sample(1, naive.len(), &mut rng, None, 0.0).map_err(e)?.remove(0);
        let clouds = shape_clouds([&naive, &refined, &fresh], CLOUD_POINTS, 1200 + 3 * i as u64).map_err(e)?;
        refined_d.push(chamfer(&clouds[1], &clouds[0]).map_err(e)?);
        fresh_d.push(chamfer(&clouds[2], &clouds[0]).map_err(e)?);
    }
    let (r, f) = (median(refined_d), median(fresh_d));
    ensure(r < f, || format!("median CD refined {r:.5} >= fresh {f:.5}"))?;
    Ok(format!("median CD to naive mix: refined {r:.5}, fresh sample {f:.5}"))
}

// ---------------------------------------------------------------- formats

fn bit_equal(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((na, ta), (nb, tb))| {
            na == nb && ta.shape() == tb.shape() && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

fn salad_cmd(dir: &Path, args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_salad"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(e)?;
    ensure(out.status.success(), || {
        format!("salad {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim())
    })?;
    Ok(out)
}

fn formats(tables: &Option<Trained>) -> Outcome {
    let mut checked = 0;
    let models: Vec<ModelParams> = match tables {
        Some(m) => vec![m.phase1.clone(), m.phase2.clone()],
        None => vec![randomized(small_config(Phase::Extrinsic), 3, 0.3), randomized(small_config(Phase::Intrinsic), 4, 0.3)],
    };
    let sched = NoiseSchedule::linear(TOY_T, 1e-4, 0.05).map_err(e)?;
    for (k, p) in models.iter().enumerate() {
        let mut ckpt = Checkpoint::from_model(p, sched.params(), 20_000, k as u64);
        ckpt.header.extra.insert("note".into(), serde_json::json!({"kept": [1, 2]}));
        let bytes = ckpt.to_bytes().map_err(e)?;
        let back = Checkpoint::from_bytes(&bytes).map_err(e)?;
        ensure(bit_equal(&ckpt.tensors, &back.tensors), || "checkpoint tensors changed".into())?;
        ensure(back.header.extra == ckpt.header.extra, || "unknown header keys lost".into())?;
        ensure(back.to_bytes().map_err(e)? == bytes, || "checkpoint bytes not stable".into())?;
        let model = back.to_model().map_err(e)?;
        ensure(model.tensors() == p.tensors(), || "model tensors changed".into())?;
        checked += 1;
    }
    let mut shape_sets = vec![toy_world(Family::Chair, 9).1, toy_world(Family::Table, 9).1];
    if let Some(m) = tables {
        let mut rng = NoiseRng::new(3);
        let c = Cascade::new(&m.phase1, &m.phase2, &m.sched).map_err(e)?;
        let sampled = c.sample(8, 5, &mut rng, None, 0.0).map_err(e)?;
        shape_sets.push(sampled.into_iter().map(|parts| ToyShape { parts, caption: vec![3, 1] }).collect());
    }
    for set in &shape_sets {
        let bytes = shapes_to_bytes(set).map_err(e)?;
        let back = shapes_from_bytes(&bytes).map_err(e)?;
        ensure(&back == set, || "shape file changed shapes".into())?;
        ensure(shapes_to_bytes(&back).map_err(e)? == bytes, || "shape bytes not stable".into())?;
        checked += 1;
    }

    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(e)?;
    let dir = tmp.path();
    let run = |args: &[&str]| salad_cmd(dir, args);
    run(&["gendata", "--family", "chair", "--count", "48", "--seed", "7", "--intrinsic-dim", "16", "--out", "train.shp", "--holdout", "test.shp"])?;
    run(&["train", "--dataset", "train.shp", "--ckpt", "m", "--steps", "50", "--batch", "8", "--timesteps", "50", "--ckpt-every", "25"])?;
    run(&["train", "--phase", "2", "--dataset", "train.shp", "--ckpt", "m", "--steps", "10", "--batch", "8", "--timesteps", "50"])?;
    run(&["sample", "--ckpt", "m", "--n-samples", "8", "--seed", "1", "--text", "a chair with four legs", "--out", "s.shp"])?;
    run(&["complete", "--ckpt", "m", "--dataset", "test.shp", "--mask-label", "leg", "--out", "c.shp"])?;
    run(&["mix", "--ckpt", "m", "--dataset", "test.shp", "--donor", "test.shp", "--mask-label", "back", "--out", "x.shp"])?;
    let out = run(&["eval", "--dataset", "test.shp", "--reference", "test.shp", "--points", "128", "--emd", "--out", "r.json"])?;
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(e)?;
    ensure(report["cd"]["mmd"] == 0.0 && report["emd"]["mmd"] == 0.0, || "eval of identical sets is not MMD 0".into())?;
    run(&["eval", "--dataset", "s.shp", "--reference", "test.shp", "--points", "128"])?;
    let served = Command::new(env!("CARGO_BIN_EXE_salad"))
        .args(["serve", "--ckpt", "m", "--port", "0"])
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .stdout(std::process::Stdio::piped())
        .spawn()
        .map_err(e)?;
    let mut served = KillOnDrop(served);
    let mut line = String::new();
    std::io::BufRead::read_line(&mut std::io::BufReader::new(served.0.stdout.take().unwrap()), &mut line).map_err(e)?;
    ensure(line.starts_with("listening on http://"), || format!("serve printed {line:?}"))?;
    drop(served);
    within(start.elapsed(), 300.0, "CLI smoke run")?;
    Ok(format!(
        "{checked} bit-exact roundtrips, all 7 subcommands in {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

struct KillOnDrop(std::process::Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn main() -> ExitCode {
    let only = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let mut suite = Suite {
        only,
        failed: Vec::new(),
        ran: 0,
    };
    suite.run("gradcheck", gradcheck);
    suite.run("forward_process", forward_process);
    suite.run("equivariance", equivariance);
    suite.run("preservation", preservation);
    suite.run("procrustes", procrustes);
    suite.run("cfg_reduction", cfg_reduction);
    suite.run("emd_exactness", emd_exactness);
    let mut tables = None;
    suite.run("toy_end_to_end", || toy_end_to_end(&mut tables));
    let mut chairs = None;
    let wants_chairs = suite.wants("completion") || suite.wants("mix_locality");
    if wants_chairs && !suite.wants("completion") {
        chairs = train_toy(Family::Chair, CHAIR_STEPS, 1).ok();
    }
    suite.run("completion", || completion(&mut chairs));
    suite.run("mix_locality", || mix_locality(&chairs));
    suite.run("formats", || formats(&tables));
    println!("{} of {} criteria passed", suite.ran - suite.failed.len(), suite.ran);
    if suite.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
