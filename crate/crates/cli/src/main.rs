use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use salad::denoiser::Phase;
use salad::format::{load_shapes, save_shapes};
use salad::metrics::{shape_clouds, MetricReport, CLOUD_POINTS};
use salad::parts::{mask_for_label, PartMask, PartSet};
use salad::pipeline::{load_phase, save_phase, toy_model, ModelDir};
use salad::sampler::{DEFAULT_GUIDANCE, DEFAULT_REFINE_T};
use salad::schedule::NoiseSchedule;
use salad::service::{text_part_selector, Service};
use salad::toyworld::{generate_dataset, infer_labels, labels, split_train_test, tokenize, Family, ToySpec, ToyShape};
use salad::train::{curve_csv, TrainConfig, Trainer, TrainingSet};
use salad::{Error, NoiseRng, Result};

#[derive(Parser)]
#[command(name = "salad", version, about = "Part-level latent diffusion on the toy shape world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural toy dataset as a shape file.
    Gendata(GendataArgs),
    /// Train one or both cascade phases into a model directory.
    Train(TrainArgs),
    /// Sample new shapes from a model directory.
    Sample(SampleArgs),
    /// Regenerate the parts with one label in every input shape.
    Complete(CompleteArgs),
    /// Swap a labelled part between shape pairs and refine the result.
    Mix(MixArgs),
    /// Compare generated shapes against a reference set.
    Eval(EvalArgs),
    /// Serve the JSON API over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GendataArgs {
    #[arg(long)]
    family: Family,
    #[arg(long, default_value_t = 128)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    intrinsic_dim: usize,
    /// Also split off 10% of the shapes into this file.
    #[arg(long)]
    holdout: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "both")]
    phase: PhaseArg,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.999)]
    power: f64,
    #[arg(long, default_value_t = 0.2)]
    cfg_dropout: f64,
    /// Text embedding width; 0 trains unconditional models.
    #[arg(long, default_value_t = 16)]
    text_dim: usize,
    /// Diffusion steps T.
    #[arg(long, default_value_t = 1000)]
    timesteps: usize,
    /// Write a checkpoint every K steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    ckpt_every: usize,
    #[arg(long, default_value_t = 500)]
    log_every: usize,
}

#[derive(Args)]
struct GuidanceArgs {
    /// Caption used as the condition; words from the toy vocabulary.
    #[arg(long)]
    text: Option<String>,
    /// Classifier-free guidance weight.
    #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
    w: f64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_samples: usize,
    /// Parts per shape; defaults to the trained family's count.
    #[arg(long)]
    parts: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompleteArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Label to regenerate; without it, part keywords in --text choose.
    #[arg(long)]
    mask_label: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Base shapes.
    #[arg(long)]
    dataset: PathBuf,
    /// Donor shapes, paired by index with the base shapes.
    #[arg(long)]
    donor: PathBuf,
    #[arg(long)]
    mask_label: String,
    #[arg(long, default_value_t = DEFAULT_REFINE_T)]
    t_start: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Generated shapes.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = CLOUD_POINTS)]
    points: usize,
    /// Also report metrics under EMD.
    #[arg(long)]
    emd: bool,
    /// Generated shapes are completions; MMD uses matched pairs.
    #[arg(long)]
    completion: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path; a CSV copy is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Family used for labelling when the checkpoints do not record one.
    #[arg(long, default_value = "chair")]
    family: Family,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            error_line("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Gendata(a) => gendata(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Complete(a) => complete(a),
        Command::Mix(a) => mix(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn error_line(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": message.trim(), "kind": kind });
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn gendata(a: GendataArgs) -> Result<()> {
    let spec = ToySpec::new(a.family, a.seed).with_intrinsic_dim(a.intrinsic_dim);
    let shapes = generate_dataset(&spec, a.count);
    match a.holdout {
        Some(path) => {
            let (train, test) = split_train_test(shapes, a.seed);
            save_shapes(&a.out, &train)?;
            save_shapes(&path, &test)?;
            log::info!("wrote {} shapes to {} and {} to {}", train.len(), a.out.display(), test.len(), path.display());
        }
        None => {
            save_shapes(&a.out, &shapes)?;
            log::info!("wrote {} shapes to {}", shapes.len(), a.out.display());
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let shapes = load_shapes(&a.dataset)?;
    let data = TrainingSet::from_toy(&shapes)?;
    let family = Family::from_part_count(data.part_count());
    let sched = NoiseSchedule::linear(a.timesteps, 1e-4, 0.05)?;
    let phases: &[Phase] = match a.phase {
        PhaseArg::One => &[Phase::Extrinsic],
        PhaseArg::Two => &[Phase::Intrinsic],
        PhaseArg::Both => &[Phase::Extrinsic, Phase::Intrinsic],
    };
    if let PhaseArg::Two = a.phase {
        if let Ok(p1) = load_phase(&a.ckpt, Phase::Extrinsic) {
            if p1.sched.params() != sched.params() {
                return Err(Error::ConfigMismatch("phase 1 checkpoint uses a different schedule".into()));
            }
        }
    }
    for (k, &phase) in phases.iter().enumerate() {
        let seed = a.seed.wrapping_add(k as u64 + matches!(a.phase, PhaseArg::Two) as u64);
        let params = toy_model(phase, &data, a.text_dim, seed)?;
        let cfg = TrainConfig {
            batch: a.batch,
            lr: a.lr,
            power: a.power,
            steps: a.steps,
            cfg_dropout: if a.text_dim > 0 { a.cfg_dropout } else { 0.0 },
            seed,
        };
        let name = if phase == Phase::Extrinsic { "phase1" } else { "phase2" };
        log::info!("{name}: {} parameters, {} steps", params.parameter_count(), a.steps);
        let mut trainer = Trainer::new(params, &data, &sched, cfg)?;
        let mut window = 0.0f64;
        trainer.run(|tr, log| {
            window += log.loss as f64;
            let done = log.step + 1;
            if a.log_every > 0 && done % a.log_every == 0 {
                log::info!("{name} step {done}: loss {:.4} lr {:.2e}", window / a.log_every as f64, log.lr);
                window = 0.0;
            }
            if a.ckpt_every > 0 && done % a.ckpt_every == 0 && done < a.steps {
                save_phase(&a.ckpt, &tr.params, &sched, done, seed, family)?;
            }
            Ok(())
        })?;
        if trainer.skipped() > 0 {
            log::warn!("{name}: {} steps skipped on non-finite gradients", trainer.skipped());
        }
        write_file(&a.ckpt.join(format!("{name}_curve.csv")), curve_csv(trainer.curve()).as_bytes())?;
        save_phase(&a.ckpt, &trainer.params, &sched, a.steps, seed, family)?;
    }
    Ok(())
}

fn text_tokens(g: &GuidanceArgs) -> Result<Option<Vec<u32>>> {
    g.text.as_deref().map(tokenize).transpose()
}

/// Labels for shapes that carry none, from the model family.
fn labelled(mut s: PartSet, family: Option<Family>) -> PartSet {
    if s.labels.is_none() {
        if let Some(f) = family.filter(|f| f.part_count() == s.len()) {
            s.labels = Some(infer_labels(&s, f));
        }
    }
    s
}

fn parse_label(name: &str) -> Result<u32> {
    labels::from_name(name).ok_or_else(|| Error::Param(format!("unknown label {name:?}")))
}

fn sample(a: SampleArgs) -> Result<()> {
    let models = ModelDir::load(&a.ckpt)?;
    let parts = a
        .parts
        .or(models.part_count())
        .ok_or_else(|| Error::Param("checkpoint records no family; pass --parts".into()))?;
    let text = text_tokens(&a.guidance)?;
    let mut rng = NoiseRng::new(a.seed);
    let shapes = models
        .cascade()?
        .sample(a.n_samples, parts, &mut rng, text.as_deref(), a.guidance.w)?;
    let caption = text.unwrap_or_default();
    let out: Vec<ToyShape> = shapes
        .into_iter()
        .map(|s| ToyShape {
            parts: labelled(s, models.family),
            caption: caption.clone(),
        })
        .collect();
    save_shapes(&a.out, &out)?;
    log::info!("wrote {} samples to {}", out.len(), a.out.display());
    Ok(())
}

fn complete(a: CompleteArgs) -> Result<()> {
    let models = ModelDir::load(&a.ckpt)?;
    let cascade = models.cascade()?;
    let text = text_tokens(&a.guidance)?;
    let label = a.mask_label.as_deref().map(parse_label).transpose()?;
    if label.is_none() && text.is_none() {
        return Err(Error::Param("complete needs --mask-label or --text".into()));
    }
    let mut out = Vec::new();
    for (i, shape) in load_shapes(&a.dataset)?.into_iter().enumerate() {
        let parts = labelled(shape.parts, models.family);
        let part_labels = parts
            .labels
            .clone()
            .ok_or_else(|| Error::Param(format!("shape {i} has no labels and no family is known")))?;
        let sel = match (label, &text) {
            (Some(l), _) => mask_for_label(&part_labels, l),
            (None, Some(t)) => text_part_selector(t, &part_labels),
            (None, None) => unreachable!(),
        };
        if sel.unmatched {
            log::warn!("shape {i}: no part selected, copying it unchanged");
        }
        let mask: PartMask = sel.mask;
        let mut rng = NoiseRng::indexed(a.seed, i as u64);
        let done = cascade.complete(&parts, &mask, &mut rng, text.as_deref(), a.guidance.w)?;
        out.push(ToyShape {
            parts: done,
            caption: shape.caption,
        });
    }
    save_shapes(&a.out, &out)?;
    log::info!("wrote {} completions to {}", out.len(), a.out.display());
    Ok(())
}

fn mix(a: MixArgs) -> Result<()> {
    let models = ModelDir::load(&a.ckpt)?;
    let cascade = models.cascade()?;
    let label = parse_label(&a.mask_label)?;
    let base = load_shapes(&a.dataset)?;
    let donor = load_shapes(&a.donor)?;
    if base.len() != donor.len() {
        return Err(Error::Param(format!("{} base shapes but {} donors", base.len(), donor.len())));
    }
    let mut out = Vec::with_capacity(base.len());
    for (i, (x, y)) in base.into_iter().zip(donor).enumerate() {
        let (x, y) = (labelled(x.parts, models.family), labelled(y.parts, models.family));
        let mut rng = NoiseRng::indexed(a.seed, i as u64);
        let mixed = cascade.mix_and_refine(&x, &y, label, a.t_start, None, &mut rng)?;
        out.push(ToyShape {
            parts: mixed,
            caption: Vec::new(),
        });
    }
    save_shapes(&a.out, &out)?;
    log::info!("wrote {} mixed shapes to {}", out.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let generated = load_shapes(&a.dataset)?;
    let reference = load_shapes(&a.reference)?;
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Empty("eval needs non-empty generated and reference sets"));
    }
    let g = shape_clouds(generated.iter().map(|s| &s.parts), a.points, a.seed)?;
    let r = shape_clouds(reference.iter().map(|s| &s.parts), a.points, a.seed)?;
    let report = MetricReport::compute(&g, &r, a.emd, a.completion, a.seed)?;
    let json = report.to_json()?;
    if let Some(path) = &a.out {
        write_file(path, json.as_bytes())?;
        write_file(&path.with_extension("csv"), report.to_csv().as_bytes())?;
    }
    println!("{json}");
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::fs::write(path, bytes)?)
}

fn serve(a: ServeArgs) -> Result<()> {
    let service = Arc::new(ModelDir::load(&a.ckpt)?.into_service(a.family)?);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        let app = axum::Router::new().fallback(move |req: axum::extract::Request| handle(service.clone(), req));
        axum::serve(listener, app).await?;
        Ok(())
    })
}

async fn handle(service: Arc<Service>, req: axum::extract::Request) -> axum::response::Response {
    use axum::http::{header, StatusCode};
    use axum::response::IntoResponse;

    let method = req.method().to_string();
    let path = req.uri().path().to_string();
    let reply = match axum::body::to_bytes(req.into_body(), 16 << 20).await {
        Ok(body) => tokio::task::spawn_blocking(move || service.handle(&method, &path, &body))
            .await
            .unwrap_or_else(|e| salad::service::Response {
                status: 500,
                body: serde_json::json!({ "error": e.to_string() }).to_string(),
            }),
        Err(e) => salad::service::Response {
            status: 400,
            body: serde_json::json!({ "error": e.to_string() }).to_string(),
        },
    };
    let status = StatusCode::from_u16(reply.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json")], reply.body).into_response()
}
