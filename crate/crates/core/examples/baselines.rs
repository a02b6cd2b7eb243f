//! Ablation baselines: a single denoiser over joint (extrinsic, intrinsic)
//! tokens and an MLP over a global shape latent, next to the cascade losses.

use salad::denoiser::Phase;
use salad::pipeline::toy_model;
use salad::schedule::NoiseSchedule;
use salad::toyworld::{generate_dataset, Family, ToySpec};
use salad::train::{train_baseline_p, train_baseline_z, trailing_mean, TrainConfig, Trainer, TrainingSet};

fn main() -> salad::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let shapes = generate_dataset(&ToySpec::new(Family::Table, 1).with_intrinsic_dim(16), 200);
    let data = TrainingSet::from_toy(&shapes)?;
    let sched = NoiseSchedule::linear(50, 1e-4, 0.05)?;
    let config = TrainConfig {
        batch: 16,
        lr: 1e-3,
        steps,
        cfg_dropout: 0.0,
        ..TrainConfig::default()
    };
    for phase in [Phase::Extrinsic, Phase::Intrinsic] {
        let mut tr = Trainer::new(toy_model(phase, &data, 0, 0)?, &data, &sched, config.clone())?;
        tr.run(|_, _| Ok(()))?;
        println!("cascade {phase:?}: trailing loss {:.4}", trailing_mean(tr.curve(), 50));
    }
    let (_, curve) = train_baseline_p(toy_model(Phase::Joint, &data, 0, 0)?, &data, &sched, config.clone())?;
    println!("joint-token baseline: trailing loss {:.4}", trailing_mean(&curve, 50));
    let (_, curve) = train_baseline_z(&data, &sched, &config, 256, 32)?;
    println!("global-latent baseline: trailing loss {:.4}", trailing_mean(&curve, 50));
    Ok(())
}
