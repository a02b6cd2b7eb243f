//! Small cascade trained on the fly so each example runs on its own in seconds.

use salad::denoiser::{ModelParams, Phase};
use salad::pipeline::toy_model;
use salad::schedule::NoiseSchedule;
use salad::toyworld::{generate_dataset, split_train_test, Family, ToyShape, ToySpec};
use salad::train::{trailing_mean, TrainConfig, Trainer, TrainingSet};
use salad::Result;

pub struct Toy {
    pub phase1: ModelParams,
    pub phase2: ModelParams,
    pub sched: NoiseSchedule,
    #[allow(dead_code)]
    pub test: Vec<ToyShape>,
}

/// Step count from the first command-line argument.
pub fn steps_arg(default: usize) -> usize {
    std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(default)
}

/// Train both phases for `steps` each on 200 shapes of `family`; `text_dim > 0` adds caption conditioning.
pub fn train_toy(family: Family, steps: usize, text_dim: usize) -> Result<Toy> {
    let shapes = generate_dataset(&ToySpec::new(family, 3).with_intrinsic_dim(16), 200);
    let (train, test) = split_train_test(shapes, 3);
    let data = TrainingSet::from_toy(&train)?;
    let sched = NoiseSchedule::linear(50, 1e-4, 0.05)?;
    let mut trained = Vec::new();
    for (k, phase) in [Phase::Extrinsic, Phase::Intrinsic].into_iter().enumerate() {
        let config = TrainConfig {
            batch: 16,
            lr: 1e-3,
            steps,
            cfg_dropout: if text_dim > 0 { 0.2 } else { 0.0 },
            seed: k as u64,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(toy_model(phase, &data, text_dim, k as u64)?, &data, &sched, config)?;
        tr.run(|_, _| Ok(()))?;
        eprintln!("{phase:?}: {steps} steps, trailing loss {:.4}", trailing_mean(tr.curve(), 50));
        trained.push(tr.into_params());
    }
    let phase2 = trained.pop().unwrap();
    let phase1 = trained.pop().unwrap();
    Ok(Toy {
        phase1,
        phase2,
        sched,
        test,
    })
}
