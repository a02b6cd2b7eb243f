//! Train both cascade phases on toy tables and write a model directory that
//! `salad sample --ckpt` can load.
//!
//! cargo run --release -p salad --example train -- 2000 models/tables

use salad::denoiser::Phase;
use salad::pipeline::{save_phase, toy_model, ModelDir};
use salad::schedule::NoiseSchedule;
use salad::toyworld::{generate_dataset, Family, ToySpec};
use salad::train::{curve_csv, trailing_mean, TrainConfig, Trainer, TrainingSet};

fn main() -> salad::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let dir = std::env::args().nth(2).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("salad-tables"));
    let shapes = generate_dataset(&ToySpec::new(Family::Table, 1), 256);
    let data = TrainingSet::from_toy(&shapes)?;
    let sched = NoiseSchedule::linear(200, 1e-4, 0.05)?;

    for (seed, phase) in [Phase::Extrinsic, Phase::Intrinsic].into_iter().enumerate() {
        let seed = seed as u64;
        let params = toy_model(phase, &data, 0, seed)?;
        println!("{phase:?}: {} parameters", params.parameter_count());
        let config = TrainConfig {
            batch: 32,
            lr: 1e-3,
            steps,
            cfg_dropout: 0.0,
            seed,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(params, &data, &sched, config)?;
        tr.run(|_, log| {
            if (log.step + 1) % 100 == 0 {
                println!("  step {:5} loss {:.4} lr {:.2e}", log.step + 1, log.loss, log.lr);
            }
            Ok(())
        })?;
        println!("  trailing loss {:.4}", trailing_mean(tr.curve(), 100));
        std::fs::create_dir_all(&dir)?;
        let name = if phase == Phase::Extrinsic { "phase1" } else { "phase2" };
        std::fs::write(dir.join(format!("{name}_curve.csv")), curve_csv(tr.curve()))?;
        save_phase(&dir, &tr.params, &sched, steps, seed, Some(Family::Table))?;
    }

    let models = ModelDir::load(&dir)?;
    println!("wrote {} ({:?}, {} parts per shape)", dir.display(), models.family, models.part_count().unwrap_or(0));
    Ok(())
}
