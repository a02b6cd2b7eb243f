//! Unconditional generation: sample tables through the cascade and label their parts.
//!
//! cargo run --release -p salad --example sample -- 600

mod common;

use salad::sampler::{Cascade, DEFAULT_GUIDANCE};
use salad::toyworld::{infer_labels, labels, Family};
use salad::NoiseRng;

fn main() -> salad::Result<()> {
    let toy = common::train_toy(Family::Table, common::steps_arg(2000), 0)?;
    let cascade = Cascade::new(&toy.phase1, &toy.phase2, &toy.sched)?;
    let mut rng = NoiseRng::new(7);
    let shapes = cascade.sample(4, Family::Table.part_count(), &mut rng, None, DEFAULT_GUIDANCE)?;
    for (k, shape) in shapes.iter().enumerate() {
        let names: Vec<&str> = infer_labels(shape, Family::Table)
            .into_iter()
            .map(|l| labels::name(l).unwrap_or("?"))
            .collect();
        let height = shape.extrinsics().iter().map(|e| e.center[1]).fold(f32::NEG_INFINITY, f32::max);
        println!("shape {k}: parts {names:?}, highest center y {height:.3}");
    }
    Ok(())
}
