//! Part completion: drop the legs of held-out chairs and regenerate them while
//! every other part stays fixed.

mod common;

use salad::parts::PartMask;
use salad::sampler::Cascade;
use salad::toyworld::{labels, Family};
use salad::NoiseRng;

fn main() -> salad::Result<()> {
    let toy = common::train_toy(Family::Chair, common::steps_arg(2000), 0)?;
    let cascade = Cascade::new(&toy.phase1, &toy.phase2, &toy.sched)?;
    for (k, shape) in toy.test.iter().take(3).enumerate() {
        let legs = shape.parts.indices_of(labels::LEG);
        let mask = PartMask::from_keep((0..shape.parts.len()).map(|i| !legs.contains(&i)).collect());
        let done = cascade.complete(&shape.parts, &mask, &mut NoiseRng::indexed(11, k as u64), None, 0.0)?;
        let kept = (0..done.len()).filter(|&i| mask.keeps(i)).all(|i| done.parts[i] == shape.parts.parts[i]);
        println!("chair {k}: regenerated {} legs, kept parts unchanged: {kept}", legs.len());
        for &i in &legs {
            let (a, b) = (shape.parts.parts[i].extrinsic.center, done.parts[i].extrinsic.center);
            println!("  leg {i}: center [{:.3} {:.3} {:.3}] -> [{:.3} {:.3} {:.3}]", a[0], a[1], a[2], b[0], b[1], b[2]);
        }
    }
    Ok(())
}
