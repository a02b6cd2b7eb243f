//! Part mixing: give one chair the back of another, then refine the swap so the
//! parts fit together.

mod common;

use salad::metrics::{chamfer, shape_clouds};
use salad::sampler::{naive_mix, Cascade, DEFAULT_REFINE_T};
use salad::toyworld::{labels, Family};
use salad::NoiseRng;

fn main() -> salad::Result<()> {
    let toy = common::train_toy(Family::Chair, common::steps_arg(2000), 0)?;
    let cascade = Cascade::new(&toy.phase1, &toy.phase2, &toy.sched)?;
    let (a, b) = (&toy.test[0].parts, &toy.test[1].parts);
    let naive = naive_mix(a, b, labels::BACK)?;
    let refined = cascade.mix_and_refine(a, b, labels::BACK, DEFAULT_REFINE_T, None, &mut NoiseRng::new(5))?;
    let clouds = shape_clouds([a, &naive, &refined], 1024, 0)?;
    println!("chamfer to the first chair: naive mix {:.4}, refined {:.4}", chamfer(&clouds[0], &clouds[1])?, chamfer(&clouds[0], &clouds[2])?);
    for i in naive.indices_of(labels::BACK) {
        let (n, r) = (naive.parts[i].extrinsic.center, refined.parts[i].extrinsic.center);
        println!("back part {i}: center y {:.3} -> {:.3}", n[1], r[1]);
    }
    Ok(())
}
