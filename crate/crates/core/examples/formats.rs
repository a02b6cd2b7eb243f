//! On-disk formats: write a shape file and a checkpoint, read both back and
//! confirm the bytes roundtrip exactly.

use salad::denoiser::Phase;
use salad::format::{load_shapes, save_shapes, shapes_to_bytes, Checkpoint};
use salad::pipeline::toy_model;
use salad::schedule::NoiseSchedule;
use salad::toyworld::{generate_dataset, Family, ToySpec};
use salad::train::TrainingSet;

fn main() -> salad::Result<()> {
    let dir = tempfile::tempdir()?;
    let shapes = generate_dataset(&ToySpec::new(Family::Chair, 4), 10);
    let shp = dir.path().join("chairs.shp");
    save_shapes(&shp, &shapes)?;
    let back = load_shapes(&shp)?;
    println!("{}: {} bytes, {} shapes, equal after reload: {}", shp.display(), std::fs::metadata(&shp)?.len(), back.len(), back == shapes);

    let data = TrainingSet::from_toy(&shapes)?;
    let sched = NoiseSchedule::linear(100, 1e-4, 0.05)?;
    let params = toy_model(Phase::Intrinsic, &data, 16, 0)?;
    let ckpt = Checkpoint::from_model(&params, sched.params(), 0, 0);
    let path = dir.path().join("phase2.sldckpt");
    ckpt.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    println!(
        "{}: {} tensors, {} parameters, bytes identical: {}",
        path.display(),
        loaded.tensors.len(),
        params.parameter_count(),
        loaded.to_bytes()? == std::fs::read(&path)?
    );
    println!("shape bytes stable: {}", shapes_to_bytes(&back)? == std::fs::read(&shp)?);
    Ok(())
}
