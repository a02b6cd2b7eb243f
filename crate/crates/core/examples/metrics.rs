//! Evaluation metrics: Chamfer and exact EMD between point clouds, then COV,
//! MMD and 1-NNA for two sets of toy chairs against a reference set.

use salad::metrics::{chamfer, emd, shape_clouds, MetricReport};
use salad::toyworld::{generate_dataset, Family, ToySpec};

fn main() -> salad::Result<()> {
    let reference = generate_dataset(&ToySpec::new(Family::Chair, 1), 16);
    let same = generate_dataset(&ToySpec::new(Family::Chair, 2), 16);
    let tables = generate_dataset(&ToySpec::new(Family::Table, 2), 16);
    let parts = |s: &[salad::toyworld::ToyShape]| s.iter().map(|s| s.parts.clone()).collect::<Vec<_>>();
    let (r, a, b) = (parts(&reference), parts(&same), parts(&tables));

    let clouds = shape_clouds([&r[0], &a[0]], 256, 0)?;
    println!("one pair: chamfer {:.5}, emd {:.5}", chamfer(&clouds[0], &clouds[1])?, emd(&clouds[0], &clouds[1])?);

    let ref_clouds = shape_clouds(&r, 256, 0)?;
    for (name, set) in [("chairs", &a), ("tables", &b)] {
        let report = MetricReport::compute(&shape_clouds(set, 256, 100)?, &ref_clouds, false, false, 0)?;
        println!("{name:7} vs chairs: COV {:.3} MMD {:.5} 1-NNA {:.3}", report.cd.cov, report.cd.mmd, report.cd.nna);
    }
    Ok(())
}
