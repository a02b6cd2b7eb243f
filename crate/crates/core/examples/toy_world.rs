//! Procedural shapes: generate a chair and a table, print their parts, and
//! decode occupancy along a vertical line through the chair.

use salad::toyworld::{decode_occupancy, detokenize, generate_dataset, labels, sample_points, Family, ToySpec};

fn main() -> salad::Result<()> {
    for family in [Family::Chair, Family::Table] {
        let shape = &generate_dataset(&ToySpec::new(family, 1), 1)[0];
        println!("{} \"{}\"", family.name(), detokenize(&shape.caption));
        for (i, part) in shape.parts.parts.iter().enumerate() {
            let e = &part.extrinsic;
            let label = shape.parts.label(i).and_then(labels::name).unwrap_or("?");
            println!(
                "  {label:5} center [{:6.3} {:6.3} {:6.3}] eigvals [{:.4} {:.4} {:.4}] weight {:.3}",
                e.center[0], e.center[1], e.center[2], e.eigvals[0], e.eigvals[1], e.eigvals[2], e.weight
            );
        }
        let cloud = sample_points(&shape.parts, 1024, 0)?;
        let top = cloud.iter().map(|p| p[1]).fold(f32::NEG_INFINITY, f32::max);
        println!("  1024 surface-interior points, highest y {top:.3}");
    }

    let chair = &generate_dataset(&ToySpec::new(Family::Chair, 1), 1)[0].parts;
    let c = chair.parts[0].extrinsic.center;
    let line: String = (0..40)
        .map(|k| {
            let x = [c[0], -0.1 + k as f32 * 0.04, c[2]];
            if decode_occupancy(&x, chair) > 0.5 { '#' } else { '.' }
        })
        .collect();
    println!("occupancy along y at the first part's center: {line}");
    Ok(())
}
