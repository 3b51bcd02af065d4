//! Convex hull of an image's colors, distances to it, and a palette obtained
//! by simplifying the hull.
//!
//! `cargo run --example color_hull -- [image.png] [hull.obj]`

use recolor::colorhull::{build_hull_jittered, prepare_hull_points, DEFAULT_JITTER, MAX_HULL_POINTS};
use recolor::dataio::{generate_synthetic_2d, load_image, SyntheticImageSpec};
use recolor::ColorPoint;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let image = match args.next() {
        Some(path) => load_image(path.as_ref(), ColorPoint::WHITE)?,
        None => generate_synthetic_2d(&SyntheticImageSpec::demo(96, 96, 1))?.image,
    };

    let points = prepare_hull_points(&image.pixels, MAX_HULL_POINTS, 0);
    let hull = build_hull_jittered(&points, DEFAULT_JITTER, 0)?;
    println!(
        "{} distinct colors -> hull with {} vertices, {} facets, volume {:.4}",
        points.len(),
        hull.vertices().len(),
        hull.facets().len(),
        hull.volume()
    );

    for probe in [ColorPoint::new(0.5, 0.5, 0.5), ColorPoint::new(0.0, 1.0, 1.0)] {
        let (d, nearest) = hull.distance_to_hull(probe)?;
        println!(
            "{} inside: {:<5} distance {:.4} nearest {}",
            probe.to_hex(),
            hull.contains(probe),
            d,
            nearest.to_hex()
        );
    }

    let palette = hull.simplify_to_palette(5)?;
    println!("5-color palette from the hull: {:?}", palette.iter().map(|c| c.to_hex()).collect::<Vec<_>>());

    if let Some(out) = args.next() {
        std::fs::write(&out, hull.to_obj())?;
        println!("wrote {out}");
    }
    Ok(())
}
