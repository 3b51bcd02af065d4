//! Decomposes a synthetic image, then recolors it by editing palette entries.
//! The edit is linear: each pixel moves by its layer weight times the color
//! change.
//!
//! `cargo run --release --example recolor -- [out_dir]`

use recolor::dataio::{generate_synthetic_2d, Checkpoint, Dataset, ImageData, SyntheticImageSpec};
use recolor::optimizer::{fit, TrainConfig};
use recolor::ColorPoint;

fn main() -> anyhow::Result<()> {
    let out_dir = std::env::args().nth(1).map(std::path::PathBuf::from);
    let truth = generate_synthetic_2d(&SyntheticImageSpec::demo(64, 64, 2))?;
    let config = TrainConfig {
        layers: 4,
        iterations: 2000,
        cosine_decay: true,
        ..TrainConfig::default()
    };
    let ck = Checkpoint::from_fit(&fit(&Dataset::Image(truth.image), &config)?, &config, Vec::new());
    println!("palette {:?}", ck.palette.to_hex_list());

    let before = ck.render_view(0, None, &ck.palette)?;
    // Swap the top layer's color for a teal.
    let top = ck.palette.layer_count();
    let teal = ColorPoint::from_hex("#1FA5A0")?;
    let edited = ck.palette.edit_color(top, teal)?;
    let after = ck.render_view(0, None, &edited)?;

    let delta = teal - ck.palette.colors()[top];
    let worst = before
        .rgb
        .iter()
        .zip(&after.rgb)
        .enumerate()
        .map(|(p, (b, a))| (*b + delta * before.layer_weights[p * (top + 1) + top]).max_abs_diff(*a))
        .fold(0.0, f64::max);
    println!("edited palette {:?}", edited.to_hex_list());
    println!("largest deviation from the linear prediction: {worst:.2e}");

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir)?;
        ImageData::new(before.width, before.height, before.rgb)?.save_png(&dir.join("before.png"))?;
        ImageData::new(after.width, after.height, after.rgb)?.save_png(&dir.join("after.png"))?;
        println!("wrote before.png and after.png to {}", dir.display());
    }
    Ok(())
}
