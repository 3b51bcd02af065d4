//! Fits layers and a palette to a synthetic 128×128 image and reports how
//! well the hidden palette was recovered.
//!
//! `cargo run --release --example decompose_image -- [iterations] [out_dir]`

use std::time::Instant;

use recolor::dataio::{generate_synthetic_2d, gray_png, Dataset, ImageData, SyntheticImageSpec};
use recolor::field::Field;
use recolor::optimizer::{fit_with, psnr, TrainConfig};
use recolor::renderer::render_image_2d;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(8000);
    let out_dir = args.next().map(std::path::PathBuf::from);

    let spec = SyntheticImageSpec::demo(128, 128, 0);
    let truth = generate_synthetic_2d(&spec)?;
    let config = TrainConfig {
        layers: 4,
        iterations,
        cosine_decay: true,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let fit = fit_with(&Dataset::Image(truth.image.clone()), &config, |r| {
        if r.step % 500 == 0 {
            println!("step {:>5}  loss {:>10.3}  psnr {:.2}", r.step, r.total, r.psnr);
        }
    })?;
    let Field::Image(field) = &fit.state.field else { unreachable!() };
    let palette = fit.state.palette.exported();
    let rendered = render_image_2d(field, palette.colors(), config.ablation.blend_mode())?;
    println!("fit took {:.1?}", start.elapsed());
    println!("reconstruction psnr {:.2} dB", psnr(&rendered.rgb, &truth.image.pixels)?);
    println!("learned palette  {:?}", palette.to_hex_list());
    println!("true palette     {:?}", spec.palette.to_hex_list());
    println!("layer order      {:?}", fit.state.order.as_slice());

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir)?;
        truth.image.save_png(&dir.join("input.png"))?;
        ImageData::new(128, 128, rendered.rgb.clone())?.save_png(&dir.join("reconstruction.png"))?;
        for i in 0..=rendered.k {
            std::fs::write(dir.join(format!("layer_{i}.png")), gray_png(&rendered.layer_map(i), 128, 128))?;
        }
        println!("wrote images to {}", dir.display());
    }
    Ok(())
}
