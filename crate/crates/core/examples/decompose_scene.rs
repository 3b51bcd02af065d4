//! Fits a layered grid radiance field to 20 rendered views of a two-object
//! scene and scores it on views held out from training.
//!
//! `cargo run --release --example decompose_scene -- [iterations] [out_dir]`

use std::time::Instant;

use recolor::dataio::{generate_synthetic_3d, orbit_cameras, Checkpoint, Dataset, ImageData, SyntheticSceneSpec};
use recolor::optimizer::{fit_with, psnr, Mode, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(6000);
    let out_dir = args.next().map(std::path::PathBuf::from);

    let size = 128;
    let focal = 0.5 * size as f64 / (20f64).to_radians().tan();
    let spec = SyntheticSceneSpec::demo(64);
    let train = generate_synthetic_3d(&spec, &orbit_cameras(20, 3.0, size, focal, 0.0)?)?;
    let held_out = generate_synthetic_3d(&spec, &orbit_cameras(4, 3.0, size, focal, 0.4)?)?;

    let config = TrainConfig {
        mode: Mode::Scene,
        layers: 2,
        palette_init: "kmeans".into(),
        iterations,
        batch_rays: 2048,
        grid_levels: vec![64],
        cosine_decay: true,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let every = (iterations / 10).max(1);
    let fit = fit_with(&Dataset::Scene(train.clone()), &config, |r| {
        if r.step % every == 0 {
            println!("step {:>5}  loss {:>9.3}  batch psnr {:.2}  {:.0?}", r.step, r.total, r.psnr, start.elapsed());
        }
    })?;
    println!("fit took {:.1?}", start.elapsed());

    let ck = Checkpoint::from_fit(&fit, &config, train.cameras());
    let mut scores = Vec::new();
    for (i, frame) in held_out.frames.iter().enumerate() {
        let img = ck.render_camera(&frame.camera, &ck.palette)?;
        scores.push(psnr(&img.rgb, &frame.image.pixels)?);
        if let Some(dir) = &out_dir {
            std::fs::create_dir_all(dir)?;
            ImageData::new(size, size, img.rgb)?.save_png(&dir.join(format!("held_out_{i}.png")))?;
            frame.image.save_png(&dir.join(format!("truth_{i}.png")))?;
        }
    }
    println!("held-out psnr {:?}", scores.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>());
    println!("learned palette {:?}", ck.palette.to_hex_list());
    println!("true palette    {:?}", spec.palette.to_hex_list());
    Ok(())
}
