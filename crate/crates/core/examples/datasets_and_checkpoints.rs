//! Writes a rendered scene in the `transforms_<split>.json` layout, loads it
//! back, and round-trips a checkpoint through the binary container.
//!
//! `cargo run --release --example datasets_and_checkpoints -- [dir]`

use recolor::dataio::{
    generate_synthetic_3d, load_checkpoint, load_nerf_synthetic, orbit_cameras, save_checkpoint, write_nerf_synthetic,
    Checkpoint, CheckpointMeta, LoadOptions, SyntheticSceneSpec,
};
use recolor::field::{Aabb, Field};

fn main() -> anyhow::Result<()> {
    let dir = match std::env::args().nth(1) {
        Some(d) => std::path::PathBuf::from(d),
        None => std::env::temp_dir().join("recolor-dataset-demo"),
    };
    let spec = SyntheticSceneSpec::demo(32);
    let cameras = orbit_cameras(6, 3.0, 48, 66.0, 0.0)?;
    let scene = generate_synthetic_3d(&spec, &cameras)?;
    write_nerf_synthetic(&dir, &scene, "train")?;
    println!("wrote {} views to {}", scene.frames.len(), dir.display());

    let options = LoadOptions {
        aabb: Aabb::cube(1.0),
        near: 0.1,
        far: 6.0,
        ..LoadOptions::default()
    };
    let loaded = load_nerf_synthetic(&dir, &options)?;
    let first = &loaded.frames[0];
    println!(
        "loaded {} frames at {}x{}, focal {:.2}",
        loaded.frames.len(),
        first.camera.width,
        first.camera.height,
        first.camera.focal
    );

    let checkpoint = Checkpoint {
        field: Field::Scene(spec.ground_truth_field()?),
        palette: spec.palette.clone(),
        meta: CheckpointMeta {
            cameras: loaded.cameras(),
            samples: 96,
            ..CheckpointMeta::default()
        },
    };
    let path = dir.join("scene.ckpt");
    save_checkpoint(&path, &checkpoint)?;
    let back = load_checkpoint(&path)?;
    println!(
        "checkpoint {} bytes, identical after reload: {}",
        std::fs::metadata(&path)?.len(),
        back == checkpoint
    );
    Ok(())
}
