//! Serves the palette-editing API for a small synthetic scene.
//!
//! `cargo run --release --example serve -- [port]`, then for example
//! `curl localhost:8080/api/meta` or
//! `curl -X PUT localhost:8080/api/palette -d '{"index": 1, "color": "#22AA44"}'`.

use std::net::SocketAddr;

use recolor::dataio::{orbit_cameras, Checkpoint, CheckpointMeta, SyntheticSceneSpec};
use recolor::field::Field;
use recolor::service::{serve, AppState};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let port: u16 = std::env::args().nth(1).map(|p| p.parse()).transpose()?.unwrap_or(8080);
    let spec = SyntheticSceneSpec::demo(48);
    let checkpoint = Checkpoint {
        field: Field::Scene(spec.ground_truth_field()?),
        palette: spec.palette.clone(),
        meta: CheckpointMeta {
            cameras: orbit_cameras(8, 3.0, 160, 220.0, 0.0)?,
            samples: 96,
            ..CheckpointMeta::default()
        },
    };

    let listener = tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], port))).await?;
    println!("serving on http://{}", listener.local_addr()?);
    serve(listener, AppState::with_checkpoint(checkpoint), async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
