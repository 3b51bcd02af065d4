//! Command-line front end: `hull`, `decompose`, `render`, `recolor`,
//! `gradcheck` and `serve`.
//!
//! Exit codes are 0 on success, 1 on user error and 2 on internal error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::color::ColorPoint;
use crate::colorhull::{build_hull, build_hull_jittered, prepare_hull_points, DEFAULT_JITTER, MAX_HULL_POINTS};
use crate::dataio::{
    gray_png, load_checkpoint, load_image, load_nerf_synthetic, load_pixels, save_checkpoint, Checkpoint, Dataset,
    ImageData, LoadOptions,
};
use crate::error::Error;
use crate::field::{Aabb, Field, DEFAULT_INIT_DENSITY, DEFAULT_INIT_LOGIT};
use crate::optimizer::{fit_with, gradcheck_model, psnr, Ablation, Mode, TrainConfig};
use crate::renderer::{render_image_2d, Camera, DEFAULT_SAMPLES};

#[derive(Debug, Parser)]
#[command(name = "recolor", version, about = "Palette-based layer decomposition and recoloring")]
pub struct Cli {
    /// Print a JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convex hull of the input's pixel colors, written as OBJ.
    Hull(HullArgs),
    /// Fits layers and palette to an image or a multi-view dataset.
    Decompose(DecomposeArgs),
    /// Renders a checkpoint view, optionally with per-layer weight maps.
    Render(RenderArgs),
    /// Writes a copy of a checkpoint with edited palette entries.
    Recolor(RecolorArgs),
    /// Compares analytic and finite-difference gradients on a toy problem.
    Gradcheck(GradcheckArgs),
    /// Serves the palette-editing HTTP API for a checkpoint.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct HullArgs {
    /// Image, directory of PNGs or dataset directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Jitter colors by up to 1/512 so flat inputs still span a volume.
    #[arg(long)]
    pub jitter: bool,
    #[arg(long, default_value_t = MAX_HULL_POINTS)]
    pub max_points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// PNG (2d) or dataset directory with transforms_<split>.json (3d).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "2d")]
    pub mode: Mode,
    #[arg(long, default_value_t = 5)]
    pub layers: usize,
    #[arg(long, default_value = "hull_simplify")]
    pub palette_init: String,
    #[arg(long, alias = "iterations", default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_hull: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lambda_sparsity: f64,
    #[arg(long, default_value_t = 12.0)]
    pub eta: f64,
    #[arg(long, default_value = "full")]
    pub ablation: Ablation,
    #[arg(long, default_value_t = 4096)]
    pub batch_rays: usize,
    #[arg(long, default_value_t = 0.02)]
    pub learning_rate_fields: f64,
    #[arg(long, default_value_t = 0.005)]
    pub learning_rate_palette: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Comma-separated grid resolutions (3d).
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub grid_levels: Vec<usize>,
    /// Comma-separated steps at which to move to the next grid level (3d).
    #[arg(long, value_delimiter = ',')]
    pub upsample_at: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_INIT_DENSITY, allow_hyphen_values = true)]
    pub init_density: f64,
    #[arg(long, default_value_t = DEFAULT_INIT_LOGIT, allow_hyphen_values = true)]
    pub init_logit: f64,
    /// Evenly spaced ray samples instead of jittered ones.
    #[arg(long)]
    pub no_stratified: bool,
    #[arg(long)]
    pub cosine_decay: bool,
    /// Color composited under transparent input pixels.
    #[arg(long, default_value = "#FFFFFF")]
    pub background: String,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Half extent of the scene bounding cube (3d).
    #[arg(long, default_value_t = 1.5)]
    pub aabb: f64,
    #[arg(long, default_value_t = 2.0)]
    pub near: f64,
    #[arg(long, default_value_t = 6.0)]
    pub far: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log as JSON lines; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

impl DecomposeArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            layers: self.layers,
            palette_init: self.palette_init.clone(),
            iterations: self.iters,
            batch_rays: self.batch_rays,
            learning_rate_fields: self.learning_rate_fields,
            learning_rate_palette: self.learning_rate_palette,
            lambda_hull: self.lambda_hull,
            lambda_sparsity: self.lambda_sparsity,
            eta: self.eta,
            seed: self.seed,
            ablation: self.ablation,
            samples: self.samples,
            grid_levels: self.grid_levels.clone(),
            upsample_at: self.upsample_at.clone(),
            init_density: self.init_density,
            init_logit: self.init_logit,
            stratified: !self.no_stratified,
            cosine_decay: self.cosine_decay,
        }
    }
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Stored view index, or a JSON file holding a camera.
    #[arg(long, default_value = "0")]
    pub view: String,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for `layer_<i>.png` weight maps, i = 0..=K.
    #[arg(long)]
    pub layers_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecolorArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `index=#RRGGBB`; repeatable.
    #[arg(long = "set", required = true)]
    pub sets: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "2d")]
    pub mode: Mode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturbs the analytic gradient; the check is expected to fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
}

/// An error caused by the invocation rather than by the program.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UserError(pub String);

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

/// 1 for user errors, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UserError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFiniteLoss { .. }
                | Error::InteriorPoint
                | Error::NoIntersection
                | Error::NotNormalized(_)
                | Error::ShapeMismatch(_) => 2,
                Error::Io(io) => io_exit_code(io),
                _ => 1,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return io_exit_code(io);
        }
    }
    2
}

fn io_exit_code(e: &std::io::Error) -> i32 {
    use std::io::ErrorKind::*;
    match e.kind() {
        NotFound | PermissionDenied | AddrInUse | AddrNotAvailable | AlreadyExists | InvalidInput => 1,
        _ => 2,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(summary) => {
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            let _ = if cli.json {
                writeln!(out, "{summary}")
            } else {
                writeln!(out, "{}", human(&summary))
            };
            0
        }
        Err(e) => {
            if cli.json {
                println!("{}", json!({ "error": format!("{e:#}") }));
            }
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn human(summary: &Value) -> String {
    match summary.as_object() {
        Some(map) => map
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}: {s}"),
                other => format!("{k}: {other}"),
            })
            .collect::<Vec<_>>()
            .join("\n"),
        None => summary.to_string(),
    }
}

/// Runs a parsed command and returns its summary.
pub fn run(cli: &Cli) -> anyhow::Result<Value> {
    match &cli.command {
        Command::Hull(a) => cmd_hull(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Render(a) => cmd_render(a),
        Command::Recolor(a) => cmd_recolor(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_hull(a: &HullArgs) -> anyhow::Result<Value> {
    let pixels = load_pixels(&a.input, ColorPoint::WHITE)?;
    let points = prepare_hull_points(&pixels, a.max_points, a.seed);
    let hull = match build_hull(&points) {
        Ok(h) => h,
        Err(Error::DegenerateInput(_)) if a.jitter => build_hull_jittered(&points, DEFAULT_JITTER, a.seed)?,
        Err(e @ Error::DegenerateInput(_)) => return Err(anyhow!(e).context("retry with --jitter")),
        Err(e) => return Err(e.into()),
    };
    write_file(&a.out, hull.to_obj().as_bytes())?;
    Ok(json!({
        "vertices": hull.vertices().len(),
        "facets": hull.facets().len(),
        "volume": hull.volume(),
        "points": points.len(),
        "out": a.out.display().to_string(),
    }))
}

pub fn cmd_decompose(a: &DecomposeArgs) -> anyhow::Result<Value> {
    let background = ColorPoint::from_hex(&a.background)?;
    let config = a.train_config();
    config.validate()?;
    let dataset = match a.mode {
        Mode::Image => Dataset::Image(load_image(&a.input, background)?),
        Mode::Scene => {
            let options = LoadOptions {
                background,
                split: a.split.clone(),
                aabb: Aabb::cube(a.aabb),
                near: a.near,
                far: a.far,
            };
            Dataset::Scene(load_nerf_synthetic(&a.input, &options)?)
        }
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log_lines = String::new();
    let every = (a.iters / 20).max(1);
    let fit = fit_with(&dataset, &config, |r| {
        log_lines.push_str(&serde_json::to_string(r).expect("log record serializes"));
        log_lines.push('\n');
        if r.step % every == 0 || r.step + 1 == a.iters {
            eprintln!(
                "step {:>6}  loss {:.5}  color {:.5}  hull {:.5}  sparsity {:.5}  psnr {:.2}",
                r.step, r.total, r.color, r.hull, r.sparsity, r.psnr
            );
        }
    })?;
    let cameras = match &dataset {
        Dataset::Scene(ds) => ds.cameras(),
        Dataset::Image(_) => Vec::new(),
    };
    let ck = Checkpoint::from_fit(&fit, &config, cameras);
    save_checkpoint(&a.out, &ck).with_context(|| format!("writing {}", a.out.display()))?;
    write_file(&log_path, log_lines.as_bytes())?;

    let mut summary = json!({
        "mode": config.mode,
        "steps": config.iterations,
        "palette": ck.palette.to_hex_list(),
        "initial_palette": fit.initial_palette.exported().to_hex_list(),
        "order": fit.state.order.as_slice(),
        "checkpoint": a.out.display().to_string(),
        "log": log_path.display().to_string(),
    });
    if let Some(last) = fit.log.last() {
        summary["loss"] = json!(last.total);
        summary["train_psnr"] = json!(last.psnr);
    }
    if let (Dataset::Image(img), Field::Image(f)) = (&dataset, &ck.field) {
        let rendered = render_image_2d(f, ck.palette.colors(), ck.meta.blend)?;
        summary["psnr"] = json!(psnr(&rendered.rgb, &img.pixels)?);
    }
    Ok(summary)
}

#[derive(Deserialize)]
struct PoseFile {
    transform_matrix: [[f64; 4]; 4],
    camera_angle_x: Option<f64>,
    width: Option<usize>,
    height: Option<usize>,
}

fn camera_from_file(path: &Path, ck: &Checkpoint) -> anyhow::Result<Camera> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    if let Ok(cam) = serde_json::from_str::<Camera>(&text) {
        cam.validate()?;
        return Ok(cam);
    }
    let pose: PoseFile = serde_json::from_str(&text).map_err(|e| Error::MalformedJson(format!("{}: {e}", path.display())))?;
    let base = ck
        .meta
        .cameras
        .first()
        .ok_or_else(|| user("pose file needs camera_angle_x, width and height when the checkpoint stores no cameras"))?;
    let width = pose.width.unwrap_or(base.width);
    let height = pose.height.unwrap_or(base.height);
    let focal = match pose.camera_angle_x {
        Some(angle) => Camera::focal_from_angle(angle, width),
        None => base.focal * width as f64 / base.width as f64,
    };
    Ok(Camera::new(width, height, focal, pose.transform_matrix, base.near, base.far)?)
}

pub fn cmd_render(a: &RenderArgs) -> anyhow::Result<Value> {
    let ck = load_checkpoint(&a.ckpt)?;
    let img = match a.view.parse::<usize>() {
        Ok(view) => {
            if view >= ck.view_count() {
                bail!(user(format!("view {view} out of range: checkpoint has {} view(s)", ck.view_count())));
            }
            ck.render_view(view, a.width, &ck.palette)?
        }
        Err(_) => {
            if ck.mode() == Mode::Image {
                bail!(user("image checkpoints only have view 0"));
            }
            let mut cam = camera_from_file(Path::new(&a.view), &ck)?;
            if let Some(w) = a.width {
                cam = cam.resized(w);
            }
            ck.render_camera(&cam, &ck.palette)?
        }
    };
    write_file(&a.out, &ImageData::new(img.width, img.height, img.rgb.clone())?.to_png())?;
    let mut layers = Vec::new();
    if let Some(dir) = &a.layers_out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for i in 0..=img.k {
            let p = dir.join(format!("layer_{i}.png"));
            write_file(&p, &gray_png(&img.layer_map(i), img.width, img.height))?;
            layers.push(p.display().to_string());
        }
    }
    Ok(json!({
        "width": img.width,
        "height": img.height,
        "out": a.out.display().to_string(),
        "layers": layers,
    }))
}

/// Parses `index=#RRGGBB` (or `index=r,g,b` with channels in [0,1]).
pub fn parse_set(s: &str) -> anyhow::Result<(usize, ColorPoint)> {
    let (i, c) = s.split_once('=').ok_or_else(|| user(format!("expected index=#RRGGBB, got `{s}`")))?;
    let index = i.trim().parse().map_err(|_| user(format!("bad palette index `{i}`")))?;
    let c = c.trim();
    let color = if c.starts_with('#') {
        ColorPoint::from_hex(c)?
    } else {
        let ch: Vec<f64> = c
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| user(format!("bad color `{c}`")))?;
        if ch.len() != 3 {
            bail!(user(format!("bad color `{c}`")));
        }
        ColorPoint::new(ch[0], ch[1], ch[2])
    };
    Ok((index, color))
}

pub fn cmd_recolor(a: &RecolorArgs) -> anyhow::Result<Value> {
    let mut ck = load_checkpoint(&a.ckpt)?;
    for s in &a.sets {
        let (index, color) = parse_set(s)?;
        ck.palette = ck.palette.edit_color(index, color)?;
    }
    save_checkpoint(&a.out, &ck).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(json!({
        "palette": ck.palette.to_hex_list(),
        "out": a.out.display().to_string(),
    }))
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<Value> {
    let report = gradcheck_model(a.mode, a.seed, a.inject_fault)?;
    if !report.passed() {
        bail!(user(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            report.max_relative_error, report.tolerance
        )));
    }
    Ok(serde_json::to_value(report)?)
}

pub fn cmd_serve(a: &ServeArgs) -> anyhow::Result<Value> {
    if !a.ckpt.is_file() {
        return Err(Error::MissingFile(a.ckpt.clone()).into());
    }
    crate::service::run(a.ckpt.clone(), SocketAddr::new(a.host, a.port))?;
    Ok(json!({ "stopped": true }))
}
