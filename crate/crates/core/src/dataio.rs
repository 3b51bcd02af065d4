//! Images, multi-view datasets, checkpoints and synthetic ground truth.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::color::ColorPoint;
use crate::compositor::{composite_direct, AlphaVector};
use crate::error::{Error, Result};
use crate::field::{Aabb, Field, GridField2D, GridField3D};
use crate::optimizer::{FitOutput, Mode, TrainConfig};
use crate::palette::{Palette, PaletteJson};
use crate::renderer::{render_image, render_image_2d, BlendMode, Camera, RenderOptions, RenderedImage, DEFAULT_SAMPLES};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"RCLRCKPT";

/// Row-major RGB image with channels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageData {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<ColorPoint>,
}

impl ImageData {
    pub fn new(width: usize, height: usize, pixels: Vec<ColorPoint>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                got: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, color: ColorPoint) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> ColorPoint {
        self.pixels[row * self.width + col]
    }

    /// 8-bit PNG bytes, channels `round(clamp(c,0,1)·255)`.
    pub fn to_png(&self) -> Vec<u8> {
        let raw: Vec<u8> = self.pixels.iter().flat_map(|c| c.to_rgb8()).collect();
        let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size");
        encode(DynamicImage::ImageRgb8(buf))
    }

    /// 16-bit PNG bytes.
    pub fn to_png16(&self) -> Vec<u8> {
        let raw: Vec<u16> = self
            .pixels
            .iter()
            .flat_map(|c| c.to_array())
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf = ImageBuffer::<Rgb<u16>, _>::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size");
        encode(DynamicImage::ImageRgb16(buf))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_png())?)
    }
}

fn encode(img: DynamicImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("png encoding into memory");
    out.into_inner()
}

/// Grayscale 8-bit PNG of values in [0,1].
pub fn gray_png(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let raw: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, raw).expect("buffer size");
    encode(DynamicImage::ImageLuma8(buf))
}

/// Raw little-endian f32 dump.
pub fn f32_dump(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Decodes a PNG; alpha is composited over `background`.
pub fn decode_image(bytes: &[u8], background: ColorPoint) -> Result<ImageData> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    let composite = |px: [f64; 4]| {
        let a = px[3];
        if a == 1.0 {
            ColorPoint::new(px[0], px[1], px[2])
        } else {
            ColorPoint::new(px[0], px[1], px[2]) * a + background * (1.0 - a)
        }
    };
    let pixels = if sixteen {
        img.to_rgba16()
            .pixels()
            .map(|p| composite(p.0.map(|v| v as f64 / 65535.0)))
            .collect()
    } else {
        img.to_rgba8()
            .pixels()
            .map(|p| composite(p.0.map(|v| v as f64 / 255.0)))
            .collect()
    };
    ImageData::new(w, h, pixels)
}

/// Loads an 8- or 16-bit PNG into [0,1] channels.
pub fn load_image(path: &Path, background: ColorPoint) -> Result<ImageData> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_image(&bytes, background)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub camera: Camera,
    pub image: ImageData,
    pub file_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub frames: Vec<Frame>,
    pub aabb: Aabb,
    pub source: Option<PathBuf>,
}

impl MultiViewDataset {
    pub fn cameras(&self) -> Vec<Camera> {
        self.frames.iter().map(|f| f.camera.clone()).collect()
    }
}

/// Training input of either mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Image(ImageData),
    Scene(MultiViewDataset),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub background: ColorPoint,
    pub split: String,
    pub aabb: Aabb,
    pub near: f64,
    pub far: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            background: ColorPoint::WHITE,
            split: "train".into(),
            aabb: Aabb::cube(1.5),
            near: 2.0,
            far: 6.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<TransformFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TransformFrame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

fn resolve_frame_path(dir: &Path, file_path: &str) -> PathBuf {
    let p = dir.join(file_path);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

/// Loads `transforms_<split>.json` and its frames.
pub fn load_nerf_synthetic(dir: &Path, options: &LoadOptions) -> Result<MultiViewDataset> {
    let json_path = dir.join(format!("transforms_{}.json", options.split));
    let text = fs::read_to_string(&json_path).map_err(|_| Error::MissingFile(json_path.clone()))?;
    let transforms: TransformsFile = serde_json::from_str(&text).map_err(|e| Error::MalformedJson(format!("{}: {e}", json_path.display())))?;
    if transforms.frames.is_empty() {
        return Err(Error::MalformedJson(format!("{}: no frames", json_path.display())));
    }
    let images = transforms
        .frames
        .par_iter()
        .map(|f| load_image(&resolve_frame_path(dir, &f.file_path), options.background))
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = (images[0].width, images[0].height);
    let focal = Camera::focal_from_angle(transforms.camera_angle_x, w);
    let mut frames = Vec::with_capacity(images.len());
    for (f, image) in transforms.frames.iter().zip(images) {
        if (image.width, image.height) != (w, h) {
            return Err(Error::InconsistentResolution(format!(
                "{} is {}x{}, expected {w}x{h}",
                f.file_path, image.width, image.height
            )));
        }
        let camera = Camera::new(w, h, focal, f.transform_matrix, options.near, options.far)?;
        frames.push(Frame {
            camera,
            image,
            file_path: f.file_path.clone(),
        });
    }
    Ok(MultiViewDataset {
        frames,
        aabb: options.aabb,
        source: Some(dir.to_path_buf()),
    })
}

/// Writes a dataset in the same layout `load_nerf_synthetic` reads.
pub fn write_nerf_synthetic(dir: &Path, dataset: &MultiViewDataset, split: &str) -> Result<()> {
    let first = &dataset.frames[0].camera;
    let angle = 2.0 * (0.5 * first.width as f64 / first.focal).atan();
    fs::create_dir_all(dir.join(split))?;
    let mut frames = Vec::new();
    for (i, f) in dataset.frames.iter().enumerate() {
        let rel = format!("./{split}/r_{i}");
        f.image.save_png(&resolve_frame_path(dir, &rel))?;
        frames.push(TransformFrame {
            file_path: rel,
            transform_matrix: f.camera.pose,
        });
    }
    let json = serde_json::to_string_pretty(&TransformsFile {
        camera_angle_x: angle,
        frames,
    })
    .map_err(|e| Error::MalformedJson(e.to_string()))?;
    fs::write(dir.join(format!("transforms_{split}.json")), json)?;
    Ok(())
}

/// Pixels of an image file, a NeRF-style dataset directory, or a directory of PNGs.
pub fn load_pixels(path: &Path, background: ColorPoint) -> Result<Vec<ColorPoint>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    if path.is_file() {
        return Ok(load_image(path, background)?.pixels);
    }
    if path.join("transforms_train.json").exists() {
        let ds = load_nerf_synthetic(
            path,
            &LoadOptions {
                background,
                ..LoadOptions::default()
            },
        )?;
        return Ok(ds.frames.into_iter().flat_map(|f| f.image.pixels).collect());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingFile(path.join("*.png")));
    }
    let images = files
        .par_iter()
        .map(|p| load_image(p, background))
        .collect::<Result<Vec<_>>>()?;
    Ok(images.into_iter().flat_map(|i| i.pixels).collect())
}

/// Non-tensor checkpoint contents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub cameras: Vec<Camera>,
    /// Original palette indices of layers 1..K, bottom to top.
    pub order: Vec<usize>,
    pub config: Option<TrainConfig>,
    pub initial_palette: Option<PaletteJson>,
    /// Ray samples used when rendering scene checkpoints.
    pub samples: usize,
    pub blend: BlendMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub field: Field<f32>,
    pub palette: Palette,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    mode: Mode,
    resolution: Vec<usize>,
    #[serde(rename = "K")]
    k: usize,
    aabb: Option<Aabb>,
    palette: PaletteJson,
    learnable: Vec<bool>,
    tensors: Vec<TensorInfo>,
    checksum: String,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn mode(&self) -> Mode {
        match self.field {
            Field::Image(_) => Mode::Image,
            Field::Scene(_) => Mode::Scene,
        }
    }

    /// Container bytes: magic, u32 LE header length, JSON header, then the
    /// tensors as little-endian f32 in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.palette.layer_count();
        let (resolution, aabb, tensors, data): (Vec<usize>, Option<Aabb>, Vec<TensorInfo>, Vec<&[f32]>) = match &self.field {
            Field::Image(f) => (
                vec![f.height(), f.width()],
                None,
                vec![TensorInfo {
                    name: "opacity_logits".into(),
                    shape: vec![f.height(), f.width(), k],
                }],
                vec![f.opacity_logits()],
            ),
            Field::Scene(f) => {
                let r = f.resolution();
                (
                    r.to_vec(),
                    Some(*f.aabb()),
                    vec![
                        TensorInfo {
                            name: "density_logits".into(),
                            shape: r.to_vec(),
                        },
                        TensorInfo {
                            name: "opacity_logits".into(),
                            shape: vec![r[0], r[1], r[2], k],
                        },
                    ],
                    vec![f.density_logits(), f.opacity_logits()],
                )
            }
        };
        let payload: Vec<u8> = data.iter().flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes())).collect();
        let header = Header {
            version: CHECKPOINT_VERSION,
            mode: self.mode(),
            resolution,
            k,
            aabb,
            palette: self.palette.to_json(),
            learnable: self.palette.learnable().to_vec(),
            tensors,
            checksum: hex::encode(Sha256::digest(&payload)),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let value: serde_json::Value = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&format!("header: {e}")))?;
        let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| corrupt("missing version"))? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(value).map_err(|e| corrupt(&format!("header: {e}")))?;
        let payload = &body[hlen..];
        if hex::encode(Sha256::digest(payload)) != header.checksum {
            return Err(corrupt("payload checksum mismatch"));
        }
        let mut at = 0;
        let mut tensors = Vec::new();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let end = at + 4 * n;
            if end > payload.len() {
                return Err(corrupt("payload shorter than declared tensors"));
            }
            tensors.push(
                payload[at..end]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect::<Vec<f32>>(),
            );
            at = end;
        }
        if at != payload.len() {
            return Err(corrupt("trailing payload bytes"));
        }
        let palette = Palette::from_json(&header.palette)?.with_learnable(header.learnable.clone())?;
        let field = match (header.mode, header.resolution.as_slice(), tensors.len()) {
            (Mode::Image, &[h, w], 1) => Field::Image(GridField2D::from_parts(h, w, header.k, tensors.remove(0))?),
            (Mode::Scene, &[x, y, z], 2) => {
                let aabb = header.aabb.ok_or_else(|| corrupt("scene checkpoint without aabb"))?;
                let opacity = tensors.remove(1);
                let density = tensors.remove(0);
                Field::Scene(GridField3D::from_parts([x, y, z], header.k, aabb, density, opacity)?)
            }
            _ => return Err(corrupt("tensor layout does not match mode")),
        };
        if palette.layer_count() != header.k {
            return Err(corrupt("palette size does not match K"));
        }
        Ok(Checkpoint {
            field,
            palette,
            meta: header.meta,
        })
    }
}

impl Checkpoint {
    /// Packs a finished fit; the palette is clamped to [0,1].
    pub fn from_fit(fit: &FitOutput, config: &TrainConfig, cameras: Vec<Camera>) -> Self {
        Checkpoint {
            field: fit.state.field.clone(),
            palette: fit.state.palette.exported(),
            meta: CheckpointMeta {
                cameras,
                order: fit.state.order.as_slice().to_vec(),
                config: Some(config.clone()),
                initial_palette: Some(fit.initial_palette.exported().to_json()),
                samples: config.samples,
                blend: config.ablation.blend_mode(),
            },
        }
    }

    /// Available views: one for images, one per stored camera for scenes.
    pub fn view_count(&self) -> usize {
        match self.field {
            Field::Image(_) => 1,
            Field::Scene(_) => self.meta.cameras.len(),
        }
    }

    /// Native (width, height) of a view.
    pub fn view_size(&self, view: usize) -> Result<(usize, usize)> {
        if view >= self.view_count() {
            return Err(Error::IndexOutOfRange {
                index: view,
                len: self.view_count(),
            });
        }
        Ok(match &self.field {
            Field::Image(f) => (f.width(), f.height()),
            Field::Scene(_) => (self.meta.cameras[view].width, self.meta.cameras[view].height),
        })
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            samples: if self.meta.samples >= 2 { self.meta.samples } else { DEFAULT_SAMPLES },
            stratified: false,
            seed: 0,
            mode: self.meta.blend,
        }
    }

    /// Renders a scene checkpoint from an arbitrary camera.
    pub fn render_camera(&self, camera: &Camera, palette: &Palette) -> Result<RenderedImage> {
        match &self.field {
            Field::Scene(f) => render_image(camera, f, palette.colors(), &self.render_options()),
            Field::Image(_) => Err(Error::InvalidArgument("image checkpoints have no cameras".into())),
        }
    }

    /// Renders stored view `view`, optionally at a smaller width. Images are
    /// downscaled by point sampling so every output pixel is an exact
    /// composite of one source pixel.
    pub fn render_view(&self, view: usize, width: Option<usize>, palette: &Palette) -> Result<RenderedImage> {
        let (native_w, native_h) = self.view_size(view)?;
        let w = width.unwrap_or(native_w);
        if w == 0 || w > native_w {
            return Err(Error::InvalidArgument(format!("width must be in 1..={native_w}, got {w}")));
        }
        match &self.field {
            Field::Scene(_) => self.render_camera(&self.meta.cameras[view].resized(w), palette),
            Field::Image(f) => {
                let full = render_image_2d(f, palette.colors(), self.meta.blend)?;
                if w == native_w {
                    return Ok(full);
                }
                let h = ((native_h as f64 * w as f64 / native_w as f64).round() as usize).max(1);
                let k = full.k;
                let mut out = RenderedImage {
                    width: w,
                    height: h,
                    k,
                    rgb: Vec::with_capacity(w * h),
                    layer_weights: Vec::with_capacity(w * h * (k + 1)),
                    opaque: Vec::with_capacity(w * h * k),
                };
                for r in 0..h {
                    let sr = ((r as f64 + 0.5) * native_h as f64 / h as f64) as usize;
                    for c in 0..w {
                        let sc = ((c as f64 + 0.5) * native_w as f64 / w as f64) as usize;
                        let i = sr.min(native_h - 1) * native_w + sc.min(native_w - 1);
                        out.rgb.push(full.rgb[i]);
                        out.layer_weights.extend_from_slice(&full.layer_weights[i * (k + 1)..(i + 1) * (k + 1)]);
                        out.opaque.extend_from_slice(&full.opaque[i * k..(i + 1) * k]);
                    }
                }
                Ok(out)
            }
        }
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    Ok(fs::write(path, checkpoint.to_bytes())?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Checkpoint::from_bytes(&bytes)
}

/// Ground truth for an image: palette plus one alpha map per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImageSpec {
    pub width: usize,
    pub height: usize,
    pub palette: Palette,
    /// K row-major alpha maps, bottom layer first.
    pub layers: Vec<Vec<f64>>,
}

fn smooth_edge(signed_distance: f64, softness: f64) -> f64 {
    let t = (0.5 - signed_distance / softness).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl SyntheticImageSpec {
    /// Navy background under yellow, red, green and near-white layers whose
    /// areas shrink from bottom to top; shape placement depends on `seed`.
    pub fn demo(width: usize, height: usize, seed: u64) -> Self {
        let palette = Palette::new(vec![
            ColorPoint::new(0.08, 0.10, 0.22),
            ColorPoint::new(0.90, 0.85, 0.20),
            ColorPoint::new(0.85, 0.20, 0.25),
            ColorPoint::new(0.20, 0.70, 0.35),
            ColorPoint::new(0.95, 0.95, 0.95),
        ])
        .expect("valid palette");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (width as f64, height as f64);
        let s = w.min(h);
        let mut jitter = |v: f64| v + rng.gen_range(-0.03..0.03) * s;
        let soft = (s / 40.0).max(1.0);
        // Each shape: signed distance (negative inside) at pixel center.
        let disk = |cx: f64, cy: f64, r: f64| move |x: f64, y: f64| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r;
        let rect = |x0: f64, y0: f64, x1: f64, y1: f64| {
            move |x: f64, y: f64| {
                let dx = (x0 - x).max(x - x1);
                let dy = (y0 - y).max(y - y1);
                if dx > 0.0 && dy > 0.0 {
                    (dx * dx + dy * dy).sqrt()
                } else {
                    dx.max(dy)
                }
            }
        };
        let shapes: Vec<Box<dyn Fn(f64, f64) -> f64>> = vec![
            Box::new(disk(jitter(0.38 * w), jitter(0.42 * h), 0.30 * s)),
            Box::new(rect(jitter(0.52 * w), jitter(0.45 * h), jitter(0.92 * w), jitter(0.88 * h))),
            Box::new(disk(jitter(0.30 * w), jitter(0.75 * h), 0.17 * s)),
            Box::new(disk(jitter(0.72 * w), jitter(0.24 * h), 0.11 * s)),
        ];
        let layers = shapes
            .iter()
            .map(|sd| {
                (0..height * width)
                    .map(|i| smooth_edge(sd((i % width) as f64 + 0.5, (i / width) as f64 + 0.5), soft))
                    .collect()
            })
            .collect();
        Self {
            width,
            height,
            palette,
            layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image: ImageData,
    pub layers: Vec<Vec<f64>>,
    pub palette: Palette,
}

/// Per-pixel ordered composite of the layers described by `spec`.
pub fn generate_synthetic_2d(spec: &SyntheticImageSpec) -> Result<SyntheticImage> {
    let k = spec.palette.layer_count();
    if spec.layers.len() != k {
        return Err(Error::LengthMismatch {
            expected: k,
            got: spec.layers.len(),
        });
    }
    let n = spec.width * spec.height;
    if let Some(bad) = spec.layers.iter().find(|l| l.len() != n) {
        return Err(Error::LengthMismatch {
            expected: n,
            got: bad.len(),
        });
    }
    let pixels = (0..n)
        .map(|p| {
            let alphas: Vec<f64> = spec.layers.iter().map(|l| l[p]).collect();
            composite_direct(spec.palette.colors(), &AlphaVector::from_layers(&alphas)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticImage {
        image: ImageData::new(spec.width, spec.height, pixels)?,
        layers: spec.layers.clone(),
        palette: spec.palette.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Shape {
    /// Negative inside.
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>().sqrt() - radius,
            Shape::Box { min, max } => {
                let d: Vec<f64> = (0..3).map(|a| (min[a] - p[a]).max(p[a] - max[a])).collect();
                let outside = d.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                outside + d.iter().cloned().fold(f64::MIN, f64::max).min(0.0)
            }
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.signed_distance(p) <= 0.0
    }
}

/// A solid primitive drawn with palette layer `layer` (1..=K).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub palette: Palette,
    pub primitives: Vec<Primitive>,
    pub aabb: Aabb,
    /// Nodes per axis of the ground-truth grid.
    pub resolution: usize,
    pub samples: usize,
    pub seed: u64,
    /// Density logit inside and outside primitives.
    pub density_in: f64,
    pub density_out: f64,
    /// Magnitude of the layer logits.
    pub logit: f64,
}

impl SyntheticSceneSpec {
    /// A red sphere and a blue box over a white background.
    pub fn demo(resolution: usize) -> Self {
        Self {
            palette: Palette::new(vec![
                ColorPoint::WHITE,
                ColorPoint::new(0.90, 0.15, 0.15),
                ColorPoint::new(0.15, 0.25, 0.90),
            ])
            .expect("valid palette"),
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere {
                        center: [-0.3, 0.1, 0.15],
                        radius: 0.42,
                    },
                    layer: 1,
                },
                Primitive {
                    shape: Shape::Box {
                        min: [0.05, -0.55, -0.45],
                        max: [0.6, 0.2, 0.2],
                    },
                    layer: 2,
                },
            ],
            aabb: Aabb::cube(1.0),
            resolution,
            samples: 128,
            seed: 0,
            density_in: 20.0,
            density_out: -10.0,
            logit: 10.0,
        }
    }

    /// Grid with high density inside primitives. Every node carries the layer
    /// of the primitive containing it (later ones win) or else of the nearest
    /// one, so interpolation near surfaces does not mix in other layers.
    pub fn ground_truth_field(&self) -> Result<GridField3D<f32>> {
        let k = self.palette.layer_count();
        if let Some(p) = self.primitives.iter().find(|p| p.layer == 0 || p.layer > k) {
            return Err(Error::IndexOutOfRange { index: p.layer, len: k + 1 });
        }
        GridField3D::from_fn([self.resolution; 3], k, self.aabb, |x| {
            let mut logits = vec![-self.logit; k];
            let mut density = self.density_out;
            let mut best: Option<(f64, usize)> = None;
            for p in &self.primitives {
                let d = p.shape.signed_distance(x);
                if d <= 0.0 {
                    density = self.density_in;
                    best = Some((f64::MIN, p.layer));
                } else if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, p.layer));
                }
            }
            if let Some((_, layer)) = best {
                logits[layer - 1] = self.logit;
            }
            (density, logits)
        })
    }
}

/// Cameras on a ring around the origin looking at it, alternating above
/// and below the equator.
pub fn orbit_cameras(count: usize, radius: f64, size: usize, focal: f64, phase: f64) -> Result<Vec<Camera>> {
    (0..count)
        .map(|i| {
            let theta = phase + 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            let elevation: f64 = if i % 2 == 0 { 0.35 } else { -0.2 };
            let eye = [
                radius * elevation.cos() * theta.sin(),
                radius * elevation.sin(),
                radius * elevation.cos() * theta.cos(),
            ];
            Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], size, size, focal, 0.1, 2.0 * radius)
        })
        .collect()
}

/// Renders ground-truth views of a hand-built field with the project's renderer.
pub fn generate_synthetic_3d(spec: &SyntheticSceneSpec, cameras: &[Camera]) -> Result<MultiViewDataset> {
    let field = spec.ground_truth_field()?;
    let options = RenderOptions {
        samples: spec.samples,
        stratified: false,
        seed: spec.seed,
        mode: BlendMode::AlphaBlend,
    };
    let frames = cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let img = render_image(cam, &field, spec.palette.colors(), &options)?;
            Ok(Frame {
                camera: cam.clone(),
                image: ImageData::new(cam.width, cam.height, img.rgb)?,
                file_path: format!("./train/r_{i}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiViewDataset {
        frames,
        aabb: spec.aabb,
        source: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_8_and_16_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ImageData::new(5, 3, (0..15).map(|_| ColorPoint::new(rng.gen(), rng.gen(), rng.gen())).collect()).unwrap();
        let back = decode_image(&img.to_png(), ColorPoint::WHITE).unwrap();
        assert_eq!((back.width, back.height), (5, 3));
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!(a.max_abs_diff(*b) <= 0.5 / 255.0 + 1e-12);
        }
        let back16 = decode_image(&img.to_png16(), ColorPoint::WHITE).unwrap();
        for (a, b) in img.pixels.iter().zip(&back16.pixels) {
            assert!(a.max_abs_diff(*b) <= 1.0 / 65535.0);
        }
        // No alpha: values are exactly k/255.
        let exact = ImageData::new(1, 1, vec![ColorPoint::from_rgb8([3, 128, 255])]).unwrap();
        assert_eq!(decode_image(&exact.to_png(), ColorPoint::BLACK).unwrap(), exact);
        assert!(matches!(decode_image(b"not a png", ColorPoint::WHITE), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn alpha_is_composited_on_background() {
        let buf = ImageBuffer::<image::Rgba<u8>, _>::from_raw(2, 1, vec![255, 0, 0, 0, 0, 0, 255, 255]).unwrap();
        let bytes = encode(DynamicImage::ImageRgba8(buf));
        let img = decode_image(&bytes, ColorPoint::WHITE).unwrap();
        assert_eq!(img.pixels[0], ColorPoint::WHITE);
        assert_eq!(img.pixels[1], ColorPoint::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let field = GridField3D::<f32>::allocate([3, 4, 2], 2, Aabb::cube(1.0), -1.0, -2.0, 5).unwrap();
        let palette = Palette::new(vec![ColorPoint::new(0.1, 0.2, 0.3), ColorPoint::new(0.7, 0.1, 0.0), ColorPoint::new(1.0 / 3.0, 0.5, 0.9)]).unwrap();
        let ck = Checkpoint {
            field: Field::Scene(field),
            palette: palette.clone(),
            meta: CheckpointMeta {
                cameras: orbit_cameras(2, 3.0, 8, 8.0, 0.1).unwrap(),
                order: vec![2, 1],
                config: Some(TrainConfig::default()),
                initial_palette: Some(palette.to_json()),
                samples: 64,
                blend: BlendMode::AlphaBlend,
            },
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);

        let image = Checkpoint {
            field: Field::Image(GridField2D::allocate(3, 2, 2, 0.5, 1).unwrap()),
            ..ck.clone()
        };
        assert_eq!(Checkpoint::from_bytes(&image.to_bytes()).unwrap(), image);

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::CorruptCheckpoint(_))));
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));

        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap().replacen("\"version\":1", "\"version\":2", 1);
        let mut bumped = bytes[..8].to_vec();
        bumped.extend((header.len() as u32).to_le_bytes());
        bumped.extend(header.as_bytes());
        bumped.extend(&bytes[12 + hlen..]);
        assert!(matches!(
            Checkpoint::from_bytes(&bumped),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn synthetic_2d_examples() {
        let bg = ColorPoint::new(0.0, 0.0, 0.3);
        let c1 = ColorPoint::new(0.9, 0.5, 0.1);
        let c2 = ColorPoint::new(0.1, 0.9, 0.1);
        let opaque = SyntheticImageSpec {
            width: 4,
            height: 3,
            palette: Palette::new(vec![bg, c1]).unwrap(),
            layers: vec![vec![1.0; 12]],
        };
        assert!(generate_synthetic_2d(&opaque).unwrap().image.pixels.iter().all(|p| *p == c1));

        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let spec = SyntheticImageSpec {
            width: 4,
            height: 4,
            palette: Palette::new(vec![bg, c1, c2]).unwrap(),
            layers: vec![vec![1.0; 16], checker.clone()],
        };
        let img = generate_synthetic_2d(&spec).unwrap().image;
        for (p, a) in img.pixels.iter().zip(&checker) {
            assert_eq!(*p, if *a == 1.0 { c2 } else { c1 });
        }

        let a = generate_synthetic_2d(&SyntheticImageSpec::demo(32, 32, 4)).unwrap();
        let b = generate_synthetic_2d(&SyntheticImageSpec::demo(32, 32, 4)).unwrap();
        assert_eq!(a, b);
        assert!(a.layers.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn demo_layers_have_pure_regions_and_shrink_upwards() {
        let spec = SyntheticImageSpec::demo(128, 128, 0);
        let img = generate_synthetic_2d(&spec).unwrap().image;
        for c in spec.palette.colors() {
            assert!(img.pixels.iter().any(|p| p.max_abs_diff(*c) < 1e-12), "{c:?} never appears pure");
        }
        let areas: Vec<f64> = spec.layers.iter().map(|l| l.iter().sum()).collect();
        assert!(areas.windows(2).all(|w| w[0] > w[1]), "{areas:?}");
    }

    #[test]
    fn synthetic_3d_examples() {
        let mut spec = SyntheticSceneSpec::demo(16);
        spec.samples = 48;
        spec.primitives = vec![];
        let cams = orbit_cameras(2, 3.0, 8, 10.0, 0.0).unwrap();
        let empty = generate_synthetic_3d(&spec, &cams).unwrap();
        for f in &empty.frames {
            assert!(f.image.pixels.iter().all(|p| p.max_abs_diff(ColorPoint::WHITE) < 1e-3));
        }

        spec.primitives = vec![Primitive {
            shape: Shape::Sphere {
                center: [0.0; 3],
                radius: 0.5,
            },
            layer: 1,
        }];
        let front = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 9, 9, 12.0, 0.1, 6.0).unwrap();
        let ds = generate_synthetic_3d(&spec, &[front.clone()]).unwrap();
        let center = ds.frames[0].image.get(4, 4);
        assert!(center.max_abs_diff(spec.palette.colors()[1]) < 1e-3, "{center:?}");
        let corner = ds.frames[0].image.get(0, 0);
        assert!(corner.max_abs_diff(ColorPoint::WHITE) < 1e-3);
        assert_eq!(generate_synthetic_3d(&spec, &[front.clone()]).unwrap(), ds);
    }

    #[test]
    fn nerf_loader_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SyntheticSceneSpec::demo(12);
        spec.samples = 32;
        let cams = orbit_cameras(3, 3.0, 10, 12.0, 0.0).unwrap();
        let ds = generate_synthetic_3d(&spec, &cams).unwrap();
        write_nerf_synthetic(dir.path(), &ds, "train").unwrap();
        let loaded = load_nerf_synthetic(
            dir.path(),
            &LoadOptions {
                near: 0.1,
                far: 6.0,
                aabb: Aabb::cube(1.0),
                ..LoadOptions::default()
            },
        )
        .unwrap();
        assert_eq!(loaded.frames.len(), 3);
        for (a, b) in loaded.frames.iter().zip(&ds.frames) {
            assert!((a.camera.focal - b.camera.focal).abs() < 1e-9);
            assert_eq!(a.camera.pose, b.camera.pose);
            for (p, q) in a.image.pixels.iter().zip(&b.image.pixels) {
                assert!(p.max_abs_diff(*q) <= 0.5 / 255.0 + 1e-12);
            }
        }
        assert_eq!(load_pixels(dir.path(), ColorPoint::WHITE).unwrap().len(), 300);

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_nerf_synthetic(empty.path(), &LoadOptions::default()), Err(Error::MissingFile(_))));
        fs::write(empty.path().join("transforms_train.json"), "{\"frames\": 3}").unwrap();
        assert!(matches!(load_nerf_synthetic(empty.path(), &LoadOptions::default()), Err(Error::MalformedJson(_))));

        // Mixed resolutions are rejected.
        ImageData::filled(4, 4, ColorPoint::WHITE).save_png(&dir.path().join("train/r_1.png")).unwrap();
        assert!(matches!(
            load_nerf_synthetic(dir.path(), &LoadOptions::default()),
            Err(Error::InconsistentResolution(_))
        ));
    }
}
