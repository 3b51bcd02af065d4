//! Losses, the joint training loop over fields and palette, and gradient checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::ColorPoint;
use crate::colorhull::{
    build_hull, build_hull_jittered, prepare_hull_points, ConvexHull3, DEFAULT_DELTA_IN, DEFAULT_DELTA_OUT, DEFAULT_JITTER,
    MAX_HULL_POINTS,
};
use crate::compositor::sigmoid;
use crate::dataio::{Dataset, ImageData, MultiViewDataset};
use crate::error::{Error, Result};
use crate::field::{Aabb, Field, GridField2D, GridField3D, Scalar, DEFAULT_INIT_DENSITY, DEFAULT_INIT_LOGIT};
use crate::palette::{determine_order, init_palette, LayerOrder, Palette, PaletteInit, DEFAULT_LAYERS, TRAINING_RANGE};
use crate::renderer::{
    generate_ray, march, pixel_seed, render_pixel_with_grad, render_ray_with_grad, BlendMode, Camera, FieldGrads, OutputGrad,
    Ray, RayOutput, DEFAULT_SAMPLES,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;
/// Shift of the soft-L0 sigmoid: `σ(ηE - 6)`.
pub const SPARSITY_SHIFT: f64 = 6.0;

pub const GRADCHECK_TOL_2D: f64 = 1e-5;
pub const GRADCHECK_TOL_3D: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "2d")]
    Image,
    #[serde(rename = "3d")]
    Scene,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(Mode::Image),
            "3d" => Ok(Mode::Scene),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}` (expected 2d or 3d)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Image => "2d",
            Mode::Scene => "3d",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Order-free softmax weighting of the palette instead of alpha blending.
    DirectOpaque,
    /// Palette stays at its initial value.
    FixedPalette,
}

impl Ablation {
    pub fn blend_mode(self) -> BlendMode {
        match self {
            Ablation::DirectOpaque => BlendMode::DirectOpaque,
            _ => BlendMode::AlphaBlend,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "direct_opaque" => Ok(Ablation::DirectOpaque),
            "fixed_palette" => Ok(Ablation::FixedPalette),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ablation `{s}` (expected full, direct_opaque or fixed_palette)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub layers: usize,
    pub palette_init: String,
    pub iterations: usize,
    pub batch_rays: usize,
    pub learning_rate_fields: f64,
    pub learning_rate_palette: f64,
    pub lambda_hull: f64,
    pub lambda_sparsity: f64,
    pub eta: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Samples per ray (scene mode).
    pub samples: usize,
    /// Grid resolutions used in turn; the last is the final resolution.
    pub grid_levels: Vec<usize>,
    /// Steps at which the grid moves to the next level.
    pub upsample_at: Vec<usize>,
    pub init_density: f64,
    pub init_logit: f64,
    pub stratified: bool,
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Image,
            layers: DEFAULT_LAYERS,
            palette_init: "hull_simplify".into(),
            iterations: 2000,
            batch_rays: 4096,
            learning_rate_fields: 0.02,
            learning_rate_palette: 0.005,
            lambda_hull: 0.1,
            lambda_sparsity: 0.01,
            eta: 12.0,
            seed: 0,
            ablation: Ablation::Full,
            samples: DEFAULT_SAMPLES,
            grid_levels: vec![64],
            upsample_at: Vec::new(),
            init_density: DEFAULT_INIT_DENSITY,
            init_logit: DEFAULT_INIT_LOGIT,
            stratified: true,
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.lambda_hull < 0.0 || self.lambda_sparsity < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if self.layers < 1 {
            return Err(Error::InvalidK {
                k: self.layers,
                min: 1,
                max: usize::MAX,
            });
        }
        if self.batch_rays == 0 {
            return bad("batch_rays must be positive".into());
        }
        if self.learning_rate_fields < 0.0 || self.learning_rate_palette < 0.0 {
            return bad("learning rates must be non-negative".into());
        }
        if self.mode == Mode::Scene {
            if self.samples < 2 {
                return bad("samples must be at least 2".into());
            }
            if self.grid_levels.is_empty() || self.grid_levels.iter().any(|&r| r < 2) {
                return bad("grid_levels must list resolutions of at least 2".into());
            }
            if self.upsample_at.len() + 1 != self.grid_levels.len() {
                return bad("upsample_at needs one step per grid level after the first".into());
            }
            if self.grid_levels.windows(2).any(|w| w[1] < w[0]) || self.upsample_at.windows(2).any(|w| w[1] <= w[0]) {
                return bad("grid_levels and upsample_at must be increasing".into());
            }
        }
        self.palette_init.parse::<PaletteInit>()?;
        Ok(())
    }

    fn lr_scale(&self, step: usize) -> f64 {
        if self.cosine_decay && self.iterations > 0 {
            0.5 * (1.0 + (std::f64::consts::PI * step as f64 / self.iterations as f64).cos())
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub color: f64,
    pub hull: f64,
    pub sparsity: f64,
    pub total: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub color: f64,
    pub hull: f64,
    pub sparsity: f64,
    pub total: f64,
    pub psnr: f64,
}

/// `Σ ‖C - C_gt‖²` and its gradient `2(C - C_gt)` per pixel.
pub fn loss_color(rendered: &[ColorPoint], target: &[ColorPoint]) -> Result<(f64, Vec<ColorPoint>)> {
    if rendered.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rendered pixels vs {} targets",
            rendered.len(),
            target.len()
        )));
    }
    let mut loss = 0.0;
    let grads = rendered
        .iter()
        .zip(target)
        .map(|(c, t)| {
            let d = *c - *t;
            loss += d.norm_squared();
            d * 2.0
        })
        .collect();
    Ok((loss, grads))
}

#[inline]
pub fn soft_l0(e: f64, eta: f64) -> f64 {
    sigmoid(eta * e - SPARSITY_SHIFT)
}

#[inline]
fn soft_l0_grad(e: f64, eta: f64) -> f64 {
    let s = soft_l0(e, eta);
    eta * s * (1.0 - s)
}

/// `Σ σ(ηE - 6)` over all entries and its gradient.
pub fn loss_sparsity(opaque: &[f64], eta: f64) -> (f64, Vec<f64>) {
    let loss = opaque.iter().map(|&e| soft_l0(e, eta)).sum();
    (loss, opaque.iter().map(|&e| soft_l0_grad(e, eta)).collect())
}

pub fn loss_total(color: f64, hull: f64, sparsity: f64, config: &TrainConfig) -> LossBreakdown {
    LossBreakdown {
        color,
        hull,
        sparsity,
        total: color + config.lambda_hull * hull + config.lambda_sparsity * sparsity,
    }
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    -10.0 * mse.max(1e-20).log10()
}

pub fn psnr(rendered: &[ColorPoint], target: &[ColorPoint]) -> Result<f64> {
    let (sq, _) = loss_color(rendered, target)?;
    Ok(psnr_from_mse(sq / (3 * rendered.len().max(1)) as f64))
}

/// Adaptive-moment optimizer state for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step<S: Scalar>(&mut self, params: &mut [S], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            if lr != 0.0 {
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *p = S::from_f64(p.to_f64() - update);
            }
        }
    }
}

/// Rays or pixels of one optimization step, with their target colors.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    /// Image mode: row-major pixel indices.
    Pixels { indices: Vec<usize>, targets: Vec<ColorPoint> },
    /// Scene mode: rays with a sampling seed each.
    Rays {
        rays: Vec<Ray>,
        seeds: Vec<u64>,
        targets: Vec<ColorPoint>,
    },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Pixels { targets, .. } | Batch::Rays { targets, .. } => targets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Raw loss sums of a batch and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    /// Gradient of `color + λ_sparsity·sparsity` w.r.t. field tensors.
    pub field_grads: FieldGrads,
    /// Gradient of `color + λ_sparsity·sparsity` w.r.t. the palette.
    pub palette_data_grad: Vec<ColorPoint>,
    /// Gradient of the (unweighted) hull loss w.r.t. the palette.
    pub palette_hull_grad: Vec<ColorPoint>,
    pub psnr: f64,
}

impl Evaluation {
    pub fn max_abs_grad(&self) -> f64 {
        let f = self.field_grads.density.iter().chain(&self.field_grads.opacity).map(|g| g.abs());
        let p = self
            .palette_data_grad
            .iter()
            .chain(&self.palette_hull_grad)
            .flat_map(|c| c.to_array())
            .map(f64::abs);
        f.chain(p).fold(0.0, f64::max)
    }
}

/// Forward and backward pass of the full objective on one batch.
pub fn evaluate<S: Scalar>(
    field: &Field<S>,
    palette: &[ColorPoint],
    hull: &ConvexHull3,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<Evaluation> {
    let k = field.layer_count();
    if palette.len() != k + 1 {
        return Err(Error::LengthMismatch {
            expected: k + 1,
            got: palette.len(),
        });
    }
    let mode = config.ablation.blend_mode();
    let (eta, ls) = (config.eta, config.lambda_sparsity);
    let mut color_loss = 0.0;
    let mut sparsity_loss = 0.0;
    let mut grad_palette = vec![ColorPoint::BLACK; k + 1];

    let mut loss_grad = |out: &RayOutput, target: ColorPoint| {
        let d = out.color - target;
        color_loss += d.norm_squared();
        let mut opaque = Vec::with_capacity(k);
        for &e in &out.opaque {
            sparsity_loss += soft_l0(e, eta);
            opaque.push(ls * soft_l0_grad(e, eta));
        }
        OutputGrad { color: d * 2.0, opaque }
    };

    let field_grads = match (field, batch) {
        (Field::Image(f), Batch::Pixels { indices, targets }) => {
            if indices.len() != targets.len() {
                return Err(Error::ShapeMismatch("pixel indices vs targets".into()));
            }
            let mut grads = FieldGrads::zeros(0, f.opacity_logits().len());
            let mut logits = vec![0.0; k];
            for (&idx, &target) in indices.iter().zip(targets) {
                if idx >= f.pixel_count() {
                    return Err(Error::OutOfBounds(format!("pixel index {idx}")));
                }
                let src = &f.opacity_logits()[idx * k..(idx + 1) * k];
                for (l, s) in logits.iter_mut().zip(src) {
                    *l = s.to_f64();
                }
                render_pixel_with_grad(
                    &logits,
                    palette,
                    mode,
                    |o| loss_grad(o, target),
                    &mut grads.opacity[idx * k..(idx + 1) * k],
                    &mut grad_palette,
                );
            }
            grads
        }
        (Field::Scene(f), Batch::Rays { rays, seeds, targets }) => {
            if rays.len() != targets.len() || seeds.len() != targets.len() {
                return Err(Error::ShapeMismatch("rays vs seeds vs targets".into()));
            }
            let mut grads = FieldGrads::zeros(f.node_count(), f.opacity_logits().len());
            for ((ray, &seed), &target) in rays.iter().zip(seeds).zip(targets) {
                match march(ray, f, config.samples, config.stratified, seed) {
                    Ok(samples) => {
                        render_ray_with_grad(&samples, palette, mode, |o| loss_grad(o, target), &mut grads, &mut grad_palette);
                    }
                    Err(Error::NoIntersection) => {
                        let out = RayOutput::background(palette);
                        let g = loss_grad(&out, target);
                        grad_palette[0] = grad_palette[0] + g.color;
                    }
                    Err(e) => return Err(e),
                }
            }
            grads
        }
        _ => return Err(Error::ShapeMismatch("batch kind does not match field mode".into())),
    };

    let hull_loss = hull.hull_loss(palette, DEFAULT_DELTA_IN, DEFAULT_DELTA_OUT);
    let loss = loss_total(color_loss, hull_loss.loss, sparsity_loss, config);
    Ok(Evaluation {
        loss,
        field_grads,
        palette_data_grad: grad_palette,
        palette_hull_grad: hull_loss.gradient,
        psnr: psnr_from_mse(color_loss / (3 * batch.len().max(1)) as f64),
    })
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState<S: Scalar = f32> {
    pub field: Field<S>,
    pub palette: Palette,
    pub hull: ConvexHull3,
    pub order: LayerOrder,
    adam_density: Adam,
    adam_opacity: Adam,
    adam_palette: Adam,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(field: Field<S>, palette: Palette, hull: ConvexHull3, order: LayerOrder) -> Result<Self> {
        if field.layer_count() != palette.layer_count() {
            return Err(Error::LengthMismatch {
                expected: palette.layer_count(),
                got: field.layer_count(),
            });
        }
        let (nd, no) = match &field {
            Field::Image(f) => (0, f.opacity_logits().len()),
            Field::Scene(f) => (f.node_count(), f.opacity_logits().len()),
        };
        Ok(Self {
            adam_density: Adam::new(nd),
            adam_opacity: Adam::new(no),
            adam_palette: Adam::new(3 * palette.len()),
            field,
            palette,
            hull,
            order,
        })
    }

    fn reset_field_optimizer(&mut self) {
        let (nd, no) = match &self.field {
            Field::Image(f) => (0, f.opacity_logits().len()),
            Field::Scene(f) => (f.node_count(), f.opacity_logits().len()),
        };
        self.adam_density = Adam::new(nd);
        self.adam_opacity = Adam::new(no);
    }
}

/// One optimization step; returns the raw loss sums of the batch.
pub fn train_step<S: Scalar>(state: &mut TrainState<S>, batch: &Batch, config: &TrainConfig, step: usize) -> Result<(LossBreakdown, f64)> {
    let eval = evaluate(&state.field, state.palette.colors(), &state.hull, batch, config)?;
    for (name, v) in [("color", eval.loss.color), ("hull", eval.loss.hull), ("sparsity", eval.loss.sparsity)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                component: name,
                max_grad: eval.max_abs_grad(),
            });
        }
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    let scale = config.lr_scale(step);
    let lr_f = config.learning_rate_fields * scale;
    let mut density_grad = eval.field_grads.density;
    let mut opacity_grad = eval.field_grads.opacity;
    density_grad.iter_mut().chain(opacity_grad.iter_mut()).for_each(|g| *g *= inv);
    match &mut state.field {
        Field::Image(f) => state.adam_opacity.step(f.opacity_logits_mut(), &opacity_grad, lr_f),
        Field::Scene(f) => {
            state.adam_density.step(f.density_logits_mut(), &density_grad, lr_f);
            state.adam_opacity.step(f.opacity_logits_mut(), &opacity_grad, lr_f);
        }
    }

    if config.ablation != Ablation::FixedPalette {
        let learnable = state.palette.learnable().to_vec();
        let mut flat: Vec<f64> = state.palette.colors().iter().flat_map(|c| c.to_array()).collect();
        let mut grad = Vec::with_capacity(flat.len());
        for (i, (d, h)) in eval.palette_data_grad.iter().zip(&eval.palette_hull_grad).enumerate() {
            let g = *d * inv + *h * config.lambda_hull;
            let g = if learnable[i] { g } else { ColorPoint::BLACK };
            grad.extend(g.to_array());
        }
        let before = flat.clone();
        state.adam_palette.step(&mut flat, &grad, config.learning_rate_palette * scale);
        let (lo, hi) = TRAINING_RANGE;
        for (i, c) in state.palette.colors_mut().iter_mut().enumerate() {
            let src = if learnable[i] { &flat } else { &before };
            *c = ColorPoint::from_array([src[3 * i], src[3 * i + 1], src[3 * i + 2]]).clamp(lo, hi);
        }
    }
    Ok((eval.loss, eval.psnr))
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: TrainState<f32>,
    pub initial_palette: Palette,
    pub log: Vec<LogRecord>,
}

fn dataset_pixels(dataset: &Dataset) -> Vec<ColorPoint> {
    match dataset {
        Dataset::Image(img) => img.pixels.clone(),
        Dataset::Scene(ds) => ds.frames.iter().flat_map(|f| f.image.pixels.iter().copied()).collect(),
    }
}

/// Hull, initial palette (background first, layers in pixel-count order) and field.
pub fn initialize(dataset: &Dataset, config: &TrainConfig) -> Result<TrainState<f32>> {
    config.validate()?;
    let pixels = dataset_pixels(dataset);
    if pixels.is_empty() {
        return Err(Error::InvalidArgument("dataset has no pixels".into()));
    }
    let hull_points = prepare_hull_points(&pixels, MAX_HULL_POINTS, config.seed);
    let hull = build_hull_jittered(&hull_points, DEFAULT_JITTER, config.seed)?;
    let init: PaletteInit = config.palette_init.parse()?;
    let palette = init_palette(&init, Some(&hull), &pixels, config.layers, config.seed)?;
    let order = determine_order(&pixels, &palette);
    let palette = palette.reordered(&order);
    let k = config.layers;
    let field = match (dataset, config.mode) {
        (Dataset::Image(img), Mode::Image) => {
            Field::Image(GridField2D::allocate(img.height, img.width, k, config.init_logit, config.seed)?)
        }
        (Dataset::Scene(ds), Mode::Scene) => {
            let r = config.grid_levels[0];
            Field::Scene(GridField3D::allocate(
                [r; 3],
                k,
                ds.aabb,
                config.init_density,
                config.init_logit,
                config.seed,
            )?)
        }
        _ => return Err(Error::InvalidArgument(format!("dataset does not match mode {}", config.mode))),
    };
    TrainState::new(field, palette, hull, order)
}

/// Iterates over shuffled pixel or ray batches, epoch by epoch.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    batch: usize,
}

impl BatchSampler {
    fn new(total: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..total).collect(),
            cursor: total,
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch: batch.min(total),
        };
        if s.batch == total {
            s.cursor = 0;
        }
        s
    }

    fn next(&mut self) -> Vec<usize> {
        let total = self.order.len();
        if self.batch == total {
            return self.order.clone();
        }
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == total {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (self.batch - out.len()).min(total - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

fn image_batch(img: &ImageData, indices: Vec<usize>) -> Batch {
    let targets = indices.iter().map(|&i| img.pixels[i]).collect();
    Batch::Pixels { indices, targets }
}

fn ray_batch(ds: &MultiViewDataset, indices: &[usize], frame_seed: u64) -> Result<Batch> {
    let mut rays = Vec::with_capacity(indices.len());
    let mut seeds = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    let per_frame = ds.frames[0].image.pixels.len();
    for &g in indices {
        let frame = &ds.frames[g / per_frame];
        let p = g % per_frame;
        rays.push(generate_ray(&frame.camera, p / frame.camera.width, p % frame.camera.width)?);
        seeds.push(pixel_seed(frame_seed, g as u64));
        targets.push(frame.image.pixels[p]);
    }
    Ok(Batch::Rays { rays, seeds, targets })
}

/// Full pipeline: initialization followed by `iterations` training steps.
pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<FitOutput> {
    fit_with(dataset, config, |_| {})
}

/// [`fit`] with a callback receiving each step's log record.
pub fn fit_with(dataset: &Dataset, config: &TrainConfig, mut on_step: impl FnMut(&LogRecord)) -> Result<FitOutput> {
    let mut state = initialize(dataset, config)?;
    let initial_palette = state.palette.clone();
    let total = match dataset {
        Dataset::Image(img) => img.pixels.len(),
        Dataset::Scene(ds) => ds.frames.len() * ds.frames[0].image.pixels.len(),
    };
    let mut sampler = BatchSampler::new(total, config.batch_rays, config.seed ^ 0x5EED);
    let mut level = 0;
    let mut log = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        if config.mode == Mode::Scene && level < config.upsample_at.len() && step == config.upsample_at[level] {
            level += 1;
            if let Field::Scene(f) = &state.field {
                let r = config.grid_levels[level];
                state.field = Field::Scene(f.upsample([r; 3])?);
            }
            state.reset_field_optimizer();
        }
        let indices = sampler.next();
        let batch = match dataset {
            Dataset::Image(img) => image_batch(img, indices),
            Dataset::Scene(ds) => ray_batch(ds, &indices, pixel_seed(config.seed, step as u64))?,
        };
        let (loss, psnr) = train_step(&mut state, &batch, config, step)?;
        let record = LogRecord {
            step,
            color: loss.color,
            hull: loss.hull,
            sparsity: loss.sparsity,
            total: loss.total,
            psnr,
        };
        on_step(&record);
        log.push(record);
    }
    Ok(FitOutput {
        state,
        initial_palette,
        log,
    })
}

/// Largest relative error between analytic and central-difference gradients
/// over `samples` randomly chosen coordinates.
///
/// `f` returns the loss and its full analytic gradient.
pub fn gradcheck(mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>), params: &[f64], step: f64, samples: usize, seed: u64) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    let (_, analytic) = f(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, params.len(), samples.min(params.len()));
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in picks {
        x[i] = params[i] + step;
        let plus = f(&x).0;
        x[i] = params[i] - step;
        let minus = f(&x).0;
        x[i] = params[i];
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub mode: Mode,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub parameters: usize,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Random palette colors that sit clearly inside or outside the hull, so
/// that finite differences never straddle the boundary of the hull loss.
fn gradcheck_palette(hull: &ConvexHull3, n: usize, rng: &mut ChaCha8Rng) -> Vec<ColorPoint> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = ColorPoint::new(rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2));
        let clear = if hull.contains(c) {
            let margin = hull
                .facets()
                .iter()
                .map(|f| -f.signed_distance(&c.to_vec3()))
                .fold(f64::INFINITY, f64::min);
            let (near, _) = hull.nearest_vertex_distance(c);
            let second = hull
                .vertices()
                .iter()
                .map(|v| v.distance(c))
                .filter(|&d| d > near + 1e-3)
                .count()
                == hull.vertices().len() - 1;
            margin > 1e-2 && second
        } else {
            hull.distance_to_hull(c).map(|(d, _)| d > 1e-2).unwrap_or(false)
        };
        if clear {
            out.push(c);
        }
    }
    out
}

struct Toy {
    field: Field<f64>,
    palette: Vec<ColorPoint>,
    hull: ConvexHull3,
    batch: Batch,
    /// Flat indices (into [opacity.., density.., palette..]) the loss depends on.
    active: Vec<usize>,
}

fn toy_problem(mode: Mode, seed: u64) -> Result<Toy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hull_pts: Vec<ColorPoint> = (0..40)
        .map(|_| ColorPoint::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)))
        .collect();
    let hull = build_hull(&hull_pts)?;
    match mode {
        Mode::Image => {
            let k = 3;
            let mut f = GridField2D::<f64>::filled(4, 4, k, 0.0)?;
            f.opacity_logits_mut().iter_mut().for_each(|v| *v = rng.gen_range(-2.5..2.5));
            let palette = gradcheck_palette(&hull, k + 1, &mut rng);
            let indices: Vec<usize> = (0..16).collect();
            let targets = (0..16)
                .map(|_| ColorPoint::new(rng.gen(), rng.gen(), rng.gen()))
                .collect();
            let n = f.opacity_logits().len();
            Ok(Toy {
                field: Field::Image(f),
                palette,
                hull,
                batch: Batch::Pixels { indices, targets },
                active: (0..n + 3 * (k + 1)).collect(),
            })
        }
        Mode::Scene => {
            let k = 2;
            let aabb = Aabb::cube(1.0);
            let f = GridField3D::<f64>::from_fn([8; 3], k, aabb, |_| {
                (rng.gen_range(-1.0..1.5), (0..k).map(|_| rng.gen_range(-2.5..2.5)).collect())
            })?;
            let palette = gradcheck_palette(&hull, k + 1, &mut rng);
            let mut rays = Vec::new();
            for eye in [[0.3, 0.4, 3.0], [3.0, -0.2, 0.5]] {
                let cam = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], 6, 6, 5.0, 0.1, 8.0)?;
                for r in 0..6 {
                    for c in 0..6 {
                        rays.push(generate_ray(&cam, r, c)?);
                    }
                }
            }
            let seeds: Vec<u64> = (0..rays.len() as u64).map(|i| pixel_seed(seed, i)).collect();
            let targets = rays
                .iter()
                .map(|_| ColorPoint::new(rng.gen(), rng.gen(), rng.gen()))
                .collect();
            let samples = 16;
            let mut touched = vec![false; f.node_count()];
            for (ray, &s) in rays.iter().zip(&seeds) {
                if let Ok(rs) = march(ray, &f, samples, true, s) {
                    for l in &rs.lookups {
                        for (c, w) in l.corners.iter().zip(l.weights) {
                            if w > 0.0 {
                                touched[*c] = true;
                            }
                        }
                    }
                }
            }
            let no = f.opacity_logits().len();
            let nd = f.node_count();
            let mut active = Vec::new();
            for (node, _) in touched.iter().enumerate().filter(|(_, &t)| t) {
                active.extend((0..k).map(|i| node * k + i));
                active.push(no + node);
            }
            active.extend((0..3 * (k + 1)).map(|i| no + nd + i));
            Ok(Toy {
                field: Field::Scene(f),
                palette,
                hull,
                batch: Batch::Rays { rays, seeds, targets },
                active,
            })
        }
    }
}

fn flatten(field: &Field<f64>, palette: &[ColorPoint]) -> Vec<f64> {
    let mut out = Vec::new();
    match field {
        Field::Image(f) => out.extend_from_slice(f.opacity_logits()),
        Field::Scene(f) => {
            out.extend_from_slice(f.opacity_logits());
            out.extend_from_slice(f.density_logits());
        }
    }
    out.extend(palette.iter().flat_map(|c| c.to_array()));
    out
}

fn unflatten(field: &mut Field<f64>, palette: &mut [ColorPoint], flat: &[f64]) {
    let mut at = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&flat[at..at + dst.len()]);
        at += dst.len();
    };
    match field {
        Field::Image(f) => take(f.opacity_logits_mut()),
        Field::Scene(f) => {
            take(f.opacity_logits_mut());
            take(f.density_logits_mut());
        }
    }
    for c in palette.iter_mut() {
        let mut a = [0.0; 3];
        take(&mut a);
        *c = ColorPoint::from_array(a);
    }
}

/// Gradient check of the full objective on a small random problem:
/// a 4×4 image with K=3, or an 8³ scene with K=2 probed along 72 rays.
/// `inject_fault` perturbs the analytic gradient to exercise the failure path.
pub fn gradcheck_model(mode: Mode, seed: u64, inject_fault: bool) -> Result<GradcheckReport> {
    let toy = toy_problem(mode, seed)?;
    let config = TrainConfig {
        mode,
        samples: 16,
        stratified: true,
        ..TrainConfig::default()
    };
    let full = flatten(&toy.field, &toy.palette);
    let active = toy.active.clone();
    let params: Vec<f64> = active.iter().map(|&i| full[i]).collect();
    let mut field = toy.field.clone();
    let mut palette = toy.palette.clone();
    let mut error = None;
    let objective = |x: &[f64]| {
        let mut flat = full.clone();
        for (&i, &v) in active.iter().zip(x) {
            flat[i] = v;
        }
        unflatten(&mut field, &mut palette, &flat);
        match evaluate(&field, &palette, &toy.hull, &toy.batch, &config) {
            Ok(eval) => {
                let mut grad = eval.field_grads.opacity.clone();
                grad.extend_from_slice(&eval.field_grads.density);
                for (d, h) in eval.palette_data_grad.iter().zip(&eval.palette_hull_grad) {
                    grad.extend((*d + *h * config.lambda_hull).to_array());
                }
                let mut picked: Vec<f64> = active.iter().map(|&i| grad[i]).collect();
                if inject_fault {
                    for g in picked.iter_mut() {
                        *g *= 1.01;
                    }
                }
                (eval.loss.total, picked)
            }
            Err(e) => {
                error.get_or_insert(e);
                (f64::NAN, vec![f64::NAN; x.len()])
            }
        }
    };
    let checked = if mode == Mode::Scene { 64 } else { params.len() };
    let err = gradcheck(objective, &params, 1e-4, checked, seed);
    if let Some(e) = error {
        return Err(e);
    }
    Ok(GradcheckReport {
        mode,
        max_relative_error: err,
        tolerance: if mode == Mode::Scene { GRADCHECK_TOL_3D } else { GRADCHECK_TOL_2D },
        parameters: params.len(),
        checked: checked.min(params.len()),
    })
}

/// Mean of `σ(ηE - 6)` over all pixels and layers of a rendered image.
pub fn mean_soft_l0(opaque: &[f64], eta: f64) -> f64 {
    opaque.iter().map(|&e| soft_l0(e, eta)).sum::<f64>() / opaque.len().max(1) as f64
}

/// Mean over pixels of the average pairwise minimum of layer weights.
pub fn layer_overlap(layer_weights: &[f64], k_plus_one: usize) -> f64 {
    let pairs = (k_plus_one * (k_plus_one - 1) / 2).max(1) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for w in layer_weights.chunks(k_plus_one) {
        let mut s = 0.0;
        for i in 0..k_plus_one {
            for j in i + 1..k_plus_one {
                s += w[i].min(w[j]);
            }
        }
        total += s / pairs;
        count += 1;
    }
    total / count.max(1) as f64
}
