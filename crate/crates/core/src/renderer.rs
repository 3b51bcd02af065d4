//! Rays, marching, and layer-compositing volume rendering with its adjoint.
//!
//! Each sample carries a blended color `r_j = Σ_i W_ji c_i`. Sample weights
//! are `ω_j = T_j (1 - exp(-θ_j Δ_j))` and the transmittance left after the
//! last sample goes to the background color, so the per-layer weights `A_i`
//! of a ray always sum to one and `C = Σ_i A_i c_i` exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::ColorPoint;
use crate::compositor::{blend_weights_into, blend_weights_vjp, direct_weights_into, direct_weights_vjp, sigmoid, softplus};
use crate::error::{Error, Result};
use crate::field::{Aabb, GridField2D, GridField3D, Scalar, Trilinear};

pub const DEFAULT_SAMPLES: usize = 128;
const SLAB_EPS: f64 = 1e-9;
const ORTHONORMAL_TOL: f64 = 1e-5;

/// How per-layer logits become mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// Ordered over-compositing of sigmoid opacities.
    #[default]
    AlphaBlend,
    /// Softmax over `[0, l_1..l_K]`; the weights double as opacities.
    DirectOpaque,
}

/// Pinhole camera; `pose` is camera-to-world with the camera looking down `-z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub pose: [[f64; 4]; 4],
    pub near: f64,
    pub far: f64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    pub fn new(width: usize, height: usize, focal: f64, pose: [[f64; 4]; 4], near: f64, far: f64) -> Result<Self> {
        let cam = Self {
            width,
            height,
            focal,
            pose,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera resolution must be positive".into()));
        }
        if !(self.focal > 0.0) {
            return Err(Error::InvalidArgument(format!("focal {} must be positive", self.focal)));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!("bad near/far {}..{}", self.near, self.far)));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|r| self.pose[r][i] * self.pose[r][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > ORTHONORMAL_TOL {
                    return Err(Error::InvalidArgument("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// Focal length in pixels from a horizontal field of view.
    pub fn focal_from_angle(camera_angle_x: f64, width: usize) -> f64 {
        0.5 * width as f64 / (0.5 * camera_angle_x).tan()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: usize,
        height: usize,
        focal: f64,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let back = normalize(sub(eye, target));
        let right = cross(up, back);
        if dot(right, right) < 1e-18 {
            return Err(Error::InvalidArgument("up vector parallel to view direction".into()));
        }
        let right = normalize(right);
        let true_up = cross(back, right);
        let mut pose = [[0.0; 4]; 4];
        for r in 0..3 {
            pose[r] = [right[r], true_up[r], back[r], eye[r]];
        }
        pose[3] = [0.0, 0.0, 0.0, 1.0];
        Self::new(width, height, focal, pose, near, far)
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Same view at a new width; height and focal scale along.
    pub fn resized(&self, width: usize) -> Camera {
        let s = width as f64 / self.width as f64;
        Camera {
            width,
            height: ((self.height as f64 * s).round() as usize).max(1),
            focal: self.focal * s,
            ..self.clone()
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }

    /// Restricts `[t_near, t_far]` to the box with a slab test; `None` on a miss.
    pub fn clip(&self, aabb: &Aabb) -> Option<Ray> {
        let (mut t0, mut t1) = (self.t_near, self.t_far);
        for a in 0..3 {
            let (o, d) = (self.origin[a], self.direction[a]);
            if d.abs() < 1e-15 {
                if o < aabb.min[a] - SLAB_EPS || o > aabb.max[a] + SLAB_EPS {
                    return None;
                }
            } else {
                let ta = (aabb.min[a] - o) / d;
                let tb = (aabb.max[a] - o) / d;
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        (t1 - t0 > SLAB_EPS).then_some(Ray {
            t_near: t0,
            t_far: t1,
            ..*self
        })
    }
}

pub fn generate_ray(camera: &Camera, row: usize, col: usize) -> Result<Ray> {
    if row >= camera.height || col >= camera.width {
        return Err(Error::OutOfBounds(format!(
            "pixel ({row},{col}) outside {}x{}",
            camera.height, camera.width
        )));
    }
    let dc = [
        (col as f64 + 0.5 - camera.width as f64 / 2.0) / camera.focal,
        -(row as f64 + 0.5 - camera.height as f64 / 2.0) / camera.focal,
        -1.0,
    ];
    let p = &camera.pose;
    let dw = std::array::from_fn(|r| p[r][0] * dc[0] + p[r][1] * dc[1] + p[r][2] * dc[2]);
    Ok(Ray {
        origin: camera.origin(),
        direction: normalize(dw),
        t_near: camera.near,
        t_far: camera.far,
    })
}

pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels.iter().map(|&(r, c)| generate_ray(camera, r, c)).collect()
}

/// Seed of one pixel's sampling jitter; independent of evaluation order.
pub fn pixel_seed(frame_seed: u64, pixel_index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(frame_seed ^ mix(pixel_index))
}

/// Samples along one clipped ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    /// θ_j = softplus(density logit).
    pub density: Vec<f64>,
    pub density_logits: Vec<f64>,
    /// M×K interpolated opacity logits.
    pub logits: Vec<f64>,
    pub lookups: Vec<Trilinear>,
    pub k: usize,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Samples with explicit densities and logits, not tied to a grid.
    pub fn from_values(delta: Vec<f64>, density: Vec<f64>, logits: Vec<f64>, k: usize) -> Result<Self> {
        let m = delta.len();
        if density.len() != m || logits.len() != m * k {
            return Err(Error::ShapeMismatch(format!(
                "{m} intervals, {} densities, {} logits for K={k}",
                density.len(),
                logits.len()
            )));
        }
        let mut t = Vec::with_capacity(m);
        let mut acc = 0.0;
        for d in &delta {
            t.push(acc + 0.5 * d);
            acc += d;
        }
        Ok(Self {
            t,
            delta,
            density_logits: vec![f64::NAN; m],
            density,
            logits,
            lookups: Vec::new(),
            k,
        })
    }
}

/// `M` uniform samples over the clipped ray, at interval midpoints or
/// jittered within each interval when `stratified`.
pub fn march<S: Scalar>(ray: &Ray, field: &GridField3D<S>, m: usize, stratified: bool, seed: u64) -> Result<RaySamples> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples per ray, got {m}")));
    }
    let clipped = ray.clip(field.aabb()).ok_or(Error::NoIntersection)?;
    let k = field.layer_count();
    let step = (clipped.t_far - clipped.t_near) / m as f64;
    let mut rng = stratified.then(|| ChaCha8Rng::seed_from_u64(seed));
    let mut s = RaySamples {
        t: Vec::with_capacity(m),
        delta: vec![step; m],
        density: Vec::with_capacity(m),
        density_logits: Vec::with_capacity(m),
        logits: vec![0.0; m * k],
        lookups: Vec::with_capacity(m),
        k,
    };
    for j in 0..m {
        let u = match rng.as_mut() {
            Some(r) => r.gen::<f64>(),
            None => 0.5,
        };
        let t = clipped.t_near + (j as f64 + u) * step;
        let lookup = field.trilinear(clipped.at(t))?;
        let d = field.interpolate(&lookup, &mut s.logits[j * k..(j + 1) * k]);
        s.t.push(t);
        s.density_logits.push(d);
        s.density.push(softplus(d));
        s.lookups.push(lookup);
    }
    Ok(s)
}

/// Color, per-layer weights `A_0..A_K` and opaque renders `E_1..E_K` of one ray or pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RayOutput {
    pub color: ColorPoint,
    pub layer_weights: Vec<f64>,
    pub opaque: Vec<f64>,
}

impl RayOutput {
    /// A ray that never meets the volume shows the background.
    pub fn background(palette: &[ColorPoint]) -> Self {
        let mut layer_weights = vec![0.0; palette.len()];
        layer_weights[0] = 1.0;
        Self {
            color: palette[0],
            layer_weights,
            opaque: vec![0.0; palette.len() - 1],
        }
    }
}

#[inline]
fn blend(mode: BlendMode, logits: &[f64], alphas: &mut [f64], weights: &mut [f64]) {
    match mode {
        BlendMode::AlphaBlend => blend_weights_into(logits, alphas, weights),
        BlendMode::DirectOpaque => {
            direct_weights_into(logits, weights);
            alphas.copy_from_slice(&weights[1..]);
        }
    }
}

/// Accumulates `∂L/∂logit` given gradients w.r.t. the weights and the opacities.
#[inline]
fn blend_vjp(mode: BlendMode, alphas: &[f64], weights: &[f64], grad_w: &mut [f64], grad_alpha: &[f64], grad_logits: &mut [f64]) {
    match mode {
        BlendMode::AlphaBlend => {
            blend_weights_vjp(alphas, weights, grad_w, grad_logits);
            for ((g, &ga), &a) in grad_logits.iter_mut().zip(grad_alpha).zip(alphas) {
                *g += ga * a * (1.0 - a);
            }
        }
        BlendMode::DirectOpaque => {
            for (gw, &ga) in grad_w[1..].iter_mut().zip(grad_alpha) {
                *gw += ga;
            }
            direct_weights_vjp(weights, grad_w, grad_logits);
        }
    }
}

#[inline]
fn mix(weights: &[f64], palette: &[ColorPoint]) -> ColorPoint {
    let mut c = ColorPoint::BLACK;
    for (w, p) in weights.iter().zip(palette) {
        c.r += w * p.r;
        c.g += w * p.g;
        c.b += w * p.b;
    }
    c
}

/// Intermediate values kept for the backward pass.
struct Tape {
    /// θ_j Δ_j
    optical: Vec<f64>,
    /// T_0..T_M
    trans: Vec<f64>,
    alphas: Vec<f64>,
    weights: Vec<f64>,
    colors: Vec<ColorPoint>,
}

fn forward(samples: &RaySamples, palette: &[ColorPoint], mode: BlendMode) -> (RayOutput, Tape) {
    let (m, k) = (samples.len(), samples.k);
    debug_assert_eq!(palette.len(), k + 1);
    let mut tape = Tape {
        optical: Vec::with_capacity(m),
        trans: Vec::with_capacity(m + 1),
        alphas: vec![0.0; m * k],
        weights: vec![0.0; m * (k + 1)],
        colors: Vec::with_capacity(m),
    };
    let mut out = RayOutput {
        color: ColorPoint::BLACK,
        layer_weights: vec![0.0; k + 1],
        opaque: vec![0.0; k],
    };
    let mut trans = 1.0;
    tape.trans.push(trans);
    for j in 0..m {
        let s = samples.density[j] * samples.delta[j];
        let alphas = &mut tape.alphas[j * k..(j + 1) * k];
        let weights = &mut tape.weights[j * (k + 1)..(j + 1) * (k + 1)];
        blend(mode, &samples.logits[j * k..(j + 1) * k], alphas, weights);
        let next = trans * (-s).exp();
        let omega = trans - next;
        let r = mix(weights, palette);
        out.color = out.color + r * omega;
        for (a, w) in out.layer_weights.iter_mut().zip(weights.iter()) {
            *a += omega * w;
        }
        for (e, a) in out.opaque.iter_mut().zip(alphas.iter()) {
            *e += omega * a;
        }
        tape.optical.push(s);
        tape.colors.push(r);
        trans = next;
        tape.trans.push(trans);
    }
    out.color = out.color + palette[0] * trans;
    out.layer_weights[0] += trans;
    (out, tape)
}

pub fn render_samples(samples: &RaySamples, palette: &[ColorPoint], mode: BlendMode) -> RayOutput {
    forward(samples, palette, mode).0
}

pub fn render_color(samples: &RaySamples, palette: &[ColorPoint], mode: BlendMode) -> ColorPoint {
    render_samples(samples, palette, mode).color
}

pub fn render_opaque(samples: &RaySamples, mode: BlendMode) -> Vec<f64> {
    let palette = vec![ColorPoint::BLACK; samples.k + 1];
    render_samples(samples, &palette, mode).opaque
}

pub fn render_layer_weights(samples: &RaySamples, mode: BlendMode) -> Vec<f64> {
    let palette = vec![ColorPoint::BLACK; samples.k + 1];
    render_samples(samples, &palette, mode).layer_weights
}

/// Loss gradients with respect to one ray's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub color: ColorPoint,
    pub opaque: Vec<f64>,
}

/// Dense parameter gradients, laid out like the field tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    pub density: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl FieldGrads {
    pub fn zeros(density: usize, opacity: usize) -> Self {
        Self {
            density: vec![0.0; density],
            opacity: vec![0.0; opacity],
        }
    }

    pub fn clear(&mut self) {
        self.density.fill(0.0);
        self.opacity.fill(0.0);
    }
}

/// Renders one marched ray and backpropagates `loss_grad(output)` into the
/// grid nodes and palette.
pub fn render_ray_with_grad(
    samples: &RaySamples,
    palette: &[ColorPoint],
    mode: BlendMode,
    loss_grad: impl FnOnce(&RayOutput) -> OutputGrad,
    grads: &mut FieldGrads,
    grad_palette: &mut [ColorPoint],
) -> RayOutput {
    let (out, tape) = forward(samples, palette, mode);
    let g = loss_grad(&out);
    let (m, k) = (samples.len(), samples.k);

    for (gp, a) in grad_palette.iter_mut().zip(&out.layer_weights) {
        *gp = *gp + g.color * *a;
    }
    let gc_dot: Vec<f64> = palette.iter().map(|c| g.color.dot(*c)).collect();

    // Contributions of samples behind j (plus the background) to C and E.
    let mut c_after = palette[0] * tape.trans[m];
    let mut e_after = vec![0.0; k];
    let mut grad_w = vec![0.0; k + 1];
    let mut grad_alpha = vec![0.0; k];
    let mut grad_logits = vec![0.0; k];
    for j in (0..m).rev() {
        let omega = tape.trans[j] - tape.trans[j + 1];
        let t_next = tape.trans[j + 1];
        let alphas = &tape.alphas[j * k..(j + 1) * k];
        let weights = &tape.weights[j * (k + 1)..(j + 1) * (k + 1)];
        let r = tape.colors[j];

        let mut gs = g.color.dot(r * t_next - c_after);
        for i in 0..k {
            gs += g.opaque[i] * (t_next * alphas[i] - e_after[i]);
        }
        c_after = c_after + r * omega;
        for i in 0..k {
            e_after[i] += omega * alphas[i];
        }

        for (gw, gd) in grad_w.iter_mut().zip(&gc_dot) {
            *gw = omega * gd;
        }
        for (ga, ge) in grad_alpha.iter_mut().zip(&g.opaque) {
            *ga = omega * ge;
        }
        grad_logits.fill(0.0);
        blend_vjp(mode, alphas, weights, &mut grad_w, &grad_alpha, &mut grad_logits);

        let gd = gs * samples.delta[j] * sigmoid(samples.density_logits[j]);
        let lookup = &samples.lookups[j];
        for c in 0..8 {
            let (node, w) = (lookup.corners[c], lookup.weights[c]);
            if w == 0.0 {
                continue;
            }
            grads.density[node] += w * gd;
            let dst = &mut grads.opacity[node * k..(node + 1) * k];
            for (d, gl) in dst.iter_mut().zip(&grad_logits) {
                *d += w * gl;
            }
        }
        debug_assert!(tape.optical[j].is_finite());
    }
    out
}

/// Composite of one image-mode pixel.
pub fn render_pixel(logits: &[f64], palette: &[ColorPoint], mode: BlendMode) -> RayOutput {
    let k = logits.len();
    let mut alphas = vec![0.0; k];
    let mut weights = vec![0.0; k + 1];
    blend(mode, logits, &mut alphas, &mut weights);
    RayOutput {
        color: mix(&weights, palette),
        layer_weights: weights,
        opaque: alphas,
    }
}

/// Image-mode counterpart of [`render_ray_with_grad`]; accumulates into
/// `grad_logits` (length K) and `grad_palette`.
pub fn render_pixel_with_grad(
    logits: &[f64],
    palette: &[ColorPoint],
    mode: BlendMode,
    loss_grad: impl FnOnce(&RayOutput) -> OutputGrad,
    grad_logits: &mut [f64],
    grad_palette: &mut [ColorPoint],
) -> RayOutput {
    let out = render_pixel(logits, palette, mode);
    let g = loss_grad(&out);
    for (gp, a) in grad_palette.iter_mut().zip(&out.layer_weights) {
        *gp = *gp + g.color * *a;
    }
    let mut grad_w: Vec<f64> = palette.iter().map(|c| g.color.dot(*c)).collect();
    blend_vjp(mode, &out.opaque, &out.layer_weights, &mut grad_w, &g.opaque, grad_logits);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub samples: usize,
    pub stratified: bool,
    pub seed: u64,
    pub mode: BlendMode,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            stratified: false,
            seed: 0,
            mode: BlendMode::AlphaBlend,
        }
    }
}

/// Row-major per-pixel outputs of a full render.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub rgb: Vec<ColorPoint>,
    /// H×W×(K+1)
    pub layer_weights: Vec<f64>,
    /// H×W×K
    pub opaque: Vec<f64>,
}

impl RenderedImage {
    fn from_outputs(width: usize, height: usize, k: usize, outputs: Vec<RayOutput>) -> Self {
        let mut img = RenderedImage {
            width,
            height,
            k,
            rgb: Vec::with_capacity(outputs.len()),
            layer_weights: Vec::with_capacity(outputs.len() * (k + 1)),
            opaque: Vec::with_capacity(outputs.len() * k),
        };
        for o in outputs {
            img.rgb.push(o.color);
            img.layer_weights.extend(o.layer_weights);
            img.opaque.extend(o.opaque);
        }
        img
    }

    /// Weight map of layer `i` (0 = background), row-major.
    pub fn layer_map(&self, i: usize) -> Vec<f64> {
        self.layer_weights.iter().skip(i).step_by(self.k + 1).copied().collect()
    }

    /// Recomposites with another palette using the stored weights.
    pub fn recolored(&self, palette: &[ColorPoint]) -> Vec<ColorPoint> {
        self.layer_weights.chunks(self.k + 1).map(|w| mix(w, palette)).collect()
    }
}

fn check_palette(k: usize, palette: &[ColorPoint]) -> Result<()> {
    if palette.len() != k + 1 {
        return Err(Error::LengthMismatch {
            expected: k + 1,
            got: palette.len(),
        });
    }
    Ok(())
}

pub fn render_ray<S: Scalar>(ray: &Ray, field: &GridField3D<S>, palette: &[ColorPoint], options: &RenderOptions, seed: u64) -> Result<RayOutput> {
    match march(ray, field, options.samples, options.stratified, seed) {
        Ok(samples) => Ok(render_samples(&samples, palette, options.mode)),
        Err(Error::NoIntersection) => Ok(RayOutput::background(palette)),
        Err(e) => Err(e),
    }
}

/// Renders every pixel of `camera`, in parallel over pixels.
pub fn render_image<S: Scalar>(
    camera: &Camera,
    field: &GridField3D<S>,
    palette: &[ColorPoint],
    options: &RenderOptions,
) -> Result<RenderedImage> {
    check_palette(field.layer_count(), palette)?;
    let (w, h) = (camera.width, camera.height);
    let outputs = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let ray = generate_ray(camera, idx / w, idx % w)?;
            render_ray(&ray, field, palette, options, pixel_seed(options.seed, idx as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RenderedImage::from_outputs(w, h, field.layer_count(), outputs))
}

/// Image mode: composites each pixel's logits directly.
pub fn render_image_2d<S: Scalar>(field: &GridField2D<S>, palette: &[ColorPoint], mode: BlendMode) -> Result<RenderedImage> {
    let k = field.layer_count();
    check_palette(k, palette)?;
    let outputs = field
        .opacity_logits()
        .par_chunks(k)
        .map(|l| {
            let logits: Vec<f64> = l.iter().map(|v| v.to_f64()).collect();
            render_pixel(&logits, palette, mode)
        })
        .collect();
    Ok(RenderedImage::from_outputs(field.width(), field.height(), k, outputs))
}
