//! The ordered, learnable palette.
//!
//! Index 0 is the background (always composited opaque); index `K` is the
//! topmost layer.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::ColorPoint;
use crate::colorhull::ConvexHull3;
use crate::error::{Error, Result};

/// Channel range allowed while optimizing.
pub const TRAINING_RANGE: (f64, f64) = (-0.25, 1.25);

pub const DEFAULT_LAYERS: usize = 5;

const KMEANS_ITERATIONS: usize = 50;
const KMEANS_MAX_POINTS: usize = 20_000;
const DARKEST_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    colors: Vec<ColorPoint>,
    learnable: Vec<bool>,
}

impl Palette {
    pub fn new(colors: Vec<ColorPoint>) -> Result<Self> {
        if colors.len() < 2 {
            return Err(Error::InvalidK {
                k: colors.len().saturating_sub(1),
                min: 1,
                max: usize::MAX,
            });
        }
        if let Some(c) = colors.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite palette color {c:?}")));
        }
        let learnable = vec![true; colors.len()];
        Ok(Self { colors, learnable })
    }

    pub fn with_learnable(mut self, learnable: Vec<bool>) -> Result<Self> {
        if learnable.len() != self.colors.len() {
            return Err(Error::LengthMismatch {
                expected: self.colors.len(),
                got: learnable.len(),
            });
        }
        self.learnable = learnable;
        Ok(self)
    }

    pub fn colors(&self) -> &[ColorPoint] {
        &self.colors
    }

    /// Mutable access for the optimizer. Callers keep channels finite.
    pub fn colors_mut(&mut self) -> &mut [ColorPoint] {
        &mut self.colors
    }

    pub fn learnable(&self) -> &[bool] {
        &self.learnable
    }

    /// Number of layers `K`; the palette holds `K+1` colors.
    pub fn layer_count(&self) -> usize {
        self.colors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn background(&self) -> ColorPoint {
        self.colors[0]
    }

    pub fn clamp_to_training_range(&mut self) {
        let (lo, hi) = TRAINING_RANGE;
        for c in &mut self.colors {
            *c = c.clamp(lo, hi);
        }
    }

    /// Copy with every channel clamped to [0,1].
    pub fn exported(&self) -> Palette {
        Palette {
            colors: self.colors.iter().map(|c| c.clamp(0.0, 1.0)).collect(),
            learnable: self.learnable.clone(),
        }
    }

    /// Replaces one entry; everything else, including order, is unchanged.
    pub fn edit_color(&self, index: usize, new_color: ColorPoint) -> Result<Palette> {
        if index >= self.colors.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.colors.len(),
            });
        }
        if !new_color.is_finite() || new_color.clamp(0.0, 1.0) != new_color {
            return Err(Error::InvalidArgument(format!("color {new_color:?} outside [0,1]")));
        }
        let mut out = self.clone();
        out.colors[index] = new_color;
        Ok(out)
    }

    /// Applies a bottom-to-top layer order; the background stays at index 0.
    pub fn reordered(&self, order: &LayerOrder) -> Palette {
        let mut colors = vec![self.colors[0]];
        let mut learnable = vec![self.learnable[0]];
        for &i in order.as_slice() {
            colors.push(self.colors[i]);
            learnable.push(self.learnable[i]);
        }
        Palette { colors, learnable }
    }

    pub fn to_hex_list(&self) -> Vec<String> {
        self.colors.iter().map(|c| c.to_hex()).collect()
    }

    pub fn to_json(&self) -> PaletteJson {
        PaletteJson {
            colors: self.colors.iter().map(|c| c.to_array()).collect(),
            background_index: 0,
        }
    }

    pub fn from_json(json: &PaletteJson) -> Result<Palette> {
        if json.background_index != 0 {
            return Err(Error::InvalidArgument("background_index must be 0".into()));
        }
        Palette::new(json.colors.iter().map(|&a| ColorPoint::from_array(a)).collect())
    }
}

/// Wire form: `{"colors": [[r,g,b], ...], "background_index": 0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteJson {
    pub colors: Vec<[f64; 3]>,
    #[serde(default)]
    pub background_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PaletteInit {
    /// Background from the darkest pixels, layers as random convex
    /// combinations of four hull vertices.
    RandomInHull,
    KMeans,
    HullSimplify,
    User(Vec<ColorPoint>),
}

impl PaletteInit {
    pub fn name(&self) -> &'static str {
        match self {
            PaletteInit::RandomInHull => "random_in_hull",
            PaletteInit::KMeans => "kmeans",
            PaletteInit::HullSimplify => "hull_simplify",
            PaletteInit::User(_) => "user",
        }
    }
}

impl std::str::FromStr for PaletteInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_in_hull" | "random" => Ok(PaletteInit::RandomInHull),
            "kmeans" => Ok(PaletteInit::KMeans),
            "hull_simplify" | "hull" => Ok(PaletteInit::HullSimplify),
            other => {
                // `user:#RRGGBB,#RRGGBB,...`
                let list = other
                    .strip_prefix("user:")
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown palette init `{s}`")))?;
                let colors = list.split(',').map(ColorPoint::from_hex).collect::<Result<Vec<_>>>()?;
                Ok(PaletteInit::User(colors))
            }
        }
    }
}

/// Produces the initial `K+1` colors.
///
/// `kmeans` and `hull_simplify` produce an unordered set; the entry that is
/// nearest to the most pixels becomes the background.
pub fn init_palette(
    mode: &PaletteInit,
    hull: Option<&ConvexHull3>,
    pixels: &[ColorPoint],
    k: usize,
    seed: u64,
) -> Result<Palette> {
    if k < 1 {
        return Err(Error::InvalidK { k, min: 1, max: usize::MAX });
    }
    let need_hull = || hull.ok_or_else(|| Error::InvalidArgument("palette init mode requires a hull".into()));
    match mode {
        PaletteInit::User(colors) => {
            if colors.len() != k + 1 {
                return Err(Error::LengthMismatch {
                    expected: k + 1,
                    got: colors.len(),
                });
            }
            Palette::new(colors.clone())
        }
        PaletteInit::RandomInHull => {
            let hull = need_hull()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let verts = hull.vertices();
            let mut colors = vec![darkest_mean(pixels).unwrap_or(verts[0])];
            for _ in 0..k {
                let picks = sample(&mut rng, verts.len(), verts.len().min(4)).into_vec();
                let raw: Vec<f64> = picks.iter().map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
                let total: f64 = raw.iter().sum();
                let c = picks
                    .iter()
                    .zip(&raw)
                    .fold(ColorPoint::BLACK, |acc, (&i, w)| acc + verts[i] * (w / total));
                colors.push(c);
            }
            Palette::new(colors)
        }
        PaletteInit::KMeans => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = if pixels.len() > KMEANS_MAX_POINTS {
                let mut idx = sample(&mut rng, pixels.len(), KMEANS_MAX_POINTS).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| pixels[i]).collect()
            } else {
                pixels.to_vec()
            };
            let centers = kmeans(&pts, k + 1, KMEANS_ITERATIONS, &mut rng)?;
            Palette::new(background_first(centers, pixels))
        }
        PaletteInit::HullSimplify => {
            let colors = need_hull()?.simplify_to_palette(k + 1)?;
            if colors.len() != k + 1 {
                return Err(Error::InvalidK {
                    k,
                    min: 3,
                    max: colors.len().saturating_sub(1),
                });
            }
            Palette::new(background_first(colors, pixels))
        }
    }
}

fn darkest_mean(pixels: &[ColorPoint]) -> Option<ColorPoint> {
    if pixels.is_empty() {
        return None;
    }
    let mut sorted: Vec<ColorPoint> = pixels.to_vec();
    sorted.sort_by(|a, b| (a.r + a.g + a.b).total_cmp(&(b.r + b.g + b.b)));
    let n = ((pixels.len() as f64 * DARKEST_FRACTION).ceil() as usize).max(1);
    Some(sorted[..n].iter().fold(ColorPoint::BLACK, |acc, c| acc + *c) * (1.0 / n as f64))
}

fn nearest_index(p: ColorPoint, colors: &[ColorPoint]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in colors.iter().enumerate() {
        let d = (p - *c).norm_squared();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn assignment_counts(pixels: &[ColorPoint], colors: &[ColorPoint]) -> Vec<usize> {
    let mut counts = vec![0; colors.len()];
    for &p in pixels {
        counts[nearest_index(p, colors)] += 1;
    }
    counts
}

fn background_first(mut colors: Vec<ColorPoint>, pixels: &[ColorPoint]) -> Vec<ColorPoint> {
    let counts = assignment_counts(pixels, &colors);
    let mut bg = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[bg] {
            bg = i;
        }
    }
    let c = colors.remove(bg);
    colors.insert(0, c);
    colors
}

/// Lloyd's k-means with k-means++ seeding.
pub fn kmeans(points: &[ColorPoint], k: usize, iterations: usize, rng: &mut impl Rng) -> Result<Vec<ColorPoint>> {
    if points.is_empty() || k == 0 {
        return Err(Error::InvalidK { k, min: 1, max: points.len() });
    }
    let mut centers = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| (*p - centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidK {
                k,
                min: 1,
                max: centers.len(),
            });
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = points[pick];
        centers.push(c);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((*p - c).norm_squared());
        }
    }

    for _ in 0..iterations {
        let mut sums = vec![ColorPoint::BLACK; k];
        let mut counts = vec![0usize; k];
        for &p in points {
            let j = nearest_index(p, &centers);
            sums[j] = sums[j] + p;
            counts[j] += 1;
        }
        let mut moved = false;
        for j in 0..k {
            if counts[j] > 0 {
                let c = sums[j] * (1.0 / counts[j] as f64);
                moved |= c != centers[j];
                centers[j] = c;
            }
        }
        if !moved {
            break;
        }
    }
    Ok(centers)
}

/// Bottom-to-top order of the original layer indices `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOrder(Vec<usize>);

impl LayerOrder {
    pub fn identity(k: usize) -> Self {
        Self((1..=k).collect())
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (1..=order.len()).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!("{order:?} is not a permutation of 1..=K")));
        }
        Ok(Self(order))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Orders layers by how many pixels are nearest to each palette color: the
/// most-claimed layer sits just above the background and the least-claimed
/// layer goes on top. Equal counts keep their original order.
pub fn determine_order(pixels: &[ColorPoint], palette: &Palette) -> LayerOrder {
    let counts = assignment_counts(pixels, palette.colors());
    let mut order: Vec<usize> = (1..palette.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]));
    LayerOrder(order)
}
