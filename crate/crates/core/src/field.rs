//! Dense parameter grids: per-layer opacity logits over pixels (image mode),
//! or over voxels together with density logits (scene mode).
//!
//! Scene grids are node-aligned: node `(0,0,0)` sits at `aabb.min` and node
//! `R-1` at `aabb.max` on each axis, and `sample` interpolates trilinearly
//! between nodes.

use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compositor::softplus;
use crate::error::{Error, Result};

const INIT_NOISE: f64 = 1e-2;
const BOUNDS_TOL: f64 = 1e-9;

pub const DEFAULT_INIT_LOGIT: f64 = -2.0;
pub const DEFAULT_INIT_DENSITY: f64 = -1.0;

/// Storage type of grid parameters. Math is always done in `f64`.
pub trait Scalar: Copy + Debug + Default + PartialEq + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

fn cast_vec<S: Scalar, T: Scalar>(v: &[S]) -> Vec<T> {
    v.iter().map(|x| T::from_f64(x.to_f64())).collect()
}

fn noisy<S: Scalar>(n: usize, center: f64, rng: &mut ChaCha8Rng) -> Vec<S> {
    (0..n)
        .map(|_| S::from_f64(center + rng.gen_range(-INIT_NOISE..INIT_NOISE)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|a| !(min[a] < max[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid aabb {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn contains(&self, x: [f64; 3]) -> bool {
        (0..3).all(|a| {
            let tol = BOUNDS_TOL * (1.0 + self.max[a] - self.min[a]);
            x[a] >= self.min[a] - tol && x[a] <= self.max[a] + tol
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField2D<S: Scalar = f32> {
    height: usize,
    width: usize,
    k: usize,
    opacity_logits: Vec<S>,
}

impl<S: Scalar> GridField2D<S> {
    pub fn filled(height: usize, width: usize, k: usize, value: f64) -> Result<Self> {
        check_shape(&[height, width], k)?;
        Ok(Self {
            height,
            width,
            k,
            opacity_logits: vec![S::from_f64(value); height * width * k],
        })
    }

    pub fn allocate(height: usize, width: usize, k: usize, init_logit: f64, seed: u64) -> Result<Self> {
        check_shape(&[height, width], k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            height,
            width,
            k,
            opacity_logits: noisy(height * width * k, init_logit, &mut rng),
        })
    }

    pub fn from_parts(height: usize, width: usize, k: usize, opacity_logits: Vec<S>) -> Result<Self> {
        check_shape(&[height, width], k)?;
        if opacity_logits.len() != height * width * k {
            return Err(Error::LengthMismatch {
                expected: height * width * k,
                got: opacity_logits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            k,
            opacity_logits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layer_count(&self) -> usize {
        self.k
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// H×W×K in row-major order.
    pub fn opacity_logits(&self) -> &[S] {
        &self.opacity_logits
    }

    pub fn opacity_logits_mut(&mut self) -> &mut [S] {
        &mut self.opacity_logits
    }

    fn offset(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.height || col >= self.width {
            return Err(Error::OutOfBounds(format!(
                "pixel ({row},{col}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok((row * self.width + col) * self.k)
    }

    /// Exact per-pixel lookup.
    pub fn sample2d(&self, row: usize, col: usize) -> Result<Vec<f64>> {
        let o = self.offset(row, col)?;
        Ok(self.opacity_logits[o..o + self.k].iter().map(|v| v.to_f64()).collect())
    }

    pub fn set(&mut self, row: usize, col: usize, logits: &[f64]) -> Result<()> {
        if logits.len() != self.k {
            return Err(Error::LengthMismatch {
                expected: self.k,
                got: logits.len(),
            });
        }
        let o = self.offset(row, col)?;
        for (dst, &v) in self.opacity_logits[o..o + self.k].iter_mut().zip(logits) {
            *dst = S::from_f64(v);
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.opacity_logits.fill(S::from_f64(value));
    }

    pub fn cast<T: Scalar>(&self) -> GridField2D<T> {
        GridField2D {
            height: self.height,
            width: self.width,
            k: self.k,
            opacity_logits: cast_vec(&self.opacity_logits),
        }
    }
}

/// Corner indices and weights of one trilinear lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trilinear {
    pub corners: [usize; 8],
    pub weights: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField3D<S: Scalar = f32> {
    resolution: [usize; 3],
    k: usize,
    aabb: Aabb,
    density_logits: Vec<S>,
    opacity_logits: Vec<S>,
}

impl<S: Scalar> GridField3D<S> {
    pub fn allocate(
        resolution: [usize; 3],
        k: usize,
        aabb: Aabb,
        init_density: f64,
        init_logit: f64,
        seed: u64,
    ) -> Result<Self> {
        check_shape(&resolution, k)?;
        let n = resolution.iter().product::<usize>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let density_logits = noisy(n, init_density, &mut rng);
        let opacity_logits = noisy(n * k, init_logit, &mut rng);
        Ok(Self {
            resolution,
            k,
            aabb,
            density_logits,
            opacity_logits,
        })
    }

    pub fn from_parts(
        resolution: [usize; 3],
        k: usize,
        aabb: Aabb,
        density_logits: Vec<S>,
        opacity_logits: Vec<S>,
    ) -> Result<Self> {
        check_shape(&resolution, k)?;
        let n = resolution.iter().product::<usize>();
        if density_logits.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: density_logits.len(),
            });
        }
        if opacity_logits.len() != n * k {
            return Err(Error::LengthMismatch {
                expected: n * k,
                got: opacity_logits.len(),
            });
        }
        Ok(Self {
            resolution,
            k,
            aabb,
            density_logits,
            opacity_logits,
        })
    }

    /// Builds a grid by evaluating `f(position) -> (density_logit, logits)` at every node.
    pub fn from_fn(
        resolution: [usize; 3],
        k: usize,
        aabb: Aabb,
        mut f: impl FnMut([f64; 3]) -> (f64, Vec<f64>),
    ) -> Result<Self> {
        let mut field = Self::allocate(resolution, k, aabb, 0.0, 0.0, 0)?;
        for ix in 0..resolution[0] {
            for iy in 0..resolution[1] {
                for iz in 0..resolution[2] {
                    let n = field.node_index(ix, iy, iz);
                    let (d, logits) = f(field.node_position(ix, iy, iz));
                    if logits.len() != k {
                        return Err(Error::LengthMismatch {
                            expected: k,
                            got: logits.len(),
                        });
                    }
                    field.density_logits[n] = S::from_f64(d);
                    for (i, l) in logits.into_iter().enumerate() {
                        field.opacity_logits[n * k + i] = S::from_f64(l);
                    }
                }
            }
        }
        Ok(field)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn layer_count(&self) -> usize {
        self.k
    }

    pub fn aabb(&self) -> &Aabb {
        &self.aabb
    }

    pub fn node_count(&self) -> usize {
        self.density_logits.len()
    }

    /// Rx×Ry×Rz in C order.
    pub fn density_logits(&self) -> &[S] {
        &self.density_logits
    }

    pub fn density_logits_mut(&mut self) -> &mut [S] {
        &mut self.density_logits
    }

    /// Rx×Ry×Rz×K in C order.
    pub fn opacity_logits(&self) -> &[S] {
        &self.opacity_logits
    }

    pub fn opacity_logits_mut(&mut self) -> &mut [S] {
        &mut self.opacity_logits
    }

    #[inline]
    pub fn node_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution[1] + iy) * self.resolution[2] + iz
    }

    pub fn node_position(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let idx = [ix, iy, iz];
        let e = self.aabb.extent();
        std::array::from_fn(|a| {
            let r = self.resolution[a];
            if r == 1 {
                self.aabb.center()[a]
            } else {
                self.aabb.min[a] + e[a] * idx[a] as f64 / (r - 1) as f64
            }
        })
    }

    /// Continuous grid coordinates of a world position (node `i` at `i`).
    fn grid_coords(&self, x: [f64; 3]) -> Result<[f64; 3]> {
        if !self.aabb.contains(x) {
            return Err(Error::OutOfBounds(format!("{x:?} outside {:?}", self.aabb)));
        }
        let e = self.aabb.extent();
        Ok(std::array::from_fn(|a| {
            let r = self.resolution[a];
            let u = (x[a] - self.aabb.min[a]) / e[a] * (r - 1) as f64;
            u.clamp(0.0, (r - 1) as f64)
        }))
    }

    pub fn trilinear(&self, x: [f64; 3]) -> Result<Trilinear> {
        Ok(self.trilinear_at_coords(self.grid_coords(x)?))
    }

    fn trilinear_at_coords(&self, u: [f64; 3]) -> Trilinear {
        let mut i0 = [0usize; 3];
        let mut f = [0.0; 3];
        let mut step = [0usize; 3];
        for a in 0..3 {
            let r = self.resolution[a];
            if r > 1 {
                i0[a] = (u[a].floor() as usize).min(r - 2);
                f[a] = u[a] - i0[a] as f64;
                step[a] = 1;
            }
        }
        let mut corners = [0usize; 8];
        let mut weights = [0.0; 8];
        for c in 0..8 {
            let (bx, by, bz) = (c >> 2 & 1, c >> 1 & 1, c & 1);
            corners[c] = self.node_index(i0[0] + bx * step[0], i0[1] + by * step[1], i0[2] + bz * step[2]);
            let wx = if bx == 1 { f[0] } else { 1.0 - f[0] };
            let wy = if by == 1 { f[1] } else { 1.0 - f[1] };
            let wz = if bz == 1 { f[2] } else { 1.0 - f[2] };
            weights[c] = wx * wy * wz;
        }
        Trilinear { corners, weights }
    }

    /// Interpolated density logit; the K interpolated opacity logits go to `logits`.
    #[inline]
    pub fn interpolate(&self, t: &Trilinear, logits: &mut [f64]) -> f64 {
        let k = self.k;
        logits.fill(0.0);
        let mut d = 0.0;
        for c in 0..8 {
            let w = t.weights[c];
            let n = t.corners[c];
            d += w * self.density_logits[n].to_f64();
            let src = &self.opacity_logits[n * k..n * k + k];
            for (l, v) in logits.iter_mut().zip(src) {
                *l += w * v.to_f64();
            }
        }
        d
    }

    /// Returns `(density, logits)` with `density = softplus(density_logit)`.
    pub fn sample(&self, x: [f64; 3]) -> Result<(f64, Vec<f64>)> {
        let t = self.trilinear(x)?;
        let mut logits = vec![0.0; self.k];
        let d = self.interpolate(&t, &mut logits);
        Ok((softplus(d), logits))
    }

    /// Trilinear resampling onto a finer node grid. Old node values are
    /// reproduced exactly when each `(new-1)` is a multiple of `(old-1)`.
    pub fn upsample(&self, new_resolution: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| new_resolution[a] < self.resolution[a]) {
            return Err(Error::InvalidArgument(format!(
                "cannot upsample {:?} to {new_resolution:?}",
                self.resolution
            )));
        }
        let k = self.k;
        let n = new_resolution.iter().product::<usize>();
        let mut density = Vec::with_capacity(n);
        let mut opacity = Vec::with_capacity(n * k);
        let mut logits = vec![0.0; k];
        let scale: [f64; 3] = std::array::from_fn(|a| {
            if new_resolution[a] > 1 {
                (self.resolution[a] - 1) as f64 / (new_resolution[a] - 1) as f64
            } else {
                0.0
            }
        });
        for ix in 0..new_resolution[0] {
            for iy in 0..new_resolution[1] {
                for iz in 0..new_resolution[2] {
                    let u = [ix as f64 * scale[0], iy as f64 * scale[1], iz as f64 * scale[2]];
                    let t = self.trilinear_at_coords(u);
                    density.push(S::from_f64(self.interpolate(&t, &mut logits)));
                    opacity.extend(logits.iter().map(|&l| S::from_f64(l)));
                }
            }
        }
        Self::from_parts(new_resolution, k, self.aabb, density, opacity)
    }

    pub fn cast<T: Scalar>(&self) -> GridField3D<T> {
        GridField3D {
            resolution: self.resolution,
            k: self.k,
            aabb: self.aabb,
            density_logits: cast_vec(&self.density_logits),
            opacity_logits: cast_vec(&self.opacity_logits),
        }
    }
}

fn check_shape(dims: &[usize], k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::InvalidK { k, min: 1, max: usize::MAX });
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("resolution {dims:?} must be positive")));
    }
    Ok(())
}

/// Image- or scene-mode parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Field<S: Scalar = f32> {
    Image(GridField2D<S>),
    Scene(GridField3D<S>),
}

impl<S: Scalar> Field<S> {
    pub fn layer_count(&self) -> usize {
        match self {
            Field::Image(f) => f.layer_count(),
            Field::Scene(f) => f.layer_count(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Field<T> {
        match self {
            Field::Image(f) => Field::Image(f.cast()),
            Field::Scene(f) => Field::Scene(f.cast()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Aabb {
        Aabb::new([0.0; 3], [1.0; 3]).unwrap()
    }

    fn ramp(res: [usize; 3]) -> GridField3D<f64> {
        GridField3D::from_fn(res, 2, unit(), |p| (1.0 + 2.0 * p[0] - p[1] + 0.5 * p[2], vec![p[2], -3.0 * p[0]])).unwrap()
    }

    #[test]
    fn sample2d_lookup_and_bounds() {
        let mut f = GridField2D::<f32>::allocate(3, 4, 2, -2.0, 7).unwrap();
        f.set(1, 2, &[0.5, -1.25]).unwrap();
        assert_eq!(f.sample2d(1, 2).unwrap(), vec![0.5, -1.25]);
        assert!(matches!(f.sample2d(3, 0), Err(Error::OutOfBounds(_))));
        assert!(matches!(f.sample2d(0, 4), Err(Error::OutOfBounds(_))));
        f.fill(0.0);
        assert_eq!(f.sample2d(2, 3).unwrap(), vec![0.0, 0.0]);
        assert!(GridField2D::<f32>::allocate(3, 4, 0, 0.0, 0).is_err());
    }

    #[test]
    fn allocate_is_deterministic_and_centered() {
        let a = GridField3D::<f32>::allocate([4; 3], 2, unit(), 0.0, 0.0, 1).unwrap();
        let b = GridField3D::<f32>::allocate([4; 3], 2, unit(), 0.0, 0.0, 1).unwrap();
        assert_eq!(a, b);
        let c = GridField3D::<f32>::allocate([16; 3], 3, unit(), -1.0, -2.0, 3).unwrap();
        let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        assert!((mean(c.opacity_logits()) + 2.0).abs() < 1e-2);
        assert!((mean(c.density_logits()) + 1.0).abs() < 1e-2);
        assert!(c.opacity_logits().iter().all(|&v| (v as f64 + 2.0).abs() <= 1e-2 + 1e-6));
        assert!(matches!(
            GridField3D::<f32>::allocate([4; 3], 0, unit(), 0.0, 0.0, 1),
            Err(Error::InvalidK { .. })
        ));
    }

    #[test]
    fn sample_at_nodes_midpoints_and_constants() {
        let f = GridField3D::<f64>::allocate([5, 4, 3], 2, unit(), 0.3, -1.0, 9).unwrap();
        let mut logits = vec![0.0; 2];
        for (ix, iy, iz) in [(0, 0, 0), (2, 1, 1), (4, 3, 2), (3, 3, 0)] {
            let n = f.node_index(ix, iy, iz);
            let t = f.trilinear(f.node_position(ix, iy, iz)).unwrap();
            let d = f.interpolate(&t, &mut logits);
            assert!((d - f.density_logits()[n]).abs() < 1e-12);
            assert!((logits[1] - f.opacity_logits()[n * 2 + 1]).abs() < 1e-12);
        }
        let (a, b) = (f.node_index(1, 2, 1), f.node_index(2, 2, 1));
        let pa = f.node_position(1, 2, 1);
        let pb = f.node_position(2, 2, 1);
        let mid = [(pa[0] + pb[0]) / 2.0, pa[1], pa[2]];
        let t = f.trilinear(mid).unwrap();
        let d = f.interpolate(&t, &mut logits);
        assert!((d - 0.5 * (f.density_logits()[a] + f.density_logits()[b])).abs() < 1e-12);

        let c = GridField3D::<f64>::from_fn([3; 3], 1, unit(), |_| (0.7, vec![-0.2])).unwrap();
        for x in [[0.1, 0.9, 0.3], [1.0, 1.0, 1.0], [0.5, 0.0, 0.77]] {
            let (dens, l) = c.sample(x).unwrap();
            assert!((dens - softplus(0.7)).abs() < 1e-12);
            assert!((l[0] + 0.2).abs() < 1e-12);
        }
        assert!(matches!(c.sample([1.1, 0.5, 0.5]), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn continuous_across_voxel_faces() {
        let f = GridField3D::<f64>::allocate([5; 3], 2, unit(), 0.0, 0.0, 4).unwrap();
        let face = 0.5; // node plane at index 2
        for &(y, z) in &[(0.13, 0.71), (0.5, 0.5), (0.99, 0.01)] {
            let below = f.sample([face - 1e-12, y, z]).unwrap();
            let above = f.sample([face + 1e-12, y, z]).unwrap();
            assert!((below.0 - above.0).abs() < 1e-9);
            assert!((below.1[1] - above.1[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn trilinear_weights_are_corner_gradients() {
        let f = GridField3D::<f64>::allocate([4; 3], 1, unit(), 0.0, 0.0, 2).unwrap();
        let x = [0.41, 0.07, 0.93];
        let t = f.trilinear(x).unwrap();
        assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(t.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        for c in 0..8 {
            let h = 1e-4;
            let mut plus = f.clone();
            plus.density_logits_mut()[t.corners[c]] += h;
            let mut minus = f.clone();
            minus.density_logits_mut()[t.corners[c]] -= h;
            let mut l = [0.0];
            let fd = (plus.interpolate(&t, &mut l) - minus.interpolate(&t, &mut l)) / (2.0 * h);
            assert!((fd - t.weights[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn upsample_identity_constant_and_ramp() {
        let f = GridField3D::<f32>::allocate([4, 5, 3], 2, unit(), 0.1, -2.0, 5).unwrap();
        assert_eq!(f.upsample([4, 5, 3]).unwrap(), f);

        let c = GridField3D::<f64>::from_fn([3; 3], 2, unit(), |_| (1.5, vec![0.25, -4.0])).unwrap();
        let cu = c.upsample([7, 9, 5]).unwrap();
        assert!(cu.density_logits().iter().all(|&v| (v - 1.5).abs() < 1e-12));
        assert!(cu.opacity_logits().chunks(2).all(|l| (l[0] - 0.25).abs() < 1e-12 && (l[1] + 4.0).abs() < 1e-12));

        // A linear field is reproduced by trilinear interpolation, so the
        // upsampled grid holds the analytic ramp at its own nodes.
        let r = ramp([4, 4, 4]);
        let up = r.upsample([7, 7, 7]).unwrap();
        for ix in 0..7 {
            for iy in 0..7 {
                for iz in 0..7 {
                    let p = up.node_position(ix, iy, iz);
                    let n = up.node_index(ix, iy, iz);
                    assert!((up.density_logits()[n] - (1.0 + 2.0 * p[0] - p[1] + 0.5 * p[2])).abs() < 1e-12);
                    assert!((up.opacity_logits()[2 * n] - p[2]).abs() < 1e-12);
                    assert!((up.opacity_logits()[2 * n + 1] + 3.0 * p[0]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_reproduces_old_nodes() {
        let f = GridField3D::<f32>::allocate([5, 4, 3], 3, unit(), 0.0, 0.0, 11).unwrap();
        // (9-1)/(5-1), (10-1)/(4-1) and (5-1)/(3-1) are integers.
        let up = f.upsample([9, 10, 5]).unwrap();
        for ix in 0..5 {
            for iy in 0..4 {
                for iz in 0..3 {
                    let (d, l) = up.sample(f.node_position(ix, iy, iz)).unwrap();
                    let n = f.node_index(ix, iy, iz);
                    assert!((d - softplus(f.density_logits()[n] as f64)).abs() < 1e-6);
                    for i in 0..3 {
                        assert!((l[i] - f.opacity_logits()[n * 3 + i] as f64).abs() < 1e-6);
                    }
                }
            }
        }
        assert!(f.upsample([4, 4, 3]).is_err());
    }

    #[test]
    fn softplus_density_positive_and_monotone() {
        let mut prev = 0.0;
        for i in -400..=400 {
            let d = softplus(i as f64 * 0.1);
            assert!(d > 0.0 && d > prev);
            prev = d;
        }
    }
}
