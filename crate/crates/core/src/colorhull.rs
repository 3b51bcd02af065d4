//! Convex hull of observed colors in RGB space.
//!
//! The hull is the feasible region for palette colors. It is built once from
//! the training pixels and never changes afterwards, so every query here is a
//! pure function of an immutable [`ConvexHull3`].

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::ColorPoint;
use crate::error::{Error, Result};

/// Tolerance for inside/on-hull tests.
pub const HULL_EPS: f64 = 1e-9;

/// Points closer than this to a facet plane are not treated as outside while
/// building. Kept below [`HULL_EPS`] so every input point ends up within
/// `HULL_EPS` of the finished hull.
const BUILD_EPS: f64 = 1e-10;

/// Default cap on the number of colors fed to [`build_hull`].
pub const MAX_HULL_POINTS: usize = 100_000;

/// Default jitter amplitude used when retrying a degenerate hull.
pub const DEFAULT_JITTER: f64 = 1.0 / 512.0;

pub const DEFAULT_DELTA_IN: f64 = 0.1;
pub const DEFAULT_DELTA_OUT: f64 = 1e2;

type V3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    /// Counter-clockwise seen from outside.
    pub indices: [usize; 3],
    /// Outward unit normal.
    pub normal: V3,
    /// Plane offset: `normal · x = offset` on the facet plane.
    pub offset: f64,
}

impl Facet {
    pub fn signed_distance(&self, p: &V3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

#[derive(Debug, Clone)]
pub struct ConvexHull3 {
    vertices: Vec<ColorPoint>,
    facets: Vec<Facet>,
    source_count: usize,
}

/// Result of [`ConvexHull3::hull_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct HullLoss {
    pub loss: f64,
    pub gradient: Vec<ColorPoint>,
}

struct BuildFace {
    v: [usize; 3],
    normal: V3,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

fn plane(a: &V3, b: &V3, c: &V3) -> Option<(V3, f64)> {
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len == 0.0 || !len.is_finite() {
        return None;
    }
    let n = n / len;
    Some((n, n.dot(a)))
}

/// Builds the convex hull of `points`.
///
/// Exact duplicates are removed first. Coplanar or collinear input is
/// reported as [`Error::DegenerateInput`]; see [`build_hull_jittered`] for the
/// retry-with-noise variant.
pub fn build_hull(points: &[ColorPoint]) -> Result<ConvexHull3> {
    if let Some(p) = points.iter().find(|p| !p.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite color {p:?}")));
    }
    let mut seen = HashSet::with_capacity(points.len());
    let pts: Vec<V3> = points
        .iter()
        .filter(|p| seen.insert([p.r.to_bits(), p.g.to_bits(), p.b.to_bits()]))
        .map(|p| p.to_vec3())
        .collect();
    if pts.len() < 4 {
        return Err(Error::DegenerateInput(format!(
            "need at least 4 distinct points, got {}",
            pts.len()
        )));
    }

    let simplex = initial_simplex(&pts)?;
    let mut faces: Vec<BuildFace> = Vec::new();
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();

    let centroid = simplex.iter().map(|&i| pts[i]).sum::<V3>() / 4.0;
    for skip in 0..4 {
        let mut tri: Vec<usize> = (0..4).filter(|&j| j != skip).map(|j| simplex[j]).collect();
        let (mut n, mut off) = plane(&pts[tri[0]], &pts[tri[1]], &pts[tri[2]]).expect("simplex face");
        if n.dot(&centroid) - off > 0.0 {
            tri.swap(1, 2);
            n = -n;
            off = -off;
        }
        push_face(&mut faces, &mut edges, [tri[0], tri[1], tri[2]], n, off);
    }

    let in_simplex: HashSet<usize> = simplex.iter().copied().collect();
    for i in 0..pts.len() {
        if in_simplex.contains(&i) {
            continue;
        }
        if let Some(f) = faces.iter_mut().find(|f| f.normal.dot(&pts[i]) - f.offset > BUILD_EPS) {
            f.outside.push(i);
        }
    }

    let mut pending: Vec<usize> = (0..faces.len()).collect();
    while let Some(fi) = pending.pop() {
        if !faces[fi].alive || faces[fi].outside.is_empty() {
            continue;
        }
        let apex = {
            let f = &faces[fi];
            *f.outside
                .iter()
                .max_by(|&&a, &&b| {
                    let da = f.normal.dot(&pts[a]);
                    let db = f.normal.dot(&pts[b]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("non-empty")
        };
        let p = pts[apex];

        // Flood the set of faces visible from the apex.
        let mut visible = vec![fi];
        let mut is_visible: HashSet<usize> = HashSet::from([fi]);
        let mut horizon = Vec::new();
        let mut cursor = 0;
        while cursor < visible.len() {
            let f = visible[cursor];
            cursor += 1;
            let v = faces[f].v;
            for e in 0..3 {
                let (a, b) = (v[e], v[(e + 1) % 3]);
                let nb = edges[&(b, a)];
                if is_visible.contains(&nb) {
                    continue;
                }
                let g = &faces[nb];
                if g.normal.dot(&p) - g.offset > BUILD_EPS {
                    is_visible.insert(nb);
                    visible.push(nb);
                } else {
                    horizon.push((a, b));
                }
            }
        }
        // Edges shared by two visible faces may have been recorded as horizon
        // before the second face was found visible.
        horizon.retain(|&(a, b)| !is_visible.contains(&edges[&(b, a)]));

        let mut orphans = Vec::new();
        for &f in &visible {
            let face = &mut faces[f];
            face.alive = false;
            orphans.append(&mut face.outside);
            let v = face.v;
            for e in 0..3 {
                edges.remove(&(v[e], v[(e + 1) % 3]));
            }
        }

        let first_new = faces.len();
        for &(a, b) in &horizon {
            let (n, off) = match plane(&pts[a], &pts[b], &p) {
                Some(pl) => pl,
                None => {
                    return Err(Error::DegenerateInput(
                        "numerically collinear points on the hull boundary".into(),
                    ))
                }
            };
            push_face(&mut faces, &mut edges, [a, b, apex], n, off);
        }
        for q in orphans {
            if q == apex {
                continue;
            }
            if let Some(f) = faces[first_new..]
                .iter_mut()
                .find(|f| f.normal.dot(&pts[q]) - f.offset > BUILD_EPS)
            {
                f.outside.push(q);
            }
        }
        pending.extend(first_new..faces.len());
    }

    // Compact to the vertices referenced by live faces, in input order.
    let alive: Vec<&BuildFace> = faces.iter().filter(|f| f.alive).collect();
    let mut used: Vec<usize> = alive.iter().flat_map(|f| f.v).collect();
    used.sort_unstable();
    used.dedup();
    let remap: HashMap<usize, usize> = used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let vertices = used.iter().map(|&i| ColorPoint::from_vec3(&pts[i])).collect();
    let facets = alive
        .iter()
        .map(|f| Facet {
            indices: [remap[&f.v[0]], remap[&f.v[1]], remap[&f.v[2]]],
            normal: f.normal,
            offset: f.offset,
        })
        .collect();

    Ok(ConvexHull3 {
        vertices,
        facets,
        source_count: points.len(),
    })
}

fn push_face(
    faces: &mut Vec<BuildFace>,
    edges: &mut HashMap<(usize, usize), usize>,
    v: [usize; 3],
    normal: V3,
    offset: f64,
) {
    let id = faces.len();
    for e in 0..3 {
        edges.insert((v[e], v[(e + 1) % 3]), id);
    }
    faces.push(BuildFace {
        v,
        normal,
        offset,
        outside: Vec::new(),
        alive: true,
    });
}

fn initial_simplex(pts: &[V3]) -> Result<[usize; 4]> {
    let extent = {
        let mut lo = pts[0];
        let mut hi = pts[0];
        for p in pts {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).max().max(1e-300)
    };
    let tol = 1e-9 * extent.max(1.0);

    // Widest pair among the axis extremes.
    let mut extremes = Vec::with_capacity(6);
    for axis in 0..3 {
        let by = |a: &&V3, b: &&V3| a[axis].total_cmp(&b[axis]);
        let (imin, _) = pts.iter().enumerate().min_by(|a, b| by(&a.1, &b.1)).unwrap();
        let (imax, _) = pts.iter().enumerate().max_by(|a, b| by(&a.1, &b.1)).unwrap();
        extremes.push(imin);
        extremes.push(imax);
    }
    let mut best = (0.0, 0, 0);
    for &i in &extremes {
        for &j in &extremes {
            let d = (pts[i] - pts[j]).norm_squared();
            if d > best.0 {
                best = (d, i, j);
            }
        }
    }
    let (d2, a, b) = best;
    if d2.sqrt() <= tol {
        return Err(Error::DegenerateInput("all points coincide".into()));
    }

    let dir = (pts[b] - pts[a]).normalize();
    let line_dist = |p: &V3| {
        let v = p - pts[a];
        (v - dir * v.dot(&dir)).norm()
    };
    let (c, dc) = pts
        .iter()
        .enumerate()
        .map(|(i, p)| (i, line_dist(p)))
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .unwrap();
    if dc <= tol {
        return Err(Error::DegenerateInput("points are collinear".into()));
    }

    let (n, off) = plane(&pts[a], &pts[b], &pts[c]).ok_or_else(|| Error::DegenerateInput("points are collinear".into()))?;
    let (d, dd) = pts
        .iter()
        .enumerate()
        .map(|(i, p)| (i, (n.dot(p) - off).abs()))
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .unwrap();
    if dd <= tol {
        return Err(Error::DegenerateInput("points are coplanar".into()));
    }
    Ok([a, b, c, d])
}

/// Builds the hull, retrying once with uniform `±jitter` noise on every point
/// when the input is degenerate (e.g. a grayscale image).
pub fn build_hull_jittered(points: &[ColorPoint], jitter: f64, seed: u64) -> Result<ConvexHull3> {
    match build_hull(points) {
        Err(Error::DegenerateInput(_)) if jitter > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy: Vec<ColorPoint> = points
                .iter()
                .map(|p| {
                    let mut j = || rng.gen_range(-jitter..=jitter);
                    ColorPoint::new(p.r + j(), p.g + j(), p.b + j())
                })
                .collect();
            build_hull(&noisy)
        }
        other => other,
    }
}

/// Deduplicates colors at 8-bit quantization (keeping the first original
/// color for each bucket) and uniformly subsamples to at most `max_points`.
pub fn prepare_hull_points(pixels: &[ColorPoint], max_points: usize, seed: u64) -> Vec<ColorPoint> {
    let mut seen = HashSet::new();
    let unique: Vec<ColorPoint> = pixels.iter().copied().filter(|p| seen.insert(p.to_rgb8())).collect();
    if unique.len() <= max_points {
        return unique;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, unique.len(), max_points).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| unique[i]).collect()
}

/// Closest point to `p` on triangle `abc` (vertex, edge or interior).
pub fn closest_point_on_triangle(p: &V3, a: &V3, b: &V3, c: &V3) -> V3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

impl ConvexHull3 {
    pub fn vertices(&self) -> &[ColorPoint] {
        &self.vertices
    }

    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    fn vertex(&self, i: usize) -> V3 {
        self.vertices[i].to_vec3()
    }

    pub fn contains(&self, p: ColorPoint) -> bool {
        let v = p.to_vec3();
        self.facets.iter().all(|f| f.signed_distance(&v) <= HULL_EPS)
    }

    /// Distance from an exterior point to the hull surface, with the nearest
    /// surface point.
    pub fn distance_to_hull(&self, p: ColorPoint) -> Result<(f64, ColorPoint)> {
        if self.contains(p) {
            return Err(Error::InteriorPoint);
        }
        Ok(self.nearest_surface_point(p))
    }

    fn nearest_surface_point(&self, p: ColorPoint) -> (f64, ColorPoint) {
        let v = p.to_vec3();
        let mut best = (f64::INFINITY, v);
        for f in &self.facets {
            let [i, j, k] = f.indices;
            let q = closest_point_on_triangle(&v, &self.vertex(i), &self.vertex(j), &self.vertex(k));
            let d = (v - q).norm_squared();
            if d < best.0 {
                best = (d, q);
            }
        }
        (best.0.sqrt(), ColorPoint::from_vec3(&best.1))
    }

    /// Nearest hull vertex; ties go to the lowest index.
    pub fn nearest_vertex_distance(&self, p: ColorPoint) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, v) in self.vertices.iter().enumerate() {
            let d = p.distance(*v);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    /// Hull regularization over `colors`.
    ///
    /// Colors outside the hull are pulled to the nearest point on the surface
    /// with weight `delta_out`; colors inside are pulled to their nearest
    /// vertex with weight `delta_in`. The gradient holds the arg-min fixed.
    pub fn hull_loss(&self, colors: &[ColorPoint], delta_in: f64, delta_out: f64) -> HullLoss {
        let mut loss = 0.0;
        let mut gradient = Vec::with_capacity(colors.len());
        for &c in colors {
            let (delta, dist, target) = if self.contains(c) {
                let (d, i) = self.nearest_vertex_distance(c);
                (delta_in, d, self.vertices[i])
            } else {
                let (d, q) = self.nearest_surface_point(c);
                (delta_out, d, q)
            };
            loss += delta * dist;
            gradient.push(if dist > 0.0 {
                (c - target) * (delta / dist)
            } else {
                ColorPoint::BLACK
            });
        }
        HullLoss { loss, gradient }
    }

    pub fn volume(&self) -> f64 {
        self.facets
            .iter()
            .map(|f| {
                let [i, j, k] = f.indices;
                self.vertex(i).dot(&self.vertex(j).cross(&self.vertex(k)))
            })
            .sum::<f64>()
            / 6.0
    }

    fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .facets
            .iter()
            .filter(|f| f.indices.contains(&v))
            .flat_map(|f| f.indices)
            .filter(|&i| i != v)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Volume lost when vertex `v` is dropped from the vertex set.
    ///
    /// Only the star of `v` changes, so this is the volume of the cone from
    /// `v` over its link: `vol(hull(link ∪ v)) - vol(hull(link))`.
    fn removal_cost(&self, v: usize) -> f64 {
        let link: Vec<ColorPoint> = self.neighbors(v).into_iter().map(|i| self.vertices[i]).collect();
        let base = build_hull(&link).map(|h| h.volume()).unwrap_or(0.0);
        let mut with_v = link;
        with_v.push(self.vertices[v]);
        let cone = build_hull(&with_v).map(|h| h.volume()).unwrap_or(0.0);
        cone - base
    }

    /// Reduces the hull to `k` colors by repeatedly removing the vertex whose
    /// removal loses the least enclosed volume, re-hulling after each removal.
    pub fn simplify_to_palette(&self, k: usize) -> Result<Vec<ColorPoint>> {
        if k < 4 || k > self.vertices.len() {
            return Err(Error::InvalidK {
                k,
                min: 4,
                max: self.vertices.len(),
            });
        }
        let mut hull = self.clone();
        while hull.vertices.len() > k {
            let mut best: Option<(f64, usize)> = None;
            for v in 0..hull.vertices.len() {
                let cost = hull.removal_cost(v);
                if best.map_or(true, |(c, _)| cost < c) {
                    best = Some((cost, v));
                }
            }
            let (_, drop) = best.expect("at least one vertex");
            let rest: Vec<ColorPoint> = hull
                .vertices
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != drop)
                .map(|(_, c)| *c)
                .collect();
            hull = match build_hull(&rest) {
                Ok(h) => h,
                // Fewer than four independent colors remain; stop here.
                Err(Error::DegenerateInput(_)) => break,
                Err(e) => return Err(e),
            };
        }
        Ok(hull.vertices.iter().map(|c| c.clamp(0.0, 1.0)).collect())
    }

    /// OBJ-compatible text: `v r g b` per vertex and 1-based `f i j k` per facet.
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v.r, v.g, v.b);
        }
        for f in &self.facets {
            let [i, j, k] = f.indices;
            let _ = writeln!(out, "f {} {} {}", i + 1, j + 1, k + 1);
        }
        out
    }
}
