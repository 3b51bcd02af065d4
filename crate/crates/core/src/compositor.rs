//! Color mixing for ordered layers.
//!
//! Layer 0 is the opaque background and layer `K` is the topmost layer.
//! Compositing a stack of opacities with the over operator is equivalent to a
//! convex combination of the palette colors; the weights of that combination
//! are kept in log space so long stacks of nearly transparent layers stay
//! numerically well behaved.

use crate::color::ColorPoint;
use crate::error::{Error, Result};

/// Floor applied to `log(0)` before it enters a sum.
pub const LOG_FLOOR: f64 = -80.0;

/// Tolerance used by [`logweights_to_color`] when checking normalization.
pub const NORMALIZATION_TOL: f64 = 1e-4;

/// Partial sums at or below this are treated as empty by [`weights_to_alphas`].
pub const PARTIAL_SUM_GUARD: f64 = 1e-9;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(sigmoid(x))`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[inline]
fn clamped_ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

/// Per-layer opacities `α_0..α_K`, with `α_0` pinned to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector {
    alphas: Vec<f64>,
}

impl AlphaVector {
    /// Builds the vector from the layer opacities `α_1..α_K`.
    pub fn from_layers(layers: &[f64]) -> Result<Self> {
        let mut alphas = Vec::with_capacity(layers.len() + 1);
        alphas.push(1.0);
        alphas.extend_from_slice(layers);
        Self::new(alphas)
    }

    /// Builds the vector from all `K+1` entries; `alphas[0]` must be exactly one.
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::InvalidArgument(
                "alpha vector needs a background and at least one layer".into(),
            ));
        }
        if alphas[0] != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "background alpha must be 1, got {}",
                alphas[0]
            )));
        }
        if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidArgument(format!("alpha {a} outside [0,1]")));
        }
        Ok(Self { alphas })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alphas
    }

    /// Number of layers `K` (background excluded).
    pub fn layer_count(&self) -> usize {
        self.alphas.len() - 1
    }
}

/// Log-domain mixing weights `w_0..w_K` with `Σ exp(w_i) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarycentricWeights {
    pub logw: Vec<f64>,
}

impl BarycentricWeights {
    pub fn from_linear(weights: &[f64]) -> Self {
        Self {
            logw: weights.iter().map(|&w| clamped_ln(w)).collect(),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.logw.iter().map(|w| w.exp()).collect()
    }

    pub fn sum(&self) -> f64 {
        self.logw.iter().map(|w| w.exp()).sum()
    }

    pub fn len(&self) -> usize {
        self.logw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logw.is_empty()
    }
}

/// Places `a` over `b`.
pub fn over(color_a: ColorPoint, alpha_a: f64, color_b: ColorPoint, alpha_b: f64) -> (ColorPoint, f64) {
    let color = color_a * alpha_a + color_b * (alpha_b * (1.0 - alpha_a));
    (color, alpha_a + alpha_b * (1.0 - alpha_a))
}

/// Direct ordered composite `c_K + Σ (c_{i-1} - c_i) Π_{j≥i} (1 - α_j)`.
pub fn composite_direct(colors: &[ColorPoint], alphas: &AlphaVector) -> Result<ColorPoint> {
    let a = alphas.as_slice();
    if colors.len() != a.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: colors.len(),
        });
    }
    let k = a.len() - 1;
    let mut out = colors[k];
    let mut transmit = 1.0;
    for i in (1..=k).rev() {
        transmit *= 1.0 - a[i];
        out = out + (colors[i - 1] - colors[i]) * transmit;
    }
    Ok(out)
}

/// Converts opacities to log-space barycentric weights.
///
/// `w_0 = Σ_{j≥1} log(1-α_j)` and `w_i = log α_i + Σ_{j>i} log(1-α_j)`, so the
/// topmost layer gets `w_K = log α_K`.
pub fn alphas_to_logweights(alphas: &AlphaVector) -> BarycentricWeights {
    let a = alphas.as_slice();
    let k = a.len() - 1;
    let mut logw = vec![0.0; k + 1];
    let mut suffix = 0.0;
    for i in (1..=k).rev() {
        logw[i] = clamped_ln(a[i]) + suffix;
        suffix += clamped_ln(1.0 - a[i]);
    }
    logw[0] = suffix;
    BarycentricWeights { logw }
}

/// `Σ_i exp(w_i) c_i` over all `K+1` colors, background included.
pub fn logweights_to_color(weights: &BarycentricWeights, colors: &[ColorPoint]) -> Result<ColorPoint> {
    if colors.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: weights.len(),
            got: colors.len(),
        });
    }
    let sum = weights.sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized(sum));
    }
    Ok(weights
        .logw
        .iter()
        .zip(colors)
        .fold(ColorPoint::BLACK, |acc, (w, c)| acc + *c * w.exp()))
}

/// Inverse of [`alphas_to_logweights`] for a fixed layer order.
///
/// With partial sums `W_i = Σ_{j≤i} exp(w_j)`, `α_i = exp(w_i) / W_i`.
pub fn weights_to_alphas(weights: &BarycentricWeights) -> AlphaVector {
    let mut alphas = Vec::with_capacity(weights.len());
    let mut partial = 0.0;
    for (i, w) in weights.logw.iter().enumerate() {
        let e = w.exp();
        partial += e;
        let a = if i == 0 {
            1.0
        } else if partial > PARTIAL_SUM_GUARD {
            (e / partial).clamp(0.0, 1.0)
        } else {
            0.0
        };
        alphas.push(a);
    }
    AlphaVector { alphas }
}

/// Sigmoid per layer followed by the log-space conversion.
pub fn blend_activation(logits: &[f64]) -> BarycentricWeights {
    let mut alphas = vec![0.0; logits.len()];
    let mut weights = vec![0.0; logits.len() + 1];
    blend_weights_into(logits, &mut alphas, &mut weights);
    BarycentricWeights::from_linear(&weights)
}

/// Hot-path form of [`blend_activation`].
///
/// Writes `α_1..α_K` into `alphas` and the linear weights `exp(w_0..w_K)` into
/// `weights`. The log terms use `log σ(x)` and `log σ(-x)` directly, never
/// `log(1 - σ(x))`.
#[inline]
pub fn blend_weights_into(logits: &[f64], alphas: &mut [f64], weights: &mut [f64]) {
    let k = logits.len();
    debug_assert_eq!(alphas.len(), k);
    debug_assert_eq!(weights.len(), k + 1);
    let mut suffix = 0.0;
    for i in (0..k).rev() {
        let l = logits[i];
        alphas[i] = sigmoid(l);
        weights[i + 1] = (log_sigmoid(l) + suffix).exp();
        suffix += log_sigmoid(-l);
    }
    weights[0] = suffix.exp();
}

/// Vector-Jacobian product of [`blend_weights_into`].
///
/// `grad_weights[i]` is `∂L/∂exp(w_i)`; accumulates `∂L/∂logit` into
/// `grad_logits`. Uses `∂W_i/∂l_k = W_i(1-α_k)` for `k = i` and `-W_i α_k`
/// for every layer `k` above `i`.
#[inline]
pub fn blend_weights_vjp(alphas: &[f64], weights: &[f64], grad_weights: &[f64], grad_logits: &mut [f64]) {
    let mut below = grad_weights[0] * weights[0];
    for k in 0..alphas.len() {
        let a = alphas[k];
        let gw = grad_weights[k + 1] * weights[k + 1];
        grad_logits[k] += gw * (1.0 - a) - a * below;
        below += gw;
    }
}

/// Softmax over `[0, l_1..l_K]`: the order-free weighting used by the
/// direct-opaque baseline. Writes `K+1` weights.
#[inline]
pub fn direct_weights_into(logits: &[f64], weights: &mut [f64]) {
    let max = logits.iter().copied().fold(0.0_f64, f64::max);
    weights[0] = (-max).exp();
    let mut total = weights[0];
    for (w, l) in weights[1..].iter_mut().zip(logits) {
        *w = (l - max).exp();
        total += *w;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
}

/// Vector-Jacobian product of [`direct_weights_into`].
#[inline]
pub fn direct_weights_vjp(weights: &[f64], grad_weights: &[f64], grad_logits: &mut [f64]) {
    let mean: f64 = weights.iter().zip(grad_weights).map(|(w, g)| w * g).sum();
    for k in 0..grad_logits.len() {
        grad_logits[k] += weights[k + 1] * (grad_weights[k + 1] - mean);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(r: f64, g: f64, b: f64) -> ColorPoint {
        ColorPoint::new(r, g, b)
    }

    fn assert_close(a: ColorPoint, b: ColorPoint, tol: f64) {
        assert!(a.max_abs_diff(b) <= tol, "{a:?} vs {b:?}");
    }

    // Oracle: fold the over operator from the background upwards.
    fn fold_over(colors: &[ColorPoint], alphas: &[f64]) -> ColorPoint {
        let mut acc = colors[0];
        let mut acc_alpha = 1.0;
        for i in 1..colors.len() {
            let (col, a) = over(colors[i], alphas[i], acc, acc_alpha);
            acc = col;
            acc_alpha = a;
        }
        acc
    }

    fn stack() -> Vec<ColorPoint> {
        vec![c(0.0, 0.0, 0.0), c(0.0, 1.0, 0.0), c(0.0, 0.0, 1.0)]
    }

    #[test]
    fn over_examples() {
        let (col, a) = over(c(1.0, 0.0, 0.0), 1.0, c(0.3, 0.2, 0.9), 0.4);
        assert_close(col, c(1.0, 0.0, 0.0), 0.0);
        assert_eq!(a, 1.0);
        let (col, a) = over(c(0.7, 0.7, 0.7), 0.0, c(0.0, 0.0, 1.0), 1.0);
        assert_close(col, c(0.0, 0.0, 1.0), 0.0);
        assert_eq!(a, 1.0);
        let (col, a) = over(c(1.0, 0.0, 0.0), 0.5, c(0.0, 0.0, 1.0), 1.0);
        assert_close(col, c(0.5, 0.0, 0.5), 1e-15);
        assert_eq!(a, 1.0);
    }

    #[test]
    fn composite_direct_examples() {
        let p = vec![c(0.2, 0.3, 0.4), c(0.9, 0.1, 0.5)];
        let opaque = AlphaVector::from_layers(&[1.0]).unwrap();
        assert_close(composite_direct(&p, &opaque).unwrap(), p[1], 1e-15);
        let clear = AlphaVector::from_layers(&[0.0]).unwrap();
        assert_close(composite_direct(&p, &clear).unwrap(), p[0], 1e-15);

        let a = AlphaVector::from_layers(&[0.5, 0.25]).unwrap();
        let direct = composite_direct(&stack(), &a).unwrap();
        assert_close(direct, fold_over(&stack(), a.as_slice()), 1e-15);
        assert_close(direct, c(0.0, 0.375, 0.25), 1e-15);
    }

    #[test]
    fn composite_direct_rejects_length_mismatch() {
        let a = AlphaVector::from_layers(&[0.5, 0.25]).unwrap();
        assert!(matches!(
            composite_direct(&stack()[..2], &a),
            Err(Error::LengthMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn alpha_vector_validation() {
        assert!(AlphaVector::new(vec![0.5, 0.5]).is_err());
        assert!(AlphaVector::from_layers(&[1.5]).is_err());
        assert!(AlphaVector::from_layers(&[]).is_err());
    }

    #[test]
    fn logweight_examples() {
        let a = AlphaVector::from_layers(&[0.5, 0.25]).unwrap();
        let w = alphas_to_logweights(&a).weights();
        for (got, want) in w.iter().zip([0.375, 0.375, 0.25]) {
            assert!((got - want).abs() < 1e-15);
        }

        let top = AlphaVector::from_layers(&[0.3, 0.6, 1.0]).unwrap();
        let w = alphas_to_logweights(&top).weights();
        assert!(w[..3].iter().all(|&x| x < 1e-30));
        assert!((w[3] - 1.0).abs() < 1e-15);

        let none = AlphaVector::from_layers(&[0.0, 0.0, 0.0]).unwrap();
        let w = alphas_to_logweights(&none).weights();
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert!(w[1..].iter().all(|&x| x < 1e-30));
    }

    #[test]
    fn logweights_to_color_examples() {
        let p = stack();
        let bg = BarycentricWeights::from_linear(&[1.0, 0.0, 0.0]);
        assert_close(logweights_to_color(&bg, &p).unwrap(), p[0], 1e-15);

        let w = BarycentricWeights::from_linear(&[0.375, 0.375, 0.25]);
        let a = AlphaVector::from_layers(&[0.5, 0.25]).unwrap();
        assert_close(
            logweights_to_color(&w, &p).unwrap(),
            composite_direct(&p, &a).unwrap(),
            1e-15,
        );

        let cube = vec![c(0.0, 0.0, 0.0), c(1.0, 0.0, 0.0), c(0.0, 1.0, 0.0), c(0.0, 0.0, 1.0)];
        let uniform = BarycentricWeights::from_linear(&[0.25; 4]);
        assert_close(logweights_to_color(&uniform, &cube).unwrap(), c(0.25, 0.25, 0.25), 1e-15);

        let bad = BarycentricWeights::from_linear(&[0.5, 0.2, 0.2]);
        assert!(matches!(logweights_to_color(&bad, &p), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn weights_to_alphas_examples() {
        let a = weights_to_alphas(&BarycentricWeights::from_linear(&[0.375, 0.375, 0.25]));
        for (got, want) in a.as_slice().iter().zip([1.0, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-15);
        }
        let third = 1.0 / 3.0;
        let a = weights_to_alphas(&BarycentricWeights::from_linear(&[third; 3]));
        for (got, want) in a.as_slice().iter().zip([1.0, 0.5, third]) {
            assert!((got - want).abs() < 1e-12);
        }
        let a = weights_to_alphas(&BarycentricWeights::from_linear(&[0.0, 0.0, 0.0, 1.0]));
        assert_eq!(a.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn blend_activation_examples() {
        let w = blend_activation(&[0.0, 0.0]).weights();
        for (got, want) in w.iter().zip([0.25, 0.25, 0.5]) {
            assert!((got - want).abs() < 1e-15);
        }
        let w = blend_activation(&[0.0, 3.0, 40.0]).weights();
        assert!((w[3] - 1.0).abs() < 1e-15);
        assert!(w[..3].iter().all(|&x| x < 1e-17));
        let w = blend_activation(&[-40.0; 4]).weights();
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert!(w[1..].iter().all(|&x| x < 1e-17));
        assert!(w.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn swapping_layers_changes_the_composite() {
        let p = vec![c(0.1, 0.1, 0.1), c(1.0, 0.0, 0.0), c(0.0, 0.0, 1.0)];
        let swapped = vec![p[0], p[2], p[1]];
        let a = AlphaVector::from_layers(&[0.6, 0.3]).unwrap();
        let lhs = composite_direct(&p, &a).unwrap();
        let rhs = composite_direct(&swapped, &a).unwrap();
        assert!(lhs.max_abs_diff(rhs) > 1e-3);
    }

    #[test]
    fn random_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let k = rng.gen_range(1..=8);
            let layers: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
            let a = AlphaVector::from_layers(&layers).unwrap();
            let colors: Vec<ColorPoint> = (0..=k).map(|_| c(rng.gen(), rng.gen(), rng.gen())).collect();
            let w = alphas_to_logweights(&a);
            assert!((w.sum() - 1.0).abs() < 1e-6);
            let direct = composite_direct(&colors, &a).unwrap();
            assert_close(logweights_to_color(&w, &colors).unwrap(), direct, 1e-6);
            assert_close(fold_over(&colors, a.as_slice()), direct, 1e-9);
            let back = weights_to_alphas(&w);
            let ew = w.weights();
            let mut partial = 0.0;
            for i in 0..=k {
                partial += ew[i];
                if partial > 1e-6 {
                    assert!((back.as_slice()[i] - a.as_slice()[i]).abs() < 1e-6);
                }
            }
        }
    }

    fn fd_check(
        logits: &[f64],
        upstream: &[f64],
        forward: impl Fn(&[f64]) -> Vec<f64>,
        analytic: &[f64],
        tol: f64,
    ) {
        let h = 1e-4;
        for k in 0..logits.len() {
            let mut plus = logits.to_vec();
            let mut minus = logits.to_vec();
            plus[k] += h;
            minus[k] -= h;
            let f = |x: &[f64]| -> f64 { forward(x).iter().zip(upstream).map(|(w, g)| w * g).sum() };
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let rel = (analytic[k] - numeric).abs() / (analytic[k].abs() + numeric.abs()).max(1e-8);
            assert!(rel < tol, "k={k} analytic={} numeric={numeric} rel={rel}", analytic[k]);
        }
    }

    proptest! {
        #[test]
        fn blend_vjp_matches_finite_differences(
            logits in prop::collection::vec(-3.0f64..3.0, 1..8),
            seed in any::<u64>(),
        ) {
            let k = logits.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let upstream: Vec<f64> = (0..=k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut alphas = vec![0.0; k];
            let mut weights = vec![0.0; k + 1];
            blend_weights_into(&logits, &mut alphas, &mut weights);
            let mut grad = vec![0.0; k];
            blend_weights_vjp(&alphas, &weights, &upstream, &mut grad);
            let forward = |x: &[f64]| {
                let mut a = vec![0.0; x.len()];
                let mut w = vec![0.0; x.len() + 1];
                blend_weights_into(x, &mut a, &mut w);
                w
            };
            fd_check(&logits, &upstream, forward, &grad, 1e-5);
        }

        #[test]
        fn direct_vjp_matches_finite_differences(
            logits in prop::collection::vec(-3.0f64..3.0, 1..8),
            seed in any::<u64>(),
        ) {
            let k = logits.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let upstream: Vec<f64> = (0..=k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut weights = vec![0.0; k + 1];
            direct_weights_into(&logits, &mut weights);
            let mut grad = vec![0.0; k];
            direct_weights_vjp(&weights, &upstream, &mut grad);
            let forward = |x: &[f64]| {
                let mut w = vec![0.0; x.len() + 1];
                direct_weights_into(x, &mut w);
                w
            };
            fd_check(&logits, &upstream, forward, &grad, 1e-5);
        }

        #[test]
        fn blend_matches_explicit_sigmoid_path(logits in prop::collection::vec(-40.0f64..40.0, 1..8)) {
            let alphas: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
            let via_alphas = alphas_to_logweights(&AlphaVector::from_layers(&alphas).unwrap()).weights();
            let direct = blend_activation(&logits).weights();
            prop_assert!((blend_activation(&logits).sum() - 1.0).abs() < 1e-12);
            for (a, b) in via_alphas.iter().zip(&direct) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
