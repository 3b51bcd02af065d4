//! RGB color values used throughout the crate.
//!
//! Channels are display-referred reals, i.e. 8-bit values divided by 255.

use std::ops::{Add, Mul, Sub};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ColorPoint {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl ColorPoint {
    pub const BLACK: ColorPoint = ColorPoint::new(0.0, 0.0, 0.0);
    pub const WHITE: ColorPoint = ColorPoint::new(1.0, 1.0, 1.0);

    pub const fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    pub fn splat(v: f64) -> Self {
        Self::new(v, v, v)
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn to_vec3(self) -> Vector3<f64> {
        Vector3::new(self.r, self.g, self.b)
    }

    pub fn from_vec3(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn is_finite(self) -> bool {
        self.r.is_finite() && self.g.is_finite() && self.b.is_finite()
    }

    pub fn dot(self, o: Self) -> f64 {
        self.r * o.r + self.g * o.g + self.b * o.b
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, o: Self) -> f64 {
        (self - o).norm()
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        Self::new(self.r.clamp(lo, hi), self.g.clamp(lo, hi), self.b.clamp(lo, hi))
    }

    pub fn max_abs_diff(self, o: Self) -> f64 {
        (self.r - o.r).abs().max((self.g - o.g).abs()).max((self.b - o.b).abs())
    }

    /// Quantizes to 8 bits per channel after clamping to [0,1].
    pub fn to_rgb8(self) -> [u8; 3] {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        [q(self.r), q(self.g), q(self.b)]
    }

    pub fn from_rgb8(p: [u8; 3]) -> Self {
        Self::new(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0)
    }

    pub fn to_hex(self) -> String {
        let [r, g, b] = self.to_rgb8();
        format!("#{r:02X}{g:02X}{b:02X}")
    }

    /// Parses `#RRGGBB` (the leading `#` is optional).
    pub fn from_hex(s: &str) -> Result<Self> {
        let h = s.strip_prefix('#').unwrap_or(s);
        if h.len() != 6 || !h.is_ascii() {
            return Err(Error::InvalidArgument(format!("bad hex color `{s}`")));
        }
        let channel = |i: usize| {
            u8::from_str_radix(&h[i..i + 2], 16)
                .map_err(|_| Error::InvalidArgument(format!("bad hex color `{s}`")))
        };
        Ok(Self::from_rgb8([channel(0)?, channel(2)?, channel(4)?]))
    }
}

impl Add for ColorPoint {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.r + o.r, self.g + o.g, self.b + o.b)
    }
}

impl Sub for ColorPoint {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.r - o.r, self.g - o.g, self.b - o.b)
    }
}

impl Mul<f64> for ColorPoint {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.r * s, self.g * s, self.b * s)
    }
}
