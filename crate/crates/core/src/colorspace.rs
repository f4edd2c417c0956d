//! sRGB <-> CIELAB conversion.
//!
//! sRGB uses the IEC 61966-2-1 transfer curve and D65 primaries. Lightness is
//! stored as `L*/100` so that it lives in `[0, 1]`; `a*` and `b*` keep their
//! native scale. All arithmetic is `f64`.
//!
//! Besides the image-level conversions, this module exposes the per-pixel
//! Lab -> sRGB map together with its derivative with respect to lightness,
//! which is what the attack needs to push gradients from RGB back to `L`.

use std::sync::LazyLock;

use crate::error::{Error, Result};

/// Linear sRGB -> XYZ (D65).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// Reference white as the image of linear (1, 1, 1), so that sRGB white maps
/// to a* = b* = 0 exactly.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let c00 = cof(1, 2, 1, 2);
    let c01 = -cof(1, 2, 0, 2);
    let c02 = cof(1, 2, 0, 1);
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let inv_det = 1.0 / det;
    [
        [c00 * inv_det, -cof(0, 2, 1, 2) * inv_det, cof(0, 1, 1, 2) * inv_det],
        [c01 * inv_det, cof(0, 2, 0, 2) * inv_det, -cof(0, 1, 0, 2) * inv_det],
        [c02 * inv_det, -cof(0, 2, 0, 1) * inv_det, cof(0, 1, 0, 1) * inv_det],
    ]
}

/// An 8-bit sRGB image, interleaved `r, g, b` in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bytes for {width}x{height} RGB", width * height * 3),
                got: format!("{} bytes", data.len()),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel values scaled to `[0, 1]`, the model's input representation.
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v) / 255.0).collect()
    }
}

/// A CIELAB image with lightness normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub l: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LabImage {
    pub fn new(width: usize, height: usize, l: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if l.len() != n || a.len() != n || b.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} pixels per channel"),
                got: format!("L={}, a={}, b={}", l.len(), a.len(), b.len()),
            });
        }
        if l.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("lightness outside [0, 1]".into()));
        }
        Ok(Self { width, height, l, a, b })
    }

    /// Same chroma, new lightness channel.
    pub fn with_lightness(&self, l: Vec<f64>) -> Self {
        assert_eq!(l.len(), self.l.len(), "lightness channel length");
        Self {
            width: self.width,
            height: self.height,
            l,
            a: self.a.clone(),
            b: self.b.clone(),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn linear_to_srgb_deriv(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92
    } else {
        1.055 / 2.4 * c.powf(1.0 / 2.4 - 1.0)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let f3 = f * f * f;
    if f3 > EPSILON {
        f3
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

fn lab_f_inv_deriv(f: f64) -> f64 {
    if f * f * f > EPSILON {
        3.0 * f * f
    } else {
        116.0 / KAPPA
    }
}

/// 8-bit sRGB to `(L in [0,1], a*, b*)`.
pub fn rgb8_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(f64::from(c) / 255.0));
    let mut xyz = [0.0; 3];
    for (row, out) in RGB_TO_XYZ.iter().zip(xyz.iter_mut()) {
        *out = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    let l = ((116.0 * fy - 16.0) / 100.0).clamp(0.0, 1.0);
    [l, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Lab to linear RGB before clamping, plus `d(linear)/dL` for normalized `L`.
fn lab_to_linear_with_deriv(l: f64, a: f64, b: f64) -> ([f64; 3], [f64; 3]) {
    let fy = (100.0 * l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let xyz = [
        WHITE[0] * lab_f_inv(fx),
        WHITE[1] * lab_f_inv(fy),
        WHITE[2] * lab_f_inv(fz),
    ];
    let dfy = 100.0 / 116.0;
    let dxyz = [
        WHITE[0] * lab_f_inv_deriv(fx) * dfy,
        WHITE[1] * lab_f_inv_deriv(fy) * dfy,
        WHITE[2] * lab_f_inv_deriv(fz) * dfy,
    ];
    let m = &*XYZ_TO_RGB;
    let mut lin = [0.0; 3];
    let mut dlin = [0.0; 3];
    for c in 0..3 {
        lin[c] = m[c][0] * xyz[0] + m[c][1] * xyz[1] + m[c][2] * xyz[2];
        dlin[c] = m[c][0] * dxyz[0] + m[c][1] * dxyz[1] + m[c][2] * dxyz[2];
    }
    (lin, dlin)
}

/// Lab to continuous sRGB in `[0, 1]`; out-of-gamut channels are clamped in
/// linear light before the transfer curve.
pub fn lab_to_srgb_unit(l: f64, a: f64, b: f64) -> [f64; 3] {
    let (lin, _) = lab_to_linear_with_deriv(l, a, b);
    lin.map(|c| linear_to_srgb(c.clamp(0.0, 1.0)))
}

/// [`lab_to_srgb_unit`] together with the partial derivative of each output
/// channel with respect to normalized lightness. Clamped channels have zero
/// derivative.
pub fn lab_to_srgb_unit_with_deriv(l: f64, a: f64, b: f64) -> ([f64; 3], [f64; 3]) {
    let (lin, dlin) = lab_to_linear_with_deriv(l, a, b);
    let mut out = [0.0; 3];
    let mut deriv = [0.0; 3];
    for c in 0..3 {
        if lin[c] <= 0.0 {
            out[c] = 0.0;
        } else if lin[c] >= 1.0 {
            out[c] = 1.0;
        } else {
            out[c] = linear_to_srgb(lin[c]);
            deriv[c] = linear_to_srgb_deriv(lin[c]) * dlin[c];
        }
    }
    (out, deriv)
}

pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let n = img.pixel_count();
    let mut l = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for px in img.data.chunks_exact(3) {
        let [pl, pa, pb] = rgb8_to_lab([px[0], px[1], px[2]]);
        l.push(pl);
        a.push(pa);
        b.push(pb);
    }
    LabImage {
        width: img.width,
        height: img.height,
        l,
        a,
        b,
    }
}

/// Continuous interleaved sRGB in `[0, 1]`, no quantization.
pub fn lab_to_unit_rgb(img: &LabImage) -> Vec<f64> {
    let mut out = Vec::with_capacity(img.pixel_count() * 3);
    for i in 0..img.pixel_count() {
        out.extend_from_slice(&lab_to_srgb_unit(img.l[i], img.a[i], img.b[i]));
    }
    out
}

pub fn unit_rgb_to_image(width: usize, height: usize, unit: &[f64]) -> RgbImage {
    assert_eq!(unit.len(), width * height * 3, "unit RGB buffer length");
    RgbImage {
        width,
        height,
        data: unit.iter().map(|&v| quantize_unit(v)).collect(),
    }
}

pub fn lab_to_rgb(img: &LabImage) -> RgbImage {
    unit_rgb_to_image(img.width, img.height, &lab_to_unit_rgb(img))
}

/// The 8-bit image an attack is scored on. Identical to [`lab_to_rgb`]; kept
/// as a separate entry point so evaluation never scores floating-point images.
pub fn quantize_success_image(img: &LabImage) -> RgbImage {
    lab_to_rgb(img)
}
