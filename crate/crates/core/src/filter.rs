//! Piecewise-linear lightness map.
//!
//! The map splits `[0, 1]` into `T` equal segments. Segment `k` (0-based) has
//! slope proportional to `theta[k]`, and the whole curve is normalized by
//! `T / sum(theta)` so that the raw curve always passes through `(0, 0)` and
//! `(1, 1)`. With every `theta[k] > 0` the curve is monotone; negative slopes
//! give the non-monotonic variant. Outputs are clamped to `[0, 1]`.
//!
//! A scene-adaptive variant confines the curve to a lightness range
//! `[lo, hi]` by normalizing the input into the range, filtering, and mapping
//! back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this `|sum(theta)|` the normalization prefactor is treated as undefined.
pub const DEGENERATE_SUM: f64 = 1e-12;

/// Filter slopes, one per segment. Serializes as a plain JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterParams {
    theta: Vec<f64>,
}

impl FilterParams {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidConfig("filter needs at least one segment".into()));
        }
        Ok(Self { theta })
    }

    /// All-ones slopes: the identity curve.
    pub fn identity(segments: usize) -> Self {
        assert!(segments > 0, "segments must be positive");
        Self {
            theta: vec![1.0; segments],
        }
    }

    pub fn segments(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let theta: Vec<f64> = serde_json::from_str(s)?;
        Self::new(theta)
    }

    /// Precompute prefix sums; fails when the slopes sum to (nearly) zero.
    pub fn prepare(&self) -> Result<PiecewiseFilter<'_>> {
        PiecewiseFilter::new(&self.theta)
    }
}

/// Lightness interval `[lo, hi]` with `0 <= lo < hi <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightnessRange {
    lo: f64,
    hi: f64,
}

impl LightnessRange {
    pub const FULL: LightnessRange = LightnessRange { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::InvalidRange { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn normalize(&self, x: f64) -> f64 {
        ((x - self.lo) / self.width()).clamp(0.0, 1.0)
    }
}

/// A filter with its slope prefix sums precomputed.
#[derive(Debug, Clone)]
pub struct PiecewiseFilter<'a> {
    theta: &'a [f64],
    /// `prefix[k] = theta[0] + ... + theta[k-1]`
    prefix: Vec<f64>,
    sum: f64,
}

/// Raw evaluation of one input: segment index, offset into the segment, and
/// the unclamped curve value.
#[derive(Debug, Clone, Copy)]
struct Eval {
    segment: usize,
    offset: f64,
    raw: f64,
}

impl Eval {
    fn clamped(&self) -> bool {
        !(0.0..=1.0).contains(&self.raw)
    }
}

impl<'a> PiecewiseFilter<'a> {
    fn new(theta: &'a [f64]) -> Result<Self> {
        let mut prefix = Vec::with_capacity(theta.len() + 1);
        let mut acc = 0.0;
        prefix.push(0.0);
        for &t in theta {
            acc += t;
            prefix.push(acc);
        }
        if !(acc.abs() >= DEGENERATE_SUM) {
            return Err(Error::DegenerateFilter { sum: acc });
        }
        Ok(Self { theta, prefix, sum: acc })
    }

    fn segments(&self) -> usize {
        self.theta.len()
    }

    fn eval(&self, x: f64) -> Eval {
        let t = self.segments();
        let tf = t as f64;
        // x = k/T belongs to segment k (0-based), except x = 1 which stays in the last one.
        let segment = ((x * tf).floor() as usize).min(t - 1);
        let offset = x - segment as f64 / tf;
        let numer = tf * self.theta[segment] * offset + self.prefix[segment];
        Eval {
            segment,
            offset,
            raw: numer / self.sum,
        }
    }

    /// Unclamped curve value.
    pub fn raw(&self, x: f64) -> f64 {
        self.eval(x).raw
    }

    /// Curve value clamped to `[0, 1]`.
    pub fn apply(&self, x: f64) -> f64 {
        self.eval(x).raw.clamp(0.0, 1.0)
    }

    /// `d apply(x) / d theta`; zero when the output is clamped.
    pub fn jacobian(&self, x: f64) -> Vec<f64> {
        let t = self.segments();
        let e = self.eval(x);
        let mut out = vec![0.0; t];
        if e.clamped() {
            return out;
        }
        // F = N / S, so dF/dθ_j = (dN/dθ_j - F) / S with dN/dθ_j = 1 below the
        // active segment, T·offset on it, and 0 above it.
        for (j, slot) in out.iter_mut().enumerate() {
            let dn = if j < e.segment {
                1.0
            } else if j == e.segment {
                t as f64 * e.offset
            } else {
                0.0
            };
            *slot = (dn - e.raw) / self.sum;
        }
        out
    }

    /// Filter a whole lightness channel through the range sandwich
    /// `lo + (hi - lo) * F((x - lo) / (hi - lo))`.
    pub fn apply_channel(&self, l: &[f64], range: LightnessRange) -> Vec<f64> {
        l.iter()
            .map(|&x| range.lo + range.width() * self.apply(range.normalize(x)))
            .collect()
    }

    /// Vector-Jacobian product for [`apply_channel`](Self::apply_channel):
    /// given `upstream[p] = dLoss/dOut[p]`, returns `dLoss/dtheta`.
    pub fn channel_vjp(&self, l: &[f64], range: LightnessRange, upstream: &[f64]) -> Vec<f64> {
        assert_eq!(l.len(), upstream.len(), "upstream gradient length");
        let t = self.segments();
        let tf = t as f64;
        // Per-segment sums of w and w·T·offset, plus sum of w·F over all pixels.
        let mut seg_weight = vec![0.0; t];
        let mut seg_slope = vec![0.0; t];
        let mut weighted_value = 0.0;
        for (&x, &g) in l.iter().zip(upstream) {
            if g == 0.0 {
                continue;
            }
            let e = self.eval(range.normalize(x));
            if e.clamped() {
                continue;
            }
            let w = g * range.width();
            seg_weight[e.segment] += w;
            seg_slope[e.segment] += w * tf * e.offset;
            weighted_value += w * e.raw;
        }
        let mut grad = vec![0.0; t];
        let mut above = 0.0;
        for j in (0..t).rev() {
            grad[j] = (seg_slope[j] + above - weighted_value) / self.sum;
            above += seg_weight[j];
        }
        grad
    }
}

/// Evaluate the clamped curve at one lightness value.
pub fn apply_filter(params: &FilterParams, x: f64) -> Result<f64> {
    Ok(params.prepare()?.apply(x))
}

pub fn apply_filter_image(params: &FilterParams, l: &[f64], range: LightnessRange) -> Result<Vec<f64>> {
    Ok(params.prepare()?.apply_channel(l, range))
}

pub fn filter_jacobian(params: &FilterParams, x: f64) -> Result<Vec<f64>> {
    Ok(params.prepare()?.jacobian(x))
}

/// `[min L, max L]` of a lightness channel.
pub fn scene_range(l: &[f64]) -> Result<LightnessRange> {
    let (lo, hi) = l
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if l.is_empty() {
        return Err(Error::EmptySet);
    }
    if lo >= hi {
        return Err(Error::DegenerateRange { value: lo });
    }
    LightnessRange::new(lo, hi)
}
