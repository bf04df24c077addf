//! Monotone rational-quadratic spline on `[-B, B]` with identity tails.
//!
//! A conditioner emits `3K + 1` unconstrained values per transformed
//! coordinate: `K` bin widths, `K` bin heights and `K + 1` knot derivatives.
//! Widths and heights go through a softmax with a floor of `1e-3` of the
//! interval; interior derivatives through a shifted softplus so that a zero
//! input gives a derivative of exactly one. The two boundary derivatives are
//! pinned to one, which makes the spline C¹ with the identity tails and leaves
//! the corresponding raw entries unused.

use crate::autodiff::Real;

pub const MIN_BIN_FRACTION: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

/// Raw parameter count per transformed coordinate.
pub const fn raw_len(bins: usize) -> usize {
    3 * bins + 1
}

fn derivative_offset() -> f64 {
    ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Knot positions, values, and derivatives of one spline.
#[derive(Debug, Clone)]
pub struct RqsParams<T = f64> {
    bound: f64,
    xs: Vec<T>,
    ys: Vec<T>,
    ds: Vec<T>,
}

fn softmax_knots<T: Real>(raw: &[T], bound: f64) -> Vec<T> {
    let bins = raw.len();
    let max = raw.iter().map(|r| r.value()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<T> = raw.iter().map(|&r| (r - max).exp()).collect();
    let mut total = exps[0];
    for &e in &exps[1..] {
        total = total + e;
    }
    let span = 2.0 * bound;
    let scale = span * (1.0 - MIN_BIN_FRACTION * bins as f64);
    let mut knots = Vec::with_capacity(bins + 1);
    let lo = raw[0].lift(-bound);
    knots.push(lo);
    let mut acc = lo;
    for (k, &e) in exps.iter().enumerate() {
        if k + 1 == bins {
            knots.push(raw[0].lift(bound));
        } else {
            acc = acc + (e / total) * scale + span * MIN_BIN_FRACTION;
            knots.push(acc);
        }
    }
    knots
}

impl<T: Real> RqsParams<T> {
    /// Maps unconstrained conditioner output (length `3K + 1`) to a valid spline.
    pub fn from_raw(raw: &[T], bins: usize, bound: f64) -> Self {
        assert_eq!(raw.len(), raw_len(bins), "raw spline parameter length");
        assert!(bins >= 1 && bound > 0.0);
        let xs = softmax_knots(&raw[..bins], bound);
        let ys = softmax_knots(&raw[bins..2 * bins], bound);
        let offset = derivative_offset();
        let one = raw[0].lift(1.0);
        let mut ds = Vec::with_capacity(bins + 1);
        ds.push(one);
        for &r in &raw[2 * bins + 1..3 * bins] {
            ds.push((r + offset).softplus() + MIN_DERIVATIVE);
        }
        ds.push(one);
        RqsParams { bound, xs, ys, ds }
    }

    pub fn bins(&self) -> usize {
        self.xs.len() - 1
    }

    fn locate(knots: &[T], v: f64) -> usize {
        let bins = knots.len() - 1;
        let mut k = 0;
        while k + 1 < bins && knots[k + 1].value() <= v {
            k += 1;
        }
        k
    }

    fn log_slope(&self, k: usize, xi: T) -> T {
        let w = self.xs[k + 1] - self.xs[k];
        let h = self.ys[k + 1] - self.ys[k];
        let s = h / w;
        let (d0, d1) = (self.ds[k], self.ds[k + 1]);
        let om = -xi + 1.0;
        let mix = xi * om;
        let den = s + (d1 + d0 - s * 2.0) * mix;
        let num = s * s * (d1 * xi * xi + s * mix * 2.0 + d0 * om * om);
        num.ln() - den.ln() * 2.0
    }

    /// `(y, log dy/dx)` of the forward map.
    pub fn forward(&self, x: T) -> (T, T) {
        let v = x.value();
        if v < -self.bound || v > self.bound {
            return (x, x.lift(0.0));
        }
        let k = Self::locate(&self.xs, v);
        let w = self.xs[k + 1] - self.xs[k];
        let h = self.ys[k + 1] - self.ys[k];
        let s = h / w;
        let (d0, d1) = (self.ds[k], self.ds[k + 1]);
        let xi = (x - self.xs[k]) / w;
        let mix = xi * (-xi + 1.0);
        let num = h * (s * xi * xi + d0 * mix);
        let den = s + (d1 + d0 - s * 2.0) * mix;
        (self.ys[k] + num / den, self.log_slope(k, xi))
    }

    /// `(x, log dx/dy)` of the inverse map, solving the bin's quadratic.
    pub fn inverse(&self, y: T) -> (T, T) {
        let v = y.value();
        if v < -self.bound || v > self.bound {
            return (y, y.lift(0.0));
        }
        let k = Self::locate(&self.ys, v);
        let w = self.xs[k + 1] - self.xs[k];
        let h = self.ys[k + 1] - self.ys[k];
        let s = h / w;
        let (d0, d1) = (self.ds[k], self.ds[k + 1]);
        let dy = y - self.ys[k];
        let delta = d1 + d0 - s * 2.0;
        let a = h * (s - d0) + dy * delta;
        let b = h * d0 - dy * delta;
        let c = -(s * dy);
        let disc = b * b - a * c * 4.0;
        let root = if disc.value() > 0.0 { disc.sqrt() } else { disc.lift(0.0) };
        let xi = (c * 2.0) / (-b - root);
        (self.xs[k] + xi * w, -self.log_slope(k, xi))
    }

    pub fn apply(&self, x: T, direction: Direction) -> (T, T) {
        match direction {
            Direction::Forward => self.forward(x),
            Direction::Inverse => self.inverse(x),
        }
    }
}

/// Element-wise spline transform with log-derivative.
pub fn rqs_apply(x: f64, params: &RqsParams, direction: Direction) -> (f64, f64) {
    params.apply(x, direction)
}
