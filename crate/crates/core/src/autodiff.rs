//! Minimal scalar reverse-mode differentiation.
//!
//! [`Tape`] records a Wengert list where every node keeps at most two parents
//! with their local partial derivatives. [`Real`] abstracts over plain `f64`
//! and taped [`Var`]s so that numeric kernels (the spline bijector) are written
//! once and either evaluated directly or differentiated.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant living in the same context as `self`.
    fn lift(&self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    /// `ln(1 + e^x)` without overflow.
    fn softplus(self) -> Self;
}

impl Real for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn lift(&self, c: f64) -> Self {
        c
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn softplus(self) -> Self {
        if self > 30.0 {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [(usize, f64); 2],
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.index, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes so the allocation can be reused.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    fn push(&self, value: f64, parents: [(usize, f64); 2]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents });
        Var {
            tape: self,
            index: nodes.len() - 1,
            value,
        }
    }

    /// An independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, [(0, 0.0), (0, 0.0)])
    }

    /// Adjoints of every node given output seeds `(output, ∂L/∂output)`.
    pub fn gradient(&self, seeds: &[(Var<'_>, f64)]) -> Gradient {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        for (v, s) in seeds {
            adj[v.index] += s;
        }
        for i in (0..nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            for &(p, w) in &nodes[i].parents {
                if w != 0.0 {
                    adj[p] += w * a;
                }
            }
        }
        Gradient(adj)
    }
}

pub struct Gradient(Vec<f64>);

impl Gradient {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.0[v.index]
    }
}

impl<'t> Var<'t> {
    fn unary(self, value: f64, d: f64) -> Self {
        self.tape.push(value, [(self.index, d), (0, 0.0)])
    }

    fn binary(self, other: Self, value: f64, da: f64, db: f64) -> Self {
        self.tape.push(value, [(self.index, da), (other.index, db)])
    }
}

impl Add for Var<'_> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.binary(o, self.value + o.value, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.value - o.value, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.value * o.value, o.value, self.value)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.value / o.value;
        self.binary(o, q, 1.0 / o.value, -q / o.value)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

impl Add<f64> for Var<'_> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        self.unary(self.value + c, 1.0)
    }
}

impl Sub<f64> for Var<'_> {
    type Output = Self;
    fn sub(self, c: f64) -> Self {
        self.unary(self.value - c, 1.0)
    }
}

impl Mul<f64> for Var<'_> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        self.unary(self.value * c, c)
    }
}

impl Div<f64> for Var<'_> {
    type Output = Self;
    fn div(self, c: f64) -> Self {
        self.unary(self.value / c, 1.0 / c)
    }
}

impl Real for Var<'_> {
    fn value(&self) -> f64 {
        self.value
    }

    fn lift(&self, c: f64) -> Self {
        self.tape.var(c)
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Self {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    fn sqrt(self) -> Self {
        let r = self.value.sqrt();
        self.unary(r, 0.5 / r)
    }

    fn softplus(self) -> Self {
        let v = self.value;
        let sp = if v > 30.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
        // d/dx softplus = sigmoid
        let sig = if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { v.exp() / (1.0 + v.exp()) };
        self.unary(sp, sig)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<T: Real>(x: T, y: T) -> T {
        (x * y + x.exp()) / (y.sqrt() + 1.0) - (x * 3.0).softplus() + (y - 0.5).ln() * x
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x0, y0) = (0.7, 2.3);
        let tape = Tape::new();
        let x = tape.var(x0);
        let y = tape.var(y0);
        let out = f(x, y);
        assert_eq!(out.value(), f(x0, y0));
        let g = tape.gradient(&[(out, 1.0)]);
        let h = 1e-6;
        let dx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let dy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert!((g.wrt(x) - dx).abs() < 1e-8);
        assert!((g.wrt(y) - dy).abs() < 1e-8);
    }

    #[test]
    fn seeds_combine_linearly() {
        let tape = Tape::new();
        let x = tape.var(1.5);
        let a = x * x;
        let b = -x;
        let g = tape.gradient(&[(a, 2.0), (b, 3.0)]);
        assert_eq!(g.wrt(x), 2.0 * 3.0 - 3.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(Real::softplus(1000.0f64), 1000.0);
        assert!(Real::softplus(-1000.0f64) >= 0.0);
        let tape = Tape::new();
        let x = tape.var(800.0);
        let s = x.softplus();
        assert_eq!(s.value(), 800.0);
        assert_eq!(tape.gradient(&[(s, 1.0)]).wrt(x), 1.0);
    }
}
