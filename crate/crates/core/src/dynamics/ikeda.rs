use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bifurcation parameter of the Ikeda map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkedaParams {
    pub u: f64,
}

impl Default for IkedaParams {
    fn default() -> Self {
        IkedaParams { u: 0.9 }
    }
}

impl IkedaParams {
    /// Radius `sqrt(1 / (1 - u))` of the absorbing ball around the origin.
    pub fn ball_radius(&self) -> f64 {
        (1.0 / (1.0 - self.u)).sqrt()
    }
}

#[inline]
fn twist(x1: f64, x2: f64) -> f64 {
    0.4 - 6.0 / (1.0 + x1 * x1 + x2 * x2)
}

/// One forward iteration of the Ikeda map.
pub fn ikeda_forward(x: [f64; 2], p: &IkedaParams) -> [f64; 2] {
    let t = twist(x[0], x[1]);
    let (s, c) = t.sin_cos();
    [
        1.0 + p.u * (x[0] * c - x[1] * s),
        p.u * (x[0] * s + x[1] * c),
    ]
}

/// Exact inverse of [`ikeda_forward`]. The rotation preserves the norm, so
/// the twist angle can be recovered from the un-scaled point.
pub fn ikeda_inverse(x: [f64; 2], p: &IkedaParams) -> Result<[f64; 2]> {
    if p.u == 0.0 {
        return Err(Error::NonInvertible("Ikeda map with u = 0 is constant".into()));
    }
    Ok(ikeda_inverse_unchecked(x, p.u))
}

#[inline]
pub fn ikeda_inverse_unchecked(x: [f64; 2], u: f64) -> [f64; 2] {
    let h1 = (x[0] - 1.0) / u;
    let h2 = x[1] / u;
    let t = twist(h1, h2);
    let (s, c) = t.sin_cos();
    [h1 * c + h2 * s, -h1 * s + h2 * c]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    const P: IkedaParams = IkedaParams { u: 0.9 };

    #[test]
    fn forward_examples() {
        assert_eq!(ikeda_forward([0.0, 0.0], &P), [1.0, 0.0]);
        let y = ikeda_forward([1.0, 0.0], &P);
        assert!((y[0] - (1.0 + 0.9 * (-2.6f64).cos())).abs() < 1e-15);
        assert!((y[0] - 0.228_800).abs() < 1e-6);
        assert!((y[1] + 0.463_951).abs() < 1e-6);
        let zero = IkedaParams { u: 0.0 };
        assert_eq!(ikeda_forward([3.0, -7.5], &zero), [1.0, 0.0]);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(ikeda_inverse([1.0, 0.0], &P).unwrap(), [0.0, 0.0]);
        let x = [0.5, -0.3];
        let back = ikeda_forward(ikeda_inverse(x, &P).unwrap(), &P);
        assert!((back[0] - x[0]).abs() < 1e-10 && (back[1] - x[1]).abs() < 1e-10);
        assert!(ikeda_inverse(x, &IkedaParams { u: 0.0 }).is_err());
    }

    #[test]
    fn round_trip_on_random_points() {
        let mut rng = RngStream::new(17);
        for (count, half) in [(1000, 2.0), (10_000, 3.0)] {
            let mut worst = 0.0f64;
            for _ in 0..count {
                let x = [half * (2.0 * rng.uniform() - 1.0), half * (2.0 * rng.uniform() - 1.0)];
                let r = ikeda_inverse(ikeda_forward(x, &P), &P).unwrap();
                worst = worst.max((r[0] - x[0]).abs()).max((r[1] - x[1]).abs());
            }
            assert!(worst < 1e-10, "{worst}");
        }
    }
}
