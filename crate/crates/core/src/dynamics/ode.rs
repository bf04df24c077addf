//! Fixed-step explicit Runge-Kutta schemes.

use serde::{Deserialize, Serialize};

use super::lorenz::{lorenz_vector_field, Lorenz63Params};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Classic fourth-order Runge-Kutta.
    #[default]
    Rk4,
    /// Tsitouras 5(4) tableau, used here without error control.
    Tsit5,
}

#[inline]
fn axpy<const N: usize>(x: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *x;
    for (coef, k) in terms {
        for i in 0..N {
            out[i] += h * coef * k[i];
        }
    }
    out
}

pub fn rk4_step<const N: usize>(f: impl Fn(&[f64; N]) -> [f64; N], x: &[f64; N], h: f64) -> [f64; N] {
    let k1 = f(x);
    let k2 = f(&axpy(x, h, &[(0.5, &k1)]));
    let k3 = f(&axpy(x, h, &[(0.5, &k2)]));
    let k4 = f(&axpy(x, h, &[(1.0, &k3)]));
    axpy(x, h, &[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)])
}

// Tsit5 coefficients; the 5th-order weights coincide with the last stage row.
const A21: f64 = 0.161;
const A31: f64 = -0.008_480_655_492_356_989;
const A32: f64 = 0.335_480_655_492_357;
const A41: f64 = 2.897_153_057_105_493;
const A42: f64 = -6.359_448_489_975_075;
const A43: f64 = 4.362_295_432_869_581_5;
const A51: f64 = 5.325_864_828_439_257;
const A52: f64 = -11.748_883_564_062_828;
const A53: f64 = 7.495_539_342_889_836_5;
const A54: f64 = -0.092_495_066_361_755_25;
const A61: f64 = 5.861_455_442_946_42;
const A62: f64 = -12.920_969_317_847_11;
const A63: f64 = 8.159_367_898_576_159;
const A64: f64 = -0.071_584_973_281_401;
const A65: f64 = -0.028_269_050_394_068_383;
const B1: f64 = 0.096_460_766_818_065_23;
const B2: f64 = 0.01;
const B3: f64 = 0.479_889_650_414_499_6;
const B4: f64 = 1.379_008_574_103_742;
const B5: f64 = -3.290_069_515_436_081;
const B6: f64 = 2.324_710_524_099_774;

pub fn tsit5_step<const N: usize>(f: impl Fn(&[f64; N]) -> [f64; N], x: &[f64; N], h: f64) -> [f64; N] {
    let k1 = f(x);
    let k2 = f(&axpy(x, h, &[(A21, &k1)]));
    let k3 = f(&axpy(x, h, &[(A31, &k1), (A32, &k2)]));
    let k4 = f(&axpy(x, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
    let k5 = f(&axpy(x, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
    let k6 = f(&axpy(x, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]));
    axpy(x, h, &[(B1, &k1), (B2, &k2), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)])
}

/// Number of fixed steps of size `h` that make up `dt`, if it is a whole number.
pub fn substep_count(dt: f64, h: f64) -> Result<usize> {
    if !(dt > 0.0 && h > 0.0) {
        return Err(Error::Config(format!("step {dt} and internal step {h} must be positive")));
    }
    let ratio = dt / h;
    let steps = ratio.round();
    if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Config(format!(
            "step {dt} is not a whole multiple of the internal step {h}"
        )));
    }
    Ok(steps as usize)
}

pub fn integrate_with(
    x0: [f64; 3],
    p: &Lorenz63Params,
    steps: usize,
    h: f64,
    scheme: Scheme,
) -> [f64; 3] {
    let f = |x: &[f64; 3]| lorenz_vector_field(x, p);
    let mut x = x0;
    for _ in 0..steps {
        x = match scheme {
            Scheme::Rk4 => rk4_step(f, &x, h),
            Scheme::Tsit5 => tsit5_step(f, &x, h),
        };
    }
    x
}

/// Advances Lorenz '63 by `dt` time units with `dt / h` fixed RK4 steps.
pub fn integrate(x0: [f64; 3], p: &Lorenz63Params, dt: f64, h: f64) -> Result<[f64; 3]> {
    let steps = substep_count(dt, h)?;
    Ok(integrate_with(x0, p, steps, h, Scheme::Rk4))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn equilibrium_is_preserved() {
        let p = Lorenz63Params::default();
        let eq = [6.0 * 2f64.sqrt(), 6.0 * 2f64.sqrt(), 27.0];
        let out = integrate(eq, &p, 0.12, 0.01).unwrap();
        assert!(dist(out, eq) < 1e-9);
        for scheme in [Scheme::Rk4, Scheme::Tsit5] {
            let out = integrate_with(eq, &p, 10_000, 0.01, scheme);
            assert!(dist(out, eq) < 1e-9, "{scheme:?} drifted {}", dist(out, eq));
        }
    }

    #[test]
    fn step_count_is_dt_over_h() {
        assert_eq!(substep_count(0.12, 0.01).unwrap(), 12);
        assert_eq!(substep_count(1.0, 0.01).unwrap(), 100);
        assert!(substep_count(0.125, 0.01).is_err());
        assert!(substep_count(0.0, 0.01).is_err());
        assert!(integrate([1.0, 1.0, 1.0], &Lorenz63Params::default(), 0.105, 0.01).is_err());
    }

    #[test]
    fn integrate_counts_steps() {
        let p = Lorenz63Params::default();
        let direct = integrate_with([8.0, 0.0, 0.0], &p, 12, 0.01, Scheme::Rk4);
        assert_eq!(integrate([8.0, 0.0, 0.0], &p, 0.12, 0.01).unwrap(), direct);
    }

    /// Richardson ratio |y(h) - y(h/2)| / |y(h/2) - y(h/4)| for h = 0.01 over dt = 0.12.
    fn richardson_ratio(scheme: Scheme) -> f64 {
        let p = Lorenz63Params::default();
        let run = |h: f64| integrate_with([8.0, 0.0, 0.0], &p, (0.12 / h).round() as usize, h, scheme);
        let (a, b, c) = (run(0.01), run(0.005), run(0.0025));
        dist(a, b) / dist(b, c)
    }

    #[test]
    fn rk4_is_fourth_order() {
        let ratio = richardson_ratio(Scheme::Rk4);
        assert!(ratio >= 16.0, "richardson ratio {ratio}");
    }

    #[test]
    fn tsit5_is_at_least_fourth_order() {
        let ratio = richardson_ratio(Scheme::Tsit5);
        assert!(ratio >= 16.0, "richardson ratio {ratio}");
    }
}
