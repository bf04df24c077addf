use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lorenz63Params {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for Lorenz63Params {
    fn default() -> Self {
        Lorenz63Params {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

impl Lorenz63Params {
    /// The non-trivial equilibrium with positive `x`, `y`.
    pub fn positive_equilibrium(&self) -> [f64; 3] {
        let r = (self.beta * (self.rho - 1.0)).sqrt();
        [r, r, self.rho - 1.0]
    }
}

pub fn lorenz_vector_field(x: &[f64; 3], p: &Lorenz63Params) -> [f64; 3] {
    [
        p.sigma * (x[1] - x[0]),
        x[0] * (p.rho - x[2]) - x[1],
        x[0] * x[1] - p.beta * x[2],
    ]
}
