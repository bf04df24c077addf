//! Fully connected conditioner network with GELU activations.

use nalgebra::{DMatrix, DVector};

use crate::rng::RngStream;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_K * (z + GELU_C * z * z * z)).tanh())
}

#[inline]
pub fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_K * (z + GELU_C * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * z * z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weight * x;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        z
    }
}

/// `depth` hidden GELU layers of size `width`, then a linear read-out.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Pre-activations and inputs of each layer, kept for the backward pass.
pub struct MlpCache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// Hidden weights ~ N(0, 2 / fan_in), zero biases, zero read-out layer.
    pub fn new(inputs: usize, outputs: usize, depth: usize, width: usize, rng: &mut RngStream) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = inputs;
        for _ in 0..depth {
            let std = (2.0 / fan_in as f64).sqrt();
            let mut d = Dense::zeros(fan_in, width);
            d.weight = DMatrix::from_fn(width, fan_in, |_, _| std * rng.standard_normal());
            layers.push(d);
            fan_in = width;
        }
        layers.push(Dense::zeros(fan_in, outputs));
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    /// Column-batched evaluation: `x` is `in × B`.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&a);
            if i < last {
                z.apply(|v| *v = gelu(*v));
            }
            a = z;
        }
        a
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, MlpCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&a);
            inputs.push(a);
            if i < last {
                a = z.map(gelu);
                pre.push(z);
            } else {
                a = z;
            }
        }
        (a, MlpCache { inputs, pre })
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &DMatrix<f64>, grads: &mut Mlp) -> DMatrix<f64> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                g.zip_apply(&cache.pre[i], |gv, z| *gv *= gelu_grad(z));
            }
            let gl = &mut grads.layers[i];
            gl.weight.gemm(1.0, &g, &cache.inputs[i].transpose(), 1.0);
            for col in g.column_iter() {
                gl.bias += col;
            }
            g = self.layers[i].weight.tr_mul(&g);
        }
        g
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for z in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(z + h) - gelu(z - h)) / (2.0 * h);
            assert!((gelu_grad(z) - fd).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn fresh_network_outputs_zero() {
        let mut rng = RngStream::new(1);
        let mlp = Mlp::new(2, 13, 3, 16, &mut rng);
        let out = mlp.forward(&DMatrix::from_fn(2, 5, |i, j| (i + j) as f64 - 2.0));
        assert_eq!(out, DMatrix::zeros(13, 5));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngStream::new(3);
        let mut mlp = Mlp::new(2, 3, 2, 5, &mut rng);
        for v in mlp.layers.last_mut().unwrap().weight.iter_mut() {
            *v = rng.standard_normal();
        }
        let x = DMatrix::from_fn(2, 4, |_, _| rng.standard_normal());
        let weights = DMatrix::from_fn(3, 4, |_, _| rng.standard_normal());
        let loss = |m: &Mlp, x: &DMatrix<f64>| m.forward(x).component_mul(&weights).sum();

        let (_, cache) = mlp.forward_cached(&x);
        let mut grads = mlp.zeros_like();
        let gx = mlp.backward(&cache, &weights, &mut grads);

        let h = 1e-6;
        for (li, layer) in mlp.layers.clone().iter().enumerate() {
            for idx in 0..layer.weight.len() {
                let mut p = mlp.clone();
                p.layers[li].weight[idx] += h;
                let mut m = mlp.clone();
                m.layers[li].weight[idx] -= h;
                let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
                assert!((grads.layers[li].weight[idx] - fd).abs() < 1e-6 * fd.abs().max(1.0));
            }
            for idx in 0..layer.bias.len() {
                let mut p = mlp.clone();
                p.layers[li].bias[idx] += h;
                let mut m = mlp.clone();
                m.layers[li].bias[idx] -= h;
                let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
                assert!((grads.layers[li].bias[idx] - fd).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
            assert!((gx[idx] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
