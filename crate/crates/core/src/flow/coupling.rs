//! Masked coupling layer with spline transforms driven by an MLP conditioner.

use nalgebra::{DMatrix, DVector};

use super::mlp::{Mlp, MlpCache};
use super::spline::{raw_len, Direction, RqsParams};
use crate::autodiff::Tape;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    /// `true` marks a conditioning (pass-through) coordinate.
    pub mask: Vec<bool>,
    pub conditioner: Mlp,
    pub bins: usize,
    pub bound: f64,
}

/// Intermediate values of a batched inverse pass.
pub struct CouplingCache {
    input: DMatrix<f64>,
    raw: DMatrix<f64>,
    mlp: MlpCache,
}

impl CouplingLayer {
    pub fn new(mask: Vec<bool>, bins: usize, bound: f64, depth: usize, width: usize, rng: &mut RngStream) -> Self {
        let cond = mask.iter().filter(|&&m| m).count();
        assert!(cond > 0 && cond < mask.len(), "mask must be neither all-zero nor all-one");
        let outputs = (mask.len() - cond) * raw_len(bins);
        CouplingLayer {
            conditioner: Mlp::new(cond, outputs, depth, width, rng),
            mask,
            bins,
            bound,
        }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    fn conditioning(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.mask[i]).collect()
    }

    fn transformed(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| !self.mask[i]).collect()
    }

    fn gather(&self, x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)])
    }

    /// Applies the layer to each column of `x`; returns outputs and per-column logdets.
    pub fn apply_batch(&self, x: &DMatrix<f64>, direction: Direction) -> (DMatrix<f64>, Vec<f64>) {
        let raw = self.conditioner.forward(&self.gather(x, &self.conditioning()));
        self.splines(x, &raw, direction)
    }

    fn splines(&self, x: &DMatrix<f64>, raw: &DMatrix<f64>, direction: Direction) -> (DMatrix<f64>, Vec<f64>) {
        let per = raw_len(self.bins);
        let mut y = x.clone();
        let mut logdet = vec![0.0; x.ncols()];
        for (c, ld) in logdet.iter_mut().enumerate() {
            let col = raw.column(c);
            for (j, &i) in self.transformed().iter().enumerate() {
                let params = RqsParams::from_raw(&col.as_slice()[j * per..(j + 1) * per], self.bins, self.bound);
                let (v, l) = params.apply(x[(i, c)], direction);
                y[(i, c)] = v;
                *ld += l;
            }
        }
        (y, logdet)
    }

    pub fn forward(&self, x: &DVector<f64>) -> (DVector<f64>, f64) {
        let (y, ld) = self.apply_batch(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()), Direction::Forward);
        (y.column(0).into_owned(), ld[0])
    }

    pub fn inverse(&self, y: &DVector<f64>) -> (DVector<f64>, f64) {
        let (x, ld) = self.apply_batch(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()), Direction::Inverse);
        (x.column(0).into_owned(), ld[0])
    }

    /// Inverse pass keeping what [`Self::inverse_backward`] needs.
    pub fn inverse_cached(&self, y: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, CouplingCache) {
        let (raw, mlp) = self.conditioner.forward_cached(&self.gather(y, &self.conditioning()));
        let (x, ld) = self.splines(y, &raw, Direction::Inverse);
        (x, ld, CouplingCache { input: y.clone(), raw, mlp })
    }

    /// Back-propagates through the inverse pass. `grad_logdet` is the upstream
    /// gradient of every column's logdet. Returns the gradient w.r.t. the input.
    pub fn inverse_backward(
        &self,
        cache: &CouplingCache,
        grad_x: &DMatrix<f64>,
        grad_logdet: f64,
        grads: &mut Mlp,
    ) -> DMatrix<f64> {
        let per = raw_len(self.bins);
        let transformed = self.transformed();
        let conditioning = self.conditioning();
        let mut grad_y = grad_x.clone();
        let mut grad_raw = DMatrix::zeros(cache.raw.nrows(), cache.raw.ncols());
        let tape = Tape::new();
        for c in 0..cache.input.ncols() {
            for (j, &i) in transformed.iter().enumerate() {
                tape.clear();
                let raw: Vec<_> = (0..per).map(|k| tape.var(cache.raw[(j * per + k, c)])).collect();
                let y = tape.var(cache.input[(i, c)]);
                let params = RqsParams::from_raw(&raw, self.bins, self.bound);
                let (x, ld) = params.inverse(y);
                let g = tape.gradient(&[(x, grad_x[(i, c)]), (ld, grad_logdet)]);
                grad_y[(i, c)] = g.wrt(y);
                for (k, r) in raw.iter().enumerate() {
                    grad_raw[(j * per + k, c)] = g.wrt(*r);
                }
            }
        }
        let grad_cond = self.conditioner.backward(&cache.mlp, &grad_raw, grads);
        for (r, &i) in conditioning.iter().enumerate() {
            for c in 0..grad_y.ncols() {
                grad_y[(i, c)] += grad_cond[(r, c)];
            }
        }
        grad_y
    }
}
