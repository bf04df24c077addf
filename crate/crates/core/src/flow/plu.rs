//! Invertible linear layer `y = P L U x`.
//!
//! `P` is a fixed permutation, `L` is unit lower triangular, and `U` is upper
//! triangular with diagonal `sign · exp(log_diag)`. Off-diagonal entries are
//! stored packed, row by row.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct PluLayer {
    /// `(P v)_i = v[perm[i]]`.
    pub perm: Vec<usize>,
    /// Strictly lower part of `L`, packed row-major.
    pub lower: Vec<f64>,
    /// Strictly upper part of `U`, packed row-major.
    pub upper: Vec<f64>,
    pub log_diag: Vec<f64>,
    pub sign: Vec<f64>,
}

#[inline]
fn lower_index(i: usize, j: usize) -> usize {
    debug_assert!(i > j);
    i * (i - 1) / 2 + j
}

#[inline]
fn upper_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

impl PluLayer {
    /// `L = U = I` behind the given permutation.
    pub fn with_permutation(perm: Vec<usize>) -> Self {
        let n = perm.len();
        let off = n * (n - 1) / 2;
        PluLayer {
            perm,
            lower: vec![0.0; off],
            upper: vec![0.0; off],
            log_diag: vec![0.0; n],
            sign: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.sign[i] * self.log_diag[i].exp()
    }

    pub fn l(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.lower[lower_index(i, j)],
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => 0.0,
        }
    }

    pub fn u(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => self.upper[upper_index(self.dim(), i, j)],
            std::cmp::Ordering::Equal => self.diag(i),
            std::cmp::Ordering::Greater => 0.0,
        }
    }

    /// The dense matrix `P L U`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        let l = DMatrix::from_fn(n, n, |i, j| self.l(i, j));
        let u = DMatrix::from_fn(n, n, |i, j| self.u(i, j));
        let lu = l * u;
        DMatrix::from_fn(n, n, |i, j| lu[(self.perm[i], j)])
    }

    /// `log |det(P L U)|`, independent of the input.
    pub fn log_abs_det(&self) -> f64 {
        self.log_diag.iter().sum()
    }

    pub fn forward(&self, x: &DVector<f64>) -> (DVector<f64>, f64) {
        let n = self.dim();
        let w = DVector::from_fn(n, |i, _| (i..n).map(|j| self.u(i, j) * x[j]).sum::<f64>());
        let v = DVector::from_fn(n, |i, _| w[i] + (0..i).map(|j| self.l(i, j) * w[j]).sum::<f64>());
        let y = DVector::from_fn(n, |i, _| v[self.perm[i]]);
        (y, self.log_abs_det())
    }

    fn solve_column(&self, y: &[f64], x: &mut [f64]) {
        let n = self.dim();
        let mut v = vec![0.0; n];
        for i in 0..n {
            v[self.perm[i]] = y[i];
        }
        for i in 0..n {
            let mut acc = v[i];
            for j in 0..i {
                acc -= self.l(i, j) * v[j];
            }
            v[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = v[i];
            for j in (i + 1)..n {
                acc -= self.u(i, j) * x[j];
            }
            x[i] = acc / self.diag(i);
        }
    }

    /// Exact inverse by two triangular solves; returns `log |det|` of the inverse.
    pub fn inverse(&self, y: &DVector<f64>) -> (DVector<f64>, f64) {
        let mut x = DVector::zeros(self.dim());
        self.solve_column(y.as_slice(), x.as_mut_slice());
        (x, -self.log_abs_det())
    }

    pub fn inverse_batch(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(y.nrows(), y.ncols());
        for (yc, mut xc) in y.column_iter().zip(x.column_iter_mut()) {
            let yv: Vec<f64> = yc.iter().copied().collect();
            let mut xv = vec![0.0; yv.len()];
            self.solve_column(&yv, &mut xv);
            xc.copy_from_slice(&xv);
        }
        x
    }

    /// Back-propagates through [`Self::inverse_batch`].
    ///
    /// `x` is the output of the inverse, `grad_x` its upstream gradient, and
    /// `grad_logdet` the summed upstream gradient of the per-sample inverse
    /// log-determinant. Returns the gradient with respect to the input `y`.
    pub fn inverse_backward(
        &self,
        x: &DMatrix<f64>,
        grad_x: &DMatrix<f64>,
        grad_logdet: f64,
        grads: &mut PluLayer,
    ) -> DMatrix<f64> {
        let n = self.dim();
        let mut grad_y = DMatrix::zeros(n, x.ncols());
        let mut gu_diag = vec![0.0; n];
        for c in 0..x.ncols() {
            let xc = x.column(c);
            let gx = grad_x.column(c);
            // v = U x
            let v: Vec<f64> = (0..n).map(|i| (i..n).map(|j| self.u(i, j) * xc[j]).sum()).collect();
            // Uᵀ gv = gx
            let mut gv = vec![0.0; n];
            for i in 0..n {
                let mut acc = gx[i];
                for j in 0..i {
                    acc -= self.u(j, i) * gv[j];
                }
                gv[i] = acc / self.diag(i);
            }
            for i in 0..n {
                gu_diag[i] -= gv[i] * xc[i];
                for j in (i + 1)..n {
                    grads.upper[upper_index(n, i, j)] -= gv[i] * xc[j];
                }
            }
            // Lᵀ gz = gv
            let mut gz = vec![0.0; n];
            for i in (0..n).rev() {
                let mut acc = gv[i];
                for j in (i + 1)..n {
                    acc -= self.l(j, i) * gz[j];
                }
                gz[i] = acc;
            }
            // v here is L⁻¹ Pᵀ y
            for i in 0..n {
                for j in 0..i {
                    grads.lower[lower_index(i, j)] -= gz[i] * v[j];
                }
            }
            for i in 0..n {
                grad_y[(i, c)] = gz[self.perm[i]];
            }
        }
        for i in 0..n {
            grads.log_diag[i] += gu_diag[i] * self.diag(i) - grad_logdet;
        }
        grad_y
    }

    pub fn zeros_like(&self) -> PluLayer {
        let mut z = PluLayer::with_permutation(self.perm.clone());
        z.sign = self.sign.clone();
        z
    }
}
