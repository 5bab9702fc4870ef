//! Dense and block-tridiagonal real linear solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solution of a dense system with a 1-norm condition estimate.
#[derive(Clone, Debug)]
pub struct DenseSolution {
    pub x: DVector<f64>,
    pub condition: f64,
}

/// LU with partial pivoting. The condition number is ‖A‖₁‖A⁻¹‖₁ from the explicit
/// inverse, affordable for the few-hundred-unknown spectral systems.
pub fn solve_dense(a: DMatrix<f64>, b: DVector<f64>, max_condition: f64) -> Result<DenseSolution> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: b.len() });
    }
    let norm_a = one_norm(&a);
    let lu = a.lu();
    let inv = lu.try_inverse().ok_or(Error::IllConditioned { condition: f64::INFINITY })?;
    let condition = norm_a * one_norm(&inv);
    if !condition.is_finite() || condition > max_condition {
        return Err(Error::IllConditioned { condition });
    }
    let x = lu.solve(&b).ok_or(Error::IllConditioned { condition })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned { condition });
    }
    Ok(DenseSolution { x, condition })
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Block-tridiagonal system: row i reads lower[i]·x[i−1] + diag[i]·x[i] + upper[i]·x[i+1] = rhs[i].
#[derive(Clone, Debug)]
pub struct BlockTridiagonal {
    pub block: usize,
    pub lower: Vec<DMatrix<f64>>,
    pub diag: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn zeros(n: usize, block: usize) -> Self {
        let z = DMatrix::zeros(block, block);
        Self { block, lower: vec![z.clone(); n], diag: vec![z.clone(); n], upper: vec![z; n] }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn apply(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut y = &self.diag[i] * &x[i];
                if i > 0 {
                    y += &self.lower[i] * &x[i - 1];
                }
                if i + 1 < n {
                    y += &self.upper[i] * &x[i + 1];
                }
                y
            })
            .collect()
    }

    /// Block Thomas elimination; each pivot block is factorized with partial pivoting.
    pub fn solve(&self, rhs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let n = self.len();
        let mut c_prime: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        let mut d_prime: Vec<DVector<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let (pivot, d_rhs) = if i == 0 {
                (self.diag[0].clone(), rhs[0].clone())
            } else {
                (
                    &self.diag[i] - &self.lower[i] * &c_prime[i - 1],
                    &rhs[i] - &self.lower[i] * &d_prime[i - 1],
                )
            };
            let lu = pivot.lu();
            let c = if i + 1 < n {
                lu.solve(&self.upper[i]).ok_or(Error::IllConditioned { condition: f64::INFINITY })?
            } else {
                DMatrix::zeros(self.block, self.block)
            };
            let d = lu.solve(&d_rhs).ok_or(Error::IllConditioned { condition: f64::INFINITY })?;
            c_prime.push(c);
            d_prime.push(d);
        }
        let mut x = d_prime;
        for i in (0..n.saturating_sub(1)).rev() {
            let next = x[i + 1].clone();
            x[i] -= &c_prime[i] * next;
        }
        Ok(x)
    }
}
