//! Small dense helpers on row-major `f64` slices.

use alloc::vec::Vec;
use nalgebra::{DMatrix, SymmetricEigen};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `m · x` for a row-major `rows × x.len()` matrix.
pub fn matvec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    debug_assert_eq!(m.len(), rows * cols);
    m.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = alloc::vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// Largest singular value of a row-major `rows × cols` matrix.
pub fn spectral_norm(m: &[f64], rows: usize, cols: usize) -> f64 {
    let a = DMatrix::from_row_slice(rows, cols, m);
    let gram = a.transpose() * &a;
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    libm::sqrt(top.max(0.0))
}

/// Eigenvalues of a symmetric row-major matrix, ascending.
pub fn symmetric_eigenvalues(m: &[f64], d: usize) -> Vec<f64> {
    let a = DMatrix::from_row_slice(d, d, m);
    let mut ev: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Sum that does not depend on the order of `values`.
pub fn order_free_sum(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = [3.0, 0.0, 0.0, -5.0];
        assert!((spectral_norm(&m, 2, 2) - 5.0).abs() < 1e-12);
        assert!((spectral_norm(&identity(4), 4, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn order_free_sum_ignores_permutation() {
        let a = [1e16, 1.0, -1e16, 3.5, 1e-3];
        let b = [3.5, -1e16, 1e-3, 1.0, 1e16];
        assert_eq!(order_free_sum(&a).to_bits(), order_free_sum(&b).to_bits());
    }
}
