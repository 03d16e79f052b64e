//! Partial-pivot LU factorization of small dense real matrices.

use super::NumericsError;

/// Pivots with magnitude at or below this are treated as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// `P A = L U` packed in one row-major buffer (unit lower triangle implied).
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn factor(a: &[f64], n: usize) -> Result<Self, NumericsError> {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut pivot_row = col;
            let mut best = lu[col * n + col].abs();
            for r in col + 1..n {
                let v = lu[r * n + col].abs();
                if v > best {
                    best = v;
                    pivot_row = r;
                }
            }
            if !(best > PIVOT_TOLERANCE) {
                return Err(NumericsError::SingularMatrix { pivot: col });
            }
            if pivot_row != col {
                for j in 0..n {
                    lu.swap(col * n + j, pivot_row * n + j);
                }
                perm.swap(col, pivot_row);
            }
            let pivot = lu[col * n + col];
            for r in col + 1..n {
                let factor = lu[r * n + col] / pivot;
                lu[r * n + col] = factor;
                if factor != 0.0 {
                    for j in col + 1..n {
                        lu[r * n + j] -= factor * lu[col * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A X = B` for `B` with `m` columns (row-major `n x m`).
    pub fn solve(&self, b: &[f64], m: usize) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(&b[p * m..(p + 1) * m]);
        }
        // forward: L y = P b
        for i in 0..n {
            for j in 0..i {
                let l = self.lu[i * n + j];
                if l != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= l * x[j * m + c];
                    }
                }
            }
        }
        // backward: U x = y
        for i in (0..n).rev() {
            for j in i + 1..n {
                let u = self.lu[i * n + j];
                if u != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= u * x[j * m + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..m {
                x[i * m + c] /= d;
            }
        }
        x
    }

    /// Solves `A^T X = B`.
    pub fn solve_transpose(&self, b: &[f64], m: usize) -> Vec<f64> {
        let n = self.n;
        // A^T = U^T L^T P, so solve U^T z = b, L^T y = z, x = P^T y.
        let mut z = b.to_vec();
        for i in 0..n {
            for j in 0..i {
                let u = self.lu[j * n + i];
                if u != 0.0 {
                    for c in 0..m {
                        z[i * m + c] -= u * z[j * m + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..m {
                z[i * m + c] /= d;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let l = self.lu[j * n + i];
                if l != 0.0 {
                    for c in 0..m {
                        z[i * m + c] -= l * z[j * m + c];
                    }
                }
            }
        }
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p * m..(p + 1) * m].copy_from_slice(&z[i * m..(i + 1) * m]);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::{matmul_raw, transpose_raw};

    #[test]
    fn solves_with_pivoting() {
        // zero leading entry forces a row swap
        let a = [0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let lu = LuFactors::factor(&a, 3).unwrap();
        let b = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = lu.solve(&b, 2);
        let ax = matmul_raw(&a, &x, 3, 3, 2);
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        let xt = lu.solve_transpose(&b, 2);
        let at = transpose_raw(&a, 3, 3);
        let atx = matmul_raw(&at, &xt, 3, 3, 2);
        for (u, v) in atx.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_reports_pivot() {
        let a = [1.0, 2.0, 2.0, 4.0];
        assert!(matches!(
            LuFactors::factor(&a, 2),
            Err(NumericsError::SingularMatrix { pivot: 1 })
        ));
    }
}
