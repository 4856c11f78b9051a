//! Small dense linear-algebra helpers: Gaussian elimination with partial
//! pivoting and least squares via normal equations.
//!
//! Systems in this crate are tiny (tens to a few hundred unknowns), so a
//! straightforward dense implementation is both sufficient and easy to audit.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    /// Creates an all-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }
}

/// Solves the square system `a x = b` by Gaussian elimination with partial
/// pivoting. `a` and `b` are consumed as scratch space.
pub fn solve_dense(mut a: Matrix, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "solve_dense: {}x{} matrix with rhs of length {}",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    for col in 0..n {
        // Partial pivot.
        let mut pivot_row = col;
        let mut pivot_val = a.get(col, col).abs();
        for r in (col + 1)..n {
            let v = a.get(r, col).abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if pivot_val < 1e-12 {
            return Err(Error::RankDeficient(format!(
                "pivot {pivot_val:.3e} at column {col}"
            )));
        }
        if pivot_row != col {
            for c in 0..n {
                let tmp = a.get(col, c);
                a.set(col, c, a.get(pivot_row, c));
                a.set(pivot_row, c, tmp);
            }
            b.swap(col, pivot_row);
        }
        let inv = 1.0 / a.get(col, col);
        for r in (col + 1)..n {
            let factor = a.get(r, col) * inv;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                let v = a.get(r, c) - factor * a.get(col, c);
                a.set(r, c, v);
            }
            b[r] -= factor * b[col];
        }
    }
    // Back substitution.
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for c in (row + 1)..n {
            s -= a.get(row, c) * x[c];
        }
        x[row] = s / a.get(row, row);
    }
    Ok(x)
}

/// Solves the overdetermined system `a x ~ b` in the least-squares sense via
/// the normal equations. Returns the coefficient vector.
pub fn lstsq(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = (a.rows, a.cols);
    if b.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "lstsq: {m} rows but rhs of length {}",
            b.len()
        )));
    }
    if m < n {
        return Err(Error::RankDeficient(format!(
            "lstsq: {m} observations for {n} unknowns"
        )));
    }
    let mut ata = Matrix::zeros(n, n);
    let mut atb = vec![0.0; n];
    for r in 0..m {
        for i in 0..n {
            let ari = a.get(r, i);
            if ari == 0.0 {
                continue;
            }
            atb[i] += ari * b[r];
            for j in i..n {
                ata.add(i, j, ari * a.get(r, j));
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            ata.set(i, j, ata.get(j, i));
        }
    }
    solve_dense(ata, atb)
        .map_err(|_| Error::RankDeficient("normal equations are singular".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn solves_small_system() {
        let mut a = Matrix::zeros(3, 3);
        let entries = [[2.0, 1.0, -1.0], [-3.0, -1.0, 2.0], [-2.0, 1.0, 2.0]];
        for (r, row) in entries.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                a.set(r, c, *v);
            }
        }
        let x = solve_dense(a, vec![8.0, -11.0, -3.0]).unwrap();
        assert_abs_diff_eq!(x[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[2], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_singular_system() {
        let mut a = Matrix::zeros(2, 2);
        a.set(0, 0, 1.0);
        a.set(0, 1, 2.0);
        a.set(1, 0, 2.0);
        a.set(1, 1, 4.0);
        assert!(solve_dense(a, vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn lstsq_recovers_line() {
        // y = 3 + 2 t fitted from exact samples.
        let ts: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut a = Matrix::zeros(ts.len(), 2);
        let mut b = vec![0.0; ts.len()];
        for (r, t) in ts.iter().enumerate() {
            a.set(r, 0, 1.0);
            a.set(r, 1, *t);
            b[r] = 3.0 + 2.0 * t;
        }
        let x = lstsq(&a, &b).unwrap();
        assert_abs_diff_eq!(x[0], 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-10);
    }
}
